#pragma once

#include "haan/dataset.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace haan {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DetectionSegment {
  std::string video_id;
  int fine_class = 0;
  int start_clip = 0;
  int end_clip = 0;  // exclusive
  double confidence = 0.0;
};

struct GroundTruthSegment {
  std::string video_id;
  int fine_class = 0;
  int start_clip = 0;
  int end_clip = 0;
};

struct EvalProtocol {
  std::string name;
  std::vector<double> thresholds;

  /// tIoU 0.50:0.05:0.95
  static EvalProtocol fineaction();
  /// tIoU 0.10:0.05:0.50
  static EvalProtocol finegym();
  static EvalProtocol from_string(const std::string& name);
  void validate() const;
};

struct InferenceConfig {
  double alpha = 0.1;
  int classify_topk = 5;
  double classify_threshold = 0.5;
  int merge_gap = 0;

  void validate() const;
};

/// Step one: fine classes whose sigmoid(mean of top-k clip logits) is strictly above the threshold.
std::vector<int> classify_video(const Eigen::Ref<const Eigen::MatrixXd>& scores, const InferenceConfig& cfg);

/// Step two: clips strictly above mean + alpha * (max - min) form segments; runs separated by at most
/// `merge_gap` clips are bridged. Confidence is the mean score inside the segment.
std::vector<DetectionSegment> detect_segments(std::span<const double> scores, int fine_class,
                                              const InferenceConfig& cfg, const std::string& video_id = {});

/// |a ∩ b| / |a ∪ b| on half-open clip ranges.
double temporal_iou(int a_start, int a_end, int b_start, int b_end);

template <typename A, typename B>
double temporal_iou(const A& a, const B& b) {
  return temporal_iou(a.start_clip, a.end_clip, b.start_clip, b.end_clip);
}

/// Detections sorted by (confidence desc, video id, start); detections ranked by sort_detections.
void sort_detections(std::vector<DetectionSegment>& dets);

/// AP of one class at one tIoU threshold with greedy one-to-one matching. nullopt when there is no
/// ground truth (the class is then left out of the mean).
std::optional<double> average_precision(std::vector<DetectionSegment> detections,
                                        const std::vector<GroundTruthSegment>& ground_truth, double threshold);

struct VideoScores {
  std::string video_id;
  Eigen::MatrixXd scores;  // T x C clip logits
};

struct MapReport {
  EvalProtocol protocol;
  InferenceConfig inference;
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<double>> per_class_ap;  // evaluated classes only, one AP per threshold
  std::vector<double> map_per_threshold;
  double avg_map = 0.0;
};

/// Runs both inference steps on every video and scores them against the manifest segments.
MapReport map_report(const std::vector<VideoScores>& videos, const DatasetManifest& manifest,
                     const EvalProtocol& protocol, const InferenceConfig& cfg,
                     std::vector<DetectionSegment>* detections_out = nullptr);

/// Same as map_report for precomputed detections.
MapReport map_report_from_detections(const std::vector<DetectionSegment>& detections,
                                     const std::vector<std::string>& video_ids, const DatasetManifest& manifest,
                                     const EvalProtocol& protocol, const InferenceConfig& cfg);

nlohmann::json to_json(const MapReport& report);
nlohmann::json to_json(const InferenceConfig& cfg);
std::string to_csv(const MapReport& report);
nlohmann::json to_json(const DetectionSegment& seg);

}  // namespace haan
