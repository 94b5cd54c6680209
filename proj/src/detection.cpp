#include "haan/detection.hpp"

#include "haan/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace haan {

namespace {

EvalProtocol make_grid(std::string name, int lo_hundredths, int hi_hundredths) {
  EvalProtocol p;
  p.name = std::move(name);
  for (int t = lo_hundredths; t <= hi_hundredths; t += 5) p.thresholds.push_back(t / 100.0);
  return p;
}

}  // namespace

EvalProtocol EvalProtocol::fineaction() { return make_grid("fineaction", 50, 95); }
EvalProtocol EvalProtocol::finegym() { return make_grid("finegym", 10, 50); }

EvalProtocol EvalProtocol::from_string(const std::string& name) {
  if (name == "fineaction") return fineaction();
  if (name == "finegym") return finegym();
  throw EvaluationError("unknown protocol '" + name + "' (expected fineaction or finegym)");
}

void EvalProtocol::validate() const {
  if (thresholds.empty()) throw EvaluationError("protocol has no thresholds");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0 && thresholds[i] <= 1.0)) throw EvaluationError("tIoU threshold outside (0, 1]");
    if (i > 0 && !(thresholds[i] > thresholds[i - 1])) throw EvaluationError("tIoU thresholds must increase");
  }
}

void InferenceConfig::validate() const {
  if (classify_topk < 1) throw EvaluationError("classify_topk must be >= 1");
  if (!(classify_threshold > 0.0 && classify_threshold < 1.0))
    throw EvaluationError("classify_threshold must lie in (0, 1)");
  if (merge_gap < 0) throw EvaluationError("merge_gap must be >= 0");
  if (!std::isfinite(alpha)) throw EvaluationError("alpha must be finite");
}

std::vector<int> classify_video(const Eigen::Ref<const Eigen::MatrixXd>& scores, const InferenceConfig& cfg) {
  if (scores.rows() < 1) throw EvaluationError("classify_video: video has no clips");
  const Eigen::Index k = std::min<Eigen::Index>(cfg.classify_topk, scores.rows());
  std::vector<int> positive;
  std::vector<double> col(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index j = 0; j < scores.cols(); ++j) {
    for (Eigen::Index i = 0; i < scores.rows(); ++i) col[i] = scores(i, j);
    std::partial_sort(col.begin(), col.begin() + k, col.end(), std::greater<>());
    const double avg = std::accumulate(col.begin(), col.begin() + k, 0.0) / static_cast<double>(k);
    if (ad::sigmoid(avg) > cfg.classify_threshold) positive.push_back(static_cast<int>(j));
  }
  return positive;
}

std::vector<DetectionSegment> detect_segments(std::span<const double> scores, int fine_class,
                                              const InferenceConfig& cfg, const std::string& video_id) {
  std::vector<DetectionSegment> out;
  if (scores.empty()) return out;
  const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  const double thresh = mean + cfg.alpha * (*mx - *mn);

  const int T = static_cast<int>(scores.size());
  int i = 0;
  while (i < T) {
    if (!(scores[i] > thresh)) {
      ++i;
      continue;
    }
    const int start = i;
    int end = i + 1;  // one past the last positive clip of the current segment
    for (int j = end; j < T; ++j) {
      if (scores[j] > thresh) {
        if (j - end <= cfg.merge_gap) end = j + 1;
        else break;
      } else if (j - end + 1 > cfg.merge_gap) {
        break;
      }
    }
    const double conf = std::accumulate(scores.begin() + start, scores.begin() + end, 0.0) / (end - start);
    out.push_back(DetectionSegment{video_id, fine_class, start, end, conf});
    i = end;
  }
  return out;
}

double temporal_iou(int a_start, int a_end, int b_start, int b_end) {
  const int inter = std::max(0, std::min(a_end, b_end) - std::max(a_start, b_start));
  const int uni = (a_end - a_start) + (b_end - b_start) - inter;
  return uni > 0 ? static_cast<double>(inter) / uni : 0.0;
}

void sort_detections(std::vector<DetectionSegment>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const DetectionSegment& a, const DetectionSegment& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.video_id != b.video_id) return a.video_id < b.video_id;
    return a.start_clip < b.start_clip;
  });
}

std::optional<double> average_precision(std::vector<DetectionSegment> detections,
                                        const std::vector<GroundTruthSegment>& ground_truth, double threshold) {
  if (ground_truth.empty()) return std::nullopt;
  sort_detections(detections);
  std::vector<char> used(ground_truth.size(), 0);
  std::size_t tp = 0;
  double ap = 0.0;
  for (std::size_t r = 0; r < detections.size(); ++r) {
    const auto& det = detections[r];
    std::size_t best = ground_truth.size();
    double best_iou = -1.0;
    for (std::size_t g = 0; g < ground_truth.size(); ++g) {
      if (used[g] || ground_truth[g].video_id != det.video_id) continue;
      const double iou = temporal_iou(det, ground_truth[g]);
      if (iou >= threshold && iou > best_iou) {
        best_iou = iou;
        best = g;
      }
    }
    if (best == ground_truth.size()) continue;
    used[best] = 1;
    ++tp;
    ap += static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  return ap / static_cast<double>(ground_truth.size());
}

MapReport map_report_from_detections(const std::vector<DetectionSegment>& detections,
                                     const std::vector<std::string>& video_ids, const DatasetManifest& manifest,
                                     const EvalProtocol& protocol, const InferenceConfig& cfg) {
  protocol.validate();
  const std::size_t C = manifest.hierarchy.num_fine();
  std::vector<std::vector<GroundTruthSegment>> gt(C);
  for (const auto& id : video_ids) {
    const auto& v = manifest.video(id);
    if (!v.segments) throw EvaluationError("video " + id + " has no temporal annotations; evaluation requires segments");
    for (const auto& s : *v.segments) gt[s.fine_class].push_back({id, s.fine_class, s.start_clip, s.end_clip});
  }
  std::vector<std::vector<DetectionSegment>> by_class(C);
  for (const auto& d : detections) by_class.at(static_cast<std::size_t>(d.fine_class)).push_back(d);

  MapReport rep;
  rep.protocol = protocol;
  rep.inference = cfg;
  rep.class_names = manifest.hierarchy.fine;
  rep.map_per_threshold.assign(protocol.thresholds.size(), 0.0);
  std::size_t evaluated = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (gt[c].empty()) continue;
    ++evaluated;
    auto& aps = rep.per_class_ap[manifest.hierarchy.fine[c]];
    for (std::size_t t = 0; t < protocol.thresholds.size(); ++t) {
      const double ap = *average_precision(by_class[c], gt[c], protocol.thresholds[t]);
      aps.push_back(ap);
      rep.map_per_threshold[t] += ap;
    }
  }
  if (evaluated == 0) throw EvaluationError("no ground-truth segments in the evaluated videos");
  for (auto& m : rep.map_per_threshold) m /= static_cast<double>(evaluated);
  rep.avg_map = std::accumulate(rep.map_per_threshold.begin(), rep.map_per_threshold.end(), 0.0) /
                static_cast<double>(rep.map_per_threshold.size());
  return rep;
}

MapReport map_report(const std::vector<VideoScores>& videos, const DatasetManifest& manifest,
                     const EvalProtocol& protocol, const InferenceConfig& cfg,
                     std::vector<DetectionSegment>* detections_out) {
  cfg.validate();
  std::vector<DetectionSegment> detections;
  std::vector<std::string> ids;
  for (const auto& vs : videos) {
    ids.push_back(vs.video_id);
    if (static_cast<std::size_t>(vs.scores.cols()) != manifest.hierarchy.num_fine())
      throw EvaluationError("video " + vs.video_id + ": score matrix has wrong class count");
    std::vector<double> col(static_cast<std::size_t>(vs.scores.rows()));
    for (int j : classify_video(vs.scores, cfg)) {
      for (Eigen::Index i = 0; i < vs.scores.rows(); ++i) col[i] = vs.scores(i, j);
      auto segs = detect_segments(col, j, cfg, vs.video_id);
      detections.insert(detections.end(), segs.begin(), segs.end());
    }
  }
  MapReport rep = map_report_from_detections(detections, ids, manifest, protocol, cfg);
  if (detections_out) *detections_out = std::move(detections);
  return rep;
}

nlohmann::json to_json(const InferenceConfig& cfg) {
  return {{"alpha", cfg.alpha},
          {"classify_topk", cfg.classify_topk},
          {"classify_threshold", cfg.classify_threshold},
          {"merge_gap", cfg.merge_gap},
          {"segment_confidence", "mean_clip_score"}};
}

nlohmann::json to_json(const MapReport& report) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [name, aps] : report.per_class_ap) per_class[name] = aps;
  nlohmann::json per_thr = nlohmann::json::object();
  for (std::size_t t = 0; t < report.protocol.thresholds.size(); ++t) {
    std::ostringstream key;
    key.precision(2);
    key << std::fixed << report.protocol.thresholds[t];
    per_thr[key.str()] = report.map_per_threshold[t];
  }
  return {{"protocol", report.protocol.name},
          {"thresholds", report.protocol.thresholds},
          {"per_class_ap", per_class},
          {"map_per_threshold", per_thr},
          {"avg_map", report.avg_map},
          {"inference_config", to_json(report.inference)}};
}

std::string to_csv(const MapReport& report) {
  std::ostringstream os;
  os.precision(10);
  os << "class,threshold,ap\n";
  for (const auto& [name, aps] : report.per_class_ap)
    for (std::size_t t = 0; t < aps.size(); ++t) os << name << "," << report.protocol.thresholds[t] << "," << aps[t] << "\n";
  return os.str();
}

nlohmann::json to_json(const DetectionSegment& seg) {
  return {{"video_id", seg.video_id},
          {"fine_class", seg.fine_class},
          {"start_clip", seg.start_clip},
          {"end_clip", seg.end_clip},
          {"confidence", seg.confidence}};
}

}  // namespace haan
