#pragma once

#include "haan/autodiff.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace haan {

using FeatureMatrix = Matrix<float>;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a split cannot satisfy its class-coverage contract.
class InfeasibleSplitError : public std::runtime_error {
 public:
  InfeasibleSplitError(const std::string& cls, const std::string& why)
      : std::runtime_error("infeasible class '" + cls + "': " + why), class_name(cls) {}
  std::string class_name;
};

struct LabelHierarchy {
  std::vector<std::string> fine;
  std::vector<std::string> coarse;
  std::vector<std::vector<int>> grouping;  // coarse index -> fine indices

  std::size_t num_fine() const { return fine.size(); }
  std::size_t num_coarse() const { return coarse.size(); }

  /// Checks that `grouping` partitions the fine classes into non-empty groups.
  void validate() const;
  /// Coarse index owning each fine class.
  std::vector<int> fine_to_coarse() const;
};

struct SegmentAnnotation {
  int fine_class = 0;
  int start_clip = 0;
  int end_clip = 0;  // exclusive
  std::vector<int> atomic_sequence;
};

struct VideoRecord {
  std::string id;
  int num_clips = 0;
  std::vector<int> fine_labels;  // sorted positive fine indices
  std::optional<std::vector<SegmentAnnotation>> segments;
  std::string feature_file;

  /// Multi-hot encoding of `fine_labels` over `num_classes`.
  std::vector<float> multi_hot(std::size_t num_classes) const;
};

struct DatasetManifest {
  int feature_dim = 0;
  LabelHierarchy hierarchy;
  std::vector<VideoRecord> videos;
  std::optional<double> clip_duration;

  void validate() const;
  const VideoRecord& video(const std::string& id) const;
  std::size_t index_of(const std::string& id) const;
};

/// Manifest plus every video's T x d clip features, indexed like `manifest.videos`.
struct Dataset {
  DatasetManifest manifest;
  std::vector<FeatureMatrix> features;
};

/// Per-clip generator atomic ids (-1 = background), keyed by video id.
using AtomicTruth = std::map<std::string, std::vector<int>>;

// Feature file: "HAANFEAT", u32 T, u32 d (little endian), then T*d little-endian float32, row-major.
void write_feature_file(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix read_feature_file(const std::filesystem::path& path);

/// Loads and validates a dataset directory. Features are read eagerly unless `load_features` is false.
Dataset load_dataset(const std::filesystem::path& root, bool load_features = true);
DatasetManifest load_manifest(const std::filesystem::path& root);
FeatureMatrix load_video_features(const std::filesystem::path& root, const DatasetManifest& manifest,
                                  const VideoRecord& video);

/// Writes manifest.json and feature files. Refuses to overwrite an existing manifest unless `force`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& root, bool force = false);

void save_atomic_truth(const AtomicTruth& truth, const std::filesystem::path& path);
AtomicTruth load_atomic_truth(const std::filesystem::path& path);

/// y'_u = 1 iff some fine class of O_u is positive.
std::vector<float> coarse_labels_from_fine(const std::vector<float>& fine_multi_hot, const LabelHierarchy& hierarchy);

/// Decimal u64; throws std::invalid_argument on anything else.
std::uint64_t parse_seed(const std::string& text);

/// `key = value` lines, `#` starts a comment, blank lines skipped. Throws DatasetError naming the line.
std::vector<std::pair<std::string, std::string>> read_key_value_file(const std::filesystem::path& path);

struct IntRange {
  int lo = 0;
  int hi = 0;  // inclusive
};

struct SynthConfig {
  int num_atomic = 6;
  int atomic_dim = 32;
  std::vector<std::vector<int>> compositions;
  std::vector<std::string> coarse_names;
  std::vector<std::vector<int>> coarse_grouping;
  int train_videos = 200;
  int val_videos = 60;
  IntRange segments_per_video{1, 1};
  IntRange clips_per_atomic{3, 4};
  IntRange gap_clips{2, 6};
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  /// Six atomics, eight fine classes that share atomics, three coarse groups.
  static SynthConfig standard();

  /// Keys: num_atomic, atomic_dim, compositions ("0 1; 0 2"), coarse_names ("a, b"), coarse_grouping,
  /// train_videos, val_videos, segments_min/max, clips_per_atomic_min/max, gap_min/max, noise_sigma, seed.
  void set(const std::string& key, const std::string& value);
  nlohmann::json to_json() const;
  /// Flat `key = value` text applied on top of standard().
  static SynthConfig from_file(const std::filesystem::path& path);
};

struct SyntheticCorpus {
  Dataset dataset;
  AtomicTruth truth;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  Matrix<float> prototypes;  // rows 0..A-1 atomics, row A background
};

SyntheticCorpus generate_synthetic(const SynthConfig& config);

struct SplitResult {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<double> per_class_ratio;  // train share of each fine class's videos
  double objective = 0.0;
};

/// Greedy ratio-controlled train/val split, best of `attempts` seeded runs.
SplitResult greedy_split(const DatasetManifest& manifest, double target_ratio, int attempts, std::uint64_t seed);

}  // namespace haan
