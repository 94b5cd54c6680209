#pragma once

#include "haan/clustering.hpp"
#include "haan/dataset.hpp"
#include "haan/detection.hpp"
#include "haan/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace haan {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a checkpoint does not fit the dataset or configuration it is used with.
class ArtifactMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;
  double learning_rate = 3e-5;
  double lambda_mil = 1.0;
  double lambda_pseudo = 0.001;
  double lambda_concept = 0.01;
  double lambda_coarse = 1.0;
  int num_concepts = 500;
  int topk_concepts = 5;
  ClusterMethod clustering = ClusterMethod::kmeans;
  ComposeMode compose = ComposeMode::mean;
  DistanceKind distance = DistanceKind::cosine;
  LossSet losses;
  std::uint64_t seed = 0;
  int embed_dim = 64;
  int hidden_dim = 0;          // 0: same as embed_dim
  int concept_hidden_dim = 0;  // 0: same as embed_dim
  int cluster_max_iters = 100;
  // validation-time inference
  double alpha = 0.1;
  int classify_topk = 5;
  double classify_threshold = 0.5;
  int merge_gap = 0;
  std::string protocol = "finegym";

  void validate() const;
  ObjectiveConfig objective() const;
  InferenceConfig inference() const;
  ModelShape shape(const DatasetManifest& manifest) const;

  /// Applies one `key = value` setting; keys are the field names above.
  void set(const std::string& key, const std::string& value);
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  /// Flat key-value text: one `key = value` per line, `#` starts a comment.
  static TrainConfig from_file(const std::filesystem::path& path, TrainConfig base);
  static TrainConfig from_file(const std::filesystem::path& path) { return from_file(path, TrainConfig{}); }
};

// Sub-seeds derived from the single run seed.
inline constexpr std::uint64_t kInitSeedOffset = 1;
inline constexpr std::uint64_t kShuffleSeedOffset = 2;
inline constexpr std::uint64_t kClusterSeedOffset = 1000;

template <typename Scalar>
struct AdamState {
  std::vector<Matrix<Scalar>> first;
  std::vector<Matrix<Scalar>> second;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState zeros_like(const ParamSet<Scalar>& params) {
    AdamState s;
    for (const auto& v : params.values) {
      s.first.push_back(Matrix<Scalar>::Zero(v.rows(), v.cols()));
      s.second.push_back(Matrix<Scalar>::Zero(v.rows(), v.cols()));
    }
    return s;
  }
};

/// Bias-corrected Adam update. Throws TrainingError naming the parameter on a non-finite gradient.
template <typename Scalar>
void adam_step(ParamSet<Scalar>& params, const GradientSet<Scalar>& grads, AdamState<Scalar>& state,
               double learning_rate) {
  if (grads.grads.size() != params.size() || state.first.size() != params.size())
    throw ContractError("adam_step: parameter/gradient/state size mismatch");
  for (std::size_t p = 0; p < params.size(); ++p)
    if (!grads.grads[p].allFinite()) throw TrainingError("non-finite gradient in parameter " + params.names[p]);
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(state.beta1);
  const auto b2 = static_cast<Scalar>(state.beta2);
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& g = grads.grads[p];
    state.first[p] = b1 * state.first[p] + (Scalar(1) - b1) * g;
    state.second[p] = b2 * state.second[p] + (Scalar(1) - b2) * g.cwiseAbs2();
    const auto m_hat = state.first[p].array() / static_cast<Scalar>(c1);
    const auto v_hat = state.second[p].array() / static_cast<Scalar>(c2);
    params.values[p].array() -=
        static_cast<Scalar>(learning_rate) * m_hat / (v_hat.sqrt() + static_cast<Scalar>(state.epsilon));
  }
}

struct PseudoRefresh {
  std::vector<std::vector<int>> labels;  // per video of the clustered subset, per clip
  ClusterModel model;
};

/// Encodes every clip of `videos` with the current encoder, clusters the pool and labels each clip.
PseudoRefresh refresh_pseudo_labels(const Dataset& dataset, const std::vector<std::size_t>& videos,
                                    const HaanParams<float>& params, const TrainConfig& config, int epoch);

struct MetricsRecord {
  int epoch = 0;
  int batch = -1;  // -1 marks the end-of-epoch record
  LossBreakdown loss;
  std::optional<double> val_avg_map;

  nlohmann::json to_json() const;
};

struct TrainSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

struct TrainResult {
  HaanParams<float> best;
  HaanParams<float> final;
  int best_epoch = 0;  // 0: initialisation
  std::optional<double> best_val_avg_map;
  std::vector<MetricsRecord> log;
};

/// Full training loop. When `out_dir` is given, writes init/last/best checkpoints and metrics.jsonl there.
TrainResult train(const Dataset& dataset, const TrainSplit& split, const TrainConfig& config,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

std::vector<VideoScores> score_videos(const HaanParams<float>& params, const Dataset& dataset,
                                      const std::vector<std::string>& ids);

MapReport evaluate(const HaanParams<float>& params, const Dataset& dataset, const std::vector<std::string>& ids,
                   const EvalProtocol& protocol, const InferenceConfig& inference,
                   std::vector<DetectionSegment>* detections = nullptr);

// Checkpoint: "HAANCKPT", u64 header length, JSON header {shapes, names, config, epoch, seed}, then
// float32 little-endian blobs in header order.
struct Checkpoint {
  HaanParams<float> params;
  TrainConfig config;
  int epoch = 0;
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::filesystem::path& path, const HaanParams<float>& params, const TrainConfig& config,
                     int epoch);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Throws ArtifactMismatchError when `params` cannot run on `manifest`.
void check_compatible(const HaanParams<float>& params, const DatasetManifest& manifest);

TrainSplit load_split(const std::filesystem::path& path);
void save_split(const std::filesystem::path& path, const TrainSplit& split,
                const std::vector<std::pair<std::string, double>>& per_class_ratio = {});

struct ConceptReport {
  std::vector<std::vector<int>> class_concepts;  // per fine class, concept ids ranked by distance
  std::vector<std::vector<double>> class_distances;
  struct Example {
    std::string video_id;
    int start_clip = 0;
    int end_clip = 0;
  };
  std::vector<std::vector<Example>> concept_examples;
  std::vector<std::vector<int>> concept_members_per_video;  // labels per clustered video
  std::vector<std::string> video_ids;
  ClusterModel model;

  nlohmann::json to_json(const LabelHierarchy& hierarchy, std::size_t max_examples = 10) const;
};

/// Clusters the final encoder features of `ids` and ranks concepts per class by distance to w^j.
ConceptReport inspect_concepts(const HaanParams<float>& params, const Dataset& dataset,
                               const std::vector<std::string>& ids, const TrainConfig& config);

/// Fraction of selected concepts whose majority atomic id (from `truth`) belongs to that class's
/// composition as recorded in the manifest segments.
double concept_relevance(const ConceptReport& report, const Dataset& dataset, const AtomicTruth& truth);

struct AblationCell {
  std::string name;
  TrainConfig config;
  double avg_map = 0.0;
};

/// The four nested loss subsets, mil -> +pseudo -> +concept -> +coarse.
std::vector<LossSet> loss_ladder();

/// Trains and evaluates one cell; identical to running train then evaluate on the best checkpoint.
AblationCell run_cell(const Dataset& dataset, const TrainSplit& split, const TrainConfig& config, std::string name,
                      const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace haan
