#include "haan/trainer.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace haan {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (num_concepts < 2) throw ConfigError("num_concepts must be >= 2");
  if (topk_concepts < 1) throw ConfigError("topk_concepts must be >= 1");
  if (!losses.has(LossTerm::mil)) throw ConfigError("losses must include mil");
  if (embed_dim < 1 || hidden_dim < 0 || concept_hidden_dim < 0) throw ConfigError("layer widths must be positive");
  if (cluster_max_iters < 1) throw ConfigError("cluster_max_iters must be >= 1");
  for (double l : {lambda_mil, lambda_pseudo, lambda_concept, lambda_coarse})
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("loss weights must be finite and >= 0");
  try {
    inference().validate();
    EvalProtocol::from_string(protocol);
  } catch (const EvaluationError& e) {
    throw ConfigError(e.what());
  }
}

ObjectiveConfig TrainConfig::objective() const {
  ObjectiveConfig o;
  o.lambda = LossWeights{lambda_mil, lambda_pseudo, lambda_concept, lambda_coarse};
  o.losses = losses;
  o.topk_concepts = topk_concepts;
  o.distance = distance;
  o.compose = compose;
  return o;
}

InferenceConfig TrainConfig::inference() const {
  return InferenceConfig{alpha, classify_topk, classify_threshold, merge_gap};
}

ModelShape TrainConfig::shape(const DatasetManifest& manifest) const {
  ModelShape s;
  s.input_dim = manifest.feature_dim;
  s.embed_dim = embed_dim;
  s.hidden_dim = hidden_dim > 0 ? hidden_dim : embed_dim;
  s.concept_hidden_dim = concept_hidden_dim > 0 ? concept_hidden_dim : embed_dim;
  s.num_fine = static_cast<int>(manifest.hierarchy.num_fine());
  s.num_coarse = static_cast<int>(manifest.hierarchy.num_coarse());
  s.num_concepts = num_concepts;
  return s;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  auto as_int = [&] {
    std::size_t pos = 0;
    int v = 0;
    try {
      v = std::stoi(value, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != value.size()) throw ConfigError("config key '" + key + "' expects an integer, got '" + value + "'");
    return v;
  };
  auto as_double = [&] {
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(value, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != value.size()) throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
    return v;
  };
  try {
    if (key == "epochs") epochs = as_int();
    else if (key == "batch_size") batch_size = as_int();
    else if (key == "learning_rate") learning_rate = as_double();
    else if (key == "lambda_mil") lambda_mil = as_double();
    else if (key == "lambda_pseudo") lambda_pseudo = as_double();
    else if (key == "lambda_concept") lambda_concept = as_double();
    else if (key == "lambda_coarse") lambda_coarse = as_double();
    else if (key == "num_concepts") num_concepts = as_int();
    else if (key == "topk_concepts") topk_concepts = as_int();
    else if (key == "clustering") clustering = cluster_method_from_string(value);
    else if (key == "compose") compose = compose_from_string(value);
    else if (key == "distance") distance = distance_from_string(value);
    else if (key == "losses") losses = LossSet::parse(value);
    else if (key == "seed") seed = parse_seed(value);
    else if (key == "embed_dim") embed_dim = as_int();
    else if (key == "hidden_dim") hidden_dim = as_int();
    else if (key == "concept_hidden_dim") concept_hidden_dim = as_int();
    else if (key == "cluster_max_iters") cluster_max_iters = as_int();
    else if (key == "alpha") alpha = as_double();
    else if (key == "classify_topk") classify_topk = as_int();
    else if (key == "classify_threshold") classify_threshold = as_double();
    else if (key == "merge_gap") merge_gap = as_int();
    else if (key == "protocol") protocol = value;
    else throw ConfigError("unknown config key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"lambda_mil", lambda_mil},
          {"lambda_pseudo", lambda_pseudo},
          {"lambda_concept", lambda_concept},
          {"lambda_coarse", lambda_coarse},
          {"num_concepts", num_concepts},
          {"topk_concepts", topk_concepts},
          {"clustering", to_string(clustering)},
          {"compose", to_string(compose)},
          {"distance", to_string(distance)},
          {"losses", losses.str()},
          {"seed", seed},
          {"embed_dim", embed_dim},
          {"hidden_dim", hidden_dim},
          {"concept_hidden_dim", concept_hidden_dim},
          {"cluster_max_iters", cluster_max_iters},
          {"alpha", alpha},
          {"classify_topk", classify_topk},
          {"classify_threshold", classify_threshold},
          {"merge_gap", merge_gap},
          {"protocol", protocol}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    if (v.is_string()) {
      c.set(key, v.get<std::string>());
    } else if (v.is_number_unsigned()) {
      c.set(key, std::to_string(v.get<unsigned long long>()));
    } else if (v.is_number_integer()) {
      c.set(key, std::to_string(v.get<long long>()));
    } else {
      std::ostringstream os;
      os.precision(17);
      os << v.get<double>();
      c.set(key, os.str());
    }
  }
  return c;
}

TrainConfig TrainConfig::from_file(const fs::path& path, TrainConfig base) {
  std::vector<std::pair<std::string, std::string>> entries;
  try {
    entries = read_key_value_file(path);
  } catch (const DatasetError& e) {
    throw ConfigError(e.what());
  }
  for (const auto& [key, value] : entries) base.set(key, value);
  return base;
}

// ---------------------------------------------------------------------------
// Pseudo labels

namespace {

Eigen::MatrixXd pool_features(const std::vector<Matrix<float>>& encoded) {
  Eigen::Index rows = 0;
  for (const auto& e : encoded) rows += e.rows();
  Eigen::MatrixXd pool(rows, encoded.empty() ? 0 : encoded.front().cols());
  Eigen::Index r = 0;
  for (const auto& e : encoded) {
    pool.middleRows(r, e.rows()) = e.cast<double>();
    r += e.rows();
  }
  return pool;
}

std::vector<std::vector<int>> split_labels(const std::vector<int>& flat, const std::vector<Matrix<float>>& encoded) {
  std::vector<std::vector<int>> out;
  std::size_t r = 0;
  for (const auto& e : encoded) {
    out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(r),
                     flat.begin() + static_cast<std::ptrdiff_t>(r + static_cast<std::size_t>(e.rows())));
    r += static_cast<std::size_t>(e.rows());
  }
  return out;
}

std::vector<std::size_t> indices_of(const DatasetManifest& manifest, const std::vector<std::string>& ids) {
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(manifest.index_of(id));
  return out;
}

}  // namespace

PseudoRefresh refresh_pseudo_labels(const Dataset& dataset, const std::vector<std::size_t>& videos,
                                    const HaanParams<float>& params, const TrainConfig& config, int epoch) {
  std::vector<Matrix<float>> encoded;
  encoded.reserve(videos.size());
  for (std::size_t v : videos) encoded.push_back(encode_eval(params, dataset.features.at(v)));
  const Eigen::MatrixXd pool = pool_features(encoded);
  PseudoRefresh out;
  out.model = fit_clusters(config.clustering, pool, config.num_concepts,
                           config.seed + kClusterSeedOffset + static_cast<std::uint64_t>(epoch),
                           config.cluster_max_iters);
  out.labels = split_labels(out.model.labels, encoded);
  return out;
}

// ---------------------------------------------------------------------------
// Training

json MetricsRecord::to_json() const {
  json j{{"epoch", epoch},
         {"batch", batch},
         {"l_mil", loss.l_mil},
         {"l_pseudo", loss.l_pseudo},
         {"l_concept", loss.l_concept},
         {"l_coarse", loss.l_coarse},
         {"total", loss.total}};
  j["val_avg_map"] = val_avg_map ? json(*val_avg_map) : json(nullptr);
  return j;
}

std::vector<VideoScores> score_videos(const HaanParams<float>& params, const Dataset& dataset,
                                      const std::vector<std::string>& ids) {
  std::vector<VideoScores> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto idx = dataset.manifest.index_of(id);
    out.push_back(VideoScores{id, clip_scores_eval(params, dataset.features.at(idx)).cast<double>()});
  }
  return out;
}

MapReport evaluate(const HaanParams<float>& params, const Dataset& dataset, const std::vector<std::string>& ids,
                   const EvalProtocol& protocol, const InferenceConfig& inference,
                   std::vector<DetectionSegment>* detections) {
  check_compatible(params, dataset.manifest);
  return map_report(score_videos(params, dataset, ids), dataset.manifest, protocol, inference, detections);
}

TrainResult train(const Dataset& dataset, const TrainSplit& split, const TrainConfig& config,
                  const std::optional<fs::path>& out_dir) {
  config.validate();
  const auto& manifest = dataset.manifest;
  if (dataset.features.size() != manifest.videos.size()) throw ContractError("train: dataset features not loaded");
  const auto train_idx = indices_of(manifest, split.train);
  indices_of(manifest, split.val);
  if (config.epochs > 0 && train_idx.empty()) throw ConfigError("training split is empty");

  const ObjectiveConfig objective = config.objective();
  const InferenceConfig inference = config.inference();
  const EvalProtocol protocol = EvalProtocol::from_string(config.protocol);
  const bool can_validate =
      !split.val.empty() && std::all_of(split.val.begin(), split.val.end(),
                                        [&](const std::string& id) { return manifest.video(id).segments.has_value(); });

  TrainResult result;
  HaanParams<float> params = HaanParams<float>::initialize(config.shape(manifest), config.seed + kInitSeedOffset);
  auto adam = AdamState<float>::zeros_like(params.params);
  std::mt19937_64 shuffle_rng(config.seed + kShuffleSeedOffset);

  std::ofstream metrics;
  if (out_dir) {
    fs::create_directories(*out_dir);
    save_checkpoint(*out_dir / "init.ckpt", params, config, 0);
    save_checkpoint(*out_dir / "best.ckpt", params, config, 0);
    metrics.open(*out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw TrainingError("cannot write metrics log in " + out_dir->string());
  }

  result.best = params;
  result.best_epoch = 0;
  if (can_validate && config.epochs > 0)
    result.best_val_avg_map = evaluate(params, dataset, split.val, protocol, inference).avg_map;

  const bool needs_labels = objective.active(LossTerm::pseudo) || objective.active(LossTerm::concepts) ||
                            objective.active(LossTerm::coarse);
  std::vector<std::size_t> order(train_idx.size());
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    PseudoRefresh refresh;
    if (needs_labels) refresh = refresh_pseudo_labels(dataset, train_idx, params, config, epoch);

    std::vector<VideoExample<float>> examples;
    examples.reserve(train_idx.size());
    for (std::size_t k = 0; k < train_idx.size(); ++k)
      examples.push_back(make_example(dataset.features[train_idx[k]], manifest.videos[train_idx[k]], manifest.hierarchy,
                                      needs_labels ? &refresh.labels[k] : nullptr));

    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    LossBreakdown epoch_loss;
    epoch_loss.lambda = objective.lambda;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<VideoExample<float>> batch;
      for (std::size_t b = start; b < stop; ++b) batch.push_back(examples[order[b]]);
      auto grads = GradientSet<float>::zeros_like(params.params);
      const LossBreakdown lb =
          total_loss<float>(params, std::span<const VideoExample<float>>(batch), manifest.hierarchy, objective, &grads);
      if (!std::isfinite(lb.total))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(batches) +
                            "; last good checkpoint kept");
      adam_step(params.params, grads, adam, config.learning_rate);

      MetricsRecord rec{epoch, batches, lb, std::nullopt};
      if (metrics.is_open()) metrics << rec.to_json().dump() << "\n";
      result.log.push_back(rec);
      epoch_loss.l_mil += lb.l_mil;
      epoch_loss.l_pseudo += lb.l_pseudo;
      epoch_loss.l_concept += lb.l_concept;
      epoch_loss.l_coarse += lb.l_coarse;
      epoch_loss.total += lb.total;
      ++batches;
    }
    for (double* v : {&epoch_loss.l_mil, &epoch_loss.l_pseudo, &epoch_loss.l_concept, &epoch_loss.l_coarse,
                      &epoch_loss.total})
      *v /= std::max(batches, 1);

    MetricsRecord summary{epoch, -1, epoch_loss, std::nullopt};
    if (can_validate) summary.val_avg_map = evaluate(params, dataset, split.val, protocol, inference).avg_map;
    if (metrics.is_open()) metrics << summary.to_json().dump() << "\n";
    result.log.push_back(summary);

    const bool improved = !can_validate || (*summary.val_avg_map > *result.best_val_avg_map);
    if (improved) {
      result.best = params;
      result.best_epoch = epoch;
      result.best_val_avg_map = summary.val_avg_map;
      if (out_dir) save_checkpoint(*out_dir / "best.ckpt", params, config, epoch);
    }
    if (out_dir) save_checkpoint(*out_dir / "last.ckpt", params, config, epoch);
  }
  result.final = params;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints and splits

namespace {

constexpr char kCheckpointMagic[8] = {'H', 'A', 'A', 'N', 'C', 'K', 'P', 'T'};

json shape_to_json(const ModelShape& s) {
  return {{"input_dim", s.input_dim},         {"hidden_dim", s.hidden_dim}, {"embed_dim", s.embed_dim},
          {"concept_hidden_dim", s.concept_hidden_dim}, {"num_fine", s.num_fine}, {"num_coarse", s.num_coarse},
          {"num_concepts", s.num_concepts}};
}

ModelShape shape_from_json(const json& j) {
  ModelShape s;
  s.input_dim = j.at("input_dim").get<int>();
  s.hidden_dim = j.at("hidden_dim").get<int>();
  s.embed_dim = j.at("embed_dim").get<int>();
  s.concept_hidden_dim = j.at("concept_hidden_dim").get<int>();
  s.num_fine = j.at("num_fine").get<int>();
  s.num_coarse = j.at("num_coarse").get<int>();
  s.num_concepts = j.at("num_concepts").get<int>();
  return s;
}

}  // namespace

void save_checkpoint(const fs::path& path, const HaanParams<float>& params, const TrainConfig& config, int epoch) {
  json tensors = json::array();
  for (std::size_t i = 0; i < params.params.size(); ++i)
    tensors.push_back({{"name", params.params.names[i]},
                       {"shape", {params.params.values[i].rows(), params.params.values[i].cols()}}});
  const json header{{"format", "haan-checkpoint-1"},
                    {"model", shape_to_json(params.shape)},
                    {"tensors", tensors},
                    {"config", config.to_json()},
                    {"epoch", epoch},
                    {"seed", config.seed}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw TrainingError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 8);
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((len >> (8 * i)) & 0xff));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& v : params.params.values) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(v.data()[i]);
      for (int b = 0; b < 4; ++b) os.put(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  if (!os) throw TrainingError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArtifactMismatchError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw ArtifactMismatchError("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(is.get())) << (8 * i);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  Checkpoint ck;
  try {
    const json header = json::parse(text);
    ck.config = TrainConfig::from_json(header.at("config"));
    ck.epoch = header.at("epoch").get<int>();
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.params.shape = shape_from_json(header.at("model"));
    const auto expected = HaanParams<float>::initialize(ck.params.shape, 0);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != expected.params.size()) throw ArtifactMismatchError("checkpoint tensor count mismatch");
    for (std::size_t t = 0; t < tensors.size(); ++t) {
      const auto name = tensors[t].at("name").get<std::string>();
      const auto shape = tensors[t].at("shape").get<std::vector<Eigen::Index>>();
      const auto& ref = expected.params.values[t];
      if (name != expected.params.names[t] || shape.size() != 2 || shape[0] != ref.rows() || shape[1] != ref.cols())
        throw ArtifactMismatchError("checkpoint tensor '" + name + "' does not match the model layout");
      Matrix<float> m(shape[0], shape[1]);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(is.get())) << (8 * b);
        m.data()[i] = std::bit_cast<float>(bits);
      }
      ck.params.params.add(name, std::move(m));
    }
  } catch (const json::exception& e) {
    throw ArtifactMismatchError("malformed checkpoint header in " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ArtifactMismatchError("checkpoint config in " + path.string() + ": " + e.what());
  }
  if (!is) throw ArtifactMismatchError("truncated checkpoint " + path.string());
  return ck;
}

void check_compatible(const HaanParams<float>& params, const DatasetManifest& manifest) {
  const auto& s = params.shape;
  if (s.input_dim != manifest.feature_dim || s.num_fine != static_cast<int>(manifest.hierarchy.num_fine()) ||
      s.num_coarse != static_cast<int>(manifest.hierarchy.num_coarse()))
    throw ArtifactMismatchError("checkpoint expects d=" + std::to_string(s.input_dim) + ", C=" +
                                std::to_string(s.num_fine) + ", U=" + std::to_string(s.num_coarse) +
                                " but dataset has d=" + std::to_string(manifest.feature_dim) + ", C=" +
                                std::to_string(manifest.hierarchy.num_fine()) + ", U=" +
                                std::to_string(manifest.hierarchy.num_coarse()));
}

TrainSplit load_split(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read split file " + path.string());
  try {
    const json j = json::parse(is);
    return TrainSplit{j.at("train").get<std::vector<std::string>>(), j.at("val").get<std::vector<std::string>>()};
  } catch (const json::exception& e) {
    throw ConfigError("malformed split file " + path.string() + ": " + e.what());
  }
}

void save_split(const fs::path& path, const TrainSplit& split,
                const std::vector<std::pair<std::string, double>>& per_class_ratio) {
  json ratios = json::object();
  for (const auto& [name, r] : per_class_ratio) ratios[name] = r;
  const json j{{"train", split.train}, {"val", split.val}, {"per_class_ratios", ratios}};
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write split file " + path.string());
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Concept inspection

ConceptReport inspect_concepts(const HaanParams<float>& params, const Dataset& dataset,
                               const std::vector<std::string>& ids, const TrainConfig& config) {
  check_compatible(params, dataset.manifest);
  const auto idx = indices_of(dataset.manifest, ids);
  const PseudoRefresh refresh = refresh_pseudo_labels(dataset, idx, params, config, config.epochs + 1);

  std::vector<Matrix<float>> encoded;
  for (std::size_t v : idx) encoded.push_back(encode_eval(params, dataset.features[v]));
  const Eigen::MatrixXd pool = pool_features(encoded);
  const int N = refresh.model.num_clusters();

  Matrix<double> concepts = Matrix<double>::Zero(N, pool.cols());
  std::vector<double> counts(static_cast<std::size_t>(N), 0.0);
  for (Eigen::Index i = 0; i < pool.rows(); ++i) {
    concepts.row(refresh.model.labels[i]) += pool.row(i);
    counts[refresh.model.labels[i]] += 1.0;
  }
  std::vector<bool> present(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    present[n] = counts[n] > 0.0;
    if (present[n]) concepts.row(n) /= counts[n];
  }
  const Matrix<double> protos = params.prototypes().cast<double>();
  const Matrix<double> D = concept_distances(concepts, present, protos, config.distance);

  ConceptReport rep;
  rep.model = refresh.model;
  rep.video_ids = ids;
  rep.concept_members_per_video = refresh.labels;
  for (Eigen::Index j = 0; j < D.cols(); ++j) {
    std::vector<int> ranked;
    std::vector<double> dist;
    for (Eigen::Index n : topk_concepts(D, j, config.topk_concepts)) {
      ranked.push_back(static_cast<int>(n));
      dist.push_back(D(n, j));
    }
    rep.class_concepts.push_back(std::move(ranked));
    rep.class_distances.push_back(std::move(dist));
  }
  rep.concept_examples.resize(static_cast<std::size_t>(N));
  for (std::size_t v = 0; v < refresh.labels.size(); ++v) {
    const auto& lab = refresh.labels[v];
    std::size_t i = 0;
    while (i < lab.size()) {
      std::size_t e = i + 1;
      while (e < lab.size() && lab[e] == lab[i]) ++e;
      rep.concept_examples[lab[i]].push_back({ids[v], static_cast<int>(i), static_cast<int>(e)});
      i = e;
    }
  }
  return rep;
}

json ConceptReport::to_json(const LabelHierarchy& hierarchy, std::size_t max_examples) const {
  json classes = json::object();
  for (std::size_t j = 0; j < class_concepts.size(); ++j)
    classes[hierarchy.fine[j]] = {{"concepts", class_concepts[j]}, {"distances", class_distances[j]}};
  json concepts = json::object();
  for (std::size_t n = 0; n < concept_examples.size(); ++n) {
    json ex = json::array();
    for (std::size_t e = 0; e < std::min(max_examples, concept_examples[n].size()); ++e)
      ex.push_back({concept_examples[n][e].video_id, concept_examples[n][e].start_clip, concept_examples[n][e].end_clip});
    concepts[std::to_string(n)] = {{"num_segments", concept_examples[n].size()}, {"examples", ex}};
  }
  return {{"classes", classes}, {"concepts", concepts}};
}

double concept_relevance(const ConceptReport& report, const Dataset& dataset, const AtomicTruth& truth) {
  const int N = report.model.num_clusters();
  std::vector<std::map<int, long>> votes(static_cast<std::size_t>(N));
  for (std::size_t v = 0; v < report.video_ids.size(); ++v) {
    const auto& atoms = truth.at(report.video_ids[v]);
    const auto& labels = report.concept_members_per_video[v];
    if (atoms.size() != labels.size()) throw DatasetError("atomic truth length mismatch for " + report.video_ids[v]);
    for (std::size_t i = 0; i < labels.size(); ++i) ++votes[labels[i]][atoms[i]];
  }
  std::vector<int> majority(static_cast<std::size_t>(N), -1);
  for (int n = 0; n < N; ++n) {
    long best = -1;
    for (const auto& [atom, count] : votes[n])
      if (count > best) {
        best = count;
        majority[n] = atom;
      }
  }
  std::vector<std::vector<int>> composition(dataset.manifest.hierarchy.num_fine());
  for (const auto& v : dataset.manifest.videos)
    if (v.segments)
      for (const auto& s : *v.segments)
        if (composition[s.fine_class].empty()) composition[s.fine_class] = s.atomic_sequence;

  std::size_t hits = 0;
  std::size_t total = 0;
  for (std::size_t j = 0; j < report.class_concepts.size(); ++j) {
    for (int n : report.class_concepts[j]) {
      ++total;
      const int atom = majority[n];
      if (atom >= 0 && std::find(composition[j].begin(), composition[j].end(), atom) != composition[j].end()) ++hits;
    }
  }
  return total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<LossSet> loss_ladder() {
  return {LossSet{{true, false, false, false}}, LossSet{{true, true, false, false}},
          LossSet{{true, true, true, false}}, LossSet{{true, true, true, true}}};
}

AblationCell run_cell(const Dataset& dataset, const TrainSplit& split, const TrainConfig& config, std::string name,
                      const std::optional<fs::path>& out_dir) {
  const TrainResult res = train(dataset, split, config, out_dir);
  const MapReport rep =
      evaluate(res.best, dataset, split.val, EvalProtocol::from_string(config.protocol), config.inference());
  return AblationCell{std::move(name), config, rep.avg_map};
}

}  // namespace haan
