#include "haan/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace haan;

namespace {

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kInfeasible = 3, kMismatch = 4 };

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
}

// Resolved configuration written next to every output so the run can be repeated.
void write_run_manifest(const fs::path& path, const std::string& command, json config) {
  write_json(path, {{"command", command}, {"config", std::move(config)}});
}

std::string key_value_text(const json& j) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& [key, v] : j.items()) {
    os << key << " = ";
    if (v.is_string()) os << v.get<std::string>();
    else if (v.is_number_unsigned()) os << v.get<unsigned long long>();
    else if (v.is_number_integer()) os << v.get<long long>();
    else os << v.get<double>();
    os << "\n";
  }
  return os.str();
}

void ensure_out_dir(const fs::path& out) {
  const fs::path parent = fs::absolute(out).parent_path();
  if (!fs::is_directory(parent)) throw ConfigError("parent directory of " + out.string() + " does not exist");
  fs::create_directories(out);
}

std::vector<std::pair<std::string, double>> named_ratios(const DatasetManifest& m, const std::vector<double>& r) {
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t c = 0; c < r.size(); ++c) out.emplace_back(m.hierarchy.fine[c], r[c]);
  return out;
}

std::vector<double> train_ratios(const DatasetManifest& m, const std::vector<std::string>& train) {
  std::vector<double> total(m.hierarchy.num_fine(), 0.0), in_train(m.hierarchy.num_fine(), 0.0);
  for (const auto& v : m.videos)
    for (int c : v.fine_labels) total[c] += 1.0;
  for (const auto& id : train)
    for (int c : m.video(id).fine_labels) in_train[c] += 1.0;
  for (std::size_t c = 0; c < total.size(); ++c) in_train[c] = total[c] > 0 ? in_train[c] / total[c] : 0.0;
  return in_train;
}

// Flags that map one-to-one onto TrainConfig keys.
struct ConfigFlags {
  std::vector<std::pair<CLI::Option*, std::string>> bound;
  std::map<std::string, std::string> values;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    bound.emplace_back(app->add_option(flag, values[key], help), key);
  }
  void apply(TrainConfig& cfg) const {
    for (const auto& [opt, key] : bound)
      if (opt->count() > 0) cfg.set(key, values.at(key));
  }
};

void add_model_flags(CLI::App* app, ConfigFlags& f) {
  f.add(app, "--seed", "seed", "run seed");
  f.add(app, "--losses", "losses", "enabled loss terms, e.g. mil,pseudo,concept,coarse");
  f.add(app, "--clusters", "num_concepts", "number of visual concepts N");
  f.add(app, "--clustering", "clustering", "kmeans or gmm");
  f.add(app, "--distance", "distance", "cosine or euclidean");
  f.add(app, "--compose", "compose", "coarse composition: mean or max");
}

void add_inference_flags(CLI::App* app, ConfigFlags& f) {
  f.add(app, "--alpha", "alpha", "detection threshold coefficient");
  f.add(app, "--topk-clips", "classify_topk", "clips averaged for video classification");
  f.add(app, "--threshold", "classify_threshold", "classification probability cutoff");
  f.add(app, "--protocol", "protocol", "fineaction or finegym");
}

TrainConfig resolve_config(const std::string& config_file, const ConfigFlags& flags, TrainConfig base = {}) {
  TrainConfig cfg = config_file.empty() ? base : TrainConfig::from_file(config_file, base);
  flags.apply(cfg);
  cfg.validate();
  return cfg;
}

void save_report(const fs::path& dir, const MapReport& report, const std::vector<DetectionSegment>* detections) {
  write_json(dir / "report.json", to_json(report));
  write_text(dir / "report.csv", to_csv(report));
  if (detections) {
    std::ofstream os(dir / "detections.jsonl");
    for (const auto& d : *detections) os << to_json(d).dump() << "\n";
  }
}

std::vector<std::string> all_ids(const DatasetManifest& m) {
  std::vector<std::string> ids;
  for (const auto& v : m.videos) ids.push_back(v.id);
  return ids;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if constexpr (std::is_same_v<T, std::string>) {
      out.push_back(item);
    } else {
      try {
        out.push_back(static_cast<T>(parse_seed(item)));
      } catch (const std::invalid_argument&) {
        throw ConfigError(what + ": expected non-negative integers, got '" + item + "'");
      }
    }
  }
  if (out.empty()) throw ConfigError(what + " is empty");
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config, out, seed;
  bool force = false;
};

int cmd_synth(const SynthArgs& a, CLI::Option* seed_opt) {
  SynthConfig sc;
  try {
    sc = a.config.empty() ? SynthConfig::standard() : SynthConfig::from_file(a.config);
    if (seed_opt->count() > 0) sc.set("seed", a.seed);
    sc.validate();
  } catch (const DatasetError& e) {
    throw ConfigError(e.what());
  }
  const fs::path out(a.out);
  ensure_out_dir(out);
  SyntheticCorpus corpus = generate_synthetic(sc);
  try {
    save_dataset(corpus.dataset, out, a.force);
  } catch (const DatasetError& e) {
    throw ConfigError(e.what());
  }
  save_atomic_truth(corpus.truth, out / "atomic_truth.json");
  const auto& m = corpus.dataset.manifest;
  save_split(out / "split.json", TrainSplit{corpus.train_ids, corpus.val_ids},
             named_ratios(m, train_ratios(m, corpus.train_ids)));
  write_text(out / "synth.cfg", key_value_text(sc.to_json()));
  write_run_manifest(out / "run.json", "synth", sc.to_json());
  std::cout << "wrote " << m.videos.size() << " videos to " << out.string() << "\n";
  return kOk;
}

struct SplitArgs {
  std::string dataset, out, seed = "0";
  double ratio = 0.75;
  int attempts = 100;
};

int cmd_split(const SplitArgs& a) {
  std::uint64_t seed = 0;
  try {
    seed = parse_seed(a.seed);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(a.ratio > 0.0 && a.ratio < 1.0)) throw ConfigError("--ratio must lie in (0, 1)");
  if (a.attempts < 1) throw ConfigError("--attempts must be >= 1");
  const DatasetManifest m = load_manifest(a.dataset);
  const SplitResult res = greedy_split(m, a.ratio, a.attempts, seed);
  const fs::path out(a.out);
  if (!fs::is_directory(fs::absolute(out).parent_path()))
    throw ConfigError("parent directory of " + out.string() + " does not exist");
  save_split(out, TrainSplit{res.train, res.val}, named_ratios(m, res.per_class_ratio));
  fs::path manifest_path = out;
  manifest_path.replace_extension(".run.json");
  write_run_manifest(manifest_path, "split",
                     {{"dataset", a.dataset}, {"ratio", a.ratio}, {"attempts", a.attempts}, {"seed", seed}});
  const auto [lo, hi] = std::minmax_element(res.per_class_ratio.begin(), res.per_class_ratio.end());
  std::cout << "train " << res.train.size() << " val " << res.val.size() << " ratio range [" << *lo << ", " << *hi
            << "] objective " << res.objective << "\n";
  return kOk;
}

struct TrainArgs {
  std::string dataset, split, config, out;
};

int cmd_train(const TrainArgs& a, const ConfigFlags& flags) {
  const TrainConfig cfg = resolve_config(a.config, flags);
  const Dataset ds = load_dataset(a.dataset);
  const TrainSplit split = load_split(a.split);
  const fs::path out(a.out);
  ensure_out_dir(out);
  write_text(out / "resolved.cfg", key_value_text(cfg.to_json()));
  write_run_manifest(out / "run.json", "train",
                     {{"dataset", a.dataset}, {"split", a.split}, {"train", cfg.to_json()}});
  const TrainResult res = train(ds, split, cfg, out);
  json summary{{"best_epoch", res.best_epoch}};
  summary["best_val_avg_map"] = res.best_val_avg_map ? json(*res.best_val_avg_map) : json(nullptr);
  write_json(out / "summary.json", summary);
  std::cout << "best epoch " << res.best_epoch;
  if (res.best_val_avg_map) std::cout << " val avg mAP " << *res.best_val_avg_map;
  std::cout << "\n";
  return kOk;
}

struct EvalArgs {
  std::string dataset, split, subset = "val", checkpoint, out;
};

int cmd_eval(const EvalArgs& a, const ConfigFlags& flags) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  TrainConfig cfg = ck.config;
  flags.apply(cfg);
  cfg.validate();
  const Dataset ds = load_dataset(a.dataset);
  check_compatible(ck.params, ds.manifest);
  std::vector<std::string> ids;
  if (a.split.empty()) {
    ids = all_ids(ds.manifest);
  } else {
    const TrainSplit split = load_split(a.split);
    ids = a.subset == "train" ? split.train : split.val;
  }
  const fs::path out(a.out);
  ensure_out_dir(out);
  write_run_manifest(out / "run.json", "eval",
                     {{"dataset", a.dataset},
                      {"split", a.split},
                      {"subset", a.subset},
                      {"checkpoint", a.checkpoint},
                      {"protocol", cfg.protocol},
                      {"inference", to_json(cfg.inference())}});
  std::vector<DetectionSegment> dets;
  const MapReport rep = evaluate(ck.params, ds, ids, EvalProtocol::from_string(cfg.protocol), cfg.inference(), &dets);
  save_report(out, rep, &dets);
  std::cout << "avg mAP " << rep.avg_map << "\n";
  return kOk;
}

struct AblateArgs {
  std::string dataset, split, config, out, seeds = "0", grid = "ladder", clusters_grid, clustering_grid = "kmeans,gmm";
};

int cmd_ablate(const AblateArgs& a, const ConfigFlags& flags) {
  const TrainConfig base = resolve_config(a.config, flags);
  const auto seeds = parse_list<std::uint64_t>(a.seeds, "--seeds");
  const auto grids = parse_list<std::string>(a.grid, "--grid");
  std::vector<std::pair<std::string, TrainConfig>> cells;
  for (const auto& g : grids) {
    if (g == "ladder") {
      for (const LossSet& losses : loss_ladder()) {
        TrainConfig c = base;
        c.losses = losses;
        std::string name = losses.str();
        std::replace(name.begin(), name.end(), ',', '+');
        cells.emplace_back(name, c);
      }
    } else if (g == "clusters") {
      const auto sizes = a.clusters_grid.empty() ? std::vector<std::uint64_t>{static_cast<std::uint64_t>(base.num_concepts)}
                                                 : parse_list<std::uint64_t>(a.clusters_grid, "--clusters-grid");
      for (const auto& method : parse_list<std::string>(a.clustering_grid, "--clustering-grid"))
        for (auto n : sizes) {
          TrainConfig c = base;
          c.set("clustering", method);
          c.num_concepts = static_cast<int>(n);
          cells.emplace_back(method + "_N" + std::to_string(n), c);
        }
    } else if (g == "distance") {
      for (const char* d : {"cosine", "euclidean"}) {
        TrainConfig c = base;
        c.set("distance", d);
        cells.emplace_back(std::string("distance_") + d, c);
      }
    } else {
      throw ConfigError("unknown grid '" + g + "' (expected ladder, clusters or distance)");
    }
  }
  for (auto& [name, c] : cells) c.validate();

  const Dataset ds = load_dataset(a.dataset);
  const TrainSplit split = load_split(a.split);
  const fs::path out(a.out);
  ensure_out_dir(out);
  write_run_manifest(out / "run.json", "ablate",
                     {{"dataset", a.dataset}, {"split", a.split}, {"seeds", seeds}, {"grid", grids},
                      {"base", base.to_json()}});

  json summary = json::array();
  std::string csv = "cell,seed,avg_map\n";
  for (const auto& [name, c] : cells) {
    std::vector<double> maps;
    for (auto s : seeds) {
      TrainConfig cs = c;
      cs.seed = s;
      const fs::path dir = out / "cells" / name / ("seed_" + std::to_string(s));
      fs::create_directories(dir);
      write_text(dir / "resolved.cfg", key_value_text(cs.to_json()));
      const TrainResult res = train(ds, split, cs, dir);
      const MapReport rep =
          evaluate(res.best, ds, split.val, EvalProtocol::from_string(cs.protocol), cs.inference());
      save_report(dir, rep, nullptr);
      maps.push_back(rep.avg_map);
      csv += name + "," + std::to_string(s) + "," + std::to_string(rep.avg_map) + "\n";
    }
    const double med = median(maps);
    summary.push_back({{"cell", name}, {"config", c.to_json()}, {"seeds", seeds}, {"avg_map", maps}, {"median", med}});
    std::printf("%-32s median avg mAP %.4f\n", name.c_str(), med);
    std::fflush(stdout);
  }
  write_json(out / "summary.json", summary);
  write_text(out / "summary.csv", csv);
  return kOk;
}

struct InspectArgs {
  std::string dataset, split, checkpoint, out, truth;
  std::size_t max_examples = 10;
};

int cmd_inspect(const InspectArgs& a, const ConfigFlags& flags) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  TrainConfig cfg = ck.config;
  flags.apply(cfg);
  cfg.validate();
  const Dataset ds = load_dataset(a.dataset);
  check_compatible(ck.params, ds.manifest);
  if (cfg.num_concepts != ck.params.shape.num_concepts)
    throw ArtifactMismatchError("--clusters " + std::to_string(cfg.num_concepts) + " does not match the checkpoint's " +
                                std::to_string(ck.params.shape.num_concepts) + " concepts");
  const std::vector<std::string> ids = a.split.empty() ? all_ids(ds.manifest) : load_split(a.split).train;
  const fs::path out(a.out);
  ensure_out_dir(out);
  write_run_manifest(out / "run.json", "inspect-concepts",
                     {{"dataset", a.dataset}, {"split", a.split}, {"checkpoint", a.checkpoint}, {"truth", a.truth},
                      {"train", cfg.to_json()}});
  const ConceptReport rep = inspect_concepts(ck.params, ds, ids, cfg);
  json j = rep.to_json(ds.manifest.hierarchy, a.max_examples);
  if (!a.truth.empty()) {
    const double rel = concept_relevance(rep, ds, load_atomic_truth(a.truth));
    j["relevance"] = rel;
    std::cout << "concept relevance " << rel << "\n";
  }
  write_json(out / "concepts.json", j);
  save_cluster_model(rep.model, out / "clusters.bin");
  return kOk;
}

template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const InfeasibleSplitError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInfeasible;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ClusteringError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ArtifactMismatchError& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const DimensionError& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const DatasetError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kInfeasible;
  } catch (const EvaluationError& e) {
    std::cerr << "evaluation error: " << e.what() << "\n";
    return kInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical atomic action network: synthetic data, training and temporal detection"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  synth_cmd->add_option("--config", synth.config, "synthetic generator config (key = value)");
  synth_cmd->add_option("--out", synth.out, "output dataset directory")->required();
  auto* synth_seed = synth_cmd->add_option("--seed", synth.seed, "generator seed");
  synth_cmd->add_flag("--force", synth.force, "overwrite an existing dataset");

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "greedy ratio-controlled train/val split");
  split_cmd->add_option("--dataset", split.dataset, "dataset directory")->required();
  split_cmd->add_option("--out", split.out, "split JSON to write")->required();
  split_cmd->add_option("--ratio", split.ratio, "target per-class train ratio");
  split_cmd->add_option("--attempts", split.attempts, "seeded attempts");
  split_cmd->add_option("--seed", split.seed, "split seed");

  TrainArgs tr;
  ConfigFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--dataset", tr.dataset, "dataset directory")->required();
  train_cmd->add_option("--split", tr.split, "split JSON")->required();
  train_cmd->add_option("--config", tr.config, "training config (key = value)");
  train_cmd->add_option("--out", tr.out, "run directory")->required();
  add_model_flags(train_cmd, train_flags);
  add_inference_flags(train_cmd, train_flags);

  EvalArgs ev;
  ConfigFlags eval_flags;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--dataset", ev.dataset, "dataset directory")->required();
  eval_cmd->add_option("--split", ev.split, "split JSON (default: every video)");
  eval_cmd->add_option("--subset", ev.subset, "which side of the split")->check(CLI::IsMember({"train", "val"}));
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--out", ev.out, "report directory")->required();
  add_inference_flags(eval_cmd, eval_flags);

  AblateArgs ab;
  ConfigFlags ablate_flags;
  auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid");
  ablate_cmd->add_option("--dataset", ab.dataset, "dataset directory")->required();
  ablate_cmd->add_option("--split", ab.split, "split JSON")->required();
  ablate_cmd->add_option("--config", ab.config, "base training config (key = value)");
  ablate_cmd->add_option("--out", ab.out, "output directory")->required();
  ablate_cmd->add_option("--seeds", ab.seeds, "comma-separated seeds");
  ablate_cmd->add_option("--grid", ab.grid, "comma-separated grids: ladder, clusters, distance");
  ablate_cmd->add_option("--clusters-grid", ab.clusters_grid, "comma-separated N values for the clusters grid");
  ablate_cmd->add_option("--clustering-grid", ab.clustering_grid, "comma-separated methods for the clusters grid");
  add_model_flags(ablate_cmd, ablate_flags);
  add_inference_flags(ablate_cmd, ablate_flags);

  InspectArgs in;
  ConfigFlags inspect_flags;
  auto* inspect_cmd = app.add_subcommand("inspect-concepts", "rank visual concepts per class");
  inspect_cmd->add_option("--dataset", in.dataset, "dataset directory")->required();
  inspect_cmd->add_option("--split", in.split, "split JSON; the train side is clustered (default: every video)");
  inspect_cmd->add_option("--checkpoint", in.checkpoint, "checkpoint file")->required();
  inspect_cmd->add_option("--out", in.out, "output directory")->required();
  inspect_cmd->add_option("--truth", in.truth, "atomic_truth.json for the relevance score");
  inspect_cmd->add_option("--max-examples", in.max_examples, "examples listed per concept");
  inspect_flags.add(inspect_cmd, "--seed", "seed", "clustering seed");
  inspect_flags.add(inspect_cmd, "--clustering", "clustering", "kmeans or gmm");
  inspect_flags.add(inspect_cmd, "--clusters", "num_concepts", "number of visual concepts N");
  inspect_flags.add(inspect_cmd, "--distance", "distance", "cosine or euclidean");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  }

  if (*synth_cmd) return guarded([&] { return cmd_synth(synth, synth_seed); });
  if (*split_cmd) return guarded([&] { return cmd_split(split); });
  if (*train_cmd) return guarded([&] { return cmd_train(tr, train_flags); });
  if (*eval_cmd) return guarded([&] { return cmd_eval(ev, eval_flags); });
  if (*ablate_cmd) return guarded([&] { return cmd_ablate(ab, ablate_flags); });
  if (*inspect_cmd) return guarded([&] { return cmd_inspect(in, inspect_flags); });
  return kInternal;
}
