#include "haan/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace haan {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 8> kFeatureMagic = {'H', 'A', 'A', 'N', 'F', 'E', 'A', 'T'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

json hierarchy_to_json(const LabelHierarchy& h) {
  return json{{"fine", h.fine}, {"coarse", h.coarse}, {"grouping", h.grouping}};
}

LabelHierarchy hierarchy_from_json(const json& j) {
  LabelHierarchy h;
  h.fine = j.at("fine").get<std::vector<std::string>>();
  h.coarse = j.at("coarse").get<std::vector<std::string>>();
  h.grouping = j.at("grouping").get<std::vector<std::vector<int>>>();
  return h;
}

json manifest_to_json(const DatasetManifest& m) {
  json videos = json::array();
  for (const auto& v : m.videos) {
    json jv{{"id", v.id}, {"num_clips", v.num_clips}, {"fine_labels", v.fine_labels}, {"feature_file", v.feature_file}};
    if (v.segments) {
      json segs = json::array();
      for (const auto& s : *v.segments) {
        json js{{"fine_class", s.fine_class}, {"start_clip", s.start_clip}, {"end_clip", s.end_clip}};
        if (!s.atomic_sequence.empty()) js["atomic_sequence"] = s.atomic_sequence;
        segs.push_back(std::move(js));
      }
      jv["segments"] = std::move(segs);
    }
    videos.push_back(std::move(jv));
  }
  json j{{"feature_dim", m.feature_dim}, {"hierarchy", hierarchy_to_json(m.hierarchy)}, {"videos", std::move(videos)}};
  if (m.clip_duration) j["clip_duration"] = *m.clip_duration;
  return j;
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.feature_dim = j.at("feature_dim").get<int>();
  m.hierarchy = hierarchy_from_json(j.at("hierarchy"));
  if (j.contains("clip_duration")) m.clip_duration = j.at("clip_duration").get<double>();
  for (const auto& jv : j.at("videos")) {
    VideoRecord v;
    v.id = jv.at("id").get<std::string>();
    v.num_clips = jv.at("num_clips").get<int>();
    v.fine_labels = jv.at("fine_labels").get<std::vector<int>>();
    v.feature_file = jv.at("feature_file").get<std::string>();
    if (jv.contains("segments")) {
      std::vector<SegmentAnnotation> segs;
      for (const auto& js : jv.at("segments")) {
        SegmentAnnotation s;
        s.fine_class = js.at("fine_class").get<int>();
        s.start_clip = js.at("start_clip").get<int>();
        s.end_clip = js.at("end_clip").get<int>();
        if (js.contains("atomic_sequence")) s.atomic_sequence = js.at("atomic_sequence").get<std::vector<int>>();
        segs.push_back(std::move(s));
      }
      v.segments = std::move(segs);
    }
    m.videos.push_back(std::move(v));
  }
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot write " + path.string());
  os << text;
  if (!os) throw DatasetError("write failed for " + path.string());
}

}  // namespace

void LabelHierarchy::validate() const {
  if (fine.empty()) throw DatasetError("hierarchy has no fine classes");
  if (grouping.size() != coarse.size())
    throw DatasetError("hierarchy grouping has " + std::to_string(grouping.size()) + " groups for " +
                       std::to_string(coarse.size()) + " coarse classes");
  std::vector<int> owner(fine.size(), -1);
  for (std::size_t u = 0; u < grouping.size(); ++u) {
    if (grouping[u].empty()) throw DatasetError("coarse class '" + coarse[u] + "' has no fine classes");
    for (int j : grouping[u]) {
      if (j < 0 || static_cast<std::size_t>(j) >= fine.size())
        throw DatasetError("coarse class '" + coarse[u] + "' references unknown fine index " + std::to_string(j));
      if (owner[j] != -1) throw DatasetError("fine class '" + fine[j] + "' belongs to two coarse classes");
      owner[j] = static_cast<int>(u);
    }
  }
  for (std::size_t j = 0; j < fine.size(); ++j)
    if (owner[j] == -1) throw DatasetError("fine class '" + fine[j] + "' has no coarse class");
}

std::vector<int> LabelHierarchy::fine_to_coarse() const {
  std::vector<int> owner(fine.size(), -1);
  for (std::size_t u = 0; u < grouping.size(); ++u)
    for (int j : grouping[u]) owner[j] = static_cast<int>(u);
  return owner;
}

std::vector<float> VideoRecord::multi_hot(std::size_t num_classes) const {
  std::vector<float> y(num_classes, 0.0f);
  for (int j : fine_labels) y.at(static_cast<std::size_t>(j)) = 1.0f;
  return y;
}

void DatasetManifest::validate() const {
  hierarchy.validate();
  if (feature_dim <= 0) throw DatasetError("feature_dim must be positive");
  std::set<std::string> seen;
  const int C = static_cast<int>(hierarchy.num_fine());
  for (const auto& v : videos) {
    if (!seen.insert(v.id).second) throw DatasetError("duplicate video id " + v.id);
    if (v.num_clips <= 0) throw DatasetError("video " + v.id + ": num_clips must be positive");
    if (v.fine_labels.empty()) throw DatasetError("video " + v.id + ": no positive fine label");
    for (int j : v.fine_labels)
      if (j < 0 || j >= C) throw DatasetError("video " + v.id + ": fine label " + std::to_string(j) + " out of range");
    if (v.segments) {
      for (const auto& s : *v.segments) {
        if (s.fine_class < 0 || s.fine_class >= C)
          throw DatasetError("video " + v.id + ": segment class " + std::to_string(s.fine_class) + " out of range");
        if (!(0 <= s.start_clip && s.start_clip < s.end_clip && s.end_clip <= v.num_clips))
          throw DatasetError("video " + v.id + ": invalid segment [" + std::to_string(s.start_clip) + ", " +
                             std::to_string(s.end_clip) + ")");
      }
    }
  }
}

const VideoRecord& DatasetManifest::video(const std::string& id) const { return videos.at(index_of(id)); }

std::size_t DatasetManifest::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < videos.size(); ++i)
    if (videos[i].id == id) return i;
  throw DatasetError("unknown video id " + id);
}

void write_feature_file(const fs::path& path, const FeatureMatrix& features) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot write " + path.string());
  os.write(kFeatureMagic.data(), kFeatureMagic.size());
  put_u32(os, static_cast<std::uint32_t>(features.rows()));
  put_u32(os, static_cast<std::uint32_t>(features.cols()));
  for (Eigen::Index i = 0; i < features.size(); ++i) put_u32(os, std::bit_cast<std::uint32_t>(features.data()[i]));
  if (!os) throw DatasetError("write failed for " + path.string());
}

FeatureMatrix read_feature_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open feature file " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kFeatureMagic) throw DatasetError("bad feature file magic in " + path.string());
  const std::uint32_t T = get_u32(is);
  const std::uint32_t d = get_u32(is);
  if (!is) throw DatasetError("truncated feature header in " + path.string());
  FeatureMatrix m(T, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<float>(get_u32(is));
  if (!is) throw DatasetError("truncated feature data in " + path.string());
  return m;
}

DatasetManifest load_manifest(const fs::path& root) {
  const fs::path mpath = root / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw DatasetError("missing manifest " + mpath.string());
  DatasetManifest m;
  try {
    m = manifest_from_json(json::parse(is));
  } catch (const json::exception& e) {
    throw DatasetError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

FeatureMatrix load_video_features(const fs::path& root, const DatasetManifest& manifest, const VideoRecord& video) {
  FeatureMatrix f;
  try {
    f = read_feature_file(root / video.feature_file);
  } catch (const DatasetError& e) {
    throw DatasetError("video " + video.id + ": " + e.what());
  }
  if (f.rows() != video.num_clips || f.cols() != manifest.feature_dim)
    throw DatasetError("video " + video.id + ": feature header " + shape_str(f.rows(), f.cols()) +
                       " does not match manifest T=" + std::to_string(video.num_clips) +
                       " d=" + std::to_string(manifest.feature_dim));
  if (!f.allFinite()) throw DatasetError("video " + video.id + ": non-finite feature values");
  return f;
}

Dataset load_dataset(const fs::path& root, bool load_features) {
  Dataset ds;
  ds.manifest = load_manifest(root);
  if (load_features) {
    ds.features.reserve(ds.manifest.videos.size());
    for (const auto& v : ds.manifest.videos) ds.features.push_back(load_video_features(root, ds.manifest, v));
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const fs::path& root, bool force) {
  dataset.manifest.validate();
  if (dataset.features.size() != dataset.manifest.videos.size())
    throw DatasetError("feature count does not match video count");
  if (fs::exists(root / "manifest.json") && !force)
    throw DatasetError("dataset already exists at " + root.string() + " (use force to overwrite)");
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw DatasetError("cannot create " + root.string() + ": " + ec.message());
  for (std::size_t i = 0; i < dataset.manifest.videos.size(); ++i) {
    const auto& v = dataset.manifest.videos[i];
    const auto& f = dataset.features[i];
    if (f.rows() != v.num_clips || f.cols() != dataset.manifest.feature_dim)
      throw DatasetError("video " + v.id + ": feature shape does not match manifest");
    const fs::path fpath = root / v.feature_file;
    fs::create_directories(fpath.parent_path(), ec);
    if (ec) throw DatasetError("cannot create " + fpath.parent_path().string() + ": " + ec.message());
    write_feature_file(fpath, f);
  }
  write_text(root / "manifest.json", manifest_to_json(dataset.manifest).dump(2) + "\n");
}

void save_atomic_truth(const AtomicTruth& truth, const fs::path& path) {
  json j = json::object();
  for (const auto& [id, ids] : truth) j[id] = ids;
  write_text(path, j.dump() + "\n");
}

AtomicTruth load_atomic_truth(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DatasetError("missing atomic truth " + path.string());
  AtomicTruth truth;
  try {
    const json j = json::parse(is);
    for (const auto& [id, ids] : j.items()) truth[id] = ids.get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw DatasetError("malformed atomic truth " + path.string() + ": " + e.what());
  }
  return truth;
}

std::vector<float> coarse_labels_from_fine(const std::vector<float>& fine_multi_hot, const LabelHierarchy& hierarchy) {
  if (fine_multi_hot.size() != hierarchy.num_fine())
    throw DimensionError("coarse_labels_from_fine: expected " + std::to_string(hierarchy.num_fine()) + " fine labels");
  std::vector<float> y(hierarchy.num_coarse(), 0.0f);
  for (std::size_t u = 0; u < hierarchy.grouping.size(); ++u)
    for (int j : hierarchy.grouping[u])
      if (fine_multi_hot[j] > 0.5f) y[u] = 1.0f;
  return y;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SynthConfig::validate() const {
  if (num_atomic < 1) throw DatasetError("num_atomic must be >= 1");
  if (atomic_dim < 1) throw DatasetError("atomic_dim must be >= 1");
  if (compositions.empty()) throw DatasetError("at least one fine class composition is required");
  if (!(noise_sigma >= 0.0)) throw DatasetError("noise sigma must be >= 0");
  if (train_videos < 0 || val_videos < 0) throw DatasetError("video counts must be >= 0");
  for (const auto* r : {&segments_per_video, &clips_per_atomic, &gap_clips})
    if (r->lo > r->hi || r->lo < 0) throw DatasetError("invalid integer range");
  if (segments_per_video.lo < 1 || clips_per_atomic.lo < 1) throw DatasetError("segments and atomic lengths must be >= 1");
  if (gap_clips.lo < 1) throw DatasetError("gap between segments must be >= 1 clip");
  if (segments_per_video.hi > static_cast<int>(compositions.size()))
    throw DatasetError("more segments per video than fine classes");
  std::set<std::vector<int>> distinct;
  for (std::size_t j = 0; j < compositions.size(); ++j) {
    if (compositions[j].empty()) throw DatasetError("fine class " + std::to_string(j) + " has an empty composition");
    for (int a : compositions[j])
      if (a < 0 || a >= num_atomic)
        throw DatasetError("fine class " + std::to_string(j) + " references unknown atomic id " + std::to_string(a));
    if (!distinct.insert(compositions[j]).second)
      throw DatasetError("fine class " + std::to_string(j) + " duplicates another composition");
  }
  LabelHierarchy h;
  for (std::size_t j = 0; j < compositions.size(); ++j) h.fine.push_back("fine_" + std::to_string(j));
  h.coarse = coarse_names;
  h.grouping = coarse_grouping;
  h.validate();
}

SynthConfig SynthConfig::standard() {
  SynthConfig c;
  c.num_atomic = 6;
  c.compositions = {{0, 1}, {0, 2}, {1, 2}, {3, 4}, {3, 5}, {4, 5}, {0, 3}, {2, 5}};
  c.coarse_names = {"coarse_0", "coarse_1", "coarse_2"};
  c.coarse_grouping = {{0, 1, 2}, {3, 4, 5}, {6, 7}};
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

// "0 1; 0 2" -> {{0,1},{0,2}}
std::vector<std::vector<int>> parse_int_lists(const std::string& key, const std::string& value) {
  std::vector<std::vector<int>> out;
  for (const auto& group : split_on(value, ';')) {
    std::vector<int> ids;
    std::istringstream is(group);
    std::string tok;
    while (is >> tok) {
      std::size_t pos = 0;
      int v = 0;
      try {
        v = std::stoi(tok, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos == 0 || pos != tok.size()) throw DatasetError("synth key '" + key + "': bad integer '" + tok + "'");
      ids.push_back(v);
    }
    out.push_back(std::move(ids));
  }
  return out;
}

std::string format_int_lists(const std::vector<std::vector<int>>& lists) {
  std::string out;
  for (std::size_t g = 0; g < lists.size(); ++g) {
    if (g > 0) out += "; ";
    for (std::size_t i = 0; i < lists[g].size(); ++i) out += (i > 0 ? " " : "") + std::to_string(lists[g][i]);
  }
  return out;
}

}  // namespace

std::uint64_t parse_seed(const std::string& text) {
  const bool digits = !text.empty() && std::all_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; });
  if (!digits) throw std::invalid_argument("seed must be a non-negative integer, got '" + text + "'");
  try {
    return std::stoull(text);
  } catch (const std::out_of_range&) {
    throw std::invalid_argument("seed out of range: '" + text + "'");
  }
}

std::vector<std::pair<std::string, std::string>> read_key_value_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DatasetError("cannot read " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

void SynthConfig::set(const std::string& key, const std::string& value) {
  auto as_int = [&] {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(value, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != value.size()) throw DatasetError("synth key '" + key + "' expects an integer, got '" + value + "'");
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
    if (pos == 0 || pos != value.size()) throw DatasetError("synth key '" + key + "' expects a number, got '" + value + "'");
    return v;
  };
  if (key == "num_atomic") num_atomic = static_cast<int>(as_int());
  else if (key == "atomic_dim") atomic_dim = static_cast<int>(as_int());
  else if (key == "compositions") compositions = parse_int_lists(key, value);
  else if (key == "coarse_names") coarse_names = split_on(value, ',');
  else if (key == "coarse_grouping") coarse_grouping = parse_int_lists(key, value);
  else if (key == "train_videos") train_videos = static_cast<int>(as_int());
  else if (key == "val_videos") val_videos = static_cast<int>(as_int());
  else if (key == "segments_min") segments_per_video.lo = static_cast<int>(as_int());
  else if (key == "segments_max") segments_per_video.hi = static_cast<int>(as_int());
  else if (key == "clips_per_atomic_min") clips_per_atomic.lo = static_cast<int>(as_int());
  else if (key == "clips_per_atomic_max") clips_per_atomic.hi = static_cast<int>(as_int());
  else if (key == "gap_min") gap_clips.lo = static_cast<int>(as_int());
  else if (key == "gap_max") gap_clips.hi = static_cast<int>(as_int());
  else if (key == "noise_sigma") noise_sigma = as_double();
  else if (key == "seed") {
    try {
      seed = parse_seed(value);
    } catch (const std::invalid_argument& e) {
      throw DatasetError(std::string("synth key 'seed': ") + e.what());
    }
  } else throw DatasetError("unknown synth key '" + key + "'");
}

json SynthConfig::to_json() const {
  std::string names;
  for (std::size_t u = 0; u < coarse_names.size(); ++u) names += (u > 0 ? ", " : "") + coarse_names[u];
  return {{"num_atomic", num_atomic},
          {"atomic_dim", atomic_dim},
          {"compositions", format_int_lists(compositions)},
          {"coarse_names", names},
          {"coarse_grouping", format_int_lists(coarse_grouping)},
          {"train_videos", train_videos},
          {"val_videos", val_videos},
          {"segments_min", segments_per_video.lo},
          {"segments_max", segments_per_video.hi},
          {"clips_per_atomic_min", clips_per_atomic.lo},
          {"clips_per_atomic_max", clips_per_atomic.hi},
          {"gap_min", gap_clips.lo},
          {"gap_max", gap_clips.hi},
          {"noise_sigma", noise_sigma},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_file(const fs::path& path) {
  SynthConfig c = standard();
  for (const auto& [key, value] : read_key_value_file(path)) c.set(key, value);
  return c;
}

SyntheticCorpus generate_synthetic(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto uniform_int = [&rng](IntRange r) { return std::uniform_int_distribution<int>(r.lo, r.hi)(rng); };

  const int A = config.num_atomic;
  const int d = config.atomic_dim;
  SyntheticCorpus out;
  out.prototypes.resize(A + 1, d);
  for (int a = 0; a <= A; ++a) {
    Eigen::RowVectorXd p(d);
    for (int k = 0; k < d; ++k) p(k) = gauss(rng);
    p.normalize();
    out.prototypes.row(a) = p.cast<float>();
  }

  auto& m = out.dataset.manifest;
  m.feature_dim = d;
  for (std::size_t j = 0; j < config.compositions.size(); ++j) m.hierarchy.fine.push_back("fine_" + std::to_string(j));
  m.hierarchy.coarse = config.coarse_names;
  m.hierarchy.grouping = config.coarse_grouping;

  const int C = static_cast<int>(config.compositions.size());
  auto make_video = [&](const std::string& id) {
    const int nseg = uniform_int(config.segments_per_video);
    std::vector<int> classes(C);
    std::iota(classes.begin(), classes.end(), 0);
    std::shuffle(classes.begin(), classes.end(), rng);
    classes.resize(nseg);

    std::vector<int> atomic_ids;
    std::vector<SegmentAnnotation> segments;
    auto add_clips = [&](int atomic, int count) { atomic_ids.insert(atomic_ids.end(), count, atomic); };
    add_clips(-1, uniform_int(config.gap_clips));
    for (int j : classes) {
      SegmentAnnotation seg;
      seg.fine_class = j;
      seg.start_clip = static_cast<int>(atomic_ids.size());
      seg.atomic_sequence = config.compositions[j];
      for (int a : config.compositions[j]) add_clips(a, uniform_int(config.clips_per_atomic));
      seg.end_clip = static_cast<int>(atomic_ids.size());
      segments.push_back(std::move(seg));
      add_clips(-1, uniform_int(config.gap_clips));
    }

    FeatureMatrix f(static_cast<Eigen::Index>(atomic_ids.size()), d);
    for (std::size_t i = 0; i < atomic_ids.size(); ++i) {
      const int proto = atomic_ids[i] < 0 ? A : atomic_ids[i];
      for (int k = 0; k < d; ++k)
        f(static_cast<Eigen::Index>(i), k) =
            out.prototypes(proto, k) + static_cast<float>(config.noise_sigma * gauss(rng));
    }

    VideoRecord v;
    v.id = id;
    v.num_clips = static_cast<int>(atomic_ids.size());
    v.fine_labels = classes;
    std::sort(v.fine_labels.begin(), v.fine_labels.end());
    v.segments = std::move(segments);
    v.feature_file = "features/" + id + ".bin";
    m.videos.push_back(std::move(v));
    out.dataset.features.push_back(std::move(f));
    out.truth[id] = std::move(atomic_ids);
  };

  char buf[32];
  for (int i = 0; i < config.train_videos; ++i) {
    std::snprintf(buf, sizeof buf, "train_%04d", i);
    make_video(buf);
    out.train_ids.emplace_back(buf);
  }
  for (int i = 0; i < config.val_videos; ++i) {
    std::snprintf(buf, sizeof buf, "val_%04d", i);
    make_video(buf);
    out.val_ids.emplace_back(buf);
  }
  m.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Greedy split

namespace {

struct SplitAttempt {
  std::vector<int> side;  // -1 unassigned, 0 train, 1 val
  std::vector<double> ratio;
  double objective = 0.0;
};

template <typename Rng>
std::size_t pick_random(const std::vector<std::size_t>& candidates, Rng& rng) {
  return candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
}

SplitAttempt split_attempt(const DatasetManifest& manifest, const std::vector<int>& class_total, double r,
                           std::mt19937_64& rng) {
  const std::size_t V = manifest.videos.size();
  const std::size_t C = manifest.hierarchy.num_fine();
  SplitAttempt at;
  at.side.assign(V, -1);

  // remaining[c]: videos of class c not yet placed in val
  std::vector<int> not_val(class_total);
  auto cover = [&](int side, bool protect_train) {
    std::vector<char> covered(C, 0);
    std::size_t uncovered = C;
    while (uncovered > 0) {
      int best_gain = 0;
      std::vector<std::size_t> best;
      for (std::size_t v = 0; v < V; ++v) {
        if (at.side[v] != -1) continue;
        const auto& labels = manifest.videos[v].fine_labels;
        if (protect_train &&
            std::any_of(labels.begin(), labels.end(), [&](int c) { return not_val[c] <= 1; }))
          continue;
        int gain = 0;
        for (int c : labels) gain += covered[c] ? 0 : 1;
        if (gain == 0) continue;
        if (gain > best_gain) {
          best_gain = gain;
          best.clear();
        }
        if (gain == best_gain) best.push_back(v);
      }
      if (best.empty()) {
        std::size_t c = 0;
        while (covered[c]) ++c;
        throw InfeasibleSplitError(manifest.hierarchy.fine[c], "no video left to cover it in the " +
                                                                   std::string(side == 0 ? "train" : "val") + " split");
      }
      const std::size_t v = pick_random(best, rng);
      at.side[v] = side;
      for (int c : manifest.videos[v].fine_labels) {
        if (!covered[c]) --uncovered;
        covered[c] = 1;
        if (side == 1) --not_val[c];
      }
    }
  };
  cover(1, true);
  cover(0, false);

  std::vector<int> train_count(C, 0);
  for (std::size_t v = 0; v < V; ++v)
    if (at.side[v] == 0)
      for (int c : manifest.videos[v].fine_labels) ++train_count[c];
  auto ratio = [&](std::size_t c) { return static_cast<double>(train_count[c]) / class_total[c]; };

  std::vector<char> exhausted(C, 0);
  for (;;) {
    std::size_t target = C;
    for (std::size_t c = 0; c < C; ++c) {
      if (exhausted[c] || ratio(c) >= r) continue;
      if (target == C || ratio(c) < ratio(target)) target = c;
    }
    if (target == C) break;
    double best_score = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> best;
    for (std::size_t v = 0; v < V; ++v) {
      if (at.side[v] != -1) continue;
      const auto& labels = manifest.videos[v].fine_labels;
      if (std::find(labels.begin(), labels.end(), static_cast<int>(target)) == labels.end()) continue;
      // Prefer videos whose other classes still need train samples: mean ratio of the other labels.
      double score = 0.0;
      int others = 0;
      for (int c : labels) {
        if (static_cast<std::size_t>(c) == target) continue;
        score += ratio(c);
        ++others;
      }
      score = others > 0 ? score / others : 0.0;
      if (score < best_score - 1e-12) {
        best_score = score;
        best.clear();
      }
      if (std::abs(score - best_score) <= 1e-12) best.push_back(v);
    }
    if (best.empty()) {
      exhausted[target] = 1;
      continue;
    }
    const std::size_t v = pick_random(best, rng);
    at.side[v] = 0;
    for (int c : manifest.videos[v].fine_labels) ++train_count[c];
  }
  for (auto& s : at.side)
    if (s == -1) s = 1;

  at.ratio.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    at.ratio[c] = ratio(c);
    at.objective += (at.ratio[c] - r) * (at.ratio[c] - r);
  }
  return at;
}

}  // namespace

SplitResult greedy_split(const DatasetManifest& manifest, double target_ratio, int attempts, std::uint64_t seed) {
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) throw DatasetError("split ratio must lie in (0, 1)");
  if (attempts < 1) throw DatasetError("split attempts must be >= 1");
  const std::size_t C = manifest.hierarchy.num_fine();
  std::vector<int> class_total(C, 0);
  for (const auto& v : manifest.videos)
    for (int c : v.fine_labels) ++class_total[c];
  for (std::size_t c = 0; c < C; ++c)
    if (class_total[c] < 2)
      throw InfeasibleSplitError(manifest.hierarchy.fine[c],
                                 "occurs in " + std::to_string(class_total[c]) + " video(s), needs at least 2");

  std::optional<SplitAttempt> best;
  for (int a = 0; a < attempts; ++a) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a)};
    std::mt19937_64 rng(seq);
    SplitAttempt at = split_attempt(manifest, class_total, target_ratio, rng);
    if (!best || at.objective < best->objective) best = std::move(at);
  }

  SplitResult res;
  for (std::size_t v = 0; v < manifest.videos.size(); ++v)
    (best->side[v] == 0 ? res.train : res.val).push_back(manifest.videos[v].id);
  res.per_class_ratio = best->ratio;
  res.objective = best->objective;
  return res;
}

}  // namespace haan
