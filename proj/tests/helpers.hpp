#pragma once

#include "haan/trainer.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace haan::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("haan_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Matrix<double> random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

/// Small synthetic corpus for fast tests.
inline SynthConfig small_synth(std::uint64_t seed, int train = 24, int val = 8) {
  SynthConfig c = SynthConfig::standard();
  c.atomic_dim = 8;
  c.train_videos = train;
  c.val_videos = val;
  c.seed = seed;
  return c;
}

/// Training config for the synthetic corpus.
inline TrainConfig small_train(int epochs, std::uint64_t seed = 0) {
  TrainConfig c;
  c.epochs = epochs;
  c.learning_rate = 1e-3;
  c.num_concepts = 7;
  c.topk_concepts = 2;
  c.embed_dim = 8;
  c.seed = seed;
  return c;
}

}  // namespace haan::testing
