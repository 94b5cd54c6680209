#include "haan/clustering.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>

namespace haan {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Points = Eigen::Ref<const MatrixXd>;

void check_fit_input(const Points& points, int num_clusters) {
  if (num_clusters < 1) throw ClusteringError("cluster count must be >= 1");
  if (points.rows() < num_clusters)
    throw ClusteringError("cannot fit " + std::to_string(num_clusters) + " clusters to " +
                          std::to_string(points.rows()) + " points");
  if (!points.allFinite()) throw ClusteringError("non-finite feature in clustering pool");
}

// Returns (label, squared distance) of the nearest centroid; ties keep the lowest index.
std::pair<int, double> nearest(const MatrixXd& means, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index k = 0; k < means.rows(); ++k) {
    const double dist = (x - means.row(k)).squaredNorm();
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<int>(k);
    }
  }
  return {best, best_d};
}

// Greedy k-means++: each new centre is the best of several D^2-weighted draws.
MatrixXd kmeanspp_init(const Points& points, int num_clusters, std::mt19937_64& rng) {
  const Index M = points.rows();
  const int trials = 2 + static_cast<int>(std::log(static_cast<double>(num_clusters)));
  MatrixXd means(num_clusters, points.cols());
  std::uniform_int_distribution<Index> uniform(0, M - 1);
  means.row(0) = points.row(uniform(rng));
  Eigen::VectorXd d2(M);
  for (Index i = 0; i < M; ++i) d2(i) = (points.row(i) - means.row(0)).squaredNorm();

  auto draw = [&]() -> Index {
    const double total = d2.sum();
    if (!(total > 0.0)) return uniform(rng);
    const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    double acc = 0.0;
    for (Index i = 0; i < M; ++i) {
      acc += d2(i);
      if (acc > u && d2(i) > 0.0) return i;
    }
    for (Index i = M; i-- > 0;)
      if (d2(i) > 0.0) return i;
    return M - 1;
  };

  Eigen::VectorXd candidate(M), best_d2(M);
  for (int k = 1; k < num_clusters; ++k) {
    Index best = -1;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int t = 0; t < trials; ++t) {
      const Index c = draw();
      for (Index i = 0; i < M; ++i) candidate(i) = std::min(d2(i), (points.row(i) - points.row(c)).squaredNorm());
      const double cost = candidate.sum();
      if (cost < best_cost) {
        best_cost = cost;
        best = c;
        best_d2 = candidate;
      }
    }
    means.row(k) = points.row(best);
    d2 = best_d2;
  }
  return means;
}

double log_gaussian_diag(const Eigen::Ref<const Eigen::RowVectorXd>& x, const Eigen::Ref<const Eigen::RowVectorXd>& mean,
                         const Eigen::Ref<const Eigen::RowVectorXd>& var) {
  const double d = static_cast<double>(x.size());
  const double quad = ((x - mean).array().square() / var.array()).sum();
  return -0.5 * (d * std::log(2.0 * std::numbers::pi) + var.array().log().sum() + quad);
}

// log p(x_i, k) for every point/component.
MatrixXd joint_log_prob(const ClusterModel& m, const Points& points) {
  MatrixXd lp(points.rows(), m.num_clusters());
  for (Index k = 0; k < m.num_clusters(); ++k) {
    const double lw = std::log(m.weights(k));
    for (Index i = 0; i < points.rows(); ++i)
      lp(i, k) = lw + log_gaussian_diag(points.row(i), m.means.row(k), m.variances.row(k));
  }
  return lp;
}

double logsumexp_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double mx = row.maxCoeff();
  return mx + std::log((row.array() - mx).exp().sum());
}

}  // namespace

std::string to_string(ClusterMethod m) { return m == ClusterMethod::kmeans ? "kmeans" : "gmm"; }

ClusterMethod cluster_method_from_string(const std::string& s) {
  if (s == "kmeans") return ClusterMethod::kmeans;
  if (s == "gmm") return ClusterMethod::gmm;
  throw ClusteringError("unknown clustering method '" + s + "'");
}

namespace {

ClusterModel lloyd(const Points& points, int num_clusters, std::mt19937_64& rng, int max_iters, double tol) {
  ClusterModel model;
  model.method = ClusterMethod::kmeans;
  model.means = kmeanspp_init(points, num_clusters, rng);

  const Index M = points.rows();
  std::vector<int> labels(M);
  std::vector<double> dist(M);
  auto assign_all = [&] {
    double inertia = 0.0;
    for (Index i = 0; i < M; ++i) {
      auto [k, d2] = nearest(model.means, points.row(i));
      labels[i] = k;
      dist[i] = d2;
      inertia += d2;
    }
    return inertia;
  };

  for (int iter = 0; iter < max_iters; ++iter) {
    model.history.push_back(assign_all());

    std::vector<Index> counts(num_clusters, 0);
    for (int k : labels) ++counts[k];
    for (int k = 0; k < num_clusters; ++k) {
      if (counts[k] > 0) continue;
      Index far = -1;
      for (Index i = 0; i < M; ++i)
        if (counts[labels[i]] > 1 && (far < 0 || dist[i] > dist[far])) far = i;
      if (far < 0) continue;
      --counts[labels[far]];
      labels[far] = k;
      dist[far] = 0.0;
      counts[k] = 1;
    }

    MatrixXd updated = MatrixXd::Zero(num_clusters, points.cols());
    for (Index i = 0; i < M; ++i) updated.row(labels[i]) += points.row(i);
    for (int k = 0; k < num_clusters; ++k) updated.row(k) /= static_cast<double>(counts[k]);
    const double shift = (updated - model.means).rowwise().norm().maxCoeff();
    model.means = std::move(updated);
    if (shift < tol) break;
  }
  model.history.push_back(assign_all());
  model.labels = labels;
  return model;
}

}  // namespace

ClusterModel kmeans_fit(const Points& points, int num_clusters, std::uint64_t seed, int max_iters, double tol,
                        int restarts) {
  check_fit_input(points, num_clusters);
  if (restarts < 1) throw ClusteringError("restarts must be >= 1");
  std::mt19937_64 rng(seed);
  ClusterModel best = lloyd(points, num_clusters, rng, max_iters, tol);
  for (int r = 1; r < restarts; ++r) {
    ClusterModel run = lloyd(points, num_clusters, rng, max_iters, tol);
    if (run.history.back() < best.history.back()) best = std::move(run);
  }
  return best;
}

ClusterModel gmm_fit(const Points& points, int num_clusters, std::uint64_t seed, int max_iters, double tol) {
  check_fit_input(points, num_clusters);
  const ClusterModel init = kmeans_fit(points, num_clusters, seed, max_iters, tol);
  const Index M = points.rows();
  const Index d = points.cols();

  ClusterModel model;
  model.method = ClusterMethod::gmm;
  model.means = init.means;
  model.variances = MatrixXd::Zero(num_clusters, d);
  model.weights = Eigen::VectorXd::Zero(num_clusters);
  for (Index i = 0; i < M; ++i) {
    const int k = init.labels[i];
    model.variances.row(k) += (points.row(i) - model.means.row(k)).array().square().matrix();
    model.weights(k) += 1.0;
  }
  for (int k = 0; k < num_clusters; ++k) model.variances.row(k) /= model.weights(k);
  model.variances = model.variances.cwiseMax(kVarianceFloor);
  model.weights /= static_cast<double>(M);

  MatrixXd resp(M, num_clusters);
  double prev = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    const MatrixXd lp = joint_log_prob(model, points);
    double ll = 0.0;
    for (Index i = 0; i < M; ++i) {
      const double lse = logsumexp_row(lp.row(i));
      ll += lse;
      resp.row(i) = (lp.row(i).array() - lse).exp();
    }
    model.history.push_back(ll);
    if (iter > 0 && ll - prev < tol * std::max(1.0, std::abs(prev))) break;
    prev = ll;

    const Eigen::VectorXd nk = resp.colwise().sum().transpose();
    for (int k = 0; k < num_clusters; ++k) {
      if (nk(k) <= 0.0) continue;  // weight and parameters stay put when a component gets no mass
      const Eigen::RowVectorXd mu = (resp.col(k).transpose() * points) / nk(k);
      Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(d);
      for (Index i = 0; i < M; ++i) var += resp(i, k) * (points.row(i) - mu).array().square().matrix();
      model.means.row(k) = mu;
      model.variances.row(k) = (var / nk(k)).cwiseMax(kVarianceFloor);
    }
    model.weights = nk / nk.sum();
    for (int k = 0; k < num_clusters; ++k) model.weights(k) = std::max(model.weights(k), 1e-300);
    model.weights /= model.weights.sum();
  }
  model.labels = assign(model, points);
  return model;
}

ClusterModel fit_clusters(ClusterMethod method, const Points& points, int num_clusters, std::uint64_t seed,
                          int max_iters, double tol) {
  return method == ClusterMethod::kmeans ? kmeans_fit(points, num_clusters, seed, max_iters, tol)
                                         : gmm_fit(points, num_clusters, seed, max_iters, tol);
}

std::vector<int> assign(const ClusterModel& model, const Points& points) {
  if (points.cols() != model.dim())
    throw ClusteringError("assign: feature dim " + std::to_string(points.cols()) + " vs model dim " +
                          std::to_string(model.dim()));
  std::vector<int> labels(points.rows());
  if (model.method == ClusterMethod::kmeans) {
    for (Index i = 0; i < points.rows(); ++i) labels[i] = nearest(model.means, points.row(i)).first;
    return labels;
  }
  const MatrixXd lp = joint_log_prob(model, points);
  for (Index i = 0; i < points.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < lp.cols(); ++k)
      if (lp(i, k) > lp(i, best)) best = k;
    labels[i] = static_cast<int>(best);
  }
  return labels;
}

MatrixXd responsibilities(const ClusterModel& model, const Points& points) {
  if (points.cols() != model.dim()) throw ClusteringError("responsibilities: dimension mismatch");
  MatrixXd r = MatrixXd::Zero(points.rows(), model.num_clusters());
  if (model.method == ClusterMethod::kmeans) {
    const auto labels = assign(model, points);
    for (Index i = 0; i < points.rows(); ++i) r(i, labels[i]) = 1.0;
    return r;
  }
  const MatrixXd lp = joint_log_prob(model, points);
  for (Index i = 0; i < points.rows(); ++i) r.row(i) = (lp.row(i).array() - logsumexp_row(lp.row(i))).exp();
  return r;
}

double gmm_log_likelihood(const ClusterModel& model, const Points& points) {
  if (model.method != ClusterMethod::gmm) throw ClusteringError("log-likelihood requires a gmm model");
  const MatrixXd lp = joint_log_prob(model, points);
  double ll = 0.0;
  for (Index i = 0; i < points.rows(); ++i) ll += logsumexp_row(lp.row(i));
  return ll;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw ClusteringError("adjusted_rand_index: label vectors differ in length");
  const double n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<int, int>, double> table;
  std::map<int, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1.0;
    rows[a[i]] += 1.0;
    cols[b[i]] += 1.0;
  }
  auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };
  double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (const auto& [_, c] : table) index += comb2(c);
  for (const auto& [_, c] : rows) sum_rows += comb2(c);
  for (const auto& [_, c] : cols) sum_cols += comb2(c);
  const double expected = sum_rows * sum_cols / comb2(n);
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

// File: "HAANCLUS", u64 header length, JSON header, then float64 blobs (means, variances, weights).
void save_cluster_model(const ClusterModel& model, const std::filesystem::path& path) {
  nlohmann::json header{{"method", to_string(model.method)},
                        {"num_clusters", model.num_clusters()},
                        {"dim", model.dim()},
                        {"blobs", model.method == ClusterMethod::gmm
                                      ? std::vector<std::string>{"means", "variances", "weights"}
                                      : std::vector<std::string>{"means"}}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ClusteringError("cannot write " + path.string());
  os.write("HAANCLUS", 8);
  auto put_u64 = [&os](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put_u64(text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  auto put_blob = [&](const double* data, Index n) {
    for (Index i = 0; i < n; ++i) put_u64(std::bit_cast<std::uint64_t>(data[i]));
  };
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> means = model.means;
  put_blob(means.data(), means.size());
  if (model.method == ClusterMethod::gmm) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> vars = model.variances;
    put_blob(vars.data(), vars.size());
    put_blob(model.weights.data(), model.weights.size());
  }
  if (!os) throw ClusteringError("write failed for " + path.string());
}

ClusterModel load_cluster_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "HAANCLUS")
    throw ClusteringError("not a cluster model file: " + path.string());
  auto get_u64 = [&is] {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(is.get())) << (8 * i);
    return v;
  };
  std::string text(get_u64(), '\0');
  is.read(text.data(), static_cast<std::streamsize>(text.size()));
  const auto header = nlohmann::json::parse(text);
  ClusterModel m;
  m.method = cluster_method_from_string(header.at("method").get<std::string>());
  const Index n = header.at("num_clusters").get<Index>();
  const Index d = header.at("dim").get<Index>();
  auto get_blob = [&](Index rows, Index cols) {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(rows, cols);
    for (Index i = 0; i < out.size(); ++i) out.data()[i] = std::bit_cast<double>(get_u64());
    return MatrixXd(out);
  };
  m.means = get_blob(n, d);
  if (m.method == ClusterMethod::gmm) {
    m.variances = get_blob(n, d);
    m.weights = get_blob(n, 1).col(0);
  }
  if (!is) throw ClusteringError("truncated cluster model file: " + path.string());
  return m;
}

}  // namespace haan
