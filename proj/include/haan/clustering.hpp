#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace haan {

class ClusteringError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ClusterMethod { kmeans, gmm };

std::string to_string(ClusterMethod m);
ClusterMethod cluster_method_from_string(const std::string& s);

/// Fitted clustering. For kmeans only `means` is meaningful; gmm adds diagonal
/// `variances` (N x d) and mixing `weights` (N).
struct ClusterModel {
  ClusterMethod method = ClusterMethod::kmeans;
  Eigen::MatrixXd means;
  Eigen::MatrixXd variances;
  Eigen::VectorXd weights;
  /// Per-iteration objective: inertia for kmeans, total log-likelihood for gmm.
  std::vector<double> history;
  /// Assignment of the fitted points.
  std::vector<int> labels;

  int num_clusters() const { return static_cast<int>(means.rows()); }
  Eigen::Index dim() const { return means.cols(); }
};

inline constexpr double kVarianceFloor = 1e-6;

/// k-means++ seeded Lloyd iterations, best final inertia of `restarts` runs. Empty clusters are
/// reseeded with the point farthest from its own centroid.
ClusterModel kmeans_fit(const Eigen::Ref<const Eigen::MatrixXd>& points, int num_clusters, std::uint64_t seed,
                        int max_iters = 100, double tol = 1e-6, int restarts = 4);

/// Diagonal-covariance EM initialised from kmeans_fit.
ClusterModel gmm_fit(const Eigen::Ref<const Eigen::MatrixXd>& points, int num_clusters, std::uint64_t seed,
                     int max_iters = 100, double tol = 1e-6);

ClusterModel fit_clusters(ClusterMethod method, const Eigen::Ref<const Eigen::MatrixXd>& points, int num_clusters,
                          std::uint64_t seed, int max_iters = 100, double tol = 1e-6);

/// Nearest centroid (kmeans) or max responsibility (gmm); ties go to the lowest index.
std::vector<int> assign(const ClusterModel& model, const Eigen::Ref<const Eigen::MatrixXd>& points);

/// Posterior component probabilities, rows sum to one. For kmeans models this is the one-hot assignment.
Eigen::MatrixXd responsibilities(const ClusterModel& model, const Eigen::Ref<const Eigen::MatrixXd>& points);

double gmm_log_likelihood(const ClusterModel& model, const Eigen::Ref<const Eigen::MatrixXd>& points);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

void save_cluster_model(const ClusterModel& model, const std::filesystem::path& path);
ClusterModel load_cluster_model(const std::filesystem::path& path);

}  // namespace haan
