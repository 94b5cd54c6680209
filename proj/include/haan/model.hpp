#pragma once

// HAAN network: encoder, MIL classifier with mean-threshold pooling, pseudo-label
// concept classifier, visual-concept composition and the coarse classifier, plus
// the four training losses.

#include "haan/autodiff.hpp"
#include "haan/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace haan {

enum class DistanceKind { cosine, euclidean };
enum class ComposeMode { mean, max };

std::string to_string(DistanceKind d);
std::string to_string(ComposeMode m);
DistanceKind distance_from_string(const std::string& s);
ComposeMode compose_from_string(const std::string& s);

enum class LossTerm : std::size_t { mil = 0, pseudo = 1, concepts = 2, coarse = 3 };
inline constexpr std::array<const char*, 4> kLossNames = {"mil", "pseudo", "concept", "coarse"};

/// Subset of the four loss terms; always contains the MIL term once validated.
struct LossSet {
  std::array<bool, 4> enabled{true, true, true, true};

  bool has(LossTerm t) const { return enabled[static_cast<std::size_t>(t)]; }
  bool needs_pseudo_labels() const { return has(LossTerm::pseudo) || has(LossTerm::concepts) || has(LossTerm::coarse); }
  std::string str() const;
  static LossSet parse(const std::string& csv);
  static LossSet only_mil() { return LossSet{{true, false, false, false}}; }
  bool operator==(const LossSet&) const = default;
};

struct LossWeights {
  double mil = 1.0;
  double pseudo = 0.001;
  double concepts = 0.01;
  double coarse = 1.0;

  double operator[](LossTerm t) const {
    switch (t) {
      case LossTerm::mil: return mil;
      case LossTerm::pseudo: return pseudo;
      case LossTerm::concepts: return concepts;
      case LossTerm::coarse: return coarse;
    }
    return 0.0;
  }
};

struct LossBreakdown {
  double l_mil = 0.0;
  double l_pseudo = 0.0;
  double l_concept = 0.0;
  double l_coarse = 0.0;
  double total = 0.0;
  LossWeights lambda;
};

struct ObjectiveConfig {
  LossWeights lambda;
  LossSet losses;
  int topk_concepts = 5;
  DistanceKind distance = DistanceKind::cosine;
  ComposeMode compose = ComposeMode::mean;

  bool active(LossTerm t) const { return losses.has(t) && lambda[t] != 0.0; }
};

struct ModelShape {
  int input_dim = 0;
  int hidden_dim = 0;
  int embed_dim = 0;
  int concept_hidden_dim = 0;
  int num_fine = 0;
  int num_coarse = 0;
  int num_concepts = 0;

  bool operator==(const ModelShape&) const = default;
};

/// Parameter slots in checkpoint order.
enum ParamSlot : std::size_t {
  encoder1_weight,
  encoder1_bias,
  encoder2_weight,
  encoder2_bias,
  mil_weight,
  mil_bias,
  concept1_weight,
  concept1_bias,
  concept2_weight,
  concept2_bias,
  coarse_weight,
  coarse_bias,
  kNumParamSlots
};

/// Trainable weights.
template <typename Scalar>
struct HaanParams {
  using Slot = ParamSlot;
  static constexpr std::size_t kNumSlots = kNumParamSlots;

  ModelShape shape;
  ParamSet<Scalar> params;

  const Matrix<Scalar>& operator[](Slot s) const { return params.values[s]; }
  Matrix<Scalar>& operator[](Slot s) { return params.values[s]; }

  /// Class prototypes w^j: the MIL classifier's weight rows.
  const Matrix<Scalar>& prototypes() const { return params.values[mil_weight]; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
  static HaanParams initialize(const ModelShape& shape, std::uint64_t seed) {
    HaanParams p;
    p.shape = shape;
    std::mt19937_64 rng(seed);
    auto layer = [&](const std::string& name, int out, int in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      Matrix<Scalar> w(out, in);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(u(rng));
      Matrix<Scalar> b(1, out);
      for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<Scalar>(u(rng));
      p.params.add(name + ".weight", std::move(w));
      p.params.add(name + ".bias", std::move(b));
    };
    layer("encoder1", shape.hidden_dim, shape.input_dim);
    layer("encoder2", shape.embed_dim, shape.hidden_dim);
    layer("mil", shape.num_fine, shape.embed_dim);
    layer("concept1", shape.concept_hidden_dim, shape.embed_dim);
    layer("concept2", shape.num_concepts, shape.concept_hidden_dim);
    layer("coarse", shape.num_coarse, shape.embed_dim);
    return p;
  }

  template <typename Other>
  HaanParams<Other> cast() const {
    HaanParams<Other> out;
    out.shape = shape;
    out.params = params.template cast<Other>();
    return out;
  }
};

/// Parameters registered on a tape, indexed by HaanParams slot.
struct ParamVars {
  std::array<Var, kNumParamSlots> vars{};
  Var operator[](std::size_t s) const { return vars[s]; }
};

template <typename Scalar>
ParamVars register_params(Tape<Scalar>& t, const HaanParams<Scalar>& p, bool trainable = true) {
  ParamVars pv;
  for (std::size_t s = 0; s < kNumParamSlots; ++s)
    pv.vars[s] = trainable ? t.parameter(s, p.params.values[s]) : t.constant(p.params.values[s]);
  return pv;
}

// ---------------------------------------------------------------------------
// Differentiable pieces

/// x = E(clips): two linear layers with relu between.
template <typename Scalar>
Var encode(Tape<Scalar>& t, const ParamVars& pv, Var clips) {
  if (t.value(clips).cols() != t.value(pv[encoder1_weight]).cols())
    throw DimensionError("encode: clip dim " + std::to_string(t.value(clips).cols()) + " vs encoder input dim " +
                         std::to_string(t.value(pv[encoder1_weight]).cols()));
  Var h = ad::relu(t, ad::linear(t, clips, pv[encoder1_weight], pv[encoder1_bias]));
  return ad::linear(t, h, pv[encoder2_weight], pv[encoder2_bias]);
}

/// s = S(x): per-clip class logits.
template <typename Scalar>
Var clip_scores(Tape<Scalar>& t, const ParamVars& pv, Var x) {
  return ad::linear(t, x, pv[mil_weight], pv[mil_bias]);
}

/// Per class, the mean of the clip scores that are >= that class's mean score. Returns [1, C].
/// The selection mask is held constant under differentiation.
template <typename Scalar>
Var mil_pool(Tape<Scalar>& t, Var scores) {
  const auto& s = t.value(scores);
  const Eigen::Index T = s.rows();
  const Eigen::Index C = s.cols();
  if (T < 1) throw DimensionError("mil_pool: needs at least one clip");
  Matrix<Scalar> y(1, C);
  std::vector<Scalar> counts(static_cast<std::size_t>(C));
  std::vector<Scalar> thresholds(static_cast<std::size_t>(C));
  for (Eigen::Index j = 0; j < C; ++j) {
    Scalar total = 0;
    Scalar top = s(0, j);
    for (Eigen::Index i = 0; i < T; ++i) {
      total += s(i, j);
      top = std::max(top, s(i, j));
    }
    // Rounding can push the computed mean of a constant column above its entries.
    const Scalar mean = std::min(total / static_cast<Scalar>(T), top);
    Scalar acc = 0;
    Scalar count = 0;
    for (Eigen::Index i = 0; i < T; ++i) {
      const bool chosen = s(i, j) >= mean;
      BranchRecord::note(chosen);
      if (chosen) {
        acc += s(i, j);
        count += Scalar(1);
      }
    }
    y(0, j) = acc / count;
    counts[j] = count;
    thresholds[j] = mean;
  }
  return t.push(std::move(y), {scores},
                [scores, counts = std::move(counts), thresholds = std::move(thresholds)](Tape<Scalar>& tp,
                                                                                         std::size_t self) {
                  const auto& g = tp.upstream(self);
                  const auto& sv = tp.value(scores);
                  Matrix<Scalar> ds = Matrix<Scalar>::Zero(sv.rows(), sv.cols());
                  for (Eigen::Index j = 0; j < sv.cols(); ++j)
                    for (Eigen::Index i = 0; i < sv.rows(); ++i)
                      if (sv(i, j) >= thresholds[j]) ds(i, j) = g(0, j) / counts[j];
                  tp.accumulate(scores, ds);
                });
}

/// Mean BCE-with-logits over classes between pooled logits [1, C] and multi-hot y.
template <typename Scalar>
Var mil_loss(Tape<Scalar>& t, Var pooled, const std::vector<Scalar>& y) {
  Matrix<Scalar> target = Eigen::Map<const Matrix<Scalar>>(y.data(), 1, static_cast<Eigen::Index>(y.size()));
  return ad::bce_with_logits(t, pooled, std::move(target));
}

/// F(x): concept-classifier logits [T, N].
template <typename Scalar>
Var concept_logits(Tape<Scalar>& t, const ParamVars& pv, Var x) {
  Var h = ad::relu(t, ad::linear(t, x, pv[concept1_weight], pv[concept1_bias]));
  return ad::linear(t, h, pv[concept2_weight], pv[concept2_bias]);
}

/// Mean cross entropy of F(x_i) against 0-based pseudo labels.
template <typename Scalar>
Var pseudo_loss(Tape<Scalar>& t, const ParamVars& pv, Var x, const std::vector<int>& labels) {
  Var logits = concept_logits(t, pv, x);
  return ad::softmax_cross_entropy(t, logits, std::vector<Eigen::Index>(labels.begin(), labels.end()));
}

/// Per-video visual concepts: row n is the mean of the clips labelled n, or zero when absent.
struct ConceptBank {
  Var concepts;
  std::vector<bool> present;
  std::vector<std::vector<Eigen::Index>> members;
};

template <typename Scalar>
ConceptBank extract_visual_concepts(Tape<Scalar>& t, Var x, const std::vector<int>& labels, int num_concepts) {
  if (static_cast<Eigen::Index>(labels.size()) != t.value(x).rows())
    throw DimensionError("extract_visual_concepts: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(t.value(x).rows()) + " clips");
  ConceptBank bank;
  bank.members.resize(static_cast<std::size_t>(num_concepts));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_concepts)
      throw std::out_of_range("pseudo label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(num_concepts) + ")");
    bank.members[labels[i]].push_back(static_cast<Eigen::Index>(i));
  }
  bank.present.resize(bank.members.size());
  for (std::size_t n = 0; n < bank.members.size(); ++n) bank.present[n] = !bank.members[n].empty();
  bank.concepts = ad::group_mean(t, x, bank.members);
  return bank;
}

/// Distance of two vectors under `kind`; cosine requires nonzero norms.
template <typename DerivedA, typename DerivedB>
auto vector_distance(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b, DistanceKind kind) {
  if (kind == DistanceKind::cosine) return ad::cosine_distance_value(a, b);
  return (a - b).norm();
}

/// D[n, j] = distance(v_n, w^j); absent or zero-norm concepts get +infinity.
template <typename Scalar>
Matrix<Scalar> concept_distances(const Matrix<Scalar>& concepts, const std::vector<bool>& present,
                                 const Matrix<Scalar>& prototypes, DistanceKind kind) {
  if (concepts.cols() != prototypes.cols()) throw DimensionError("concept_distances: concept/prototype dim mismatch");
  Matrix<Scalar> d(concepts.rows(), prototypes.rows());
  for (Eigen::Index j = 0; j < prototypes.rows(); ++j)
    if (kind == DistanceKind::cosine && !(prototypes.row(j).norm() > Scalar(0)))
      throw NumericDomainError("class prototype " + std::to_string(j) + " has zero norm");
  for (Eigen::Index n = 0; n < concepts.rows(); ++n) {
    const bool usable = present[static_cast<std::size_t>(n)] && concepts.row(n).norm() > Scalar(0);
    for (Eigen::Index j = 0; j < prototypes.rows(); ++j)
      d(n, j) = usable ? vector_distance(concepts.row(n), prototypes.row(j), kind)
                       : std::numeric_limits<Scalar>::infinity();
  }
  return d;
}

/// Indices of the k finite entries of column `j` with smallest distance (ties: lower index first).
template <typename Scalar>
std::vector<Eigen::Index> topk_concepts(const Matrix<Scalar>& distances, Eigen::Index j, int k) {
  std::vector<Eigen::Index> idx;
  for (Eigen::Index n = 0; n < distances.rows(); ++n)
    if (std::isfinite(distances(n, j))) idx.push_back(n);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return distances(a, j) < distances(b, j); });
  if (static_cast<int>(idx.size()) > k) idx.resize(static_cast<std::size_t>(k));
  for (Eigen::Index n : idx) BranchRecord::note(static_cast<std::size_t>(n));
  return idx;
}

/// e^j for every fine class: mean of that class's top-k concepts. Returns [C, d'] and the selections.
template <typename Scalar>
Var compose_fine(Tape<Scalar>& t, const ConceptBank& bank, const Matrix<Scalar>& distances, int k,
                 std::vector<std::vector<Eigen::Index>>* selections = nullptr) {
  if (k < 1) throw ContractError("compose_fine: k must be >= 1");
  std::vector<std::vector<Eigen::Index>> groups(static_cast<std::size_t>(distances.cols()));
  for (Eigen::Index j = 0; j < distances.cols(); ++j) {
    groups[j] = topk_concepts(distances, j, k);
    if (groups[j].empty()) throw ContractError("compose_fine: video has no present visual concept");
  }
  if (selections) *selections = groups;
  return ad::group_mean(t, bank.concepts, std::move(groups));
}

/// Row-wise distance node between two equally shaped row stacks.
template <typename Scalar>
Var distance_rows(Tape<Scalar>& t, Var a, Var b, DistanceKind kind) {
  return kind == DistanceKind::cosine ? ad::cosine_distance_rows(t, a, b) : ad::euclidean_distance_rows(t, a, b);
}

/// Mean over positive classes of D(e^j, w^j).
template <typename Scalar>
Var concept_loss(Tape<Scalar>& t, Var fine_reps, Var prototypes, const std::vector<Scalar>& y, DistanceKind kind) {
  std::vector<Eigen::Index> pos;
  for (std::size_t j = 0; j < y.size(); ++j)
    if (y[j] > Scalar(0.5)) pos.push_back(static_cast<Eigen::Index>(j));
  if (pos.empty()) throw ContractError("concept_loss: video has no positive class");
  Var e = ad::gather_rows(t, fine_reps, pos);
  Var w = ad::gather_rows(t, prototypes, pos);
  return ad::mean(t, distance_rows(t, e, w, kind));
}

/// e'_u: elementwise mean or max of the fine representations in O_u. Returns [U, d'].
template <typename Scalar>
Var compose_coarse(Tape<Scalar>& t, Var fine_reps, const LabelHierarchy& hierarchy, ComposeMode mode) {
  std::vector<std::vector<Eigen::Index>> groups;
  for (const auto& g : hierarchy.grouping) {
    if (g.empty()) throw ContractError("compose_coarse: empty coarse group");
    groups.emplace_back(g.begin(), g.end());
  }
  return mode == ComposeMode::mean ? ad::group_mean(t, fine_reps, std::move(groups))
                                   : ad::group_max(t, fine_reps, groups);
}

/// Mean over coarse classes of BCE(S'(e'_u)_u, y'_u).
template <typename Scalar>
Var coarse_loss(Tape<Scalar>& t, const ParamVars& pv, Var coarse_reps, const std::vector<Scalar>& coarse_y) {
  Var logits = ad::linear(t, coarse_reps, pv[coarse_weight], pv[coarse_bias]);
  Var own = ad::diagonal(t, logits);
  Matrix<Scalar> target =
      Eigen::Map<const Matrix<Scalar>>(coarse_y.data(), 1, static_cast<Eigen::Index>(coarse_y.size()));
  return ad::bce_with_logits(t, own, std::move(target));
}

// ---------------------------------------------------------------------------
// Whole-objective evaluation

template <typename Scalar>
struct VideoExample {
  const Matrix<Scalar>* clips = nullptr;
  std::vector<Scalar> fine;                  // multi-hot y
  std::vector<Scalar> coarse;                // multi-hot y'
  const std::vector<int>* pseudo = nullptr;  // 0-based per-clip cluster ids
};

template <typename Scalar>
VideoExample<Scalar> make_example(const Matrix<Scalar>& clips, const VideoRecord& video,
                                  const LabelHierarchy& hierarchy, const std::vector<int>* pseudo) {
  VideoExample<Scalar> ex;
  ex.clips = &clips;
  const auto fine = video.multi_hot(hierarchy.num_fine());
  const auto coarse = coarse_labels_from_fine(fine, hierarchy);
  ex.fine.assign(fine.begin(), fine.end());
  ex.coarse.assign(coarse.begin(), coarse.end());
  ex.pseudo = pseudo;
  return ex;
}

/// One video's objective on a tape. `terms` receives the four term nodes (unset when inactive).
template <typename Scalar>
Var video_objective(Tape<Scalar>& t, const ParamVars& pv, const VideoExample<Scalar>& ex,
                    const LabelHierarchy& hierarchy, const ObjectiveConfig& cfg, LossBreakdown& out) {
  const bool use_pseudo = cfg.active(LossTerm::pseudo);
  const bool use_concept = cfg.active(LossTerm::concepts);
  const bool use_coarse = cfg.active(LossTerm::coarse);
  if ((use_pseudo || use_concept || use_coarse) && ex.pseudo == nullptr)
    throw ContractError("pseudo labels required for the enabled loss terms");

  Var clips = t.constant(*ex.clips);
  Var x = encode(t, pv, clips);

  std::vector<Var> terms;
  std::vector<Scalar> weights;
  out = LossBreakdown{};
  out.lambda = cfg.lambda;

  if (cfg.active(LossTerm::mil)) {
    Var l = mil_loss(t, mil_pool(t, clip_scores(t, pv, x)), ex.fine);
    out.l_mil = static_cast<double>(t.value(l)(0, 0));
    terms.push_back(l);
    weights.push_back(static_cast<Scalar>(cfg.lambda.mil));
  }
  if (use_pseudo) {
    Var l = pseudo_loss(t, pv, x, *ex.pseudo);
    out.l_pseudo = static_cast<double>(t.value(l)(0, 0));
    terms.push_back(l);
    weights.push_back(static_cast<Scalar>(cfg.lambda.pseudo));
  }
  if (use_concept || use_coarse) {
    const int N = static_cast<int>(t.value(pv[concept2_weight]).rows());
    ConceptBank bank = extract_visual_concepts(t, x, *ex.pseudo, N);
    const Matrix<Scalar> D =
        concept_distances(t.value(bank.concepts), bank.present, t.value(pv[mil_weight]), cfg.distance);
    Var reps = compose_fine(t, bank, D, cfg.topk_concepts);
    if (use_concept) {
      Var l = concept_loss(t, reps, pv[mil_weight], ex.fine, cfg.distance);
      out.l_concept = static_cast<double>(t.value(l)(0, 0));
      terms.push_back(l);
      weights.push_back(static_cast<Scalar>(cfg.lambda.concepts));
    }
    if (use_coarse) {
      Var l = coarse_loss(t, pv, compose_coarse(t, reps, hierarchy, cfg.compose), ex.coarse);
      out.l_coarse = static_cast<double>(t.value(l)(0, 0));
      terms.push_back(l);
      weights.push_back(static_cast<Scalar>(cfg.lambda.coarse));
    }
  }
  Var total = ad::weighted_sum<Scalar>(t, terms, weights);
  out.total = static_cast<double>(t.value(total)(0, 0));
  return total;
}

/// Batch objective: per-video losses averaged in fixed order. Adds the batch-mean gradient to `grads` when given.
template <typename Scalar>
LossBreakdown total_loss(const HaanParams<Scalar>& params, std::span<const VideoExample<Scalar>> batch,
                         const LabelHierarchy& hierarchy, const ObjectiveConfig& cfg,
                         GradientSet<Scalar>* grads = nullptr) {
  if (batch.empty()) throw ContractError("total_loss: empty batch");
  LossBreakdown mean;
  mean.lambda = cfg.lambda;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(batch.size());
  for (const auto& ex : batch) {
    Tape<Scalar> t;
    const ParamVars pv = register_params(t, params, grads != nullptr);
    LossBreakdown one;
    Var total = video_objective(t, pv, ex, hierarchy, cfg, one);
    if (grads) {
      auto g = GradientSet<Scalar>::zeros_like(params.params);
      t.backward(total, g);
      g.scale(inv);
      grads->add(g);
    }
    mean.l_mil += one.l_mil;
    mean.l_pseudo += one.l_pseudo;
    mean.l_concept += one.l_concept;
    mean.l_coarse += one.l_coarse;
    mean.total += one.total;
  }
  const double n = static_cast<double>(batch.size());
  mean.l_mil /= n;
  mean.l_pseudo /= n;
  mean.l_concept /= n;
  mean.l_coarse /= n;
  mean.total /= n;
  return mean;
}

// ---------------------------------------------------------------------------
// Untracked forward passes for inference and clustering

template <typename Scalar>
Matrix<Scalar> encode_eval(const HaanParams<Scalar>& p, const Matrix<Scalar>& clips) {
  if (clips.cols() != p[encoder1_weight].cols()) throw DimensionError("encode: clip dimension mismatch");
  Matrix<Scalar> h = clips * p[encoder1_weight].transpose();
  h.rowwise() += p[encoder1_bias].row(0);
  h = h.cwiseMax(Scalar(0));
  Matrix<Scalar> x = h * p[encoder2_weight].transpose();
  x.rowwise() += p[encoder2_bias].row(0);
  return x;
}

template <typename Scalar>
Matrix<Scalar> clip_scores_eval(const HaanParams<Scalar>& p, const Matrix<Scalar>& clips) {
  Matrix<Scalar> s = encode_eval(p, clips) * p[mil_weight].transpose();
  s.rowwise() += p[mil_bias].row(0);
  return s;
}

}  // namespace haan
