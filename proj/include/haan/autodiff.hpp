#pragma once

// Minimal reverse-mode differentiation over dense row-major Eigen matrices.
//
// A Tape records every primitive executed during a forward pass. Each node
// owns its value and (lazily) its gradient; backward() walks the nodes in
// reverse insertion order, which is a valid topological order because a
// node can only reference nodes created before it.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace haan {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

/// Named, ordered collection of trainable tensors.
template <typename Scalar>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Matrix<Scalar>> values;

  std::size_t size() const { return values.size(); }

  std::size_t add(std::string name, Matrix<Scalar> value) {
    names.push_back(std::move(name));
    values.push_back(std::move(value));
    return values.size() - 1;
  }

  template <typename Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out;
    out.names = names;
    out.values.reserve(values.size());
    for (const auto& v : values) out.values.push_back(v.template cast<Other>());
    return out;
  }
};

/// Gradient per parameter slot; shapes always mirror the ParamSet it was built from.
template <typename Scalar>
struct GradientSet {
  std::vector<Matrix<Scalar>> grads;

  static GradientSet zeros_like(const ParamSet<Scalar>& params) {
    GradientSet g;
    g.grads.reserve(params.size());
    for (const auto& v : params.values) g.grads.push_back(Matrix<Scalar>::Zero(v.rows(), v.cols()));
    return g;
  }

  void scale(Scalar c) {
    for (auto& g : grads) g *= c;
  }

  void add(const GradientSet& other) {
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += other.grads[i];
  }
};

struct Var {
  std::size_t id = 0;
};

/// While alive, collects the discrete choices made by non-smooth primitives on this thread
/// (relu masks, selections, argmaxes). Two evaluations with equal records lie on the same
/// smooth piece of the function.
class BranchRecord {
 public:
  BranchRecord() : prev_(active_) { active_ = this; }
  ~BranchRecord() { active_ = prev_; }
  BranchRecord(const BranchRecord&) = delete;
  BranchRecord& operator=(const BranchRecord&) = delete;

  static bool recording() { return active_ != nullptr; }
  static void note(std::size_t choice) {
    if (active_) active_->choices_.push_back(choice);
  }
  const std::vector<std::size_t>& choices() const { return choices_; }

 private:
  BranchRecord* prev_;
  std::vector<std::size_t> choices_;
  static inline thread_local BranchRecord* active_ = nullptr;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  static constexpr std::size_t kNoSlot = std::numeric_limits<std::size_t>::max();

  Var constant(Mat value) { return push_node(std::move(value), false, nullptr, kNoSlot); }

  /// Leaf that receives a gradient but is not bound to a parameter slot.
  Var variable(Mat value) { return push_node(std::move(value), true, nullptr, kNoSlot); }

  /// Leaf bound to slot `slot` of the ParamSet being differentiated.
  Var parameter(std::size_t slot, const Mat& value) { return push_node(value, true, nullptr, slot); }

  /// Registers the output of a primitive. `backward` is dropped when no input requires a gradient.
  Var push(Mat value, const std::vector<Var>& inputs, BackwardFn backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    return push_node(std::move(value), needs, needs ? std::move(backward) : nullptr, kNoSlot);
  }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward pass w.r.t. node `v` (zeros when unreached).
  Mat grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Adds `delta` to the gradient of `v`. Used by primitive backward functions.
  void accumulate(Var v, const Mat& delta) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad += delta;
  }

  const Mat& upstream(std::size_t self) const { return nodes_[self].grad; }

  /// Runs the reverse sweep from scalar `loss`, adding parameter gradients into `out`.
  void backward(Var loss, GradientSet<Scalar>& out) {
    if (backward_done_) throw ContractError("backward called twice on the same tape");
    const Mat& lv = nodes_.at(loss.id).value;
    if (lv.rows() != 1 || lv.cols() != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_str(lv.rows(), lv.cols()));
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Mat::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.slot != kNoSlot) {
        if (n.slot >= out.grads.size())
          throw ContractError("parameter slot " + std::to_string(n.slot) + " outside gradient set");
        out.grads[n.slot] += n.grad;
      }
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::size_t slot = kNoSlot;
  };

  Var push_node(Mat value, bool requires_grad, BackwardFn backward, std::size_t slot) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(backward), slot});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace ad {

/// y = x * W^T + b, with x [rows, in], W [out, in], b [1, out].
template <typename Scalar>
Var linear(Tape<Scalar>& t, Var x, Var weight, Var bias) {
  const auto& xv = t.value(x);
  const auto& wv = t.value(weight);
  const auto& bv = t.value(bias);
  if (xv.cols() != wv.cols() || bv.rows() != 1 || bv.cols() != wv.rows())
    throw DimensionError("linear: x " + shape_str(xv.rows(), xv.cols()) + ", weight " +
                         shape_str(wv.rows(), wv.cols()) + ", bias " + shape_str(bv.rows(), bv.cols()));
  Matrix<Scalar> y = xv * wv.transpose();
  y.rowwise() += bv.row(0);
  return t.push(std::move(y), {x, weight, bias}, [x, weight, bias](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.upstream(self);
    if (tp.requires_grad(x)) tp.accumulate(x, g * tp.value(weight));
    if (tp.requires_grad(weight)) tp.accumulate(weight, g.transpose() * tp.value(x));
    if (tp.requires_grad(bias)) tp.accumulate(bias, g.colwise().sum());
  });
}

template <typename Scalar>
Var relu(Tape<Scalar>& t, Var x) {
  Matrix<Scalar> y = t.value(x).cwiseMax(Scalar(0));
  if (BranchRecord::recording())
    for (Eigen::Index i = 0; i < y.size(); ++i) BranchRecord::note(y.data()[i] > Scalar(0));
  return t.push(std::move(y), {x}, [x](Tape<Scalar>& tp, std::size_t self) {
    const auto& xv = tp.value(x);
    Matrix<Scalar> mask = (xv.array() > Scalar(0)).template cast<Scalar>();
    tp.accumulate(x, tp.upstream(self).cwiseProduct(mask));
  });
}

template <typename Scalar>
Var sum(Tape<Scalar>& t, Var x) {
  Matrix<Scalar> y(1, 1);
  y(0, 0) = t.value(x).sum();
  return t.push(std::move(y), {x}, [x](Tape<Scalar>& tp, std::size_t self) {
    const auto& xv = tp.value(x);
    tp.accumulate(x, Matrix<Scalar>::Constant(xv.rows(), xv.cols(), tp.upstream(self)(0, 0)));
  });
}

template <typename Scalar>
Var mean(Tape<Scalar>& t, Var x) {
  const auto& xv = t.value(x);
  if (xv.size() == 0) throw DimensionError("mean of an empty tensor");
  Matrix<Scalar> y(1, 1);
  y(0, 0) = xv.sum() / static_cast<Scalar>(xv.size());
  return t.push(std::move(y), {x}, [x](Tape<Scalar>& tp, std::size_t self) {
    const auto& v = tp.value(x);
    const Scalar g = tp.upstream(self)(0, 0) / static_cast<Scalar>(v.size());
    tp.accumulate(x, Matrix<Scalar>::Constant(v.rows(), v.cols(), g));
  });
}

template <typename Scalar>
Var square(Tape<Scalar>& t, Var x) {
  Matrix<Scalar> y = t.value(x).cwiseAbs2();
  return t.push(std::move(y), {x}, [x](Tape<Scalar>& tp, std::size_t self) {
    tp.accumulate(x, Scalar(2) * tp.upstream(self).cwiseProduct(tp.value(x)));
  });
}

/// Σ weights[i] * terms[i] over 1x1 terms, summed left to right.
template <typename Scalar>
Var weighted_sum(Tape<Scalar>& t, std::span<const Var> terms, std::span<const Scalar> weights) {
  if (terms.size() != weights.size()) throw DimensionError("weighted_sum: term/weight count mismatch");
  Matrix<Scalar> y = Matrix<Scalar>::Zero(1, 1);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const auto& v = t.value(terms[i]);
    if (v.rows() != 1 || v.cols() != 1) throw DimensionError("weighted_sum expects scalar terms");
    y(0, 0) += weights[i] * v(0, 0);
  }
  std::vector<Var> ts(terms.begin(), terms.end());
  std::vector<Scalar> ws(weights.begin(), weights.end());
  return t.push(std::move(y), ts, [ts, ws](Tape<Scalar>& tp, std::size_t self) {
    const Scalar g = tp.upstream(self)(0, 0);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (ws[i] == Scalar(0)) continue;
      tp.accumulate(ts[i], Matrix<Scalar>::Constant(1, 1, ws[i] * g));
    }
  });
}

/// Rows of x selected by `rows` (repeats allowed).
template <typename Scalar>
Var gather_rows(Tape<Scalar>& t, Var x, std::vector<Eigen::Index> rows) {
  const auto& xv = t.value(x);
  Matrix<Scalar> y(static_cast<Eigen::Index>(rows.size()), xv.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= xv.rows()) throw DimensionError("gather_rows: row index out of range");
    y.row(static_cast<Eigen::Index>(r)) = xv.row(rows[r]);
  }
  return t.push(std::move(y), {x}, [x, rows = std::move(rows)](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.upstream(self);
    const auto& xv = tp.value(x);
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(xv.rows(), xv.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) dx.row(rows[r]) += g.row(static_cast<Eigen::Index>(r));
    tp.accumulate(x, dx);
  });
}

/// Output row g is the mean of the rows of x listed in groups[g]; an empty group yields a zero row.
template <typename Scalar>
Var group_mean(Tape<Scalar>& t, Var x, std::vector<std::vector<Eigen::Index>> groups) {
  const auto& xv = t.value(x);
  Matrix<Scalar> y = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(groups.size()), xv.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) continue;
    for (Eigen::Index r : groups[g]) {
      if (r < 0 || r >= xv.rows()) throw DimensionError("group_mean: row index out of range");
      y.row(static_cast<Eigen::Index>(g)) += xv.row(r);
    }
    y.row(static_cast<Eigen::Index>(g)) /= static_cast<Scalar>(groups[g].size());
  }
  return t.push(std::move(y), {x}, [x, groups = std::move(groups)](Tape<Scalar>& tp, std::size_t self) {
    const auto& gr = tp.upstream(self);
    const auto& xv = tp.value(x);
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(xv.rows(), xv.cols());
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (groups[g].empty()) continue;
      const Scalar inv = Scalar(1) / static_cast<Scalar>(groups[g].size());
      for (Eigen::Index r : groups[g]) dx.row(r) += inv * gr.row(static_cast<Eigen::Index>(g));
    }
    tp.accumulate(x, dx);
  });
}

/// Output row g is the elementwise max over rows groups[g]; the gradient routes to the first maximiser.
template <typename Scalar>
Var group_max(Tape<Scalar>& t, Var x, const std::vector<std::vector<Eigen::Index>>& groups) {
  const auto& xv = t.value(x);
  const auto cols = xv.cols();
  Matrix<Scalar> y(static_cast<Eigen::Index>(groups.size()), cols);
  std::vector<Eigen::Index> argmax(groups.size() * static_cast<std::size_t>(cols));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw DimensionError("group_max: empty group");
    for (Eigen::Index c = 0; c < cols; ++c) {
      Eigen::Index best = groups[g][0];
      for (Eigen::Index r : groups[g])
        if (xv(r, c) > xv(best, c)) best = r;
      y(static_cast<Eigen::Index>(g), c) = xv(best, c);
      argmax[g * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] = best;
      BranchRecord::note(static_cast<std::size_t>(best));
    }
  }
  return t.push(std::move(y), {x}, [x, argmax = std::move(argmax), cols](Tape<Scalar>& tp, std::size_t self) {
    const auto& gr = tp.upstream(self);
    const auto& xv = tp.value(x);
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(xv.rows(), xv.cols());
    for (Eigen::Index g = 0; g < gr.rows(); ++g)
      for (Eigen::Index c = 0; c < cols; ++c)
        dx(argmax[static_cast<std::size_t>(g * cols + c)], c) += gr(g, c);
    tp.accumulate(x, dx);
  });
}

/// Main diagonal of a square matrix as a [1, n] row.
template <typename Scalar>
Var diagonal(Tape<Scalar>& t, Var x) {
  const auto& xv = t.value(x);
  if (xv.rows() != xv.cols()) throw DimensionError("diagonal: non-square " + shape_str(xv.rows(), xv.cols()));
  Matrix<Scalar> y = xv.diagonal().transpose();
  return t.push(std::move(y), {x}, [x](Tape<Scalar>& tp, std::size_t self) {
    const auto n = tp.value(x).rows();
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(n, n);
    dx.diagonal() = tp.upstream(self).row(0).transpose();
    tp.accumulate(x, dx);
  });
}

/// Stable scalar BCE with logits: max(z,0) - z*t + log(1 + exp(-|z|)).
template <typename Scalar>
Scalar bce_with_logits_value(Scalar z, Scalar target) {
  return std::max(z, Scalar(0)) - z * target + std::log1p(std::exp(-std::abs(z)));
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

/// Mean BCE-with-logits over all entries of `logits` against 0/1 `targets` of equal shape.
template <typename Scalar>
Var bce_with_logits(Tape<Scalar>& t, Var logits, Matrix<Scalar> targets) {
  const auto& z = t.value(logits);
  if (z.rows() != targets.rows() || z.cols() != targets.cols())
    throw DimensionError("bce_with_logits: logits " + shape_str(z.rows(), z.cols()) + " vs targets " +
                         shape_str(targets.rows(), targets.cols()));
  if (z.size() == 0) throw DimensionError("bce_with_logits: empty input");
  Scalar acc = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) acc += bce_with_logits_value(z(i, j), targets(i, j));
  Matrix<Scalar> y(1, 1);
  y(0, 0) = acc / static_cast<Scalar>(z.size());
  return t.push(std::move(y), {logits}, [logits, targets = std::move(targets)](Tape<Scalar>& tp, std::size_t self) {
    const auto& zv = tp.value(logits);
    const Scalar g = tp.upstream(self)(0, 0) / static_cast<Scalar>(zv.size());
    Matrix<Scalar> dz(zv.rows(), zv.cols());
    for (Eigen::Index i = 0; i < zv.rows(); ++i)
      for (Eigen::Index j = 0; j < zv.cols(); ++j) dz(i, j) = g * (sigmoid(zv(i, j)) - targets(i, j));
    tp.accumulate(logits, dz);
  });
}

/// Mean over rows of logsumexp(row) - row[target].
template <typename Scalar>
Var softmax_cross_entropy(Tape<Scalar>& t, Var logits, std::vector<Eigen::Index> targets) {
  const auto& z = t.value(logits);
  if (static_cast<std::size_t>(z.rows()) != targets.size())
    throw DimensionError("softmax_cross_entropy: " + std::to_string(z.rows()) + " rows vs " +
                         std::to_string(targets.size()) + " targets");
  if (z.rows() == 0) throw DimensionError("softmax_cross_entropy: empty input");
  Matrix<Scalar> probs(z.rows(), z.cols());
  Scalar acc = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    if (targets[r] < 0 || targets[r] >= z.cols())
      throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                              std::to_string(z.cols()) + ")");
    const Scalar m = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - m).exp();
    const Scalar s = probs.row(r).sum();
    probs.row(r) /= s;
    acc += m + std::log(s) - z(r, targets[r]);
  }
  Matrix<Scalar> y(1, 1);
  y(0, 0) = acc / static_cast<Scalar>(z.rows());
  return t.push(std::move(y), {logits},
                [logits, targets = std::move(targets), probs = std::move(probs)](Tape<Scalar>& tp, std::size_t self) {
                  const Scalar g = tp.upstream(self)(0, 0) / static_cast<Scalar>(probs.rows());
                  Matrix<Scalar> dz = probs;
                  for (Eigen::Index r = 0; r < dz.rows(); ++r) dz(r, targets[r]) -= Scalar(1);
                  tp.accumulate(logits, g * dz);
                });
}

/// Plain (untracked) cosine distance 1 - a.b / (|a||b|).
template <typename DerivedA, typename DerivedB>
auto cosine_distance_value(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (!(na > Scalar(0)) || !(nb > Scalar(0))) throw NumericDomainError("cosine distance of a zero-norm vector");
  return Scalar(1) - a.dot(b) / (na * nb);
}

/// Row-wise cosine distance between A and B (same shape) as an [R, 1] column.
template <typename Scalar>
Var cosine_distance_rows(Tape<Scalar>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols())
    throw DimensionError("cosine_distance: " + shape_str(av.rows(), av.cols()) + " vs " +
                         shape_str(bv.rows(), bv.cols()));
  Matrix<Scalar> y(av.rows(), 1);
  for (Eigen::Index r = 0; r < av.rows(); ++r) y(r, 0) = cosine_distance_value(av.row(r), bv.row(r));
  return t.push(std::move(y), {a, b}, [a, b](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.upstream(self);
    const auto& A = tp.value(a);
    const auto& B = tp.value(b);
    Matrix<Scalar> da(A.rows(), A.cols());
    Matrix<Scalar> db(B.rows(), B.cols());
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      const Scalar na = A.row(r).norm();
      const Scalar nb = B.row(r).norm();
      const Scalar cos = A.row(r).dot(B.row(r)) / (na * nb);
      // d(1 - cos)/da = -(b/(|a||b|) - cos * a/|a|^2)
      da.row(r) = -g(r, 0) * (B.row(r) / (na * nb) - cos * A.row(r) / (na * na));
      db.row(r) = -g(r, 0) * (A.row(r) / (na * nb) - cos * B.row(r) / (nb * nb));
    }
    tp.accumulate(a, da);
    tp.accumulate(b, db);
  });
}

/// Cosine distance of two [1, d] rows as a scalar node.
template <typename Scalar>
Var cosine_distance(Tape<Scalar>& t, Var a, Var b) {
  if (t.value(a).rows() != 1 || t.value(b).rows() != 1) throw DimensionError("cosine_distance expects [1, d] rows");
  return cosine_distance_rows(t, a, b);
}

/// Row-wise Euclidean distance as an [R, 1] column; the gradient at coincident rows is taken as zero.
template <typename Scalar>
Var euclidean_distance_rows(Tape<Scalar>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols())
    throw DimensionError("euclidean_distance: " + shape_str(av.rows(), av.cols()) + " vs " +
                         shape_str(bv.rows(), bv.cols()));
  Matrix<Scalar> y = (av - bv).rowwise().norm();
  return t.push(std::move(y), {a, b}, [a, b](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.upstream(self);
    const auto& y = tp.value(Var{self});
    Matrix<Scalar> diff = tp.value(a) - tp.value(b);
    for (Eigen::Index r = 0; r < diff.rows(); ++r) {
      if (y(r, 0) > Scalar(0))
        diff.row(r) *= g(r, 0) / y(r, 0);
      else
        diff.row(r).setZero();
    }
    tp.accumulate(a, diff);
    tp.accumulate(b, -diff);
  });
}

}  // namespace ad

/// Loss-and-gradient callback used by gradient_check. When `grads` is non-null it receives
/// the analytic gradient of the returned loss.
using LossFunction = std::function<double(const ParamSet<double>&, GradientSet<double>*)>;

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst_parameter;
  Eigen::Index worst_index = -1;
};

/// Central-difference check of `loss`'s analytic gradient at `params`.
///
/// `max_coords` caps the number of coordinates per parameter (evenly strided) and
/// `skip(value)` excludes coordinates, e.g. relu kinks. With `skip_kinks`, a coordinate is
/// also excluded when either perturbed evaluation takes a different BranchRecord than the
/// unperturbed one. Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
inline GradientCheckResult gradient_check(const LossFunction& loss, ParamSet<double> params, double eps,
                                          std::size_t max_coords = 0,
                                          const std::function<bool(double)>& skip = nullptr,
                                          bool skip_kinks = false) {
  if (eps < 1e-6 || eps > 1e-3) throw ContractError("gradient_check: eps must lie in [1e-6, 1e-3]");
  auto grads = GradientSet<double>::zeros_like(params);
  const double base = loss(params, &grads);
  std::vector<std::size_t> branches;
  const auto evaluate = [&](std::vector<std::size_t>* record) {
    if (!skip_kinks) return loss(params, nullptr);
    BranchRecord r;
    const double v = loss(params, nullptr);
    *record = r.choices();
    return v;
  };
  const double again = evaluate(&branches);
  if (base != again) throw ContractError("gradient_check: loss function is not deterministic");

  GradientCheckResult res;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& value = params.values[p];
    const Eigen::Index n = value.size();
    const Eigen::Index stride =
        (max_coords == 0 || n <= static_cast<Eigen::Index>(max_coords)) ? 1 : n / static_cast<Eigen::Index>(max_coords);
    for (Eigen::Index i = 0; i < n; i += stride) {
      double& coord = value.data()[i];
      if (skip && skip(coord)) {
        ++res.skipped;
        continue;
      }
      const double saved = coord;
      std::vector<std::size_t> up_branches, down_branches;
      coord = saved + eps;
      const double up = evaluate(&up_branches);
      coord = saved - eps;
      const double down = evaluate(&down_branches);
      coord = saved;
      if (skip_kinks && (up_branches != branches || down_branches != branches)) {
        ++res.skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = grads.grads[p].data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++res.checked;
      if (rel > res.max_relative_error) {
        res.max_relative_error = rel;
        res.worst_parameter = params.names[p];
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace haan
