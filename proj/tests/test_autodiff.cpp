#include "helpers.hpp"

#include "haan/autodiff.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

using namespace haan;
using haan::testing::random_matrix;
using Mat = Matrix<double>;

namespace {

Mat mat(std::initializer_list<std::initializer_list<double>> rows) {
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

using Build = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Scalarises any output with a fixed random projection, then squares, so every Jacobian entry matters.
GradientCheckResult check_op(const std::vector<Mat>& inputs, const Build& build, std::uint64_t seed,
                             const std::function<bool(double)>& skip = nullptr) {
  ParamSet<double> ps;
  for (std::size_t i = 0; i < inputs.size(); ++i) ps.add("in" + std::to_string(i), inputs[i]);
  std::mt19937_64 rng(seed);
  std::optional<Mat> proj;
  LossFunction loss = [&](const ParamSet<double>& p, GradientSet<double>* g) {
    Tape<double> t;
    std::vector<Var> vs;
    for (std::size_t i = 0; i < p.size(); ++i) vs.push_back(t.parameter(i, p.values[i]));
    Var out = build(t, vs);
    if (t.value(out).size() != 1) {
      if (!proj) proj = random_matrix(3, t.value(out).cols(), rng);
      Var b = t.constant(Mat::Zero(1, 3));
      out = ad::sum(t, ad::square(t, ad::linear(t, out, t.constant(*proj), b)));
    }
    if (g) t.backward(out, *g);
    return t.value(out)(0, 0);
  };
  return gradient_check(loss, ps, 1e-6, 0, skip);
}

double scalar_of(Tape<double>& t, Var v) { return t.value(v)(0, 0); }

}  // namespace

TEST_CASE("linear forward examples") {
  Tape<double> t;
  Var y = ad::linear(t, t.constant(mat({{1, 0}})), t.constant(mat({{2, 3}})), t.constant(mat({{1}})));
  CHECK(t.value(y)(0, 0) == doctest::Approx(3.0));

  std::mt19937_64 rng(1);
  const Mat x = random_matrix(4, 3, rng);
  Var id = ad::linear(t, t.constant(x), t.constant(Mat::Identity(3, 3)), t.constant(Mat::Zero(1, 3)));
  CHECK(t.value(id).isApprox(x));
}

TEST_CASE("linear bias gradient of a sum is all ones") {
  std::mt19937_64 rng(2);
  Tape<double> t;
  Var x = t.constant(random_matrix(5, 3, rng));
  Var w = t.parameter(0, random_matrix(4, 3, rng));
  Var b = t.parameter(1, random_matrix(1, 4, rng));
  Var loss = ad::sum(t, ad::linear(t, x, w, b));
  ParamSet<double> ps;
  ps.add("w", t.value(w));
  ps.add("b", t.value(b));
  auto g = GradientSet<double>::zeros_like(ps);
  t.backward(loss, g);
  // Each bias entry contributes once per row.
  CHECK(g.grads[1].isApprox(Mat::Constant(1, 4, 5.0)));
}

TEST_CASE("linear shape mismatch names the shapes") {
  Tape<double> t;
  try {
    ad::linear(t, t.constant(Mat::Zero(2, 3)), t.constant(Mat::Zero(4, 5)), t.constant(Mat::Zero(1, 4)));
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
    CHECK(std::string(e.what()).find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("relu values and gradient mask") {
  Tape<double> t;
  Var x = t.variable(mat({{-1, 0, 2}}));
  Var y = ad::relu(t, x);
  CHECK(t.value(y) == mat({{0, 0, 2}}));
  CHECK(t.value(ad::relu(t, t.constant(mat({{-3, -0.5}})))).isZero());
  ParamSet<double> none;
  auto g = GradientSet<double>::zeros_like(none);
  t.backward(ad::sum(t, y), g);
  CHECK(t.grad(x) == mat({{0, 0, 1}}));
}

TEST_CASE("softmax cross entropy examples") {
  Tape<double> t;
  CHECK(scalar_of(t, ad::softmax_cross_entropy(t, t.constant(Mat::Zero(1, 7)), {3})) ==
        doctest::Approx(std::log(7.0)));
  const double big = scalar_of(t, ad::softmax_cross_entropy(t, t.constant(mat({{1000, 0}})), {0}));
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(scalar_of(t, ad::softmax_cross_entropy(t, t.constant(mat({{1, 2}})), {1})) ==
        doctest::Approx(std::log1p(std::exp(-1.0))));
  CHECK(scalar_of(t, ad::softmax_cross_entropy(t, t.constant(mat({{1, 2}})), {1})) ==
        doctest::Approx(0.3133).epsilon(1e-4));
  CHECK_THROWS_AS(ad::softmax_cross_entropy(t, t.constant(mat({{1, 2}})), {2}), std::out_of_range);
  CHECK_THROWS_AS(ad::softmax_cross_entropy(t, t.constant(mat({{1, 2}})), {-1}), std::out_of_range);
}

TEST_CASE("softmax cross entropy gradient is softmax minus one-hot") {
  Tape<double> t;
  const Mat z = mat({{0.5, -1.0, 2.0}});
  Var x = t.variable(z);
  Var l = ad::softmax_cross_entropy(t, x, {0});
  ParamSet<double> none;
  auto g = GradientSet<double>::zeros_like(none);
  t.backward(l, g);
  Mat p = (z.array() - z.maxCoeff()).exp();
  p /= p.sum();
  p(0, 0) -= 1.0;
  CHECK(t.grad(x).isApprox(p, 1e-12));
  CHECK(scalar_of(t, l) >= 0.0);
}

TEST_CASE("bce with logits examples") {
  Tape<double> t;
  auto bce = [&](double z, double y) {
    return scalar_of(t, ad::bce_with_logits(t, t.constant(mat({{z}})), mat({{y}})));
  };
  CHECK(bce(0, 1) == doctest::Approx(std::log(2.0)));
  CHECK(bce(1000, 1) == doctest::Approx(0.0));
  CHECK(bce(1, 0) == doctest::Approx(std::log1p(std::exp(1.0))));
  CHECK(bce(1, 0) == doctest::Approx(1.3133).epsilon(1e-4));

  Var z = t.variable(mat({{0.3, -2.0}}));
  Var l = ad::bce_with_logits(t, z, mat({{1, 0}}));
  ParamSet<double> none;
  auto g = GradientSet<double>::zeros_like(none);
  t.backward(l, g);
  // mean over two entries
  CHECK(t.grad(z)(0, 0) == doctest::Approx((ad::sigmoid(0.3) - 1.0) / 2));
  CHECK(t.grad(z)(0, 1) == doctest::Approx(ad::sigmoid(-2.0) / 2));
}

TEST_CASE("cosine distance examples") {
  const Eigen::RowVector2d a(1, 0), b(0, 1);
  CHECK(ad::cosine_distance_value(a, a) == doctest::Approx(0.0));
  CHECK(ad::cosine_distance_value(a, b) == doctest::Approx(1.0));
  for (double c : {1e-3, 0.5, 7.0, 1e4})
    CHECK(ad::cosine_distance_value(a, Eigen::RowVector2d(c, 0)) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(ad::cosine_distance_value(a, Eigen::RowVector2d(0, 0)), NumericDomainError);
  CHECK(ad::cosine_distance_value(a, Eigen::RowVector2d(-2, 0)) == doctest::Approx(2.0));
}

TEST_CASE("backward contract") {
  SUBCASE("constant loss gives zero gradients") {
    Tape<double> t;
    ParamSet<double> ps;
    ps.add("p", mat({{1, 2}}));
    t.parameter(0, ps.values[0]);
    Var c = t.constant(mat({{4}}));
    auto g = GradientSet<double>::zeros_like(ps);
    t.backward(c, g);
    CHECK(g.grads[0].isZero());
  }
  SUBCASE("sum of squares gives 2p") {
    Tape<double> t;
    ParamSet<double> ps;
    ps.add("p", mat({{1, -2, 3}}));
    ps.add("unused", mat({{5}}));
    Var p = t.parameter(0, ps.values[0]);
    t.parameter(1, ps.values[1]);
    auto g = GradientSet<double>::zeros_like(ps);
    t.backward(ad::sum(t, ad::square(t, p)), g);
    CHECK(g.grads[0] == mat({{2, -4, 6}}));
    CHECK(g.grads[1].isZero());
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape<double> t;
    Var p = t.variable(mat({{1, 2}}));
    ParamSet<double> none;
    auto g = GradientSet<double>::zeros_like(none);
    CHECK_THROWS_AS(t.backward(p, g), ContractError);
  }
  SUBCASE("second backward on one tape is rejected") {
    Tape<double> t;
    Var l = ad::sum(t, t.variable(mat({{1, 2}})));
    ParamSet<double> none;
    auto g = GradientSet<double>::zeros_like(none);
    t.backward(l, g);
    CHECK_THROWS_AS(t.backward(l, g), ContractError);
  }
}

TEST_CASE("gradient_check harness") {
  ParamSet<double> ps;
  ps.add("p", mat({{0.3, -1.2, 2.0}}));
  LossFunction quad = [](const ParamSet<double>& p, GradientSet<double>* g) {
    Tape<double> t;
    Var v = t.parameter(0, p.values[0]);
    Var l = ad::sum(t, ad::square(t, v));
    if (g) t.backward(l, *g);
    return t.value(l)(0, 0);
  };
  CHECK(gradient_check(quad, ps, 1e-5).max_relative_error < 1e-7);
  CHECK_THROWS_AS(gradient_check(quad, ps, 1e-2), ContractError);
  CHECK_THROWS_AS(gradient_check(quad, ps, 1e-8), ContractError);

  int calls = 0;
  LossFunction flaky = [&](const ParamSet<double>& p, GradientSet<double>* g) { return quad(p, g) + (calls++ % 2); };
  CHECK_THROWS_AS(gradient_check(flaky, ps, 1e-5), ContractError);

  // relu kink exclusion
  ParamSet<double> kink;
  kink.add("x", mat({{0.0, 1e-7, 0.8}}));
  LossFunction r = [](const ParamSet<double>& p, GradientSet<double>* g) {
    Tape<double> t;
    Var l = ad::sum(t, ad::relu(t, t.parameter(0, p.values[0])));
    if (g) t.backward(l, *g);
    return t.value(l)(0, 0);
  };
  const auto res = gradient_check(r, kink, 1e-6, 0, [](double v) { return std::abs(v) < 1e-5; });
  CHECK(res.skipped == 2);
  CHECK(res.checked == 1);
  CHECK(res.max_relative_error < 1e-7);

  // the same exclusion found from the recorded branches
  const auto auto_res = gradient_check(r, kink, 1e-6, 0, nullptr, true);
  CHECK(auto_res.skipped == 2);
  CHECK(auto_res.checked == 1);
  const auto naive = gradient_check(r, kink, 1e-6);
  CHECK(naive.max_relative_error > 0.1);
}

TEST_CASE("branch records") {
  Tape<double> t;
  Var x = t.constant(mat({{-1.0, 2.0}, {3.0, 0.5}}));
  {
    BranchRecord outer;
    ad::relu(t, x);
    {
      BranchRecord inner;
      ad::group_max(t, x, {{0, 1}});
      CHECK(inner.choices() == std::vector<std::size_t>{1, 0});
    }
    CHECK(outer.choices() == std::vector<std::size_t>{0, 1, 1, 1});
  }
  CHECK_FALSE(BranchRecord::recording());
  ad::relu(t, x);
}

TEST_CASE("every primitive matches central differences on 100 random inputs") {
  std::mt19937_64 rng(42);
  auto kink = [](double v) { return std::abs(v) < 1e-5; };
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> dim(1, 5);
    const int r = dim(rng), c = dim(rng), o = dim(rng);
    const Mat x = random_matrix(r, c, rng);
    const Mat y = random_matrix(r, c, rng);
    const Mat w = random_matrix(o, c, rng);
    const Mat b = random_matrix(1, o, rng);
    const std::uint64_t s = rng();

    worst = std::max(worst, check_op({x, w, b}, [](auto& t, const auto& v) { return ad::linear(t, v[0], v[1], v[2]); },
                                     s).max_relative_error);
    worst = std::max(worst, check_op({x}, [](auto& t, const auto& v) { return ad::relu(t, v[0]); }, s, kink)
                                .max_relative_error);
    worst = std::max(worst, check_op({x}, [](auto& t, const auto& v) { return ad::mean(t, v[0]); }, s).max_relative_error);
    worst = std::max(worst, check_op({x}, [](auto& t, const auto& v) { return ad::square(t, v[0]); }, s).max_relative_error);

    std::vector<Eigen::Index> targets;
    for (int i = 0; i < r; ++i) targets.push_back(std::uniform_int_distribution<int>(0, c - 1)(rng));
    worst = std::max(worst, check_op({x}, [&](auto& t, const auto& v) { return ad::softmax_cross_entropy(t, v[0], targets); },
                                     s).max_relative_error);
    Mat bits(r, c);
    for (Eigen::Index i = 0; i < bits.size(); ++i) bits.data()[i] = static_cast<double>(rng() % 2);
    worst = std::max(worst, check_op({x}, [&](auto& t, const auto& v) { return ad::bce_with_logits(t, v[0], bits); }, s)
                                .max_relative_error);
    worst = std::max(worst, check_op({x, y}, [](auto& t, const auto& v) { return ad::cosine_distance_rows(t, v[0], v[1]); },
                                     s).max_relative_error);
    worst = std::max(worst, check_op({x, y}, [](auto& t, const auto& v) { return ad::euclidean_distance_rows(t, v[0], v[1]); },
                                     s).max_relative_error);

    std::vector<std::vector<Eigen::Index>> groups(3);
    for (int i = 0; i < r; ++i) groups[rng() % 3].push_back(i);
    worst = std::max(worst, check_op({x}, [&](auto& t, const auto& v) { return ad::group_mean(t, v[0], groups); }, s)
                                .max_relative_error);
    std::vector<std::vector<Eigen::Index>> nonempty;
    for (const auto& g : groups)
      if (!g.empty()) nonempty.push_back(g);
    worst = std::max(worst, check_op({x}, [&](auto& t, const auto& v) { return ad::group_max(t, v[0], nonempty); }, s)
                                .max_relative_error);
    std::vector<Eigen::Index> rows;
    for (int i = 0; i < 4; ++i) rows.push_back(static_cast<Eigen::Index>(rng() % r));
    worst = std::max(worst, check_op({x}, [&](auto& t, const auto& v) { return ad::gather_rows(t, v[0], rows); }, s)
                                .max_relative_error);
    const Mat sq = random_matrix(c, c, rng);
    worst = std::max(worst, check_op({sq}, [](auto& t, const auto& v) { return ad::diagonal(t, v[0]); }, s)
                                .max_relative_error);
    worst = std::max(worst, check_op({random_matrix(1, 1, rng), random_matrix(1, 1, rng)},
                                     [](auto& t, const auto& v) {
                                       const std::vector<Var> terms{v[0], v[1]};
                                       const std::vector<double> ws{0.25, -3.0};
                                       return ad::weighted_sum<double>(t, terms, ws);
                                     },
                                     s).max_relative_error);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("softmax cross entropy is shift invariant") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Mat z = random_matrix(1, 6, rng, 3.0);
    const double c = std::normal_distribution<double>(0.0, 50.0)(rng);
    Tape<double> t;
    const auto target = static_cast<Eigen::Index>(rng() % 6);
    const double a = scalar_of(t, ad::softmax_cross_entropy(t, t.constant(z), {target}));
    const double b = scalar_of(t, ad::softmax_cross_entropy(t, t.constant((z.array() + c).matrix()), {target}));
    CHECK(a == doctest::Approx(b).epsilon(1e-6));
  }
}

TEST_CASE("bce with logits stays finite over a wide logit range") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int trial = 0; trial < 1000; ++trial) {
    const double z = trial == 0 ? 1e6 : trial == 1 ? -1e6 : u(rng);
    for (double y : {0.0, 1.0}) {
      CHECK(std::isfinite(ad::bce_with_logits_value(z, y)));
      CHECK(ad::bce_with_logits_value(z, y) >= 0.0);
      CHECK(std::isfinite(ad::bce_with_logits_value(static_cast<float>(z), static_cast<float>(y))));
    }
  }
}

TEST_CASE("cosine distance is invariant to positive scaling") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const RowVector<double> a = random_matrix(1, 5, rng).row(0);
    const RowVector<double> b = random_matrix(1, 5, rng).row(0);
    const double c = std::exp(std::uniform_real_distribution<double>(-5, 5)(rng));
    CHECK(ad::cosine_distance_value(a, (c * b).eval()) == doctest::Approx(ad::cosine_distance_value(a, b)).epsilon(1e-6));
    const double d = ad::cosine_distance_value(a, b);
    CHECK(d >= 0.0);
    CHECK(d <= 2.0);
  }
}

TEST_CASE("float forward stays finite on finite inputs") {
  std::mt19937_64 rng(8);
  Tape<float> t;
  const Matrix<float> x = random_matrix(6, 4, rng).cast<float>();
  const Matrix<float> w = random_matrix(3, 4, rng).cast<float>();
  Var y = ad::relu(t, ad::linear(t, t.constant(x), t.constant(w), t.constant(Matrix<float>::Zero(1, 3))));
  CHECK(t.value(y).allFinite());
}
