#include "helpers.hpp"

#include "haan/model.hpp"

#include <doctest.h>

#include <cstring>

using namespace haan;
using haan::testing::random_matrix;
using Mat = Matrix<double>;

namespace {

Mat col(std::initializer_list<double> v) {
  Mat m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

// Small model over the standard synthetic hierarchy with a few videos and random pseudo labels.
struct Fixture {
  SyntheticCorpus corpus;
  HaanParams<double> params;
  std::vector<Mat> clips;
  std::vector<std::vector<int>> pseudo;
  ObjectiveConfig cfg;

  explicit Fixture(std::uint64_t seed, int videos = 3) {
    corpus = generate_synthetic(haan::testing::small_synth(seed, videos, 0));
    const auto& h = corpus.dataset.manifest.hierarchy;
    ModelShape shape{8, 6, 5, 6, static_cast<int>(h.num_fine()), static_cast<int>(h.num_coarse()), 4};
    params = HaanParams<double>::initialize(shape, seed);
    std::mt19937_64 rng(seed);
    for (const auto& f : corpus.dataset.features) {
      clips.push_back(f.cast<double>());
      std::vector<int> p(static_cast<std::size_t>(f.rows()));
      for (auto& l : p) l = static_cast<int>(rng() % 4);
      pseudo.push_back(p);
    }
    cfg.topk_concepts = 2;
  }

  std::vector<VideoExample<double>> batch() const {
    std::vector<VideoExample<double>> b;
    for (std::size_t i = 0; i < clips.size(); ++i)
      b.push_back(make_example(clips[i], corpus.dataset.manifest.videos[i], corpus.dataset.manifest.hierarchy,
                               &pseudo[i]));
    return b;
  }

  LossBreakdown loss(GradientSet<double>* g = nullptr) const {
    const auto b = batch();
    return total_loss<double>(params, b, corpus.dataset.manifest.hierarchy, cfg, g);
  }
};

double pooled(const Mat& scores) {
  Tape<double> t;
  return t.value(mil_pool(t, t.constant(scores)))(0, 0);
}

}  // namespace

TEST_CASE("mil pooling examples") {
  CHECK(pooled(col({1, 2, 3, 4})) == doctest::Approx(3.5));
  CHECK(pooled(col({5})) == 5.0);
  CHECK(pooled(col({0.1, 0.1, 0.1})) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(pooled(col({-1, -1, 5})) == doctest::Approx(5.0));
  // entries equal to the mean are selected
  CHECK(pooled(col({1, 2, 3})) == doctest::Approx(2.5));
  Tape<double> t;
  CHECK_THROWS_AS(mil_pool(t, t.constant(Mat(0, 3))), DimensionError);
  BranchRecord r;
  mil_pool(t, t.constant(col({1, 2, 3})));
  CHECK(r.choices() == std::vector<std::size_t>{0, 1, 1});
}

TEST_CASE("mil pooling matches a brute force oracle") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const int T = 1 + static_cast<int>(rng() % 12);
    const int C = 1 + static_cast<int>(rng() % 5);
    Mat s = random_matrix(T, C, rng, 3.0);
    if (trial % 5 == 0) s = s.array().round().matrix();  // ties
    Tape<double> t;
    const Mat y = t.value(mil_pool(t, t.constant(s)));
    for (int j = 0; j < C; ++j) {
      long double mean = 0;
      for (int i = 0; i < T; ++i) mean += s(i, j);
      mean /= T;
      long double acc = 0;
      int n = 0;
      for (int i = 0; i < T; ++i)
        if (s(i, j) >= mean) acc += s(i, j), ++n;
      REQUIRE(n >= 1);
      CHECK(y(0, j) == doctest::Approx(static_cast<double>(acc / n)).epsilon(1e-12));
      CHECK(y(0, j) >= static_cast<double>(mean) - 1e-12);
      CHECK(y(0, j) <= s.col(j).maxCoeff() + 1e-12);
    }
  }
}

TEST_CASE("mil pooling is invariant to clip order") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int T = 1 + static_cast<int>(rng() % 10);
    const Mat s = random_matrix(T, 3, rng);
    std::vector<int> perm(T);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat p(T, 3);
    for (int i = 0; i < T; ++i) p.row(i) = s.row(perm[i]);
    Tape<double> t;
    const Mat a = t.value(mil_pool(t, t.constant(s)));
    const Mat b = t.value(mil_pool(t, t.constant(p)));
    CHECK(a.isApprox(b, 1e-12));
  }
}

TEST_CASE("visual concept extraction") {
  Mat x(4, 2);
  x << 1, 2, 3, 4, 10, 0, 5, 5;
  Tape<double> t;
  const auto bank = extract_visual_concepts(t, t.constant(x), {0, 0, 1, 0}, 3);
  const Mat& v = t.value(bank.concepts);
  CHECK(v.row(0).isApprox(Eigen::RowVector2d(3, 11.0 / 3)));
  CHECK(v.row(1).isApprox(Eigen::RowVector2d(10, 0)));
  CHECK(v.row(2).isZero());
  CHECK(bank.present == std::vector<bool>{true, true, false});

  CHECK_THROWS_AS(extract_visual_concepts(t, t.constant(x), {0, 0, 1}, 3), DimensionError);
  CHECK_THROWS_AS(extract_visual_concepts(t, t.constant(x), {0, 0, 1, 3}, 3), std::out_of_range);
  CHECK_THROWS_AS(extract_visual_concepts(t, t.constant(x), {0, -1, 1, 0}, 3), std::out_of_range);
}

TEST_CASE("visual concepts conserve the clip sum") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int T = 1 + static_cast<int>(rng() % 15);
    const int N = 1 + static_cast<int>(rng() % 6);
    const Mat x = random_matrix(T, 4, rng);
    std::vector<int> labels(T);
    for (auto& l : labels) l = static_cast<int>(rng() % N);
    Tape<double> t;
    const auto bank = extract_visual_concepts(t, t.constant(x), labels, N);
    Eigen::RowVectorXd total = Eigen::RowVectorXd::Zero(4);
    for (int n = 0; n < N; ++n) total += static_cast<double>(bank.members[n].size()) * t.value(bank.concepts).row(n);
    CHECK(total.isApprox(x.colwise().sum(), 1e-10));
  }
}

TEST_CASE("concept distances use +inf for unusable concepts") {
  Mat v(3, 2);
  v << 1, 0, 0, 0, 0, 2;
  Mat w(2, 2);
  w << 1, 0, 0, 1;
  const Mat d = concept_distances(v, {true, true, false}, w, DistanceKind::cosine);
  CHECK(d(0, 0) == doctest::Approx(0.0));
  CHECK(d(0, 1) == doctest::Approx(1.0));
  CHECK(std::isinf(d(1, 0)));  // zero norm
  CHECK(std::isinf(d(2, 1)));  // absent
  const Mat e = concept_distances(v, {true, true, true}, w, DistanceKind::euclidean);
  CHECK(e(2, 1) == doctest::Approx(1.0));
  CHECK(std::isinf(e(1, 0)));
  Mat zero = Mat::Zero(2, 2);
  CHECK_THROWS_AS(concept_distances(v, {true, true, true}, zero, DistanceKind::cosine), NumericDomainError);
}

TEST_CASE("top-k selection and fine composition") {
  Mat d(4, 2);
  d << 0.5, 0.1,  //
      0.2, 0.1,   //
      0.9, std::numeric_limits<double>::infinity(), 0.2, 0.7;
  CHECK(topk_concepts(d, 0, 2) == std::vector<Eigen::Index>{1, 3});
  CHECK(topk_concepts(d, 1, 2) == std::vector<Eigen::Index>{0, 1});
  CHECK(topk_concepts(d, 1, 10) == std::vector<Eigen::Index>{0, 1, 3});
  {
    BranchRecord r;
    topk_concepts(d, 0, 2);
    CHECK(r.choices() == std::vector<std::size_t>{1, 3});
  }

  Mat x(4, 2);
  x << 1, 1, 2, 0, 0, 4, 6, 2;
  Tape<double> t;
  const auto bank = extract_visual_concepts(t, t.constant(x), {0, 1, 2, 3}, 4);
  std::vector<std::vector<Eigen::Index>> sel;
  const Mat e = t.value(compose_fine(t, bank, d, 2, &sel));
  CHECK(e.row(0).isApprox(Eigen::RowVector2d(4, 1)));
  CHECK(e.row(1).isApprox(Eigen::RowVector2d(1.5, 0.5)));
  CHECK(sel[0] == std::vector<Eigen::Index>{1, 3});
  CHECK_THROWS_AS(compose_fine(t, bank, d, 0), ContractError);
}

TEST_CASE("top-k selection is invariant to concept scale under cosine") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Mat v = random_matrix(6, 3, rng);
    const Mat w = random_matrix(4, 3, rng);
    const std::vector<bool> present(6, true);
    Mat scaled = v;
    for (int n = 0; n < 6; ++n) scaled.row(n) *= std::exp(std::uniform_real_distribution<double>(-3, 3)(rng));
    const Mat a = concept_distances(v, present, w, DistanceKind::cosine);
    const Mat b = concept_distances(scaled, present, w, DistanceKind::cosine);
    for (int j = 0; j < 4; ++j) CHECK(topk_concepts(a, j, 3) == topk_concepts(b, j, 3));
  }
}

TEST_CASE("coarse composition") {
  LabelHierarchy h;
  h.fine = {"a", "b", "c"};
  h.coarse = {"x", "y"};
  h.grouping = {{0, 2}, {1}};
  Mat e(3, 2);
  e << 1, 5, 7, 7, 3, -1;
  Tape<double> t;
  const Mat mx = t.value(compose_coarse(t, t.constant(e), h, ComposeMode::max));
  CHECK(mx.row(0) == Eigen::RowVector2d(3, 5));
  CHECK(mx.row(1) == Eigen::RowVector2d(7, 7));
  const Mat mn = t.value(compose_coarse(t, t.constant(e), h, ComposeMode::mean));
  CHECK(mn.row(0) == Eigen::RowVector2d(2, 2));
}

TEST_CASE("loss term examples") {
  Tape<double> t;
  Mat w(2, 3);
  w << 1, 0, 0, 0, 2, 0;
  SUBCASE("concept loss is zero when representations align with prototypes") {
    Mat e = w * 3.0;
    CHECK(t.value(concept_loss(t, t.constant(e), t.constant(w), {1.0, 1.0}, DistanceKind::cosine))(0, 0) ==
          doctest::Approx(0.0));
    Mat f(2, 3);
    f << 0, 1, 0, 0, 2, 0;
    // only the first class is positive: cos distance 1
    CHECK(t.value(concept_loss(t, t.constant(f), t.constant(w), {1.0, 0.0}, DistanceKind::cosine))(0, 0) ==
          doctest::Approx(1.0));
    CHECK(t.value(concept_loss(t, t.constant(f), t.constant(w), {1.0, 0.0}, DistanceKind::euclidean))(0, 0) ==
          doctest::Approx(std::sqrt(2.0)));
    CHECK_THROWS_AS(concept_loss(t, t.constant(f), t.constant(w), {0.0, 0.0}, DistanceKind::cosine), ContractError);
  }
  SUBCASE("mil loss of zero logits is log 2") {
    CHECK(t.value(mil_loss(t, t.constant(Mat::Zero(1, 4)), {1.0, 0.0, 0.0, 1.0}))(0, 0) ==
          doctest::Approx(std::log(2.0)));
  }
  SUBCASE("coarse loss reads the diagonal logit") {
    Fixture fx(1, 1);
    auto& p = fx.params;
    p[coarse_weight].setZero();
    p[coarse_bias] = Mat::Zero(1, p[coarse_bias].cols());
    p[coarse_bias](0, 0) = 1000.0;
    const ParamVars pv = register_params(t, p, false);
    std::mt19937_64 rng(1);
    const Mat reps = random_matrix(3, p.shape.embed_dim, rng);
    // coarse 0 positive with a huge logit, the rest zero logits
    const double l = t.value(coarse_loss(t, pv, t.constant(reps), {1.0, 0.0, 1.0}))(0, 0);
    CHECK(l == doctest::Approx((0.0 + std::log(2.0) + std::log(2.0)) / 3));
  }
}

TEST_CASE("pseudo loss of a uniform classifier is log N") {
  Fixture fx(2, 1);
  fx.params[concept2_weight].setZero();
  fx.params[concept2_bias].setZero();
  Tape<double> t;
  const ParamVars pv = register_params(t, fx.params, false);
  Var x = encode(t, pv, t.constant(fx.clips[0]));
  CHECK(t.value(pseudo_loss(t, pv, x, fx.pseudo[0]))(0, 0) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("encoder dimension mismatch") {
  Fixture fx(3, 1);
  Tape<double> t;
  const ParamVars pv = register_params(t, fx.params, false);
  CHECK_THROWS_AS(encode(t, pv, t.constant(Mat::Zero(3, 5))), DimensionError);
  CHECK_THROWS_AS(encode_eval(fx.params, Mat(Mat::Zero(3, 5))), DimensionError);
}

TEST_CASE("eval forward matches the taped forward") {
  Fixture fx(4, 2);
  Tape<double> t;
  const ParamVars pv = register_params(t, fx.params, false);
  Var s = clip_scores(t, pv, encode(t, pv, t.constant(fx.clips[1])));
  CHECK(t.value(s).isApprox(clip_scores_eval(fx.params, fx.clips[1]), 1e-12));
}

TEST_CASE("loss set parsing") {
  CHECK(LossSet::parse("mil,pseudo") == LossSet{{true, true, false, false}});
  CHECK(LossSet::parse(" mil , coarse ").str() == "mil,coarse");
  CHECK(LossSet{}.str() == "mil,pseudo,concept,coarse");
  CHECK_THROWS_AS(LossSet::parse("pseudo"), std::invalid_argument);
  CHECK_THROWS_AS(LossSet::parse("mil,foo"), std::invalid_argument);
  CHECK_FALSE(LossSet::only_mil().needs_pseudo_labels());
  CHECK(distance_from_string("euclidean") == DistanceKind::euclidean);
  CHECK_THROWS_AS(compose_from_string("sum"), std::invalid_argument);
}

TEST_CASE("total loss is a weighted sum of its terms") {
  Fixture fx(5);
  fx.cfg.lambda = {0.7, 0.3, 0.2, 1.5};
  const auto b = fx.loss();
  CHECK(b.l_mil > 0.0);
  CHECK(b.l_pseudo > 0.0);
  CHECK(b.l_concept > 0.0);
  CHECK(b.l_coarse > 0.0);
  CHECK(b.total == doctest::Approx(0.7 * b.l_mil + 0.3 * b.l_pseudo + 0.2 * b.l_concept + 1.5 * b.l_coarse)
                       .epsilon(1e-12));
}

TEST_CASE("zero weight is bitwise identical to disabling the term") {
  for (auto term : {LossTerm::pseudo, LossTerm::concepts, LossTerm::coarse}) {
    Fixture a(6), b(6);
    switch (term) {
      case LossTerm::pseudo: a.cfg.lambda.pseudo = 0.0; break;
      case LossTerm::concepts: a.cfg.lambda.concepts = 0.0; break;
      default: a.cfg.lambda.coarse = 0.0; break;
    }
    b.cfg.losses.enabled[static_cast<std::size_t>(term)] = false;
    auto ga = GradientSet<double>::zeros_like(a.params.params);
    auto gb = GradientSet<double>::zeros_like(b.params.params);
    const double la = a.loss(&ga).total;
    const double lb = b.loss(&gb).total;
    CHECK(std::memcmp(&la, &lb, sizeof la) == 0);
    for (std::size_t s = 0; s < ga.grads.size(); ++s) {
      const auto& x = ga.grads[s];
      const auto& y = gb.grads[s];
      CHECK(std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) == 0);
    }
  }
}

TEST_CASE("objective is invariant to clip order") {
  Fixture fx(7);
  const double before = fx.loss().total;
  std::mt19937_64 rng(7);
  for (std::size_t v = 0; v < fx.clips.size(); ++v) {
    std::vector<int> perm(static_cast<std::size_t>(fx.clips[v].rows()));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat c(fx.clips[v].rows(), fx.clips[v].cols());
    std::vector<int> p(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      c.row(static_cast<Eigen::Index>(i)) = fx.clips[v].row(perm[i]);
      p[i] = fx.pseudo[v][perm[i]];
    }
    fx.clips[v] = c;
    fx.pseudo[v] = p;
  }
  CHECK(fx.loss().total == doctest::Approx(before).epsilon(1e-10));
}

TEST_CASE("missing pseudo labels are a contract error") {
  Fixture fx(8, 1);
  auto b = fx.batch();
  b[0].pseudo = nullptr;
  CHECK_THROWS_AS(total_loss<double>(fx.params, b, fx.corpus.dataset.manifest.hierarchy, fx.cfg), ContractError);
  fx.cfg.losses = LossSet::only_mil();
  CHECK_NOTHROW(total_loss<double>(fx.params, b, fx.corpus.dataset.manifest.hierarchy, fx.cfg));
}

TEST_CASE("total loss gradient matches central differences") {
  for (auto distance : {DistanceKind::cosine, DistanceKind::euclidean})
    for (auto compose : {ComposeMode::mean, ComposeMode::max}) {
      Fixture fx(9, 2);
      fx.cfg.distance = distance;
      fx.cfg.compose = compose;
      fx.cfg.lambda = {1.0, 0.5, 0.5, 1.0};
      const auto batch = fx.batch();
      const auto& h = fx.corpus.dataset.manifest.hierarchy;
      LossFunction f = [&](const ParamSet<double>& ps, GradientSet<double>* g) {
        HaanParams<double> p = fx.params;
        p.params = ps;
        return total_loss<double>(p, batch, h, fx.cfg, g).total;
      };
      const auto res = gradient_check(f, fx.params.params, 1e-6);
      CAPTURE(res.worst_parameter);
      CHECK(res.max_relative_error < 1e-4);
    }
}
