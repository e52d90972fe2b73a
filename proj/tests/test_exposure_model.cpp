#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "popdecomp/exposure_model.hpp"
#include "test_util.hpp"

using namespace popdecomp;
using namespace popdecomp::exposure;
using testutil::post;

namespace {

FeatureMatrix matrix(std::size_t cols, const std::vector<std::vector<double>>& rows) {
  FeatureMatrix m;
  for (std::size_t c = 0; c < cols; ++c) m.names.push_back("f" + std::to_string(c));
  for (const auto& r : rows) m.append_row(r);
  return m;
}

FeatureMatrix empty_like(const FeatureMatrix& x) {
  FeatureMatrix m;
  m.names = x.names;
  return m;
}

BoostConfig exact_stump() {
  BoostConfig c;
  c.max_depth = 1;
  c.shrinkage = 1.0;
  c.max_rounds = 1;
  c.delta = 1e9;
  c.l2 = 0.0;
  c.min_child_weight = 0.0;
  return c;
}

// y = step(x0) + 0.5 x1 + noise; x2 is pure noise.
struct Synthetic {
  FeatureMatrix x;
  std::vector<double> r, w;
};

Synthetic synthetic(Rng& rng, std::size_t n, double noise) {
  Synthetic s;
  s.x = matrix(3, {});
  for (std::size_t i = 0; i < n; ++i) {
    const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1), c = rng.uniform(-1, 1);
    s.x.append_row({a, b, c});
    s.r.push_back((a > 0.2 ? 2.0 : -1.0) + 0.5 * b + rng.normal(0.0, noise));
    s.w.push_back(1.0 + static_cast<double>(rng.below(3)));
  }
  return s;
}

}  // namespace

TEST(Residuals, SubtractDestandardizedAlpha) {
  std::vector<corpus::PostRecord> posts{post(1, 1, 0), post(2, 2, 0)};
  const auto scaler = corpus::LabelScaler::fit(posts, {1.0, 3.0}, {0, 1});  // mean 2, std 1
  const auto r = residual_targets(posts, {4.6, 2.0}, {1.1, 0.0}, scaler);
  EXPECT_NEAR(r[0], 1.5, 1e-12);
  EXPECT_DOUBLE_EQ(r[1], 0.0);
  EXPECT_THROW(residual_targets(posts, {5.0}, {1.0, 0.0}, scaler), DataError);
}

TEST(Residuals, PerfectAndConstantContentModels) {
  std::vector<corpus::PostRecord> posts{post(1, 1, 0), post(2, 2, 0), post(3, 3, 0)};
  const std::vector<double> yt{0.5, 2.0, 3.5};
  const auto scaler = corpus::LabelScaler::fit(posts, yt, {0, 1, 2});
  std::vector<double> perfect;
  for (double y : yt) perfect.push_back(scaler.apply(0, y));
  for (double x : residual_targets(posts, yt, perfect, scaler)) EXPECT_NEAR(x, 0.0, 1e-12);
  const auto zero_alpha = scaler.apply(0, 0.0);
  const auto r = residual_targets(posts, yt, {zero_alpha, zero_alpha, zero_alpha}, scaler);
  for (std::size_t i = 0; i < yt.size(); ++i) EXPECT_NEAR(r[i], yt[i], 1e-12);
}

TEST(WeightedMedian, Examples) {
  EXPECT_EQ(weighted_median({3, 1, 2}, {1, 1, 1}), 2.0);
  EXPECT_EQ(weighted_median({1, 1, 11, 11}, {1, 1, 1, 1}), 6.0);
  EXPECT_EQ(weighted_median({1, 10}, {3, 1}), 1.0);
  EXPECT_EQ(weighted_median({1, 10}, {1, 3}), 10.0);
  EXPECT_THROW(weighted_median({}, {}), DataError);
}

TEST(Boost, SingleStumpSeparatesTwoGroups) {
  const auto x = matrix(1, {{0.0}, {0.0}, {1.0}, {1.0}});
  const std::vector<double> r{0, 2, 10, 12}, w{1, 1, 1, 1};
  const auto m = fit_exposure(x, r, w, empty_like(x), {}, {}, exact_stump());
  ASSERT_EQ(m.trees.size(), 1u);
  EXPECT_EQ(m.base, 6.0);
  const std::vector<double> expected{1, 1, 11, 11};
  const auto phi = predict_phi(m, x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(phi[i], expected[i], 1e-12);
  EXPECT_GT(m.importance[0], 0.0);
  // Trace by hand: root splits x0, leaves hold the mean residual of each side.
  const auto& t = m.trees[0];
  ASSERT_EQ(t.nodes.size(), 3u);
  EXPECT_EQ(t.nodes[0].feature, 0);
  const double left = t.nodes[std::size_t(t.nodes[0].left)].value;
  const double right = t.nodes[std::size_t(t.nodes[0].right)].value;
  EXPECT_NEAR(left, -5.0, 1e-12);
  EXPECT_NEAR(right, 5.0, 1e-12);
  EXPECT_NEAR(m.predict_raw(x.row(0)), m.base + left, 1e-12);
}

TEST(Boost, BatchPredictionMatchesRows) {
  Rng rng(2);
  auto s = synthetic(rng, 90, 0.3);
  BoostConfig cfg;
  cfg.max_rounds = 25;
  const auto m = fit_exposure(s.x, s.r, s.w, empty_like(s.x), {}, {}, cfg);
  const auto batch = predict_phi(m, s.x);
  for (std::size_t i = 0; i < s.x.rows; ++i) EXPECT_EQ(batch[i], predict_phi(m, s.x.select_rows({i}))[0]);
  BoostedEnsemble empty;
  empty.feature_names = s.x.names;
  empty.base = 1.25;
  for (double p : predict_phi(empty, s.x)) EXPECT_EQ(p, 1.25);
}

TEST(Boost, ZeroRoundsIsWeightedMedian) {
  Rng rng(3);
  auto s = synthetic(rng, 50, 0.1);
  auto cfg = exact_stump();
  cfg.max_rounds = 0;
  const auto m = fit_exposure(s.x, s.r, s.w, empty_like(s.x), {}, {}, cfg);
  EXPECT_TRUE(m.trees.empty());
  for (double p : predict_phi(m, s.x)) EXPECT_EQ(p, weighted_median(s.r, s.w));
}

TEST(Boost, DuplicatingRowsEqualsDoublingWeights) {
  Rng rng(4);
  auto s = synthetic(rng, 80, 0.3);
  BoostConfig cfg;
  cfg.max_depth = 3;
  cfg.max_rounds = 20;
  cfg.shrinkage = 0.3;
  cfg.min_child_weight = 0.0;
  auto doubled = s.w;
  for (auto& v : doubled) v *= 2.0;
  FeatureMatrix xd = empty_like(s.x);
  std::vector<double> rd, wd;
  for (std::size_t i = 0; i < s.x.rows; ++i)
    for (int k = 0; k < 2; ++k) {
      xd.append_row(std::vector<double>(s.x.row(i), s.x.row(i) + 3));
      rd.push_back(s.r[i]);
      wd.push_back(s.w[i]);
    }
  const auto a = fit_exposure(s.x, s.r, doubled, empty_like(s.x), {}, {}, cfg);
  const auto b = fit_exposure(xd, rd, wd, empty_like(xd), {}, {}, cfg);
  const auto pa = predict_phi(a, s.x), pb = predict_phi(b, s.x);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa[i], pb[i], 1e-9);
}

TEST(Boost, EarlyStoppingKeepsBestIteration) {
  Rng rng(5);
  auto tr = synthetic(rng, 150, 1.0);
  auto va = synthetic(rng, 100, 1.0);
  BoostConfig cfg;
  cfg.max_depth = 6;
  cfg.shrinkage = 0.5;
  cfg.max_rounds = 300;
  cfg.patience = 10;
  cfg.min_child_weight = 0.0;
  FitTrace trace;
  const auto m = fit_exposure(tr.x, tr.r, tr.w, va.x, va.r, va.w, cfg, &trace);
  EXPECT_LT(trace.rounds_run, cfg.max_rounds);
  EXPECT_EQ(trace.rounds_run - m.best_iteration, cfg.patience);
  EXPECT_EQ(static_cast<int>(m.trees.size()), m.best_iteration);
  const double best = trace.val_loss[std::size_t(m.best_iteration)];
  for (double v : trace.val_loss) EXPECT_GE(v, best);
  double pred_loss = weighted_huber(va.r, predict_phi(m, va.x), va.w, cfg.delta);
  EXPECT_NEAR(pred_loss, best, 1e-9);
}

TEST(Boost, TrainLossNonincreasing) {
  Rng rng(6);
  for (int t = 0; t < 5; ++t) {
    auto s = synthetic(rng, 200, 0.5);
    BoostConfig cfg;
    cfg.max_depth = 4;
    cfg.shrinkage = 0.1;
    cfg.max_rounds = 60;
    FitTrace trace;
    fit_exposure(s.x, s.r, s.w, empty_like(s.x), {}, {}, cfg, &trace);
    ASSERT_EQ(trace.train_loss.size(), 61u);
    for (std::size_t k = 1; k < trace.train_loss.size(); ++k)
      EXPECT_LE(trace.train_loss[k], trace.train_loss[k - 1] + 1e-12);
  }
}

TEST(Boost, LearnsStepFunction) {
  Rng rng(7);
  auto tr = synthetic(rng, 600, 0.05);
  auto te = synthetic(rng, 200, 0.0);
  BoostConfig cfg;
  cfg.max_rounds = 400;
  cfg.shrinkage = 0.1;
  cfg.max_depth = 4;
  const auto m = fit_exposure(tr.x, tr.r, tr.w, empty_like(tr.x), {}, {}, cfg);
  EXPECT_LT(weighted_huber(te.r, predict_phi(m, te.x), te.w, 1.0), 0.02);
  EXPECT_GT(m.importance[0], m.importance[2]);
  EXPECT_GT(m.importance[1], m.importance[2]);
}

TEST(Boost, Deterministic) {
  Rng rng(8);
  auto s = synthetic(rng, 120, 0.4);
  BoostConfig cfg;
  cfg.max_rounds = 30;
  EXPECT_EQ(fit_exposure(s.x, s.r, s.w, empty_like(s.x), {}, {}, cfg),
            fit_exposure(s.x, s.r, s.w, empty_like(s.x), {}, {}, cfg));
}

TEST(Boost, BadInputsRejected) {
  const auto x = matrix(1, {{0.0}, {1.0}});
  EXPECT_THROW(fit_exposure(x, {1.0}, {1.0, 1.0}, empty_like(x), {}, {}, BoostConfig{}), DataError);
  EXPECT_THROW(fit_exposure(x, {1.0, NAN}, {1.0, 1.0}, empty_like(x), {}, {}, BoostConfig{}), DataError);
  EXPECT_THROW(fit_exposure(empty_like(x), {}, {}, empty_like(x), {}, {}, BoostConfig{}), DataError);
  BoostConfig bad;
  bad.shrinkage = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  const auto m = fit_exposure(x, {1.0, 2.0}, {1.0, 1.0}, empty_like(x), {}, {}, exact_stump());
  EXPECT_THROW(predict_phi(m, matrix(2, {{0.0, 0.0}})), DataError);
}

TEST(Calibration, AffineExamples) {
  const auto c = calibrate_phi({-1.0, 1.0}, {0.0, 4.0});
  EXPECT_DOUBLE_EQ(c.a, 2.0);
  EXPECT_DOUBLE_EQ(c.b, 2.0);
  const auto id = calibrate_phi({1.0, 5.0, 9.0}, {9.0, 1.0, 5.0});
  EXPECT_NEAR(id.a, 1.0, 1e-9);
  EXPECT_NEAR(id.b, 0.0, 1e-9);
}

TEST(Calibration, ConstantPredictionShiftsOnly) {
  const auto c = calibrate_phi({3.0, 3.0, 3.0}, {1.0, 2.0, 9.0});
  EXPECT_EQ(c.a, 1.0);
  EXPECT_DOUBLE_EQ(c.b, 1.0);
  EXPECT_THROW(calibrate_phi({}, {}), DataError);
}

TEST(Calibration, MatchesMomentsProperty) {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> phi, r;
    for (std::size_t i = 0; i < 2 + rng.below(50); ++i) {
      phi.push_back(rng.normal(1.0, 0.3));
      r.push_back(rng.normal(-2.0, 2.0));
    }
    const auto out = apply_calibration(calibrate_phi(phi, r), phi);
    EXPECT_NEAR(mean_of(out), mean_of(r), 1e-9);
    EXPECT_NEAR(variance_of(out), variance_of(r), 1e-9);
  }
}

TEST(ModelFile, RoundTripAndCorruption) {
  Rng rng(10);
  auto s = synthetic(rng, 100, 0.3);
  BoostConfig cfg;
  cfg.max_rounds = 15;
  auto m = fit_exposure(s.x, s.r, s.w, empty_like(s.x), {}, {}, cfg);
  m.calibration = {1.5, -0.25};
  std::stringstream ss;
  write_model(ss, m);
  const auto bytes = ss.str();
  const auto back = read_model(ss);
  EXPECT_EQ(back, m);
  EXPECT_EQ(predict_phi(back, s.x), predict_phi(m, s.x));

  std::stringstream trunc(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_model(trunc), FormatError);
  std::stringstream magic("XXXX" + bytes.substr(4));
  EXPECT_THROW(read_model(magic), FormatError);
}

TEST(Importance, CsvSortedByGain) {
  BoostedEnsemble m;
  m.feature_names = {"a", "b", "c"};
  m.importance = {1.0, 3.0, 1.0};
  std::ostringstream os;
  write_importance_csv(os, m);
  EXPECT_EQ(os.str(), "feature,gain\nb,3\na,1\nc,1\n");
}
