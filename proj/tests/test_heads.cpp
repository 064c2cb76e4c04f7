#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tsdistill/heads.hpp"

using namespace tsdistill;
using ndgrad::Shape;
using ndgrad::Tensor;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

Matrix random_rotation(Eigen::Index d, Rng& rng) {
  Eigen::HouseholderQR<Matrix> qr(random_matrix(d, d, rng));
  return qr.householderQ();
}

}  // namespace

TEST(Pooling, MaxOverTimeHandTensor) {
  // [B=2, T=3, W=2]
  Tensor<double> h(Shape{2, 3, 2}, {1, 5, 4, 2, 3, 3,  //
                                    -1, -2, -3, 0, -5, -7});
  const std::vector<std::size_t> len{3, 3};
  const auto f = max_pool_time(h, len);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t w = 0; w < 2; ++w) {
      double m = h(b, 0, w);
      for (std::size_t t = 1; t < 3; ++t) m = std::max(m, h(b, t, w));
      EXPECT_EQ(f.X(b, w), m);
    }
  EXPECT_EQ(f.pooling, Pooling::max_over_time);
}

TEST(Pooling, SingleStepAndConstantFeatures) {
  Tensor<double> one(Shape{1, 1, 3}, {0.5, -2, 7});
  const std::vector<std::size_t> l1{1};
  EXPECT_EQ(max_pool_time(one, l1).X, last_step_feature(one, l1).X);
  EXPECT_EQ(max_pool_time(one, l1).X(0, 1), -2.0);
  Tensor<double> c(Shape{1, 4, 2}, 3.25);
  const std::vector<std::size_t> l4{4};
  EXPECT_EQ(max_pool_time(c, l4).X(0, 0), 3.25);
}

TEST(Pooling, LastStepUsesTrueLength) {
  Tensor<double> h(Shape{1, 8, 1});
  for (std::size_t t = 0; t < 8; ++t) h(0, t, 0) = static_cast<double>(t);
  const std::vector<std::size_t> len{5};
  EXPECT_EQ(last_step_feature(h, len).X(0, 0), 4.0);
}

TEST(Pooling, LastStepEqualsIndexedSlice) {
  Rng rng(2);
  Tensor<double> h(Shape{4, 6, 3});
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = rng.normal();
  const std::vector<std::size_t> len{6, 1, 3, 5};
  const auto f = last_step_feature(h, len);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t w = 0; w < 3; ++w) EXPECT_EQ(f.X(b, w), h(b, len[b] - 1, w));
}

TEST(Pooling, IgnoresPaddingContentAndRejectsEmpty) {
  Rng rng(3);
  Tensor<double> h(Shape{2, 5, 2});
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = rng.normal();
  const std::vector<std::size_t> len{2, 5};
  const auto a = max_pool_time(h, len);
  for (std::size_t t = 2; t < 5; ++t) h(0, t, 0) = h(0, t, 1) = 1e9;
  EXPECT_EQ(max_pool_time(h, len).X, a.X);
  const std::vector<std::size_t> zero{0, 5};
  EXPECT_THROW(max_pool_time(h, zero), ContractError);
  EXPECT_THROW(last_step_feature(h, zero), ContractError);
}

TEST(Logistic, SeparableCloudsReachPerfectCvAccuracy) {
  Rng rng(5);
  const Eigen::Index n = 60;
  ProbeFeatures f{Matrix(n, 2)};
  std::vector<int> y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 2);
    const double c = y[i] ? 3.0 : -3.0;
    f.X(i, 0) = c + 0.5 * rng.normal();
    f.X(i, 1) = c + 0.5 * rng.normal();
  }
  Rng cv(1);
  const auto m = fit_logistic(f, y, 2, CVGrid::logistic_default(), cv);
  EXPECT_EQ(*std::max_element(m.cv_scores.begin(), m.cv_scores.end()), 1.0);
  EXPECT_EQ(eval_classification(m, f.X, y), 1.0);
  EXPECT_FALSE(m.degenerate);
}

TEST(Logistic, RandomLabelsGiveChanceAccuracy) {
  Rng rng(6);
  const Eigen::Index n = 200;
  ProbeFeatures f{random_matrix(n, 5, rng)};
  std::vector<int> y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = static_cast<int>(i % 2);
  // Shuffle labels independently of the features.
  for (Eigen::Index i = n - 1; i > 0; --i) std::swap(y[i], y[rng.uniform_index(static_cast<std::size_t>(i) + 1)]);
  Rng cv(2);
  const auto grid = CVGrid::logistic_default();
  const auto m = fit_logistic(f, y, 2, grid, cv);
  const auto pick = static_cast<std::size_t>(std::find(grid.values.begin(), grid.values.end(), m.C) - grid.values.begin());
  ASSERT_LT(pick, m.cv_scores.size());
  EXPECT_NEAR(m.cv_scores[pick], 0.5, 0.1);
}

TEST(Logistic, SplitDuplicatedColumnsGiveIdenticalPredictions) {
  // Each column is duplicated as two copies scaled by 1/sqrt(2); the L2
  // optimum splits the weight evenly so the penalized objective is unchanged.
  Rng rng(7);
  const Eigen::Index n = 90, d = 3;
  const Matrix X = random_matrix(n, d, rng);
  std::vector<int> y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = X(i, 0) + 0.5 * X(i, 1) + 0.3 * rng.normal() > 0 ? 1 : (X(i, 2) > 0.8 ? 2 : 0);
  Matrix X2(n, 2 * d);
  X2 << X / std::sqrt(2.0), X / std::sqrt(2.0);
  const Matrix test = random_matrix(40, d, rng);
  Matrix test2(40, 2 * d);
  test2 << test / std::sqrt(2.0), test / std::sqrt(2.0);
  for (double C : {0.01, 1.0, 100.0}) {
    const auto a = fit_logistic_fixed(X, y, 3, C);
    const auto b = fit_logistic_fixed(X2, y, 3, C);
    EXPECT_TRUE(a.converged && b.converged);
    EXPECT_LT((a.decision(test) - b.decision(test2)).cwiseAbs().maxCoeff(), 1e-6) << "C=" << C;
    EXPECT_EQ(a.predict(test), b.predict(test2));
  }
}

TEST(Logistic, ShiftOfOneFeatureIsAbsorbedByIntercept) {
  Rng rng(8);
  const Matrix X = random_matrix(80, 3, rng);
  std::vector<int> y(80);
  for (int i = 0; i < 80; ++i) y[i] = X(i, 1) > 0 ? 1 : 0;
  Matrix shifted = X;
  shifted.col(2).array() += 5.0;
  const auto a = fit_logistic_fixed(X, y, 2, 1.0);
  const auto b = fit_logistic_fixed(shifted, y, 2, 1.0);
  const Matrix q = random_matrix(30, 3, rng);
  Matrix qs = q;
  qs.col(2).array() += 5.0;
  EXPECT_EQ(a.predict(q), b.predict(qs));
}

TEST(Logistic, SingleClassIsDegenerate) {
  Rng rng(9);
  ProbeFeatures f{random_matrix(10, 2, rng)};
  const std::vector<int> y(10, 1);
  const auto m = fit_logistic_fixed(f.X, y, 3, 1.0);
  EXPECT_TRUE(m.degenerate);
  EXPECT_EQ(m.predict(f.X), y);
}

TEST(Logistic, CvSelectionIsDeterministicGivenSeed) {
  Rng rng(10);
  ProbeFeatures f{random_matrix(60, 4, rng)};
  std::vector<int> y(60);
  for (int i = 0; i < 60; ++i) y[i] = f.X(i, 0) + 0.8 * rng.normal() > 0 ? 1 : 0;
  Rng a(3), b(3);
  const auto m1 = fit_logistic(f, y, 2, CVGrid::logistic_default(), a);
  const auto m2 = fit_logistic(f, y, 2, CVGrid::logistic_default(), b);
  EXPECT_EQ(m1.cv_scores, m2.cv_scores);
  EXPECT_EQ(m1.C, m2.C);
}

TEST(Ridge, HandSolvedTwoByTwo) {
  // Centered X = [[-1,-2],[1,2]] gives XtX = [[2,4],[4,8]]; with alpha = 1,
  // A = [[3,4],[4,9]], det 11; Xty for y = [-1,1] is [2,4].
  Matrix X(2, 2);
  X << 0, 1, 2, 5;
  Matrix Y(2, 1);
  Y << 3, 5;
  const auto s = fit_ridge_fixed(X, Y, 1.0);
  const double w0 = (9.0 * 2.0 - 4.0 * 4.0) / 11.0;
  const double w1 = (-4.0 * 2.0 + 3.0 * 4.0) / 11.0;
  EXPECT_NEAR(s.weights(0, 0), w0, 1e-9);
  EXPECT_NEAR(s.weights(1, 0), w1, 1e-9);
  EXPECT_NEAR(s.intercept(0), 4.0 - (w0 * 1.0 + w1 * 3.0), 1e-9);
}

TEST(Ridge, RecoversPlantedSolution) {
  Rng rng(11);
  const Matrix X = random_matrix(200, 6, rng);
  const Matrix w = random_matrix(6, 2, rng);
  const Matrix Y = X * w;
  const auto s = fit_ridge_fixed(X, Y, 1e-8);
  EXPECT_LT((s.weights - w).cwiseAbs().maxCoeff(), 1e-3);
  CVGrid grid{{1e-8, 1.0, 10.0}, 5};
  EXPECT_EQ(fit_ridge(X, Y, grid).alpha, 1e-8);
}

TEST(Ridge, HugeAlphaShrinksAndIsNotSelected) {
  Rng rng(12);
  const Matrix X = random_matrix(120, 4, rng);
  Matrix Y = X * random_matrix(4, 1, rng);
  for (Eigen::Index i = 0; i < Y.rows(); ++i) Y(i, 0) += 0.1 * rng.normal();
  auto grid = CVGrid::ridge_default();
  grid.values.push_back(1e6);
  const auto s = fit_ridge(X, Y, grid);
  EXPECT_NE(s.alpha, 1e6);
  EXPECT_EQ(s.cv_mse.size(), grid.values.size());
  const auto big = fit_ridge_fixed(X, Y, 1e6);
  const Matrix Xc = X.rowwise() - X.colwise().mean();
  const Matrix Yc = Y.rowwise() - Y.colwise().mean();
  EXPECT_LT(big.weights.norm(), 1e-3);
  EXPECT_LE(big.weights.norm(), (Xc.transpose() * Yc).norm() / 1e6);
}

TEST(Ridge, HeldOutErrorInvariantUnderRotation) {
  Rng rng(13);
  const Matrix X = random_matrix(100, 5, rng);
  Matrix Y = X * random_matrix(5, 3, rng);
  for (Eigen::Index i = 0; i < Y.size(); ++i) Y.data()[i] += 0.2 * rng.normal();
  const Matrix Xt = random_matrix(40, 5, rng);
  const Matrix Yt = Xt * random_matrix(5, 3, rng);
  for (int r = 0; r < 5; ++r) {
    const Matrix Q = random_rotation(5, rng);
    for (double alpha : {0.1, 10.0}) {
      const auto a = eval_forecast(fit_ridge_fixed(X, Y, alpha), Xt, Yt);
      const auto b = eval_forecast(fit_ridge_fixed(X * Q, Y, alpha), Xt * Q, Yt);
      EXPECT_NEAR(a.mse, b.mse, 1e-6);
      EXPECT_NEAR(a.mae, b.mae, 1e-6);
    }
  }
}

TEST(Ridge, RejectsTooFewRows) {
  Rng rng(14);
  EXPECT_THROW(fit_ridge(random_matrix(3, 2, rng), random_matrix(3, 1, rng), CVGrid::ridge_default()), ContractError);
}

TEST(Metrics, PerfectAndConstantPredictors) {
  Matrix y(4, 1);
  y << 1, -1, 1, -1;
  const auto perfect = forecast_errors(y, y);
  EXPECT_EQ(perfect.mse, 0.0);
  EXPECT_EQ(perfect.mae, 0.0);
  const auto constant = forecast_errors(Matrix::Zero(4, 1), y);
  EXPECT_EQ(constant.mse, 1.0);
  EXPECT_EQ(constant.mae, 1.0);
}

TEST(Metrics, ThreeElementHandVectors) {
  Matrix p(3, 1), y(3, 1);
  p << 1, 2, 3;
  y << 2, 2, 5;
  const auto e = forecast_errors(p, y);
  EXPECT_DOUBLE_EQ(e.mse, (1.0 + 0.0 + 4.0) / 3.0);
  EXPECT_DOUBLE_EQ(e.mae, (1.0 + 0.0 + 2.0) / 3.0);
  EXPECT_THROW(forecast_errors(Matrix(0, 1), Matrix(0, 1)), ContractError);
}

TEST(Metrics, AccuracyCountsMatches) {
  LogisticModel m;
  m.num_classes = 2;
  m.weights = Matrix::Identity(2, 2);
  m.intercept = Vector::Zero(2);
  Matrix X(3, 2);
  X << 1, 0, 0, 1, 2, 1;
  const std::vector<int> y{0, 1, 1};
  EXPECT_DOUBLE_EQ(eval_classification(m, X, y), 2.0 / 3.0);
  EXPECT_THROW(eval_classification(m, Matrix(0, 2), std::vector<int>{}), ContractError);
}

TEST(Tracker, ProbeOnlyAtEndWhenCadenceExceedsTotal) {
  ProbeTracker t(500, 100);
  int count = 0;
  for (std::uint64_t s = 1; s <= 100; ++s) count += t.due(s) ? 1 : 0;
  EXPECT_EQ(count, 1);
  EXPECT_TRUE(t.due(100));
}

TEST(Tracker, BestOverScriptedSequence) {
  ProbeTracker t(10, 30);
  t.record(10, 0.7);
  t.record(20, 0.9);
  t.record(30, 0.8);
  ASSERT_TRUE(t.best());
  EXPECT_EQ(t.best()->score, 0.9);
  EXPECT_EQ(t.best()->step, 20u);
  ProbeTracker up(1, 3);
  for (int i = 1; i <= 3; ++i) up.record(i, 0.1 * i);
  EXPECT_EQ(up.best()->step, 3u);
  ProbeTracker low(1, 3, false);
  low.record(1, 2.0);
  low.record(2, 1.0);
  EXPECT_EQ(low.best()->score, 1.0);
}

TEST(Tracker, DefaultCadence) {
  EXPECT_EQ(default_probe_every(200), 50u);
  EXPECT_EQ(default_probe_every(1500), 150u);
}

TEST(Scaler, StandardizesColumnsAndKeepsConstantsFinite) {
  Matrix X(4, 2);
  X << 1, 5, 2, 5, 3, 5, 4, 5;
  const auto s = FeatureScaler::fit(X);
  const Matrix Z = s.apply(X);
  EXPECT_NEAR(Z.col(0).mean(), 0.0, 1e-12);
  EXPECT_NEAR(Z.col(0).squaredNorm() / 4.0, 1.0, 1e-12);
  EXPECT_EQ(Z.col(1).cwiseAbs().maxCoeff(), 0.0);
}
