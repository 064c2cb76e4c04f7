#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsdistill/errors.hpp"
#include "tsdistill/ndgrad/tensor.hpp"
#include "tsdistill/rng.hpp"

namespace tsdistill {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Pooling { max_over_time, last_step };

// One row of instance features per series.
struct ProbeFeatures {
  Matrix X;
  Pooling pooling = Pooling::max_over_time;

  std::size_t rows() const { return static_cast<std::size_t>(X.rows()); }
};

// Elementwise max over each series' valid steps. `hidden` is [B,T,W].
template <typename T>
ProbeFeatures max_pool_time(const ndgrad::Tensor<T>& hidden, std::span<const std::size_t> lengths) {
  ndgrad::require_ndim(hidden, 3, "max_pool_time");
  const std::size_t B = hidden.dim(0), T_len = hidden.dim(1), W = hidden.dim(2);
  if (lengths.size() != B) throw DimensionError("max_pool_time: lengths do not match batch");
  ProbeFeatures f{Matrix(B, W), Pooling::max_over_time};
  for (std::size_t b = 0; b < B; ++b) {
    if (lengths[b] < 1 || lengths[b] > T_len) throw ContractError("max_pool_time: series without valid steps");
    for (std::size_t w = 0; w < W; ++w) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < lengths[b]; ++t) m = std::max(m, static_cast<double>(hidden(b, t, w)));
      f.X(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(w)) = m;
    }
  }
  return f;
}

// Feature vector at index length-1 of each series. `hidden` is [B,T,W].
template <typename T>
ProbeFeatures last_step_feature(const ndgrad::Tensor<T>& hidden, std::span<const std::size_t> lengths) {
  ndgrad::require_ndim(hidden, 3, "last_step_feature");
  const std::size_t B = hidden.dim(0), T_len = hidden.dim(1), W = hidden.dim(2);
  if (lengths.size() != B) throw DimensionError("last_step_feature: lengths do not match batch");
  ProbeFeatures f{Matrix(B, W), Pooling::last_step};
  for (std::size_t b = 0; b < B; ++b) {
    if (lengths[b] < 1 || lengths[b] > T_len) throw ContractError("last_step_feature: length out of range");
    for (std::size_t w = 0; w < W; ++w)
      f.X(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(w)) = hidden(b, lengths[b] - 1, w);
  }
  return f;
}

struct CVGrid {
  std::vector<double> values;
  std::size_t folds = 5;

  void validate() const {
    if (values.empty()) throw ParameterError("cv grid is empty");
    if (folds < 2) throw ParameterError("cv needs at least two folds");
  }

  // Inverse regularization strengths 1e-3 ... 1e3 in decades.
  static CVGrid logistic_default() { return {{1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3}, 5}; }
  static CVGrid ridge_default() {
    return {{0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000}, 5};
  }
};

// ---------------------------------------------------------------------------
// Multinomial logistic regression

namespace detail {

struct LbfgsResult {
  Vector x;
  double value = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

// Limited-memory BFGS with Armijo backtracking for smooth convex objectives.
inline LbfgsResult minimize_lbfgs(const std::function<double(const Vector&, Vector&)>& fg, Vector x, double tol,
                                  std::size_t max_iter, std::size_t memory = 10) {
  Vector g(x.size());
  double f = fg(x, g);
  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;
  LbfgsResult r;
  for (std::size_t it = 0; it < max_iter; ++it) {
    r.grad_norm = g.norm();
    if (r.grad_norm < tol) {
      r.converged = true;
      r.iterations = it;
      break;
    }
    Vector q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t i = s_hist.size(); i-- > 0;) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    Vector dir = -q;
    double slope = g.dot(dir);
    if (slope >= 0.0) {  // not a descent direction; fall back to steepest descent
      dir = -g;
      slope = -g.squaredNorm();
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }
    double step = s_hist.empty() ? std::min(1.0, 1.0 / std::max(1e-12, g.norm())) : 1.0;
    Vector x_new, g_new(x.size());
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * dir;
      f_new = fg(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    r.iterations = it + 1;
    if (!accepted) break;
    const Vector s = x_new - x, y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const double change = std::abs(f - f_new);
    x = std::move(x_new);
    g = g_new;
    f = f_new;
    if (change <= 1e-16 * std::max(1.0, std::abs(f))) break;
  }
  r.x = std::move(x);
  r.value = f;
  r.grad_norm = g.norm();
  r.converged = r.converged || r.grad_norm < tol;
  return r;
}

}  // namespace detail

struct LogisticOptions {
  double grad_tol = 1e-6;
  std::size_t max_iter = 2000;
};

struct LogisticModel {
  Matrix weights;    // [D, K]
  Vector intercept;  // [K]
  std::size_t num_classes = 0;
  bool degenerate = false;  // single training class: always predicts constant_class
  int constant_class = 0;
  double C = 1.0;
  std::vector<double> cv_scores;  // per grid value, when fitted through CV
  bool converged = true;

  Matrix decision(const Matrix& X) const {
    Matrix z = X * weights;
    z.rowwise() += intercept.transpose();
    return z;
  }

  std::vector<int> predict(const Matrix& X) const {
    std::vector<int> out(static_cast<std::size_t>(X.rows()), constant_class);
    if (degenerate) return out;
    const Matrix z = decision(X);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      Eigen::Index best = 0;
      z.row(i).maxCoeff(&best);
      out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
  }
};

// Minimizes mean cross-entropy + ||W||^2 / (2 C N); the intercept is not
// penalized.
inline LogisticModel fit_logistic_fixed(const Matrix& X, std::span<const int> labels, std::size_t num_classes,
                                        double C, const LogisticOptions& opts = {}) {
  const auto N = X.rows(), D = X.cols();
  if (static_cast<std::size_t>(N) != labels.size()) throw DimensionError("fit_logistic: label count mismatch");
  if (N == 0) throw ContractError("fit_logistic: no samples");
  if (!(C > 0.0)) throw ParameterError("fit_logistic: C must be positive");
  LogisticModel model;
  model.num_classes = num_classes;
  model.C = C;
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ContractError("fit_logistic: label out of range");
  const bool single = std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels[0]; });
  if (single || num_classes < 2) {
    model.degenerate = true;
    model.constant_class = labels[0];
    model.weights = Matrix::Zero(D, static_cast<Eigen::Index>(std::max<std::size_t>(num_classes, 1)));
    model.intercept = Vector::Zero(model.weights.cols());
    return model;
  }
  const auto K = static_cast<Eigen::Index>(num_classes);
  Matrix Y = Matrix::Zero(N, K);
  for (Eigen::Index i = 0; i < N; ++i) Y(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  const double inv_n = 1.0 / static_cast<double>(N);
  const double lambda = 1.0 / (C * static_cast<double>(N));

  auto fg = [&](const Vector& theta, Vector& grad) {
    const Eigen::Map<const Matrix> W(theta.data(), D, K);
    const Eigen::Map<const Vector> b(theta.data() + D * K, K);
    Matrix Z = X * W;
    Z.rowwise() += b.transpose();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
      const double m = Z.row(i).maxCoeff();
      Z.row(i).array() -= m;
      const double lse = std::log(Z.row(i).array().exp().sum());
      Z.row(i).array() = (Z.row(i).array() - lse).exp();  // softmax probabilities
      loss -= std::log(std::max(Z(i, labels[static_cast<std::size_t>(i)]), 1e-300));
    }
    const Matrix R = (Z - Y) * inv_n;
    grad.resize(theta.size());
    Eigen::Map<Matrix> gW(grad.data(), D, K);
    Eigen::Map<Vector> gb(grad.data() + D * K, K);
    gW = X.transpose() * R + lambda * W;
    gb = R.colwise().sum().transpose();
    return loss * inv_n + 0.5 * lambda * W.squaredNorm();
  };

  const auto res = detail::minimize_lbfgs(fg, Vector::Zero(D * K + K), opts.grad_tol, opts.max_iter);
  model.weights = Eigen::Map<const Matrix>(res.x.data(), D, K);
  model.intercept = Eigen::Map<const Vector>(res.x.data() + D * K, K);
  model.converged = res.converged;
  return model;
}

inline double eval_classification(const LogisticModel& model, const Matrix& X, std::span<const int> labels) {
  if (labels.empty()) throw ContractError("eval_classification: empty set");
  if (static_cast<std::size_t>(X.rows()) != labels.size()) throw DimensionError("eval_classification: size mismatch");
  const auto pred = model.predict(X);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Stratified assignment: each class is shuffled and dealt round-robin.
inline std::vector<std::size_t> stratified_folds(std::span<const int> labels, std::size_t folds, Rng& rng) {
  std::vector<std::size_t> fold(labels.size());
  int max_label = 0;
  for (int y : labels) max_label = std::max(max_label, y);
  std::size_t counter = 0;
  for (int c = 0; c <= max_label; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(i);
    for (std::size_t i = 0; i + 1 < idx.size(); ++i) std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
    for (std::size_t i : idx) fold[i] = counter++ % folds;
  }
  return fold;
}

// Picks C by k-fold CV accuracy (ties go to the smaller C, i.e. the stronger
// penalty) and refits on all rows.
inline LogisticModel fit_logistic(const ProbeFeatures& features, std::span<const int> labels, std::size_t num_classes,
                                  const CVGrid& grid, Rng& rng, const LogisticOptions& opts = {}) {
  grid.validate();
  const Matrix& X = features.X;
  if (static_cast<std::size_t>(X.rows()) != labels.size()) throw DimensionError("fit_logistic: label count mismatch");
  const auto fold = stratified_folds(labels, grid.folds, rng);
  std::vector<double> values = grid.values;
  std::sort(values.begin(), values.end());
  std::vector<double> scores;
  for (double C : values) {
    std::size_t correct = 0, total = 0;
    for (std::size_t f = 0; f < grid.folds; ++f) {
      std::vector<Eigen::Index> tr, te;
      for (std::size_t i = 0; i < labels.size(); ++i) (fold[i] == f ? te : tr).push_back(static_cast<Eigen::Index>(i));
      if (te.empty() || tr.empty()) continue;
      const Matrix Xtr = X(tr, Eigen::all), Xte = X(te, Eigen::all);
      std::vector<int> ytr, yte;
      for (auto i : tr) ytr.push_back(labels[static_cast<std::size_t>(i)]);
      for (auto i : te) yte.push_back(labels[static_cast<std::size_t>(i)]);
      const auto m = fit_logistic_fixed(Xtr, ytr, num_classes, C, opts);
      const auto pred = m.predict(Xte);
      for (std::size_t i = 0; i < yte.size(); ++i) correct += pred[i] == yte[i] ? 1 : 0;
      total += yte.size();
    }
    scores.push_back(total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best] + 1e-12) best = i;
  auto model = fit_logistic_fixed(X, labels, num_classes, values[best], opts);
  model.cv_scores = scores;
  return model;
}

// ---------------------------------------------------------------------------
// Ridge regression

struct RidgeSolution {
  Matrix weights;    // [D, D_out]
  Vector intercept;  // [D_out]
  double alpha = 0.0;
  std::vector<double> cv_mse;  // per grid value, when fitted through CV

  Matrix predict(const Matrix& X) const {
    Matrix out = X * weights;
    out.rowwise() += intercept.transpose();
    return out;
  }
};

// Solves (Xc^T Xc + alpha I) w = Xc^T Yc on centered data by Cholesky.
inline RidgeSolution fit_ridge_fixed(const Matrix& X, const Matrix& Y, double alpha) {
  if (X.rows() != Y.rows()) throw DimensionError("fit_ridge: X and Y row counts differ");
  if (X.rows() == 0) throw ContractError("fit_ridge: no samples");
  const Vector x_mean = X.colwise().mean().transpose();
  const Vector y_mean = Y.colwise().mean().transpose();
  const Matrix Xc = X.rowwise() - x_mean.transpose();
  const Matrix Yc = Y.rowwise() - y_mean.transpose();
  Matrix A = Xc.transpose() * Xc;
  A.diagonal().array() += alpha;
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success) throw NumericError("fit_ridge: factorization failed at alpha=" + std::to_string(alpha));
  RidgeSolution sol;
  sol.weights = llt.solve(Xc.transpose() * Yc);
  if (!sol.weights.allFinite()) throw NumericError("fit_ridge: non-finite solution at alpha=" + std::to_string(alpha));
  sol.intercept = y_mean - sol.weights.transpose() * x_mean;
  sol.alpha = alpha;
  return sol;
}

struct ForecastScore {
  double mse = 0.0;
  double mae = 0.0;
};

// Averages over every element of the prediction matrix.
inline ForecastScore forecast_errors(const Matrix& pred, const Matrix& Y) {
  if (Y.size() == 0) throw ContractError("eval_forecast: empty set");
  if (pred.rows() != Y.rows() || pred.cols() != Y.cols()) throw DimensionError("eval_forecast: shape mismatch");
  const Matrix d = pred - Y;
  const double n = static_cast<double>(d.size());
  return {d.squaredNorm() / n, d.cwiseAbs().sum() / n};
}

inline ForecastScore eval_forecast(const RidgeSolution& sol, const Matrix& X, const Matrix& Y) {
  return forecast_errors(sol.predict(X), Y);
}

// Chooses alpha by mean MSE over contiguous folds, then refits on all rows.
inline RidgeSolution fit_ridge(const Matrix& X, const Matrix& Y, const CVGrid& grid) {
  grid.validate();
  const auto N = static_cast<std::size_t>(X.rows());
  if (N < grid.folds) throw ContractError("fit_ridge: fewer samples than folds");
  std::vector<double> scores;
  for (double alpha : grid.values) {
    double acc = 0.0;
    for (std::size_t f = 0; f < grid.folds; ++f) {
      const std::size_t lo = f * N / grid.folds, hi = (f + 1) * N / grid.folds;
      std::vector<Eigen::Index> tr, te;
      for (std::size_t i = 0; i < N; ++i) (i >= lo && i < hi ? te : tr).push_back(static_cast<Eigen::Index>(i));
      const auto sol = fit_ridge_fixed(X(tr, Eigen::all), Y(tr, Eigen::all), alpha);
      acc += eval_forecast(sol, X(te, Eigen::all), Y(te, Eigen::all)).mse;
    }
    scores.push_back(acc / static_cast<double>(grid.folds));
  }
  const std::size_t best =
      static_cast<std::size_t>(std::min_element(scores.begin(), scores.end()) - scores.begin());
  auto sol = fit_ridge_fixed(X, Y, grid.values[best]);
  sol.cv_mse = scores;
  return sol;
}

// Column standardization fitted on one matrix and applied to others.
struct FeatureScaler {
  Vector mean;
  Vector scale;

  static FeatureScaler fit(const Matrix& X) {
    FeatureScaler s;
    s.mean = X.colwise().mean().transpose();
    s.scale = ((X.rowwise() - s.mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
    for (Eigen::Index i = 0; i < s.scale.size(); ++i)
      if (!(s.scale(i) > 1e-12)) s.scale(i) = 1.0;
    return s;
  }

  Matrix apply(const Matrix& X) const {
    return ((X.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
  }
};

// ---------------------------------------------------------------------------
// Periodic probing

struct ProbeRecord {
  std::uint64_t step = 0;
  double score = 0.0;
};

// Decides when to probe and keeps the best score seen.
class ProbeTracker {
 public:
  ProbeTracker(std::uint64_t every_n_steps, std::uint64_t total_steps, bool higher_is_better = true)
      : every_(every_n_steps), total_(total_steps), higher_(higher_is_better) {}

  // `completed` is the number of finished training steps.
  bool due(std::uint64_t completed) const {
    if (completed == 0) return false;
    if (completed == total_) return true;
    return every_ > 0 && completed < total_ && completed % every_ == 0;
  }

  void record(std::uint64_t step, double score) {
    history_.push_back({step, score});
    if (!best_ || (higher_ ? score > best_->score : score < best_->score)) best_ = ProbeRecord{step, score};
  }

  const std::optional<ProbeRecord>& best() const noexcept { return best_; }
  const std::vector<ProbeRecord>& history() const noexcept { return history_; }

  void restore(std::vector<ProbeRecord> history) {
    history_.clear();
    best_.reset();
    for (const auto& r : history) record(r.step, r.score);
  }

 private:
  std::uint64_t every_;
  std::uint64_t total_;
  bool higher_;
  std::vector<ProbeRecord> history_;
  std::optional<ProbeRecord> best_;
};

// Default cadence: every max(total/10, 50) steps.
inline std::uint64_t default_probe_every(std::uint64_t total_steps) {
  return std::max<std::uint64_t>(total_steps / 10, 50);
}

}  // namespace tsdistill
