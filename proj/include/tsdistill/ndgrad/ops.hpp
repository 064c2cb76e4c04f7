#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <type_traits>
#include <string>
#include <vector>

#include "tsdistill/errors.hpp"
#include "tsdistill/ndgrad/tape.hpp"
#include "tsdistill/ndgrad/tensor.hpp"
#include "tsdistill/rng.hpp"

namespace tsdistill::ndgrad {

enum class Mode { train, eval };

namespace detail {

template <typename T>
inline void check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
#endif
}

}  // namespace detail

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  require_shape(y, x.shape(), "add");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(std::move(out), rg, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  require_shape(y, x.shape(), "mul");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(std::move(out), rg, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a)) {
      const auto& yv = t.value(b);
      auto& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i];
    }
    if (t.requires_grad(b)) {
      const auto& xv = t.value(a);
      auto& gb = t.grad_slot(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xv[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  const auto& x = tape.value(a);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return tape.record(std::move(out), tape.requires_grad(a), [a, factor](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
  const auto& x = tape.value(a);
  T s{0};
  for (T v : x.data()) s += v;
  return tape.record(Tensor<T>(Shape{}, s), tape.requires_grad(a), [a](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_slot(a);
    for (auto& v : ga.data()) v += g[0];
  });
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// [rows, cols] row-major view of a contiguous channel-by-time block.
template <typename T>
Eigen::Map<RowMatrix<T>> channel_matrix(T* p, std::size_t rows, std::size_t cols) {
  return {p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <typename T>
Eigen::Map<const RowMatrix<T>> channel_matrix(const T* p, std::size_t rows, std::size_t cols) {
  return {p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <typename T>
Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> vector_map(const T* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}

// Splits a [Cout, Cin, k] kernel into k contiguous [Cout, Cin] matrices.
template <typename T>
std::vector<RowMatrix<T>> split_taps(const Tensor<T>& w) {
  const std::size_t Cout = w.dim(0), Cin = w.dim(1), k = w.dim(2);
  std::vector<RowMatrix<T>> taps(k, RowMatrix<T>(static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(Cin)));
  for (std::size_t o = 0; o < Cout; ++o)
    for (std::size_t c = 0; c < Cin; ++c)
      for (std::size_t j = 0; j < k; ++j)
        taps[j](static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(c)) = w[(o * Cin + c) * k + j];
  return taps;
}

}  // namespace detail

// Same-length dilated convolution with symmetric zero padding.
// input [B,Cin,T], weight [Cout,Cin,k], bias [Cout] -> [B,Cout,T].
template <typename T>
Var conv1d(Tape<T>& tape, Var input, Var weight, Var bias, int dilation) {
  if (dilation <= 0) throw ParameterError("conv1d: dilation must be positive");
  const auto& x = tape.value(input);
  const auto& w = tape.value(weight);
  const auto& b = tape.value(bias);
  require_ndim(x, 3, "conv1d input");
  require_ndim(w, 3, "conv1d weight");
  const std::size_t B = x.dim(0), Cin = x.dim(1), T_len = x.dim(2);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin) {
    throw DimensionError("conv1d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                         std::to_string(Cin));
  }
  if (k % 2 == 0) throw ParameterError("conv1d: kernel size must be odd");
  require_shape(b, Shape{Cout}, "conv1d bias");

  const auto dil = static_cast<std::ptrdiff_t>(dilation);
  const auto pad = dil * static_cast<std::ptrdiff_t>(k - 1) / 2;
  const auto Tn = static_cast<std::ptrdiff_t>(T_len);

  // Each tap j is a [Cout, Cin] matrix applied to the input shifted by
  // j * dilation - pad; the sum over taps runs as dense matrix products.
  const auto taps = detail::split_taps(w);
  Tensor<T> out(Shape{B, Cout, T_len});
  for (std::size_t bi = 0; bi < B; ++bi) {
    auto Y = detail::channel_matrix(out.ptr() + bi * Cout * T_len, Cout, T_len);
    const auto X = detail::channel_matrix(x.ptr() + bi * Cin * T_len, Cin, T_len);
    Y.colwise() = detail::vector_map(b.ptr(), Cout);
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(j) * dil - pad;
      const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -s);
      const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(Tn, Tn - s);
      if (t1 <= t0) continue;
      Y.middleCols(t0, t1 - t0).noalias() += taps[j] * X.middleCols(t0 + s, t1 - t0);
    }
  }
  detail::check_finite(out, "conv1d");

  const bool rg = tape.requires_grad(input) || tape.requires_grad(weight) || tape.requires_grad(bias);
  return tape.record(std::move(out), rg, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(input);
    const auto taps_now = detail::split_taps(t.value(weight));
    const bool gx = t.requires_grad(input), gw = t.requires_grad(weight), gb = t.requires_grad(bias);
    Tensor<T>* dx = gx ? &t.grad_slot(input) : nullptr;
    std::vector<detail::RowMatrix<T>> dtaps;
    if (gw) dtaps.assign(k, detail::RowMatrix<T>::Zero(static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(Cin)));
    Eigen::Matrix<T, Eigen::Dynamic, 1> dbias;
    if (gb) dbias = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(static_cast<Eigen::Index>(Cout));
    for (std::size_t bi = 0; bi < B; ++bi) {
      const auto G = detail::channel_matrix(g.ptr() + bi * Cout * T_len, Cout, T_len);
      const auto X = detail::channel_matrix(xv.ptr() + bi * Cin * T_len, Cin, T_len);
      if (gb) dbias += G.rowwise().sum();
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(j) * dil - pad;
        const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -s);
        const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(Tn, Tn - s);
        if (t1 <= t0) continue;
        if (gw) dtaps[j].noalias() += G.middleCols(t0, t1 - t0) * X.middleCols(t0 + s, t1 - t0).transpose();
        if (dx) {
          auto DX = detail::channel_matrix(dx->ptr() + bi * Cin * T_len, Cin, T_len);
          DX.middleCols(t0 + s, t1 - t0).noalias() += taps_now[j].transpose() * G.middleCols(t0, t1 - t0);
        }
      }
    }
    if (gw) {
      Tensor<T>& dw = t.grad_slot(weight);
      for (std::size_t o = 0; o < Cout; ++o)
        for (std::size_t c = 0; c < Cin; ++c)
          for (std::size_t j = 0; j < k; ++j)
            dw[(o * Cin + c) * k + j] += dtaps[j](static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(c));
    }
    if (gb) {
      Tensor<T>& db = t.grad_slot(bias);
      for (std::size_t o = 0; o < Cout; ++o) db[o] += dbias(static_cast<Eigen::Index>(o));
    }
  });
}

template <typename T>
struct BatchNormBuffers {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormBuffers(std::size_t channels = 0)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

// Per-channel statistics of one train-mode pass; var is the unbiased estimate
// that feeds the running buffers.
template <typename T>
struct BatchMoments {
  Tensor<T> mean;
  Tensor<T> var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
void update_running_stats(BatchNormBuffers<T>& buffers, const BatchMoments<T>& moments,
                          double momentum = kBatchNormMomentum) {
  const T m = static_cast<T>(momentum);
  for (std::size_t c = 0; c < buffers.running_mean.size(); ++c) {
    buffers.running_mean[c] = (T{1} - m) * buffers.running_mean[c] + m * moments.mean[c];
    buffers.running_var[c] = (T{1} - m) * buffers.running_var[c] + m * moments.var[c];
  }
}

// Batch normalization over (batch, time) per channel.
//
// `validity` is an optional [B,T] 0/1 tensor; padded positions are excluded
// from the statistics but still normalized. In train mode the batch moments
// are written to `moments_out` when given, otherwise applied to `buffers`
// immediately.
template <typename T>
Var batch_norm1d(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormBuffers<T>& buffers, Mode mode,
                 const std::type_identity_t<Tensor<T>>* validity = nullptr,
                 std::type_identity_t<BatchMoments<T>>* moments_out = nullptr) {
  const auto& x = tape.value(input);
  require_ndim(x, 3, "batch_norm1d input");
  const std::size_t B = x.dim(0), C = x.dim(1), T_len = x.dim(2);
  require_shape(tape.value(gamma), Shape{C}, "batch_norm1d gamma");
  require_shape(tape.value(beta), Shape{C}, "batch_norm1d beta");
  if (buffers.running_mean.size() != C) throw DimensionError("batch_norm1d: running stats channel mismatch");
  if (validity) require_shape(*validity, Shape{B, T_len}, "batch_norm1d validity");
  const auto& gm = tape.value(gamma);
  const auto& bt = tape.value(beta);
  const T eps = static_cast<T>(kBatchNormEps);

  auto valid = [&](std::size_t bi, std::size_t t) -> bool {
    return !validity || (*validity)[bi * T_len + t] != T{0};
  };

  Tensor<T> mean(Shape{C});
  Tensor<T> inv_std(Shape{C});
  std::size_t count = 0;
  if (mode == Mode::train) {
    for (std::size_t bi = 0; bi < B; ++bi)
      for (std::size_t t = 0; t < T_len; ++t) count += valid(bi, t) ? 1 : 0;
    if (count < 2) throw ContractError("batch_norm1d: train mode needs at least two valid positions");
    BatchMoments<T> moments{Tensor<T>(Shape{C}), Tensor<T>(Shape{C})};
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t bi = 0; bi < B; ++bi) {
        const T* row = x.ptr() + (bi * C + c) * T_len;
        for (std::size_t t = 0; t < T_len; ++t)
          if (valid(bi, t)) s += row[t];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t bi = 0; bi < B; ++bi) {
        const T* row = x.ptr() + (bi * C + c) * T_len;
        for (std::size_t t = 0; t < T_len; ++t)
          if (valid(bi, t)) ss += (row[t] - mu) * (row[t] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
      moments.mean[c] = static_cast<T>(mu);
      moments.var[c] = static_cast<T>(var * static_cast<double>(count) / static_cast<double>(count - 1));
    }
    if (moments_out) {
      *moments_out = std::move(moments);
    } else {
      update_running_stats(buffers, moments);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = buffers.running_mean[c];
      inv_std[c] = T{1} / std::sqrt(buffers.running_var[c] + eps);
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (bi * C + c) * T_len;
      for (std::size_t t = 0; t < T_len; ++t) {
        const T h = (x[off + t] - mean[c]) * inv_std[c];
        xhat[off + t] = h;
        out[off + t] = gm[c] * h + bt[c];
      }
    }
  }
  detail::check_finite(out, "batch_norm1d");

  const bool rg = tape.requires_grad(input) || tape.requires_grad(gamma) || tape.requires_grad(beta);
  Tensor<T> mask_copy = validity ? *validity : Tensor<T>();
  return tape.record(
      std::move(out), rg,
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std), mask = std::move(mask_copy)](
          Tape<T>& t, const Tensor<T>& g) {
        const auto& gmv = t.value(gamma);
        const bool has_mask = !mask.empty();
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          Tensor<T> dgamma(Shape{C}), dbeta(Shape{C});
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t off = (bi * C + c) * T_len;
              T sg{0}, sgh{0};
              for (std::size_t tt = 0; tt < T_len; ++tt) {
                sg += g[off + tt];
                sgh += g[off + tt] * xhat[off + tt];
              }
              dgamma[c] += sgh;
              dbeta[c] += sg;
            }
          t.accumulate(gamma, dgamma);
          t.accumulate(beta, dbeta);
        }
        if (!t.requires_grad(input)) return;
        auto& dx = t.grad_slot(input);
        if (mode == Mode::eval) {
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t off = (bi * C + c) * T_len;
              const T f = gmv[c] * inv_std[c];
              for (std::size_t tt = 0; tt < T_len; ++tt) dx[off + tt] += g[off + tt] * f;
            }
          return;
        }
        const T n = static_cast<T>(count);
        for (std::size_t c = 0; c < C; ++c) {
          // dxhat = g * gamma; reduce over all positions (padded ones included,
          // their outputs also depend on the batch statistics).
          T s_dxhat{0}, s_dxhat_xhat{0};
          for (std::size_t bi = 0; bi < B; ++bi) {
            const std::size_t off = (bi * C + c) * T_len;
            for (std::size_t tt = 0; tt < T_len; ++tt) {
              const T d = g[off + tt] * gmv[c];
              s_dxhat += d;
              s_dxhat_xhat += d * xhat[off + tt];
            }
          }
          const T is = inv_std[c];
          const T dmean_term = -is * s_dxhat / n;
          const T dvar_term = -is * s_dxhat_xhat / n;  // times xhat_v gives the variance path
          for (std::size_t bi = 0; bi < B; ++bi) {
            const std::size_t off = (bi * C + c) * T_len;
            for (std::size_t tt = 0; tt < T_len; ++tt) {
              T d = g[off + tt] * gmv[c] * is;
              if (!has_mask || mask[bi * T_len + tt] != T{0}) d += dmean_term + dvar_term * xhat[off + tt];
              dx[off + tt] += d;
            }
          }
        }
      });
}

enum class Activation { gelu, relu, identity };

inline Activation parse_activation(const std::string& name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw ParameterError("unknown activation '" + name + "'");
}

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "gelu";
}

// tanh approximation of x * Phi(x).
template <typename T>
Var gelu(Tape<T>& tape, Var input) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  const auto& x = tape.value(input);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    out[i] = T{0.5} * v * (T{1} + std::tanh(kC * (v + kA * v * v * v)));
  }
  return tape.record(std::move(out), tape.requires_grad(input), [input](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(input);
    auto& dx = t.grad_slot(input);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T th = std::tanh(kC * (v + kA * v * v * v));
      const T d = T{0.5} * (T{1} + th) + T{0.5} * v * (T{1} - th * th) * kC * (T{1} + T{3} * kA * v * v);
      dx[i] += g[i] * d;
    }
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return tape.record(std::move(out), tape.requires_grad(input), [input](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(input);
    auto& dx = t.grad_slot(input);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T{0}) dx[i] += g[i];
  });
}

template <typename T>
Var activate(Tape<T>& tape, Var input, Activation act) {
  switch (act) {
    case Activation::gelu: return gelu(tape, input);
    case Activation::relu: return relu(tape, input);
    case Activation::identity: return input;
  }
  return input;
}

// Inverted dropout; identity in eval mode or at rate 0.
template <typename T>
Var dropout(Tape<T>& tape, Var input, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout: rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return input;
  const auto& x = tape.value(input);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.uniform() < rate ? T{0} : keep_scale;
    out[i] = x[i] * mask[i];
  }
  return tape.record(std::move(out), tape.requires_grad(input),
                     [input, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& g) {
                       auto& dx = t.grad_slot(input);
                       for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
                     });
}

template <typename T>
T smooth_l1_value(T d, T beta) {
  const T a = std::abs(d);
  return a < beta ? T{0.5} * d * d / beta : a - T{0.5} * beta;
}

template <typename T>
T smooth_l1_derivative(T d, T beta) {
  if (std::abs(d) < beta) return d / beta;
  return d > T{0} ? T{1} : T{-1};
}

// Mean smooth-L1 distance over all elements. `target` is a constant.
template <typename T>
Var smooth_l1(Tape<T>& tape, Var pred, const Tensor<T>& target, double beta) {
  if (!(beta > 0.0)) throw ParameterError("smooth_l1: beta must be positive");
  const auto& p = tape.value(pred);
  require_shape(target, p.shape(), "smooth_l1 target");
  if (p.size() == 0) throw ContractError("smooth_l1: empty input");
  const T b = static_cast<T>(beta);
  T acc{0};
  for (std::size_t i = 0; i < p.size(); ++i) acc += smooth_l1_value(p[i] - target[i], b);
  const T n = static_cast<T>(p.size());
  return tape.record(Tensor<T>(Shape{}, acc / n), tape.requires_grad(pred),
                     [pred, target, b, n](Tape<T>& t, const Tensor<T>& g) {
                       const auto& pv = t.value(pred);
                       auto& dp = t.grad_slot(pred);
                       for (std::size_t i = 0; i < pv.size(); ++i)
                         dp[i] += g[0] * smooth_l1_derivative(pv[i] - target[i], b) / n;
                     });
}

// Mean smooth-L1 over the timesteps selected by `selected` [B,T] for
// channel-major tensors [B,W,T]. Zero (with zero gradient) when nothing is
// selected.
template <typename T>
Var masked_smooth_l1(Tape<T>& tape, Var pred, const Tensor<T>& target, const Tensor<T>& selected, double beta) {
  if (!(beta > 0.0)) throw ParameterError("smooth_l1: beta must be positive");
  const auto& p = tape.value(pred);
  require_ndim(p, 3, "masked_smooth_l1 pred");
  require_shape(target, p.shape(), "masked_smooth_l1 target");
  const std::size_t B = p.dim(0), W = p.dim(1), T_len = p.dim(2);
  require_shape(selected, Shape{B, T_len}, "masked_smooth_l1 selection");
  const T b = static_cast<T>(beta);
  std::size_t count = 0;
  for (T s : selected.data()) count += s != T{0} ? 1 : 0;
  T acc{0};
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t w = 0; w < W; ++w) {
      const std::size_t off = (bi * W + w) * T_len;
      for (std::size_t t = 0; t < T_len; ++t)
        if (selected[bi * T_len + t] != T{0}) acc += smooth_l1_value(p[off + t] - target[off + t], b);
    }
  const T n = static_cast<T>(count * W);
  const T value = count ? acc / n : T{0};
  return tape.record(Tensor<T>(Shape{}, value), tape.requires_grad(pred) && count > 0,
                     [=](Tape<T>& t, const Tensor<T>& g) {
                       const auto& pv = t.value(pred);
                       auto& dp = t.grad_slot(pred);
                       for (std::size_t bi = 0; bi < B; ++bi)
                         for (std::size_t w = 0; w < W; ++w) {
                           const std::size_t off = (bi * W + w) * T_len;
                           for (std::size_t tt = 0; tt < T_len; ++tt)
                             if (selected[bi * T_len + tt] != T{0})
                               dp[off + tt] += g[0] * smooth_l1_derivative(pv[off + tt] - target[off + tt], b) / n;
                         }
                     });
}

// Zeroes timesteps where `validity` [B,T] is 0. Input is [B,W,T].
template <typename T>
Var mask_time(Tape<T>& tape, Var input, const Tensor<T>& validity) {
  const auto& x = tape.value(input);
  require_ndim(x, 3, "mask_time input");
  const std::size_t B = x.dim(0), W = x.dim(1), T_len = x.dim(2);
  require_shape(validity, Shape{B, T_len}, "mask_time validity");
  Tensor<T> out(x.shape());
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t w = 0; w < W; ++w) {
      const std::size_t off = (bi * W + w) * T_len;
      for (std::size_t t = 0; t < T_len; ++t) out[off + t] = x[off + t] * validity[bi * T_len + t];
    }
  return tape.record(std::move(out), tape.requires_grad(input), [=](Tape<T>& t, const Tensor<T>& g) {
    auto& dx = t.grad_slot(input);
    for (std::size_t bi = 0; bi < B; ++bi)
      for (std::size_t w = 0; w < W; ++w) {
        const std::size_t off = (bi * W + w) * T_len;
        for (std::size_t tt = 0; tt < T_len; ++tt) dx[off + tt] += g[off + tt] * validity[bi * T_len + tt];
      }
  });
}

// Replaces the W-vector at every timestep where `replace` [B,T] is nonzero by
// `embedding` [W]. Input is [B,W,T]. Gradient of the embedding sums over the
// replaced positions.
template <typename T>
Var replace_timesteps(Tape<T>& tape, Var input, const Tensor<T>& replace, Var embedding) {
  const auto& x = tape.value(input);
  require_ndim(x, 3, "replace_timesteps input");
  const std::size_t B = x.dim(0), W = x.dim(1), T_len = x.dim(2);
  require_shape(replace, Shape{B, T_len}, "replace_timesteps mask");
  const auto& e = tape.value(embedding);
  require_shape(e, Shape{W}, "replace_timesteps embedding");
  Tensor<T> out = x;
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t t = 0; t < T_len; ++t)
      if (replace[bi * T_len + t] != T{0})
        for (std::size_t w = 0; w < W; ++w) out[(bi * W + w) * T_len + t] = e[w];
  const bool rg = tape.requires_grad(input) || tape.requires_grad(embedding);
  return tape.record(std::move(out), rg, [=](Tape<T>& t, const Tensor<T>& g) {
    const bool gx = t.requires_grad(input), ge = t.requires_grad(embedding);
    Tensor<T>* dx = gx ? &t.grad_slot(input) : nullptr;
    Tensor<T>* de = ge ? &t.grad_slot(embedding) : nullptr;
    for (std::size_t bi = 0; bi < B; ++bi)
      for (std::size_t w = 0; w < W; ++w) {
        const std::size_t off = (bi * W + w) * T_len;
        for (std::size_t tt = 0; tt < T_len; ++tt) {
          if (replace[bi * T_len + tt] != T{0}) {
            if (de) (*de)[w] += g[off + tt];
          } else if (dx) {
            (*dx)[off + tt] += g[off + tt];
          }
        }
      }
  });
}

// Swaps the last two axes of a 3-d tensor.
template <typename T>
Tensor<T> swap_last_axes(const Tensor<T>& x) {
  require_ndim(x, 3, "swap_last_axes");
  const std::size_t A = x.dim(0), M = x.dim(1), N = x.dim(2);
  Tensor<T> out(Shape{A, N, M});
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n) out[(a * N + n) * M + m] = x[(a * M + m) * N + n];
  return out;
}

template <typename T>
Var swap_last_axes(Tape<T>& tape, Var input) {
  return tape.record(swap_last_axes(tape.value(input)), tape.requires_grad(input),
                     [input](Tape<T>& t, const Tensor<T>& g) { t.accumulate(input, swap_last_axes(g)); });
}

}  // namespace tsdistill::ndgrad
