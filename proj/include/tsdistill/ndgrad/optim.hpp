#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "tsdistill/errors.hpp"
#include "tsdistill/ndgrad/tape.hpp"
#include "tsdistill/ndgrad/tensor.hpp"

namespace tsdistill::ndgrad {

// Trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

// Puts each parameter on the tape as a leaf.
template <typename T>
std::vector<Var> bind(Tape<T>& tape, std::span<Parameter<T>* const> params, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (auto* p : params) vars.push_back(tape.leaf(p->value, requires_grad));
  return vars;
}

// Adds the tape gradients of bound leaves into the parameters, scaled.
template <typename T>
void collect_grads(const Tape<T>& tape, std::span<Parameter<T>* const> params, std::span<const Var> vars,
                   T factor = T{1}) {
  if (params.size() != vars.size()) throw DimensionError("collect_grads: parameter/variable count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>* g = tape.grad(vars[i]);
    if (!g) continue;
    auto dst = params[i]->grad.data();
    auto src = g->data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += factor * src[j];
  }
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, std::span<Parameter<T>* const> params) : config(cfg) {
    for (auto* p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
  }
};

// Bias-corrected Adam with decoupled weight decay (p <- p - lr*wd*p before the
// moment update is applied).
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, double lr) {
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameters");
  state.step += 1;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T decay = static_cast<T>(lr * c.weight_decay);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->value;
    const auto& g = params[i]->grad;
    auto& m = state.m[i];
    auto& v = state.v[i];
    require_shape(g, p.shape(), "adam_step grad");
    require_shape(m, p.shape(), "adam_step moment");
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (decay != T{0}) p[j] -= decay * p[j];
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

// Warmup with cosine rise from max_lr/start_div to max_lr, then cosine decay
// to max_lr/final_div.
struct OneCycleSchedule {
  double max_lr = 1e-3;
  std::uint64_t total_steps = 1;
  double warmup_fraction = 0.1;
  double start_div = 25.0;
  double final_div = 1e4;

  void validate() const {
    if (total_steps == 0) throw ParameterError("onecycle: total_steps must be positive");
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
      throw ParameterError("onecycle: warmup_fraction must lie in (0, 1)");
    if (!(start_div > 0.0 && final_div > 0.0)) throw ParameterError("onecycle: divisors must be positive");
    if (!(max_lr >= 0.0)) throw ParameterError("onecycle: max_lr must be non-negative");
  }
};

namespace detail {

// Weighted form keeps both endpoints exact: w == 1 at pct 0, w == 0 at pct 1.
inline double cosine_anneal(double from, double to, double pct) {
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * pct));
  return from * w + to * (1.0 - w);
}

}  // namespace detail

// `step` may be fractional; out-of-range steps are clamped to the endpoints.
inline double onecycle_lr(const OneCycleSchedule& s, double step) {
  s.validate();
  const double total = static_cast<double>(s.total_steps);
  if (step <= 0.0) return s.max_lr / s.start_div;
  if (step >= total) return s.max_lr / s.final_div;
  const double warm = total * s.warmup_fraction;
  if (step <= warm) return detail::cosine_anneal(s.max_lr / s.start_div, s.max_lr, step / warm);
  return detail::cosine_anneal(s.max_lr, s.max_lr / s.final_div, (step - warm) / (total - warm));
}

}  // namespace tsdistill::ndgrad
