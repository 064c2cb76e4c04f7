#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsdistill/encoder.hpp"
#include "tsdistill/errors.hpp"
#include "tsdistill/ndgrad/ops.hpp"
#include "tsdistill/ndgrad/optim.hpp"
#include "tsdistill/rng.hpp"

namespace tsdistill {

// ---------------------------------------------------------------------------
// Block masking

struct MaskConfig {
  double mask_prob = 0.5;
  double max_block_frac = 0.1;  // cap on one block, as a fraction of the series length
  std::size_t min_block_len = 1;

  void validate() const {
    if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ParameterError("mask: mask_prob must lie in [0, 1]");
    if (!(max_block_frac > 0.0 && max_block_frac <= 1.0))
      throw ParameterError("mask: max_block_frac must lie in (0, 1]");
    if (min_block_len < 1) throw ParameterError("mask: min_block_len must be >= 1");
  }

  // Longest block that can be injected into a series of length T.
  std::size_t max_block_len(std::size_t length) const {
    return std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(max_block_frac * static_cast<double>(length))));
  }
};

// Half-open [start, start + length).
struct Interval {
  std::size_t start = 0;
  std::size_t length = 0;

  std::size_t end() const noexcept { return start + length; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

// Masked intervals of one series: sorted and pairwise disjoint.
struct MaskPlan {
  std::size_t series_length = 0;
  std::vector<Interval> intervals;

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (const auto& iv : intervals) n += iv.length;
    return n;
  }
  double masked_fraction() const {
    return series_length ? static_cast<double>(masked_count()) / static_cast<double>(series_length) : 0.0;
  }
  bool empty() const noexcept { return intervals.empty(); }

  // Maximal unmasked runs, in order.
  std::vector<Interval> gaps() const {
    std::vector<Interval> out;
    std::size_t cursor = 0;
    for (const auto& iv : intervals) {
      if (iv.start > cursor) out.push_back({cursor, iv.start - cursor});
      cursor = iv.end();
    }
    if (series_length > cursor) out.push_back({cursor, series_length - cursor});
    return out;
  }

  void insert(Interval iv) {
    auto it = std::lower_bound(intervals.begin(), intervals.end(), iv,
                               [](const Interval& a, const Interval& b) { return a.start < b.start; });
    intervals.insert(it, iv);
  }

  // True when intervals are sorted, disjoint, nonempty and inside [0, T).
  bool well_formed() const {
    std::size_t cursor = 0;
    for (const auto& iv : intervals) {
      if (iv.length == 0 || iv.start < cursor || iv.end() > series_length) return false;
      cursor = iv.end();
    }
    return true;
  }
};

inline double batch_masked_fraction(std::span<const MaskPlan> plans) {
  std::size_t masked = 0, total = 0;
  for (const auto& p : plans) {
    masked += p.masked_count();
    total += p.series_length;
  }
  return total ? static_cast<double>(masked) / static_cast<double>(total) : 0.0;
}

// Round-robin injection of random blocks, one per unsaturated series per
// pass, stopping at the first injection that pushes the batch-level masked
// fraction above mask_prob. Each block lands inside one unmasked gap chosen
// with probability proportional to its length.
inline std::vector<MaskPlan> sample_mask_plan(std::span<const std::size_t> lengths, const MaskConfig& config,
                                              Rng& rng) {
  config.validate();
  std::vector<MaskPlan> plans(lengths.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] < 1) throw ContractError("sample_mask_plan: series length must be >= 1");
    plans[i].series_length = lengths[i];
    total += lengths[i];
  }
  if (config.mask_prob == 0.0 || plans.empty()) return plans;

  std::vector<bool> saturated(plans.size(), false);
  std::size_t masked = 0;
  for (;;) {
    bool injected = false;
    for (std::size_t i = 0; i < plans.size(); ++i) {
      if (saturated[i]) continue;
      auto& plan = plans[i];
      const auto gaps = plan.gaps();
      if (gaps.empty()) {
        saturated[i] = true;
        continue;
      }
      const std::size_t free = plan.series_length - plan.masked_count();
      std::size_t pick = rng.uniform_index(free);
      const Interval* gap = &gaps.front();
      for (const auto& g : gaps) {
        if (pick < g.length) {
          gap = &g;
          break;
        }
        pick -= g.length;
      }
      const std::size_t hi = std::min(gap->length, config.max_block_len(plan.series_length));
      const std::size_t lo = std::min(config.min_block_len, hi);
      const std::size_t len = lo + rng.uniform_index(hi - lo + 1);
      const std::size_t start = gap->start + rng.uniform_index(gap->length - len + 1);
      plan.insert({start, len});
      masked += len;
      injected = true;
      if (static_cast<double>(masked) / static_cast<double>(total) > config.mask_prob) return plans;
    }
    if (!injected) return plans;
  }
}

// [B,T] 0/1 matrix of masked steps; T is the padded batch length.
template <typename T>
Tensor<T> mask_matrix(std::span<const MaskPlan> plans, std::size_t length) {
  Tensor<T> m(Shape{plans.size(), length});
  for (std::size_t b = 0; b < plans.size(); ++b) {
    if (plans[b].series_length > length) throw ContractError("mask plan longer than batch");
    for (const auto& iv : plans[b].intervals) {
      if (iv.end() > plans[b].series_length) throw ContractError("mask interval out of range");
      for (std::size_t t = iv.start; t < iv.end(); ++t) m[b * length + t] = T{1};
    }
  }
  return m;
}

// Replaces masked timesteps of the projected input [B,W,T] with the mask
// embedding [W].
template <typename T>
Var apply_mask(ndgrad::Tape<T>& tape, Var projected, std::span<const MaskPlan> plans, Var embedding) {
  const auto& x = tape.value(projected);
  ndgrad::require_ndim(x, 3, "apply_mask");
  if (plans.size() != x.dim(0)) throw DimensionError("apply_mask: plan count does not match batch");
  return ndgrad::replace_timesteps(tape, projected, mask_matrix<T>(plans, x.dim(2)), embedding);
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& projected, std::span<const MaskPlan> plans, const Tensor<T>& embedding) {
  ndgrad::Tape<T> tape(false);
  Var x = tape.leaf(projected);
  Var e = tape.leaf(embedding);
  return tape.value(apply_mask(tape, x, plans, e));
}

// ---------------------------------------------------------------------------
// Teacher targets

struct TargetConfig {
  std::size_t top_k = 7;
  bool layer_norm_targets = true;
};

inline constexpr double kTargetNormEps = 1e-5;

// Normalizes each (series, timestep) vector of a [B,W,T] tensor across W.
template <typename T>
void normalize_timesteps_bwt(Tensor<T>& x) {
  const std::size_t B = x.dim(0), W = x.dim(1), T_len = x.dim(2);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T_len; ++t) {
      double s = 0.0, ss = 0.0;
      for (std::size_t w = 0; w < W; ++w) s += x[(b * W + w) * T_len + t];
      const double mu = s / static_cast<double>(W);
      for (std::size_t w = 0; w < W; ++w) {
        const double d = x[(b * W + w) * T_len + t] - mu;
        ss += d * d;
      }
      const double inv = 1.0 / std::sqrt(ss / static_cast<double>(W) + kTargetNormEps);
      for (std::size_t w = 0; w < W; ++w) {
        auto& v = x[(b * W + w) * T_len + t];
        v = static_cast<T>((v - mu) * inv);
      }
    }
}

// Averages the last K (optionally normalized) block activations, [B,W,T].
template <typename T>
Tensor<T> average_top_layers_bwt(std::span<const Tensor<T>> layers, const TargetConfig& cfg) {
  if (cfg.top_k < 1 || cfg.top_k > layers.size())
    throw ParameterError("targets: K must lie in [1, num_blocks], got " + std::to_string(cfg.top_k));
  Tensor<T> acc(layers.front().shape());
  for (std::size_t l = layers.size() - cfg.top_k; l < layers.size(); ++l) {
    Tensor<T> layer = layers[l];
    if (cfg.layer_norm_targets) normalize_timesteps_bwt(layer);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += layer[i];
  }
  const T inv_k = T{1} / static_cast<T>(cfg.top_k);
  for (auto& v : acc.data()) v *= inv_k;
  return acc;
}

// Teacher target in [B,W,T]: eval-mode forward on the unmasked batch.
template <typename T>
Tensor<T> compute_targets_bwt(Encoder<T>& teacher, const Tensor<T>& batch, const TargetConfig& cfg,
                              const Tensor<T>* validity = nullptr) {
  if (cfg.top_k < 1 || cfg.top_k > teacher.config().num_blocks)
    throw ParameterError("targets: K must lie in [1, num_blocks], got " + std::to_string(cfg.top_k));
  ndgrad::Tape<T> tape(false);
  auto fw = teacher.forward(tape, batch, Mode::eval, false, validity);
  std::vector<Tensor<T>> layers;
  for (Var v : fw.blocks) layers.push_back(tape.value(v));
  return average_top_layers_bwt<T>(layers, cfg);
}

// Targets in the public [B,T,W] layout.
template <typename T>
Tensor<T> compute_targets(Encoder<T>& teacher, const Tensor<T>& batch, const TargetConfig& cfg,
                          const Tensor<T>* validity = nullptr) {
  return ndgrad::swap_last_axes(compute_targets_bwt(teacher, batch, cfg, validity));
}

// Mean over feature dimensions of the population std across all valid
// (series, timestep) vectors. `targets` is [B,T,W]; `validity` optional [B,T].
template <typename T>
double collapse_metric(const Tensor<T>& targets, const Tensor<T>* validity = nullptr) {
  ndgrad::require_ndim(targets, 3, "collapse_metric");
  const std::size_t B = targets.dim(0), T_len = targets.dim(1), W = targets.dim(2);
  if (validity) ndgrad::require_shape(*validity, Shape{B, T_len}, "collapse_metric validity");
  std::size_t n = 0;
  std::vector<double> s(W, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T_len; ++t) {
      if (validity && (*validity)[b * T_len + t] == T{0}) continue;
      ++n;
      for (std::size_t w = 0; w < W; ++w) s[w] += targets[(b * T_len + t) * W + w];
    }
  if (n < 2) throw ContractError("collapse_metric: needs at least two vectors");
  std::vector<double> ss(W, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T_len; ++t) {
      if (validity && (*validity)[b * T_len + t] == T{0}) continue;
      for (std::size_t w = 0; w < W; ++w) {
        const double d = targets[(b * T_len + t) * W + w] - s[w] / static_cast<double>(n);
        ss[w] += d * d;
      }
    }
  double acc = 0.0;
  for (std::size_t w = 0; w < W; ++w) acc += std::sqrt(ss[w] / static_cast<double>(n));
  return acc / static_cast<double>(W);
}

// ---------------------------------------------------------------------------
// EMA teacher

struct EMASchedule {
  double delta_start = 0.9996;
  double delta_end = 0.99996;
  std::uint64_t total_steps = 1;

  void validate() const {
    if (!(delta_start >= 0.0 && delta_start <= delta_end && delta_end < 1.0))
      throw ParameterError("ema: need 0 <= delta_start <= delta_end < 1");
    if (total_steps == 0) throw ParameterError("ema: total_steps must be positive");
  }
};

// Linear ramp from delta_start to delta_end, clamped to [0, total_steps].
inline double ema_delta(const EMASchedule& s, std::uint64_t step) {
  if (step == 0) return s.delta_start;
  if (step >= s.total_steps) return s.delta_end;
  const double frac = static_cast<double>(step) / static_cast<double>(s.total_steps);
  return s.delta_start + (s.delta_end - s.delta_start) * frac;
}

namespace detail {

template <typename T>
void ema_blend(Tensor<T>& teacher, const Tensor<T>& student, double delta) {
  ndgrad::require_shape(student, teacher.shape(), "ema_update");
  for (std::size_t i = 0; i < teacher.size(); ++i)
    teacher[i] = static_cast<T>((1.0 - delta) * static_cast<double>(student[i]) +
                                delta * static_cast<double>(teacher[i]));
}

}  // namespace detail

// teacher <- (1 - delta) * student + delta * teacher, for parameters and
// batch-norm running statistics.
template <typename T>
void ema_update(Encoder<T>& teacher, const Encoder<T>& student, double delta) {
  auto tp = teacher.parameters();
  auto sp = student.parameters();
  if (tp.size() != sp.size()) throw DimensionError("ema_update: encoders are not congruent");
  for (std::size_t i = 0; i < tp.size(); ++i) detail::ema_blend(tp[i]->value, sp[i]->value, delta);
  auto& tb = teacher.buffers();
  const auto& sb = student.buffers();
  if (tb.size() != sb.size()) throw DimensionError("ema_update: buffer count mismatch");
  for (std::size_t i = 0; i < tb.size(); ++i) {
    detail::ema_blend(tb[i].running_mean, sb[i].running_mean, delta);
    detail::ema_blend(tb[i].running_var, sb[i].running_var, delta);
  }
}

// ceil(rate * T / 1000), never below `min_steps`.
inline std::uint64_t total_steps_for(std::size_t series_length, double steps_per_kilostep,
                                     std::uint64_t min_steps = 200) {
  if (series_length < 1) throw ContractError("total_steps_for: series length must be >= 1");
  if (!(steps_per_kilostep > 0.0)) throw ParameterError("total_steps_for: rate must be positive");
  const auto steps =
      static_cast<std::uint64_t>(std::ceil(steps_per_kilostep * static_cast<double>(series_length) / 1000.0));
  return std::max(steps, min_steps);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  MaskConfig mask;
  TargetConfig targets;
  std::size_t num_students = 3;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.1;
  double onecycle_start_div = 25.0;
  double onecycle_final_div = 1e4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double smooth_l1_beta = 1.0;
  double ema_start = 0.9996;
  double ema_end = 0.99996;
  // Student-only linear map from the last block to the target space.
  bool regression_head = true;
  std::uint64_t total_steps = 200;

  void validate(const EncoderConfig& enc) const {
    mask.validate();
    if (targets.top_k < 1 || targets.top_k > enc.num_blocks)
      throw ParameterError("target_k must lie in [1, num_blocks]");
    if (num_students < 1) throw ParameterError("num_students must be >= 1");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (!(smooth_l1_beta > 0.0)) throw ParameterError("smooth_l1_beta must be positive");
    if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay must be non-negative");
    if (total_steps == 0) throw ParameterError("total_steps must be positive");
    EMASchedule{ema_start, ema_end, total_steps}.validate();
    ndgrad::OneCycleSchedule{lr, total_steps, warmup_fraction, onecycle_start_div, onecycle_final_div}.validate();
  }
};

struct StepMetrics {
  std::uint64_t step = 0;  // step index the update was computed at
  double loss = 0.0;
  double lr = 0.0;
  double delta = 0.0;
  double masked_fraction = 0.0;
  double collapse = 0.0;
};

template <typename T>
struct TrainState {
  TrainConfig config;
  Encoder<T> student;
  Encoder<T> teacher;
  ndgrad::Parameter<T> mask_embedding;
  std::vector<ndgrad::Parameter<T>> head;  // weight [W,W,1], bias [W] when enabled
  ndgrad::AdamState<T> adam;
  ndgrad::OneCycleSchedule schedule;
  EMASchedule ema;
  std::uint64_t step = 0;
  Rng rng;

  TrainState() = default;

  TrainState(const EncoderConfig& enc, const TrainConfig& cfg, std::uint64_t seed) : config(cfg), rng(seed) {
    cfg.validate(enc);
    Rng init_rng = rng.split();
    student = Encoder<T>(enc, init_rng);
    teacher = student;
    const std::size_t W = enc.width;
    const double bound = 1.0 / std::sqrt(static_cast<double>(W));
    Tensor<T> emb(Shape{W});
    for (auto& v : emb.data()) v = static_cast<T>(init_rng.uniform(-bound, bound));
    mask_embedding = ndgrad::Parameter<T>("mask_embedding", std::move(emb));
    if (cfg.regression_head) {
      Tensor<T> w(Shape{W, W, 1});
      for (auto& v : w.data()) v = static_cast<T>(init_rng.uniform(-bound, bound));
      head.emplace_back("head.weight", std::move(w));
      head.emplace_back("head.bias", Tensor<T>(Shape{W}));
    }
    auto params = trainable();
    adam = ndgrad::AdamState<T>(
        ndgrad::AdamConfig{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay}, params);
    schedule = ndgrad::OneCycleSchedule{cfg.lr, cfg.total_steps, cfg.warmup_fraction, cfg.onecycle_start_div,
                                        cfg.onecycle_final_div};
    ema = EMASchedule{cfg.ema_start, cfg.ema_end, cfg.total_steps};
  }

  // Student parameters, then the mask embedding, then the head.
  std::vector<ndgrad::Parameter<T>*> trainable() {
    auto out = student.parameters();
    out.push_back(&mask_embedding);
    for (auto& p : head) out.push_back(&p);
    return out;
  }

  bool finished() const noexcept { return step >= config.total_steps; }
};

namespace detail {

template <typename T>
std::vector<std::size_t> valid_lengths(const Tensor<T>* validity, std::size_t B, std::size_t T_len) {
  std::vector<std::size_t> lengths(B, T_len);
  if (!validity) return lengths;
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t n = 0;
    for (std::size_t t = 0; t < T_len; ++t) n += (*validity)[b * T_len + t] != T{0} ? 1 : 0;
    lengths[b] = n;
  }
  return lengths;
}

}  // namespace detail

// One self-distillation update.
//
// The teacher encodes the clean batch once; each student view gets its own
// mask plan, and the loss is the smooth-L1 distance to the teacher targets on
// masked valid steps, averaged over views. Views without masked steps add
// nothing; when every view is empty the call only advances the step counter.
template <typename T>
StepMetrics train_step(TrainState<T>& state, const Tensor<T>& batch, const Tensor<T>* validity = nullptr) {
  if (state.finished()) throw ContractError("train_step: training already finished");
  ndgrad::require_ndim(batch, 3, "train_step batch");
  const std::size_t B = batch.dim(0), T_len = batch.dim(2);
  const auto& cfg = state.config;

  StepMetrics m;
  m.step = state.step;
  m.delta = ema_delta(state.ema, state.step);
  m.lr = ndgrad::onecycle_lr(state.schedule, static_cast<double>(state.step));

  const Tensor<T> targets = compute_targets_bwt(state.teacher, batch, cfg.targets, validity);
  m.collapse = collapse_metric(ndgrad::swap_last_axes(targets), validity);

  const auto lengths = detail::valid_lengths(validity, B, T_len);
  const std::size_t S = cfg.num_students;
  std::vector<std::vector<MaskPlan>> plans;
  std::vector<Rng> dropout_rngs;
  bool any_masked = false;
  for (std::size_t s = 0; s < S; ++s) {
    plans.push_back(sample_mask_plan(lengths, cfg.mask, state.rng));
    m.masked_fraction += batch_masked_fraction(plans.back()) / static_cast<double>(S);
    for (const auto& p : plans.back()) any_masked = any_masked || !p.empty();
  }
  for (std::size_t s = 0; s < S; ++s) dropout_rngs.push_back(state.rng.split());

  if (!any_masked) {
    state.step += 1;
    return m;
  }

  auto params = state.trainable();
  for (auto* p : params) p->zero_grad();
  auto student_params = state.student.parameters();
  const T inv_s = T{1} / static_cast<T>(S);

  for (std::size_t s = 0; s < S; ++s) {
    Tensor<T> selected = mask_matrix<T>(plans[s], T_len);
    bool any = false;
    for (auto& v : selected.data()) any = any || v != T{0};
    if (!any) continue;

    ndgrad::Tape<T> tape;
    Var emb = tape.leaf(state.mask_embedding.value, true);
    const MaskHook<T> hook = [&](ndgrad::Tape<T>& t, Var x) {
      return ndgrad::replace_timesteps(t, x, selected, emb);
    };
    auto fw = state.student.forward(tape, batch, Mode::train, true, validity, &dropout_rngs[s], hook);
    Var pred = fw.blocks.back();
    std::vector<Var> head_vars;
    if (!state.head.empty()) {
      head_vars.push_back(tape.leaf(state.head[0].value, true));
      head_vars.push_back(tape.leaf(state.head[1].value, true));
      pred = ndgrad::conv1d(tape, pred, head_vars[0], head_vars[1], 1);
    }
    Var loss = ndgrad::masked_smooth_l1(tape, pred, targets, selected, cfg.smooth_l1_beta);
    tape.backward(loss);
    m.loss += static_cast<double>(tape.value(loss)[0]) / static_cast<double>(S);

    ndgrad::collect_grads<T>(tape, student_params, fw.params, inv_s);
    if (const auto* g = tape.grad(emb))
      for (std::size_t i = 0; i < g->size(); ++i) state.mask_embedding.grad[i] += inv_s * (*g)[i];
    for (std::size_t h = 0; h < head_vars.size(); ++h)
      if (const auto* g = tape.grad(head_vars[h]))
        for (std::size_t i = 0; i < g->size(); ++i) state.head[h].grad[i] += inv_s * (*g)[i];
    state.student.apply_moments(fw.moments);
  }

  ndgrad::adam_step<T>(params, state.adam, m.lr);
  ema_update(state.teacher, state.student, m.delta);
  state.step += 1;
  return m;
}

}  // namespace tsdistill
