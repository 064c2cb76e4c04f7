#pragma once

// Finite-difference sweep over every differentiable op and the composed
// self-distillation graph, on randomly drawn shapes.

#include <cstddef>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"
#include "tsdistill/distill.hpp"
#include "tsdistill/encoder.hpp"
#include "tsdistill/ndgrad/ops.hpp"

namespace tsdistill::testing {

struct GradCase {
  std::string name;
  GradCheckResult result;
};

namespace detail {

// Contracts an arbitrary-shaped output with fixed random weights so every
// output element carries a distinct gradient.
inline Var contract(Tape<double>& tape, Var out, std::uint64_t seed) {
  Rng r(seed);
  Var w = tape.leaf(random_tensor(tape.value(out).shape(), r), false);
  return ndgrad::sum(tape, ndgrad::mul(tape, out, w));
}

inline Tensor<double> random_validity(std::size_t B, std::size_t T, Rng& rng) {
  Tensor<double> v(Shape{B, T});
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = std::max<std::size_t>(2, T - rng.uniform_index(std::max<std::size_t>(1, T / 2)));
    for (std::size_t t = 0; t < std::min(len, T); ++t) v[b * T + t] = 1.0;
  }
  return v;
}

}  // namespace detail

// One entry per (op, shape) instance; `trials` random shapes per op.
inline std::vector<GradCase> run_gradient_suite(std::size_t trials, std::uint64_t seed = 2024) {
  using namespace ndgrad;
  std::vector<GradCase> cases;
  Rng rng(seed);
  auto shape_tag = [](const Shape& s) { return to_string(s); };

  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t B = 1 + rng.uniform_index(3);
    const std::size_t C = 1 + rng.uniform_index(3);
    const std::size_t Co = 1 + rng.uniform_index(3);
    const std::size_t T = 3 + rng.uniform_index(10);
    const std::size_t k = 1 + 2 * rng.uniform_index(2);
    const int dil = 1 + static_cast<int>(rng.uniform_index(3));
    const std::uint64_t cs = rng.next_u64();
    const Shape xs{B, C, T};
    const std::string tag = shape_tag(xs);

    cases.push_back({"conv1d " + tag,
                     grad_check(
                         [&](Tape<double>& t, const std::vector<Var>& v) {
                           return detail::contract(t, conv1d(t, v[0], v[1], v[2], dil), cs);
                         },
                         {random_tensor(xs, rng), random_tensor({Co, C, k}, rng), random_tensor({Co}, rng)},
                         {true, true, true})});

    const Tensor<double> validity = detail::random_validity(B, T, rng);
    for (int masked = 0; masked < 2; ++masked) {
      cases.push_back({std::string("batch_norm1d train") + (masked ? " masked " : " ") + tag,
                       grad_check(
                           [&](Tape<double>& t, const std::vector<Var>& v) {
                             BatchNormBuffers<double> buf(C);
                             BatchMoments<double> mom;
                             return detail::contract(
                                 t, batch_norm1d(t, v[0], v[1], v[2], buf, Mode::train, masked ? &validity : nullptr, &mom),
                                 cs);
                           },
                           {random_tensor(xs, rng, 2.0), random_tensor({C}, rng), random_tensor({C}, rng)},
                           {true, true, true})});
    }
    {
      BatchNormBuffers<double> buf(C);
      for (std::size_t c = 0; c < C; ++c) {
        buf.running_mean[c] = rng.normal();
        buf.running_var[c] = 0.5 + rng.uniform();
      }
      cases.push_back({"batch_norm1d eval " + tag,
                       grad_check(
                           [&](Tape<double>& t, const std::vector<Var>& v) {
                             return detail::contract(t, batch_norm1d(t, v[0], v[1], v[2], buf, Mode::eval), cs);
                           },
                           {random_tensor(xs, rng), random_tensor({C}, rng), random_tensor({C}, rng)},
                           {true, true, true})});
    }
    cases.push_back({"gelu " + tag, grad_check(
                                        [&](Tape<double>& t, const std::vector<Var>& v) {
                                          return detail::contract(t, gelu(t, v[0]), cs);
                                        },
                                        {random_tensor(xs, rng, 2.0)}, {true})});
    cases.push_back({"relu " + tag, grad_check(
                                        [&](Tape<double>& t, const std::vector<Var>& v) {
                                          return detail::contract(t, relu(t, v[0]), cs);
                                        },
                                        {random_tensor(xs, rng)}, {true})});
    cases.push_back({"dropout " + tag, grad_check(
                                           [&](Tape<double>& t, const std::vector<Var>& v) {
                                             Rng mask_rng(cs);
                                             return detail::contract(t, dropout(t, v[0], 0.3, Mode::train, mask_rng), cs);
                                           },
                                           {random_tensor(xs, rng)}, {true})});
    {
      const Tensor<double> target = random_tensor(xs, rng);
      const double beta = 0.5 + rng.uniform();
      cases.push_back({"smooth_l1 " + tag, grad_check(
                                               [&](Tape<double>& t, const std::vector<Var>& v) {
                                                 return smooth_l1(t, v[0], target, beta);
                                               },
                                               {random_tensor(xs, rng, 2.0)}, {true})});
      cases.push_back({"masked_smooth_l1 " + tag,
                       grad_check(
                           [&](Tape<double>& t, const std::vector<Var>& v) {
                             return masked_smooth_l1(t, v[0], target, validity, beta);
                           },
                           {random_tensor(xs, rng, 2.0)}, {true})});
    }
    cases.push_back({"mask_time " + tag, grad_check(
                                             [&](Tape<double>& t, const std::vector<Var>& v) {
                                               return detail::contract(t, mask_time(t, v[0], validity), cs);
                                             },
                                             {random_tensor(xs, rng)}, {true})});
    cases.push_back({"replace_timesteps " + tag,
                     grad_check(
                         [&](Tape<double>& t, const std::vector<Var>& v) {
                           return detail::contract(t, replace_timesteps(t, v[0], validity, v[1]), cs);
                         },
                         {random_tensor(xs, rng), random_tensor({C}, rng)}, {true, true})});
    cases.push_back({"swap_last_axes " + tag, grad_check(
                                                  [&](Tape<double>& t, const std::vector<Var>& v) {
                                                    return detail::contract(t, swap_last_axes(t, v[0]), cs);
                                                  },
                                                  {random_tensor(xs, rng)}, {true})});
    cases.push_back({"add/mul/scale " + tag,
                     grad_check(
                         [&](Tape<double>& t, const std::vector<Var>& v) {
                           return detail::contract(t, scale(t, mul(t, add(t, v[0], v[1]), v[1]), 0.7), cs);
                         },
                         {random_tensor(xs, rng), random_tensor(xs, rng)}, {true, true})});

    // conv -> bn -> gelu -> smooth_l1
    {
      const Tensor<double> target = random_tensor({B, Co, T}, rng);
      cases.push_back({"conv-bn-gelu-smooth_l1 " + tag,
                       grad_check(
                           [&](Tape<double>& t, const std::vector<Var>& v) {
                             BatchNormBuffers<double> buf(Co);
                             BatchMoments<double> mom;
                             Var h = conv1d(t, v[0], v[1], v[2], dil);
                             h = batch_norm1d(t, h, v[3], v[4], buf, Mode::train, nullptr, &mom);
                             return smooth_l1(t, gelu(t, h), target, 1.0);
                           },
                           {random_tensor(xs, rng), random_tensor({Co, C, k}, rng), random_tensor({Co}, rng),
                            random_tensor({Co}, rng), random_tensor({Co}, rng)},
                           {true, true, true, true, true})});
    }

    // Full student graph: masked encoder -> regression head -> masked loss.
    {
      EncoderConfig ec;
      ec.in_channels = C;
      ec.width = 2 + rng.uniform_index(3);
      ec.num_blocks = 1 + rng.uniform_index(2);
      ec.kernel_size = 3;
      ec.dropout_rate = 0.2;
      const std::size_t Tt = 6 + rng.uniform_index(8);
      const std::size_t Bt = 2;
      Rng init(cs);
      Encoder<double> enc(ec, init);
      std::vector<Tensor<double>> inputs{random_tensor({Bt, C, Tt}, rng)};
      for (const auto* p : enc.parameters()) inputs.push_back(random_tensor(p->value.shape(), rng, 0.7));
      const std::size_t n_enc = enc.parameters().size();
      inputs.push_back(random_tensor({ec.width}, rng));               // mask embedding
      inputs.push_back(random_tensor({ec.width, ec.width, 1}, rng));  // head weight
      inputs.push_back(random_tensor({ec.width}, rng));               // head bias
      const Tensor<double> valid = detail::random_validity(Bt, Tt, rng);
      Rng plan_rng(cs + 1);
      const std::vector<std::size_t> lengths{Tt, Tt};
      const auto plans = sample_mask_plan(lengths, MaskConfig{0.4, 0.3, 1}, plan_rng);
      Tensor<double> selected = mask_matrix<double>(plans, Tt);
      for (std::size_t i = 0; i < selected.size(); ++i) selected[i] *= valid[i];
      selected[0] = 1.0;  // at least one selected valid step
      const Tensor<double> target = random_tensor({Bt, ec.width, Tt}, rng);
      std::vector<bool> diff(inputs.size(), true);
      diff[0] = false;
      cases.push_back({"train graph W=" + std::to_string(ec.width) + " L=" + std::to_string(ec.num_blocks) + " " +
                           tag,
                       grad_check(
                           [&](Tape<double>& t, const std::vector<Var>& v) {
                             Rng drop(cs + 2);
                             std::vector<Var> pv(v.begin() + 1, v.begin() + 1 + static_cast<std::ptrdiff_t>(n_enc));
                             Var emb = v[1 + n_enc];
                             MaskHook<double> hook = [&](Tape<double>& tt, Var x) {
                               return replace_timesteps(tt, x, selected, emb);
                             };
                             auto fw = enc.forward_with(t, v[0], pv, Mode::train, &valid, &drop, hook);
                             Var pred = conv1d(t, fw.blocks.back(), v[2 + n_enc], v[3 + n_enc], 1);
                             return masked_smooth_l1(t, pred, target, selected, 1.0);
                           },
                           inputs, diff, 1e-4, 24)});
    }
  }
  return cases;
}

}  // namespace tsdistill::testing
