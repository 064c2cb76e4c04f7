#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tsdistill/errors.hpp"
#include "tsdistill/ndgrad/ops.hpp"
#include "tsdistill/ndgrad/optim.hpp"
#include "tsdistill/ndgrad/tape.hpp"
#include "tsdistill/ndgrad/tensor.hpp"
#include "tsdistill/rng.hpp"

namespace tsdistill {

using ndgrad::Activation;
using ndgrad::Mode;
using ndgrad::Shape;
using ndgrad::Tensor;
using ndgrad::Var;

struct EncoderConfig {
  std::size_t in_channels = 1;
  std::size_t width = 320;
  std::size_t num_blocks = 7;
  std::size_t kernel_size = 3;
  double dropout_rate = 0.1;
  double init_scale = 1.0;
  Activation activation = Activation::gelu;
  // Off only for linearized analysis.
  bool batch_norm = true;

  void validate() const {
    if (in_channels < 1) throw ParameterError("encoder: in_channels must be >= 1");
    if (width < 1) throw ParameterError("encoder: width must be >= 1");
    if (num_blocks < 1) throw ParameterError("encoder: num_blocks must be >= 1");
    if (kernel_size % 2 == 0) throw ParameterError("encoder: kernel_size must be odd");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ParameterError("encoder: dropout_rate must lie in [0, 1)");
    if (!(init_scale >= 0.0)) throw ParameterError("encoder: init_scale must be non-negative");
  }
};

// 1 + sum over blocks of the span added by two convs with dilation 2^l.
inline std::size_t receptive_field(const EncoderConfig& c) {
  std::size_t rf = 1;
  for (std::size_t l = 0; l < c.num_blocks; ++l) rf += 2 * (c.kernel_size - 1) * (std::size_t{1} << l);
  return rf;
}

// Per-block outputs in [B,T,W] layout, block 0 first.
template <typename T>
struct HiddenStack {
  std::vector<Tensor<T>> layers;

  const Tensor<T>& output() const { return layers.back(); }
  std::size_t size() const { return layers.size(); }
};

// Called with the projected input [B,W,T] before block 0.
template <typename T>
using MaskHook = std::function<Var(ndgrad::Tape<T>&, Var)>;

// Dilated residual CNN. Block l holds two dilation-2^l convolutions:
//   h = BN(conv(x)); h = act(h); h = dropout(h); h = BN(conv(h)); x = act(x + h)
template <typename T>
class Encoder {
 public:
  Encoder() = default;

  Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const std::size_t W = config_.width, C = config_.in_channels, k = config_.kernel_size;
    add_conv("input_proj", W, C, 1, rng);
    for (std::size_t l = 0; l < config_.num_blocks; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      for (int i = 1; i <= 2; ++i) {
        const std::string q = p + "conv" + std::to_string(i);
        add_conv(q, W, W, k, rng);
        params_.emplace_back(q + ".bn.gamma", Tensor<T>(Shape{W}, T{1}));
        params_.emplace_back(q + ".bn.beta", Tensor<T>(Shape{W}, T{0}));
        buffers_.emplace_back(W);
      }
    }
  }

  const EncoderConfig& config() const noexcept { return config_; }

  std::vector<ndgrad::Parameter<T>*> parameters() {
    std::vector<ndgrad::Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  std::vector<const ndgrad::Parameter<T>*> parameters() const {
    std::vector<const ndgrad::Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
  }

  std::vector<ndgrad::BatchNormBuffers<T>>& buffers() noexcept { return buffers_; }
  const std::vector<ndgrad::BatchNormBuffers<T>>& buffers() const noexcept { return buffers_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  struct Forward {
    std::vector<Var> params;                      // bound leaves, parameters() order
    std::vector<Var> blocks;                      // [B,W,T] per block
    std::vector<ndgrad::BatchMoments<T>> moments;  // train mode only, buffers() order
  };

  // Records the forward pass on `tape`. `validity` is an optional [B,T] 0/1
  // tensor; padded steps are zeroed after the projection and after every
  // block, and excluded from BN statistics. Train-mode BN moments are returned
  // rather than applied (see apply_moments).
  Forward forward(ndgrad::Tape<T>& tape, const Tensor<T>& input, Mode mode, bool requires_grad,
                  const Tensor<T>* validity = nullptr, Rng* rng = nullptr, const MaskHook<T>& hook = {}) {
    auto ptrs = parameters();
    auto vars = ndgrad::bind<T>(tape, ptrs, requires_grad);
    return forward_with(tape, tape.leaf(input, false), vars, mode, validity, rng, hook);
  }

  // Same as forward() with caller-provided parameter leaves (parameters()
  // order); the stored parameter values are not read.
  Forward forward_with(ndgrad::Tape<T>& tape, Var input_var, std::span<const Var> param_vars, Mode mode,
                       const Tensor<T>* validity = nullptr, Rng* rng = nullptr, const MaskHook<T>& hook = {}) {
    const auto& input = tape.value(input_var);
    ndgrad::require_ndim(input, 3, "encode input");
    if (input.dim(1) != config_.in_channels) {
      throw DimensionError("encode: expected " + std::to_string(config_.in_channels) + " channels, got " +
                           std::to_string(input.dim(1)));
    }
    if (input.dim(2) < 1) throw ContractError("encode: series length must be >= 1");
    if (mode == Mode::train && config_.dropout_rate > 0.0 && !rng)
      throw ContractError("encode: train mode with dropout needs an rng");
    if (param_vars.size() != params_.size()) throw DimensionError("encode: parameter count mismatch");

    Forward fw;
    fw.params.assign(param_vars.begin(), param_vars.end());
    std::size_t pi = 0;
    auto next = [&] { return fw.params[pi++]; };

    Var x = input_var;
    {
      Var w = next(), b = next();
      x = ndgrad::conv1d(tape, x, w, b, 1);
    }
    if (validity) x = ndgrad::mask_time(tape, x, *validity);
    if (hook) x = hook(tape, x);

    std::size_t bi = 0;
    for (std::size_t l = 0; l < config_.num_blocks; ++l) {
      const int dilation = 1 << l;
      Var h = x;
      for (int i = 0; i < 2; ++i) {
        Var w = next(), b = next(), gamma = next(), beta = next();
        h = ndgrad::conv1d(tape, h, w, b, dilation);
        if (config_.batch_norm) {
          ndgrad::BatchMoments<T> mom;
          h = ndgrad::batch_norm1d(tape, h, gamma, beta, buffers_[bi], mode, validity,
                                   mode == Mode::train ? &mom : nullptr);
          if (mode == Mode::train) fw.moments.push_back(std::move(mom));
        }
        ++bi;
        if (i == 0) {
          h = ndgrad::activate(tape, h, config_.activation);
          if (mode == Mode::train && config_.dropout_rate > 0.0)
            h = ndgrad::dropout(tape, h, config_.dropout_rate, mode, *rng);
        }
      }
      x = ndgrad::activate(tape, ndgrad::add(tape, x, h), config_.activation);
      if (validity) x = ndgrad::mask_time(tape, x, *validity);
      fw.blocks.push_back(x);
    }
    return fw;
  }

  void apply_moments(const std::vector<ndgrad::BatchMoments<T>>& moments) {
    if (moments.empty()) return;
    if (moments.size() != buffers_.size()) throw DimensionError("apply_moments: count mismatch");
    for (std::size_t i = 0; i < buffers_.size(); ++i) ndgrad::update_running_stats(buffers_[i], moments[i]);
  }

  // Tape-free forward. Train mode updates the running statistics.
  HiddenStack<T> encode(const Tensor<T>& batch, Mode mode = Mode::eval, const Tensor<T>* validity = nullptr,
                        Rng* rng = nullptr, const MaskHook<T>& hook = {}) {
    ndgrad::Tape<T> tape(false);
    auto fw = forward(tape, batch, mode, false, validity, rng, hook);
    apply_moments(fw.moments);
    HiddenStack<T> hs;
    for (Var v : fw.blocks) hs.layers.push_back(ndgrad::swap_last_axes(tape.value(v)));
    return hs;
  }

 private:
  void add_conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
    const double bound = config_.init_scale / std::sqrt(static_cast<double>(in * k));
    Tensor<T> w(Shape{out, in, k});
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    params_.emplace_back(name + ".weight", std::move(w));
    params_.emplace_back(name + ".bias", Tensor<T>(Shape{out}, T{0}));
  }

  EncoderConfig config_;
  std::vector<ndgrad::Parameter<T>> params_;
  std::vector<ndgrad::BatchNormBuffers<T>> buffers_;
};

}  // namespace tsdistill
