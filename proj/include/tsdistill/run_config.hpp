#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "tsdistill/data.hpp"
#include "tsdistill/distill.hpp"
#include "tsdistill/encoder.hpp"
#include "tsdistill/errors.hpp"
#include "tsdistill/heads.hpp"

namespace tsdistill {

enum class Task { classification, forecasting };

inline Task parse_task(const std::string& s) {
  if (s == "cls") return Task::classification;
  if (s == "fc") return Task::forecasting;
  throw ParameterError("unknown task '" + s + "' (expected cls or fc)");
}

inline std::string task_name(Task t) { return t == Task::classification ? "cls" : "fc"; }

// Every tunable knob of a run. in_channels is taken from the data.
struct RunConfig {
  std::uint64_t seed = 42;
  Task task = Task::classification;
  EncoderConfig encoder;
  TrainConfig train;
  double steps_per_kilostep = 600.0;
  std::uint64_t min_steps = 200;
  std::uint64_t total_steps = 0;  // 0: derived from the series length
  std::size_t crop_window = 0;    // 0: 1024 for classification, context_len for forecasting
  bool normalize = true;
  std::vector<std::string> columns;  // forecasting CSV columns; empty: all value columns

  bool probe = true;
  std::uint64_t probe_every = 0;  // 0: every max(total/10, 50) steps
  bool probe_student = false;     // probe the student instead of the teacher
  CVGrid logistic_grid = CVGrid::logistic_default();
  CVGrid ridge_grid = CVGrid::ridge_default();
  std::size_t context_len = 200;
  std::vector<std::size_t> horizons{24};
  std::size_t forecast_stride = 1;
  std::size_t encode_batch = 16;

  double collapse_threshold = 1e-4;
  std::uint64_t collapse_patience = 50;

  std::size_t effective_crop() const {
    if (crop_window) return crop_window;
    return task == Task::classification ? 1024 : context_len;
  }

  std::uint64_t effective_total_steps(std::size_t series_length) const {
    return total_steps ? total_steps : total_steps_for(series_length, steps_per_kilostep, min_steps);
  }

  void validate() const {
    encoder.validate();
    TrainConfig t = train;
    t.total_steps = 1;
    t.validate(encoder);
    if (!(steps_per_kilostep > 0.0)) throw ParameterError("steps_per_kilostep must be positive");
    if (context_len < 1) throw ParameterError("context_len must be >= 1");
    if (horizons.empty()) throw ParameterError("horizons must not be empty");
    for (auto h : horizons)
      if (h < 1) throw ParameterError("horizons must be >= 1");
    if (forecast_stride < 1) throw ParameterError("forecast_stride must be >= 1");
    if (encode_batch < 1) throw ParameterError("encode_batch must be >= 1");
    logistic_grid.validate();
    ridge_grid.validate();
    for (double c : logistic_grid.values)
      if (!(c > 0.0)) throw ParameterError("logistic_grid values must be positive");
    for (double a : ridge_grid.values)
      if (!(a > 0.0)) throw ParameterError("ridge_grid values must be positive");
    if (!(collapse_threshold >= 0.0)) throw ParameterError("collapse_threshold must be non-negative");
  }
};

namespace detail {

template <typename V>
std::string join(const std::vector<V>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_same_v<V, double>) {
      out += format_number(xs[i]);
    } else if constexpr (std::is_same_v<V, std::string>) {
      out += xs[i];
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  for (auto f : split_fields(s, ',')) out.emplace_back(f);
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  const auto x = parse_number(v);
  if (!x || !std::isfinite(*x)) throw ParameterError("config key '" + key + "': expected a number, got '" + v + "'");
  return *x;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  const auto t = trim(v);
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), x);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size())
    throw ParameterError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ParameterError("config key '" + key + "': expected true or false, got '" + v + "'");
}

struct ConfigEntry {
  std::string key;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigEntry>& config_entries() {
  using C = RunConfig;
  auto dbl = [](std::string key, std::string help, double C::*outer) {
    return ConfigEntry{key, std::move(help), [outer](const C& c) { return format_number(c.*outer); },
                       [outer, key](C& c, const std::string& v) { c.*outer = to_double(key, v); }};
  };
  auto u64 = [](std::string key, std::string help, auto getter) {
    return ConfigEntry{key, std::move(help),
                       [getter](const C& c) { return std::to_string(getter(const_cast<C&>(c))); },
                       [getter, key](C& c, const std::string& v) {
                         getter(c) = static_cast<std::remove_reference_t<decltype(getter(c))>>(to_uint(key, v));
                       }};
  };
  auto real = [](std::string key, std::string help, auto getter) {
    return ConfigEntry{key, std::move(help), [getter](const C& c) { return format_number(getter(const_cast<C&>(c))); },
                       [getter, key](C& c, const std::string& v) { getter(c) = to_double(key, v); }};
  };
  auto flag = [](std::string key, std::string help, auto getter) {
    return ConfigEntry{key, std::move(help),
                       [getter](const C& c) { return std::string(getter(const_cast<C&>(c)) ? "true" : "false"); },
                       [getter, key](C& c, const std::string& v) { getter(c) = to_bool(key, v); }};
  };
  auto grid = [](std::string key, std::string help, CVGrid C::*g) {
    return ConfigEntry{key, std::move(help), [g](const C& c) { return join((c.*g).values); },
                       [g, key](C& c, const std::string& v) {
                         (c.*g).values.clear();
                         for (const auto& s : split_list(v)) (c.*g).values.push_back(to_double(key, s));
                       }};
  };

  static const std::vector<ConfigEntry> entries = {
      u64("seed", "random seed (TSDISTILL_SEED overrides)", [](C& c) -> std::uint64_t& { return c.seed; }),
      {"task", "cls (labeled TSV) or fc (headered CSV)", [](const C& c) { return task_name(c.task); },
       [](C& c, const std::string& v) { c.task = parse_task(v); }},
      u64("width", "feature dimension W", [](C& c) -> std::size_t& { return c.encoder.width; }),
      u64("num_blocks", "residual blocks L", [](C& c) -> std::size_t& { return c.encoder.num_blocks; }),
      u64("kernel_size", "odd convolution kernel size", [](C& c) -> std::size_t& { return c.encoder.kernel_size; }),
      real("dropout", "dropout rate inside blocks", [](C& c) -> double& { return c.encoder.dropout_rate; }),
      real("init_scale", "multiplier on the uniform fan-in initialization",
           [](C& c) -> double& { return c.encoder.init_scale; }),
      {"activation", "gelu, relu or identity", [](const C& c) { return ndgrad::activation_name(c.encoder.activation); },
       [](C& c, const std::string& v) { c.encoder.activation = ndgrad::parse_activation(v); }},
      flag("batch_norm", "batch normalization after each conv", [](C& c) -> bool& { return c.encoder.batch_norm; }),
      real("mask_prob", "target masked fraction p", [](C& c) -> double& { return c.train.mask.mask_prob; }),
      real("max_block_frac", "cap on one block as a fraction of T",
           [](C& c) -> double& { return c.train.mask.max_block_frac; }),
      u64("min_block_len", "shortest masked block", [](C& c) -> std::size_t& { return c.train.mask.min_block_len; }),
      u64("target_k", "top layers averaged into targets", [](C& c) -> std::size_t& { return c.train.targets.top_k; }),
      flag("layer_norm_targets", "normalize each layer before averaging",
           [](C& c) -> bool& { return c.train.targets.layer_norm_targets; }),
      u64("num_students", "masked views per step S", [](C& c) -> std::size_t& { return c.train.num_students; }),
      u64("batch_size", "series per step", [](C& c) -> std::size_t& { return c.train.batch_size; }),
      real("lr", "peak learning rate", [](C& c) -> double& { return c.train.lr; }),
      real("weight_decay", "decoupled weight decay", [](C& c) -> double& { return c.train.weight_decay; }),
      real("warmup_fraction", "OneCycle warm-up fraction", [](C& c) -> double& { return c.train.warmup_fraction; }),
      real("onecycle_start_div", "initial lr = lr / start_div",
           [](C& c) -> double& { return c.train.onecycle_start_div; }),
      real("onecycle_final_div", "final lr = lr / final_div",
           [](C& c) -> double& { return c.train.onecycle_final_div; }),
      real("adam_beta1", "Adam first-moment decay", [](C& c) -> double& { return c.train.adam_beta1; }),
      real("adam_beta2", "Adam second-moment decay", [](C& c) -> double& { return c.train.adam_beta2; }),
      real("adam_eps", "Adam epsilon", [](C& c) -> double& { return c.train.adam_eps; }),
      real("smooth_l1_beta", "smooth-L1 transition point", [](C& c) -> double& { return c.train.smooth_l1_beta; }),
      real("ema_start", "teacher EMA decay at step 0", [](C& c) -> double& { return c.train.ema_start; }),
      real("ema_end", "teacher EMA decay at the last step", [](C& c) -> double& { return c.train.ema_end; }),
      flag("regression_head", "student-only 1x1 head before the loss",
           [](C& c) -> bool& { return c.train.regression_head; }),
      dbl("steps_per_kilostep", "training steps per 1000 timesteps of series length", &C::steps_per_kilostep),
      u64("min_steps", "floor on derived step count", [](C& c) -> std::uint64_t& { return c.min_steps; }),
      u64("total_steps", "0 derives the count from the series length",
          [](C& c) -> std::uint64_t& { return c.total_steps; }),
      u64("crop_window", "0: 1024 for cls, context_len for fc", [](C& c) -> std::size_t& { return c.crop_window; }),
      flag("normalize", "z-normalize with train-split statistics", [](C& c) -> bool& { return c.normalize; }),
      {"columns", "forecasting CSV columns, comma separated (empty: all)",
       [](const C& c) { return join(c.columns); }, [](C& c, const std::string& v) { c.columns = split_list(v); }},
      flag("probe", "run periodic probes during pretraining", [](C& c) -> bool& { return c.probe; }),
      u64("probe_every", "0: every max(total_steps/10, 50) steps",
          [](C& c) -> std::uint64_t& { return c.probe_every; }),
      flag("probe_student", "probe the student instead of the teacher",
           [](C& c) -> bool& { return c.probe_student; }),
      grid("logistic_grid", "logistic C candidates", &C::logistic_grid),
      grid("ridge_grid", "ridge alpha candidates", &C::ridge_grid),
      u64("cv_folds", "cross-validation folds for both probes", [](C& c) -> std::size_t& { return c.logistic_grid.folds; }),
      u64("context_len", "forecasting context window", [](C& c) -> std::size_t& { return c.context_len; }),
      {"horizons", "forecast horizons, comma separated", [](const C& c) { return join(c.horizons); },
       [](C& c, const std::string& v) {
         c.horizons.clear();
         for (const auto& s : split_list(v)) c.horizons.push_back(static_cast<std::size_t>(to_uint("horizons", s)));
       }},
      u64("forecast_stride", "stride between probe windows", [](C& c) -> std::size_t& { return c.forecast_stride; }),
      u64("encode_batch", "series per encoder call when probing", [](C& c) -> std::size_t& { return c.encode_batch; }),
      real("collapse_threshold", "abort when the collapse metric stays below this",
           [](C& c) -> double& { return c.collapse_threshold; }),
      u64("collapse_patience", "consecutive low steps before aborting",
          [](C& c) -> std::uint64_t& { return c.collapse_patience; }),
  };
  return entries;
}

}  // namespace detail

// Flat key=value text; '#' starts a comment. Unknown keys are rejected.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  const auto& entries = detail::config_entries();
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected key=value", line_no);
    const std::string key(detail::trim(body.substr(0, eq)));
    const std::string value(detail::trim(body.substr(eq + 1)));
    auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.key == key; });
    if (it == entries.end()) throw ParseError("unknown config key '" + key + "'", line_no);
    try {
      it->set(base, value);
    } catch (const ParameterError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  base.ridge_grid.folds = base.logistic_grid.folds;
  base.validate();
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config '" + path + "'", 0);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Every key with its current value; parse_config(to_text(c)) == c.
inline std::string config_to_text(const RunConfig& c, bool with_help = false) {
  std::string out;
  for (const auto& e : detail::config_entries()) {
    if (with_help) out += "# " + e.help + "\n";
    out += e.key + "=" + e.get(c) + "\n";
  }
  return out;
}

inline std::string config_template() { return config_to_text(RunConfig{}, true); }

}  // namespace tsdistill
