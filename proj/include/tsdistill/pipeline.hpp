#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tsdistill/checkpoint.hpp"
#include "tsdistill/data.hpp"
#include "tsdistill/distill.hpp"
#include "tsdistill/heads.hpp"
#include "tsdistill/metrics_log.hpp"
#include "tsdistill/run_config.hpp"

namespace tsdistill {

// ---------------------------------------------------------------------------
// Data preparation

// Normalized train/test sets for classification, or one normalized series
// with its 60/20/20 ranges for forecasting.
struct PreparedData {
  Task task = Task::classification;
  SeriesSet train;
  std::optional<SeriesSet> test;  // classification only
  SeriesSet series;               // forecasting: the whole series
  std::vector<TimeRange> splits;  // forecasting ranges
  NormStats stats;
  bool normalized = false;

  std::size_t channels() const { return task == Task::classification ? train.channels : series.channels; }
  // Length that sets the derived step count.
  std::size_t train_length() const { return train.max_series_length(); }
};

// "<x>_TRAIN.<ext>" -> "<x>_TEST.<ext>" when that file exists.
inline std::optional<std::string> companion_test_path(const std::string& train_path) {
  const auto pos = train_path.rfind("_TRAIN");
  if (pos == std::string::npos) return std::nullopt;
  std::string p = train_path;
  p.replace(pos, 6, "_TEST");
  if (!std::filesystem::exists(p)) return std::nullopt;
  return p;
}

inline PreparedData prepare_data(const RunConfig& cfg, const std::string& data_path,
                                 const std::optional<std::string>& test_path = std::nullopt) {
  PreparedData d;
  d.task = cfg.task;
  if (cfg.task == Task::classification) {
    d.train = load_labeled_tsv(data_path, nullptr, "train");
    const auto tp = test_path ? test_path : companion_test_path(data_path);
    if (tp) d.test = load_labeled_tsv(*tp, &d.train.label_names, "test");
    if (cfg.normalize) {
      d.stats = fit_norm_stats(d.train);
      d.train = z_normalize(d.train, d.stats);
      if (d.test) d.test = z_normalize(*d.test, d.stats);
      d.normalized = true;
    }
  } else {
    d.series = load_forecast_csv(data_path, cfg.columns);
    d.splits = forecast_splits(d.series.max_length);
    if (cfg.normalize) {
      d.stats = fit_norm_stats(slice_time(d.series, d.splits[0].begin, d.splits[0].end, "train"));
      d.series = z_normalize(d.series, d.stats);
      d.normalized = true;
    }
    d.train = slice_time(d.series, d.splits[0].begin, d.splits[0].end, "train");
  }
  if (d.train.size() == 0 || d.train.max_series_length() == 0) throw ParseError("training split is empty", 0);
  return d;
}

// ---------------------------------------------------------------------------
// Frozen-encoder features

// Encodes `indices` x `starts` windows in chunks and pools each to one row.
inline Matrix encode_windows(Encoder<float> encoder, const SeriesSet& set, std::span<const std::size_t> indices,
                             std::span<const std::size_t> starts, std::size_t window, Pooling pooling,
                             std::size_t chunk) {
  Matrix X(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(encoder.config().width));
  for (std::size_t c = 0; c < indices.size(); c += chunk) {
    const std::size_t n = std::min(chunk, indices.size() - c);
    const auto batch = gather<float>(set, indices.subspan(c, n), starts.subspan(c, n), window);
    const auto hidden = encoder.encode(batch.values, Mode::eval, batch.validity_or_null()).output();
    const auto f = pooling == Pooling::max_over_time ? max_pool_time(hidden, batch.lengths)
                                                     : last_step_feature(hidden, batch.lengths);
    X.middleRows(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n)) = f.X;
  }
  return X;
}

// Max-pooled whole-series features, one row per series.
inline Matrix instance_features(const Encoder<float>& encoder, const SeriesSet& set, std::size_t chunk) {
  std::vector<std::size_t> idx(set.size()), starts(set.size(), 0);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return encode_windows(encoder, set, idx, starts, std::max<std::size_t>(1, set.max_series_length()),
                        Pooling::max_over_time, chunk);
}

// ---------------------------------------------------------------------------
// Probes

struct ClassificationReport {
  double accuracy = 0.0;     // on the test set when present, else best CV accuracy
  double cv_accuracy = 0.0;  // best CV accuracy on the training set
  double C = 0.0;
  bool has_test = false;
  bool degenerate = false;
};

inline ClassificationReport probe_classification(const Encoder<float>& encoder, const PreparedData& data,
                                                 const RunConfig& cfg) {
  const Matrix Xtr = instance_features(encoder, data.train, cfg.encode_batch);
  const auto scaler = FeatureScaler::fit(Xtr);
  Rng cv_rng(cfg.seed ^ 0xC0FFEEULL);
  const auto model = fit_logistic(ProbeFeatures{scaler.apply(Xtr)}, data.train.labels, data.train.num_classes(),
                                  cfg.logistic_grid, cv_rng);
  ClassificationReport r;
  r.C = model.C;
  r.degenerate = model.degenerate;
  r.cv_accuracy = model.cv_scores.empty() ? 0.0 : *std::max_element(model.cv_scores.begin(), model.cv_scores.end());
  r.accuracy = r.cv_accuracy;
  if (data.test) {
    r.has_test = true;
    r.accuracy = eval_classification(model, scaler.apply(instance_features(encoder, *data.test, cfg.encode_batch)),
                                     data.test->labels);
  }
  return r;
}

struct HorizonScore {
  std::size_t horizon = 0;
  double mse = 0.0, mae = 0.0;
  double baseline_mse = 0.0, baseline_mae = 0.0;  // last value carried forward
  double alpha = 0.0;
};

struct ForecastReport {
  std::vector<HorizonScore> rows;
  HorizonScore average;
  std::size_t train_windows = 0, test_windows = 0;
};

namespace detail {

struct WindowSet {
  std::vector<std::size_t> starts;  // context starts
  Matrix targets;                   // [n, max_h * C], column h * C + c
  Matrix last_values;               // [n, C]
};

inline WindowSet window_set(const SeriesSet& series, const ForecastWindows& fw, std::size_t split,
                            std::size_t stride) {
  WindowSet ws;
  const auto all = fw.in_split(split);
  for (std::size_t i = 0; i < all.size(); i += stride) ws.starts.push_back(all[i].context_start);
  const std::size_t C = series.channels, H = fw.max_horizon;
  const auto n = static_cast<Eigen::Index>(ws.starts.size());
  ws.targets.resize(n, static_cast<Eigen::Index>(H * C));
  ws.last_values.resize(n, static_cast<Eigen::Index>(C));
  for (Eigen::Index r = 0; r < n; ++r) {
    const std::size_t target = ws.starts[static_cast<std::size_t>(r)] + fw.context_len;
    for (std::size_t c = 0; c < C; ++c) {
      ws.last_values(r, static_cast<Eigen::Index>(c)) = series.at(0, c, target - 1);
      for (std::size_t h = 0; h < H; ++h)
        ws.targets(r, static_cast<Eigen::Index>(h * C + c)) = series.at(0, c, target + h);
    }
  }
  return ws;
}

}  // namespace detail

// Ridge on last-step features of each context window, fitted on the train
// range and scored on the test range in normalized units.
inline ForecastReport probe_forecast(const Encoder<float>& encoder, const PreparedData& data, const RunConfig& cfg,
                                     const std::vector<std::size_t>& horizons) {
  const auto fw = make_forecast_windows(cfg.context_len, horizons, data.splits, data.series.channels);
  if (fw.split_too_short[0] || fw.split_too_short[2])
    throw ContractError("forecast probe: train or test range shorter than context + horizon");
  const auto tr = detail::window_set(data.series, fw, 0, cfg.forecast_stride);
  const auto te = detail::window_set(data.series, fw, 2, cfg.forecast_stride);
  auto features = [&](const detail::WindowSet& ws) {
    const std::vector<std::size_t> idx(ws.starts.size(), 0);
    return encode_windows(encoder, data.series, idx, ws.starts, cfg.context_len, Pooling::last_step, cfg.encode_batch);
  };
  const Matrix Xtr = features(tr), Xte = features(te);
  const std::size_t C = data.series.channels;
  ForecastReport rep;
  rep.train_windows = tr.starts.size();
  rep.test_windows = te.starts.size();
  for (std::size_t H : horizons) {
    const auto cols = static_cast<Eigen::Index>(H * C);
    const auto sol = fit_ridge(Xtr, tr.targets.leftCols(cols), cfg.ridge_grid);
    const auto score = eval_forecast(sol, Xte, te.targets.leftCols(cols));
    Matrix carry(te.targets.rows(), cols);
    for (std::size_t h = 0; h < H; ++h) carry.middleCols(static_cast<Eigen::Index>(h * C), static_cast<Eigen::Index>(C)) = te.last_values;
    const auto base = forecast_errors(carry, te.targets.leftCols(cols));
    rep.rows.push_back({H, score.mse, score.mae, base.mse, base.mae, sol.alpha});
  }
  const double n = static_cast<double>(rep.rows.size());
  for (const auto& r : rep.rows) {
    rep.average.mse += r.mse / n;
    rep.average.mae += r.mae / n;
    rep.average.baseline_mse += r.baseline_mse / n;
    rep.average.baseline_mae += r.baseline_mae / n;
  }
  return rep;
}

// Score used to rank periodic probes: accuracy for classification (higher is
// better), average test MSE for forecasting (lower is better).
inline double probe_score(const Encoder<float>& encoder, const PreparedData& data, const RunConfig& cfg) {
  if (data.task == Task::classification) return probe_classification(encoder, data, cfg).accuracy;
  return probe_forecast(encoder, data, cfg, cfg.horizons).average.mse;
}

inline const Encoder<float>& probe_network(const TrainState<float>& s, const RunConfig& cfg) {
  return cfg.probe_student ? s.student : s.teacher;
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainOptions {
  std::string out_dir;
  std::optional<std::string> resume;     // checkpoint to continue from
  std::optional<std::uint64_t> stop_at;  // stop (and checkpoint) once this step is reached
  std::function<void(const std::string&)> log;
};

struct PretrainResult {
  int exit_code = 0;  // 0 finished or stopped, 2 collapse abort
  std::uint64_t step = 0;
  std::uint64_t total_steps = 0;
  std::optional<ProbeRecord> best_probe;
  std::string checkpoint;
  std::string metrics;
};

inline constexpr int kExitCollapse = 2;

inline std::string checkpoint_path(const std::string& out_dir) { return (std::filesystem::path(out_dir) / "checkpoint.ckpt").string(); }
inline std::string metrics_path(const std::string& out_dir) { return (std::filesystem::path(out_dir) / "metrics.csv").string(); }

// Draws one training batch: random crops for classification, random windows
// of the train range for forecasting.
inline Batch<float> draw_batch(const PreparedData& data, const RunConfig& cfg, Rng& rng) {
  const auto idx = sample_indices(data.train.size(), cfg.train.batch_size, rng);
  return random_crop<float>(data.train, idx, cfg.effective_crop(), rng);
}

inline PretrainResult pretrain(RunConfig cfg, const PreparedData& data, const PretrainOptions& opt) {
  std::filesystem::create_directories(opt.out_dir);
  PretrainResult res;
  res.checkpoint = checkpoint_path(opt.out_dir);
  res.metrics = metrics_path(opt.out_dir);
  auto say = [&](const std::string& s) {
    if (opt.log) opt.log(s);
  };

  RunProgress progress;
  TrainState<float> state;
  if (opt.resume) {
    auto ck = load_checkpoint(*opt.resume);
    cfg = ck.config;
    progress = std::move(ck.progress);
    state = std::move(ck.state);
    if (progress.in_channels != data.channels()) throw DimensionError("resume: data channel count differs from checkpoint");
    say("resumed at step " + std::to_string(state.step));
  } else {
    cfg.validate();
    progress.in_channels = data.channels();
    progress.total_steps = cfg.effective_total_steps(data.train_length());
    state = make_train_state(cfg, progress.in_channels, progress.total_steps);
    progress.data_rng = state.rng.split().state();
  }
  Rng data_rng;
  data_rng.set_state(progress.data_rng);
  res.total_steps = progress.total_steps;

  ProbeTracker tracker(cfg.probe_every ? cfg.probe_every : default_probe_every(progress.total_steps),
                       progress.total_steps, cfg.task == Task::classification);
  tracker.restore(progress.probes);
  MetricsLog log(res.metrics);

  auto save = [&] {
    progress.data_rng = data_rng.state();
    progress.probes = tracker.history();
    save_checkpoint(res.checkpoint, cfg, progress, state);
  };

  while (!state.finished() && !(opt.stop_at && state.step >= *opt.stop_at)) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batch = draw_batch(data, cfg, data_rng);
    const auto m = train_step(state, batch.values, batch.validity_or_null());
    if (!std::isfinite(m.loss)) throw NumericError("non-finite loss at step " + std::to_string(m.step));
    progress.collapse_run = m.collapse < cfg.collapse_threshold ? progress.collapse_run + 1 : 0;

    MetricsRow row;
    row.step = state.step;
    row.loss = m.loss;
    row.lr = m.lr;
    row.delta = m.delta;
    row.masked_frac = m.masked_fraction;
    row.collapse = m.collapse;
    const bool due = cfg.probe && tracker.due(state.step);
    if (due) {
      const double score = probe_score(probe_network(state, cfg), data, cfg);
      tracker.record(state.step, score);
      row.probe_score = score;
      say("step " + std::to_string(state.step) + " probe " + detail::format_number(score));
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.write(row);
    if (due) save();

    if (cfg.collapse_patience > 0 && progress.collapse_run >= cfg.collapse_patience) {
      save();
      say("collapse: metric below threshold for " + std::to_string(progress.collapse_run) + " steps");
      res.exit_code = kExitCollapse;
      break;
    }
  }
  if (res.exit_code == 0) save();
  res.step = state.step;
  res.best_probe = tracker.best();
  return res;
}

// ---------------------------------------------------------------------------
// Export

// Headered CSV: instance id then W pooled feature columns.
inline void export_features(const Encoder<float>& encoder, const SeriesSet& set, const std::string& path,
                            std::size_t chunk) {
  const Matrix X = instance_features(encoder, set, chunk);
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path + "'", 0);
  out << "id";
  for (Eigen::Index w = 0; w < X.cols(); ++w) out << ",f" << w;
  out << '\n';
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    out << i;
    for (Eigen::Index w = 0; w < X.cols(); ++w) out << ',' << detail::format_number(X(i, w));
    out << '\n';
  }
}

}  // namespace tsdistill
