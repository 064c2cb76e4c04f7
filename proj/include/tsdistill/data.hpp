#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tsdistill/errors.hpp"
#include "tsdistill/ndgrad/tensor.hpp"
#include "tsdistill/rng.hpp"

namespace tsdistill {

// N series x C channels with per-series lengths. Values are stored
// [N][C][max_length]; positions past a series' length are zero padding.
struct SeriesSet {
  std::string name;
  std::string split;  // "train", "test" or "all"
  std::size_t channels = 1;
  std::size_t max_length = 0;
  std::vector<std::size_t> lengths;
  std::vector<double> values;
  std::vector<int> labels;               // empty when unlabeled
  std::vector<std::string> label_names;  // label index -> original text

  std::size_t size() const noexcept { return lengths.size(); }
  bool has_labels() const noexcept { return !labels.empty(); }
  std::size_t num_classes() const noexcept { return label_names.size(); }

  double& at(std::size_t i, std::size_t c, std::size_t t) { return values[(i * channels + c) * max_length + t]; }
  double at(std::size_t i, std::size_t c, std::size_t t) const {
    return values[(i * channels + c) * max_length + t];
  }

  std::size_t max_series_length() const {
    return lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());
  }

  void resize(std::size_t n, std::size_t c, std::size_t t) {
    channels = c;
    max_length = t;
    lengths.assign(n, t);
    values.assign(n * c * t, 0.0);
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline char detect_delimiter(std::string_view line) {
  if (line.find('\t') != std::string_view::npos) return '\t';
  if (line.find(',') != std::string_view::npos) return ',';
  return ' ';
}

inline std::vector<std::string_view> split_fields(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  if (delim == ' ') {
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      if (i >= line.size()) break;
      std::size_t j = i;
      while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
      out.push_back(line.substr(i, j - i));
      i = j;
    }
    return out;
  }
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(delim, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool is_nan_token(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  return lower == "nan" || lower == "?";
}

inline std::optional<double> parse_number(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "NaN";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'", 0);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

// Numeric order when every label parses as a number, lexicographic otherwise.
inline std::vector<std::string> sorted_labels(std::vector<std::string> names) {
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  const bool numeric = std::all_of(names.begin(), names.end(), [](const std::string& n) {
    return parse_number(n).has_value();
  });
  if (numeric) {
    std::stable_sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
      return *parse_number(a) < *parse_number(b);
    });
  }
  return names;
}

}  // namespace detail

// UCR-style rows: label first, then values; trailing NaN marks a shorter
// series. Pass the training set's label_names to keep indices aligned.
inline SeriesSet load_labeled_tsv(const std::string& path, const std::vector<std::string>* label_names = nullptr,
                                  const std::string& split = "train") {
  const auto lines = detail::read_lines(path);
  std::vector<std::pair<std::size_t, std::string>> rows;  // (line number, text)
  for (std::size_t i = 0; i < lines.size(); ++i)
    if (!detail::trim(lines[i]).empty()) rows.emplace_back(i + 1, lines[i]);
  if (rows.empty()) throw ParseError("'" + path + "' contains no rows", 0);

  const char delim = detail::detect_delimiter(rows.front().second);
  std::vector<std::string> raw_labels;
  std::vector<std::vector<double>> series;
  std::size_t width = 0;
  for (const auto& [line_no, text] : rows) {
    auto fields = detail::split_fields(text, delim);
    while (fields.size() > 1 && fields.back().empty()) fields.pop_back();
    if (fields.size() < 2) throw ParseError("row has no values", line_no);
    if (width == 0) width = fields.size();
    if (fields.size() != width) {
      throw ParseError("ragged row: expected " + std::to_string(width) + " fields, got " +
                       std::to_string(fields.size()),
                       line_no);
    }
    if (fields[0].empty()) throw ParseError("missing label", line_no, 1);
    raw_labels.emplace_back(fields[0]);
    std::vector<double> vals;
    bool padding = false;
    for (std::size_t f = 1; f < fields.size(); ++f) {
      if (detail::is_nan_token(fields[f]) || fields[f].empty()) {
        padding = true;
        continue;
      }
      const auto v = detail::parse_number(fields[f]);
      if (!v) throw ParseError("non-numeric value '" + std::string(fields[f]) + "'", line_no, f + 1);
      if (padding) throw ParseError("value after NaN padding", line_no, f + 1);
      vals.push_back(*v);
    }
    if (vals.empty()) throw ParseError("series has no values", line_no);
    series.push_back(std::move(vals));
  }

  SeriesSet set;
  set.name = path;
  set.split = split;
  std::size_t max_len = 0;
  for (const auto& s : series) max_len = std::max(max_len, s.size());
  set.resize(series.size(), 1, max_len);
  for (std::size_t i = 0; i < series.size(); ++i) {
    set.lengths[i] = series[i].size();
    std::copy(series[i].begin(), series[i].end(), set.values.begin() + static_cast<std::ptrdiff_t>(i * max_len));
  }

  set.label_names = label_names ? *label_names : detail::sorted_labels(raw_labels);
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < set.label_names.size(); ++i) index[set.label_names[i]] = static_cast<int>(i);
  for (std::size_t i = 0; i < raw_labels.size(); ++i) {
    auto it = index.find(raw_labels[i]);
    if (it == index.end()) throw ParseError("label '" + raw_labels[i] + "' not in the training labels", rows[i].first, 1);
    set.labels.push_back(it->second);
  }
  return set;
}

// Writes a univariate labeled set in the same format (tab separated).
inline void write_labeled_tsv(const SeriesSet& set, const std::string& path) {
  if (set.channels != 1) throw ParameterError("write_labeled_tsv: only univariate sets are supported");
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path + "'", 0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    out << (set.has_labels() ? set.label_names[static_cast<std::size_t>(set.labels[i])] : "0");
    for (std::size_t t = 0; t < set.max_length; ++t)
      out << '\t' << (t < set.lengths[i] ? detail::format_number(set.at(i, 0, t)) : "NaN");
    out << '\n';
  }
}

// Headered CSV in time order -> one series with one channel per selected
// column. With no columns given, every column except date/time stamps is used.
inline SeriesSet load_forecast_csv(const std::string& path, const std::vector<std::string>& columns = {}) {
  const auto lines = detail::read_lines(path);
  std::size_t first = 0;
  while (first < lines.size() && detail::trim(lines[first]).empty()) ++first;
  if (first == lines.size()) throw ParseError("'" + path + "' is empty", 0);
  const char delim = detail::detect_delimiter(lines[first]);
  const auto header = detail::split_fields(lines[first], delim);

  std::vector<std::size_t> selected;
  if (columns.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      std::string lower(header[c]);
      std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (lower != "date" && lower != "time" && lower != "timestamp" && lower != "datetime") selected.push_back(c);
    }
  } else {
    for (const auto& name : columns) {
      auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) throw ParseError("column '" + name + "' not found in header", first + 1);
      selected.push_back(static_cast<std::size_t>(it - header.begin()));
    }
  }
  if (selected.empty()) throw ParseError("no value columns", first + 1);

  std::vector<std::vector<double>> rows;
  for (std::size_t i = first + 1; i < lines.size(); ++i) {
    if (detail::trim(lines[i]).empty()) continue;
    const auto fields = detail::split_fields(lines[i], delim);
    std::vector<double> row;
    for (std::size_t c : selected) {
      if (c >= fields.size()) throw ParseError("missing field", i + 1, c + 1);
      const auto v = detail::parse_number(fields[c]);
      if (!v) throw ParseError("non-numeric value '" + std::string(fields[c]) + "'", i + 1, c + 1);
      row.push_back(*v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("'" + path + "' has a header but no rows", first + 1);

  SeriesSet set;
  set.name = path;
  set.split = "all";
  set.resize(1, selected.size(), rows.size());
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t c = 0; c < selected.size(); ++c) set.at(0, c, t) = rows[t][c];
  return set;
}

inline void write_forecast_csv(const SeriesSet& set, const std::string& path,
                               const std::vector<std::string>& column_names = {}) {
  if (set.size() != 1) throw ParameterError("write_forecast_csv: expects a single series");
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path + "'", 0);
  for (std::size_t c = 0; c < set.channels; ++c) {
    if (c) out << ',';
    out << (c < column_names.size() ? column_names[c] : "x" + std::to_string(c));
  }
  out << '\n';
  for (std::size_t t = 0; t < set.lengths[0]; ++t) {
    for (std::size_t c = 0; c < set.channels; ++c) {
      if (c) out << ',';
      out << detail::format_number(set.at(0, c, t));
    }
    out << '\n';
  }
}

// Time slice [begin, end) of every series (clipped to each length).
inline SeriesSet slice_time(const SeriesSet& set, std::size_t begin, std::size_t end, const std::string& split) {
  SeriesSet out;
  out.name = set.name;
  out.split = split;
  out.labels = set.labels;
  out.label_names = set.label_names;
  const std::size_t len = end > begin ? end - begin : 0;
  out.resize(set.size(), set.channels, len);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::size_t stop = std::min(end, set.lengths[i]);
    out.lengths[i] = stop > begin ? stop - begin : 0;
    for (std::size_t c = 0; c < set.channels; ++c)
      for (std::size_t t = 0; t < out.lengths[i]; ++t) out.at(i, c, t) = set.at(i, c, begin + t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<bool> constant;  // channels with zero spread, mapped to 0

  bool any_constant() const { return std::find(constant.begin(), constant.end(), true) != constant.end(); }
};

// Per-channel mean/std over every valid value of `train`.
inline NormStats fit_norm_stats(const SeriesSet& train) {
  NormStats s;
  s.mean.assign(train.channels, 0.0);
  s.std.assign(train.channels, 0.0);
  s.constant.assign(train.channels, false);
  for (std::size_t c = 0; c < train.channels; ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < train.size(); ++i)
      for (std::size_t t = 0; t < train.lengths[i]; ++t) {
        sum += train.at(i, c, t);
        ++n;
      }
    if (n == 0) throw ContractError("fit_norm_stats: training split is empty");
    const double mu = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i)
      for (std::size_t t = 0; t < train.lengths[i]; ++t) ss += (train.at(i, c, t) - mu) * (train.at(i, c, t) - mu);
    s.mean[c] = mu;
    s.std[c] = std::sqrt(ss / static_cast<double>(n));
    s.constant[c] = s.std[c] == 0.0;
  }
  return s;
}

// (x - mean) / std per channel; zero-spread channels become 0.
inline SeriesSet z_normalize(const SeriesSet& set, const NormStats& stats) {
  if (stats.mean.size() != set.channels) throw DimensionError("z_normalize: channel count mismatch");
  SeriesSet out = set;
  for (std::size_t i = 0; i < set.size(); ++i)
    for (std::size_t c = 0; c < set.channels; ++c)
      for (std::size_t t = 0; t < set.lengths[i]; ++t)
        out.at(i, c, t) = stats.constant[c] ? 0.0 : (set.at(i, c, t) - stats.mean[c]) / stats.std[c];
  return out;
}

// ---------------------------------------------------------------------------
// Batches

template <typename T>
struct Batch {
  ndgrad::Tensor<T> values;    // [B,C,L]
  ndgrad::Tensor<T> validity;  // [B,L]
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> starts;  // crop offsets into the source series

  bool padded() const {
    const std::size_t L = values.dim(2);
    return std::any_of(lengths.begin(), lengths.end(), [L](std::size_t n) { return n != L; });
  }
  // Null when every series fills the batch length.
  const ndgrad::Tensor<T>* validity_or_null() const { return padded() ? &validity : nullptr; }
};

// `window` consecutive steps starting at starts[i] of series indices[i];
// shorter series are taken whole and right-padded.
template <typename T>
Batch<T> gather(const SeriesSet& set, std::span<const std::size_t> indices, std::span<const std::size_t> starts,
                std::size_t window) {
  Batch<T> b;
  const std::size_t B = indices.size(), C = set.channels;
  for (std::size_t k = 0; k < B; ++k) {
    const std::size_t i = indices[k];
    if (i >= set.size()) throw ContractError("gather: series index out of range");
    b.lengths.push_back(std::min(window, set.lengths[i] - std::min(starts[k], set.lengths[i])));
    b.starts.push_back(starts[k]);
  }
  const std::size_t L = std::max<std::size_t>(1, *std::max_element(b.lengths.begin(), b.lengths.end()));
  b.values = ndgrad::Tensor<T>(ndgrad::Shape{B, C, L});
  b.validity = ndgrad::Tensor<T>(ndgrad::Shape{B, L});
  for (std::size_t k = 0; k < B; ++k) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < b.lengths[k]; ++t)
        b.values(k, c, t) = static_cast<T>(set.at(indices[k], c, starts[k] + t));
    for (std::size_t t = 0; t < b.lengths[k]; ++t) b.validity(k, t) = T{1};
  }
  return b;
}

// Whole series, no cropping.
template <typename T>
Batch<T> make_batch(const SeriesSet& set, std::span<const std::size_t> indices) {
  std::vector<std::size_t> starts(indices.size(), 0);
  std::size_t window = 0;
  for (std::size_t i : indices) window = std::max(window, set.lengths.at(i));
  return gather<T>(set, indices, starts, window);
}

// Independent uniformly placed window per sample.
template <typename T>
Batch<T> random_crop(const SeriesSet& set, std::span<const std::size_t> indices, std::size_t window, Rng& rng) {
  if (window < 1) throw ParameterError("random_crop: window must be >= 1");
  std::vector<std::size_t> starts;
  for (std::size_t i : indices) {
    const std::size_t len = set.lengths.at(i);
    starts.push_back(len > window ? rng.uniform_index(len - window + 1) : 0);
  }
  return gather<T>(set, indices, starts, window);
}

// k distinct indices from [0, n) (with repetition only when k > n).
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng) {
  if (n == 0) throw ContractError("sample_indices: empty set");
  std::vector<std::size_t> out;
  while (out.size() < k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < n && out.size() < k; ++i) {
      const std::size_t j = i + rng.uniform_index(n - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forecast windows

struct TimeRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const noexcept { return end > begin ? end - begin : 0; }
};

struct ForecastWindow {
  std::size_t split = 0;
  std::size_t context_start = 0;  // context = [context_start, context_start + context_len)
  std::size_t target_start = 0;   // target  = [target_start, target_start + max_horizon)
};

struct ForecastWindows {
  std::size_t context_len = 200;
  std::vector<std::size_t> horizons;
  std::size_t max_horizon = 0;
  std::size_t channels = 1;
  std::vector<ForecastWindow> windows;
  std::vector<bool> split_too_short;

  std::vector<ForecastWindow> in_split(std::size_t split) const {
    std::vector<ForecastWindow> out;
    for (const auto& w : windows)
      if (w.split == split) out.push_back(w);
    return out;
  }
};

// Contiguous 60/20/20 train/validation/test ranges.
inline std::vector<TimeRange> forecast_splits(std::size_t length) {
  const std::size_t a = length * 6 / 10, b = length * 8 / 10;
  return {{0, a}, {a, b}, {b, length}};
}

// Stride-1 windows that stay inside their split.
inline ForecastWindows make_forecast_windows(std::size_t context_len, const std::vector<std::size_t>& horizons,
                                             const std::vector<TimeRange>& splits, std::size_t channels = 1) {
  if (context_len < 1) throw ParameterError("forecast windows: context length must be >= 1");
  if (horizons.empty()) throw ParameterError("forecast windows: no horizons");
  for (std::size_t h : horizons)
    if (h == 0) throw ParameterError("forecast windows: horizon must be >= 1");
  ForecastWindows fw;
  fw.context_len = context_len;
  fw.horizons = horizons;
  fw.max_horizon = *std::max_element(horizons.begin(), horizons.end());
  fw.channels = channels;
  for (std::size_t s = 0; s < splits.size(); ++s) {
    const auto& r = splits[s];
    const bool too_short = r.length() < context_len + fw.max_horizon;
    fw.split_too_short.push_back(too_short);
    if (too_short) continue;
    for (std::size_t start = r.begin; start + context_len + fw.max_horizon <= r.end; ++start)
      fw.windows.push_back({s, start, start + context_len});
  }
  return fw;
}

// ---------------------------------------------------------------------------
// Synthetic data

// Class c is a sinusoid with 4(c+1) cycles over the series, random phase,
// plus Gaussian noise. Labels cycle through the classes.
inline SeriesSet synth_classification(std::size_t num_classes, std::size_t n, std::size_t length, double noise,
                                      Rng& rng, const std::string& split = "train") {
  if (num_classes < 1 || n < 1 || length < 1) throw ParameterError("synth_classification: empty request");
  SeriesSet set;
  set.name = "synthetic-classification";
  set.split = split;
  set.resize(n, 1, length);
  for (std::size_t c = 0; c < num_classes; ++c) set.label_names.push_back(std::to_string(c));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % num_classes;
    set.labels.push_back(static_cast<int>(cls));
    const double freq = static_cast<double>(cls + 1) / static_cast<double>(length) * 2.0 * std::numbers::pi * 4.0;
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t t = 0; t < length; ++t)
      set.at(i, 0, t) = std::sin(freq * static_cast<double>(t) + phase) + noise * rng.normal();
  }
  return set;
}

inline SeriesSet synth_sine_forecast(std::size_t length, double period, double noise, Rng& rng) {
  if (length < 1 || !(period > 0.0)) throw ParameterError("synth_sine_forecast: invalid request");
  SeriesSet set;
  set.name = "synthetic-sine";
  set.split = "all";
  set.resize(1, 1, length);
  for (std::size_t t = 0; t < length; ++t)
    set.at(0, 0, t) = std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / period) + noise * rng.normal();
  return set;
}

}  // namespace tsdistill
