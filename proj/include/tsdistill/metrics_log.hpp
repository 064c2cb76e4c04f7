#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "tsdistill/data.hpp"
#include "tsdistill/errors.hpp"

namespace tsdistill {

// One record per training step or probe event. Absent values are empty cells.
struct MetricsRow {
  std::uint64_t step = 0;
  std::optional<double> loss, lr, delta, masked_frac, collapse, probe_score;
  double wall_ms = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,loss,lr,delta,masked_frac,collapse,probe_score,wall_ms";

// Append-only CSV writer; the header is written once when the file is new.
class MetricsLog {
 public:
  explicit MetricsLog(const std::string& path) : path_(path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw ParseError("cannot open metrics log '" + path + "'", 0);
    if (fresh) out_ << kMetricsHeader << '\n';
  }

  void write(const MetricsRow& r) {
    auto cell = [](const std::optional<double>& v) { return v ? detail::format_number(*v) : std::string(); };
    out_ << r.step << ',' << cell(r.loss) << ',' << cell(r.lr) << ',' << cell(r.delta) << ',' << cell(r.masked_frac)
         << ',' << cell(r.collapse) << ',' << cell(r.probe_score) << ',' << detail::format_number(r.wall_ms) << '\n';
    out_.flush();
  }

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

// Rows as cell vectors, header excluded.
inline std::vector<std::vector<std::string>> read_metrics(const std::string& path) {
  const auto lines = detail::read_lines(path);
  if (lines.empty() || lines[0] != kMetricsHeader) throw ParseError("'" + path + "' is not a metrics log", 1);
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> cells;
    for (auto f : detail::split_fields(lines[i], ',')) cells.emplace_back(f);
    if (cells.size() != 8) throw ParseError("metrics row has " + std::to_string(cells.size()) + " cells", i + 1);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace tsdistill
