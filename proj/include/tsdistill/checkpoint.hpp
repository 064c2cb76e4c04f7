#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tsdistill/distill.hpp"
#include "tsdistill/errors.hpp"
#include "tsdistill/heads.hpp"
#include "tsdistill/run_config.hpp"

namespace tsdistill {

inline constexpr const char* kCheckpointMagic = "TSDISTILL-CKPT";
inline constexpr int kCheckpointVersion = 1;

// Training-loop state that lives outside TrainState.
struct RunProgress {
  std::size_t in_channels = 1;
  std::uint64_t total_steps = 1;
  std::uint64_t collapse_run = 0;  // consecutive steps below the collapse threshold
  std::string data_rng;            // batch sampling rng state
  std::vector<ProbeRecord> probes;
};

struct Checkpoint {
  RunConfig config;
  RunProgress progress;
  TrainState<float> state;
};

inline TrainState<float> make_train_state(const RunConfig& cfg, std::size_t in_channels, std::uint64_t total_steps) {
  EncoderConfig enc = cfg.encoder;
  enc.in_channels = in_channels;
  TrainConfig train = cfg.train;
  train.total_steps = total_steps;
  return TrainState<float>(enc, train, cfg.seed);
}

namespace detail {

inline void add_encoder_arrays(std::vector<std::pair<std::string, Tensor<float>*>>& out, const std::string& prefix,
                               Encoder<float>& enc) {
  for (auto* p : enc.parameters()) out.emplace_back(prefix + p->name, &p->value);
  auto& bufs = enc.buffers();
  for (std::size_t i = 0; i < bufs.size(); ++i) {
    out.emplace_back(prefix + "bn" + std::to_string(i) + ".running_mean", &bufs[i].running_mean);
    out.emplace_back(prefix + "bn" + std::to_string(i) + ".running_var", &bufs[i].running_var);
  }
}

// Every float array of the state in a fixed order.
inline std::vector<std::pair<std::string, Tensor<float>*>> state_arrays(TrainState<float>& s) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  add_encoder_arrays(out, "student.", s.student);
  add_encoder_arrays(out, "teacher.", s.teacher);
  out.emplace_back("mask_embedding", &s.mask_embedding.value);
  for (auto& p : s.head) out.emplace_back(p.name, &p.value);
  for (std::size_t i = 0; i < s.adam.m.size(); ++i) {
    out.emplace_back("adam.m." + std::to_string(i), &s.adam.m[i]);
    out.emplace_back("adam.v." + std::to_string(i), &s.adam.v[i]);
  }
  return out;
}

inline std::string rest_after(const std::string& line, std::size_t n) { return n < line.size() ? line.substr(n) : ""; }

}  // namespace detail

// Versioned text header followed by raw little-endian float32 arrays.
// Written to a temporary file and renamed so readers never see partial data.
inline void save_checkpoint(const std::string& path, const RunConfig& cfg, const RunProgress& progress,
                            TrainState<float>& state) {
  const auto arrays = detail::state_arrays(state);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot write checkpoint '" + path + "'", 0);
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    out << "step " << state.step << '\n';
    out << "total_steps " << progress.total_steps << '\n';
    out << "in_channels " << progress.in_channels << '\n';
    out << "collapse_run " << progress.collapse_run << '\n';
    out << "adam_step " << state.adam.step << '\n';
    out << "rng " << state.rng.state() << '\n';
    out << "data_rng " << progress.data_rng << '\n';
    for (const auto& p : progress.probes) out << "probe " << p.step << ' ' << detail::format_number(p.score) << '\n';
    std::istringstream cfg_lines(config_to_text(cfg));
    for (std::string line; std::getline(cfg_lines, line);) out << "config " << line << '\n';
    for (const auto& [name, t] : arrays) {
      out << "array " << name << ' ' << t->ndim();
      for (auto d : t->shape()) out << ' ' << d;
      out << '\n';
    }
    out << "end\n";
    std::vector<unsigned char> bytes;
    for (const auto& [name, t] : arrays) {
      bytes.resize(t->size() * 4);
      for (std::size_t i = 0; i < t->size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>((*t)[i]);
        for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFFu);
      }
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw ParseError("failed writing checkpoint '" + path + "'", 0);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint '" + path + "'", 0);
  std::string line;
  std::size_t line_no = 0;
  auto next = [&] {
    if (!std::getline(in, line)) throw ParseError("checkpoint header truncated", line_no);
    ++line_no;
  };
  next();
  if (line != std::string(kCheckpointMagic) + " " + std::to_string(kCheckpointVersion))
    throw ParseError("not a version " + std::to_string(kCheckpointVersion) + " checkpoint", 1);

  std::uint64_t step = 0, adam_step = 0;
  std::string rng_state, config_text;
  RunProgress progress;
  std::vector<std::pair<std::string, Shape>> declared;
  auto number = [&](std::size_t offset) { return detail::to_uint("checkpoint header", detail::rest_after(line, offset)); };
  for (;;) {
    next();
    if (line == "end") break;
    if (line.starts_with("step ")) {
      step = number(5);
    } else if (line.starts_with("total_steps ")) {
      progress.total_steps = number(12);
    } else if (line.starts_with("in_channels ")) {
      progress.in_channels = number(12);
    } else if (line.starts_with("collapse_run ")) {
      progress.collapse_run = number(13);
    } else if (line.starts_with("adam_step ")) {
      adam_step = number(10);
    } else if (line.starts_with("rng ")) {
      rng_state = detail::rest_after(line, 4);
    } else if (line.starts_with("data_rng ")) {
      progress.data_rng = detail::rest_after(line, 9);
    } else if (line.starts_with("probe ")) {
      std::istringstream ss(detail::rest_after(line, 6));
      std::string s, v;
      ss >> s >> v;
      const auto score = detail::parse_number(v);
      if (!score) throw ParseError("bad probe record", line_no);
      progress.probes.push_back({detail::to_uint("probe step", s), *score});
    } else if (line.starts_with("config ")) {
      config_text += detail::rest_after(line, 7) + "\n";
    } else if (line.starts_with("array ")) {
      std::istringstream ss(detail::rest_after(line, 6));
      std::string name;
      std::size_t nd = 0;
      ss >> name >> nd;
      Shape shape(nd);
      for (auto& d : shape) ss >> d;
      if (!ss) throw ParseError("bad array declaration", line_no);
      declared.emplace_back(name, shape);
    } else {
      throw ParseError("unexpected checkpoint header line", line_no);
    }
  }

  Checkpoint ck{parse_config(config_text), progress, {}};
  ck.state = make_train_state(ck.config, progress.in_channels, progress.total_steps);
  const auto arrays = detail::state_arrays(ck.state);
  if (arrays.size() != declared.size()) throw ParseError("checkpoint array count does not match its config", 0);
  std::vector<unsigned char> bytes;
  for (std::size_t a = 0; a < arrays.size(); ++a) {
    auto& [name, t] = arrays[a];
    if (declared[a].first != name || declared[a].second != t->shape())
      throw ParseError("checkpoint array '" + declared[a].first + "' does not match '" + name + "'", 0);
    bytes.resize(t->size() * 4);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ParseError("checkpoint data truncated in '" + name + "'", 0);
    for (std::size_t i = 0; i < t->size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
      (*t)[i] = std::bit_cast<float>(bits);
    }
  }
  ck.state.step = step;
  ck.state.adam.step = adam_step;
  ck.state.rng.set_state(rng_state);
  return ck;
}

}  // namespace tsdistill
