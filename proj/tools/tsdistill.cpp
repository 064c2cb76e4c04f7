#include <CLI11.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tsdistill/pipeline.hpp"

using namespace tsdistill;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 64;
constexpr int kExitData = 65;
constexpr int kExitNumeric = 70;

// Configuration mistakes are usage errors even when they surface as parse errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("TSDISTILL_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    return detail::to_uint("TSDISTILL_SEED", s);
  } catch (const ParameterError& e) {
    throw UsageError(e.what());
  }
}

RunConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
  try {
    RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
    std::string extra;
    for (const auto& o : overrides) extra += o + "\n";
    cfg = parse_config(extra, cfg);
    if (const auto s = env_seed()) cfg.seed = *s;
    return cfg;
  } catch (const Error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

std::optional<std::string> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return s;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss << std::setprecision(6) << v;
  return ss.str();
}

void print_forecast_table(const ForecastReport& r) {
  std::cout << std::left << std::setw(6) << "H" << std::setw(14) << "mse" << std::setw(14) << "mae" << std::setw(14)
            << "baseline_mse" << std::setw(14) << "baseline_mae" << "alpha\n";
  for (const auto& row : r.rows)
    std::cout << std::setw(6) << row.horizon << std::setw(14) << fmt(row.mse) << std::setw(14) << fmt(row.mae)
              << std::setw(14) << fmt(row.baseline_mse) << std::setw(14) << fmt(row.baseline_mae) << fmt(row.alpha)
              << '\n';
  const auto& a = r.average;
  std::cout << std::setw(6) << "avg" << std::setw(14) << fmt(a.mse) << std::setw(14) << fmt(a.mae) << std::setw(14)
            << fmt(a.baseline_mse) << std::setw(14) << fmt(a.baseline_mae) << "-\n";
}

std::string default_log_for(const std::string& ckpt) {
  return (std::filesystem::path(ckpt).parent_path() / "metrics.csv").string();
}

void append_probe_record(const std::string& log_path, std::uint64_t step, double score) {
  MetricsLog log(log_path);
  MetricsRow row;
  row.step = step;
  row.probe_score = score;
  log.write(row);
}

struct Common {
  std::string ckpt, data, test;
  bool student = false;
};

Checkpoint open_checkpoint(const Common& c) {
  auto ck = load_checkpoint(c.ckpt);
  if (c.student) ck.config.probe_student = true;
  return ck;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees many large tape buffers per step; keep them
  // on the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif

  CLI::App app{"Self-distillation pretraining and probing of time-series encoders"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tsdistill 1.0");

  // pretrain
  std::string cfg_path, out_dir, resume;
  std::vector<std::string> sets;
  std::uint64_t stop_after = 0;
  bool quiet = false;
  Common pre;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "self-supervised pretraining");
  pretrain_cmd->add_option("--config", cfg_path, "key=value config file")->check(CLI::ExistingFile);
  pretrain_cmd->add_option("--data", pre.data, "training data (labeled TSV or CSV)")->required()->check(CLI::ExistingFile);
  pretrain_cmd->add_option("--test", pre.test, "test split for classification probes")->check(CLI::ExistingFile);
  pretrain_cmd->add_option("--out", out_dir, "output directory")->required();
  pretrain_cmd->add_option("--set", sets, "extra key=value override (repeatable)");
  pretrain_cmd->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);
  pretrain_cmd->add_option("--stop-after", stop_after, "stop and checkpoint after this many steps");
  pretrain_cmd->add_flag("--quiet", quiet, "no progress lines");

  // probe
  Common probe;
  std::string task_flag, probe_log;
  auto* probe_cmd = app.add_subcommand("probe", "frozen-encoder probe");
  probe_cmd->add_option("--ckpt", probe.ckpt)->required()->check(CLI::ExistingFile);
  probe_cmd->add_option("--data", probe.data)->required()->check(CLI::ExistingFile);
  probe_cmd->add_option("--test", probe.test)->check(CLI::ExistingFile);
  probe_cmd->add_option("--task", task_flag, "cls or fc")->required()->check(CLI::IsMember({"cls", "fc"}));
  probe_cmd->add_option("--log", probe_log, "metrics log to append to (default: next to the checkpoint)");
  probe_cmd->add_flag("--student", probe.student, "probe the student instead of the teacher");

  // forecast
  Common fc;
  std::vector<std::size_t> horizons;
  auto* forecast_cmd = app.add_subcommand("forecast", "ridge forecasting probe per horizon");
  forecast_cmd->add_option("--ckpt", fc.ckpt)->required()->check(CLI::ExistingFile);
  forecast_cmd->add_option("--data", fc.data)->required()->check(CLI::ExistingFile);
  forecast_cmd->add_option("--horizons", horizons, "comma separated horizons")->delimiter(',');
  forecast_cmd->add_flag("--student", fc.student);

  // export
  Common ex;
  std::string export_out, export_task;
  auto* export_cmd = app.add_subcommand("export", "write pooled per-instance features");
  export_cmd->add_option("--ckpt", ex.ckpt)->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--data", ex.data)->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--out", export_out)->required();
  export_cmd->add_option("--task", export_task, "data format, default from the checkpoint")
      ->check(CLI::IsMember({"cls", "fc"}));
  export_cmd->add_flag("--student", ex.student);

  // synth
  std::string kind, synth_out, synth_test_out;
  std::size_t classes = 3, count = 150, length = 256;
  double noise = 0.3, period = 50.0;
  std::optional<std::uint64_t> synth_seed;
  auto* synth_cmd = app.add_subcommand("synth", "generate synthetic data");
  synth_cmd->add_option("--kind", kind, "cls or sine")->required()->check(CLI::IsMember({"cls", "sine"}));
  synth_cmd->add_option("--out", synth_out)->required();
  synth_cmd->add_option("--test-out", synth_test_out, "cls: also write an independent test split");
  synth_cmd->add_option("--classes", classes);
  synth_cmd->add_option("--n", count, "cls: number of series");
  synth_cmd->add_option("--length", length);
  synth_cmd->add_option("--noise", noise);
  synth_cmd->add_option("--period", period, "sine: period in steps");
  synth_cmd->add_option("--seed", synth_seed);

  // config
  std::string check_path;
  auto* config_cmd = app.add_subcommand("config", "print the default config or validate one");
  config_cmd->add_option("--check", check_path)->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*pretrain_cmd) {
      PretrainOptions opt;
      opt.out_dir = out_dir;
      opt.resume = optional_path(resume);
      if (stop_after > 0) opt.stop_at = stop_after;
      if (!quiet) opt.log = [](const std::string& s) { std::cerr << s << '\n'; };
      RunConfig cfg = opt.resume ? load_checkpoint(*opt.resume).config : build_config(cfg_path, sets);
      const auto data = prepare_data(cfg, pre.data, optional_path(pre.test));
      const auto res = pretrain(cfg, data, opt);
      std::cout << "steps " << res.step << '/' << res.total_steps << '\n';
      if (res.best_probe)
        std::cout << "best_probe step " << res.best_probe->step << " score " << fmt(res.best_probe->score) << '\n';
      std::cout << "checkpoint " << res.checkpoint << '\n';
      if (res.exit_code == kExitCollapse) std::cerr << "aborted: representation collapse\n";
      return res.exit_code;
    }
    if (*probe_cmd) {
      auto ck = open_checkpoint(probe);
      ck.config.task = parse_task(task_flag);
      const auto data = prepare_data(ck.config, probe.data, optional_path(probe.test));
      const auto& net = probe_network(ck.state, ck.config);
      double score = 0.0;
      if (ck.config.task == Task::classification) {
        const auto r = probe_classification(net, data, ck.config);
        std::cout << "accuracy " << fmt(r.accuracy) << (r.has_test ? " (test)" : " (cross-validated)") << '\n';
        std::cout << "cv_accuracy " << fmt(r.cv_accuracy) << "\nC " << fmt(r.C) << '\n';
        score = r.accuracy;
      } else {
        const auto r = probe_forecast(net, data, ck.config, ck.config.horizons);
        print_forecast_table(r);
        score = r.average.mse;
      }
      append_probe_record(probe_log.empty() ? default_log_for(probe.ckpt) : probe_log, ck.state.step, score);
      return kExitOk;
    }
    if (*forecast_cmd) {
      auto ck = open_checkpoint(fc);
      ck.config.task = Task::forecasting;
      if (horizons.empty()) horizons = ck.config.horizons;
      ck.config.horizons = horizons;
      ck.config.validate();
      const auto data = prepare_data(ck.config, fc.data);
      print_forecast_table(probe_forecast(probe_network(ck.state, ck.config), data, ck.config, horizons));
      return kExitOk;
    }
    if (*export_cmd) {
      auto ck = open_checkpoint(ex);
      if (!export_task.empty()) ck.config.task = parse_task(export_task);
      const auto data = prepare_data(ck.config, ex.data);
      const auto& set = ck.config.task == Task::classification ? data.train : data.series;
      export_features(probe_network(ck.state, ck.config), set, export_out, ck.config.encode_batch);
      return kExitOk;
    }
    if (*synth_cmd) {
      const auto env = env_seed();
      Rng rng(synth_seed ? *synth_seed : env ? *env : 42);
      if (kind == "cls") {
        write_labeled_tsv(synth_classification(classes, count, length, noise, rng), synth_out);
        if (!synth_test_out.empty())
          write_labeled_tsv(synth_classification(classes, count, length, noise, rng, "test"), synth_test_out);
      } else {
        write_forecast_csv(synth_sine_forecast(length, period, noise, rng), synth_out, {"value"});
      }
      return kExitOk;
    }
    if (*config_cmd) {
      if (!check_path.empty()) {
        build_config(check_path, {});
        std::cout << "ok\n";
      } else {
        std::cout << config_template();
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitUsage;
}
