// Acceptance gate: one line per criterion. Run all, or one with --criterion N.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"
#include "tsdistill/pipeline.hpp"

using namespace tsdistill;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  enum Status { pass, fail, skip } status = fail;
  std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Outcome::pass : Outcome::fail, std::move(detail)}; }

std::string num(double v, int precision = 4) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("tsdistill_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient sweep

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = testing::run_gradient_suite(20, 7);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_case;
  std::size_t unchecked = 0;
  bool composed = false;
  for (const auto& c : cases) {
    if (c.result.checked == 0) ++unchecked;
    if (c.name.starts_with("train graph")) composed = true;
    if (c.result.max_rel_error > worst) {
      worst = c.result.max_rel_error;
      worst_case = c.name;
    }
  }
  const bool ok = worst < 1e-4 && unchecked == 0 && composed && secs < 60.0;
  return verdict(ok, std::to_string(cases.size()) + " cases over 20 shapes, max rel error " + num(worst) + " (" +
                         worst_case + "), " + num(secs, 3) + " s");
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence

Outcome oracles() {
  using namespace ndgrad;
  Rng rng(2);
  double conv_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + rng.uniform_index(3), Cin = 1 + rng.uniform_index(4), Cout = 1 + rng.uniform_index(4);
    const std::size_t T = 1 + rng.uniform_index(40), k = 1 + 2 * rng.uniform_index(3);
    const int dil = 1 + static_cast<int>(rng.uniform_index(8));
    const auto x = testing::random_tensor({B, Cin, T}, rng);
    const auto w = testing::random_tensor({Cout, Cin, k}, rng);
    const auto b = testing::random_tensor({Cout}, rng);
    Tape<double> tape(false);
    const auto y = tape.value(conv1d(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b), dil));
    const auto ref = testing::naive_conv1d(x, w, b, dil);
    for (std::size_t i = 0; i < y.size(); ++i) conv_err = std::max(conv_err, std::abs(y[i] - ref[i]));
  }

  // Centered X = [[-1,-2],[1,2]], y = [-1,1], alpha = 1: A = [[3,4],[4,9]], Xty = [2,4].
  Matrix X(2, 2);
  X << 0, 1, 2, 5;
  Matrix Y(2, 1);
  Y << 3, 5;
  const auto s = fit_ridge_fixed(X, Y, 1.0);
  const double w0 = 2.0 / 11.0, w1 = 4.0 / 11.0, b0 = 4.0 - (w0 + 3.0 * w1);
  const double ridge_err = std::max({std::abs(s.weights(0, 0) - w0), std::abs(s.weights(1, 0) - w1),
                                     std::abs(s.intercept(0) - b0)});

  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const double beta = rng.uniform(0.1, 3.0);
    const double p = rng.normal() * 3.0, t = rng.normal() * 3.0;
    Tape<double> tape(false);
    const double got = tape.value(smooth_l1(tape, tape.leaf(Tensor<double>({1}, {p})), Tensor<double>({1}, {t}), beta))[0];
    if (got != testing::smooth_l1_closed_form(p - t, beta)) ++mismatches;
  }
  const bool ok = conv_err < 1e-6 && ridge_err < 1e-9 && mismatches == 0;
  return verdict(ok, "conv max abs err " + num(conv_err) + " over 100 instances, ridge err " + num(ridge_err) +
                         ", smooth_l1 mismatches " + std::to_string(mismatches) + "/1000");
}

// ---------------------------------------------------------------------------
// 3. Schedule anchors

Outcome schedules() {
  bool ok = true;
  std::string detail;
  for (std::uint64_t total : {200u, 1440u, 7u}) {
    const EMASchedule ema{0.9996, 0.99996, total};
    ok = ok && ema_delta(ema, 0) == 0.9996 && ema_delta(ema, total) == 0.99996;
    for (double wf : {0.1, 0.3}) {
      const ndgrad::OneCycleSchedule oc{1e-3, total, wf, 25.0, 1e4};
      ok = ok && ndgrad::onecycle_lr(oc, 0.0) == 1e-3 / 25.0;
      ok = ok && ndgrad::onecycle_lr(oc, wf * static_cast<double>(total)) == 1e-3;
      ok = ok && ndgrad::onecycle_lr(oc, static_cast<double>(total)) == 1e-3 / 1e4;
    }
  }
  const EMASchedule ema{0.9996, 0.99996, 200};
  detail = "delta(0)=" + num(ema_delta(ema, 0), 17) + " delta(total)=" + num(ema_delta(ema, 200), 17) +
           ", onecycle start/peak/end exact";
  return verdict(ok, detail);
}

// ---------------------------------------------------------------------------
// 4. Masking statistics

Outcome masking() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::size_t> lengths(8, 200);
  bool ok = true;
  std::string detail;
  for (double p : {0.1, 0.3, 0.5}) {
    MaskConfig cfg;
    cfg.mask_prob = p;
    const double upper = p + static_cast<double>(cfg.max_block_len(200)) / (8.0 * 200.0);
    Rng rng(static_cast<std::uint64_t>(p * 1000));
    double lo = 1.0, hi = 0.0;
    std::size_t bad = 0;
    for (int draw = 0; draw < 1000; ++draw) {
      const auto plans = sample_mask_plan(lengths, cfg, rng);
      const double f = batch_masked_fraction(plans);
      lo = std::min(lo, f);
      hi = std::max(hi, f);
      bool formed = f > p && f <= upper;
      for (const auto& plan : plans) {
        formed = formed && plan.well_formed() && plan.series_length == 200;
        for (const auto& iv : plan.intervals) formed = formed && iv.length > 0 && iv.end() <= 200;
      }
      bad += !formed;
    }
    ok = ok && bad == 0;
    detail += "p=" + num(p) + " range [" + num(lo) + "," + num(hi) + "] bound " + num(upper) + " bad " +
              std::to_string(bad) + "; ";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 30.0;
  return verdict(ok, detail + num(secs, 3) + " s");
}

// ---------------------------------------------------------------------------
// Shared desk-scale classification run

struct ClassificationRun {
  PreparedData data;
  RunConfig cfg;
  PretrainResult result;
  double seconds = 0.0;
};

ClassificationRun classification_run(const fs::path& dir, double mask_prob = 0.5) {
  Rng rng(5);
  write_labeled_tsv(synth_classification(3, 150, 256, 0.3, rng), dir / "synth_TRAIN.tsv");
  write_labeled_tsv(synth_classification(3, 150, 256, 0.3, rng, "test"), dir / "synth_TEST.tsv");
  ClassificationRun run;
  run.cfg.encoder.width = 64;
  run.cfg.train.mask.mask_prob = mask_prob;
  run.cfg.probe = false;
  run.data = prepare_data(run.cfg, (dir / "synth_TRAIN.tsv").string());
  const auto t0 = std::chrono::steady_clock::now();
  run.result = pretrain(run.cfg, run.data, {(dir / "run").string(), {}, {}, {}});
  run.seconds = seconds_since(t0);
  return run;
}

// ---------------------------------------------------------------------------
// 5. Desk-scale classification

Outcome classification() {
  const auto dir = scratch("classification");
  const auto t0 = std::chrono::steady_clock::now();
  auto run = classification_run(dir);
  const auto ck = load_checkpoint(run.result.checkpoint);
  const double trained = probe_classification(ck.state.teacher, run.data, run.cfg).accuracy;
  const auto init = make_train_state(run.cfg, 1, run.result.total_steps);
  const double untrained = probe_classification(init.teacher, run.data, run.cfg).accuracy;
  const double secs = seconds_since(t0);
  const bool steps_ok = run.result.step == total_steps_for(256, 600.0) && run.result.exit_code == 0;
  const bool ok = steps_ok && trained >= 0.95 && trained - untrained >= 0.20 && secs < 600.0;
  return verdict(ok, std::to_string(run.result.step) + " steps, accuracy " + num(trained) + " (>= 0.95 " +
                         (trained >= 0.95 ? "met" : "missed") + "), untrained " + num(untrained) + ", gain " +
                         num(trained - untrained) + " (>= 0.20 " + (trained - untrained >= 0.20 ? "met" : "missed") +
                         "), " + num(secs, 3) + " s");
}

// ---------------------------------------------------------------------------
// 6. Desk-scale forecasting

Outcome forecasting() {
  const auto dir = scratch("forecasting");
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(6);
  write_forecast_csv(synth_sine_forecast(4000, 50.0, 0.1, rng), (dir / "sine.csv").string(), {"value"});
  RunConfig cfg;
  cfg.task = Task::forecasting;
  cfg.encoder.width = 64;
  cfg.context_len = 200;
  cfg.horizons = {24};
  cfg.probe = false;
  // Steps follow the length of one training crop.
  cfg.total_steps = total_steps_for(cfg.context_len, cfg.steps_per_kilostep, cfg.min_steps);
  const auto data = prepare_data(cfg, (dir / "sine.csv").string());
  const auto res = pretrain(cfg, data, {(dir / "run").string(), {}, {}, {}});
  const auto ck = load_checkpoint(res.checkpoint);
  const auto rep = probe_forecast(ck.state.teacher, data, cfg, {24});
  const double secs = seconds_since(t0);
  const auto& r = rep.rows[0];
  const bool ok = res.exit_code == 0 && r.mse <= 0.7 * r.baseline_mse && secs < 600.0;
  return verdict(ok, std::to_string(res.step) + " steps, H=24 test MSE " + num(r.mse) + " vs carry-forward " +
                         num(r.baseline_mse) + " (ratio " + num(r.mse / r.baseline_mse) + ", need <= 0.7), " +
                         num(secs, 3) + " s");
}

// ---------------------------------------------------------------------------
// 7. Archive spot-check, only with a supplied file

Outcome archive() {
  const char* path = std::getenv("TSDISTILL_CHINATOWN");
  if (!path || !*path) return {Outcome::skip, "set TSDISTILL_CHINATOWN to Chinatown_TRAIN.tsv to run"};
  if (!companion_test_path(path)) return verdict(false, std::string("no _TEST companion next to ") + path);
  const auto dir = scratch("archive");
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  cfg.probe = false;
  const auto data = prepare_data(cfg, path);
  const auto res = pretrain(cfg, data, {(dir / "run").string(), {}, {}, {}});
  const auto ck = load_checkpoint(res.checkpoint);
  const double acc = probe_classification(ck.state.teacher, data, cfg).accuracy;
  const double secs = seconds_since(t0);
  return verdict(res.exit_code == 0 && acc >= 0.90 && secs < 900.0,
                 std::to_string(res.step) + " steps, test accuracy " + num(acc) + " (need >= 0.90), " + num(secs, 3) +
                     " s");
}

// ---------------------------------------------------------------------------
// 8. No-signal and anti-collapse controls

Outcome controls() {
  const auto dir = scratch("controls");
  RunConfig cfg;
  cfg.encoder.width = 64;
  cfg.train.mask.mask_prob = 0.0;
  cfg.total_steps = 100;
  cfg.probe = false;
  Rng rng(5);
  write_labeled_tsv(synth_classification(3, 150, 256, 0.3, rng), dir / "synth_TRAIN.tsv");
  const auto data = prepare_data(cfg, (dir / "synth_TRAIN.tsv").string());
  const auto res = pretrain(cfg, data, {(dir / "p0").string(), {}, {}, {}});
  const auto ck = load_checkpoint(res.checkpoint);
  auto init = make_train_state(cfg, 1, cfg.total_steps);
  std::size_t changed = 0;
  const auto a = ck.state.student.parameters();
  const auto b = init.student.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) changed += !(a[i]->value == b[i]->value);
  const bool frozen = res.step == 100 && changed == 0;

  const auto run = classification_run(scratch("controls_defaults"));
  double min_collapse = INFINITY;
  for (const auto& row : read_metrics(run.result.metrics)) min_collapse = std::min(min_collapse, std::stod(row[5]));
  const bool lively = run.result.exit_code == 0 && min_collapse > 0.05;
  return verdict(frozen && lively, "p=0: " + std::to_string(changed) + " of " + std::to_string(a.size()) +
                                       " student arrays changed after " + std::to_string(res.step) +
                                       " steps; defaults: min collapse metric " + num(min_collapse) + " over " +
                                       std::to_string(run.result.step) + " steps (need > 0.05)");
}

// ---------------------------------------------------------------------------
// 9. Determinism and resume, through the command-line tool

int shell(const std::string& cmd) {
  const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string metrics_without_time(const fs::path& p) {
  std::string out;
  for (auto row : read_metrics(p.string())) {
    row.pop_back();
    for (const auto& c : row) out += c + ",";
    out += "\n";
  }
  return out;
}

Outcome determinism() {
  const auto dir = scratch("determinism");
  const std::string cli = TSDISTILL_CLI;
  const std::string data = (dir / "d_TRAIN.tsv").string();
  bool ok = shell(cli + " synth --kind cls --n 30 --length 256 --out " + data + " --test-out " +
                  (dir / "d_TEST.tsv").string()) == 0;
  const std::string common = " --data " + data + " --set width=64 --set total_steps=16 --set probe_every=6 --quiet";
  ok = ok && shell(cli + " pretrain --out " + (dir / "a").string() + common) == 0;
  ok = ok && shell(cli + " pretrain --out " + (dir / "b").string() + common) == 0;
  ok = ok && shell(cli + " pretrain --out " + (dir / "c").string() + common + " --stop-after 7") == 0;
  ok = ok && shell(cli + " pretrain --data " + data + " --quiet --out " + (dir / "c").string() + " --resume " +
                   (dir / "c" / "checkpoint.ckpt").string()) == 0;
  if (!ok) return verdict(false, "command-line runs failed");
  const auto ma = metrics_without_time(dir / "a" / "metrics.csv");
  const bool rerun_logs = ma == metrics_without_time(dir / "b" / "metrics.csv");
  const bool rerun_ckpt = slurp(dir / "a" / "checkpoint.ckpt") == slurp(dir / "b" / "checkpoint.ckpt");
  const bool resume_logs = ma == metrics_without_time(dir / "c" / "metrics.csv");
  const bool resume_ckpt = slurp(dir / "a" / "checkpoint.ckpt") == slurp(dir / "c" / "checkpoint.ckpt");
  auto yn = [](bool b) { return b ? "identical" : "DIFFERENT"; };
  return verdict(rerun_logs && rerun_ckpt && resume_logs && resume_ckpt,
                 std::string("rerun log ") + yn(rerun_logs) + ", rerun checkpoint " + yn(rerun_ckpt) +
                     ", resumed log " + yn(resume_logs) + ", resumed checkpoint " + yn(resume_ckpt));
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria{
      {1, {"gradient suite", gradients}},
      {2, {"oracle equivalence", oracles}},
      {3, {"schedule exactness", schedules}},
      {4, {"masking statistics", masking}},
      {5, {"desk-scale classification", classification}},
      {6, {"desk-scale forecasting", forecasting}},
      {7, {"archive spot-check", archive}},
      {8, {"anti-collapse and no-signal controls", controls}},
      {9, {"determinism and resume", determinism}},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--criterion" && i + 1 < argc) {
      selected.push_back(std::atoi(argv[++i]));
    } else {
      std::cerr << "usage: acceptance [--criterion N]...\n";
      return 64;
    }
  }
  if (selected.empty())
    for (const auto& [n, c] : criteria) selected.push_back(n);

  int failed = 0, skipped = 0;
  for (int n : selected) {
    const auto it = criteria.find(n);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << n << '\n';
      return 64;
    }
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o = {Outcome::fail, std::string("threw: ") + e.what()};
    }
    const char* tag = o.status == Outcome::pass ? "PASS" : o.status == Outcome::skip ? "SKIP" : "FAIL";
    std::cout << "[" << tag << "] criterion " << n << " " << it->second.first << ": " << o.detail << std::endl;
    failed += o.status == Outcome::fail;
    skipped += o.status == Outcome::skip;
  }
  if (failed) return 1;
  return skipped == static_cast<int>(selected.size()) ? 77 : 0;
}
