// Command-line front end: dataset generation, pretraining, linear evaluation,
// the supervised baseline, the alpha sweep and a plain-text report.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "histoperm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace histoperm;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
};

RunConfig resolve_config(const CommonArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.dataset.empty()) cfg.dataset = a.dataset;
  cfg.validate();
  return cfg;
}

fs::path require_out(const CommonArgs& a) {
  if (a.out.empty()) throw ConfigError("--out DIR is required");
  return a.out;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

json epoch_log_json(const std::vector<EpochLog>& log) {
  json out = json::array();
  for (const auto& e : log) out.push_back({{"epoch", e.epoch}, {"split", e.split}, {"loss", e.loss}, {"accuracy", e.accuracy}});
  return out;
}

/// Writes each artifact and returns name -> checksum for the run record.
json write_artifacts(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& files) {
  json sums = json::object();
  for (const auto& [name, bytes] : files) {
    write_text(dir / name, bytes);
    sums[name] = checksum_hex(bytes);
  }
  return sums;
}

void write_record(const fs::path& dir, const std::string& command, const RunConfig& cfg, json epochs, json metrics,
                  json checksums, double seconds, const std::vector<std::string>& warnings = {}) {
  json rec = {{"command", command},  {"config", config_to_json(cfg)}, {"epochs", std::move(epochs)},
              {"metrics", metrics},  {"checksums", checksums},        {"warnings", warnings},
              {"wall_clock_seconds", seconds}};
  write_text(dir / "run_record.json", rec.dump(2) + "\n");
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(a.config);
  if (a.seed) cfg.generator.seed = *a.seed;
  cfg.generator.validate();  // before anything touches the disk
  const fs::path out = require_out(a);
  const Dataset ds = generate_dataset(cfg.generator, cfg.workers);
  write_dataset(ds, out);
  std::printf("wrote %zu/%zu/%zu slides to %s\n", ds.train.size(), ds.dev.size(), ds.test.size(),
              out.string().c_str());
  return 0;
}

int cmd_pretrain(const CommonArgs& a) {
  const RunConfig cfg = resolve_config(a);
  const fs::path out = require_out(a);
  Stopwatch clock;
  const Dataset ds = resolve_dataset(cfg);
  const PretrainOutput p = pretrain(ds, cfg);
  json epochs = json::array();
  for (const auto& [e, loss] : p.epoch_loss) epochs.push_back({{"epoch", e}, {"loss", loss}});
  const json sums = write_artifacts(out, {{"state.bin", serialize_state(p.state)}, {"pretrain_log.csv", pretrain_csv(p)}});
  write_record(out, "pretrain", cfg, epochs, json::object(), sums, clock.seconds(), p.warnings);
  std::printf("pretrained %s for %zu steps; final epoch loss %.6f\n", method_name(cfg.method).c_str(),
              p.steps.size(), p.epoch_loss.empty() ? 0.0 : p.epoch_loss.back().second);
  return 0;
}

json eval_metrics(const SplitEvaluation& dev, const SplitEvaluation& test, const Dataset& ds) {
  return {{"dev", split_eval_json(dev, ds.dev)}, {"test", split_eval_json(test, ds.test)}};
}

int cmd_linear_eval(const CommonArgs& a, const std::string& state_path) {
  const RunConfig cfg = resolve_config(a);
  const fs::path out = require_out(a);
  if (state_path.empty()) throw ConfigError("--state PATH is required");
  Stopwatch clock;
  const LoadedState state = deserialize_state(read_text(state_path));
  const Dataset ds = resolve_dataset(cfg);
  const auto ev = linear_eval(ds, state.network("encoder"), cfg);
  const json metrics = eval_metrics(ev.dev, ev.test, ds);
  const json sums = write_artifacts(out, {{"metrics_dev.json", dump(metrics["dev"])},
                                          {"metrics_test.json", dump(metrics["test"])},
                                          {"probe_log.csv", epoch_csv(ev.log)}});
  write_record(out, "linear-eval", cfg, epoch_log_json(ev.log), metrics, sums, clock.seconds());
  std::printf("test patch accuracy %.4f, slide accuracy %.4f\n", ev.test.patch.accuracy, ev.test.slide.accuracy);
  return 0;
}

int cmd_supervised(const CommonArgs& a) {
  const RunConfig cfg = resolve_config(a);
  const fs::path out = require_out(a);
  Stopwatch clock;
  const Dataset ds = resolve_dataset(cfg);
  const auto r = supervised_run(ds, cfg);
  const json metrics = eval_metrics(r.dev, r.test, ds);
  const json sums = write_artifacts(out, {{"metrics_dev.json", dump(metrics["dev"])},
                                          {"metrics_test.json", dump(metrics["test"])},
                                          {"train_log.csv", epoch_csv(r.log)}});
  write_record(out, "supervised", cfg, epoch_log_json(r.log), metrics, sums, clock.seconds());
  std::printf("test patch accuracy %.4f, slide accuracy %.4f\n", r.test.patch.accuracy, r.test.slide.accuracy);
  return 0;
}

int cmd_sweep(const CommonArgs& a, unsigned workers, std::size_t stop_after) {
  RunConfig cfg = resolve_config(a);
  const fs::path out = require_out(a);
  Stopwatch clock;
  const Dataset ds = resolve_dataset(cfg);
  SweepOptions opts;
  opts.workers = workers ? workers : cfg.workers;
  opts.stop_after = stop_after;
  const SweepOutcome r = run_sweep(ds, cfg, out, opts);
  if (!r.complete) {
    std::printf("sweep paused: %zu runs computed, %zu reused; rerun the same command to resume\n", r.computed,
                r.reused);
    return 0;
  }
  json sums = {{"sweep.csv", checksum_hex(r.csv)}};
  write_record(out, "sweep-alpha", cfg, json::array(), {{"runs", r.computed + r.reused}}, sums, clock.seconds());
  std::fputs(r.csv.c_str(), stdout);
  return 0;
}

// ---------------------------------------------------------------------------
// report

std::string cell(const json& v) {
  if (v.is_null()) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v.get<double>());
  return buf;
}

void report_metrics(const fs::path& dir) {
  std::printf("%-6s %-6s %9s %9s %9s\n", "split", "level", "accuracy", "f1_macro", "auc_ovr");
  for (const char* split : {"dev", "test"}) {
    const fs::path f = dir / (std::string("metrics_") + split + ".json");
    if (!fs::exists(f)) continue;
    const json m = json::parse(read_text(f));
    for (const char* level : {"patch", "slide"}) {
      const json& r = m.at(level);
      std::printf("%-6s %-6s %9s %9s %9s\n", split, level, cell(r.at("accuracy")).c_str(),
                  cell(r.at("f1_macro")).c_str(), cell(r.at("auc_ovr_macro")).c_str());
    }
  }
}

void report_sweep(const fs::path& dir) {
  const std::string csv = read_text(dir / "sweep.csv");
  std::printf("%-6s %12s %12s %12s\n", "alpha", "dev_patch", "test_patch", "test_slide");
  std::size_t pos = csv.find('\n') + 1;
  while (pos < csv.size()) {
    const std::size_t end = csv.find('\n', pos);
    const std::string line = csv.substr(pos, end - pos);
    pos = end + 1;
    std::vector<std::string> f;
    std::size_t s = 0;
    while (true) {
      const std::size_t c = line.find(',', s);
      f.push_back(line.substr(s, c - s));
      if (c == std::string::npos) break;
      s = c + 1;
    }
    if (f.size() == 9 && f[1] == "mean") {
      std::printf("%-6s %12s %12s %12s\n", f[0].c_str(), f[2].c_str(), f[5].c_str(), f[8].c_str());
    }
  }
}

int cmd_report(const std::string& in) {
  if (in.empty()) throw ConfigError("--in DIR is required");
  const fs::path dir = in;
  bool any = false;
  if (fs::exists(dir / "run_record.json")) {
    const json rec = json::parse(read_text(dir / "run_record.json"));
    std::printf("command: %s  method: %s  seed: %llu  wall clock: %.1f s\n", rec.at("command").get<std::string>().c_str(),
                rec.at("config").at("method").get<std::string>().c_str(),
                static_cast<unsigned long long>(rec.at("config").at("seed").get<std::uint64_t>()),
                rec.at("wall_clock_seconds").get<double>());
    any = true;
  }
  if (fs::exists(dir / "metrics_test.json")) {
    report_metrics(dir);
    any = true;
  }
  if (fs::exists(dir / "sweep.csv")) {
    report_sweep(dir);
    any = true;
  } else if (fs::exists(dir / "sweep.resume")) {
    std::printf("sweep incomplete (resume marker present)\n");
    any = true;
  }
  if (!any) throw IoError("nothing to report in '" + dir.string() + "'");
  return 0;
}

void add_common(CLI::App* sub, CommonArgs& a, bool with_dataset = true) {
  sub->add_option("--config", a.config, "JSON config file (missing keys take the defaults)");
  sub->add_option("--seed", a.seed, "Override the run seed");
  sub->add_option("--out", a.out, "Output directory");
  if (with_dataset) sub->add_option("--dataset", a.dataset, "Dataset directory (overrides the config)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HistoPerm: permuted-view self-supervised pretraining on synthetic weakly labeled patches"};
  app.require_subcommand(0, 1);
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "Print the full default config and exit");

  CommonArgs common;
  std::string state_path, report_in;
  unsigned workers = 0;
  std::size_t stop_after = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  add_common(gen, common, false);
  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining");
  add_common(pre, common);
  auto* lin = app.add_subcommand("linear-eval", "Linear probe on a frozen pretrained encoder");
  add_common(lin, common);
  lin->add_option("--state", state_path, "state.bin written by pretrain")->required();
  auto* sup = app.add_subcommand("supervised", "End-to-end supervised baseline");
  add_common(sup, common);
  auto* sweep = app.add_subcommand("sweep-alpha", "Pretrain + linear-eval over the configured alpha values");
  add_common(sweep, common);
  sweep->add_option("--workers", workers, "Concurrent runs (default: config workers)");
  sweep->add_option("--stop-after", stop_after, "Stop after computing this many runs (resume later)");
  auto* rep = app.add_subcommand("report", "Summarize a run or sweep directory");
  rep->add_option("--in", report_in, "Run or sweep output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (print_defaults) {
      std::fputs(default_config_text().c_str(), stdout);
      return 0;
    }
    if (*gen) return cmd_gen_data(common);
    if (*pre) return cmd_pretrain(common);
    if (*lin) return cmd_linear_eval(common, state_path);
    if (*sup) return cmd_supervised(common);
    if (*sweep) return cmd_sweep(common, workers, stop_after);
    if (*rep) return cmd_report(report_in);
    std::fputs(app.help().c_str(), stderr);
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const json::exception& e) {
    std::fprintf(stderr, "error: malformed JSON: %s\n", e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
