#pragma once

// Command-line front end: run, eval and verify. Exit codes are 0 on success,
// 1 on runtime failure and 2 on usage or validation failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "cdd/checkpoint.hpp"
#include "cdd/config.hpp"
#include "cdd/report.hpp"
#include "cdd/trainer.hpp"
#include "cdd/verify.hpp"

namespace cdd {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Writes every artifact of a finished run into `dir`.
inline MetricReport write_run(const fs::path& dir, const RunRecord& rec) {
  fs::create_directories(dir);
  std::ostringstream matrix, preds, curves, timing, ckpt;
  write_accuracy_matrix(matrix, rec.accuracy, rec.task_ids);
  write_predictions(preds, rec.final_predictions);
  const MetricReport report = compute_report(rec.accuracy, rec.task_ids, &rec.final_predictions);
  write_pr_curves(curves, report.aps);
  timing << "step,seconds,stored_exemplars\n";
  for (std::size_t i = 0; i < rec.session_seconds.size(); ++i)
    timing << i << ',' << format_double(rec.session_seconds[i]) << ',' << rec.memory_totals[i] << '\n';
  save_checkpoint(ckpt, rec.learner);

  write_text(dir / "accuracy_matrix.csv", matrix.str());
  write_text(dir / "predictions.csv", preds.str());
  write_text(dir / "pr_curves.csv", curves.str());
  write_text(dir / "config.json", config_json(rec.config).dump(2) + "\n");
  write_text(dir / "metrics.json", metrics_text(report, rec.config));
  write_text(dir / "timing.csv", timing.str());
  write_text(dir / "checkpoint.txt", ckpt.str());
  return report;
}

/// Recomputes the metrics of a run directory, or of a bare matrix file.
inline std::pair<MetricReport, ConfigEcho> evaluate_artifacts(const fs::path& path) {
  const bool is_dir = fs::is_directory(path);
  const fs::path matrix_path = is_dir ? path / "accuracy_matrix.csv" : path;
  std::ifstream min(matrix_path);
  if (!min) throw ValidationError("cannot open " + matrix_path.string());
  MatrixFile mf;
  try {
    mf = read_accuracy_matrix(min);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), matrix_path.filename().string() + ": " + e.what());
  }
  std::optional<std::vector<Prediction>> log;
  ConfigEcho echo;
  if (is_dir) {
    if (std::ifstream pin(path / "predictions.csv"); pin) log = read_predictions(pin);
    if (std::ifstream cin(path / "config.json"); cin) echo = read_config_json(cin);
  }
  return {compute_report(mf.matrix, mf.task_ids, log ? &*log : nullptr), echo};
}

/// Runs one seed of an experiment and writes its directory.
inline std::string run_one(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const TrainConfig train = cfg.train_for(seed);
  const MethodProfile profile = cfg.method();
  RunRecord rec;
  if (cfg.scenario) {
    rec = run_scenario(build_scenario(*cfg.scenario, seed, cfg.synth), profile, train);
  } else {
    std::vector<SessionData> sessions;
    for (const auto& p : cfg.data) {
      try {
        sessions.push_back(load_dataset(p));
      } catch (const ParseError& e) {
        throw ParseError(e.line(), p + ": " + e.what());
      }
    }
    rec = run_stream(sessions, std::nullopt, profile, train);
  }
  const MetricReport report = write_run(dir, rec);
  std::ostringstream s;
  s << "seed " << seed << " -> " << dir.string() << '\n' << metrics_table(report);
  if (!rec.diagonal_above_majority) s << "warning: a diagonal accuracy fell below the majority-class rate\n";
  return s.str();
}

inline int cmd_run(const ExperimentConfig& cfg, std::ostream& out) {
  cfg.validate();
  const auto seeds = cfg.resolved_seeds();
  std::vector<std::string> summaries(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  auto dir_for = [&](std::size_t i) {
    return seeds.size() == 1 ? fs::path(cfg.out) : fs::path(cfg.out) / ("seed_" + std::to_string(seeds[i]));
  };
  auto work = [&](std::size_t i) {
    try {
      summaries[i] = run_one(cfg, seeds[i], dir_for(i));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t jobs = std::min(cfg.jobs, seeds.size());
  if (jobs <= 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) work(i);
  } else {
    std::mutex m;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w) {
      pool.emplace_back([&] {
        while (true) {
          std::size_t i;
          {
            std::lock_guard lock(m);
            if (next == seeds.size()) return;
            i = next++;
          }
          work(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out << summaries[i];
  }
  return kExitOk;
}

inline int cmd_eval(const std::string& path, bool as_json, std::ostream& out) {
  const auto [report, echo] = evaluate_artifacts(path);
  if (as_json) {
    out << metrics_text(report, echo);
  } else {
    out << metrics_table(report);
  }
  return kExitOk;
}

inline int cmd_verify(std::uint64_t seed, std::ostream& out) {
  std::size_t failed = 0;
  const auto results = run_verification(seed);
  for (const auto& r : results) {
    out << (r.passed ? "PASS  " : "FAIL  ") << r.name << "  " << r.detail << '\n';
    failed += !r.passed;
  }
  out << (results.size() - failed) << "/" << results.size() << " checks passed\n";
  return failed == 0 ? kExitOk : kExitRuntime;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Continual deepfake detection benchmark engine"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train a method through a task stream and write its artifacts");
  std::string config_path;
  std::vector<std::string> data, seeds;
  std::optional<std::string> scenario, profile, system, aggregation, memory, epochs, out_dir, jobs, lambda, lr;
  std::vector<std::string> sets;
  run->add_option("--config", config_path, "key = value settings file (flags override it)");
  run->add_option("--scenario", scenario, "easy | hard | long");
  run->add_option("--data", data, "dataset CSV files, one task each, in stream order");
  run->add_option("--profile", profile, "finetune | replay | replay+kd | distill | rebalance");
  run->add_option("--system", system, "bc | mc | mt");
  run->add_option("--aggregation", aggregation, "sumlog | sumlogit | sumfeat | max (mt only)");
  run->add_option("--memory", memory, "exemplar budget (0 disables memory)");
  run->add_option("--seed", seeds, "one or more seeds (default: CDD_SEED, else 0)");
  run->add_option("--epochs", epochs, "epochs per session");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--jobs", jobs, "parallel seeds");
  run->add_option("--lambda", lambda, "MT weight of the aggregated binary term");
  run->add_option("--lr", lr, "base learning rate");
  run->add_option("--set", sets, "extra key=value setting, repeatable");

  auto* eval = app.add_subcommand("eval", "recompute metrics from a run directory or matrix file");
  std::string eval_path;
  bool as_json = false;
  eval->add_option("path", eval_path, "run directory or accuracy_matrix.csv")->required();
  eval->add_flag("--json", as_json, "print metrics.json content instead of a table");

  auto* ver = app.add_subcommand("verify", "run the built-in verification battery");
  std::uint64_t verify_seed = 0;
  ver->add_option("--seed", verify_seed, "seed for the randomized checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*run) {
      ExperimentConfig cfg;
      if (!config_path.empty()) apply_config_file(cfg, config_path);
      auto set = [&](const char* key, const std::optional<std::string>& v) {
        if (v) apply_setting(cfg, key, *v);
      };
      set("scenario", scenario);
      set("profile", profile);
      set("system", system);
      set("aggregation", aggregation);
      set("memory", memory);
      set("epochs", epochs);
      set("out", out_dir);
      set("jobs", jobs);
      set("lambda", lambda);
      set("lr", lr);
      if (!data.empty()) cfg.data = data;
      if (!seeds.empty()) {
        std::string joined;
        for (const auto& s : seeds) joined += (joined.empty() ? "" : ",") + s;
        apply_setting(cfg, "seed", joined);
      }
      for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
        apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
      }
      return cmd_run(cfg, out);
    }
    if (*eval) return cmd_eval(eval_path, as_json, out);
    return cmd_verify(verify_seed, out);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const LookupError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace cdd
