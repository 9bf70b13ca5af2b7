#pragma once

// Experiment configuration: a key=value text file whose settings are
// overridden by command-line flags. Both go through apply_setting.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "cdd/error.hpp"
#include "cdd/losses.hpp"
#include "cdd/stream.hpp"
#include "cdd/trainer.hpp"

namespace cdd {

struct ExperimentConfig {
  std::optional<ScenarioKind> scenario;
  std::vector<std::string> data;  // one dataset file per task, in stream order
  std::string profile = "distill";
  System system = System::MC;
  std::optional<AggregationRule> aggregation;
  std::size_t memory = 1500;
  std::vector<std::uint64_t> seeds;  // empty: CDD_SEED, else 0
  std::string out = "run";
  std::size_t jobs = 1;
  std::optional<double> lambda;
  std::optional<double> label_smoothing;
  std::optional<double> mixup_alpha;
  TrainConfig train = default_train();
  SynthOptions synth;

  /// Training defaults used by the CLI and the acceptance runs.
  static TrainConfig default_train() {
    TrainConfig t;
    t.epochs = 10;
    t.base_lr = 0.01;
    t.later_lr_factor = 1.0;
    return t;
  }

  void validate() const {
    if (scenario.has_value() == !data.empty())
      throw ValidationError("exactly one of a scenario or dataset paths is required");
    if ((system == System::MT) != aggregation.has_value())
      throw ValidationError(system == System::MT ? "system mt requires an aggregation rule"
                                                 : "an aggregation rule is only valid with system mt");
    if (jobs == 0) throw ValidationError("jobs must be >= 1");
    train.validate();
    method().validate(system);
  }

  MethodProfile method() const {
    MethodProfile p = lookup_profile(profile, system);
    if (aggregation) p.rule = *aggregation;
    if (lambda) p.weights.lambda = *lambda;
    if (label_smoothing) p.label_smoothing = *label_smoothing;
    if (mixup_alpha) p.mixup_alpha = *mixup_alpha;
    return p;
  }

  TrainConfig train_for(std::uint64_t seed) const {
    TrainConfig t = train;
    t.system = system;
    t.seed = seed;
    t.memory_budget = memory;
    return t;
  }

  std::vector<std::uint64_t> resolved_seeds() const {
    if (!seeds.empty()) return seeds;
    if (const char* env = std::getenv("CDD_SEED"); env && *env) {
      std::uint64_t s = 0;
      if (!detail::parse_number(std::string_view(env), s)) throw ValidationError("CDD_SEED is not an unsigned integer");
      return {s};
    }
    return {0};
  }
};

namespace detail {

template <typename T>
T parse_setting(const std::string& key, const std::string& value) {
  T out{};
  if (!parse_number(std::string_view(value), out)) throw ValidationError("bad value for " + key + ": '" + value + "'");
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  if (value.empty()) return out;
  for (auto f : split_fields(value)) out.push_back(parse_setting<T>(key, std::string(f)));
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Sets one named field. Unknown keys and malformed values are validation errors.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_list;
  using detail::parse_setting;
  try {
    if (key == "scenario") c.scenario = parse_scenario_kind(value);
    else if (key == "data") {
      c.data.clear();
      for (auto f : detail::split_fields(value))
        if (!f.empty()) c.data.emplace_back(f);
    }
    else if (key == "profile") c.profile = value;
    else if (key == "system") c.system = parse_system(value);
    else if (key == "aggregation") c.aggregation = parse_aggregation(value);
    else if (key == "memory") c.memory = parse_setting<std::size_t>(key, value);
    else if (key == "seed") c.seeds = parse_list<std::uint64_t>(key, value);
    else if (key == "out") c.out = value;
    else if (key == "jobs") c.jobs = parse_setting<std::size_t>(key, value);
    else if (key == "lambda") c.lambda = parse_setting<double>(key, value);
    else if (key == "label_smoothing") c.label_smoothing = parse_setting<double>(key, value);
    else if (key == "mixup_alpha") c.mixup_alpha = parse_setting<double>(key, value);
    else if (key == "epochs") c.train.epochs = parse_setting<std::size_t>(key, value);
    else if (key == "lr") c.train.base_lr = parse_setting<double>(key, value);
    else if (key == "later_lr_factor") c.train.later_lr_factor = parse_setting<double>(key, value);
    else if (key == "milestones") c.train.milestones = parse_list<std::size_t>(key, value);
    else if (key == "decay_divisor") c.train.decay_divisor = parse_setting<double>(key, value);
    else if (key == "batch_size") c.train.batch_size = parse_setting<std::size_t>(key, value);
    else if (key == "capture_layer") c.train.capture_layer = parse_setting<std::size_t>(key, value);
    else if (key == "freeze_below_capture") {
      if (value != "true" && value != "false") throw ValidationError("freeze_below_capture must be true or false");
      c.train.freeze_below_capture = value == "true";
    }
    else if (key == "hidden") c.train.hidden = parse_list<std::size_t>(key, value);
    else if (key == "feature_width") c.train.feature_width = parse_setting<std::size_t>(key, value);
    else if (key == "dim") c.synth.dim = parse_setting<std::size_t>(key, value);
    else if (key == "train_count") c.synth.counts.train = parse_setting<std::size_t>(key, value);
    else if (key == "val_count") c.synth.counts.val = parse_setting<std::size_t>(key, value);
    else if (key == "test_count") c.synth.counts.test = parse_setting<std::size_t>(key, value);
    else throw ValidationError("unknown setting '" + key + "'");
  } catch (const ConfigError& e) {
    throw ValidationError(e.what());
  }
}

/// Reads `key = value` lines; '#' starts a comment.
inline void apply_config_file(ExperimentConfig& c, std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(lineno, "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ParseError(lineno, "empty key");
    try {
      apply_setting(c, key, detail::trim(line.substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ParseError(lineno, e.what());
    }
  }
}

inline void apply_config_file(ExperimentConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path);
  apply_config_file(c, in);
}

}  // namespace cdd
