#pragma once

// Incremental session protocol: snapshot, expand, train on new data plus
// exemplars, refresh memory, evaluate every task seen so far.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cdd/error.hpp"
#include "cdd/losses.hpp"
#include "cdd/memory.hpp"
#include "cdd/metrics.hpp"
#include "cdd/model.hpp"
#include "cdd/optim.hpp"
#include "cdd/rng.hpp"
#include "cdd/stream.hpp"

namespace cdd {

/// A continual-learning method expressed as loss weights and replay choices.
struct MethodProfile {
  std::string name;
  LossWeights weights;
  DistillForm distill = DistillForm::None;
  PayloadKind payload = PayloadKind::Raw;
  HeadVariant head = HeadVariant::LinFC;
  AggregationRule rule = AggregationRule::SumLogit;
  bool uses_memory = true;
  double label_smoothing = 0.0;  // 0 disables
  double mixup_alpha = 0.0;      // 0 disables

  void validate(System system) const {
    weights.validate();
    if ((distill == DistillForm::None) != (weights.gamma_d == 0.0))
      throw ConfigError("profile " + name + ": distillation form 'none' iff gamma_d = 0");
    if (head == HeadVariant::SigmoidBinary && weights.gamma_m != 0.0)
      throw ConfigError("profile " + name + ": the binary head carries no supplementary loss (gamma_m must be 0)");
    if ((head == HeadVariant::SigmoidBinary) != (system == System::BC))
      throw ConfigError("profile " + name + ": head " + to_string(head) + " does not match system " + to_string(system));
    if (mixup_alpha > 0.0 && payload == PayloadKind::Latent)
      throw ConfigError("profile " + name + ": mixup operates on raw inputs and cannot be combined with latent replay");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label smoothing must lie in [0, 1)");
    if (!(mixup_alpha >= 0.0)) throw ConfigError("mixup alpha must be >= 0");
  }
};

/// Built-in method profiles for one learning system:
///   finetune   no memory, no distillation
///   replay     latent replay only
///   replay+kd  latent replay with logit distillation (gamma_d 0.3)
///   distill    raw exemplars with logit distillation (gamma_d 1, T 1)
///   rebalance  cosine head, feature distillation (gamma_d 0.5) and margin
///              ranking (gamma_m 0.1, tau 0.2, J 2)
inline std::map<std::string, MethodProfile> builtin_profiles(System system) {
  const bool bc = system == System::BC;
  const HeadVariant lin = bc ? HeadVariant::SigmoidBinary : HeadVariant::LinFC;
  const HeadVariant cos = bc ? HeadVariant::SigmoidBinary : HeadVariant::CosFC;
  std::map<std::string, MethodProfile> out;

  MethodProfile finetune;
  finetune.name = "finetune";
  finetune.head = lin;
  finetune.uses_memory = false;
  out[finetune.name] = finetune;

  MethodProfile replay;
  replay.name = "replay";
  replay.head = lin;
  replay.payload = PayloadKind::Latent;
  out[replay.name] = replay;

  MethodProfile replay_kd = replay;
  replay_kd.name = "replay+kd";
  replay_kd.weights.gamma_d = 0.3;
  replay_kd.distill = DistillForm::Logit;
  out[replay_kd.name] = replay_kd;

  MethodProfile distill;
  distill.name = "distill";
  distill.head = lin;
  distill.weights.gamma_d = 1.0;
  distill.weights.temperature = 1.0;
  distill.distill = DistillForm::Logit;
  out[distill.name] = distill;

  MethodProfile rebalance;
  rebalance.name = "rebalance";
  rebalance.head = cos;
  rebalance.weights.gamma_d = 0.5;
  // The binary head has no class embeddings to compare features against.
  rebalance.weights.gamma_m = bc ? 0.0 : 0.1;
  rebalance.weights.tau = 0.2;
  rebalance.weights.J = 2;
  rebalance.distill = DistillForm::Feature;
  out[rebalance.name] = rebalance;

  for (auto& [name, p] : out) p.weights.lambda = 0.3;
  return out;
}

inline MethodProfile lookup_profile(const std::string& name, System system) {
  const auto all = builtin_profiles(system);
  auto it = all.find(name);
  if (it == all.end()) {
    std::string known;
    for (const auto& [k, v] : all) known += (known.empty() ? "" : ", ") + k;
    throw LookupError("unknown profile '" + name + "' (known: " + known + ")");
  }
  return it->second;
}

struct TrainConfig {
  System system = System::MC;
  std::size_t epochs = 10;
  double base_lr = 1e-3;
  double later_lr_factor = 0.1;          // later sessions train at base_lr * factor
  std::vector<std::size_t> milestones;   // epochs at which the rate is divided
  double decay_divisor = 2.0;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t memory_budget = 1500;      // 0 disables exemplar memory
  std::size_t capture_layer = 1;         // latent replay layer
  bool freeze_below_capture = true;      // latent replay: fix layers under the capture layer after session 0
  std::vector<std::size_t> hidden{64, 64};
  std::size_t feature_width = 32;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("batch size must be >= 2");
    if (!(base_lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(later_lr_factor > 0.0)) throw ConfigError("later-session rate factor must be positive");
    if (!(decay_divisor > 0.0)) throw ConfigError("decay divisor must be positive");
    if (feature_width == 0) throw ConfigError("feature width must be positive");
  }

  double lr_at(std::size_t session, std::size_t epoch) const {
    double lr = session == 0 ? base_lr : base_lr * later_lr_factor;
    for (std::size_t m : milestones)
      if (epoch >= m) lr /= decay_divisor;
    return lr;
  }
};

/// Model, exemplar memory and bookkeeping carried across sessions.
struct Learner {
  System system = System::MC;
  Model model;
  std::optional<ExemplarMemory> memory;
  std::size_t sessions = 0;  // sessions trained, warm-up included

  /// Position of a trained task in the session order.
  std::size_t position(int task) const {
    const auto& t = model.trained_tasks();
    auto it = std::find(t.begin(), t.end(), task);
    if (it == t.end()) throw ProtocolError("task " + std::to_string(task) + " has not been trained");
    return static_cast<std::size_t>(it - t.begin());
  }

  /// Class index of (task at position pos, polarity): real first.
  static std::size_t class_of(std::size_t pos, Polarity p) { return 2 * pos + static_cast<std::size_t>(p); }
};

inline Learner make_learner(std::size_t input_width, const MethodProfile& profile, const TrainConfig& config) {
  profile.validate(config.system);
  config.validate();
  Learner l;
  l.system = config.system;
  Rng rng = substream(config.seed, "init");
  l.model = make_model(input_width, profile.head, rng, config.hidden, config.feature_width);
  if (profile.uses_memory && config.memory_budget > 0) {
    if (profile.payload == PayloadKind::Latent && (config.capture_layer == 0 ||
                                                   config.capture_layer >= l.model.extractor().num_layers())) {
      throw ConfigError("capture layer " + std::to_string(config.capture_layer) + " out of range [1, " +
                        std::to_string(l.model.extractor().num_layers() - 1) + "]");
    }
    l.memory.emplace(config.memory_budget, profile.payload, config.capture_layer);
  }
  return l;
}

struct SessionStats {
  std::size_t steps = 0;
  double last_loss = 0.0;
  bool distilled = false;
};

namespace detail {

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  std::vector<double> data;
  data.reserve(rows.size() * x.cols());
  for (std::size_t r : rows) {
    const auto row = x.row(r);
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{rows.size(), x.cols()}, std::move(data));
}

inline Tensor rows_from(const std::vector<const Exemplar*>& ex, std::span<const std::size_t> idx, std::size_t width) {
  std::vector<double> data;
  data.reserve(idx.size() * width);
  for (std::size_t i : idx) data.insert(data.end(), ex[i]->payload.begin(), ex[i]->payload.end());
  return Tensor(Shape{idx.size(), width}, std::move(data));
}

inline Tensor label_space_rows(System system, std::size_t k, std::span<const std::size_t> classes,
                               std::span<const Polarity> pols, double smoothing) {
  if (system == System::BC) {
    std::vector<std::size_t> y(pols.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<std::size_t>(pols[i]);
    return label_smooth(y, 2, smoothing);
  }
  return label_smooth(classes, k, smoothing);
}

}  // namespace detail

/// Trains one session in place.
inline SessionStats run_session(Learner& learner, const SessionData& session, const MethodProfile& profile,
                                const TrainConfig& config) {
  config.validate();
  profile.validate(config.system);
  if (config.system != learner.system) throw ConfigError("config system differs from the learner's");
  detail::check_head_system(learner.model.head(), config.system);
  const auto& done = learner.model.trained_tasks();
  if (std::find(done.begin(), done.end(), session.task) != done.end())
    throw ProtocolError("task " + std::to_string(session.task) + " was already trained");
  session.validate();
  if (session.width() != learner.model.extractor().input_width())
    throw DimensionError("session feature width differs from the model input");

  Model& model = learner.model;
  const System system = config.system;
  const std::size_t session_index = learner.sessions;
  const std::size_t pos = done.size();

  SessionStats stats;
  std::optional<ModelSnapshot> old;
  const bool distills = profile.weights.gamma_d > 0.0 && profile.distill != DistillForm::None;
  if (distills && !model.trained_tasks().empty()) old.emplace(model);
  stats.distilled = old.has_value();

  if (system != System::BC) {
    Rng init = substream(config.seed, "init", static_cast<std::uint64_t>(session.task) + 1);
    model.head().expand(session.task, init);
  }

  Objective obj;
  obj.system = system;
  obj.weights = profile.weights;
  obj.distill = profile.distill;
  obj.rule = profile.rule;
  if (!old) obj.weights.gamma_d = 0.0;

  // Pool of new rows (index < n_new) followed by exemplar rows.
  const Split& train = session.train;
  const std::size_t n_new = train.size();
  std::vector<const Exemplar*> exemplars;
  if (learner.memory) exemplars = learner.memory->all();
  const std::size_t n_pool = n_new + exemplars.size();
  const std::size_t ex_layer = learner.memory ? learner.memory->capture_layer() : 0;
  const std::size_t ex_width = model.extractor().width_at(ex_layer);
  const bool mixing = profile.mixup_alpha > 0.0;

  std::vector<std::size_t> new_classes(n_new);
  for (std::size_t i = 0; i < n_new; ++i) new_classes[i] = Learner::class_of(pos, train.y[i]);

  // Once latents are stored, the layers feeding them stay fixed so stored
  // payloads keep matching what the extractor would produce.
  std::size_t frozen = 0;
  if (learner.memory && learner.memory->kind() == PayloadKind::Latent && config.freeze_below_capture &&
      session_index > 0) {
    frozen = ex_layer * (model.extractor().parameters().size() / model.extractor().num_layers());
  }
  std::vector<Tensor*> params = model.parameters();
  params.erase(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(frozen));
  Adam adam(params, config.lr_at(session_index, 0));
  Rng batching = substream(config.seed, "batching", session_index);
  Rng mixer = substream(config.seed, "mixup", session_index);
  std::vector<std::size_t> order(n_pool);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = model.head().num_outputs();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    adam.set_lr(config.lr_at(session_index, epoch));
    std::shuffle(order.begin(), order.end(), batching);
    for (std::size_t start = 0; start < n_pool; start += config.batch_size) {
      const std::size_t stop = std::min(n_pool, start + config.batch_size);
      std::vector<std::size_t> new_rows, ex_rows;
      for (std::size_t i = start; i < stop; ++i)
        (order[i] < n_new ? new_rows : ex_rows).push_back(order[i] < n_new ? order[i] : order[i] - n_new);

      LossBatch fresh;
      fresh.inputs = detail::gather_rows(train.x, new_rows);
      for (std::size_t r : new_rows) {
        fresh.classes.push_back(new_classes[r]);
        fresh.polarity.push_back(train.y[r]);
      }
      LossBatch ex;
      ex.from_layer = ex_layer;
      ex.inputs = detail::rows_from(exemplars, ex_rows, ex_width);
      for (std::size_t r : ex_rows) {
        ex.classes.push_back(exemplars[r]->class_index);
        ex.polarity.push_back(exemplars[r]->polarity);
      }

      if (mixing) {
        // Mixed rows replace the originals for classification; exemplars stay
        // unmixed for the distillation and margin terms.
        LossBatch all;
        all.inputs = ex.empty() ? fresh.inputs
                                : (fresh.empty() ? ex.inputs : detail::stack_rows(fresh.inputs, ex.inputs));
        all.classes = fresh.classes;
        all.classes.insert(all.classes.end(), ex.classes.begin(), ex.classes.end());
        all.polarity = fresh.polarity;
        all.polarity.insert(all.polarity.end(), ex.polarity.begin(), ex.polarity.end());
        const Tensor labels =
            detail::label_space_rows(system, k, all.classes, all.polarity, profile.label_smoothing);
        std::vector<std::size_t> perm(all.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), mixer);
        const MixedBatch mixed = mixup(all.inputs, labels, detail::gather_rows(all.inputs, perm),
                                       detail::gather_rows(labels, perm), profile.mixup_alpha, mixer);
        all.inputs = mixed.inputs;
        all.soft_targets = mixed.labels;
        fresh = std::move(all);
        ex.classify = false;
      } else if (profile.label_smoothing > 0.0) {
        fresh.soft_targets =
            detail::label_space_rows(system, k, fresh.classes, fresh.polarity, profile.label_smoothing);
        ex.soft_targets = detail::label_space_rows(system, k, ex.classes, ex.polarity, profile.label_smoothing);
      }

      ad::Tape tape;
      const Bound bound = model.bind(tape, true);
      const LossTerms terms = total_loss(tape, model, bound, old ? &*old : nullptr, fresh, &ex, obj);
      tape.backward(terms.total);
      std::vector<std::vector<double>> grads;
      for (std::size_t i = frozen; i < bound.extractor.size(); ++i) grads.push_back(tape.grad(bound.extractor[i]));
      for (ad::Var v : bound.head) grads.push_back(tape.grad(v));
      adam.step(grads);
      stats.last_loss = tape.value(terms.total).item();
      ++stats.steps;
    }
  }

  if (learner.memory) {
    ExemplarMemory& mem = *learner.memory;
    const std::size_t num_classes = 2 * (pos + 1);
    const auto quotas = class_quotas(mem.budget(), num_classes);
    for (Polarity p : {Polarity::Real, Polarity::Fake}) {
      const std::size_t c = Learner::class_of(pos, p);
      const Tensor rows = train.rows_with(p);
      const std::size_t m = std::min(quotas[c], rows.rows());
      std::vector<Exemplar> kept;
      if (m > 0) {
        const auto chosen = herd_select(model.forward(rows).features, m);
        const Tensor picked = detail::gather_rows(rows, chosen);
        const Tensor payload = capture(model.extractor(), picked, mem.kind(), mem.capture_layer());
        for (std::size_t i = 0; i < payload.rows(); ++i) {
          const auto r = payload.row(i);
          kept.push_back(Exemplar{std::vector<double>(r.begin(), r.end()), c, session.task, p});
        }
      }
      mem.add_class(c, std::move(kept));
    }
    mem.rebalance(num_classes);
  }

  model.mark_trained(session.task);
  ++learner.sessions;
  return stats;
}

/// Test-split predictions of one trained task.
inline std::vector<Prediction> evaluate(const Learner& learner, const SessionData& session) {
  const std::size_t pos = learner.position(session.task);
  const Split& test = session.test;
  const Outputs out = learner.model.forward(test.x);
  const ClassifierHead& head = learner.model.head();
  std::vector<Prediction> preds;
  preds.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto row = out.logits.row(i);
    Prediction p;
    p.task = session.task;
    p.truth = test.y[i];
    p.predicted = predict_binary(head, row, learner.system);
    p.score = fake_score(head, row, learner.system);
    if (learner.system != System::BC) {
      p.true_class = static_cast<int>(Learner::class_of(pos, test.y[i]));
      p.predicted_class = static_cast<int>(argmax(row));
    }
    preds.push_back(p);
  }
  return preds;
}

inline double accuracy_of(std::span<const Prediction> preds) {
  std::size_t hit = 0;
  for (const auto& p : preds) hit += p.predicted == p.truth;
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

using ConfigEcho = std::vector<std::pair<std::string, std::string>>;

struct RunRecord {
  System system = System::MC;
  std::vector<int> task_ids;
  std::vector<std::string> task_names;
  AccuracyMatrix accuracy;
  std::vector<Prediction> final_predictions;
  ConfigEcho config;
  std::vector<double> session_seconds;
  std::vector<std::size_t> memory_totals;  // stored exemplars after each session
  std::size_t memory_budget = 0;
  bool diagonal_above_majority = true;
  Learner learner;
};

inline ConfigEcho echo_config(const MethodProfile& profile, const TrainConfig& config) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string milestones;
  for (std::size_t m : config.milestones) milestones += (milestones.empty() ? "" : ";") + std::to_string(m);
  std::string hidden;
  for (std::size_t h : config.hidden) hidden += (hidden.empty() ? "" : ";") + std::to_string(h);
  return {
      {"system", to_string(config.system)},
      {"profile", profile.name},
      {"head", to_string(profile.head)},
      {"aggregation", config.system == System::MT ? to_string(profile.rule) : "none"},
      {"distill", to_string(profile.distill)},
      {"payload", profile.uses_memory ? to_string(profile.payload) : "none"},
      {"gamma_d", num(profile.weights.gamma_d)},
      {"gamma_m", num(profile.weights.gamma_m)},
      {"lambda", num(profile.weights.lambda)},
      {"temperature", num(profile.weights.temperature)},
      {"tau", num(profile.weights.tau)},
      {"J", std::to_string(profile.weights.J)},
      {"label_smoothing", num(profile.label_smoothing)},
      {"mixup_alpha", num(profile.mixup_alpha)},
      {"memory", std::to_string(profile.uses_memory ? config.memory_budget : 0)},
      {"epochs", std::to_string(config.epochs)},
      {"lr", num(config.base_lr)},
      {"later_lr_factor", num(config.later_lr_factor)},
      {"milestones", milestones},
      {"decay_divisor", num(config.decay_divisor)},
      {"batch_size", std::to_string(config.batch_size)},
      {"capture_layer", std::to_string(config.capture_layer)},
      {"freeze_below_capture", config.freeze_below_capture ? "true" : "false"},
      {"hidden", hidden},
      {"feature_width", std::to_string(config.feature_width)},
      {"seed", std::to_string(config.seed)},
  };
}

/// Trains a warm-up session (if any) and then every session in order,
/// filling column j of the accuracy matrix after session j.
inline RunRecord run_stream(const std::vector<SessionData>& sessions, const std::optional<SessionData>& warmup,
                            const MethodProfile& profile, const TrainConfig& config) {
  if (sessions.empty()) throw ConfigError("a run needs at least one session");
  std::set<int> ids;
  if (warmup) ids.insert(warmup->task);
  for (const auto& s : sessions)
    if (!ids.insert(s.task).second) throw ProtocolError("duplicate task " + std::to_string(s.task) + " in stream");

  RunRecord rec;
  rec.system = config.system;
  rec.config = echo_config(profile, config);
  rec.learner = make_learner(sessions.front().width(), profile, config);
  rec.memory_budget = rec.learner.memory ? rec.learner.memory->budget() : 0;
  rec.accuracy = AccuracyMatrix(sessions.size());
  for (const auto& s : sessions) {
    rec.task_ids.push_back(s.task);
    rec.task_names.push_back(s.name);
  }

  auto train_one = [&](const SessionData& s) {
    const auto t0 = std::chrono::steady_clock::now();
    run_session(rec.learner, s, profile, config);
    rec.session_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    const std::size_t stored = rec.learner.memory ? rec.learner.memory->total() : 0;
    if (rec.learner.memory) rec.learner.memory->check_budget();
    rec.memory_totals.push_back(stored);
  };

  if (warmup) train_one(*warmup);
  for (std::size_t j = 0; j < sessions.size(); ++j) {
    train_one(sessions[j]);
    const bool last = j + 1 == sessions.size();
    for (std::size_t i = 0; i <= j; ++i) {
      const auto preds = evaluate(rec.learner, sessions[i]);
      rec.accuracy.set(i, j, accuracy_of(preds));
      if (last) rec.final_predictions.insert(rec.final_predictions.end(), preds.begin(), preds.end());
    }
    const Split& test = sessions[j].test;
    const double majority =
        static_cast<double>(std::max(test.count(Polarity::Real), test.count(Polarity::Fake))) / test.size();
    if (rec.accuracy.at(j, j) < majority) rec.diagonal_above_majority = false;
  }
  return rec;
}

/// Generates the scenario's data from config.seed and runs it.
inline RunRecord run_scenario(const Scenario& scenario, const MethodProfile& profile, const TrainConfig& config) {
  scenario.validate();
  std::vector<SessionData> sessions;
  for (const auto& t : scenario.tasks) sessions.push_back(synth_generate(t, config.seed));
  std::optional<SessionData> warmup;
  if (scenario.warmup) warmup = synth_generate(*scenario.warmup, config.seed);
  RunRecord rec = run_stream(sessions, warmup, profile, config);
  rec.config.insert(rec.config.begin(), {"scenario", scenario.name});
  return rec;
}

}  // namespace cdd
