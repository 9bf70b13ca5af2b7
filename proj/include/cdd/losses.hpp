#pragma once

// Training objectives: classification (binary, multi-class, multi-task with
// real/fake aggregation), logit and feature distillation, margin ranking, and
// the label-smoothing / mixup essentials.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdd/diff.hpp"
#include "cdd/error.hpp"
#include "cdd/model.hpp"
#include "cdd/rng.hpp"
#include "cdd/tensor.hpp"

namespace cdd {

/// Floor applied to probabilities before taking logs.
inline constexpr double kProbFloor = 1e-12;

struct LossWeights {
  double gamma_d = 0.0;
  double gamma_m = 0.0;
  double lambda = 0.3;
  double temperature = 1.0;
  double tau = 0.2;
  int J = 2;

  void validate() const {
    if (!(gamma_d >= 0.0)) throw ConfigError("gamma_d must be >= 0");
    if (!(gamma_m >= 0.0)) throw ConfigError("gamma_m must be >= 0");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
    if (J < 0) throw ConfigError("J must be >= 0");
  }
};

enum class AggregationRule { SumLog, SumLogit, SumFeat, Max };

inline const char* to_string(AggregationRule r) {
  switch (r) {
    case AggregationRule::SumLog: return "sumlog";
    case AggregationRule::SumLogit: return "sumlogit";
    case AggregationRule::SumFeat: return "sumfeat";
    case AggregationRule::Max: return "max";
  }
  return "?";
}

inline AggregationRule parse_aggregation(const std::string& s) {
  if (s == "sumlog") return AggregationRule::SumLog;
  if (s == "sumlogit") return AggregationRule::SumLogit;
  if (s == "sumfeat") return AggregationRule::SumFeat;
  if (s == "max") return AggregationRule::Max;
  throw ConfigError("unknown aggregation rule '" + s + "' (expected sumlog, sumlogit, sumfeat or max)");
}

enum class DistillForm { None, Logit, Feature, LogitFeature };

inline const char* to_string(DistillForm f) {
  switch (f) {
    case DistillForm::None: return "none";
    case DistillForm::Logit: return "logit";
    case DistillForm::Feature: return "feature";
    case DistillForm::LogitFeature: return "logit+feature";
  }
  return "?";
}

inline DistillForm parse_distill_form(const std::string& s) {
  if (s == "none") return DistillForm::None;
  if (s == "logit") return DistillForm::Logit;
  if (s == "feature") return DistillForm::Feature;
  if (s == "logit+feature") return DistillForm::LogitFeature;
  throw ConfigError("unknown distillation form '" + s + "'");
}

namespace detail {

inline Tensor column(std::span<const double> v) {
  return Tensor(Shape{v.size(), 1}, std::vector<double>(v.begin(), v.end()));
}

inline Tensor polarity_mask(const Registry& registry, Polarity p) {
  Tensor m(Shape{registry.size(), 1});
  for (std::size_t c = 0; c < registry.size(); ++c) m[c] = registry[c].polarity == p ? 1.0 : 0.0;
  return m;
}

inline void require_both_polarities(const Registry& registry) {
  if (classes_with(registry, Polarity::Fake).empty() || classes_with(registry, Polarity::Real).empty())
    throw ContractError("aggregation needs at least one fake and one real class");
}

inline ad::Var floor_log(ad::Var p) { return ad::log(ad::clamp(p, kProbFloor, 1.0 - kProbFloor)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Classification

/// Mean over the batch of -log softmax(logits)[target].
inline ad::Var multiclass_ce(ad::Var logits, std::span<const std::size_t> targets) {
  ad::Tape& tape = *logits.tape;
  const Tensor& z = tape.value(logits);
  if (z.rank() != 2 || z.rows() != targets.size()) throw DimensionError("one target per logit row required");
  std::vector<ad::Coord> coords;
  coords.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= z.cols()) {
      throw ContractError("target class " + std::to_string(targets[i]) + " outside [0, " + std::to_string(z.cols()) + ")");
    }
    coords.push_back({i, targets[i]});
  }
  return ad::scale(ad::mean(ad::gather(ad::log_softmax(logits, 1), std::move(coords))), -1.0);
}

/// Cross-entropy against soft target rows (each row a distribution).
inline ad::Var soft_ce(ad::Var logits, const Tensor& target_rows) {
  ad::Tape& tape = *logits.tape;
  const Shape shape = tape.value(logits).shape();
  if (shape != target_rows.shape()) throw DimensionError("soft targets must match logits shape");
  ad::Var prod = ad::mul(tape.constant(target_rows), ad::log_softmax(logits, 1));
  return ad::scale(ad::sum(prod), -1.0 / static_cast<double>(shape[0]));
}

/// Mean of -[y log sigmoid(z) + (1-y) log(1 - sigmoid(z))], computed as
/// softplus(z) - y z. Targets may be soft (in [0, 1]).
inline ad::Var binary_ce_soft(ad::Var logit, std::span<const double> targets) {
  ad::Tape& tape = *logit.tape;
  const Tensor& z = tape.value(logit);
  if (z.rank() != 2 || z.cols() != 1 || z.rows() != targets.size()) throw DimensionError("binary_ce expects [n,1] logits");
  for (double y : targets)
    if (!(y >= 0.0 && y <= 1.0)) throw ContractError("binary target outside [0, 1]");
  ad::Var y = tape.constant(detail::column(targets));
  return ad::mean(ad::sub(ad::softplus(logit), ad::mul(y, logit)));
}

inline ad::Var binary_ce(ad::Var logit, std::span<const double> targets) {
  for (double y : targets)
    if (y != 0.0 && y != 1.0) throw ContractError("binary_ce targets must be 0 or 1");
  return binary_ce_soft(logit, targets);
}

// ---------------------------------------------------------------------------
// Distillation

/// T^2 KL(softmax(old/T) || softmax(new/T)) over the masked classes, averaged
/// over the batch. `old_logits` is a fixed target. Single-column logits (a
/// sigmoid head) are compared as the two-point distribution (sigma, 1-sigma).
inline ad::Var kd_kl(ad::Var old_logits, ad::Var new_logits, double temperature,
                     std::span<const std::size_t> class_mask) {
  ad::Tape& tape = *new_logits.tape;
  if (!(temperature > 0.0)) throw ContractError("temperature must be positive");
  if (class_mask.empty()) throw ContractError("distillation class mask is empty");
  const Shape so = tape.value(old_logits).shape(), sn = tape.value(new_logits).shape();
  if (so.size() != 2 || sn.size() != 2 || so[0] != sn[0]) throw DimensionError("kd_kl batch shapes differ");
  const std::size_t rows = sn[0];
  const std::vector<std::size_t> mask(class_mask.begin(), class_mask.end());
  for (std::size_t c : mask)
    if (c >= sn[1]) throw ContractError("class mask index out of range");

  ad::Var old_sel = ad::detach(old_logits);
  if (so[1] == sn[1]) {
    old_sel = ad::select_columns(old_sel, mask);
  } else if (so[1] != mask.size()) {
    throw DimensionError("old logits have neither the new width nor the mask width");
  }
  ad::Var new_sel = ad::select_columns(new_logits, mask);
  if (mask.size() == 1) {
    const ad::Var zeros = tape.constant(Tensor(Shape{rows, 1}));
    old_sel = ad::concat_cols(old_sel, zeros);
    new_sel = ad::concat_cols(new_sel, zeros);
  }
  const double inv_t = 1.0 / temperature;
  const ad::Var log_p = ad::detach(ad::log_softmax(ad::scale(old_sel, inv_t), 1));
  const ad::Var p = ad::detach(ad::exp(log_p));
  const ad::Var log_q = ad::log_softmax(ad::scale(new_sel, inv_t), 1);
  ad::Var kl = ad::sum(ad::mul(p, ad::sub(log_p, log_q)));
  return ad::scale(kl, temperature * temperature / static_cast<double>(rows));
}

/// Mean over rows of 1 - cos(old row, new row). `old_features` is a fixed target.
inline ad::Var kd_feature(ad::Var old_features, ad::Var new_features) {
  ad::Tape& tape = *new_features.tape;
  const Shape shape = tape.value(new_features).shape();
  if (tape.value(old_features).shape() != shape || shape.size() != 2) throw DimensionError("kd_feature shapes differ");
  ad::Var a = ad::row_normalize(ad::detach(old_features));
  ad::Var b = ad::row_normalize(new_features);
  ad::Var cos_sum = ad::sum(ad::mul(a, b));
  const double n = static_cast<double>(shape[0]);
  return ad::add_scalar(ad::scale(cos_sum, -1.0 / n), 1.0);
}

// ---------------------------------------------------------------------------
// Margin ranking

/// Hinge margin over a precomputed cosine-similarity matrix [n,k]: for each
/// row, sum over the J largest non-target similarities s_j of
/// max(tau - s_target + s_j, 0); averaged over rows.
inline ad::Var margin_ranking_from_similarities(ad::Var similarities, std::span<const std::size_t> targets, double tau,
                                                int J) {
  ad::Tape& tape = *similarities.tape;
  const Tensor& S = tape.value(similarities);
  if (S.rank() != 2 || S.rows() != targets.size()) throw DimensionError("one target per similarity row required");
  const std::size_t k = S.cols();
  if (J < 0 || static_cast<std::size_t>(J) + 1 > k) {
    throw ContractError("J=" + std::to_string(J) + " exceeds the " + std::to_string(k) + "-1 available classes");
  }
  if (J == 0) return tape.constant(Tensor::scalar(0.0));
  std::vector<ad::Coord> target_coords, other_coords;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= k) throw ContractError("target class out of range");
    std::vector<std::size_t> others;
    for (std::size_t c = 0; c < k; ++c)
      if (c != targets[i]) others.push_back(c);
    std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) { return S(i, a) > S(i, b); });
    for (int j = 0; j < J; ++j) {
      target_coords.push_back({i, targets[i]});
      other_coords.push_back({i, others[static_cast<std::size_t>(j)]});
    }
  }
  ad::Var hinge = ad::relu(
      ad::add_scalar(ad::sub(ad::gather(similarities, other_coords), ad::gather(similarities, target_coords)), tau));
  return ad::scale(ad::sum(hinge), 1.0 / static_cast<double>(targets.size()));
}

/// Margin ranking on features and class embeddings, using cosine similarity.
inline ad::Var margin_ranking(ad::Var features, ad::Var embeddings, std::span<const std::size_t> targets, double tau,
                              int J) {
  ad::Var sims = ad::matmul(ad::row_normalize(features), ad::transpose(ad::row_normalize(embeddings)));
  return margin_ranking_from_similarities(sims, targets, tau, J);
}

// ---------------------------------------------------------------------------
// Real/fake aggregation

struct Aggregate {
  double fake;
  double real;
};

/// (d_F, d_R) of one sample. `activations` is the softmax of `logits`.
inline Aggregate aggregate(std::span<const double> logits, std::span<const double> activations,
                           const Registry& registry, AggregationRule rule) {
  if (logits.size() != registry.size() || activations.size() != registry.size())
    throw DimensionError("aggregate: row width differs from registry");
  detail::require_both_polarities(registry);
  auto flog = [](double p) { return std::log(std::clamp(p, kProbFloor, 1.0 - kProbFloor)); };
  auto reduce = [&](Polarity pol) {
    double acc = 0.0;
    bool first = true;
    for (std::size_t c = 0; c < registry.size(); ++c) {
      if (registry[c].polarity != pol) continue;
      switch (rule) {
        case AggregationRule::SumLog: acc += flog(activations[c]); break;
        case AggregationRule::SumLogit:
        case AggregationRule::SumFeat: acc += (rule == AggregationRule::SumLogit ? activations[c] : logits[c]); break;
        case AggregationRule::Max: acc = first ? flog(activations[c]) : std::max(acc, flog(activations[c])); break;
      }
      first = false;
    }
    return acc;
  };
  const double f = reduce(Polarity::Fake);
  const double r = reduce(Polarity::Real);
  switch (rule) {
    case AggregationRule::SumLog:
    case AggregationRule::Max: return {f, r};
    case AggregationRule::SumLogit: return {flog(f), flog(r)};
    case AggregationRule::SumFeat: {
      const double m = std::max(f, r);
      const double lz = m + std::log(std::exp(f - m) + std::exp(r - m));
      return {f - lz, r - lz};
    }
  }
  throw ContractError("unknown aggregation rule");
}

/// Batched aggregation on the tape: returns [n,2] with columns (d_F, d_R).
inline ad::Var aggregate(ad::Var logits, ad::Var activations, const Registry& registry, AggregationRule rule) {
  ad::Tape& tape = *logits.tape;
  const Shape shape = tape.value(logits).shape();
  if (shape.size() != 2 || shape[1] != registry.size()) throw DimensionError("aggregate: logits width differs from registry");
  detail::require_both_polarities(registry);
  const ad::Var mask_f = tape.constant(detail::polarity_mask(registry, Polarity::Fake));
  const ad::Var mask_r = tape.constant(detail::polarity_mask(registry, Polarity::Real));
  switch (rule) {
    case AggregationRule::SumLog: {
      ad::Var lg = detail::floor_log(activations);
      return ad::concat_cols(ad::matmul(lg, mask_f), ad::matmul(lg, mask_r));
    }
    case AggregationRule::SumLogit:
      return ad::concat_cols(detail::floor_log(ad::matmul(activations, mask_f)),
                             detail::floor_log(ad::matmul(activations, mask_r)));
    case AggregationRule::SumFeat:
      return ad::log_softmax(ad::concat_cols(ad::matmul(logits, mask_f), ad::matmul(logits, mask_r)), 1);
    case AggregationRule::Max: {
      ad::Var lg = detail::floor_log(activations);
      const std::size_t n = shape[0];
      ad::Var mf = ad::reshape(ad::max(ad::select_columns(lg, classes_with(registry, Polarity::Fake)), 1), Shape{n, 1});
      ad::Var mr = ad::reshape(ad::max(ad::select_columns(lg, classes_with(registry, Polarity::Real)), 1), Shape{n, 1});
      return ad::concat_cols(mf, mr);
    }
  }
  throw ContractError("unknown aggregation rule");
}

/// (1 - lambda) * CE + lambda * mean(-d_F for fakes, -d_R for reals).
inline ad::Var mt_class_loss(ad::Var logits, ad::Var activations, std::span<const std::size_t> targets,
                             const Registry& registry, double lambda, AggregationRule rule) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("lambda outside [0, 1]");
  ad::Var ce = multiclass_ce(logits, targets);
  ad::Var d = aggregate(logits, activations, registry, rule);
  std::vector<ad::Coord> pick;
  for (std::size_t i = 0; i < targets.size(); ++i)
    pick.push_back({i, registry[targets[i]].polarity == Polarity::Fake ? std::size_t{0} : std::size_t{1}});
  ad::Var binary = ad::scale(ad::mean(ad::gather(d, std::move(pick))), -1.0);
  return ad::add(ad::scale(ce, 1.0 - lambda), ad::scale(binary, lambda));
}

/// Soft-target form: the binary term weighs d_F and d_R by the target mass on
/// fake and real classes.
inline ad::Var mt_class_loss_soft(ad::Var logits, ad::Var activations, const Tensor& target_rows,
                                  const Registry& registry, double lambda, AggregationRule rule) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("lambda outside [0, 1]");
  ad::Tape& tape = *logits.tape;
  ad::Var ce = soft_ce(logits, target_rows);
  ad::Var d = aggregate(logits, activations, registry, rule);
  const std::size_t n = target_rows.rows();
  Tensor mass(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < registry.size(); ++c)
      mass(i, registry[c].polarity == Polarity::Fake ? 0 : 1) += target_rows(i, c);
  ad::Var binary = ad::scale(ad::sum(ad::mul(tape.constant(mass), d)), -1.0 / static_cast<double>(n));
  return ad::add(ad::scale(ce, 1.0 - lambda), ad::scale(binary, lambda));
}

// ---------------------------------------------------------------------------
// Essentials

/// (1 - eps) * one_hot + eps / k.
inline Tensor label_smooth(std::span<const std::size_t> targets, std::size_t k, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw ContractError("label smoothing epsilon must lie in [0, 1)");
  if (k == 0) throw ContractError("label smoothing needs at least one class");
  Tensor out(Shape{targets.size(), k}, eps / static_cast<double>(k));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= k) throw ContractError("target class out of range");
    out(i, targets[i]) += 1.0 - eps;
  }
  return out;
}

inline Tensor one_hot(std::span<const std::size_t> targets, std::size_t k) { return label_smooth(targets, k, 0.0); }

struct MixedBatch {
  Tensor inputs;
  Tensor labels;
  double coefficient;
};

/// coefficient * a + (1 - coefficient) * b, applied to inputs and label rows alike.
inline MixedBatch mix(const Tensor& inputs_a, const Tensor& labels_a, const Tensor& inputs_b, const Tensor& labels_b,
                      double coefficient) {
  if (inputs_a.shape() != inputs_b.shape() || labels_a.shape() != labels_b.shape() ||
      inputs_a.rows() != labels_a.rows()) {
    throw ContractError("mixup batches must have equal shapes");
  }
  if (!(coefficient >= 0.0 && coefficient <= 1.0)) throw ContractError("mixing coefficient outside [0, 1]");
  auto blend = [coefficient](const Tensor& a, const Tensor& b) {
    if (coefficient == 1.0) return a;
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = coefficient * a[i] + (1.0 - coefficient) * b[i];
    return out;
  };
  return {blend(inputs_a, inputs_b), blend(labels_a, labels_b), coefficient};
}

/// Mixup with the coefficient drawn from Beta(alpha, alpha).
inline MixedBatch mixup(const Tensor& inputs_a, const Tensor& labels_a, const Tensor& inputs_b, const Tensor& labels_b,
                        double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw ContractError("mixup alpha must be positive");
  return mix(inputs_a, labels_a, inputs_b, labels_b, sample_beta(rng, alpha, alpha));
}

// ---------------------------------------------------------------------------
// Full objective

/// Rows fed to one part of the objective.
struct LossBatch {
  Tensor inputs;                     // raw inputs or captured latent activations
  std::size_t from_layer = 0;        // extractor layer the inputs enter at
  std::vector<std::size_t> classes;  // class index (MC/MT) per row
  std::vector<Polarity> polarity;
  std::optional<Tensor> soft_targets;  // label-space rows: k columns (MC/MT) or (real, fake) (BC)
  bool classify = true;                // rows join the classification term

  std::size_t size() const { return polarity.size(); }
  bool empty() const { return polarity.empty(); }
};

struct Objective {
  System system = System::MC;
  LossWeights weights;
  DistillForm distill = DistillForm::None;
  AggregationRule rule = AggregationRule::SumLogit;
};

struct LossTerms {
  ad::Var total;
  double classification = 0.0;
  double distillation = 0.0;
  double supplementary = 0.0;
};

namespace detail {

inline Tensor label_rows(const LossBatch& b, System system, std::size_t k) {
  if (b.soft_targets) return *b.soft_targets;
  if (system == System::BC) {
    Tensor out(Shape{b.size(), 2});
    for (std::size_t i = 0; i < b.size(); ++i) out(i, static_cast<std::size_t>(b.polarity[i])) = 1.0;
    return out;
  }
  return one_hot(b.classes, k);
}

inline Tensor stack_rows(const Tensor& a, const Tensor& b) {
  std::vector<double> data(a.values());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Tensor(Shape{a.rows() + b.rows(), a.cols()}, std::move(data));
}

}  // namespace detail

/// Classification term on the given logits for the chosen learning system.
inline ad::Var classification_loss(System system, ad::Var logits, const Registry& registry,
                                   std::span<const std::size_t> classes, std::span<const Polarity> polarity,
                                   const std::optional<Tensor>& soft, const LossWeights& w, AggregationRule rule) {
  ad::Tape& tape = *logits.tape;
  switch (system) {
    case System::BC: {
      std::vector<double> y(polarity.size());
      if (soft) {
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = (*soft)(i, 1);
        return binary_ce_soft(logits, y);
      }
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = polarity[i] == Polarity::Fake ? 1.0 : 0.0;
      return binary_ce(logits, y);
    }
    case System::MC:
      return soft ? soft_ce(logits, *soft) : multiclass_ce(logits, classes);
    case System::MT: {
      ad::Var act = ad::softmax(logits, 1);
      return soft ? mt_class_loss_soft(logits, act, *soft, registry, w.lambda, rule)
                  : mt_class_loss(logits, act, classes, registry, w.lambda, rule);
    }
  }
  (void)tape;
  throw ContractError("unknown learning system");
}

/// class(rows marked classify) + gamma_d * distill(exemplars) + gamma_m * supp(exemplars).
///
/// Each term is a per-row mean; the exemplar terms are further weighted by the
/// exemplar share of the minibatch so every row counts equally, as in a sum
/// over samples. The binary system never carries the supplementary term.
inline LossTerms total_loss(ad::Tape& tape, const Model& model, const Bound& bound, const ModelSnapshot* old,
                            const LossBatch& fresh, const LossBatch* exemplars, const Objective& obj) {
  const LossWeights& w = obj.weights;
  w.validate();
  if (w.gamma_d > 0.0 && obj.distill != DistillForm::None && old == nullptr)
    throw ProtocolError("distillation requested without a snapshot of the previous model");
  const bool binary = obj.system == System::BC;
  const std::size_t k = model.head().num_outputs();
  const Registry& registry = model.head().registry();

  std::optional<ForwardVars> f_fresh, f_ex;
  if (!fresh.empty()) f_fresh = model.forward(tape, bound, tape.constant(fresh.inputs), fresh.from_layer);
  const bool have_ex = exemplars != nullptr && !exemplars->empty();
  if (have_ex) f_ex = model.forward(tape, bound, tape.constant(exemplars->inputs), exemplars->from_layer);

  // Classification over every row flagged for it.
  std::optional<ad::Var> cls_logits;
  std::vector<std::size_t> classes;
  std::vector<Polarity> pols;
  std::optional<Tensor> soft;
  bool any_soft = false;
  auto take = [&](const LossBatch& b, const ForwardVars& f) {
    if (!b.classify) return;
    cls_logits = cls_logits ? ad::concat_rows(*cls_logits, f.logits) : f.logits;
    classes.insert(classes.end(), b.classes.begin(), b.classes.end());
    pols.insert(pols.end(), b.polarity.begin(), b.polarity.end());
    any_soft = any_soft || b.soft_targets.has_value();
  };
  if (f_fresh) take(fresh, *f_fresh);
  if (f_ex) take(*exemplars, *f_ex);
  if (any_soft) {
    const std::size_t width = binary ? 2 : k;
    Tensor rows(Shape{0, width});
    if (f_fresh && fresh.classify) rows = detail::stack_rows(rows, detail::label_rows(fresh, obj.system, width));
    if (f_ex && exemplars->classify) rows = detail::stack_rows(rows, detail::label_rows(*exemplars, obj.system, width));
    soft = std::move(rows);
  }

  const double rows = static_cast<double>(std::max(classes.size(), have_ex ? exemplars->size() : std::size_t{0}));
  const double share = have_ex ? static_cast<double>(exemplars->size()) / rows : 0.0;

  LossTerms terms;
  ad::Var total = tape.constant(Tensor::scalar(0.0));
  if (cls_logits) {
    ad::Var cls = classification_loss(obj.system, *cls_logits, registry, classes, pols, soft, w, obj.rule);
    terms.classification = tape.value(cls).item();
    total = cls;
  }

  if (have_ex && old != nullptr && w.gamma_d > 0.0 && obj.distill != DistillForm::None) {
    const ForwardVars prev = old->forward(tape, tape.constant(exemplars->inputs), exemplars->from_layer);
    std::optional<ad::Var> distill;
    if (obj.distill == DistillForm::Logit || obj.distill == DistillForm::LogitFeature) {
      std::vector<std::size_t> mask(old->head().num_outputs());
      std::iota(mask.begin(), mask.end(), std::size_t{0});
      distill = kd_kl(prev.logits, f_ex->logits, w.temperature, mask);
    }
    if (obj.distill == DistillForm::Feature || obj.distill == DistillForm::LogitFeature) {
      ad::Var fd = kd_feature(prev.features, f_ex->features);
      distill = distill ? ad::add(*distill, fd) : fd;
    }
    terms.distillation = tape.value(*distill).item();
    total = ad::add(total, ad::scale(*distill, w.gamma_d * share));
  }

  if (have_ex && !binary && w.gamma_m > 0.0 && w.J > 0 && k >= static_cast<std::size_t>(w.J) + 1) {
    ad::Var supp = margin_ranking(f_ex->features, bound.head[0], exemplars->classes, w.tau, w.J);
    terms.supplementary = tape.value(supp).item();
    total = ad::add(total, ad::scale(supp, w.gamma_m * share));
  }
  terms.total = total;
  return terms;
}

}  // namespace cdd
