#pragma once

// Budgeted exemplar store with herding selection and per-class quotas.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cdd/error.hpp"
#include "cdd/model.hpp"
#include "cdd/tensor.hpp"

namespace cdd {

enum class PayloadKind { Raw, Latent };

inline const char* to_string(PayloadKind k) { return k == PayloadKind::Raw ? "raw" : "latent"; }

inline PayloadKind parse_payload_kind(const std::string& s) {
  if (s == "raw") return PayloadKind::Raw;
  if (s == "latent") return PayloadKind::Latent;
  throw ConfigError("unknown replay payload '" + s + "'");
}

struct Exemplar {
  std::vector<double> payload;
  std::size_t class_index = 0;
  int task = 0;
  Polarity polarity = Polarity::Real;

  friend bool operator==(const Exemplar&, const Exemplar&) = default;
};

/// Greedy herding: step k takes the unchosen row whose addition brings the
/// running mean of chosen rows closest to the mean of all rows. Ties go to
/// the lowest index.
inline std::vector<std::size_t> herd_select(const Tensor& features, std::size_t m) {
  if (features.rank() != 2) throw DimensionError("herding expects a feature matrix");
  const std::size_t n = features.rows(), f = features.cols();
  if (m < 1 || m > n) {
    throw ContractError("herding needs 1 <= m <= n, got m=" + std::to_string(m) + ", n=" + std::to_string(n));
  }
  // Distances are scaled by (n * step), so integer features tie exactly.
  std::vector<double> total(f, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) total[j] += features(i, j);

  std::vector<double> running(f, 0.0);
  std::vector<bool> taken(n, false);
  std::vector<std::size_t> order;
  order.reserve(m);
  const double nn = static_cast<double>(n);
  for (std::size_t step = 1; step <= m; ++step) {
    std::size_t best = n;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double d = 0.0;
      for (std::size_t j = 0; j < f; ++j) {
        const double diff = static_cast<double>(step) * total[j] - nn * (running[j] + features(i, j));
        d += diff * diff;
      }
      if (d < best_dist) {
        best_dist = d;
        best = i;
      }
    }
    taken[best] = true;
    order.push_back(best);
    for (std::size_t j = 0; j < f; ++j) running[j] += features(best, j);
  }
  return order;
}

/// Per-class quotas: floor(budget / classes), remainder one each to the
/// lowest-index classes.
inline std::vector<std::size_t> class_quotas(std::size_t budget, std::size_t num_classes) {
  if (num_classes == 0) throw ContractError("quota needs at least one class");
  std::vector<std::size_t> q(num_classes, budget / num_classes);
  for (std::size_t c = 0; c < budget % num_classes; ++c) ++q[c];
  return q;
}

/// Payloads for a batch of inputs: the rows themselves, or the extractor's
/// activations after `layer` layers.
inline Tensor capture(const FeatureExtractor& extractor, const Tensor& x, PayloadKind kind, std::size_t layer) {
  if (kind == PayloadKind::Raw) return x;
  return extractor.activation_at(x, layer);
}

class ExemplarMemory {
 public:
  ExemplarMemory(std::size_t budget, PayloadKind kind, std::size_t capture_layer = 0)
      : budget_(budget), kind_(kind), capture_layer_(kind == PayloadKind::Raw ? 0 : capture_layer) {
    if (budget == 0) throw ConfigError("exemplar memory budget must be positive");
    if (kind == PayloadKind::Latent && capture_layer == 0) throw ConfigError("latent replay needs a capture layer >= 1");
  }

  std::size_t budget() const noexcept { return budget_; }
  PayloadKind kind() const noexcept { return kind_; }
  /// Extractor layer replayed payloads enter at (0 for raw inputs).
  std::size_t capture_layer() const noexcept { return capture_layer_; }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [c, list] : classes_) n += list.size();
    return n;
  }

  bool empty() const { return total() == 0; }

  const std::map<std::size_t, std::vector<Exemplar>>& classes() const noexcept { return classes_; }

  const std::vector<Exemplar>& of_class(std::size_t c) const {
    static const std::vector<Exemplar> none;
    auto it = classes_.find(c);
    return it == classes_.end() ? none : it->second;
  }

  /// Stores a class's exemplars in herding order.
  void add_class(std::size_t class_index, std::vector<Exemplar> ordered) {
    if (classes_.count(class_index)) throw ProtocolError("class " + std::to_string(class_index) + " already in memory");
    for (const auto& e : ordered)
      if (e.class_index != class_index) throw ContractError("exemplar class differs from its list");
    classes_.emplace(class_index, std::move(ordered));
  }

  /// Trims every class list to its quota by dropping the herding-order tail.
  void rebalance(std::size_t num_classes) {
    const auto q = class_quotas(budget_, num_classes);
    for (auto& [c, list] : classes_) {
      const std::size_t quota = c < q.size() ? q[c] : 0;
      if (list.size() > quota) list.resize(quota);
    }
    check_budget();
  }

  void check_budget() const {
    if (total() > budget_) {
      throw ProtocolError("exemplar memory holds " + std::to_string(total()) + " > budget " + std::to_string(budget_));
    }
  }

  /// Every exemplar, class by class in herding order.
  std::vector<const Exemplar*> all() const {
    std::vector<const Exemplar*> out;
    for (const auto& [c, list] : classes_)
      for (const auto& e : list) out.push_back(&e);
    return out;
  }

  // Used when restoring checkpoints.
  void restore_class(std::size_t class_index, std::vector<Exemplar> ordered) {
    classes_[class_index] = std::move(ordered);
  }

 private:
  std::size_t budget_;
  PayloadKind kind_;
  std::size_t capture_layer_;
  std::map<std::size_t, std::vector<Exemplar>> classes_;
};

}  // namespace cdd
