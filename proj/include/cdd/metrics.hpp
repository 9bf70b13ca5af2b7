#pragma once

// Benchmark measures: average accuracy, average forgetting, multi-class
// recognition accuracy, and per-task average precision with fakes positive.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdd/error.hpp"
#include "cdd/model.hpp"

namespace cdd {

/// Upper-triangular matrix B where B(i, j) is the test accuracy on task i after
/// training session j (0-based, i <= j).
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t n) : n_(n), values_(n * n, 0.0), set_(n * n, false) {}

  std::size_t size() const noexcept { return n_; }

  void set(std::size_t i, std::size_t j, double v) {
    check(i, j);
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("accuracy " + std::to_string(v) + " outside [0, 1]");
    values_[i * n_ + j] = v;
    set_[i * n_ + j] = true;
  }

  double at(std::size_t i, std::size_t j) const {
    check(i, j);
    if (!set_[i * n_ + j]) throw ContractError("accuracy entry (" + std::to_string(i) + "," + std::to_string(j) + ") not filled");
    return values_[i * n_ + j];
  }

  bool filled(std::size_t i, std::size_t j) const {
    check(i, j);
    return set_[i * n_ + j];
  }

  bool complete() const {
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i; j < n_; ++j)
        if (!set_[i * n_ + j]) return false;
    return true;
  }

  friend bool operator==(const AccuracyMatrix& a, const AccuracyMatrix& b) {
    return a.n_ == b.n_ && a.values_ == b.values_ && a.set_ == b.set_;
  }

 private:
  void check(std::size_t i, std::size_t j) const {
    if (i >= n_ || j >= n_) throw ContractError("accuracy index out of range");
    if (i > j) throw ContractError("accuracy matrix is defined on the upper triangle only");
  }

  std::size_t n_ = 0;
  std::vector<double> values_;
  std::vector<bool> set_;
};

/// Mean of the last column.
inline double aa(const AccuracyMatrix& b) {
  const std::size_t n = b.size();
  if (n == 0) throw ContractError("AA of an empty matrix");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += b.at(i, n - 1);
  return s / static_cast<double>(n);
}

/// Backward transfer of task i (0-based): mean of B(i, j) - B(i, i) over the
/// later sessions j.
inline double bwt(const AccuracyMatrix& b, std::size_t i) {
  const std::size_t n = b.size();
  if (i + 1 >= n) throw ContractError("task has no later sessions");
  double s = 0.0;
  for (std::size_t j = i + 1; j < n; ++j) s += b.at(i, j) - b.at(i, i);
  return s / static_cast<double>(n - 1 - i);
}

/// Mean backward transfer over all tasks but the last. Negative means forgetting.
inline double af(const AccuracyMatrix& b) {
  const std::size_t n = b.size();
  if (n < 2) throw ContractError("AF needs at least two tasks");
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) s += bwt(b, i);
  return s / static_cast<double>(n - 1);
}

/// AF variant using only the final column: mean of B(i, n-1) - B(i, i).
inline double af_last_column(const AccuracyMatrix& b) {
  const std::size_t n = b.size();
  if (n < 2) throw ContractError("AF needs at least two tasks");
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) s += b.at(i, n - 1) - b.at(i, i);
  return s / static_cast<double>(n - 1);
}

/// One logged test prediction. Class indices are -1 for the binary system.
struct Prediction {
  int task = 0;
  Polarity truth = Polarity::Real;
  Polarity predicted = Polarity::Real;
  double score = 0.0;
  int true_class = -1;
  int predicted_class = -1;

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

namespace detail {

/// Predictions grouped by task, in first-appearance order.
inline std::vector<std::pair<int, std::vector<const Prediction*>>> by_task(std::span<const Prediction> log) {
  std::vector<std::pair<int, std::vector<const Prediction*>>> groups;
  std::map<int, std::size_t> slot;
  for (const Prediction& p : log) {
    auto [it, fresh] = slot.try_emplace(p.task, groups.size());
    if (fresh) groups.push_back({p.task, {}});
    groups[it->second].second.push_back(&p);
  }
  return groups;
}

}  // namespace detail

/// Detection accuracy per task.
inline std::vector<std::pair<int, double>> detection_accuracy(std::span<const Prediction> log) {
  std::vector<std::pair<int, double>> out;
  for (const auto& [task, preds] : detail::by_task(log)) {
    std::size_t hit = 0;
    for (const Prediction* p : preds) hit += p->predicted == p->truth;
    out.push_back({task, static_cast<double>(hit) / static_cast<double>(preds.size())});
  }
  return out;
}

/// Multi-class recognition accuracy averaged over tasks, or nullopt (reported
/// as NA) for logs without class predictions.
inline std::optional<double> aa_m(std::span<const Prediction> log) {
  if (log.empty()) throw ContractError("AA-M of an empty log");
  for (const Prediction& p : log)
    if (p.true_class < 0 || p.predicted_class < 0) return std::nullopt;
  const auto groups = detail::by_task(log);
  double s = 0.0;
  for (const auto& [task, preds] : groups) {
    std::size_t hit = 0;
    for (const Prediction* p : preds) hit += p->predicted_class == p->true_class;
    s += static_cast<double>(hit) / static_cast<double>(preds.size());
  }
  return s / static_cast<double>(groups.size());
}

struct PRPoint {
  double threshold;
  double recall;
  double precision;
};

struct PRCurve {
  std::vector<PRPoint> points;
};

/// Precision/recall after each distinct score threshold, highest first. Equal
/// scores enter together. Fakes are the positive class.
inline PRCurve pr_curve(std::span<const double> scores, std::span<const Polarity> labels) {
  if (scores.size() != labels.size()) throw ContractError("one label per score required");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), Polarity::Fake));
  if (positives == 0 || positives == labels.size())
    throw DegenerateInputError("PR curve needs both fake and real samples");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  PRCurve curve;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double t = scores[order[k]];
    while (k < order.size() && scores[order[k]] == t) {
      (labels[order[k]] == Polarity::Fake ? tp : fp) += 1;
      ++k;
    }
    curve.points.push_back({t, static_cast<double>(tp) / static_cast<double>(positives),
                            static_cast<double>(tp) / static_cast<double>(tp + fp)});
  }
  return curve;
}

/// Sum over curve points of (R_k - R_{k-1}) * P_k with R_0 = 0.
inline double ap(const PRCurve& curve) {
  double prev = 0.0, area = 0.0;
  for (const PRPoint& p : curve.points) {
    area += (p.recall - prev) * p.precision;
    prev = p.recall;
  }
  return area;
}

inline double mean_ap(std::span<const double> aps) {
  if (aps.empty()) throw ContractError("mAP over zero tasks");
  return std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(aps.size());
}

struct TaskAP {
  int task;
  double ap;
  PRCurve curve;
};

/// AP per task from a prediction log, in first-appearance order.
inline std::vector<TaskAP> per_task_ap(std::span<const Prediction> log) {
  std::vector<TaskAP> out;
  for (const auto& [task, preds] : detail::by_task(log)) {
    std::vector<double> s;
    std::vector<Polarity> y;
    for (const Prediction* p : preds) {
      s.push_back(p->score);
      y.push_back(p->truth);
    }
    PRCurve c = pr_curve(s, y);
    out.push_back({task, ap(c), std::move(c)});
  }
  return out;
}

}  // namespace cdd
