#pragma once

// Self-check battery behind `cdd verify`. Every check is seeded, so the
// report text is identical across runs.

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cdd/checkpoint.hpp"
#include "cdd/diff.hpp"
#include "cdd/losses.hpp"
#include "cdd/memory.hpp"
#include "cdd/metrics.hpp"
#include "cdd/model.hpp"
#include "cdd/rng.hpp"

namespace cdd {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace verify_detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

inline Tensor gauss(Shape shape, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = g(rng);
  return t;
}

inline Registry alternating_registry(std::size_t tasks) {
  Registry r;
  for (std::size_t t = 0; t < tasks; ++t) {
    r.push_back({static_cast<int>(t), Polarity::Real});
    r.push_back({static_cast<int>(t), Polarity::Fake});
  }
  return r;
}

inline CheckResult gradients(std::uint64_t seed) {
  Rng rng = substream(seed, "verify", 1);
  const std::size_t n = 3, k = 4;
  const Registry reg = alternating_registry(2);
  const std::vector<std::size_t> targets{0, 3, 1};
  const std::vector<double> bin{1.0, 0.0, 1.0};
  const Tensor soft = label_smooth(targets, k, 0.1);
  std::vector<std::pair<std::string, ad::ScalarFn>> fns;
  fns.push_back({"ce", [&](ad::Tape&, ad::Var x) { return multiclass_ce(x, targets); }});
  fns.push_back({"soft_ce", [&](ad::Tape&, ad::Var x) { return soft_ce(x, soft); }});
  fns.push_back({"binary_ce", [&](ad::Tape&, ad::Var x) {
                   return binary_ce(ad::select_columns(x, {0}), bin);
                 }});
  const Tensor old = gauss(Shape{n, k}, rng);
  fns.push_back({"kd_kl", [&](ad::Tape& t, ad::Var x) {
                   return kd_kl(t.constant(old), x, 2.0, std::vector<std::size_t>{0, 1, 2});
                 }});
  fns.push_back({"kd_feature", [&](ad::Tape& t, ad::Var x) { return kd_feature(t.constant(old), x); }});
  const Tensor emb = gauss(Shape{k, k}, rng);
  fns.push_back({"margin_ranking", [&](ad::Tape& t, ad::Var x) {
                   return margin_ranking(x, t.constant(emb), targets, 0.2, 2);
                 }});
  for (AggregationRule rule : {AggregationRule::SumLog, AggregationRule::SumLogit, AggregationRule::SumFeat,
                               AggregationRule::Max}) {
    fns.push_back({std::string("mt_") + to_string(rule), [&, rule](ad::Tape&, ad::Var x) {
                     return mt_class_loss(x, ad::softmax(x, 1), targets, reg, 0.3, rule);
                   }});
  }
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, f] : fns) {
    for (int trial = 0; trial < 5; ++trial) {
      const double e = ad::grad_check(f, gauss(Shape{n, k}, rng), 1e-5);
      if (e > worst) {
        worst = e;
        worst_name = name;
      }
    }
  }
  return {"gradients", worst < 1e-6, std::to_string(fns.size()) + " losses, max rel err " + sci(worst) +
                                         (worst_name.empty() ? "" : " (" + worst_name + ")")};
}

inline CheckResult herding(std::uint64_t seed) {
  Rng rng = substream(seed, "verify", 2);
  std::uniform_int_distribution<int> cell(-2, 2);  // small integers force ties
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial % 12), f = 1 + static_cast<std::size_t>(trial % 4);
    Tensor x(Shape{n, f});
    for (double& v : x.data()) v = cell(rng);
    const auto got = herd_select(x, n);
    std::vector<bool> used(n, false);
    std::vector<double> sum(f, 0.0);
    for (std::size_t step = 0; step < n; ++step) {
      std::size_t best = n;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) {
        if (used[i]) continue;
        double d = 0.0;
        for (std::size_t j = 0; j < f; ++j) {
          double all = 0.0;
          for (std::size_t r = 0; r < n; ++r) all += x(r, j);
          const double diff = static_cast<double>(step + 1) * all - static_cast<double>(n) * (sum[j] + x(i, j));
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      if (got[step] != best) ++mismatches;
      used[got[step]] = true;
      for (std::size_t j = 0; j < f; ++j) sum[j] += x(got[step], j);
    }
  }
  return {"herding", mismatches == 0, "100 sets, " + std::to_string(mismatches) + " step mismatches"};
}

inline CheckResult average_precision(std::uint64_t seed) {
  Rng rng = substream(seed, "verify", 3);
  std::uniform_int_distribution<int> level(0, 4);
  double worst = 0.0;
  int sets = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 11);
    std::vector<double> s(n);
    std::vector<Polarity> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = level(rng) / 4.0;
      y[i] = rng() % 2 ? Polarity::Fake : Polarity::Real;
    }
    y[0] = Polarity::Fake;
    y[1] = Polarity::Real;
    // Every distinct score as a threshold, counted from scratch.
    std::vector<double> th(s);
    std::sort(th.begin(), th.end(), std::greater<>());
    th.erase(std::unique(th.begin(), th.end()), th.end());
    double pos = 0;
    for (auto p : y) pos += p == Polarity::Fake;
    double area = 0.0, prev = 0.0;
    for (double t : th) {
      double tp = 0, sel = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (s[i] >= t) {
          ++sel;
          tp += y[i] == Polarity::Fake;
        }
      area += (tp / pos - prev) * (tp / sel);
      prev = tp / pos;
    }
    worst = std::max(worst, std::abs(area - ap(pr_curve(s, y))));
    ++sets;
  }
  return {"average-precision", worst <= 1e-12, std::to_string(sets) + " sets, max diff " + sci(worst)};
}

inline CheckResult aggregation_coincidence(std::uint64_t seed) {
  Rng rng = substream(seed, "verify", 4);
  const Registry reg{{0, Polarity::Real}, {0, Polarity::Fake}};
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor z = gauss(Shape{2}, rng, 3.0);
    const double m = std::max(z[0], z[1]);
    const double e0 = std::exp(z[0] - m), e1 = std::exp(z[1] - m);
    const std::vector<double> p{e0 / (e0 + e1), e1 / (e0 + e1)};
    const Aggregate a = aggregate(z.data(), p, reg, AggregationRule::SumLog);
    for (AggregationRule r : {AggregationRule::SumLogit, AggregationRule::Max}) {
      const Aggregate b = aggregate(z.data(), p, reg, r);
      worst = std::max({worst, std::abs(a.fake - b.fake), std::abs(a.real - b.real)});
    }
    const Aggregate sl = aggregate(z.data(), p, reg, AggregationRule::SumLogit);
    worst = std::max(worst, std::abs(std::exp(sl.fake) + std::exp(sl.real) - 1.0));
  }
  return {"aggregation-coincidence", worst <= 1e-12, "1000 rows, max diff " + sci(worst)};
}

inline CheckResult snapshot_immutability(std::uint64_t seed) {
  Rng rng = substream(seed, "verify", 5);
  Model model = make_model(6, HeadVariant::LinFC, rng, {8}, 4);
  model.head().expand(0, rng);
  model.mark_trained(0);
  const ModelSnapshot snap(model);
  const Tensor x = gauss(Shape{5, 6}, rng);
  const Outputs before = snap.forward(x);
  for (Tensor* p : model.parameters())
    for (double& v : p->data()) v += 0.5;
  model.head().expand(1, rng);
  const Outputs after = snap.forward(x);
  const bool same = before.logits == after.logits && before.features == after.features;
  const bool moved = !(model.forward(x).features == before.features);
  return {"snapshot-immutability", same && moved,
          same ? "snapshot outputs unchanged after live edits" : "snapshot outputs changed"};
}

inline CheckResult metric_examples() {
  AccuracyMatrix b(3);
  const double rows[3][3] = {{0.9, 0.8, 0.7}, {0, 0.95, 0.85}, {0, 0, 0.9}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i; j < 3; ++j) b.set(i, j, rows[i][j]);
  const double got_af = af(b), got_aa = aa(b);
  const bool ok = std::abs(got_af + 0.125) < 1e-12 && std::abs(got_aa - (0.7 + 0.85 + 0.9) / 3.0) < 1e-12;
  return {"metric-examples", ok, "AF " + sci(got_af) + ", AA " + sci(got_aa)};
}

inline CheckResult checkpoint_roundtrip(std::uint64_t seed) {
  Rng rng = substream(seed, "verify", 6);
  Learner l;
  l.system = System::MC;
  l.model = make_model(5, HeadVariant::CosFC, rng, {7}, 3);
  l.model.head().expand(2, rng);
  l.model.mark_trained(2);
  l.sessions = 1;
  l.memory.emplace(4, PayloadKind::Latent, 1);
  l.memory->add_class(0, {Exemplar{{0.1, 1.0 / 3.0, 0, 0, 0, 0, 0}, 0, 2, Polarity::Real}});
  l.memory->add_class(1, {Exemplar{{std::nextafter(1.0, 2.0), 0, 0, 0, 0, 0, -2}, 1, 2, Polarity::Fake}});
  std::stringstream a;
  save_checkpoint(a, l);
  const Learner back = load_checkpoint(a);
  std::stringstream b;
  save_checkpoint(b, back);
  const Tensor x = gauss(Shape{3, 5}, rng);
  const bool ok = a.str() == b.str() && back.model.forward(x).logits == l.model.forward(x).logits;
  return {"checkpoint-roundtrip", ok, ok ? "save/load/save identical" : "round trip differs"};
}

}  // namespace verify_detail

inline std::vector<CheckResult> run_verification(std::uint64_t seed = 0) {
  using namespace verify_detail;
  std::vector<std::function<CheckResult()>> checks{
      [&] { return gradients(seed); },
      [&] { return herding(seed); },
      [&] { return average_precision(seed); },
      [&] { return aggregation_coincidence(seed); },
      [&] { return snapshot_immutability(seed); },
      [] { return metric_examples(); },
      [&] { return checkpoint_roundtrip(seed); },
  };
  std::vector<CheckResult> out;
  for (const auto& c : checks) {
    try {
      out.push_back(c());
    } catch (const std::exception& e) {
      out.push_back({"(threw)", false, e.what()});
    }
  }
  return out;
}

}  // namespace cdd
