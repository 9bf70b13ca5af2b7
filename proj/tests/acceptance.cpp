// Acceptance battery. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cdd/cli.hpp"
#include "oracles.hpp"

using namespace cdd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// Exemplar count after every session of every run, checked by criterion 9.
std::size_t g_sessions_checked = 0, g_budget_violations = 0;

void audit_budget(const RunRecord& rec) {
  for (std::size_t n : rec.memory_totals) {
    ++g_sessions_checked;
    if (rec.memory_budget > 0 && n > rec.memory_budget) ++g_budget_violations;
    if (rec.memory_budget == 0 && n != 0) ++g_budget_violations;
  }
}

Registry alternating(std::size_t tasks) {
  Registry r;
  for (std::size_t t = 0; t < tasks; ++t) {
    r.push_back({static_cast<int>(t), Polarity::Real});
    r.push_back({static_cast<int>(t), Polarity::Fake});
  }
  return r;
}

Outcome gradient_suite() {
  std::mt19937_64 rng(101);
  const std::size_t n = 4, k = 4;
  const Registry reg = alternating(2);
  const std::vector<std::size_t> y{0, 3, 1, 2};
  const std::vector<double> bin{1, 0, 0, 1}, soft_bin{0.9, 0.2, 0.35, 0.6};
  const Tensor smooth = label_smooth(y, k, 0.1);
  const Tensor old = oracle::random_tensor(Shape{n, k}, rng);
  const Tensor emb = oracle::random_tensor(Shape{k, k}, rng);
  const std::vector<std::size_t> old_cols{0, 1, 2};

  std::vector<std::pair<std::string, ad::ScalarFn>> fns{
      {"multiclass_ce", [&](ad::Tape&, ad::Var x) { return multiclass_ce(x, y); }},
      {"soft_ce", [&](ad::Tape&, ad::Var x) { return soft_ce(x, smooth); }},
      {"binary_ce", [&](ad::Tape&, ad::Var x) { return binary_ce(ad::select_columns(x, {1}), bin); }},
      {"binary_ce_soft", [&](ad::Tape&, ad::Var x) { return binary_ce_soft(ad::select_columns(x, {2}), soft_bin); }},
      {"kd_kl", [&](ad::Tape& t, ad::Var x) { return kd_kl(t.constant(old), x, 2.0, old_cols); }},
      {"kd_feature", [&](ad::Tape& t, ad::Var x) { return kd_feature(t.constant(old), x); }},
      {"margin_ranking", [&](ad::Tape& t, ad::Var x) { return margin_ranking(x, t.constant(emb), y, 0.2, 2); }},
      {"margin_from_similarities",
       [&](ad::Tape&, ad::Var x) { return margin_ranking_from_similarities(ad::sigmoid(x), y, 0.5, 2); }},
  };
  for (AggregationRule rule :
       {AggregationRule::SumLog, AggregationRule::SumLogit, AggregationRule::SumFeat, AggregationRule::Max}) {
    fns.push_back({std::string("mt_") + to_string(rule), [&, rule](ad::Tape&, ad::Var x) {
                     return mt_class_loss(x, ad::softmax(x, 1), y, reg, 0.3, rule);
                   }});
    fns.push_back({std::string("mt_soft_") + to_string(rule), [&, rule](ad::Tape&, ad::Var x) {
                     return mt_class_loss_soft(x, ad::softmax(x, 1), smooth, reg, 0.3, rule);
                   }});
  }
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, f] : fns) {
    for (int trial = 0; trial < 100; ++trial) {
      const double e = ad::grad_check(f, oracle::random_tensor(Shape{n, k}, rng), 1e-5);
      if (e > worst) {
        worst = e;
        worst_name = name;
      }
    }
  }
  return {worst < 1e-6, std::to_string(fns.size()) + " losses x 100 points, max rel err " + fmt("%.2e", worst) +
                            (worst_name.empty() ? "" : " (" + worst_name + ")")};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(202);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 7;
    const auto b = oracle::random_upper(n, rng);
    const auto m = oracle::to_matrix(b);
    mismatches += aa(m) != oracle::aa(b);
    mismatches += af(m) != oracle::af(b);
  }
  std::size_t constant_nonzero = 0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 7;
    oracle::Matrix b(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      const double v = u(rng);
      for (std::size_t j = i; j < n; ++j) b[i][j] = v;
    }
    constant_nonzero += af(oracle::to_matrix(b)) != 0.0;
  }

  // Every set with up to 6 records over three score levels, then random sets up to 12.
  double worst = 0.0;
  std::size_t sets = 0;
  auto check = [&](const std::vector<double>& s, const std::vector<Polarity>& y) {
    worst = std::max(worst, std::abs(ap(pr_curve(s, y)) - oracle::ap_by_subsets(s, y)));
    ++sets;
  };
  for (std::size_t n = 2; n <= 6; ++n) {
    std::size_t score_codes = 1;
    for (std::size_t i = 0; i < n; ++i) score_codes *= 3;
    for (std::size_t labels = 1; labels + 1 < (1u << n); ++labels)
      for (std::size_t code = 0; code < score_codes; ++code) {
        std::vector<double> s(n);
        std::vector<Polarity> y(n);
        std::size_t c = code;
        for (std::size_t i = 0; i < n; ++i, c /= 3) {
          s[i] = static_cast<double>(c % 3) / 2.0;
          y[i] = (labels >> i) & 1u ? Polarity::Fake : Polarity::Real;
        }
        check(s, y);
      }
  }
  std::uniform_int_distribution<int> level(0, 7);
  for (int trial = 0; trial < 3000; ++trial) {
    const std::size_t n = 2 + trial % 11;
    std::vector<double> s(n);
    std::vector<Polarity> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = trial % 2 ? u(rng) : level(rng) / 7.0;
      y[i] = rng() % 2 ? Polarity::Fake : Polarity::Real;
    }
    y[trial % n] = Polarity::Fake;
    y[(trial + 1) % n] = Polarity::Real;
    check(s, y);
  }
  const bool pass = mismatches == 0 && constant_nonzero == 0 && worst <= 1e-12;
  return {pass, "AA/AF mismatches " + std::to_string(mismatches) + ", constant-row AF nonzero " +
                    std::to_string(constant_nonzero) + ", AP over " + std::to_string(sets) + " sets max diff " +
                    fmt("%.2e", worst)};
}

Outcome herding_oracle() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<int> cell(-2, 2);
  std::size_t mismatches = 0, steps = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 12, f = 1 + rng() % 4;
    Tensor x(Shape{n, f});
    for (double& v : x.data()) v = cell(rng);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < n; ++i) rows.emplace_back(x.row(i).begin(), x.row(i).end());
    const auto got = herd_select(x, n);
    std::vector<std::size_t> chosen;
    for (std::size_t step = 0; step < n; ++step, ++steps) {
      mismatches += got[step] != oracle::herding_step(rows, chosen);
      chosen.push_back(got[step]);
    }
  }
  return {mismatches == 0, "100 sets, " + std::to_string(steps) + " steps, " + std::to_string(mismatches) +
                               " mismatches"};
}

Outcome aggregation_coincidence() {
  std::mt19937_64 rng(404);
  std::normal_distribution<double> g(0.0, 3.0);
  const Registry reg{{0, Polarity::Real}, {0, Polarity::Fake}};
  double worst = 0.0, partition = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::vector<double> z{g(rng), g(rng)};
    const std::vector<double> p = oracle::softmax(z);
    const Aggregate a = aggregate(z, p, reg, AggregationRule::SumLog);
    for (AggregationRule r : {AggregationRule::SumLogit, AggregationRule::Max}) {
      const Aggregate b = aggregate(z, p, reg, r);
      worst = std::max({worst, std::abs(a.fake - b.fake), std::abs(a.real - b.real)});
    }
    const Aggregate s = aggregate(z, p, reg, AggregationRule::SumLogit);
    partition = std::max(partition, std::abs(std::exp(s.fake) + std::exp(s.real) - 1.0));
  }
  return {worst <= 1e-12 && partition <= 1e-12,
          "1000 rows, max rule diff " + fmt("%.2e", worst) + ", SumLogit partition err " + fmt("%.2e", partition)};
}

Scenario hard(std::uint64_t seed) { return build_scenario(ScenarioKind::Hard, seed, SynthOptions{}); }

TrainConfig train_config(System system, std::uint64_t seed, std::size_t budget) {
  TrainConfig t = ExperimentConfig::default_train();
  t.system = system;
  t.seed = seed;
  t.memory_budget = budget;
  return t;
}

RunRecord run(const Scenario& sc, const MethodProfile& p, const TrainConfig& t) {
  RunRecord rec = run_scenario(sc, p, t);
  audit_budget(rec);
  return rec;
}

Outcome lambda_endpoint() {
  std::size_t differing = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2}) {
    Scenario sc = hard(seed);
    sc.tasks.resize(3);
    MethodProfile mt = lookup_profile("distill", System::MT);
    mt.weights.lambda = 0.0;
    const RunRecord a = run(sc, mt, train_config(System::MT, seed, 500));
    const RunRecord b = run(sc, lookup_profile("distill", System::MC), train_config(System::MC, seed, 500));
    differing += !(a.accuracy == b.accuracy);
  }
  return {differing == 0, "3-task stream, 2 seeds, " + std::to_string(differing) + " differing matrices"};
}

constexpr System kTrendSystem = System::MC;
const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

struct TrendRuns {
  std::map<std::string, double> aa, af;
  std::map<std::string, std::vector<std::string>> metrics_files;
};

TrendRuns forgetting_runs(const fs::path& root) {
  TrendRuns out;
  for (const char* name : {"finetune", "replay", "distill"}) {
    for (std::uint64_t seed : kSeeds) {
      const RunRecord rec = run(hard(seed), lookup_profile(name, kTrendSystem), train_config(kTrendSystem, seed, 500));
      out.aa[name] += aa(rec.accuracy) / kSeeds.size();
      out.af[name] += af(rec.accuracy) / kSeeds.size();
      const fs::path dir = root / name / std::to_string(seed);
      write_run(dir, rec);
      out.metrics_files[name].push_back(read_text(dir / "metrics.json"));
    }
  }
  return out;
}

Outcome forgetting_trend(const TrendRuns& r) {
  const double ft = r.af.at("finetune"), rp = r.af.at("replay"), ds = r.af.at("distill");
  const double aft = r.aa.at("finetune"), arp = r.aa.at("replay"), ads = r.aa.at("distill");
  const bool pass = ft < -0.15 && rp > ft + 0.10 && ds >= rp - 0.02 && ads >= arp && arp >= aft + 0.02;
  return {pass, "AF finetune " + fmt("%.4f", ft) + " replay " + fmt("%.4f", rp) + " distill " + fmt("%.4f", ds) +
                    "; AA finetune " + fmt("%.4f", aft) + " replay " + fmt("%.4f", arp) + " distill " +
                    fmt("%.4f", ads)};
}

Outcome budget_trend(double aa_at_500) {
  std::vector<std::pair<std::size_t, double>> curve;
  for (std::size_t budget : {1500, 1000, 500, 100}) {
    double mean = 0.0;
    if (budget == 500) {
      mean = aa_at_500;  // same runs as the forgetting trend
    } else {
      for (std::uint64_t seed : kSeeds)
        mean += aa(run(hard(seed), lookup_profile("distill", kTrendSystem), train_config(kTrendSystem, seed, budget))
                       .accuracy) /
                kSeeds.size();
    }
    curve.emplace_back(budget, mean);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < curve.size(); ++i) monotone = monotone && curve[i - 1].second >= curve[i].second;
  const double drop = curve.front().second - curve.back().second;
  std::string detail = "AA";
  for (const auto& [b, v] : curve) detail += " " + std::to_string(b) + ":" + fmt("%.4f", v);
  return {monotone && drop >= 0.01, detail + ", drop " + fmt("%.4f", drop)};
}

Outcome cosfc_invariance() {
  Rng init = substream(505, "init");
  ClassifierHead head(HeadVariant::CosFC, 8, init);
  for (int t = 0; t < 4; ++t) head.expand(t, init);
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  auto logits = [&](const Tensor& f) {
    ad::Tape tape;
    std::vector<ad::Var> params;
    for (const Tensor* p : head.parameters()) params.push_back(tape.constant(*p));
    return tape.value(head.forward(tape, params, tape.constant(f)));
  };
  std::size_t changed = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    // A ReLU extractor ends in a nonnegative feature vector.
    Tensor f = oracle::random_tensor(Shape{1, 8}, rng);
    for (double& v : f.data()) v = std::abs(v);
    Tensor g = f;
    const double s = scale(rng);
    for (double& v : g.data()) v *= s;
    changed += argmax(logits(f).row(0)) != argmax(logits(g).row(0));
  }
  return {changed == 0, "1000 inputs, " + std::to_string(changed) + " changed predictions"};
}

Outcome determinism(const TrendRuns& first, const fs::path& root) {
  const TrendRuns second = forgetting_runs(root);
  std::size_t differing = 0, files = 0;
  for (const auto& [name, texts] : first.metrics_files)
    for (std::size_t i = 0; i < texts.size(); ++i, ++files) differing += texts[i] != second.metrics_files.at(name)[i];
  return {differing == 0, std::to_string(files) + " metrics.json files, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main() {
  const fs::path root(CDD_TEST_TMP);
  fs::remove_all(root);
  std::size_t failed = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& f, double limit_seconds = 0) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (limit_seconds > 0 && secs >= limit_seconds) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", limit_seconds) + " s limit";
    }
    failed += !o.pass;
    std::printf("%s criterion %d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  report(1, "gradient suite", gradient_suite, 30);
  report(2, "metric oracles", metric_oracles);
  report(3, "herding oracle", herding_oracle);
  report(4, "aggregation coincidence", aggregation_coincidence);
  report(5, "lambda endpoint", lambda_endpoint, 120);
  TrendRuns trend;
  report(6, "forgetting trend", [&] {
    trend = forgetting_runs(root / "first");
    return forgetting_trend(trend);
  }, 600);
  report(7, "memory budget trend", [&] { return budget_trend(trend.aa.at("distill")); });
  report(8, "cosine head scale invariance", cosfc_invariance);
  report(10, "determinism", [&] { return determinism(trend, root / "second"); });
  report(9, "exemplar budget", [] {
    return Outcome{g_budget_violations == 0 && g_sessions_checked > 0,
                   std::to_string(g_sessions_checked) + " sessions checked, " + std::to_string(g_budget_violations) +
                       " over budget"};
  });
  std::printf("%zu criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
