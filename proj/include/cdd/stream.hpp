#pragma once

// Task streams: seeded Gaussian stand-ins for real/fake sources, the EASY /
// HARD / LONG scenario layouts, and CSV ingestion of feature-vector datasets.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cdd/error.hpp"
#include "cdd/model.hpp"
#include "cdd/rng.hpp"
#include "cdd/tensor.hpp"

namespace cdd {

enum class SplitTag { Train, Val, Test };

inline const char* to_string(SplitTag s) {
  switch (s) {
    case SplitTag::Train: return "train";
    case SplitTag::Val: return "val";
    case SplitTag::Test: return "test";
  }
  return "?";
}

struct SplitCounts {
  std::size_t train = 500;
  std::size_t val = 100;
  std::size_t test = 200;

  friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

/// Parameters of one synthetic real/fake source.
///
/// Reals ~ N(real_base + real_shift, real_scale^2 I). Fakes are an equal-weight
/// mixture of N(fake_means[c], fake_scale^2 I). Counts are per polarity.
struct TaskSpec {
  int id = 0;
  std::string name;
  std::vector<std::vector<double>> fake_means;
  double fake_scale = 1.0;
  std::vector<double> real_base;
  std::vector<double> real_shift;
  double real_scale = 1.0;
  double difficulty = 1.0;
  SplitCounts real_counts;
  SplitCounts fake_counts;

  std::size_t dim() const { return real_base.size(); }

  std::vector<double> real_mean() const {
    std::vector<double> m = real_base;
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += real_shift[j];
    return m;
  }

  void validate() const {
    const std::size_t d = real_base.size();
    if (d == 0) throw ConfigError("task " + std::to_string(id) + ": zero feature width");
    if (real_shift.size() != d) throw ConfigError("task " + std::to_string(id) + ": real shift width mismatch");
    if (fake_means.empty()) throw ConfigError("task " + std::to_string(id) + ": no fake components");
    for (const auto& m : fake_means)
      if (m.size() != d) throw ConfigError("task " + std::to_string(id) + ": fake mean width mismatch");
    if (!(fake_scale > 0.0) || !(real_scale > 0.0))
      throw ConfigError("task " + std::to_string(id) + ": covariance scale must be positive");
    if (!(difficulty > 0.0)) throw ConfigError("task " + std::to_string(id) + ": difficulty must be positive");
    for (const SplitCounts& c : {real_counts, fake_counts})
      if (c.train == 0 || c.val == 0 || c.test == 0)
        throw ConfigError("task " + std::to_string(id) + ": split counts must be positive");
  }
};

/// One labeled split of a session.
struct Split {
  Tensor x = Tensor(Shape{0, 0});
  std::vector<Polarity> y;
  std::vector<std::uint64_t> ids;

  std::size_t size() const { return y.size(); }
  std::size_t count(Polarity p) const {
    std::size_t n = 0;
    for (Polarity v : y) n += v == p;
    return n;
  }
  /// Rows with the given polarity, in original order.
  Tensor rows_with(Polarity p) const {
    std::vector<double> data;
    std::size_t n = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] != p) continue;
      const auto r = x.row(i);
      data.insert(data.end(), r.begin(), r.end());
      ++n;
    }
    return Tensor(Shape{n, x.cols()}, std::move(data));
  }

  friend bool operator==(const Split& a, const Split& b) { return a.x == b.x && a.y == b.y; }
};

/// Paired real/fake data of one task.
struct SessionData {
  int task = 0;
  std::string name;
  Split train, val, test;

  std::size_t width() const { return train.x.cols(); }

  const Split& split(SplitTag s) const {
    switch (s) {
      case SplitTag::Train: return train;
      case SplitTag::Val: return val;
      case SplitTag::Test: return test;
    }
    return train;
  }
  Split& split(SplitTag s) { return const_cast<Split&>(static_cast<const SessionData&>(*this).split(s)); }

  void validate() const {
    for (SplitTag s : {SplitTag::Train, SplitTag::Test}) {
      const Split& sp = split(s);
      if (sp.count(Polarity::Real) == 0)
        throw ValidationError("task " + std::to_string(task) + ": empty real subset in " + to_string(s) + " split");
      if (sp.count(Polarity::Fake) == 0)
        throw ValidationError("task " + std::to_string(task) + ": empty fake subset in " + to_string(s) + " split");
    }
    const std::size_t w = width();
    for (SplitTag s : {SplitTag::Val, SplitTag::Test})
      if (split(s).size() > 0 && split(s).x.cols() != w)
        throw ValidationError("task " + std::to_string(task) + ": inconsistent feature width");
  }

  friend bool operator==(const SessionData& a, const SessionData& b) {
    return a.task == b.task && a.train == b.train && a.val == b.val && a.test == b.test;
  }
};

/// Draws one session from a task spec. Pure function of (spec, seed).
inline SessionData synth_generate(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = substream(seed, "data", static_cast<std::uint64_t>(spec.id));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t d = spec.dim();
  const std::vector<double> real_mean = spec.real_mean();
  std::uint64_t next_id = static_cast<std::uint64_t>(spec.id) << 32;

  SessionData out;
  out.task = spec.id;
  out.name = spec.name;
  for (SplitTag tag : {SplitTag::Train, SplitTag::Val, SplitTag::Test}) {
    auto pick = [tag](const SplitCounts& c) {
      return tag == SplitTag::Train ? c.train : tag == SplitTag::Val ? c.val : c.test;
    };
    const std::size_t nr = pick(spec.real_counts), nf = pick(spec.fake_counts);
    std::vector<double> data;
    data.reserve((nr + nf) * d);
    Split& sp = out.split(tag);
    for (std::size_t i = 0; i < nr; ++i) {
      for (std::size_t j = 0; j < d; ++j) data.push_back(real_mean[j] + spec.real_scale * gauss(rng));
      sp.y.push_back(Polarity::Real);
      sp.ids.push_back(next_id++);
    }
    for (std::size_t i = 0; i < nf; ++i) {
      const auto& mean = spec.fake_means[i % spec.fake_means.size()];
      for (std::size_t j = 0; j < d; ++j) data.push_back(mean[j] + spec.fake_scale * gauss(rng));
      sp.y.push_back(Polarity::Fake);
      sp.ids.push_back(next_id++);
    }
    sp.x = Tensor(Shape{nr + nf, d}, std::move(data));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenarios

enum class ScenarioKind { Easy, Hard, Long };

inline const char* to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::Easy: return "easy";
    case ScenarioKind::Hard: return "hard";
    case ScenarioKind::Long: return "long";
  }
  return "?";
}

inline ScenarioKind parse_scenario_kind(const std::string& s) {
  if (s == "easy") return ScenarioKind::Easy;
  if (s == "hard") return ScenarioKind::Hard;
  if (s == "long") return ScenarioKind::Long;
  throw ConfigError("unknown scenario '" + s + "' (expected easy, hard or long)");
}

struct Scenario {
  std::string name;
  std::vector<TaskSpec> tasks;
  std::optional<TaskSpec> warmup;
  std::size_t memory_budget = 1500;

  void validate() const {
    std::set<int> seen;
    if (warmup) {
      warmup->validate();
      seen.insert(warmup->id);
    }
    for (const auto& t : tasks) {
      t.validate();
      if (!seen.insert(t.id).second) throw ProtocolError("duplicate task id " + std::to_string(t.id) + " in scenario");
    }
  }
};

/// Knobs of the synthetic task family.
struct SynthOptions {
  std::size_t dim = 16;
  SplitCounts counts;
  double real_shift = 0.3;      // per-task real offset, in standard deviations
  double component_spread = 0.5;  // fake component offset from the task axis
  double overlap_bound = 1.0;     // symmetric KL below which two distributions count as overlapping
  bool warmup = true;
};

namespace detail {

// Orthonormal directions by Gram-Schmidt on Gaussian draws.
inline std::vector<std::vector<double>> orthonormal_directions(std::size_t count, std::size_t dim, Rng& rng) {
  if (count > dim) throw ConfigError("more synthetic tasks than feature dimensions");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> out;
  while (out.size() < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = gauss(rng);
    for (const auto& u : out) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dim; ++j) dot += v[j] * u[j];
      for (std::size_t j = 0; j < dim; ++j) v[j] -= dot * u[j];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    out.push_back(std::move(v));
  }
  return out;
}

inline std::vector<double> random_unit(std::size_t dim, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(dim);
  double norm = 0.0;
  for (double& x : v) {
    x = gauss(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

struct TaskShape {
  std::string name;
  double difficulty;
  double train_fraction = 1.0;
};

}  // namespace detail

/// Builds a task whose fakes sit `difficulty` standard deviations from the
/// shared real distribution along `axis`.
inline TaskSpec make_task(int id, std::string name, double difficulty, const std::vector<double>& axis,
                          const std::vector<double>& side, const std::vector<double>& shift_dir,
                          const SynthOptions& opt, double train_fraction = 1.0) {
  TaskSpec t;
  t.id = id;
  t.name = std::move(name);
  t.difficulty = difficulty;
  t.real_base.assign(opt.dim, 0.0);
  t.real_shift.resize(opt.dim);
  for (std::size_t j = 0; j < opt.dim; ++j) t.real_shift[j] = opt.real_shift * shift_dir[j];
  const std::vector<double> rm = t.real_mean();
  for (double sign : {1.0, -1.0}) {
    std::vector<double> m(opt.dim);
    for (std::size_t j = 0; j < opt.dim; ++j) m[j] = rm[j] + difficulty * axis[j] + sign * opt.component_spread * side[j];
    t.fake_means.push_back(std::move(m));
  }
  t.real_counts = opt.counts;
  t.fake_counts = opt.counts;
  const auto scaled = static_cast<std::size_t>(std::llround(static_cast<double>(opt.counts.train) * train_fraction));
  t.real_counts.train = t.fake_counts.train = std::max<std::size_t>(1, scaled);
  return t;
}

/// EASY: 7 well separated tasks. HARD: 5 tasks mixing low separation and one
/// small-data task. LONG: EASY's 7 followed by HARD's 5.
inline Scenario build_scenario(ScenarioKind kind, std::uint64_t seed, const SynthOptions& opt = {}) {
  using detail::TaskShape;
  const std::vector<TaskShape> easy = {{"easy-a", 6.0}, {"easy-b", 5.5}, {"easy-c", 6.5}, {"easy-d", 5.0},
                                       {"easy-e", 6.0}, {"easy-f", 5.5}, {"easy-g", 5.0}};
  const std::vector<TaskShape> hard = {{"hard-a", 3.0},
                                       {"hard-b", 2.0},
                                       {"hard-small", 3.5, 0.1},
                                       {"hard-c", 2.5},
                                       {"hard-d", 4.0}};
  std::vector<TaskShape> shapes;
  switch (kind) {
    case ScenarioKind::Easy: shapes = easy; break;
    case ScenarioKind::Hard: shapes = hard; break;
    case ScenarioKind::Long:
      shapes = easy;
      shapes.insert(shapes.end(), hard.begin(), hard.end());
      break;
  }
  Rng rng = substream(seed, "scenario", static_cast<std::uint64_t>(kind));
  const std::size_t n_dirs = shapes.size() + 1;
  const auto axes = detail::orthonormal_directions(n_dirs, opt.dim, rng);

  Scenario sc;
  sc.name = to_string(kind);
  auto side_of = [&](std::size_t i) { return axes[(i + 1) % n_dirs]; };
  if (opt.warmup) {
    const auto shift = detail::random_unit(opt.dim, rng);
    sc.warmup = make_task(0, "warmup", 6.0, axes[0], side_of(0), shift, opt);
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto shift = detail::random_unit(opt.dim, rng);
    sc.tasks.push_back(make_task(static_cast<int>(i + 1), shapes[i].name, shapes[i].difficulty, axes[i + 1],
                                 side_of(i + 1), shift, opt, shapes[i].train_fraction));
  }
  sc.validate();
  return sc;
}

/// Symmetric KL divergence between N(ma, sa^2 I) and N(mb, sb^2 I).
inline double symmetric_kl_isotropic(const std::vector<double>& ma, double sa, const std::vector<double>& mb,
                                     double sb) {
  const double d = static_cast<double>(ma.size());
  double dist2 = 0.0;
  for (std::size_t j = 0; j < ma.size(); ++j) dist2 += (ma[j] - mb[j]) * (ma[j] - mb[j]);
  auto kl = [&](double s1, double s2) {
    return 0.5 * (d * (s1 * s1) / (s2 * s2) + dist2 / (s2 * s2) - d + 2.0 * d * std::log(s2 / s1));
  };
  return kl(sa, sb) + kl(sb, sa);
}

/// Smallest symmetric KL between any pair of fake components of two tasks.
inline double fake_divergence(const TaskSpec& a, const TaskSpec& b) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& ma : a.fake_means)
    for (const auto& mb : b.fake_means)
      best = std::min(best, symmetric_kl_isotropic(ma, a.fake_scale, mb, b.fake_scale));
  return best;
}

inline double real_divergence(const TaskSpec& a, const TaskSpec& b) {
  return symmetric_kl_isotropic(a.real_mean(), a.real_scale, b.real_mean(), b.real_scale);
}

// ---------------------------------------------------------------------------
// CSV datasets: task_id,split,label,f0,...,f{d-1}

inline void write_dataset(std::ostream& out, const SessionData& data) {
  const std::size_t d = data.width();
  out << "task_id,split,label";
  for (std::size_t j = 0; j < d; ++j) out << ",f" << j;
  out << "\n";
  char buf[32];
  for (SplitTag tag : {SplitTag::Train, SplitTag::Val, SplitTag::Test}) {
    const Split& sp = data.split(tag);
    for (std::size_t i = 0; i < sp.size(); ++i) {
      out << data.task << ',' << to_string(tag) << ',' << static_cast<int>(sp.y[i]);
      for (std::size_t j = 0; j < d; ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", sp.x(i, j));
        out << ',' << buf;
      }
      out << "\n";
    }
  }
}

inline void write_dataset(const std::string& path, const SessionData& data) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_dataset(out, data);
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  if (s.empty()) return false;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace detail

/// Reads one task's records. Throws ParseError naming the offending line, or
/// ValidationError when a split lacks real or fake records.
inline SessionData load_dataset(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_fields(line);
  if (header.size() < 4 || header[0] != "task_id" || header[1] != "split" || header[2] != "label")
    throw ParseError(lineno, "header must be task_id,split,label,f0,...");
  const std::size_t d = header.size() - 3;
  for (std::size_t j = 0; j < d; ++j)
    if (header[3 + j] != "f" + std::to_string(j)) throw ParseError(lineno, "feature column " + std::to_string(j) + " must be named f" + std::to_string(j));

  SessionData out;
  std::optional<int> task;
  std::vector<double> buffers[3];
  std::uint64_t next_id = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_fields(line);
    if (f.size() != d + 3)
      throw ParseError(lineno, "expected " + std::to_string(d + 3) + " columns, found " + std::to_string(f.size()));
    int tid = 0;
    if (!detail::parse_number(f[0], tid)) throw ParseError(lineno, "malformed task_id '" + std::string(f[0]) + "'");
    if (task && *task != tid) throw ParseError(lineno, "a dataset file holds exactly one task");
    task = tid;
    SplitTag tag;
    if (f[1] == "train") tag = SplitTag::Train;
    else if (f[1] == "val") tag = SplitTag::Val;
    else if (f[1] == "test") tag = SplitTag::Test;
    else throw ParseError(lineno, "unknown split tag '" + std::string(f[1]) + "'");
    Polarity label;
    if (f[2] == "0") label = Polarity::Real;
    else if (f[2] == "1") label = Polarity::Fake;
    else throw ParseError(lineno, "label must be 0 (real) or 1 (fake)");
    auto& buf = buffers[static_cast<int>(tag)];
    for (std::size_t j = 0; j < d; ++j) {
      double v = 0.0;
      if (!detail::parse_number(f[3 + j], v) || !std::isfinite(v))
        throw ParseError(lineno, "malformed value in column f" + std::to_string(j));
      buf.push_back(v);
    }
    Split& sp = out.split(tag);
    sp.y.push_back(label);
    sp.ids.push_back(next_id++);
  }
  if (!task) throw ValidationError("dataset has no records");
  out.task = *task;
  out.name = "task-" + std::to_string(*task);
  for (SplitTag tag : {SplitTag::Train, SplitTag::Val, SplitTag::Test}) {
    Split& sp = out.split(tag);
    sp.x = Tensor(Shape{sp.y.size(), d}, std::move(buffers[static_cast<int>(tag)]));
  }
  out.validate();
  return out;
}

inline SessionData load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset " + path);
  return load_dataset(in);
}

}  // namespace cdd
