#pragma once

// Run artifacts: accuracy_matrix.csv, predictions.csv, pr_curves.csv,
// config.json and metrics.json, with readers for the ones eval consumes.

#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cdd/error.hpp"
#include "cdd/metrics.hpp"
#include "cdd/stream.hpp"
#include "cdd/trainer.hpp"

namespace cdd {

using ordered_json = nlohmann::ordered_json;

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- accuracy matrix -------------------------------------------------------

inline void write_accuracy_matrix(std::ostream& out, const AccuracyMatrix& b, const std::vector<int>& task_ids) {
  const std::size_t n = b.size();
  if (task_ids.size() != n) throw ContractError("one task id per matrix row required");
  out << "task_id";
  for (std::size_t j = 0; j < n; ++j) out << ",session_" << (j + 1);
  out << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    out << task_ids[i];
    for (std::size_t j = 0; j < n; ++j) {
      out << ',';
      if (j >= i) out << format_double(b.at(i, j));
    }
    out << '\n';
  }
}

struct MatrixFile {
  AccuracyMatrix matrix;
  std::vector<int> task_ids;
};

/// Parses the matrix schema. Blanks are required below the diagonal and
/// forbidden on and above it.
inline MatrixFile read_accuracy_matrix(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  const auto header = detail::split_fields(line);
  if (header.size() < 2 || header[0] != "task_id") throw ParseError(1, "header must start with task_id,session_1");
  const std::size_t n = header.size() - 1;
  for (std::size_t j = 0; j < n; ++j)
    if (header[j + 1] != "session_" + std::to_string(j + 1))
      throw ParseError(1, "expected column session_" + std::to_string(j + 1));

  MatrixFile f{AccuracyMatrix(n), {}};
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t i = f.task_ids.size();
    if (i >= n) throw ParseError(lineno, "more rows than sessions");
    const auto fields = detail::split_fields(line);
    if (fields.size() != n + 1)
      throw ParseError(lineno, "expected " + std::to_string(n + 1) + " fields, got " + std::to_string(fields.size()));
    int id = 0;
    if (!detail::parse_number(fields[0], id)) throw ParseError(lineno, "malformed task id");
    f.task_ids.push_back(id);
    for (std::size_t j = 0; j < n; ++j) {
      const auto cell = fields[j + 1];
      if (j < i) {
        if (!cell.empty()) throw ParseError(lineno, "entries below the diagonal must be blank");
        continue;
      }
      double v = 0.0;
      if (!detail::parse_number(cell, v)) throw ParseError(lineno, "malformed accuracy in column " + std::to_string(j + 1));
      try {
        f.matrix.set(i, j, v);
      } catch (const ValidationError& e) {
        throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  if (f.task_ids.size() != n) throw ParseError(lineno, "expected " + std::to_string(n) + " task rows");
  return f;
}

// ---- prediction log --------------------------------------------------------

inline void write_predictions(std::ostream& out, const std::vector<Prediction>& log) {
  out << "task_id,truth,predicted,score,true_class,predicted_class\n";
  for (const auto& p : log) {
    out << p.task << ',' << static_cast<int>(p.truth) << ',' << static_cast<int>(p.predicted) << ','
        << format_double(p.score) << ',' << p.true_class << ',' << p.predicted_class << '\n';
  }
}

inline std::vector<Prediction> read_predictions(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  if (line != "task_id,truth,predicted,score,true_class,predicted_class")
    throw ParseError(1, "unexpected prediction header");
  std::vector<Prediction> log;
  std::size_t lineno = 1;
  auto polarity = [&](std::string_view s) {
    if (s == "0") return Polarity::Real;
    if (s == "1") return Polarity::Fake;
    throw ParseError(lineno, "label must be 0 or 1");
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_fields(line);
    if (f.size() != 6) throw ParseError(lineno, "expected 6 fields, got " + std::to_string(f.size()));
    Prediction p;
    if (!detail::parse_number(f[0], p.task)) throw ParseError(lineno, "malformed task id");
    p.truth = polarity(f[1]);
    p.predicted = polarity(f[2]);
    if (!detail::parse_number(f[3], p.score)) throw ParseError(lineno, "malformed score");
    if (!(p.score >= 0.0 && p.score <= 1.0)) throw ValidationError("line " + std::to_string(lineno) + ": score outside [0, 1]");
    if (!detail::parse_number(f[4], p.true_class) || !detail::parse_number(f[5], p.predicted_class))
      throw ParseError(lineno, "malformed class index");
    log.push_back(p);
  }
  if (log.empty()) throw ValidationError("prediction log has no records");
  return log;
}

inline void write_pr_curves(std::ostream& out, const std::vector<TaskAP>& aps) {
  out << "task_id,threshold,precision,recall\n";
  for (const auto& t : aps)
    for (const auto& p : t.curve.points)
      out << t.task << ',' << format_double(p.threshold) << ',' << format_double(p.precision) << ','
          << format_double(p.recall) << '\n';
}

// ---- config echo -----------------------------------------------------------

inline ordered_json config_json(const ConfigEcho& echo) {
  ordered_json j = ordered_json::object();
  for (const auto& [k, v] : echo) j[k] = v;
  return j;
}

inline ConfigEcho read_config_json(std::istream& in) {
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, std::string("config.json: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config.json must hold an object");
  ConfigEcho echo;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_string()) throw ValidationError("config.json: value of '" + it.key() + "' is not a string");
    echo.emplace_back(it.key(), it.value().get<std::string>());
  }
  return echo;
}

// ---- metrics ---------------------------------------------------------------

struct MetricReport {
  std::vector<int> task_ids;
  double aa = 0.0;
  std::optional<double> af;              // needs two or more tasks
  std::optional<double> af_last_column;
  bool has_log = false;
  std::optional<double> aa_m;            // NA for the binary system
  std::vector<TaskAP> aps;
  double map = 0.0;
};

inline MetricReport compute_report(const AccuracyMatrix& b, const std::vector<int>& task_ids,
                                   const std::vector<Prediction>* log) {
  if (!b.complete()) throw ValidationError("accuracy matrix has unfilled entries");
  MetricReport r;
  r.task_ids = task_ids;
  r.aa = aa(b);
  if (b.size() >= 2) {
    r.af = af(b);
    r.af_last_column = af_last_column(b);
  }
  if (log && !log->empty()) {
    r.has_log = true;
    r.aa_m = aa_m(*log);
    r.aps = per_task_ap(*log);
    std::vector<double> values;
    for (const auto& t : r.aps) values.push_back(t.ap);
    r.map = mean_ap(values);
  }
  return r;
}

inline ordered_json metrics_json(const MetricReport& r, const ConfigEcho& echo) {
  ordered_json j;
  j["tasks"] = r.task_ids;
  j["AA"] = r.aa;
  j["AF"] = r.af ? ordered_json(*r.af) : ordered_json("NA");
  j["AF_last_column"] = r.af_last_column ? ordered_json(*r.af_last_column) : ordered_json("NA");
  if (r.has_log) {
    j["AA_M"] = r.aa_m ? ordered_json(*r.aa_m) : ordered_json("NA");
    ordered_json aps = ordered_json::array();
    for (const auto& t : r.aps) aps.push_back({{"task_id", t.task}, {"AP", t.ap}});
    j["AP"] = aps;
    j["mAP"] = r.map;
  }
  j["config"] = config_json(echo);
  return j;
}

inline std::string metrics_text(const MetricReport& r, const ConfigEcho& echo) {
  return metrics_json(r, echo).dump(2) + "\n";
}

/// Human-readable summary, percentages with two decimals.
inline std::string metrics_table(const MetricReport& r) {
  auto pct = [](std::optional<double> v) {
    if (!v) return std::string("NA");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "AA      " << pct(r.aa) << '\n';
  out << "AF      " << pct(r.af) << '\n';
  out << "AF-last " << pct(r.af_last_column) << '\n';
  if (r.has_log) {
    out << "AA-M    " << pct(r.aa_m) << '\n';
    for (const auto& t : r.aps) out << "AP[" << t.task << "]   " << pct(t.ap) << '\n';
    out << "mAP     " << pct(r.map) << '\n';
  }
  return out.str();
}

}  // namespace cdd
