#pragma once

// Independent reference computations and random generators for tests. None
// of these call the routines they are used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "cdd/metrics.hpp"
#include "cdd/tensor.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline cdd::Tensor random_tensor(cdd::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  cdd::Tensor t(std::move(shape));
  for (double& v : t.data()) v = g(rng);
  return t;
}

/// Random upper-triangular accuracies; entries below the diagonal are unused.
inline Matrix random_upper(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix b(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) b[i][j] = u(rng);
  return b;
}

inline cdd::AccuracyMatrix to_matrix(const Matrix& b) {
  cdd::AccuracyMatrix m(b.size());
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = i; j < b.size(); ++j) m.set(i, j, b[i][j]);
  return m;
}

// 1-based transcription: AA = (1/n) sum_i B_{i,n}.
inline double aa(const Matrix& b) {
  const std::size_t n = b.size();
  double s = 0.0;
  for (std::size_t i = 1; i <= n; ++i) s += b[i - 1][n - 1];
  return s / static_cast<double>(n);
}

// AF = 1/(n-1) sum_{i=1}^{n-1} BWT_i, BWT_i = 1/(n-i) sum_{j=i+1}^{n} (B_{i,j} - B_{i,i}).
inline double af(const Matrix& b) {
  const std::size_t n = b.size();
  double total = 0.0;
  for (std::size_t i = 1; i <= n - 1; ++i) {
    double bwt = 0.0;
    for (std::size_t j = i + 1; j <= n; ++j) bwt += b[i - 1][j - 1] - b[i - 1][i - 1];
    total += bwt / static_cast<double>(n - i);
  }
  return total / static_cast<double>(n - 1);
}

/// AP by enumerating all 2^n subsets and keeping those that a score threshold
/// can produce (every member scores strictly above every non-member).
inline double ap_by_subsets(const std::vector<double>& s, const std::vector<cdd::Polarity>& y) {
  const std::size_t n = s.size();
  double positives = 0.0;
  for (auto p : y) positives += p == cdd::Polarity::Fake;
  struct Cut {
    std::size_t size;
    double recall, precision;
  };
  std::vector<Cut> cuts;
  for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
    double lo_in = std::numeric_limits<double>::infinity(), hi_out = -std::numeric_limits<double>::infinity();
    std::size_t size = 0;
    double tp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1u) {
        lo_in = std::min(lo_in, s[i]);
        ++size;
        tp += y[i] == cdd::Polarity::Fake;
      } else {
        hi_out = std::max(hi_out, s[i]);
      }
    }
    if (lo_in > hi_out) cuts.push_back({size, tp / positives, tp / static_cast<double>(size)});
  }
  std::sort(cuts.begin(), cuts.end(), [](const Cut& a, const Cut& b) { return a.size < b.size; });
  double area = 0.0, prev = 0.0;
  for (const auto& c : cuts) {
    area += (c.recall - prev) * c.precision;
    prev = c.recall;
  }
  return area;
}

/// The exhaustive one-step herding choice given already chosen rows.
inline std::size_t herding_step(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& chosen) {
  // Compares n * k * (mean - candidate mean), k = chosen + 1, to keep ties exact.
  const std::size_t n = x.size(), f = x[0].size();
  const double k = static_cast<double>(chosen.size() + 1);
  std::size_t best = n;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n; ++c) {
    if (std::find(chosen.begin(), chosen.end(), c) != chosen.end()) continue;
    double d = 0.0;
    for (std::size_t j = 0; j < f; ++j) {
      double all = 0.0, picked = x[c][j];
      for (const auto& r : x) all += r[j];
      for (std::size_t i : chosen) picked += x[i][j];
      const double diff = k * all - static_cast<double>(n) * picked;
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

/// Central difference of a plain function of a flat vector.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  double m = *std::max_element(z.begin(), z.end());
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] - m);
  for (double& v : e) v /= s;
  return e;
}

}  // namespace oracle
