#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cdd/error.hpp"
#include "cdd/tensor.hpp"

namespace cdd {

/// Adaptive-moment optimizer with the usual defaults (beta1 0.9, beta2 0.999,
/// eps 1e-8). Holds first/second moments per parameter tensor.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    for (const Tensor* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const noexcept { return lr_; }
  std::size_t steps() const noexcept { return t_; }

  /// grads[k] is the gradient of params[k].
  void step(const std::vector<std::vector<double>>& grads) {
    if (grads.size() != params_.size()) throw ContractError("one gradient per parameter required");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto data = params_[k]->data();
      const auto& g = grads[k];
      if (g.size() != data.size()) throw DimensionError("gradient size differs from parameter");
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

 private:
  std::vector<Tensor*> params_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace cdd
