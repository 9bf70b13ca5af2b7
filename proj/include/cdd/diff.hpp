#pragma once

// Reverse-mode differentiation over small dense tensors.
//
// A Tape records every primitive evaluated on Vars in execution order. Calling
// backward() on a scalar Var sweeps the tape once in reverse and leaves the
// gradient of that scalar with respect to every recorded value.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdd/error.hpp"
#include "cdd/tensor.hpp"

namespace cdd::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records an input. It receives a gradient iff t.requires_grad().
  Var leaf(Tensor t) {
    const bool needs = t.requires_grad();
    return push(std::move(t), {}, nullptr, needs);
  }

  Var constant(Tensor t) {
    t.set_requires_grad(false);
    return push(std::move(t), {}, nullptr, false);
  }

  /// Records the output of a primitive. `backprop` is invoked with this tape and
  /// the output's id during backward, and must accumulate into the inputs.
  Var record(Tensor value, std::vector<std::size_t> inputs, Backprop backprop) {
    bool needs = false;
    for (std::size_t in : inputs) {
      if (in >= nodes_.size()) throw ContractError("operation input is not on this tape");
      needs = needs || nodes_[in].needs_grad;
    }
    if (!value.all_finite()) throw DomainError("non-finite value produced in forward pass");
    return push(std::move(value), std::move(inputs), needs ? std::move(backprop) : nullptr, needs);
  }

  void backward(Var out) {
    check_owner(out);
    if (value(out).size() != 1) {
      throw ContractError("backward requires a scalar output, got shape " +
                          shape_string(value(out).shape()));
    }
    for (auto& node : nodes_) node.grad.clear();
    visits_ = 0;
    grad_mut(out.id)[0] = 1.0;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.needs_grad || node.grad.empty()) continue;
      if (node.backprop) {
        node.backprop(*this, i);
        ++visits_;
      }
    }
    for (const auto& node : nodes_)
      for (double g : node.grad)
        if (!std::isfinite(g)) throw DomainError("non-finite gradient in backward pass");
  }

  const Tensor& value(Var v) const {
    check_owner(v);
    return nodes_[v.id].value;
  }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

  /// Gradient after backward(); zeros when the value was not reached.
  std::vector<double> grad(Var v) const {
    check_owner(v);
    const Node& node = nodes_[v.id];
    if (node.grad.empty()) return std::vector<double>(node.value.size(), 0.0);
    return node.grad;
  }

  /// Copy of the value with its gradient attached.
  Tensor with_grad(Var v) const {
    Tensor t = value(v);
    t.set_grad(grad(v));
    return t;
  }

  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Gradient of the node, or empty when nothing has flowed into it yet.
  const std::vector<double>& out_grad(std::size_t id) const { return nodes_[id].grad; }

  /// Accumulation buffer of an input, or nullptr when it takes no gradient.
  double* accum(std::size_t id) {
    if (!nodes_[id].needs_grad) return nullptr;
    return grad_mut(id).data();
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t operations() const noexcept {
    return static_cast<std::size_t>(std::count_if(
        nodes_.begin(), nodes_.end(), [](const Node& n) { return !n.inputs.empty(); }));
  }
  std::size_t last_backward_visits() const noexcept { return visits_; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ContractError("variable belongs to another tape");
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    Backprop backprop;
    bool needs_grad = false;
    std::vector<double> grad;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, Backprop bp, bool needs) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(bp), needs, {}});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<double>& grad_mut(std::size_t id) {
    Node& node = nodes_[id];
    if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    return node.grad;
  }

  std::deque<Node> nodes_;
  std::size_t visits_ = 0;
};

namespace detail {

inline Tape& common_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

inline Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("unbound variable");
  return *a.tape;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got shape " + shape_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// The 1-D slices a reduction or softmax runs along.
struct Lanes {
  std::size_t count;
  std::size_t length;
  std::size_t lane_stride;
  std::size_t elem_stride;
  Shape reduced;

  std::size_t at(std::size_t lane, std::size_t i) const { return lane * lane_stride + i * elem_stride; }
};

inline Lanes lanes(const Tensor& t, int axis) {
  if (t.rank() == 0) {
    if (axis != 0) throw DimensionError("axis out of range");
    return {1, 1, 1, 1, Shape{}};
  }
  if (t.rank() == 1) {
    if (axis != 0) throw DimensionError("axis out of range for a vector");
    return {1, t.size(), t.size(), 1, Shape{}};
  }
  const std::size_t r = t.shape()[0], c = t.shape()[1];
  if (axis == 1) return {r, c, c, 1, Shape{r}};
  if (axis == 0) return {c, r, 1, c, Shape{c}};
  throw DimensionError("axis out of range for a matrix");
}

inline void elementwise_backprop(Tape& tape, std::size_t self, std::size_t in,
                                 const std::function<double(double x, double y)>& dydx) {
  double* gi = tape.accum(in);
  if (!gi) return;
  const auto& g = tape.out_grad(self);
  const auto x = tape.value(in).data();
  const auto y = tape.value(self).data();
  for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * dydx(x[i], y[i]);
}

inline Var unary(Var a, const std::function<double(double)>& f,
                 std::function<double(double, double)> dydx) {
  Tape& tape = tape_of(a);
  Tensor out = tape.value(a);
  for (double& v : out.data()) v = f(v);
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, dydx = std::move(dydx)](Tape& t, std::size_t self) {
    elementwise_backprop(t, self, ia, dydx);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  const std::size_t n = A.rows(), m = A.cols(), k = B.cols();
  if (B.rows() != m) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()));
  }
  Tensor out(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < m; ++l) {
      const double av = A(i, l);
      for (std::size_t j = 0; j < k; ++j) out(i, j) += av * B(l, j);
    }
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib, n, m, k](Tape& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (double* ga = t.accum(ia)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < m; ++l) {
          double s = 0.0;
          for (std::size_t j = 0; j < k; ++j) s += g[i * k + j] * B(l, j);
          ga[i * m + l] += s;
        }
    }
    if (double* gb = t.accum(ib)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < m; ++l) {
          const double av = A(i, l);
          for (std::size_t j = 0; j < k; ++j) gb[l * k + j] += av * g[i * k + j];
        }
    }
  });
}

inline Var transpose(Var a) {
  Tape& tape = detail::tape_of(a);
  const Tensor& A = tape.value(a);
  detail::require_matrix(A, "transpose");
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = A(i, j);
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, r, c](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

/// Adds a length-k vector to every row of an n x k matrix. The only broadcast.
inline Var add_row_bias(Var x, Var b) {
  Tape& tape = detail::common_tape(x, b);
  const Tensor& X = tape.value(x);
  const Tensor& B = tape.value(b);
  detail::require_matrix(X, "add_row_bias");
  if (B.rank() != 1 || B.size() != X.cols()) {
    throw DimensionError("bias of shape " + shape_string(B.shape()) + " does not fit rows of " +
                         shape_string(X.shape()));
  }
  Tensor out = X;
  const std::size_t n = X.rows(), k = X.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out(i, j) += B[j];
  const std::size_t ix = x.id, ib = b.id;
  return tape.record(std::move(out), {ix, ib}, [ix, ib, n, k](Tape& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    if (double* gx = t.accum(ix))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (double* gb = t.accum(ib))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
  });
}

/// x[n,d] . w[d,k] + b[k]
inline Var affine(Var x, Var w, Var b) {
  Tape& tape = detail::common_tape(x, w);
  const Tensor& X = tape.value(x);
  const Tensor& W = tape.value(w);
  detail::require_matrix(X, "affine");
  detail::require_matrix(W, "affine");
  if (X.cols() != W.rows()) {
    throw DimensionError("affine: input width " + std::to_string(X.cols()) +
                         " does not match weight rows " + std::to_string(W.rows()));
  }
  return add_row_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b);
  detail::require_same_shape(tape.value(a), tape.value(b), "add");
  Tensor out = tape.value(a);
  const auto bv = tape.value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    if (double* ga = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = t.accum(ib))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b);
  detail::require_same_shape(tape.value(a), tape.value(b), "sub");
  Tensor out = tape.value(a);
  const auto bv = tape.value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    if (double* ga = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = t.accum(ib))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

inline Var mul(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b);
  detail::require_same_shape(tape.value(a), tape.value(b), "mul");
  Tensor out = tape.value(a);
  const auto bv = tape.value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    const auto av = t.value(ia).data();
    const auto bv = t.value(ib).data();
    if (double* ga = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    if (double* gb = t.accum(ib))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

inline Var scale(Var a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

/// Multiplies every element of `a` by the scalar Var `s`.
inline Var scale_by(Var a, Var s) {
  Tape& tape = detail::common_tape(a, s);
  if (tape.value(s).size() != 1) throw DimensionError("scale_by expects a scalar factor");
  const double c = tape.value(s)[0];
  Tensor out = tape.value(a);
  for (double& v : out.data()) v *= c;
  const std::size_t ia = a.id, is = s.id;
  return tape.record(std::move(out), {ia, is}, [ia, is](Tape& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    const auto av = t.value(ia).data();
    const double c = t.value(is)[0];
    if (double* ga = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    if (double* gs = t.accum(is)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      gs[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
  return detail::unary(a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  for (double v : detail::tape_of(a).value(a).data())
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// log(1 + e^x), evaluated without overflow.
inline Var softplus(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return detail::stable_sigmoid(x); });
}

/// Limits values to [lo, hi]; gradient passes only inside the interval.
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var softmax(Var a, int axis) {
  Tape& tape = detail::tape_of(a);
  const Tensor& X = tape.value(a);
  const detail::Lanes ln = detail::lanes(X, axis);
  Tensor out = X;
  for (std::size_t l = 0; l < ln.count; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ln.length; ++i) mx = std::max(mx, X[ln.at(l, i)]);
    double z = 0.0;
    for (std::size_t i = 0; i < ln.length; ++i) {
      const double e = std::exp(X[ln.at(l, i)] - mx);
      out[ln.at(l, i)] = e;
      z += e;
    }
    for (std::size_t i = 0; i < ln.length; ++i) out[ln.at(l, i)] /= z;
  }
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, ln](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    const Tensor& s = t.value(self);
    for (std::size_t l = 0; l < ln.count; ++l) {
      double dot = 0.0;
      for (std::size_t i = 0; i < ln.length; ++i) dot += g[ln.at(l, i)] * s[ln.at(l, i)];
      for (std::size_t i = 0; i < ln.length; ++i) {
        const std::size_t e = ln.at(l, i);
        ga[e] += s[e] * (g[e] - dot);
      }
    }
  });
}

inline Var log_softmax(Var a, int axis) {
  Tape& tape = detail::tape_of(a);
  const Tensor& X = tape.value(a);
  const detail::Lanes ln = detail::lanes(X, axis);
  Tensor out = X;
  for (std::size_t l = 0; l < ln.count; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ln.length; ++i) mx = std::max(mx, X[ln.at(l, i)]);
    double z = 0.0;
    for (std::size_t i = 0; i < ln.length; ++i) z += std::exp(X[ln.at(l, i)] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t i = 0; i < ln.length; ++i) out[ln.at(l, i)] = X[ln.at(l, i)] - lz;
  }
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, ln](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    for (std::size_t l = 0; l < ln.count; ++l) {
      double gs = 0.0;
      for (std::size_t i = 0; i < ln.length; ++i) gs += g[ln.at(l, i)];
      for (std::size_t i = 0; i < ln.length; ++i) {
        const std::size_t e = ln.at(l, i);
        ga[e] += g[e] - std::exp(y[e]) * gs;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum of all elements, as a scalar.
inline Var sum(Var a) {
  Tape& tape = detail::tape_of(a);
  double s = 0.0;
  for (double v : tape.value(a).data()) s += v;
  const std::size_t ia = a.id;
  return tape.record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const double g = t.out_grad(self)[0];
    for (std::size_t i = 0; i < t.value(ia).size(); ++i) ga[i] += g;
  });
}

inline Var sum(Var a, int axis) {
  Tape& tape = detail::tape_of(a);
  const Tensor& X = tape.value(a);
  const detail::Lanes ln = detail::lanes(X, axis);
  Tensor out(ln.reduced);
  for (std::size_t l = 0; l < ln.count; ++l)
    for (std::size_t i = 0; i < ln.length; ++i) out[l] += X[ln.at(l, i)];
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, ln](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    for (std::size_t l = 0; l < ln.count; ++l)
      for (std::size_t i = 0; i < ln.length; ++i) ga[ln.at(l, i)] += g[l];
  });
}

inline Var mean(Var a) {
  const std::size_t n = detail::tape_of(a).value(a).size();
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

inline Var mean(Var a, int axis) {
  const detail::Lanes ln = detail::lanes(detail::tape_of(a).value(a), axis);
  return scale(sum(a, axis), 1.0 / static_cast<double>(ln.length));
}

/// Maximum along an axis. Gradient goes to one element per lane, the lowest
/// index among ties.
inline Var max(Var a, int axis) {
  Tape& tape = detail::tape_of(a);
  const Tensor& X = tape.value(a);
  const detail::Lanes ln = detail::lanes(X, axis);
  if (ln.length == 0) throw DimensionError("max over an empty axis");
  Tensor out(ln.reduced);
  std::vector<std::size_t> arg(ln.count);
  for (std::size_t l = 0; l < ln.count; ++l) {
    std::size_t best = ln.at(l, 0);
    for (std::size_t i = 1; i < ln.length; ++i)
      if (X[ln.at(l, i)] > X[best]) best = ln.at(l, i);
    arg[l] = best;
    out[l] = X[best];
  }
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, arg = std::move(arg)](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    for (std::size_t l = 0; l < arg.size(); ++l) ga[arg[l]] += g[l];
  });
}

/// Cosine similarity of two equal-length vectors.
inline Var cosine(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.rank() != 1 || A.shape() != B.shape()) {
    throw DimensionError("cosine expects two vectors of equal length, got " + shape_string(A.shape()) +
                         " and " + shape_string(B.shape()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) {
    dot += A[i] * B[i];
    na += A[i] * A[i];
    nb += B[i] * B[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine of a zero-norm vector");
  const double c = std::clamp(dot / (na * nb), -1.0, 1.0);
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(Tensor::scalar(c), {ia, ib}, [ia, ib, na, nb, c](Tape& t, std::size_t self) {
    const double g = t.out_grad(self)[0];
    const auto av = t.value(ia).data();
    const auto bv = t.value(ib).data();
    if (double* ga = t.accum(ia))
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (bv[i] / (na * nb) - c * av[i] / (na * na));
    if (double* gb = t.accum(ib))
      for (std::size_t i = 0; i < bv.size(); ++i) gb[i] += g * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
  });
}

/// Scales every row of a matrix to unit L2 norm.
inline Var row_normalize(Var a) {
  Tape& tape = detail::tape_of(a);
  const Tensor& X = tape.value(a);
  detail::require_matrix(X, "row_normalize");
  const std::size_t n = X.rows(), d = X.cols();
  Tensor out = X;
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += X(i, j) * X(i, j);
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) throw DegenerateInputError("zero-norm row " + std::to_string(i) + " in normalization");
    for (std::size_t j = 0; j < d; ++j) out(i, j) /= norms[i];
  }
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, n, d, norms = std::move(norms)](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += y(i, j) * g[i * d + j];
      for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += (g[i * d + j] - y(i, j) * dot) / norms[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing

struct Coord {
  std::size_t row;
  std::size_t col;
};

/// Picks matrix elements into a vector, out[m] = x[coords[m]].
inline Var gather(Var a, std::vector<Coord> coords) {
  Tape& tape = detail::tape_of(a);
  const Tensor& X = tape.value(a);
  detail::require_matrix(X, "gather");
  Tensor out(Shape{coords.size()});
  for (std::size_t m = 0; m < coords.size(); ++m) {
    if (coords[m].row >= X.rows() || coords[m].col >= X.cols()) throw DimensionError("gather index out of range");
    out[m] = X(coords[m].row, coords[m].col);
  }
  const std::size_t ia = a.id, cols = X.cols();
  return tape.record(std::move(out), {ia}, [ia, cols, coords = std::move(coords)](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    for (std::size_t m = 0; m < coords.size(); ++m) ga[coords[m].row * cols + coords[m].col] += g[m];
  });
}

inline Var select_columns(Var a, std::vector<std::size_t> cols) {
  Tape& tape = detail::tape_of(a);
  const Tensor& X = tape.value(a);
  detail::require_matrix(X, "select_columns");
  const std::size_t n = X.rows(), c = X.cols();
  Tensor out(Shape{n, cols.size()});
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] >= c) throw DimensionError("column index out of range");
    for (std::size_t i = 0; i < n; ++i) out(i, j) = X(i, cols[j]);
  }
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, n, c, cols = std::move(cols)](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    const std::size_t k = cols.size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) ga[i * c + cols[j]] += g[i * k + j];
  });
}

inline Var select_rows(Var a, std::vector<std::size_t> rows) {
  Tape& tape = detail::tape_of(a);
  const Tensor& X = tape.value(a);
  detail::require_matrix(X, "select_rows");
  const std::size_t c = X.cols();
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= X.rows()) throw DimensionError("row index out of range");
    for (std::size_t j = 0; j < c; ++j) out(i, j) = X(rows[i], j);
  }
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, c, rows = std::move(rows)](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[rows[i] * c + j] += g[i * c + j];
  });
}

inline Var concat_rows(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require_matrix(A, "concat_rows");
  detail::require_matrix(B, "concat_rows");
  if (A.cols() != B.cols()) throw DimensionError("concat_rows: column counts differ");
  std::vector<double> data(A.values());
  data.insert(data.end(), B.values().begin(), B.values().end());
  const std::size_t na = A.size();
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(Tensor(Shape{A.rows() + B.rows(), A.cols()}, std::move(data)), {ia, ib},
                     [ia, ib, na](Tape& t, std::size_t self) {
                       const auto& g = t.out_grad(self);
                       if (double* ga = t.accum(ia))
                         for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                       if (double* gb = t.accum(ib))
                         for (std::size_t i = na; i < g.size(); ++i) gb[i - na] += g[i];
                     });
}

inline Var concat_cols(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require_matrix(A, "concat_cols");
  detail::require_matrix(B, "concat_cols");
  if (A.rows() != B.rows()) throw DimensionError("concat_cols: row counts differ");
  const std::size_t n = A.rows(), ka = A.cols(), kb = B.cols();
  Tensor out(Shape{n, ka + kb});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ka; ++j) out(i, j) = A(i, j);
    for (std::size_t j = 0; j < kb; ++j) out(i, ka + j) = B(i, j);
  }
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib, n, ka, kb](Tape& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    const std::size_t k = ka + kb;
    if (double* ga = t.accum(ia))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ka; ++j) ga[i * ka + j] += g[i * k + j];
    if (double* gb = t.accum(ib))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < kb; ++j) gb[i * kb + j] += g[i * k + ka + j];
  });
}

/// Same data under a new shape of equal size.
inline Var reshape(Var a, Shape shape) {
  Tape& tape = detail::tape_of(a);
  const Tensor& X = tape.value(a);
  if (shape_size(shape) != X.size()) throw DimensionError("reshape to " + shape_string(shape) + " changes size");
  Tensor out(std::move(shape), X.values());
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    double* ga = t.accum(ia);
    const auto& g = t.out_grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Constant copy of a value; blocks gradient flow.
inline Var detach(Var a) {
  Tape& tape = detail::tape_of(a);
  return tape.constant(tape.value(a));
}

// ---------------------------------------------------------------------------
// Verification

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Largest relative disagreement between the tape gradient of `f` at `x` and a
/// central finite difference: |analytic - numeric| / max(1, |numeric|).
inline double grad_check(const ScalarFn& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check step must be positive");
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor input = x;
    input.set_requires_grad(true);
    Var in = tape.leaf(std::move(input));
    Var out = f(tape, in);
    if (tape.value(out).size() != 1) throw ContractError("grad_check needs a scalar-valued function");
    tape.backward(out);
    analytic = tape.grad(in);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    Var out = f(tape, tape.constant(at));
    return tape.value(out).item();
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace cdd::ad
