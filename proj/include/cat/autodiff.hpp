#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape records every operation of one forward pass in creation order, so the
// node list is already topologically sorted; backward() walks it in reverse.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "cat/tensor.hpp"

namespace cat {

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }

  /// Leaf whose gradient is collected by backward().
  Var parameter(Tensor value) { return push(std::move(value), {}, nullptr, true); }

  /// Records the result of an operation. The node only keeps its backward
  /// closure when at least one parent needs a gradient.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    if (!value.all_finite()) ++non_finite_;
    return push(std::move(value), std::move(parents), needs ? std::move(fn) : nullptr, needs);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Number of recorded operation results containing NaN or Inf.
  std::size_t non_finite_count() const noexcept { return non_finite_; }

  /// Gradient slot, allocated as zeros on first touch.
  Tensor& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

  /// Gradient of the last backward root with respect to `v`; zeros if `v` was unreachable.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Tensor::zeros(n.value.shape());
    return n.grad;
  }

  /// Reverse sweep seeded with d(root)/d(root) = 1.
  void backward(Var root) {
    if (!root.valid() || &root.tape() != this) throw ContractError("backward root is not on this tape");
    const Tensor& rv = nodes_[root.id()].value;
    if (!rv.is_scalar()) throw ContractError("backward root must be scalar, got shape " + shape_str(rv.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    grad_slot(root.id())[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(parents), std::move(fn), requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::size_t non_finite_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// c[m×n] += a[m×k] · b[k×n]
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

/// Plain (non-differentiable) matrix product.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  detail::gemm_acc(a.data().data(), b.data().data(), c.data().data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  Tensor c = matmul(a.value(), b.value());
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  return a.tape().record(std::move(c), {a.id(), b.id()}, [ia = a.id(), ib = b.id(), m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    if (t.requires_grad(ia)) {
      detail::gemm_nt_acc(g.data().data(), t.value(ib).data().data(), t.grad_slot(ia).data().data(), m, n, k);
    }
    if (t.requires_grad(ib)) {
      detail::gemm_tn_acc(t.value(ia).data().data(), g.data().data(), t.grad_slot(ib).data().data(), m, k, n);
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b.value()[i];
  return a.tape().record(std::move(c), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    for (std::size_t p : {ia, ib}) {
      if (!t.requires_grad(p)) continue;
      Tensor& gp = t.grad_slot(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b.value()[i];
  return a.tape().record(std::move(c), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_slot(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b.value()[i];
  return a.tape().record(std::move(c), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_slot(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_slot(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// Elementwise product with a constant tensor.
inline Var mul_const(Var a, const Tensor& c) {
  detail::require_same_shape("mul_const", a.value(), c);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return a.tape().record(std::move(out), {a.id()}, [ia = a.id(), c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  return a.tape().record(std::move(out), {a.id()}, [ia = a.id(), s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

/// x[..., n] + bias[n], broadcast over all leading positions.
inline Var add_bias(Var x, Var bias) {
  detail::require_same_tape(x, bias);
  const std::size_t n = x.value().cols();
  if (bias.value().size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.value().shape()) + " does not match last axis of " +
                         shape_str(x.value().shape()));
  }
  Tensor out = x.value();
  const std::size_t rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bias.value()[j];
  return x.tape().record(std::move(out), {x.id(), bias.id()}, [ix = x.id(), ib = bias.id(), rows, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad_slot(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_slot(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record(Tensor::scalar(s), {x.id()}, [ix = x.id()](Tape& t, std::size_t self) {
    const double g = t.grad_slot(self)[0];
    Tensor& gx = t.grad_slot(ix);
    for (double& v : gx.storage()) v += g;
  });
}

/// Sum whose rounding does not depend on element order: values are added in
/// ascending order, so any permutation of the input yields the same bits.
inline Var sum_sorted(Var x) {
  std::vector<double> vals(x.value().data().begin(), x.value().data().end());
  std::sort(vals.begin(), vals.end());
  double s = 0.0;
  for (double v : vals) s += v;
  return x.tape().record(Tensor::scalar(s), {x.id()}, [ix = x.id()](Tape& t, std::size_t self) {
    const double g = t.grad_slot(self)[0];
    Tensor& gx = t.grad_slot(ix);
    for (double& v : gx.storage()) v += g;
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Row sums of a matrix: [m×n] -> [m×1].
inline Var sum_cols(Var x) {
  detail::require_matrix("sum_cols", x.value());
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  Tensor out({m, 1});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += x.value()[i * n + j];
  return x.tape().record(std::move(out), {x.id()}, [ix = x.id(), m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i];
  });
}

/// Column means of a matrix: [m×n] -> [1×n].
inline Var mean_rows(Var x) {
  detail::require_matrix("mean_rows", x.value());
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  Tensor out({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.value()[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out.storage()) v *= inv;
  return x.tape().record(std::move(out), {x.id()}, [ix = x.id(), m, n, inv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] * inv;
  });
}

namespace detail {

// Iterates the slices of `shape` along `axis`: calls fn(base, stride, len).
template <class Fn>
void for_each_slice(const Shape& shape, std::size_t axis, Fn&& fn) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) fn(o * len * inner + in, inner, len);
}

// Backward of softmax along a slice: gx = y ⊙ (g − <g, y>).
inline void softmax_backward(const Tensor& y, const Tensor& g, Tensor& gx, std::size_t axis) {
  for_each_slice(y.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double dot = 0.0;
    for (std::size_t k = 0; k < len; ++k) dot += g[base + k * stride] * y[base + k * stride];
    for (std::size_t k = 0; k < len; ++k) {
      const std::size_t i = base + k * stride;
      gx[i] += y[i] * (g[i] - dot);
    }
  });
}

}  // namespace detail

/// Plain softmax along `axis`, max-subtracted.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  Tensor y = x;
  detail::for_each_slice(x.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * stride]);
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      double& v = y[base + k * stride];
      v = std::exp(v - mx);
      s += v;
    }
    for (std::size_t k = 0; k < len; ++k) y[base + k * stride] /= s;
  });
  return y;
}

inline Var softmax(Var x, std::size_t axis) {
  Tensor y = softmax(x.value(), axis);
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id(), axis](Tape& t, std::size_t self) {
    detail::softmax_backward(t.value(self), t.grad_slot(self), t.grad_slot(ix), axis);
  });
}

/// Row softmax restricted to entries where mask[i*n+j] != 0; masked entries are exactly 0.
/// Every row must keep at least one entry.
inline Var masked_softmax_rows(Var x, const std::vector<std::uint8_t>& mask) {
  detail::require_matrix("masked_softmax_rows", x.value());
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  if (mask.size() != m * n) throw DimensionError("masked_softmax_rows: mask size does not match " + shape_str(x.value().shape()));
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mask[i * n + j]) mx = std::max(mx, x.value()[i * n + j]);
    if (!std::isfinite(mx)) throw ContractError("masked_softmax_rows: row " + std::to_string(i) + " is fully masked");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask[i * n + j]) continue;
      y[i * n + j] = std::exp(x.value()[i * n + j] - mx);
      s += y[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= s;
  }
  // Masked outputs are constant zeros, so the generic softmax backward already
  // routes no gradient to them.
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id()](Tape& t, std::size_t self) {
    detail::softmax_backward(t.value(self), t.grad_slot(self), t.grad_slot(ix), 1);
  });
}

/// Layer normalization over the last axis with learned gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  detail::require_same_tape(x, gain);
  detail::require_same_tape(x, bias);
  const std::size_t n = x.value().cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias length must equal last axis of " + shape_str(x.value().shape()));
  }
  if (!(eps > 0.0)) throw ValidationError("layer_norm: eps must be positive");
  const std::size_t rows = x.value().rows();
  Tensor xhat(x.value().shape());
  std::vector<double> inv_std(rows);
  Tensor y(x.value().shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.value().data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * inv_std[r];
      y[r * n + j] = xhat[r * n + j] * gain.value()[j] + bias.value()[j];
    }
  }
  return x.tape().record(
      std::move(y), {x.id(), gain.id(), bias.id()},
      [ix = x.id(), ig = gain.id(), ib = bias.id(), xhat = std::move(xhat), inv_std = std::move(inv_std), rows, n](
          Tape& t, std::size_t self) {
        const Tensor& g = t.grad_slot(self);
        const Tensor& gv = t.value(ig);
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad_slot(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_slot(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
        if (t.requires_grad(ix)) {
          Tensor& gx = t.grad_slot(ix);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g[r * n + j] * gv[j];
              s1 += dxh;
              s2 += dxh * xhat[r * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g[r * n + j] * gv[j];
              gx[r * n + j] += inv_std[r] * (dxh - inv_n * s1 - xhat[r * n + j] * inv_n * s2);
            }
          }
        }
      });
}

/// GELU, exact erf form: x·Φ(x).
inline Var gelu(Var x) {
  Tensor y = x.value();
  for (double& v : y.storage()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad_slot(ix);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

inline Var log(Var x) {
  Tensor y = x.value();
  for (double& v : y.storage()) v = std::log(v);
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
  });
}

/// Square root; the derivative at exactly 0 is taken as 0.
inline Var sqrt(Var x) {
  Tensor y = x.value();
  for (double& v : y.storage()) v = std::sqrt(v);
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (yv[i] > 0.0) gx[i] += g[i] * 0.5 / yv[i];
  });
}

inline Var square(Var x) { return mul(x, x); }

/// Elementwise clamp to [lo, hi]; zero gradient where the bound is active.
inline Var clamp(Var x, double lo, double hi) {
  Tensor y = x.value();
  for (double& v : y.storage()) v = std::clamp(v, lo, hi);
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id(), lo, hi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > lo && xv[i] < hi) gx[i] += g[i];
  });
}

inline Var transpose(Var x) {
  detail::require_matrix("transpose", x.value());
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  Tensor y({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x.value()[i * n + j];
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id(), m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

inline Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  detail::require_matrix("slice_cols", x.value());
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  if (begin >= end || end > n) throw DimensionError("slice_cols: range out of bounds for " + shape_str(x.value().shape()));
  const std::size_t w = end - begin;
  Tensor y({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = x.value()[i * n + begin + j];
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id(), m, n, w, begin](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
  });
}

/// Rows [begin, end) of a matrix.
inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  detail::require_matrix("slice_rows", x.value());
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  if (begin >= end || end > m) throw DimensionError("slice_rows: range out of bounds for " + shape_str(x.value().shape()));
  std::vector<double> data(x.value().data().begin() + begin * n, x.value().data().begin() + end * n);
  Tensor y({end - begin, n}, std::move(data));
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id(), n, begin](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
  });
}

/// Horizontal concatenation of matrices sharing their row count.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].value().dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths, ids;
  for (const Var& p : parts) {
    detail::require_matrix("concat_cols", p.value());
    if (p.value().dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.value().dim(1));
    ids.push_back(p.id());
    total += p.value().dim(1);
  }
  Tensor y({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) y[i * total + off + j] = v[i * widths[k] + j];
    off += widths[k];
  }
  return parts[0].tape().record(std::move(y), ids, [ids, widths, m, total](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& gp = t.grad_slot(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

/// Vertical concatenation of matrices sharing their column count.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].value().dim(1);
  std::vector<double> data;
  std::vector<std::size_t> ids, sizes;
  for (const Var& p : parts) {
    detail::require_matrix("concat_rows", p.value());
    if (p.value().dim(1) != n) throw DimensionError("concat_rows: column counts differ");
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    ids.push_back(p.id());
    sizes.push_back(p.value().size());
  }
  const std::size_t m = data.size() / n;
  Tensor y({m, n}, std::move(data));
  return parts[0].tape().record(std::move(y), ids, [ids, sizes](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& gp = t.grad_slot(ids[k]);
        for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += g[off + i];
      }
      off += sizes[k];
    }
  });
}

/// Row gather: out[i] = x[index[i]].
inline Var gather_rows(Var x, const std::vector<std::size_t>& index) {
  detail::require_matrix("gather_rows", x.value());
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Tensor y({index.size(), n});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= m) throw DimensionError("gather_rows: index out of range");
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x.value()[index[i] * n + j];
  }
  return x.tape().record(std::move(y), {x.id()}, [ix = x.id(), index, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gx[index[i] * n + j] += g[i * n + j];
  });
}

/// Checks that every row of a class-distribution matrix sums to 1 (±1e-6).
inline void validate_distribution_rows(const Tensor& targets, const char* what) {
  const std::size_t n = targets.rows(), c = targets.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += targets[i * c + j];
    if (std::abs(s - 1.0) > 1e-6) {
      throw ValidationError(std::string(what) + ": target row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

/// Mean over the batch of −Σ target·log softmax(logits), via log-sum-exp.
inline Var cross_entropy(Var logits, const Tensor& targets) {
  detail::require_matrix("cross_entropy", logits.value());
  detail::require_same_shape("cross_entropy", logits.value(), targets);
  validate_distribution_rows(targets, "cross_entropy");
  const std::size_t n = targets.dim(0), c = targets.dim(1);
  const Tensor& z = logits.value();
  Tensor probs({n, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, z[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[i * c + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(z[i * c + j] - lse);
      loss -= targets[i * c + j] * (z[i * c + j] - lse);
    }
  }
  loss /= static_cast<double>(n);
  return logits.tape().record(Tensor::scalar(loss), {logits.id()},
                              [il = logits.id(), probs = std::move(probs), targets, n](Tape& t, std::size_t self) {
                                const double g = t.grad_slot(self)[0] / static_cast<double>(n);
                                Tensor& gl = t.grad_slot(il);
                                for (std::size_t i = 0; i < probs.size(); ++i) gl[i] += g * (probs[i] - targets[i]);
                              });
}

}  // namespace cat
