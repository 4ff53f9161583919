#pragma once

// Tape-based reverse-mode differentiation over dense double tensors.
//
// Every op appends one node to the tape; creation order is a topological
// order, so backward() is a single reverse sweep. Nodes only carry gradients
// when some ancestor leaf was created with Tape::variable().

#include <cmath>
#include <cstddef>
#include <deque>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "addex/tensor.hpp"

namespace addex {

enum class OpKind {
  kLeaf,
  kDense,
  kConv2d,
  kRelu,
  kSoftplus,
  kSpatialSum,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kDot,
  kSum,
  kL1Norm,
  kL2Norm,
  kLog,
  kDivScalar,
  kReshape,
};

enum class Padding { kValid, kSame };

struct TapeNode {
  OpKind kind = OpKind::kLeaf;
  std::vector<std::size_t> inputs;
  Tensor value;
  bool requires_grad = false;
  // Op attributes: constant factor for kScale/kAddScalar, padding for kConv2d.
  double constant = 0.0;
  Padding padding = Padding::kValid;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  double item() const { return value().item(); }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked (parameters, inputs under test).
  Var variable(Tensor value) { return push_leaf(std::move(value), true); }

  /// Leaf treated as a constant; no gradient flows into it.
  Var constant(Tensor value) { return push_leaf(std::move(value), false); }

  const TapeNode& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  Var push(OpKind kind, std::vector<std::size_t> inputs, Tensor out,
           double constant = 0.0, Padding padding = Padding::kValid) {
    if (!out.all_finite()) {
      throw NumericError("non-finite value produced by op " +
                         std::to_string(static_cast<int>(kind)));
    }
    TapeNode n;
    n.kind = kind;
    n.requires_grad = false;
    for (std::size_t in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    n.inputs = std::move(inputs);
    n.value = std::move(out);
    n.constant = constant;
    n.padding = padding;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

 private:
  Var push_leaf(Tensor value, bool requires_grad) {
    if (!value.all_finite()) throw NumericError("non-finite leaf value");
    TapeNode n;
    n.kind = OpKind::kLeaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  // deque keeps references to earlier node values stable while pushing.
  std::deque<TapeNode> nodes_;
};

inline const Tensor& Var::value() const { return tape->node(id).value; }

namespace detail {

inline Tape& common_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape;
}

inline double softplus(double x) {
  // log(1 + exp(x)) without overflow for large x.
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline std::size_t conv_pad(std::size_t k, Padding p) {
  return p == Padding::kSame ? (k - 1) / 2 : 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

/// out = W x + bias, with x of shape [k], W of shape [m x k], bias of shape [m].
inline Var dense(Var x, Var weight, Var bias) {
  Tape& tape = detail::common_tape(x, weight, "dense");
  detail::common_tape(x, bias, "dense");
  const Tensor& xv = x.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  if (xv.rank() != 1 || w.rank() != 2 || b.rank() != 1 || w.shape[1] != xv.shape[0] ||
      w.shape[0] != b.shape[0]) {
    throw ShapeError("dense: x " + to_string(xv.shape) + ", W " + to_string(w.shape) +
                     ", bias " + to_string(b.shape));
  }
  const std::size_t m = w.shape[0], k = w.shape[1];
  Tensor out({m});
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = w.data.data() + r * k;
    double acc = 0.0;
    for (std::size_t c = 0; c < k; ++c) acc += row[c] * xv.data[c];
    out.data[r] = acc + b.data[r];
  }
  return tape.push(OpKind::kDense, {x.id, weight.id, bias.id}, std::move(out));
}

/// Stride-1 cross-correlation. x is [H x W x C], kernels [k x k x C x n], bias [n].
inline Var conv2d(Var x, Var kernels, Var bias, Padding padding) {
  Tape& tape = detail::common_tape(x, kernels, "conv2d");
  detail::common_tape(x, bias, "conv2d");
  const Tensor& xv = x.value();
  const Tensor& kv = kernels.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 3 || kv.rank() != 4 || bv.rank() != 1 || kv.shape[0] != kv.shape[1]) {
    throw ShapeError("conv2d: x " + to_string(xv.shape) + ", kernels " + to_string(kv.shape) +
                     ", bias " + to_string(bv.shape));
  }
  const std::size_t H = xv.shape[0], W = xv.shape[1], C = xv.shape[2];
  const std::size_t k = kv.shape[0], n = kv.shape[3];
  if (kv.shape[2] != C) {
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(C) +
                     " channels, kernels expect " + std::to_string(kv.shape[2]));
  }
  if (bv.shape[0] != n) {
    throw ShapeError("conv2d: bias " + to_string(bv.shape) + " for " + std::to_string(n) +
                     " output channels");
  }
  if (k > H || k > W) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than input " +
                     to_string(xv.shape));
  }
  if (padding == Padding::kSame && k % 2 == 0) {
    throw ShapeError("conv2d: same padding needs an odd kernel size");
  }
  const std::size_t pad = detail::conv_pad(k, padding);
  const std::size_t Ho = padding == Padding::kSame ? H : H - k + 1;
  const std::size_t Wo = padding == Padding::kSame ? W : W - k + 1;
  Tensor out({Ho, Wo, n});
  for (std::size_t oh = 0; oh < Ho; ++oh) {
    for (std::size_t ow = 0; ow < Wo; ++ow) {
      double* o = out.data.data() + (oh * Wo + ow) * n;
      for (std::size_t j = 0; j < n; ++j) o[j] = bv.data[j];
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + ky) - static_cast<std::ptrdiff_t>(pad);
        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + kx) - static_cast<std::ptrdiff_t>(pad);
          if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* xin = xv.data.data() + (static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)) * C;
          const double* kk = kv.data.data() + (ky * k + kx) * C * n;
          for (std::size_t c = 0; c < C; ++c) {
            const double xval = xin[c];
            if (xval == 0.0) continue;
            const double* kc = kk + c * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += xval * kc[j];
          }
        }
      }
    }
  }
  return tape.push(OpKind::kConv2d, {x.id, kernels.id, bias.id}, std::move(out), 0.0, padding);
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return x.tape->push(OpKind::kRelu, {x.id}, std::move(out));
}

/// log(1 + exp(x)), elementwise.
inline Var softplus(Var x) {
  Tensor out = x.value();
  for (double& v : out.data) v = detail::softplus(v);
  return x.tape->push(OpKind::kSoftplus, {x.id}, std::move(out));
}

/// Sums an [H x W x n] map over its spatial positions, giving [n].
inline Var spatial_sum(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("spatial_sum: expects [H x W x n], got " + to_string(xv.shape));
  const std::size_t n = xv.shape[2];
  const std::size_t positions = xv.shape[0] * xv.shape[1];
  Tensor out({n});
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t c = 0; c < n; ++c) out.data[c] += xv.data[p * n + c];
  }
  return x.tape->push(OpKind::kSpatialSum, {x.id}, std::move(out));
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return tape.push(OpKind::kAdd, {a.id, b.id}, std::move(out));
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return tape.push(OpKind::kSub, {a.id, b.id}, std::move(out));
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return tape.push(OpKind::kMul, {a.id, b.id}, std::move(out));
}

inline Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.data) v *= factor;
  return x.tape->push(OpKind::kScale, {x.id}, std::move(out), factor);
}

inline Var add_scalar(Var x, double offset) {
  Tensor out = x.value();
  for (double& v : out.data) v += offset;
  return x.tape->push(OpKind::kAddScalar, {x.id}, std::move(out), offset);
}

inline Var dot(Var a, Var b) {
  Tape& tape = detail::common_tape(a, b, "dot");
  require_same_shape(a.value(), b.value(), "dot");
  return tape.push(OpKind::kDot, {a.id, b.id},
                   Tensor::scalar(dot_of(a.value().data, b.value().data)));
}

inline Var sum(Var x) {
  return x.tape->push(OpKind::kSum, {x.id}, Tensor::scalar(sum_of(x.value().data)));
}

inline Var l1norm(Var x) {
  double s = 0.0;
  for (double v : x.value().data) s += std::abs(v);
  return x.tape->push(OpKind::kL1Norm, {x.id}, Tensor::scalar(s));
}

inline Var l2norm(Var x) {
  return x.tape->push(OpKind::kL2Norm, {x.id},
                      Tensor::scalar(std::sqrt(dot_of(x.value().data, x.value().data))));
}

/// Natural logarithm; every entry must be strictly positive.
inline Var log(Var x) {
  Tensor out = x.value();
  for (double& v : out.data) {
    if (!(v > 0.0)) throw std::domain_error("log: non-positive input");
    v = std::log(v);
  }
  return x.tape->push(OpKind::kLog, {x.id}, std::move(out));
}

/// x / s for a scalar node s.
inline Var div(Var x, Var s) {
  Tape& tape = detail::common_tape(x, s, "div");
  if (s.value().size() != 1) throw ShapeError("div: divisor must be scalar, got " + to_string(s.shape()));
  const double d = s.value().item();
  if (d == 0.0) throw std::domain_error("div: division by zero");
  Tensor out = x.value();
  for (double& v : out.data) v /= d;
  return tape.push(OpKind::kDivScalar, {x.id, s.id}, std::move(out));
}

inline Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.value().size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor out(std::move(shape), x.value().data);
  return x.tape->push(OpKind::kReshape, {x.id}, std::move(out));
}

inline Var flatten(Var x) { return reshape(x, Shape{x.value().size()}); }

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients of one scalar root with respect to every node that requires grad.
class GradientMap {
 public:
  GradientMap() = default;
  explicit GradientMap(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  /// d(root)/d(v); zero when v does not influence the root.
  const Tensor& operator[](Var v) const {
    const Tensor& g = grads_.at(v.id);
    if (g.empty()) {
      throw std::out_of_range("no gradient tracked for node " + std::to_string(v.id) +
                              " (constant or unrelated to any variable)");
    }
    return g;
  }

  bool tracked(Var v) const { return v.id < grads_.size() && !grads_[v.id].empty(); }

 private:
  std::vector<Tensor> grads_;
};

namespace detail {

inline void backward_node(const Tape& tape, const TapeNode& node, const Tensor& g,
                          std::vector<Tensor>& grads, std::vector<char>& touched) {
  auto wants = [&](std::size_t slot) { return tape.node(node.inputs[slot]).requires_grad; };
  auto grad_of = [&](std::size_t slot) -> Tensor& {
    const std::size_t id = node.inputs[slot];
    touched[id] = 1;
    return grads[id];
  };
  auto input = [&](std::size_t slot) -> const Tensor& { return tape.node(node.inputs[slot]).value; };

  switch (node.kind) {
    case OpKind::kLeaf:
      return;
    case OpKind::kDense: {
      const Tensor& x = input(0);
      const Tensor& w = input(1);
      const std::size_t m = w.shape[0], k = w.shape[1];
      if (wants(0)) {
        Tensor& gx = grad_of(0);
        for (std::size_t r = 0; r < m; ++r) {
          const double gr = g.data[r];
          if (gr == 0.0) continue;
          const double* row = w.data.data() + r * k;
          for (std::size_t c = 0; c < k; ++c) gx.data[c] += gr * row[c];
        }
      }
      if (wants(1)) {
        Tensor& gw = grad_of(1);
        for (std::size_t r = 0; r < m; ++r) {
          const double gr = g.data[r];
          if (gr == 0.0) continue;
          double* row = gw.data.data() + r * k;
          for (std::size_t c = 0; c < k; ++c) row[c] += gr * x.data[c];
        }
      }
      if (wants(2)) {
        Tensor& gb = grad_of(2);
        for (std::size_t r = 0; r < m; ++r) gb.data[r] += g.data[r];
      }
      return;
    }
    case OpKind::kConv2d: {
      const Tensor& x = input(0);
      const Tensor& kv = input(1);
      const std::size_t H = x.shape[0], W = x.shape[1], C = x.shape[2];
      const std::size_t k = kv.shape[0], n = kv.shape[3];
      const std::size_t pad = conv_pad(k, node.padding);
      const std::size_t Ho = node.value.shape[0], Wo = node.value.shape[1];
      Tensor* gx = wants(0) ? &grad_of(0) : nullptr;
      Tensor* gk = wants(1) ? &grad_of(1) : nullptr;
      Tensor* gb = wants(2) ? &grad_of(2) : nullptr;
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const double* go = g.data.data() + (oh * Wo + ow) * n;
          if (gb) {
            for (std::size_t j = 0; j < n; ++j) gb->data[j] += go[j];
          }
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + ky) - static_cast<std::ptrdiff_t>(pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + kx) - static_cast<std::ptrdiff_t>(pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
              const std::size_t xoff = (static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)) * C;
              const std::size_t koff = (ky * k + kx) * C * n;
              for (std::size_t c = 0; c < C; ++c) {
                const double* kc = kv.data.data() + koff + c * n;
                if (gx) {
                  double acc = 0.0;
                  for (std::size_t j = 0; j < n; ++j) acc += kc[j] * go[j];
                  gx->data[xoff + c] += acc;
                }
                if (gk) {
                  const double xval = x.data[xoff + c];
                  if (xval == 0.0) continue;
                  double* gkc = gk->data.data() + koff + c * n;
                  for (std::size_t j = 0; j < n; ++j) gkc[j] += xval * go[j];
                }
              }
            }
          }
        }
      }
      return;
    }
    case OpKind::kRelu: {
      if (!wants(0)) return;
      const Tensor& x = input(0);
      Tensor& gx = grad_of(0);
      // Subgradient at exactly zero is zero.
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x.data[i] > 0.0) gx.data[i] += g.data[i];
      }
      return;
    }
    case OpKind::kSoftplus: {
      if (!wants(0)) return;
      const Tensor& x = input(0);
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * sigmoid(x.data[i]);
      return;
    }
    case OpKind::kSpatialSum: {
      if (!wants(0)) return;
      Tensor& gx = grad_of(0);
      const std::size_t n = g.size();
      const std::size_t positions = gx.size() / n;
      for (std::size_t p = 0; p < positions; ++p) {
        for (std::size_t c = 0; c < n; ++c) gx.data[p * n + c] += g.data[c];
      }
      return;
    }
    case OpKind::kAdd:
    case OpKind::kSub: {
      const double sign = node.kind == OpKind::kAdd ? 1.0 : -1.0;
      if (wants(0)) {
        Tensor& ga = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
      }
      if (wants(1)) {
        Tensor& gb = grad_of(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += sign * g.data[i];
      }
      return;
    }
    case OpKind::kMul: {
      const Tensor& a = input(0);
      const Tensor& b = input(1);
      if (wants(0)) {
        Tensor& ga = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * b.data[i];
      }
      if (wants(1)) {
        Tensor& gb = grad_of(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * a.data[i];
      }
      return;
    }
    case OpKind::kScale: {
      if (!wants(0)) return;
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * node.constant;
      return;
    }
    case OpKind::kAddScalar:
    case OpKind::kReshape: {
      if (!wants(0)) return;
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i];
      return;
    }
    case OpKind::kDot: {
      const double gs = g.data[0];
      const Tensor& a = input(0);
      const Tensor& b = input(1);
      if (wants(0)) {
        Tensor& ga = grad_of(0);
        for (std::size_t i = 0; i < a.size(); ++i) ga.data[i] += gs * b.data[i];
      }
      if (wants(1)) {
        Tensor& gb = grad_of(1);
        for (std::size_t i = 0; i < b.size(); ++i) gb.data[i] += gs * a.data[i];
      }
      return;
    }
    case OpKind::kSum: {
      if (!wants(0)) return;
      Tensor& gx = grad_of(0);
      for (double& v : gx.data) v += g.data[0];
      return;
    }
    case OpKind::kL1Norm: {
      if (!wants(0)) return;
      const Tensor& x = input(0);
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = x.data[i] > 0.0 ? 1.0 : (x.data[i] < 0.0 ? -1.0 : 0.0);
        gx.data[i] += g.data[0] * s;
      }
      return;
    }
    case OpKind::kL2Norm: {
      if (!wants(0)) return;
      const double norm = node.value.data[0];
      if (norm == 0.0) return;
      const Tensor& x = input(0);
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] += g.data[0] * x.data[i] / norm;
      return;
    }
    case OpKind::kLog: {
      if (!wants(0)) return;
      const Tensor& x = input(0);
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] += g.data[i] / x.data[i];
      return;
    }
    case OpKind::kDivScalar: {
      const Tensor& x = input(0);
      const double d = input(1).data[0];
      if (wants(0)) {
        Tensor& gx = grad_of(0);
        for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] += g.data[i] / d;
      }
      if (wants(1)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += g.data[i] * x.data[i];
        grad_of(1).data[0] -= acc / (d * d);
      }
      return;
    }
  }
}

}  // namespace detail

/// Reverse sweep from a scalar root. The returned map holds d(root)/d(node)
/// for every node that requires grad; unreached ones hold zeros.
inline GradientMap backward(const Tape& tape, Var root) {
  if (root.tape != &tape) throw std::invalid_argument("backward: root belongs to another tape");
  const Tensor& rv = root.value();
  if (rv.size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + to_string(rv.shape));
  }
  std::vector<Tensor> grads(tape.size());
  std::vector<char> touched(tape.size(), 0);
  for (std::size_t i = 0; i <= root.id; ++i) {
    const TapeNode& n = tape.node(i);
    if (n.requires_grad) grads[i] = Tensor(n.value.shape, 0.0);
  }
  if (!tape.node(root.id).requires_grad) return GradientMap(std::move(grads));
  grads[root.id].data[0] = 1.0;
  touched[root.id] = 1;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    if (!touched[i]) continue;
    const TapeNode& n = tape.node(i);
    if (!n.requires_grad) continue;
    detail::backward_node(tape, n, grads[i], grads, touched);
  }
  return GradientMap(std::move(grads));
}

}  // namespace addex
