#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "stq/linalg.hpp"

namespace stq {
struct RoundingFreeze;
}

namespace stq::ad {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode gradient tape over a closed op set. Nodes are appended in
// evaluation order; backward walks them in reverse exactly once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }
  Var parameter(Tensor value) { return push(std::move(value), true, {}); }

  // Appends an op result. The node needs a gradient iff any input does.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || node(in).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  void backward(const Var& loss) {
    if (done_) throw StateError("backward: graph already differentiated; build a new tape");
    if (loss.tape_ != this) throw ArgumentError("backward: loss belongs to another tape");
    const Tensor& v = node(loss).value;
    if (v.numel() != 1) throw ArgumentError("backward: loss must be a scalar, got " + shape_str(v.shape()));
    done_ = true;
    if (!node(loss).requires_grad) return;
    nodes_[loss.id_].grad = Tensor(v.shape(), 1.0);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  // Adds `g` into the gradient of `v` when it participates in differentiation.
  void accumulate(const Var& v, const Tensor& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      require_same_shape(n.value, g, "accumulate");
      n.grad = g;
      return;
    }
    require_same_shape(n.grad, g, "accumulate");
    for (std::size_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
  }

  const Tensor& value(const Var& v) const { return node(v).value; }

  // Gradient of a node after backward; zeros if nothing flowed into it.
  const Tensor& grad(const Var& v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  bool requires_grad(const Var& v) const { return node(v).requires_grad; }
  bool differentiated() const { return done_; }

  // When set, fake-quant ops record or replay their rounding residuals
  // instead of re-rounding (see RoundingFreeze).
  RoundingFreeze* rounding_freeze = nullptr;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    if (done_) throw StateError("tape: cannot record after backward");
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  Node& node(const Var& v) {
    if (v.tape_ != this) throw ArgumentError("tape: variable belongs to another tape");
    return nodes_[v.id_];
  }
  const Node& node(const Var& v) const {
    if (v.tape_ != this) throw ArgumentError("tape: variable belongs to another tape");
    return nodes_[v.id_];
  }

  std::deque<Node> nodes_;
  bool done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline const Tensor& Var::grad() const { return tape_->grad(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = *a.tape();
  return t.record(stq::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) t.accumulate(a, stq::matmul_nt(g, b.value()));
    if (b.requires_grad()) t.accumulate(b, stq::matmul_tn(a.value(), g));
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = *a.tape();
  return t.record(stq::matmul_nt(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) t.accumulate(a, stq::matmul(g, b.value()));
    if (b.requires_grad()) t.accumulate(b, stq::matmul_tn(g, a.value()));
  });
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = *a.tape();
  return t.record(stq::add(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = *a.tape();
  return t.record(stq::sub(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (b.requires_grad()) t.accumulate(b, stq::scaled(g, -1));
  });
}

// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  Tape& t = *a.tape();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= b.value()[i];
      t.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] *= a.value()[i];
      t.accumulate(b, gb);
    }
  });
}

// a[P x N] + v[N] broadcast over rows.
inline Var add_row(const Var& a, const Var& v) {
  const Tensor& av = a.value();
  require_rank(av, 2, "add_row");
  if (v.value().numel() != av.cols()) throw DimensionError("add_row: vector length mismatch");
  Tensor out = av;
  const std::size_t n = av.cols();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += v.value()[i % n];
  Tape& t = *a.tape();
  return t.record(std::move(out), {a, v}, [a, v, n](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (v.requires_grad()) {
      Tensor gv(v.value().shape(), 0.0);
      for (std::size_t i = 0; i < g.numel(); ++i) gv[i % n] += g[i];
      t.accumulate(v, gv);
    }
  });
}

inline Real sigmoid(Real x) { return 1 / (1 + std::exp(-x)); }

inline Tensor silu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = v * sigmoid(v);
  return y;
}

inline Var silu(const Var& x) {
  Tape& t = *x.tape();
  return t.record(silu(x.value()), {x}, [x](Tape& t, const Tensor& g) {
    Tensor gx = g;
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      const Real s = sigmoid(xv[i]);
      gx[i] *= s * (1 + xv[i] * (1 - s));
    }
    t.accumulate(x, gx);
  });
}

// Scalar mean(a^2).
inline Var mean_square(const Var& a) {
  const Tensor& av = a.value();
  Real s = 0;
  for (auto v : av.data()) s += v * v;
  const Real n = static_cast<Real>(av.numel());
  Tape& t = *a.tape();
  return t.record(Tensor::scalar(s / n), {a}, [a, n](Tape& t, const Tensor& g) {
    t.accumulate(a, stq::scaled(a.value(), 2 * g[0] / n));
  });
}

inline Var im2col(const Var& x, const ConvGeometry& geom) {
  Tape& t = *x.tape();
  return t.record(stq::im2col(x.value(), geom), {x}, [x, geom](Tape& t, const Tensor& g) {
    t.accumulate(x, stq::col2im(g, geom, x.value().shape()));
  });
}

inline Var rows_to_frames(const Var& rows, std::size_t tt, std::size_t h, std::size_t w) {
  Tape& t = *rows.tape();
  return t.record(stq::rows_to_frames(rows.value(), tt, h, w), {rows},
                  [rows](Tape& t, const Tensor& g) { t.accumulate(rows, stq::frames_to_rows(g)); });
}

// Randomized Hadamard along the last axis in blocks of signs.size(). The
// map is orthonormal, so its adjoint is the inverse transform.
inline Var block_fwht(const Var& x, std::vector<Real> signs) {
  Tape& t = *x.tape();
  Tensor y = stq::block_fwht(x.value(), signs);
  return t.record(std::move(y), {x}, [x, signs = std::move(signs)](Tape& t, const Tensor& g) {
    t.accumulate(x, stq::block_fwht_inverse(g, signs));
  });
}

}  // namespace stq::ad
