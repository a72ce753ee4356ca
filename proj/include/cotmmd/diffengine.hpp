/*
 * Copyright 2026 The cotmmd Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every node created through the free functions below. Each
// node keeps its forward value, a gradient accumulator of the same shape and
// a closure that pushes its gradient into its parents. backward() walks the
// tape in reverse creation order, so every reachable node is visited once.
//
// A tape supports a single backward pass; run reset() before reusing it.

#pragma once

#include "cotmmd/types.hpp"

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cotmmd::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Matrix value) { return push(std::move(value), false, nullptr, {}, "const"); }

  /// Leaf that receives a gradient but is not tied to external storage.
  Var variable(Matrix value) { return push(std::move(value), true, nullptr, {}, "var"); }

  /// Leaf bound to model storage; after backward() its gradient is reported
  /// by parameters().
  Var parameter(Matrix& storage) {
    Var v = push(storage, true, &storage, {}, "param");
    params_.push_back(v.id());
    return v;
  }

  /// When recording is off, nodes keep their values but no gradient
  /// closures, and backward() is rejected.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  std::size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    params_.clear();
    backward_done_ = false;
  }

  /// Accumulates d(loss)/d(node) for every node that depends on a gradient
  /// leaf. `loss` must be 1x1.
  void backward(const Var& loss) {
    if (loss.tape() != this || loss.id() >= nodes_.size())
      throw Error("backward: loss does not belong to this tape (run forward first)");
    if (!recording_) throw Error("backward: tape is not recording");
    if (backward_done_) throw Error("backward: already run on this tape; call reset()");
    const Node& root = nodes_[loss.id()];
    require_dims(root.value.rows() == 1 && root.value.cols() == 1,
                 "backward: loss must be 1x1, got " + shape_str(root.value));
    backward_done_ = true;
    if (!root.requires_grad) return;
    grad_ref(loss.id()).setOnes();
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  /// (storage, gradient) for every parameter leaf, in binding order. The
  /// gradient is zero-shaped if the loss does not depend on the leaf.
  std::vector<std::pair<Matrix*, const Matrix*>> parameters() {
    std::vector<std::pair<Matrix*, const Matrix*>> out;
    out.reserve(params_.size());
    for (std::size_t id : params_) {
      Node& n = nodes_[id];
      if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      out.emplace_back(n.storage, &n.grad);
    }
    return out;
  }

  // Accessors used by op implementations.
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }

  Matrix& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Records the result of an op. `parents` decides whether the node needs
  /// a gradient; `fn` is dropped when no parent needs one.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward fn, const char* op) {
    bool needs = false;
    for (const Var& p : parents) {
      if (p.tape() != this) throw Error(std::string(op) + ": operand from another tape");
      needs = needs || nodes_[p.id()].requires_grad;
    }
    needs = needs && recording_;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : Backward{}, op);
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    Matrix* storage = nullptr;
    bool requires_grad = false;
    const char* op = "";
  };

  Var push(Matrix value, bool requires_grad, Matrix* storage, Backward fn, const char* op) {
    if (backward_done_) throw Error("tape already differentiated; call reset() before reuse");
    Node n;
    n.value = std::move(value);
    n.backward = std::move(fn);
    n.storage = storage;
    n.requires_grad = requires_grad && recording_;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::vector<std::size_t> params_;
  bool recording_ = true;
  bool backward_done_ = false;
};

inline const Matrix& Var::value() const {
  if (!tape_) throw Error("Var: uninitialized handle");
  return tape_->value(id_);
}

inline const Matrix& Var::grad() const {
  if (!tape_) throw Error("Var: uninitialized handle");
  return tape_->grad(id_);
}

inline double Var::scalar() const {
  const Matrix& v = value();
  require_dims(v.rows() == 1 && v.cols() == 1, "Var::scalar on " + shape_str(v));
  return v(0, 0);
}

// Graph-free forward kernels. The ops below compute their values with these
// same functions, so taped and untaped evaluation agree bit for bit.
namespace eval {

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require_dims(a.cols() == b.rows(), "matmul: " + shape_str(a) + " * " + shape_str(b));
  Matrix c = a * b;
  return c;
}

inline Matrix add_row(const Matrix& a, const Matrix& row) {
  require_dims(row.rows() == 1 && row.cols() == a.cols(),
               "add_row: " + shape_str(a) + " + row " + shape_str(row));
  Matrix c = a.rowwise() + row.row(0);
  return c;
}

/// 1 - 2 / (exp(2a) + 1): Eigen vectorizes exp for doubles but not tanh.
/// Saturates to +-1 without overflow; absolute error is a few ulps of 1.
inline Matrix tanh(const Matrix& a) {
  return (1.0 - 2.0 / ((2.0 * a.array()).exp() + 1.0)).matrix();
}
inline Matrix relu(const Matrix& a) { return a.array().max(0.0).matrix(); }
inline Matrix exp(const Matrix& a) { return a.array().exp().matrix(); }
inline Matrix square(const Matrix& a) { return a.array().square().matrix(); }

inline Matrix softmax_rows(const Matrix& a) {
  Matrix s(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double mx = a.row(i).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      s(i, j) = std::exp(a(i, j) - mx);
      z += s(i, j);
    }
    s.row(i) /= z;
  }
  return s;
}

inline Matrix sqdist(const Matrix& a, const Matrix& b) {
  require_dims(a.cols() == b.cols(), "sqdist: " + shape_str(a) + " vs " + shape_str(b));
  Matrix out(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) {
        const double d = a(i, k) - b(j, k);
        s += d * d;
      }
      out(i, j) = s;
    }
  return out;
}

inline Matrix block_sqdist(const Matrix& g, Eigen::Index block) {
  require_dims(block > 0 && g.rows() % block == 0,
               "block_sqdist: rows " + std::to_string(g.rows()) + " not a multiple of " +
                   std::to_string(block));
  const Eigen::Index nb = g.rows() / block;
  Matrix out(nb, block * block);
  for (Eigen::Index b = 0; b < nb; ++b)
    for (Eigen::Index j = 0; j < block; ++j)
      for (Eigen::Index k = 0; k < block; ++k) {
        double s = 0.0;
        for (Eigen::Index c = 0; c < g.cols(); ++c) {
          const double d = g(b * block + j, c) - g(b * block + k, c);
          s += d * d;
        }
        out(b, j * block + k) = s;
      }
  return out;
}

inline Matrix block_sqdist_to(const Matrix& g, const Matrix& y, Eigen::Index block) {
  require_dims(block > 0 && g.rows() == y.rows() * block && g.cols() == y.cols(),
               "block_sqdist_to: " + shape_str(g) + " vs " + shape_str(y) + " block " +
                   std::to_string(block));
  Matrix out(y.rows(), block);
  for (Eigen::Index b = 0; b < y.rows(); ++b)
    for (Eigen::Index j = 0; j < block; ++j) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        const double d = g(b * block + j, c) - y(b, c);
        s += d * d;
      }
      out(b, j) = s;
    }
  return out;
}

inline Matrix block_combine(const Matrix& w, const Matrix& p) {
  require_dims(p.rows() == w.rows() * w.cols(),
               "block_combine: weights " + shape_str(w) + " vs rows " + shape_str(p));
  Matrix out = Matrix::Zero(w.rows(), p.cols());
  const Eigen::Index n = w.cols();
  for (Eigen::Index b = 0; b < w.rows(); ++b)
    for (Eigen::Index j = 0; j < n; ++j) out.row(b) += w(b, j) * p.row(b * n + j);
  return out;
}

inline Matrix concat_cols(const Matrix& a, const Matrix& b) {
  require_dims(a.rows() == b.rows(), "concat_cols: " + shape_str(a) + " | " + shape_str(b));
  Matrix c(a.rows(), a.cols() + b.cols());
  c << a, b;
  return c;
}

}  // namespace eval

namespace detail {
inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || a.tape() != b.tape())
    throw Error(std::string(op) + ": operands must live on the same tape");
  return *a.tape();
}
inline void same_shape(const Matrix& a, const Matrix& b, const char* op) {
  require_dims(a.rows() == b.rows() && a.cols() == b.cols(),
               std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}
inline Matrix scalar_matrix(double v) { return Matrix::Constant(1, 1, v); }
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b, "add");
  detail::same_shape(a.value(), b.value(), "add");
  return t.record(a.value() + b.value(), {a, b},
                  [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    if (t.requires_grad(ia)) t.grad_ref(ia) += g;
                    if (t.requires_grad(ib)) t.grad_ref(ib) += g;
                  },
                  "add");
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b, "sub");
  detail::same_shape(a.value(), b.value(), "sub");
  return t.record(a.value() - b.value(), {a, b},
                  [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    if (t.requires_grad(ia)) t.grad_ref(ia) += g;
                    if (t.requires_grad(ib)) t.grad_ref(ib) -= g;
                  },
                  "sub");
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b, "mul");
  detail::same_shape(a.value(), b.value(), "mul");
  return t.record(a.value().cwiseProduct(b.value()), {a, b},
                  [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    if (t.requires_grad(ia)) t.grad_ref(ia) += g.cwiseProduct(t.value(ib));
                    if (t.requires_grad(ib)) t.grad_ref(ib) += g.cwiseProduct(t.value(ia));
                  },
                  "mul");
}

inline Var div(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b, "div");
  detail::same_shape(a.value(), b.value(), "div");
  return t.record(a.value().cwiseQuotient(b.value()), {a, b},
                  [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    const Matrix& bv = t.value(ib);
                    if (t.requires_grad(ia)) t.grad_ref(ia) += g.cwiseQuotient(bv);
                    if (t.requires_grad(ib))
                      t.grad_ref(ib).array() -=
                          g.array() * t.value(self).array() / bv.array();
                  },
                  "div");
}

inline Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  return t.record(a.value() * s, {a},
                  [ia = a.id(), s](Tape& t, std::size_t self) { t.grad_ref(ia) += s * t.grad(self); },
                  "scale");
}

inline Var add_scalar(const Var& a, double s) {
  Tape& t = *a.tape();
  return t.record((a.value().array() + s).matrix(), {a},
                  [ia = a.id()](Tape& t, std::size_t self) { t.grad_ref(ia) += t.grad(self); },
                  "add_scalar");
}

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  return t.record(eval::matmul(a.value(), b.value()), {a, b},
                  [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    if (t.requires_grad(ia)) t.grad_ref(ia).noalias() += g * t.value(ib).transpose();
                    if (t.requires_grad(ib)) t.grad_ref(ib).noalias() += t.value(ia).transpose() * g;
                  },
                  "matmul");
}

/// a (n x p) plus a 1 x p row broadcast over every row.
inline Var add_row(const Var& a, const Var& row) {
  Tape& t = detail::same_tape(a, row, "add_row");
  return t.record(eval::add_row(a.value(), row.value()), {a, row},
                  [ia = a.id(), ir = row.id()](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    if (t.requires_grad(ia)) t.grad_ref(ia) += g;
                    if (t.requires_grad(ir)) t.grad_ref(ir) += g.colwise().sum();
                  },
                  "add_row");
}

/// Row i of a (n x p) scaled by c(i, 0), c being n x 1.
inline Var scale_rows(const Var& a, const Var& c) {
  Tape& t = detail::same_tape(a, c, "scale_rows");
  require_dims(c.cols() == 1 && c.rows() == a.rows(),
               "scale_rows: " + shape_str(a.value()) + " by " + shape_str(c.value()));
  Matrix v = c.value().col(0).asDiagonal() * a.value();
  return t.record(std::move(v), {a, c},
                  [ia = a.id(), ic = c.id()](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    if (t.requires_grad(ia)) t.grad_ref(ia) += t.value(ic).col(0).asDiagonal() * g;
                    if (t.requires_grad(ic))
                      t.grad_ref(ic) += g.cwiseProduct(t.value(ia)).rowwise().sum();
                  },
                  "scale_rows");
}

inline Var tanh(const Var& a) {
  Tape& t = *a.tape();
  return t.record(eval::tanh(a.value()), {a},
                  [ia = a.id()](Tape& t, std::size_t self) {
                    const Matrix& y = t.value(self);
                    t.grad_ref(ia).array() += t.grad(self).array() * (1.0 - y.array().square());
                  },
                  "tanh");
}

/// The derivative at exactly 0 is taken as 0.
inline Var relu(const Var& a) {
  Tape& t = *a.tape();
  return t.record(eval::relu(a.value()), {a},
                  [ia = a.id()](Tape& t, std::size_t self) {
                    const Matrix& x = t.value(ia);
                    t.grad_ref(ia).array() +=
                        (x.array() > 0.0).select(t.grad(self).array(), 0.0);
                  },
                  "relu");
}

inline Var exp(const Var& a) {
  Tape& t = *a.tape();
  return t.record(eval::exp(a.value()), {a},
                  [ia = a.id()](Tape& t, std::size_t self) {
                    t.grad_ref(ia).array() += t.grad(self).array() * t.value(self).array();
                  },
                  "exp");
}

inline Var square(const Var& a) {
  Tape& t = *a.tape();
  return t.record(eval::square(a.value()), {a},
                  [ia = a.id()](Tape& t, std::size_t self) {
                    t.grad_ref(ia).array() += 2.0 * t.grad(self).array() * t.value(ia).array();
                  },
                  "square");
}

inline Var sqrt(const Var& a) {
  Tape& t = *a.tape();
  return t.record(a.value().array().sqrt().matrix(), {a},
                  [ia = a.id()](Tape& t, std::size_t self) {
                    t.grad_ref(ia).array() += 0.5 * t.grad(self).array() / t.value(self).array();
                  },
                  "sqrt");
}

/// Elementwise a^p for a constant exponent.
inline Var pow(const Var& a, double p) {
  Tape& t = *a.tape();
  return t.record(a.value().array().pow(p).matrix(), {a},
                  [ia = a.id(), p](Tape& t, std::size_t self) {
                    t.grad_ref(ia).array() +=
                        p * t.grad(self).array() * t.value(ia).array().pow(p - 1.0);
                  },
                  "pow");
}

/// Pairwise squared distances between the rows of a (n x d) and b (p x d).
inline Var sqdist(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b, "sqdist");
  return t.record(eval::sqdist(a.value(), b.value()), {a, b},
                  [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    const Matrix& av = t.value(ia);
                    const Matrix& bv = t.value(ib);
                    if (t.requires_grad(ia)) {
                      Matrix& ga = t.grad_ref(ia);
                      ga += 2.0 * (g.rowwise().sum().asDiagonal() * av - g * bv);
                    }
                    if (t.requires_grad(ib)) {
                      Matrix& gb = t.grad_ref(ib);
                      gb += 2.0 * (g.colwise().sum().transpose().asDiagonal() * bv -
                                   g.transpose() * av);
                    }
                  },
                  "sqdist");
}

/// Rows of g are grouped in consecutive blocks of `block`; row b of the
/// result holds the block's block x block squared-distance matrix, flattened
/// as (j * block + k).
inline Var block_sqdist(const Var& g, Eigen::Index block) {
  Tape& t = *g.tape();
  return t.record(eval::block_sqdist(g.value(), block), {g},
                  [ig = g.id(), block](Tape& t, std::size_t self) {
                    const Matrix& go = t.grad(self);
                    const Matrix& gv = t.value(ig);
                    Matrix& gg = t.grad_ref(ig);
                    for (Eigen::Index b = 0; b < go.rows(); ++b)
                      for (Eigen::Index j = 0; j < block; ++j)
                        for (Eigen::Index k = 0; k < block; ++k) {
                          const double w = 2.0 * go(b, j * block + k);
                          if (w == 0.0 || j == k) continue;
                          const Eigen::Index rj = b * block + j;
                          const Eigen::Index rk = b * block + k;
                          for (Eigen::Index c = 0; c < gv.cols(); ++c) {
                            const double d = w * (gv(rj, c) - gv(rk, c));
                            gg(rj, c) += d;
                            gg(rk, c) -= d;
                          }
                        }
                  },
                  "block_sqdist");
}

/// Row b of the result holds |g_{b*block + j} - y_b|^2 for j < block.
inline Var block_sqdist_to(const Var& g, const Var& y, Eigen::Index block) {
  Tape& t = detail::same_tape(g, y, "block_sqdist_to");
  return t.record(eval::block_sqdist_to(g.value(), y.value(), block), {g, y},
                  [ig = g.id(), iy = y.id(), block](Tape& t, std::size_t self) {
                    const Matrix& go = t.grad(self);
                    const Matrix& gv = t.value(ig);
                    const Matrix& yv = t.value(iy);
                    const bool need_g = t.requires_grad(ig);
                    const bool need_y = t.requires_grad(iy);
                    for (Eigen::Index b = 0; b < yv.rows(); ++b)
                      for (Eigen::Index j = 0; j < block; ++j) {
                        const double w = 2.0 * go(b, j);
                        for (Eigen::Index c = 0; c < gv.cols(); ++c) {
                          const double d = w * (gv(b * block + j, c) - yv(b, c));
                          if (need_g) t.grad_ref(ig)(b * block + j, c) += d;
                          if (need_y) t.grad_ref(iy)(b, c) -= d;
                        }
                      }
                  },
                  "block_sqdist_to");
}

/// out_b = sum_j w(b, j) * p_{b * n + j}, with w being B x n and p (B*n) x k.
inline Var block_combine(const Var& w, const Var& p) {
  Tape& t = detail::same_tape(w, p, "block_combine");
  return t.record(eval::block_combine(w.value(), p.value()), {w, p},
                  [iw = w.id(), ip = p.id()](Tape& t, std::size_t self) {
                    const Matrix& go = t.grad(self);
                    const Matrix& wv = t.value(iw);
                    const Matrix& pv = t.value(ip);
                    const Eigen::Index n = wv.cols();
                    const bool need_w = t.requires_grad(iw);
                    const bool need_p = t.requires_grad(ip);
                    for (Eigen::Index b = 0; b < wv.rows(); ++b)
                      for (Eigen::Index j = 0; j < n; ++j) {
                        if (need_w) t.grad_ref(iw)(b, j) += go.row(b).dot(pv.row(b * n + j));
                        if (need_p) t.grad_ref(ip).row(b * n + j) += wv(b, j) * go.row(b);
                      }
                  },
                  "block_combine");
}

inline Var softmax_rows(const Var& a) {
  Tape& t = *a.tape();
  return t.record(eval::softmax_rows(a.value()), {a},
                  [ia = a.id()](Tape& t, std::size_t self) {
                    const Matrix& s = t.value(self);
                    const Matrix& g = t.grad(self);
                    const Vector inner = g.cwiseProduct(s).rowwise().sum();
                    t.grad_ref(ia).array() +=
                        s.array() * (g.colwise() - inner).array();
                  },
                  "softmax_rows");
}

inline Var sum(const Var& a) {
  Tape& t = *a.tape();
  return t.record(detail::scalar_matrix(a.value().sum()), {a},
                  [ia = a.id()](Tape& t, std::size_t self) {
                    t.grad_ref(ia).array() += t.grad(self)(0, 0);
                  },
                  "sum");
}

inline Var mean(const Var& a) {
  Tape& t = *a.tape();
  const double n = static_cast<double>(a.value().size());
  return t.record(detail::scalar_matrix(a.value().sum() / n), {a},
                  [ia = a.id(), n](Tape& t, std::size_t self) {
                    t.grad_ref(ia).array() += t.grad(self)(0, 0) / n;
                  },
                  "mean");
}

/// n x p -> n x 1 of row sums.
inline Var row_sum(const Var& a) {
  Tape& t = *a.tape();
  Matrix v = a.value().rowwise().sum();
  return t.record(std::move(v), {a},
                  [ia = a.id()](Tape& t, std::size_t self) {
                    t.grad_ref(ia).colwise() += t.grad(self).col(0);
                  },
                  "row_sum");
}

/// n x p -> n x 1 of row means.
inline Var row_mean(const Var& a) {
  Tape& t = *a.tape();
  const double p = static_cast<double>(a.cols());
  Matrix v = a.value().rowwise().sum() / p;
  return t.record(std::move(v), {a},
                  [ia = a.id(), p](Tape& t, std::size_t self) {
                    t.grad_ref(ia).colwise() += t.grad(self).col(0) / p;
                  },
                  "row_mean");
}

/// Frobenius inner product sum(a .* b).
inline Var dot(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b, "dot");
  detail::same_shape(a.value(), b.value(), "dot");
  return t.record(detail::scalar_matrix(a.value().cwiseProduct(b.value()).sum()), {a, b},
                  [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
                    const double g = t.grad(self)(0, 0);
                    if (t.requires_grad(ia)) t.grad_ref(ia) += g * t.value(ib);
                    if (t.requires_grad(ib)) t.grad_ref(ib) += g * t.value(ia);
                  },
                  "dot");
}

inline Var concat_cols(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b, "concat_cols");
  return t.record(eval::concat_cols(a.value(), b.value()), {a, b},
                  [ia = a.id(), ib = b.id(), ca = a.cols()](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    if (t.requires_grad(ia)) t.grad_ref(ia) += g.leftCols(ca);
                    if (t.requires_grad(ib)) t.grad_ref(ib) += g.rightCols(g.cols() - ca);
                  },
                  "concat_cols");
}

/// Rows [begin, begin + count) of a.
inline Var rows(const Var& a, Eigen::Index begin, Eigen::Index count) {
  require_dims(begin >= 0 && count >= 0 && begin + count <= a.rows(),
               "rows: range out of bounds for " + shape_str(a.value()));
  Tape& t = *a.tape();
  Matrix v = a.value().middleRows(begin, count);
  return t.record(std::move(v), {a},
                  [ia = a.id(), begin, count](Tape& t, std::size_t self) {
                    t.grad_ref(ia).middleRows(begin, count) += t.grad(self);
                  },
                  "rows");
}

// Operator sugar for the common cases.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

/// Outcome of a finite-difference gradient check.
struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst = 0;
  std::size_t failures = 0;
  double tolerance = 0.0;

  bool passed() const { return failures == 0; }
};

/// Scalar function of a list of parameter matrices, built on a tape.
using GraphFunction = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares reverse-mode gradients of `f` against central differences with
/// step `step`. Per coordinate the relative error is
/// |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12); a coordinate fails when that
/// exceeds `tolerance` and the absolute difference also exceeds `atol`
/// (guards coordinates whose true gradient is zero, where the difference is
/// pure round-off).
inline GradCheckReport grad_check(const GraphFunction& f, std::vector<Matrix> params,
                                  double step = 1e-5, double tolerance = 1e-4,
                                  double atol = 1e-10) {
  auto evaluate = [&f](std::vector<Matrix>& ps, bool with_grad, std::vector<Matrix>* grads) {
    Tape tape;
    tape.set_recording(with_grad);
    std::vector<Var> leaves;
    leaves.reserve(ps.size());
    for (Matrix& p : ps) leaves.push_back(tape.parameter(p));
    Var out = f(tape, leaves);
    const double v = out.scalar();
    if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite loss", "loss");
    if (with_grad) {
      tape.backward(out);
      for (auto& [storage, g] : tape.parameters()) grads->push_back(*g);
    }
    return v;
  };

  GradCheckReport r;
  r.tolerance = tolerance;
  std::vector<Matrix> grads;
  evaluate(params, true, &grads);
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index k = 0; k < params[p].size(); ++k) {
      double* x = params[p].data() + k;
      const double orig = *x;
      *x = orig + step;
      const double fp = evaluate(params, false, nullptr);
      *x = orig - step;
      const double fm = evaluate(params, false, nullptr);
      *x = orig;
      const double num = (fp - fm) / (2.0 * step);
      const double ana = grads[p].data()[k];
      const double abs_err = std::abs(ana - num);
      const double rel = abs_err / (std::abs(ana) + std::abs(num) + 1e-12);
      r.analytic.push_back(ana);
      r.numeric.push_back(num);
      r.rel_error.push_back(rel);
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = r.rel_error.size() - 1;
      }
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (rel > tolerance && abs_err > atol) ++r.failures;
    }
  }
  return r;
}

}  // namespace cotmmd::ad
