// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense f64 tensors.
//
// Every primitive appends one node to a Tape. Nodes are created in
// topological order, so backward() simply walks the tape in reverse. A Var is
// a cheap handle (tape pointer + node index); it is only valid while the tape
// that created it is alive, and tapes are neither copyable nor movable.

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "phibal/tensor.hpp"

namespace phibal::ad {

enum class Op {
  Leaf,
  Constant,
  StopGradient,
  Add,
  Sub,
  Mul,
  ScalarMul,
  AddScalar,
  Matmul,
  Linear,
  Exp,
  Log,
  Pow,
  Tanh,
  Sigmoid,
  Silu,
  SoftmaxRows,
  MaskedSoftmaxRows,
  LogSoftmaxRows,
  Sum,
  Mean,
  MeanRows,
  IndexSelectRows,
  IndexAddRows,
  Gather,
  MulRows,
  SliceCols,
  Concat,
};

std::string_view op_name(Op op) noexcept;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Adjoints of every requires-grad leaf, keyed by node id.
class Gradients {
 public:
  void set(std::size_t leaf, Tensor grad) { grads_.insert_or_assign(leaf, std::move(grad)); }
  bool contains(Var v) const { return grads_.count(v.id()) != 0; }
  const Tensor& operator[](Var v) const;
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  std::map<std::size_t, Tensor> grads_;
};

class Tape {
 public:
  /// With `checked` set, every primitive rejects non-finite outputs with a
  /// NumericalError naming the primitive.
  explicit Tape(bool checked = false) : checked_(checked) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  Op op(Var v) const { return nodes_[v.id()].op; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool checked() const noexcept { return checked_; }

  /// Adjoint of `v` after backward(); zeros if nothing flowed into it.
  Tensor grad(Var v) const;

  /// Reverse sweep from a scalar root. Adjoints from a previous sweep are
  /// cleared first.
  Gradients backward(Var root);

  // Plumbing used by the primitives.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;
  Var push(Op op, Tensor value, std::vector<std::size_t> parents, BackwardFn backward);
  const Tensor& adjoint(std::size_t id) const { return nodes_[id].adjoint; }
  /// Adjoint buffer of node `id`, allocated as zeros on first use. Returns
  /// nullptr when the node does not require grad.
  Tensor* accumulator(std::size_t id);
  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }

 private:
  struct Node {
    Tensor value;
    Tensor adjoint;
    bool has_adjoint = false;
    Op op = Op::Leaf;
    std::vector<std::size_t> parents;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool checked_;
};

// Elementwise (identical shapes).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var pow(Var a, double exponent);
Var tanh(Var a);
Var sigmoid(Var a);
Var silu(Var a);

/// (n×k)·(k×m).
Var matmul(Var a, Var b);
/// x·wᵀ for x (n×d) and w (m×d): the usual dense-layer product.
Var linear(Var x, Var w);

/// Row-wise softmax with row-max subtraction.
Var softmax_rows(Var a);
/// Row-wise softmax restricted to entries where mask != 0; masked entries are
/// exactly 0. Every row needs at least one unmasked entry.
Var masked_softmax_rows(Var a, const Tensor& mask);
Var log_softmax_rows(Var a);

/// Sum / mean of all entries, rank-0 result.
Var sum(Var a);
Var mean(Var a);
/// Column means of an (n×m) matrix: rank-1 result of length m.
Var mean_rows(Var a);

Var index_select_rows(Var a, std::span<const std::size_t> rows);
/// base + scatter(src into `rows`); rows may repeat.
Var index_add_rows(Var base, Var src, std::span<const std::size_t> rows);
/// Vector of a[rows[i], cols[i]].
Var gather(Var a, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
/// a[i, :] * w[i] for a (n×m) and w of length n.
Var mul_rows(Var a, Var w);
/// Columns [begin, end) of a matrix.
Var slice_cols(Var a, std::size_t begin, std::size_t end);
/// Concatenation of matrices along `axis` (0 = rows, 1 = columns).
Var concat(std::span<const Var> parts, std::size_t axis);

/// Forward value passes through unchanged; no adjoint ever reaches `a`.
Var stop_gradient(Var a);

Var dot(Var a, Var b);

/// Mean cross-entropy of integer labels under row logits.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

}  // namespace phibal::ad
