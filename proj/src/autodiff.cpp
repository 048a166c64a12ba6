// SPDX-License-Identifier: Apache-2.0
#include "phibal/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "phibal/error.hpp"

namespace phibal::ad {

std::string_view op_name(Op op) noexcept {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::StopGradient: return "stop_gradient";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::ScalarMul: return "scalar_mul";
    case Op::AddScalar: return "add_scalar";
    case Op::Matmul: return "matmul";
    case Op::Linear: return "linear";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Pow: return "pow";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Silu: return "silu";
    case Op::SoftmaxRows: return "softmax_rows";
    case Op::MaskedSoftmaxRows: return "masked_softmax_rows";
    case Op::LogSoftmaxRows: return "log_softmax_rows";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::MeanRows: return "mean_rows";
    case Op::IndexSelectRows: return "index_select_rows";
    case Op::IndexAddRows: return "index_add_rows";
    case Op::Gather: return "gather";
    case Op::MulRows: return "mul_rows";
    case Op::SliceCols: return "slice_cols";
    case Op::Concat: return "concat";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape_->value(*this); }

const Tensor& Gradients::operator[](Var v) const {
  auto it = grads_.find(v.id());
  if (it == grads_.end()) throw Error("gradients: node " + std::to_string(v.id()) + " is not a requires-grad leaf");
  return it->second;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::leaf(Tensor value, bool requires_grad) {
  Var v = push(Op::Leaf, std::move(value), {}, nullptr);
  nodes_.back().requires_grad = requires_grad;
  return v;
}

Var Tape::constant(Tensor value) { return push(Op::Constant, std::move(value), {}, nullptr); }

Var Tape::push(Op op, Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  if (checked_ && !value.all_finite()) {
    throw NumericalError(std::string(op_name(op)) + ": non-finite output");
  }
  Node node;
  node.value = std::move(value);
  node.op = op;
  node.requires_grad = false;
  if (op != Op::StopGradient) {
    for (std::size_t p : parents) node.requires_grad = node.requires_grad || nodes_[p].requires_grad;
  }
  node.parents = std::move(parents);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor* Tape::accumulator(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (!n.has_adjoint) {
    n.adjoint = Tensor::zeros(n.value.shape());
    n.has_adjoint = true;
  }
  return &n.adjoint;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.has_adjoint ? n.adjoint : Tensor::zeros(n.value.shape());
}

Gradients Tape::backward(Var root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + shape_string(root.shape()));
  }
  for (Node& n : nodes_) {
    n.has_adjoint = false;
    n.adjoint = Tensor();
  }
  if (Tensor* acc = accumulator(root.id())) (*acc)[0] = 1.0;

  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_adjoint || !n.backward) continue;
    n.backward(*this, i);
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op == Op::Leaf && n.requires_grad) {
      out.set(i, n.has_adjoint ? n.adjoint : Tensor::zeros(n.value.shape()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(std::string_view op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a.shape()));
  }
}

void require_same_tape(std::string_view op, Var a, Var b) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": operands live on different tapes");
}

// Elementwise unary op: forward f(x), backward g * df(x, y).
template <typename F, typename DF>
Var unary(Op op, Var a, F f, DF df) {
  const Tensor& x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t pa = a.id();
  return a.tape().push(op, Tensor(x.shape(), std::move(out)), {pa}, [pa, df](Tape& t, std::size_t self) {
    Tensor* acc = t.accumulator(pa);
    if (!acc) return;
    const Tensor& g = t.adjoint(self);
    const Tensor& xv = t.value_of(pa);
    const Tensor& yv = t.value_of(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*acc)[i] += g[i] * df(xv[i], yv[i]);
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape("add", a, b);
  require_same_shape("add", a.value(), b.value());
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape().push(Op::Add, Tensor(x.shape(), std::move(out)), {pa, pb}, [pa, pb](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    for (std::size_t p : {pa, pb}) {
      if (Tensor* acc = t.accumulator(p)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*acc)[i] += g[i];
      }
    }
  });
}

Var sub(Var a, Var b) {
  require_same_tape("sub", a, b);
  require_same_shape("sub", a.value(), b.value());
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape().push(Op::Sub, Tensor(x.shape(), std::move(out)), {pa, pb}, [pa, pb](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    if (Tensor* acc = t.accumulator(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*acc)[i] += g[i];
    }
    if (Tensor* acc = t.accumulator(pb)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*acc)[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape("mul", a, b);
  require_same_shape("mul", a.value(), b.value());
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape().push(Op::Mul, Tensor(x.shape(), std::move(out)), {pa, pb}, [pa, pb](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    const Tensor& xv = t.value_of(pa);
    const Tensor& yv = t.value_of(pb);
    if (Tensor* acc = t.accumulator(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*acc)[i] += g[i] * yv[i];
    }
    if (Tensor* acc = t.accumulator(pb)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*acc)[i] += g[i] * xv[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(Op::ScalarMul, a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(Op::AddScalar, a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var exp(Var a) {
  return unary(Op::Exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(Op::Log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var pow(Var a, double exponent) {
  return unary(
      Op::Pow, a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x, double) { return exponent * std::pow(x, exponent - 1.0); });
}

Var tanh(Var a) {
  return unary(Op::Tanh, a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(Op::Sigmoid, a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var silu(Var a) {
  return unary(
      Op::Silu, a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var matmul(Var a, Var b) {
  require_same_tape("matmul", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows()) {
    throw ShapeError("matmul: cannot multiply " + shape_string(x.shape()) + " by " + shape_string(y.shape()));
  }
  const std::size_t n = x.rows(), k = x.cols(), m = y.cols();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += x[i * k + p] * y[p * m + j];
      out[i * m + j] = s;
    }
  }
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape().push(Op::Matmul, Tensor::matrix(n, m, std::move(out)), {pa, pb},
                       [pa, pb, n, k, m](Tape& t, std::size_t self) {
                         const Tensor& g = t.adjoint(self);
                         const Tensor& xv = t.value_of(pa);
                         const Tensor& yv = t.value_of(pb);
                         if (Tensor* acc = t.accumulator(pa)) {
                           // dX = G · Yᵀ
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               double s = 0.0;
                               for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * yv[p * m + j];
                               (*acc)[i * k + p] += s;
                             }
                         }
                         if (Tensor* acc = t.accumulator(pb)) {
                           // dY = Xᵀ · G
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               const double xi = xv[i * k + p];
                               for (std::size_t j = 0; j < m; ++j) (*acc)[p * m + j] += xi * g[i * m + j];
                             }
                         }
                       });
}

Var linear(Var x, Var w) {
  require_same_tape("linear", x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.cols()) {
    throw ShapeError("linear: cannot apply weight " + shape_string(wv.shape()) + " to input " +
                     shape_string(xv.shape()));
  }
  const std::size_t n = xv.rows(), d = xv.cols(), m = wv.rows();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = (xv.data().data() + (i * d));
    for (std::size_t j = 0; j < m; ++j) {
      const double* wr = (wv.data().data() + (j * d));
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) s += xr[p] * wr[p];
      out[i * m + j] = s;
    }
  }
  const std::size_t px = x.id(), pw = w.id();
  return x.tape().push(Op::Linear, Tensor::matrix(n, m, std::move(out)), {px, pw},
                       [px, pw, n, d, m](Tape& t, std::size_t self) {
                         const Tensor& g = t.adjoint(self);
                         const Tensor& xv2 = t.value_of(px);
                         const Tensor& wv2 = t.value_of(pw);
                         if (Tensor* acc = t.accumulator(px)) {
                           // dX = G · W
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < m; ++j) {
                               const double gij = g[i * m + j];
                               for (std::size_t p = 0; p < d; ++p) (*acc)[i * d + p] += gij * wv2[j * d + p];
                             }
                         }
                         if (Tensor* acc = t.accumulator(pw)) {
                           // dW = Gᵀ · X
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < m; ++j) {
                               const double gij = g[i * m + j];
                               for (std::size_t p = 0; p < d; ++p) (*acc)[j * d + p] += gij * xv2[i * d + p];
                             }
                         }
                       });
}

namespace {

// Shared backward of softmax-like ops: dX_ij = Y_ij (G_ij - Σ_k G_ik Y_ik).
void softmax_backward(Tape& t, std::size_t self, std::size_t parent) {
  Tensor* acc = t.accumulator(parent);
  if (!acc) return;
  const Tensor& g = t.adjoint(self);
  const Tensor& y = t.value_of(self);
  const std::size_t n = y.rows(), m = y.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double dotp = 0.0;
    for (std::size_t j = 0; j < m; ++j) dotp += g[i * m + j] * y[i * m + j];
    for (std::size_t j = 0; j < m; ++j) (*acc)[i * m + j] += y[i * m + j] * (g[i * m + j] - dotp);
  }
}

}  // namespace

Var softmax_rows(Var a) {
  const Tensor& x = a.value();
  require_rank("softmax_rows", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double mx = *std::max_element((x.data().data() + (i * m)), (x.data().data() + (i * m)) + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out[i * m + j] = std::exp(x[i * m + j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  const std::size_t pa = a.id();
  return a.tape().push(Op::SoftmaxRows, Tensor::matrix(n, m, std::move(out)), {pa},
                       [pa](Tape& t, std::size_t self) { softmax_backward(t, self, pa); });
}

Var masked_softmax_rows(Var a, const Tensor& mask) {
  const Tensor& x = a.value();
  require_rank("masked_softmax_rows", x, 2);
  require_same_shape("masked_softmax_rows", x, mask);
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j] != 0.0) mx = std::max(mx, x[i * m + j]);
    if (mx == -INFINITY) throw ShapeError("masked_softmax_rows: row " + std::to_string(i) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j] != 0.0) z += (out[i * m + j] = std::exp(x[i * m + j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  const std::size_t pa = a.id();
  return a.tape().push(Op::MaskedSoftmaxRows, Tensor::matrix(n, m, std::move(out)), {pa},
                       [pa](Tape& t, std::size_t self) { softmax_backward(t, self, pa); });
}

Var log_softmax_rows(Var a) {
  const Tensor& x = a.value();
  require_rank("log_softmax_rows", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double mx = *std::max_element((x.data().data() + (i * m)), (x.data().data() + (i * m)) + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(x[i * m + j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x[i * m + j] - lz;
  }
  const std::size_t pa = a.id();
  return a.tape().push(Op::LogSoftmaxRows, Tensor::matrix(n, m, std::move(out)), {pa},
                       [pa](Tape& t, std::size_t self) {
                         Tensor* acc = t.accumulator(pa);
                         if (!acc) return;
                         const Tensor& g = t.adjoint(self);
                         const Tensor& y = t.value_of(self);
                         const std::size_t rows = y.rows(), cols = y.cols();
                         for (std::size_t i = 0; i < rows; ++i) {
                           double gs = 0.0;
                           for (std::size_t j = 0; j < cols; ++j) gs += g[i * cols + j];
                           for (std::size_t j = 0; j < cols; ++j)
                             (*acc)[i * cols + j] += g[i * cols + j] - std::exp(y[i * cols + j]) * gs;
                         }
                       });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t pa = a.id();
  return a.tape().push(Op::Sum, Tensor::scalar(s), {pa}, [pa](Tape& t, std::size_t self) {
    Tensor* acc = t.accumulator(pa);
    if (!acc) return;
    const double g = t.adjoint(self)[0];
    for (double& v : acc->data()) v += g;
  });
}

Var mean(Var a) {
  const Tensor& x = a.value();
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.size());
  const std::size_t pa = a.id();
  return a.tape().push(Op::Mean, Tensor::scalar(s / n), {pa}, [pa, n](Tape& t, std::size_t self) {
    Tensor* acc = t.accumulator(pa);
    if (!acc) return;
    const double g = t.adjoint(self)[0] / n;
    for (double& v : acc->data()) v += g;
  });
}

Var mean_rows(Var a) {
  const Tensor& x = a.value();
  require_rank("mean_rows", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  if (n == 0) throw ShapeError("mean_rows: no rows");
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += x[i * m + j];
  for (double& v : out) v /= static_cast<double>(n);
  const std::size_t pa = a.id();
  return a.tape().push(Op::MeanRows, Tensor::vector(std::move(out)), {pa}, [pa, n, m](Tape& t, std::size_t self) {
    Tensor* acc = t.accumulator(pa);
    if (!acc) return;
    const Tensor& g = t.adjoint(self);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) (*acc)[i * m + j] += g[j] / static_cast<double>(n);
  });
}

Var index_select_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& x = a.value();
  require_rank("index_select_rows", x, 2);
  const std::size_t m = x.cols();
  std::vector<double> out(rows.size() * m);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.rows()) {
      throw ShapeError("index_select_rows: row " + std::to_string(rows[r]) + " out of range for " +
                       shape_string(x.shape()));
    }
    std::copy_n(x.data().data() + rows[r] * m, m, &out[r * m]);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t pa = a.id();
  return a.tape().push(Op::IndexSelectRows, Tensor::matrix(rows.size(), m, std::move(out)), {pa},
                       [pa, idx = std::move(idx), m](Tape& t, std::size_t self) {
                         Tensor* acc = t.accumulator(pa);
                         if (!acc) return;
                         const Tensor& g = t.adjoint(self);
                         for (std::size_t r = 0; r < idx.size(); ++r)
                           for (std::size_t j = 0; j < m; ++j) (*acc)[idx[r] * m + j] += g[r * m + j];
                       });
}

Var index_add_rows(Var base, Var src, std::span<const std::size_t> rows) {
  require_same_tape("index_add_rows", base, src);
  const Tensor& b = base.value();
  const Tensor& s = src.value();
  require_rank("index_add_rows", b, 2);
  require_rank("index_add_rows", s, 2);
  if (s.cols() != b.cols() || s.rows() != rows.size()) {
    throw ShapeError("index_add_rows: source " + shape_string(s.shape()) + " with " + std::to_string(rows.size()) +
                     " indices does not fit base " + shape_string(b.shape()));
  }
  const std::size_t m = b.cols();
  std::vector<double> out(b.values());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= b.rows()) throw ShapeError("index_add_rows: row index out of range");
    for (std::size_t j = 0; j < m; ++j) out[rows[r] * m + j] += s[r * m + j];
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t pb = base.id(), ps = src.id();
  return base.tape().push(Op::IndexAddRows, Tensor(b.shape(), std::move(out)), {pb, ps},
                          [pb, ps, idx = std::move(idx), m](Tape& t, std::size_t self) {
                            const Tensor& g = t.adjoint(self);
                            if (Tensor* acc = t.accumulator(pb)) {
                              for (std::size_t i = 0; i < g.size(); ++i) (*acc)[i] += g[i];
                            }
                            if (Tensor* acc = t.accumulator(ps)) {
                              for (std::size_t r = 0; r < idx.size(); ++r)
                                for (std::size_t j = 0; j < m; ++j) (*acc)[r * m + j] += g[idx[r] * m + j];
                            }
                          });
}

Var gather(Var a, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  const Tensor& x = a.value();
  require_rank("gather", x, 2);
  if (rows.size() != cols.size()) throw ShapeError("gather: row and column index lists differ in length");
  const std::size_t m = x.cols();
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows() || cols[i] >= m) throw ShapeError("gather: index out of range for " + shape_string(x.shape()));
    flat[i] = rows[i] * m + cols[i];
    out[i] = x[flat[i]];
  }
  const std::size_t pa = a.id();
  return a.tape().push(Op::Gather, Tensor::vector(std::move(out)), {pa},
                       [pa, flat = std::move(flat)](Tape& t, std::size_t self) {
                         Tensor* acc = t.accumulator(pa);
                         if (!acc) return;
                         const Tensor& g = t.adjoint(self);
                         for (std::size_t i = 0; i < flat.size(); ++i) (*acc)[flat[i]] += g[i];
                       });
}

Var mul_rows(Var a, Var w) {
  require_same_tape("mul_rows", a, w);
  const Tensor& x = a.value();
  const Tensor& wv = w.value();
  require_rank("mul_rows", x, 2);
  if (wv.rank() != 1 || wv.size() != x.rows()) {
    throw ShapeError("mul_rows: weights " + shape_string(wv.shape()) + " do not match rows of " + shape_string(x.shape()));
  }
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = wv[i] * x[i * m + j];
  const std::size_t pa = a.id(), pw = w.id();
  return a.tape().push(Op::MulRows, Tensor::matrix(n, m, std::move(out)), {pa, pw},
                       [pa, pw, n, m](Tape& t, std::size_t self) {
                         const Tensor& g = t.adjoint(self);
                         const Tensor& xv = t.value_of(pa);
                         const Tensor& wv2 = t.value_of(pw);
                         if (Tensor* acc = t.accumulator(pa)) {
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < m; ++j) (*acc)[i * m + j] += g[i * m + j] * wv2[i];
                         }
                         if (Tensor* acc = t.accumulator(pw)) {
                           for (std::size_t i = 0; i < n; ++i) {
                             double s = 0.0;
                             for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * xv[i * m + j];
                             (*acc)[i] += s;
                           }
                         }
                       });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  require_rank("slice_cols", x, 2);
  if (begin > end || end > x.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_string(x.shape()));
  }
  const std::size_t n = x.rows(), m = x.cols(), w = end - begin;
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i) std::copy_n((x.data().data() + (i * m + begin)), w, &out[i * w]);
  const std::size_t pa = a.id();
  return a.tape().push(Op::SliceCols, Tensor::matrix(n, w, std::move(out)), {pa},
                       [pa, n, m, w, begin](Tape& t, std::size_t self) {
                         Tensor* acc = t.accumulator(pa);
                         if (!acc) return;
                         const Tensor& g = t.adjoint(self);
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < w; ++j) (*acc)[i * m + begin + j] += g[i * w + j];
                       });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  Tape& tape = parts.front().tape();
  const Tensor& first = parts.front().value();
  require_rank("concat", first, 2);
  std::size_t total = 0;
  for (Var p : parts) {
    require_same_tape("concat", parts.front(), p);
    const Tensor& v = p.value();
    require_rank("concat", v, 2);
    const std::size_t other = axis == 0 ? 1 : 0;
    if (v.shape()[other] != first.shape()[other]) {
      throw ShapeError("concat: shape mismatch " + shape_string(first.shape()) + " vs " + shape_string(v.shape()));
    }
    total += v.shape()[axis];
  }
  const std::size_t n = axis == 0 ? total : first.rows();
  const std::size_t m = axis == 0 ? first.cols() : total;
  std::vector<double> out(n * m);
  std::vector<std::size_t> ids, offsets;
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) {
        const std::size_t r = axis == 0 ? offset + i : i;
        const std::size_t c = axis == 0 ? j : offset + j;
        out[r * m + c] = v.at(i, j);
      }
    ids.push_back(p.id());
    offsets.push_back(offset);
    offset += v.shape()[axis];
  }
  std::vector<std::size_t> parents = ids;
  return tape.push(Op::Concat, Tensor::matrix(n, m, std::move(out)), std::move(parents),
                   [ids, offsets, axis, m](Tape& t, std::size_t self) {
                     const Tensor& g = t.adjoint(self);
                     for (std::size_t k = 0; k < ids.size(); ++k) {
                       Tensor* acc = t.accumulator(ids[k]);
                       if (!acc) continue;
                       const std::size_t pr = acc->rows(), pc = acc->cols();
                       for (std::size_t i = 0; i < pr; ++i)
                         for (std::size_t j = 0; j < pc; ++j) {
                           const std::size_t r = axis == 0 ? offsets[k] + i : i;
                           const std::size_t c = axis == 0 ? j : offsets[k] + j;
                           (*acc)[i * pc + j] += g[r * m + c];
                         }
                     }
                   });
}

Var stop_gradient(Var a) {
  return a.tape().push(Op::StopGradient, a.value(), {a.id()}, nullptr);
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& x = logits.value();
  require_rank("cross_entropy", x, 2);
  if (labels.size() != x.rows()) throw ShapeError("cross_entropy: label count does not match logits rows");
  std::vector<std::size_t> rows(labels.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return scale(mean(gather(log_softmax_rows(logits), rows, labels)), -1.0);
}

}  // namespace phibal::ad
