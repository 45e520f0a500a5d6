#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "crystalmt/common.hpp"
#include "crystalmt/tensor.hpp"

namespace crystalmt {

// Numerically stable scalar nonlinearities, shared with non-tape code.
inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// softplus(t) = ln(1 + e^t), computed as max(t, 0) + ln(1 + e^-|t|).
inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

enum class Activation { sigmoid, softplus };

struct Var {
  int id = -1;
};

// Reverse-mode tape. Every op appends a node holding the computed value and
// a closure that pushes the node's gradient into its parents. A tape is
// built fresh for each forward pass and consumed by one backward() call;
// reset_grads() makes it reusable. Nodes are referenced by index so the
// closures stay valid across vector reallocation.
class Tape {
 public:
  Var leaf(Tensor t) {
    const bool rg = t.requires_grad;
    return push(std::move(t), "leaf", {}, nullptr, rg);
  }

  Var constant(Tensor t) {
    t.requires_grad = false;
    return push(std::move(t), "const", {}, nullptr, false);
  }

  const Tensor& value(Var v) const { return node_at(v.id).value; }

  // Gradient of the last backward() target w.r.t. node v, shaped like v.
  Tensor grad(Var v) const {
    const Node& n = node_at(v.id);
    Tensor g(n.value.shape);
    if (!n.grad.empty()) g.data = n.grad;
    return g;
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  // y = x W + b for a rank-1 x.
  Var linear(Var xv, Var Wv, Var bv) {
    const Tensor& x = value(xv);
    const Tensor& W = value(Wv);
    const Tensor& b = value(bv);
    if (x.ndim() != 1 || W.ndim() != 2 || b.ndim() != 1 ||
        x.shape[0] != W.shape[0] || W.shape[1] != b.shape[0]) {
      throw DimensionError("linear: x " + shape_str(x.shape) + ", W " +
                           shape_str(W.shape) + ", b " + shape_str(b.shape) +
                           " do not conform");
    }
    const std::size_t k = W.shape[0], m = W.shape[1];
    Tensor y({m});
    for (std::size_t j = 0; j < m; ++j) y.data[j] = b.data[j];
    for (std::size_t i = 0; i < k; ++i) {
      const double xi = x.data[i];
      for (std::size_t j = 0; j < m; ++j) y.data[j] += xi * W.data[i * m + j];
    }
    return push(std::move(y), "linear", {xv.id, Wv.id, bv.id},
                [xi = xv.id, Wi = Wv.id, bi = bv.id](Tape& tp, const Node& n) {
                  const Tensor& x = tp.nodes_[static_cast<std::size_t>(xi)].value;
                  const Tensor& W = tp.nodes_[static_cast<std::size_t>(Wi)].value;
                  const std::size_t k = W.shape[0], m = W.shape[1];
                  if (auto* gx = tp.grad_buf(xi)) {
                    for (std::size_t i = 0; i < k; ++i) {
                      double acc = 0.0;
                      for (std::size_t j = 0; j < m; ++j)
                        acc += n.grad[j] * W.data[i * m + j];
                      (*gx)[i] += acc;
                    }
                  }
                  if (auto* gW = tp.grad_buf(Wi)) {
                    for (std::size_t i = 0; i < k; ++i) {
                      const double xi_v = x.data[i];
                      for (std::size_t j = 0; j < m; ++j)
                        (*gW)[i * m + j] += xi_v * n.grad[j];
                    }
                  }
                  if (auto* gb = tp.grad_buf(bi)) {
                    for (std::size_t j = 0; j < m; ++j) (*gb)[j] += n.grad[j];
                  }
                });
  }

  // Y = X W + b broadcast over rows.
  Var affine_rows(Var Xv, Var Wv, Var bv) {
    const Tensor& X = value(Xv);
    const Tensor& W = value(Wv);
    const Tensor& b = value(bv);
    if (X.ndim() != 2 || W.ndim() != 2 || b.ndim() != 1 ||
        X.shape[1] != W.shape[0] || W.shape[1] != b.shape[0]) {
      throw DimensionError("affine_rows: X " + shape_str(X.shape) + ", W " +
                           shape_str(W.shape) + ", b " + shape_str(b.shape) +
                           " do not conform");
    }
    Tensor y = affine_value(X, W, &b);
    return push(std::move(y), "affine_rows", {Xv.id, Wv.id, bv.id},
                [Xi = Xv.id, Wi = Wv.id, bi = bv.id](Tape& tp, const Node& n) {
                  tp.matmul_backward(Xi, Wi, n);
                  if (auto* gb = tp.grad_buf(bi)) {
                    const std::size_t rows = n.value.shape[0];
                    const std::size_t m = n.value.shape[1];
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < m; ++j)
                        (*gb)[j] += n.grad[r * m + j];
                  }
                });
  }

  Var matmul(Var Av, Var Bv) {
    const Tensor& A = value(Av);
    const Tensor& B = value(Bv);
    if (A.ndim() != 2 || B.ndim() != 2 || A.shape[1] != B.shape[0]) {
      throw DimensionError("matmul: A " + shape_str(A.shape) + " and B " +
                           shape_str(B.shape) + " do not conform");
    }
    Tensor y = affine_value(A, B, nullptr);
    return push(std::move(y), "matmul", {Av.id, Bv.id},
                [Ai = Av.id, Bi = Bv.id](Tape& tp, const Node& n) {
                  tp.matmul_backward(Ai, Bi, n);
                });
  }

  Var add(Var av, Var bv) { return binary_elementwise(av, bv, "add", +1.0); }
  Var sub(Var av, Var bv) { return binary_elementwise(av, bv, "sub", -1.0); }

  Var mul(Var av, Var bv) {
    const Tensor& a = value(av);
    const Tensor& b = value(bv);
    if (!a.same_shape(b)) {
      throw DimensionError("mul: shapes " + shape_str(a.shape) + " and " +
                           shape_str(b.shape) + " differ");
    }
    Tensor y(a.shape);
    for (std::size_t i = 0; i < y.numel(); ++i)
      y.data[i] = a.data[i] * b.data[i];
    return push(std::move(y), "mul", {av.id, bv.id},
                [ai = av.id, bi = bv.id](Tape& tp, const Node& n) {
                  const Tensor& a = tp.nodes_[static_cast<std::size_t>(ai)].value;
                  const Tensor& b = tp.nodes_[static_cast<std::size_t>(bi)].value;
                  if (auto* ga = tp.grad_buf(ai)) {
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                      (*ga)[i] += n.grad[i] * b.data[i];
                  }
                  if (auto* gb = tp.grad_buf(bi)) {
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                      (*gb)[i] += n.grad[i] * a.data[i];
                  }
                });
  }

  Var scale(Var av, double c) {
    const Tensor& a = value(av);
    Tensor y(a.shape);
    for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] = c * a.data[i];
    return push(std::move(y), "scale", {av.id},
                [ai = av.id, c](Tape& tp, const Node& n) {
                  if (auto* ga = tp.grad_buf(ai)) {
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                      (*ga)[i] += c * n.grad[i];
                  }
                });
  }

  Var add_row_broadcast(Var Xv, Var bv) {
    const Tensor& X = value(Xv);
    const Tensor& b = value(bv);
    if (X.ndim() != 2 || b.ndim() != 1 || X.shape[1] != b.shape[0]) {
      throw DimensionError("add_row_broadcast: X " + shape_str(X.shape) +
                           " and b " + shape_str(b.shape) + " do not conform");
    }
    const std::size_t rows = X.shape[0], m = X.shape[1];
    Tensor y(X.shape);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < m; ++j)
        y.data[r * m + j] = X.data[r * m + j] + b.data[j];
    return push(std::move(y), "add_row_broadcast", {Xv.id, bv.id},
                [Xi = Xv.id, bi = bv.id](Tape& tp, const Node& n) {
                  const std::size_t rows = n.value.shape[0];
                  const std::size_t m = n.value.shape[1];
                  if (auto* gX = tp.grad_buf(Xi)) {
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                      (*gX)[i] += n.grad[i];
                  }
                  if (auto* gb = tp.grad_buf(bi)) {
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < m; ++j)
                        (*gb)[j] += n.grad[r * m + j];
                  }
                });
  }

  Var sigmoid(Var xv) {
    const Tensor& x = value(xv);
    Tensor y(x.shape);
    for (std::size_t i = 0; i < y.numel(); ++i)
      y.data[i] = stable_sigmoid(x.data[i]);
    return push(std::move(y), "sigmoid", {xv.id},
                [xi = xv.id](Tape& tp, const Node& n) {
                  if (auto* gx = tp.grad_buf(xi)) {
                    for (std::size_t i = 0; i < n.grad.size(); ++i) {
                      const double s = n.value.data[i];
                      (*gx)[i] += n.grad[i] * s * (1.0 - s);
                    }
                  }
                });
  }

  Var softplus(Var xv) {
    const Tensor& x = value(xv);
    Tensor y(x.shape);
    for (std::size_t i = 0; i < y.numel(); ++i)
      y.data[i] = stable_softplus(x.data[i]);
    return push(std::move(y), "softplus", {xv.id},
                [xi = xv.id](Tape& tp, const Node& n) {
                  const Tensor& x = tp.nodes_[static_cast<std::size_t>(xi)].value;
                  if (auto* gx = tp.grad_buf(xi)) {
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                      (*gx)[i] += n.grad[i] * stable_sigmoid(x.data[i]);
                  }
                });
  }

  Var activate(Var x, Activation kind) {
    return kind == Activation::sigmoid ? sigmoid(x) : softplus(x);
  }

  Var gather_rows(Var Xv, std::vector<std::size_t> idx) {
    const Tensor& X = value(Xv);
    if (X.ndim() != 2) {
      throw DimensionError("gather_rows: X " + shape_str(X.shape) +
                           " is not a matrix");
    }
    const std::size_t m = X.shape[1];
    for (std::size_t r : idx) {
      if (r >= X.shape[0]) {
        throw ValueError("gather_rows: row index " + std::to_string(r) +
                         " out of range for X " + shape_str(X.shape));
      }
    }
    Tensor y({idx.size(), m});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < m; ++j)
        y.data[r * m + j] = X.data[idx[r] * m + j];
    return push(std::move(y), "gather_rows", {Xv.id},
                [Xi = Xv.id, idx = std::move(idx)](Tape& tp, const Node& n) {
                  if (auto* gX = tp.grad_buf(Xi)) {
                    const std::size_t m = n.value.shape[1];
                    for (std::size_t r = 0; r < idx.size(); ++r)
                      for (std::size_t j = 0; j < m; ++j)
                        (*gX)[idx[r] * m + j] += n.grad[r * m + j];
                  }
                });
  }

  // Y[idx[r], :] += X[r, :]; Y has n_rows rows (untouched rows are zero).
  Var scatter_add_rows(Var Xv, std::vector<std::size_t> idx,
                       std::size_t n_rows) {
    const Tensor& X = value(Xv);
    if (X.ndim() != 2 || idx.size() != X.shape[0]) {
      throw DimensionError("scatter_add_rows: X " + shape_str(X.shape) +
                           " needs one index per row, got " +
                           std::to_string(idx.size()));
    }
    const std::size_t m = X.shape[1];
    for (std::size_t r : idx) {
      if (r >= n_rows) {
        throw ValueError("scatter_add_rows: target row " + std::to_string(r) +
                         " out of range [0, " + std::to_string(n_rows) + ")");
      }
    }
    Tensor y({n_rows, m});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < m; ++j)
        y.data[idx[r] * m + j] += X.data[r * m + j];
    return push(std::move(y), "scatter_add_rows", {Xv.id},
                [Xi = Xv.id, idx = std::move(idx)](Tape& tp, const Node& n) {
                  if (auto* gX = tp.grad_buf(Xi)) {
                    const std::size_t m = n.value.shape[1];
                    for (std::size_t r = 0; r < idx.size(); ++r)
                      for (std::size_t j = 0; j < m; ++j)
                        (*gX)[r * m + j] += n.grad[idx[r] * m + j];
                  }
                });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ValueError("concat_cols: no inputs");
    const std::size_t rows = value(parts[0]).shape[0];
    std::size_t total = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (Var p : parts) {
      const Tensor& t = value(p);
      if (t.ndim() != 2 || t.shape[0] != rows) {
        throw DimensionError("concat_cols: block " + shape_str(t.shape) +
                             " does not match " + std::to_string(rows) +
                             " rows");
      }
      ids.push_back(p.id);
      widths.push_back(t.shape[1]);
      total += t.shape[1];
    }
    Tensor y({rows, total});
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const Tensor& t = nodes_[static_cast<std::size_t>(ids[p])].value;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < widths[p]; ++j)
          y.data[r * total + off + j] = t.data[r * widths[p] + j];
      off += widths[p];
    }
    return push(std::move(y), "concat_cols", ids,
                [ids, widths](Tape& tp, const Node& n) {
                  const std::size_t rows = n.value.shape[0];
                  const std::size_t total = n.value.shape[1];
                  std::size_t off = 0;
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    if (auto* g = tp.grad_buf(ids[p])) {
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < widths[p]; ++j)
                          (*g)[r * widths[p] + j] +=
                              n.grad[r * total + off + j];
                    }
                    off += widths[p];
                  }
                });
  }

  // Column-wise mean; the gradient distributes 1/N to each row.
  Var mean_rows(Var Xv) {
    const Tensor& X = value(Xv);
    if (X.ndim() != 2) {
      throw DimensionError("mean_rows: X " + shape_str(X.shape) +
                           " is not a matrix");
    }
    const std::size_t n = X.shape[0], m = X.shape[1];
    if (n == 0) throw ValueError("mean_rows: empty input (0 rows)");
    Tensor y({m});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < m; ++j) y.data[j] += X.data[r * m + j];
    for (std::size_t j = 0; j < m; ++j) y.data[j] /= static_cast<double>(n);
    return push(std::move(y), "mean_rows", {Xv.id},
                [Xi = Xv.id, n, m](Tape& tp, const Node& node) {
                  if (auto* gX = tp.grad_buf(Xi)) {
                    const double inv = 1.0 / static_cast<double>(n);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t j = 0; j < m; ++j)
                        (*gX)[r * m + j] += node.grad[j] * inv;
                  }
                });
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse order. After
  // the call every requires_grad leaf has a gradient of its own shape
  // (zero when the loss does not depend on it). One backward per tape;
  // call reset_grads() before reusing.
  void backward(Var loss) {
    const Node& ln = node_at(loss.id);
    if (!ln.value.is_scalar()) {
      throw ValueError("backward: loss must be scalar, got shape " +
                       shape_str(ln.value.shape));
    }
    if (consumed_) {
      throw ValueError("backward: tape already consumed; call reset_grads()");
    }
    consumed_ = true;
    if (auto* g = grad_buf(loss.id)) (*g)[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.empty() || !n.backward) continue;
      if (!all_finite(n.grad)) {
        throw NumericError(std::string("non-finite gradient at op '") + n.op +
                           "'");
      }
      n.backward(*this, n);
    }
    // Leaves untouched by the sweep legitimately have zero gradient.
    for (Node& n : nodes_) {
      if (n.needs_grad && n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    }
  }

  void reset_grads() {
    for (Node& n : nodes_) n.grad.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;  // empty until the backward sweep touches it
    std::function<void(Tape&, const Node&)> backward;
    const char* op = "";
    bool needs_grad = false;
  };

  const Node& node_at(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
      throw ValueError("tape: invalid node id " + std::to_string(id));
    }
    return nodes_[static_cast<std::size_t>(id)];
  }

  // Returns the gradient accumulator for a node, or nullptr when the node
  // does not participate in differentiation.
  std::vector<double>* grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return &n.grad;
  }

  Var push(Tensor value, const char* op, const std::vector<int>& parents,
           std::function<void(Tape&, const Node&)> backward,
           bool leaf_requires = false) {
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.backward = std::move(backward);
    n.op = op;
    n.needs_grad = leaf_requires;
    for (int p : parents) {
      if (node_at(p).needs_grad) n.needs_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  Var binary_elementwise(Var av, Var bv, const char* op, double b_sign) {
    const Tensor& a = value(av);
    const Tensor& b = value(bv);
    if (!a.same_shape(b)) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape) +
                           " and " + shape_str(b.shape) + " differ");
    }
    Tensor y(a.shape);
    for (std::size_t i = 0; i < y.numel(); ++i)
      y.data[i] = a.data[i] + b_sign * b.data[i];
    return push(std::move(y), op, {av.id, bv.id},
                [ai = av.id, bi = bv.id, b_sign](Tape& tp, const Node& n) {
                  if (auto* ga = tp.grad_buf(ai)) {
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                      (*ga)[i] += n.grad[i];
                  }
                  if (auto* gb = tp.grad_buf(bi)) {
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                      (*gb)[i] += b_sign * n.grad[i];
                  }
                });
  }

  static Tensor affine_value(const Tensor& A, const Tensor& B,
                             const Tensor* bias) {
    const std::size_t n = A.shape[0], k = A.shape[1], m = B.shape[1];
    Tensor y({n, m});
    if (bias) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < m; ++j) y.data[r * m + j] = bias->data[j];
    }
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double a = A.data[r * k + kk];
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j)
          y.data[r * m + j] += a * B.data[kk * m + j];
      }
    }
    return y;
  }

  void matmul_backward(int Ai, int Bi, const Node& n) {
    const Tensor& A = nodes_[static_cast<std::size_t>(Ai)].value;
    const Tensor& B = nodes_[static_cast<std::size_t>(Bi)].value;
    const std::size_t rows = A.shape[0], k = A.shape[1], m = B.shape[1];
    if (auto* gA = grad_buf(Ai)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j)
            acc += n.grad[r * m + j] * B.data[kk * m + j];
          (*gA)[r * k + kk] += acc;
        }
    }
    if (auto* gB = grad_buf(Bi)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double a = A.data[r * k + kk];
          if (a == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j)
            (*gB)[kk * m + j] += a * n.grad[r * m + j];
        }
    }
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Central-difference gradient estimate; the gradient-check oracle used by
// tests against backward().
inline Tensor finite_diff_gradient(
    const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) {
    throw ValueError("finite_diff_gradient: step h must be positive");
  }
  Tensor g(x.shape);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double fp = f(probe);
    probe.data[i] = orig - h;
    const double fm = f(probe);
    probe.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_gradient: non-finite function value");
    }
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Relative error with the gradient-check convention: |a-b| / max(|a|,|b|,eps).
inline double rel_err(double a, double b, double eps = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), eps});
}

}  // namespace crystalmt
