#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "loki/errors.hpp"
#include "loki/numerics/tensor.hpp"

namespace loki::num {

class Graph;

/// Handle to a value recorded in a Graph. Cheap to copy; valid as long as
/// the owning Graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient context (tape). Records every operation in
/// execution order; backward() walks the tape in reverse and accumulates
/// into parents in ascending node order, so two passes over the same
/// recording are bitwise identical. One Graph per thread.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers a leaf. Leaves with requires_grad receive a gradient of
  /// their own shape after backward().
  Var leaf(Tensor value, bool requires_grad = true) {
    check_finite(value, "leaf");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, true, {}});
    if (requires_grad) leaves_.push_back(nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records the result of an operation. The backward function reads
  /// grad(self) and accumulates into its parents via accumulate().
  Var record(Tensor value, bool requires_grad, BackwardFn backward, std::string_view op) {
    check_finite(value, op);
    nodes_.push_back(Node{std::move(value), {}, requires_grad, false,
                          requires_grad ? std::move(backward) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient of the last backward() target w.r.t. this node. Nodes that
  /// received no gradient report zeros of matching shape.
  Tensor grad(const Var& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.size() == n.value.size() && n.grad.shape() == n.value.shape()) return n.grad;
    return Tensor(n.value.shape(), 0.0);
  }

  std::span<double> grad_buffer(std::size_t id) { return nodes_[id].grad.data(); }

  /// Takes ownership of the first contribution instead of adding it to zeros.
  void accumulate(std::size_t id, std::vector<double>&& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.shape() != n.value.shape() && g.size() == n.value.size()) {
      n.grad = Tensor(n.value.shape(), std::move(g));
      return;
    }
    accumulate(id, std::span<const double>(g));
  }

  void accumulate(std::size_t id, std::span<const double> g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape(), 0.0);
    auto dst = n.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  /// Runs reverse-mode differentiation from a single-element tensor.
  /// Gradients from any previous backward() are discarded first.
  void backward(const Var& scalar) {
    if (scalar.graph() != this) throw ContractError("backward: variable belongs to another context");
    const Node& target = nodes_.at(scalar.id());
    if (target.value.size() != 1) {
      throw ContractError("backward: target must have exactly one element, got shape " +
                          shape_str(target.value.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    if (!target.requires_grad) return;
    nodes_[scalar.id()].grad = Tensor(target.value.shape(), 1.0);
    for (std::size_t id = scalar.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.is_leaf || !n.backward) continue;
      if (n.grad.shape() != n.value.shape()) continue;  // no gradient reached this node
      n.backward(*this, id);
    }
  }

  /// Registered trainable leaves in registration order.
  const std::vector<std::size_t>& leaves() const noexcept { return leaves_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  static void check_finite(const Tensor& t, std::string_view op) {
    if (!t.all_finite()) throw NumericError("non-finite value produced by " + std::string(op));
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> leaves_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

// ---------------------------------------------------------------------------
// Element-wise nonlinearities

enum class Activation { relu, gelu, silu };

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "silu") return Activation::silu;
  throw ConfigError("unknown nonlinearity '" + std::string(name) + "' (expected relu|gelu|silu)");
}

inline std::string_view activation_name(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::silu: return "silu";
  }
  return "?";
}

inline double activate(Activation kind, double x) {
  switch (kind) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    case Activation::silu: return x / (1.0 + std::exp(-x));
  }
  return 0.0;
}

inline double activate_derivative(Activation kind, double x) {
  switch (kind) {
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + x * pdf;
    }
    case Activation::silu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Differentiable operations. All reductions run in ascending index order.

namespace detail {

inline Graph& same_graph(const Var& a, const Var& b) {
  if (a.graph() != b.graph() || a.graph() == nullptr)
    throw ContractError("operands belong to different gradient contexts");
  return *a.graph();
}

inline void require_matrix(const Tensor& t, std::string_view op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

inline bool any_grad(Graph& g, std::initializer_list<Var> vars) {
  for (const Var& v : vars)
    if (g.requires_grad(v)) return true;
  return false;
}

/// out(n×m) += a(n×k) · b(k×m)
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                    std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

/// out(n×m) += a(n×k) · b(m×k)^T
inline void gemm_nt(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                    std::size_t m) {
  // Four output columns per pass for instruction-level parallelism; each
  // dot product still accumulates in ascending p.
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    std::size_t j = 0;
    for (; j + 4 <= m; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        s0 += av * b0[p];
        s1 += av * b1[p];
        s2 += av * b2[p];
        s3 += av * b3[p];
      }
      out[i * m + j] += s0;
      out[i * m + j + 1] += s1;
      out[i * m + j + 2] += s2;
      out[i * m + j + 3] += s3;
    }
    for (; j < m; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out[i * m + j] += s;
    }
  }
}

/// out(k×m) += a(n×k)^T · b(n×m)
inline void gemm_tn(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                    std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

/// Standard matrix product a(n×k) · b(k×m).
inline Var matmul(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  if (av.shape()[1] != bv.shape()[0]) {
    throw DimensionError("matmul: inner dimensions disagree for shapes " + shape_str(av.shape()) +
                         " and " + shape_str(bv.shape()));
  }
  const std::size_t n = av.shape()[0], k = av.shape()[1], m = bv.shape()[1];
  Tensor out(Shape{n, m}, 0.0);
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), n, k, m);
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), detail::any_grad(g, {a, b}),
                  [ia, ib, n, k, m](Graph& gr, std::size_t self) {
                    const double* dout = gr.grad_buffer(self).data();
                    if (gr.requires_grad(ia)) {
                      std::vector<double> da(n * k, 0.0);
                      detail::gemm_nt(dout, gr.value(ib).data().data(), da.data(), n, m, k);
                      gr.accumulate(ia, std::move(da));
                    }
                    if (gr.requires_grad(ib)) {
                      std::vector<double> db(k * m, 0.0);
                      detail::gemm_tn(gr.value(ia).data().data(), dout, db.data(), n, k, m);
                      gr.accumulate(ib, std::move(db));
                    }
                  },
                  "matmul");
}

/// Dense layer without bias: x(n×in) · W(out×in)^T, W stored row-per-output.
inline Var linear(const Var& x, const Var& w) {
  Graph& g = detail::same_graph(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  detail::require_matrix(xv, "linear");
  detail::require_matrix(wv, "linear");
  if (xv.shape()[1] != wv.shape()[1]) {
    throw DimensionError("linear: input width disagrees for shapes " + shape_str(xv.shape()) +
                         " and weight " + shape_str(wv.shape()));
  }
  const std::size_t n = xv.shape()[0], in = xv.shape()[1], out_f = wv.shape()[0];
  Tensor out(Shape{n, out_f}, 0.0);
  detail::gemm_nt(xv.data().data(), wv.data().data(), out.data().data(), n, in, out_f);
  const std::size_t ix = x.id(), iw = w.id();
  return g.record(std::move(out), detail::any_grad(g, {x, w}),
                  [ix, iw, n, in, out_f](Graph& gr, std::size_t self) {
                    const double* dout = gr.grad_buffer(self).data();
                    if (gr.requires_grad(ix)) {
                      std::vector<double> dx(n * in, 0.0);
                      detail::gemm_nn(dout, gr.value(iw).data().data(), dx.data(), n, out_f, in);
                      gr.accumulate(ix, std::move(dx));
                    }
                    if (gr.requires_grad(iw)) {
                      std::vector<double> dw(out_f * in, 0.0);
                      detail::gemm_tn(dout, gr.value(ix).data().data(), dw.data(), n, out_f, in);
                      gr.accumulate(iw, std::move(dw));
                    }
                  },
                  "linear");
}

inline Var add(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  const auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), detail::any_grad(g, {a, b}),
                  [ia, ib](Graph& gr, std::size_t self) {
                    auto d = gr.grad_buffer(self);
                    gr.accumulate(ia, d);
                    gr.accumulate(ib, d);
                  },
                  "add");
}

/// Adds a length-m bias to every row of an n×m matrix. The only broadcast.
inline Var add_row_bias(const Var& a, const Var& bias) {
  Graph& g = detail::same_graph(a, bias);
  const Tensor& av = a.value();
  detail::require_matrix(av, "add_row_bias");
  const std::size_t n = av.shape()[0], m = av.shape()[1];
  if (bias.value().size() != m)
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs rows of " +
                         shape_str(av.shape()));
  Tensor out = av;
  const auto bd = bias.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bd[j];
  const std::size_t ia = a.id(), ib = bias.id();
  return g.record(std::move(out), detail::any_grad(g, {a, bias}),
                  [ia, ib, n, m](Graph& gr, std::size_t self) {
                    auto d = gr.grad_buffer(self);
                    gr.accumulate(ia, d);
                    if (gr.requires_grad(ib)) {
                      std::vector<double> db(m, 0.0);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < m; ++j) db[j] += d[i * m + j];
                      gr.accumulate(ib, std::move(db));
                    }
                  },
                  "add_row_bias");
}

/// Element-wise product of equally shaped tensors.
inline Var mul(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  const auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), detail::any_grad(g, {a, b}),
                  [ia, ib](Graph& gr, std::size_t self) {
                    auto d = gr.grad_buffer(self);
                    if (gr.requires_grad(ia)) {
                      auto bv = gr.value(ib).data();
                      std::vector<double> da(d.size());
                      for (std::size_t i = 0; i < d.size(); ++i) da[i] = d[i] * bv[i];
                      gr.accumulate(ia, std::move(da));
                    }
                    if (gr.requires_grad(ib)) {
                      auto av = gr.value(ia).data();
                      std::vector<double> db(d.size());
                      for (std::size_t i = 0; i < d.size(); ++i) db[i] = d[i] * av[i];
                      gr.accumulate(ib, std::move(db));
                    }
                  },
                  "mul");
}

inline Var scale(const Var& a, double s) {
  Graph& g = *a.graph();
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  const std::size_t ia = a.id();
  return g.record(std::move(out), g.requires_grad(a),
                  [ia, s](Graph& gr, std::size_t self) {
                    auto d = gr.grad_buffer(self);
                    std::vector<double> da(d.begin(), d.end());
                    for (double& v : da) v *= s;
                    gr.accumulate(ia, std::move(da));
                  },
                  "scale");
}

inline Var nonlinearity(const Var& x, Activation kind) {
  Graph& g = *x.graph();
  Tensor out = x.value();
  for (double& v : out.data()) v = activate(kind, v);
  const std::size_t ix = x.id();
  return g.record(std::move(out), g.requires_grad(x),
                  [ix, kind](Graph& gr, std::size_t self) {
                    auto d = gr.grad_buffer(self);
                    auto xv = gr.value(ix).data();
                    std::vector<double> dx(d.size());
                    for (std::size_t i = 0; i < d.size(); ++i) dx[i] = d[i] * activate_derivative(kind, xv[i]);
                    gr.accumulate(ix, std::move(dx));
                  },
                  "nonlinearity");
}

/// Sum of all elements, as a one-element tensor.
inline Var sum(const Var& a) {
  Graph& g = *a.graph();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return g.record(Tensor::scalar(s), g.requires_grad(a),
                  [ia](Graph& gr, std::size_t self) {
                    const double d = gr.grad_buffer(self)[0];
                    std::vector<double> da(gr.value(ia).size(), d);
                    gr.accumulate(ia, std::move(da));
                  },
                  "sum");
}

/// Single element (r, c) of a matrix as a one-element tensor.
inline Var element(const Var& a, std::size_t r, std::size_t c) {
  Graph& g = *a.graph();
  const Tensor& av = a.value();
  detail::require_matrix(av, "element");
  if (r >= av.shape()[0] || c >= av.shape()[1])
    throw IndexError("element (" + std::to_string(r) + ", " + std::to_string(c) +
                     ") outside shape " + shape_str(av.shape()));
  const std::size_t ia = a.id(), flat = r * av.shape()[1] + c;
  return g.record(Tensor::scalar(av[flat]), g.requires_grad(a),
                  [ia, flat](Graph& gr, std::size_t self) {
                    std::vector<double> da(gr.value(ia).size(), 0.0);
                    da[flat] = gr.grad_buffer(self)[0];
                    gr.accumulate(ia, std::move(da));
                  },
                  "element");
}

/// Horizontal concatenation [a | b] of matrices with equal row counts.
inline Var concat_cols(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "concat_cols");
  detail::require_matrix(bv, "concat_cols");
  if (av.shape()[0] != bv.shape()[0])
    throw DimensionError("concat_cols: row counts differ " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  const std::size_t n = av.shape()[0], ca = av.shape()[1], cb = bv.shape()[1];
  Tensor out(Shape{n, ca + cb}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out[i * (ca + cb) + j] = av[i * ca + j];
    for (std::size_t j = 0; j < cb; ++j) out[i * (ca + cb) + ca + j] = bv[i * cb + j];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), detail::any_grad(g, {a, b}),
                  [ia, ib, n, ca, cb](Graph& gr, std::size_t self) {
                    auto d = gr.grad_buffer(self);
                    std::vector<double> da(n * ca), db(n * cb);
                    for (std::size_t i = 0; i < n; ++i) {
                      for (std::size_t j = 0; j < ca; ++j) da[i * ca + j] = d[i * (ca + cb) + j];
                      for (std::size_t j = 0; j < cb; ++j) db[i * cb + j] = d[i * (ca + cb) + ca + j];
                    }
                    gr.accumulate(ia, std::move(da));
                    gr.accumulate(ib, std::move(db));
                  },
                  "concat_cols");
}

/// Column gather: out[:, p] = a[:, index[p]].
inline Var gather_cols(const Var& a, std::vector<std::size_t> index) {
  Graph& g = *a.graph();
  const Tensor& av = a.value();
  detail::require_matrix(av, "gather_cols");
  const std::size_t n = av.shape()[0], c = av.shape()[1], m = index.size();
  for (std::size_t p : index)
    if (p >= c) throw IndexError("gather_cols: index " + std::to_string(p) + " outside width " + std::to_string(c));
  Tensor out(Shape{n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < m; ++p) out[i * m + p] = av[i * c + index[p]];
  const std::size_t ia = a.id();
  return g.record(std::move(out), g.requires_grad(a),
                  [ia, n, c, m, index = std::move(index)](Graph& gr, std::size_t self) {
                    auto d = gr.grad_buffer(self);
                    std::vector<double> da(n * c, 0.0);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t p = 0; p < m; ++p) da[i * c + index[p]] += d[i * m + p];
                    gr.accumulate(ia, std::move(da));
                  },
                  "gather_cols");
}

/// Row lookup: out[i, :] = table[ids[i], :].
inline Var embedding(const Var& table, std::vector<std::size_t> ids) {
  Graph& g = *table.graph();
  const Tensor& tv = table.value();
  detail::require_matrix(tv, "embedding");
  const std::size_t rows = tv.shape()[0], d = tv.shape()[1], n = ids.size();
  for (std::size_t id : ids)
    if (id >= rows) throw IndexError("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(rows));
  Tensor out(Shape{n, d}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = tv[ids[i] * d + j];
  const std::size_t it = table.id();
  return g.record(std::move(out), g.requires_grad(table),
                  [it, rows, d, n, ids = std::move(ids)](Graph& gr, std::size_t self) {
                    auto dout = gr.grad_buffer(self);
                    std::vector<double> dt(rows * d, 0.0);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) dt[ids[i] * d + j] += dout[i * d + j];
                    gr.accumulate(it, std::move(dt));
                  },
                  "embedding");
}

/// Row-wise RMS normalization with a learned gain: y = g ⊙ x / sqrt(mean(x²) + eps).
inline Var rms_norm(const Var& x, const Var& gain, double eps = 1e-5) {
  Graph& g = detail::same_graph(x, gain);
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "rms_norm");
  const std::size_t n = xv.shape()[0], d = xv.shape()[1];
  if (gain.value().size() != d)
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " vs input " + shape_str(xv.shape()));
  const auto gv = gain.value().data();
  Tensor out(Shape{n, d}, 0.0);
  std::vector<double> inv_rms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[i * d + j] * xv[i * d + j];
    inv_rms[i] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = gv[j] * xv[i * d + j] * inv_rms[i];
  }
  const std::size_t ix = x.id(), ig = gain.id();
  return g.record(std::move(out), detail::any_grad(g, {x, gain}),
                  [ix, ig, n, d, inv_rms = std::move(inv_rms)](Graph& gr, std::size_t self) {
                    auto dy = gr.grad_buffer(self);
                    auto xv = gr.value(ix).data();
                    auto gv = gr.value(ig).data();
                    if (gr.requires_grad(ix)) {
                      std::vector<double> dx(n * d);
                      for (std::size_t i = 0; i < n; ++i) {
                        const double r = inv_rms[i];
                        double dot = 0.0;
                        for (std::size_t j = 0; j < d; ++j) dot += dy[i * d + j] * gv[j] * xv[i * d + j];
                        const double c = dot * r * r * r / static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j)
                          dx[i * d + j] = dy[i * d + j] * gv[j] * r - xv[i * d + j] * c;
                      }
                      gr.accumulate(ix, std::move(dx));
                    }
                    if (gr.requires_grad(ig)) {
                      std::vector<double> dg(d, 0.0);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < d; ++j) dg[j] += dy[i * d + j] * xv[i * d + j] * inv_rms[i];
                      gr.accumulate(ig, std::move(dg));
                    }
                  },
                  "rms_norm");
}

/// Multi-head causal scaled-dot-product attention over one sequence.
/// q, k, v are (positions × d) with d split evenly across heads.
inline Var causal_attention(const Var& q, const Var& k, const Var& v, std::size_t heads) {
  Graph& g = detail::same_graph(q, k);
  detail::same_graph(q, v);
  const Tensor& qv = q.value();
  detail::require_matrix(qv, "causal_attention");
  if (k.shape() != qv.shape() || v.shape() != qv.shape())
    throw DimensionError("causal_attention: q/k/v shapes differ");
  const std::size_t n = qv.shape()[0], d = qv.shape()[1];
  if (heads == 0 || d % heads != 0)
    throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto kv = k.value().data();
  const auto vv = v.value().data();
  // probs[h][i][j] for j <= i, stored dense n×n per head
  std::vector<double> probs(heads * n * n, 0.0);
  Tensor out(Shape{n, d}, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      double* p = probs.data() + (h * n + i) * n;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qv[i * d + off + c] * kv[j * d + off + c];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j <= i; ++j) p[j] /= z;
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t c = 0; c < dh; ++c) out[i * d + off + c] += p[j] * vv[j * d + off + c];
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return g.record(
      std::move(out), detail::any_grad(g, {q, k, v}),
      [iq, ik, iv, n, d, heads, dh, inv_sqrt, probs = std::move(probs)](Graph& gr, std::size_t self) {
        auto dout = gr.grad_buffer(self);
        auto qv = gr.value(iq).data();
        auto kv = gr.value(ik).data();
        auto vv = gr.value(iv).data();
        std::vector<double> dq(n * d, 0.0), dk(n * d, 0.0), dv(n * d, 0.0), dp(n);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < n; ++i) {
            const double* p = probs.data() + (h * n + i) * n;
            double weighted = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += dout[i * d + off + c] * vv[j * d + off + c];
              dp[j] = s;
              weighted += s * p[j];
              for (std::size_t c = 0; c < dh; ++c) dv[j * d + off + c] += p[j] * dout[i * d + off + c];
            }
            for (std::size_t j = 0; j <= i; ++j) {
              const double ds = p[j] * (dp[j] - weighted) * inv_sqrt;
              for (std::size_t c = 0; c < dh; ++c) {
                dq[i * d + off + c] += ds * kv[j * d + off + c];
                dk[j * d + off + c] += ds * qv[i * d + off + c];
              }
            }
          }
        }
        gr.accumulate(iq, std::move(dq));
        gr.accumulate(ik, std::move(dk));
        gr.accumulate(iv, std::move(dv));
      },
      "causal_attention");
}

/// Cross-entropy -log softmax(logits[row])[gold] as a one-element tensor.
inline Var cross_entropy(const Var& logits, std::size_t row, std::size_t gold) {
  Graph& g = *logits.graph();
  const Tensor& lv = logits.value();
  detail::require_matrix(lv, "cross_entropy");
  const std::size_t n = lv.shape()[0], m = lv.shape()[1];
  if (row >= n || gold >= m)
    throw IndexError("cross_entropy: (" + std::to_string(row) + ", " + std::to_string(gold) +
                     ") outside " + shape_str(lv.shape()));
  const auto r = lv.row(row);
  double mx = r[0];
  for (double v : r) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : r) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  const std::size_t il = logits.id();
  return g.record(Tensor::scalar(lse - r[gold]), g.requires_grad(logits),
                  [il, row, gold, n, m, mx, z](Graph& gr, std::size_t self) {
                    const double d = gr.grad_buffer(self)[0];
                    const auto r = gr.value(il).row(row);
                    std::vector<double> dl(n * m, 0.0);
                    for (std::size_t j = 0; j < m; ++j) dl[row * m + j] = d * std::exp(r[j] - mx) / z;
                    dl[row * m + gold] -= d;
                    gr.accumulate(il, std::move(dl));
                  },
                  "cross_entropy");
}

}  // namespace loki::num
