#pragma once

// Tape-based reverse-mode differentiation over immutable Tensors.
//
// A Graph records every primitive application in call order. Inputs always
// precede their consumers, so walking the record backwards visits each node
// after all of its consumers. Gradient contributions are accumulated in that
// fixed order, which makes backward bitwise reproducible.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "umr/errors.hpp"
#include "umr/tensor.hpp"

namespace umr {

class Graph;

/// Handle to a node recorded in a Graph. Cheap to copy; valid while the Graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  inline const Tensor& value() const;
  inline const Shape& shape() const;
  inline bool tracked() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  /// Receives the gradient of the node's output and accumulates into its inputs.
  using BackwardFn = std::function<void(Graph&, std::span<const double>)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), requires_grad, {}, {}});
    return Var(this, nodes_.size() - 1);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Record a primitive. `backward` is dropped when no input is tracked.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool tracked = false;
    for (const auto& v : inputs) tracked = tracked || nodes_.at(v.id()).requires_grad;
    nodes_.push_back(Node{std::move(value), tracked, {}, tracked ? std::move(backward) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    bool tracked = false;
    for (const auto& v : inputs) tracked = tracked || nodes_.at(v.id()).requires_grad;
    nodes_.push_back(Node{std::move(value), tracked, {}, tracked ? std::move(backward) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool tracked(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of node `id`, zero-initialised on first use; nullptr if untracked.
  double* grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty() && n.value.size() > 0) n.grad.assign(n.value.size(), 0.0);
    return n.grad.data();
  }

  /// Populate the gradient of every tracked node with d(root)/d(node).
  void backward(Var root) {
    if (root.graph() != this) throw ContractError("backward: root belongs to another graph");
    const auto& rv = value(root.id());
    if (rv.size() != 1) throw ContractError("backward: root must be a scalar, got shape " + shape_str(rv.shape()));
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[root.id()].requires_grad) return;
    grad_buffer(root.id())[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, std::span<const double>(n.grad));
    }
  }

  /// Gradient of a node after backward(); zeros when nothing flowed into it.
  Tensor grad(Var v) const {
    const auto& n = nodes_.at(v.id());
    if (n.grad.empty()) return Tensor::zeros(n.value.shape());
    return Tensor(n.value.shape(), n.grad);
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad;
    std::vector<double> grad;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline const Shape& Var::shape() const { return value().shape(); }
inline bool Var::tracked() const { return graph_->tracked(id_); }

namespace detail {

inline Graph& graph_of(Var a) {
  if (a.graph() == nullptr) throw ContractError("operation on an unbound Var");
  return *a.graph();
}

inline Graph& graph_of(Var a, Var b) {
  if (a.graph() != b.graph()) throw ContractError("operands belong to different graphs");
  return graph_of(a);
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

inline void require_finite(const char* op, const Tensor& a) {
  for (double v : a.data()) {
    if (std::isnan(v)) throw NumericDomainError(std::string(op) + ": NaN input");
  }
}

// C += A * B, A: m x k, B: k x n (row-major spans).
inline void gemm_acc(std::span<const double> a, std::span<const double> b, double* c, std::size_t m,
                     std::size_t k, std::size_t n) {
  const double* __restrict ap = a.data();
  const double* __restrict bp = b.data();
  double* __restrict cp = c;
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict ci = cp + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = ap[i * k + l];
      const double* __restrict bl = bp + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
}

// C += A * B^T, A: m x k, B: n x k.
inline void gemm_nt_acc(std::span<const double> a, std::span<const double> b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  const double* __restrict ap = a.data();
  const double* __restrict bp = b.data();
  double* __restrict cp = c;
  for (std::size_t i = 0; i < m; ++i) {
    const double* __restrict ai = ap + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* __restrict bj = bp + j * k;
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += ai[l] * bj[l];
      cp[i * n + j] += s;
    }
  }
}

// C += A^T * B, A: k x m, B: k x n.
inline void gemm_tn_acc(std::span<const double> a, std::span<const double> b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  const double* __restrict ap = a.data();
  const double* __restrict bp = b.data();
  double* __restrict cp = c;
  for (std::size_t l = 0; l < k; ++l) {
    const double* __restrict al = ap + l * m;
    const double* __restrict bl = bp + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double ali = al[i];
      double* __restrict ci = cp + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
    }
  }
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Var add(Var a, Var b) {
  auto& g = detail::graph_of(a, b);
  const Tensor &x = a.value(), &y = b.value();
  detail::require_same_shape("add", x, y);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor(x.shape(), std::move(out)), {a, b}, [ia, ib](Graph& gr, std::span<const double> go) {
    for (auto id : {ia, ib}) {
      if (double* d = gr.grad_buffer(id)) {
        for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
      }
    }
  });
}

inline Var sub(Var a, Var b) {
  auto& g = detail::graph_of(a, b);
  const Tensor &x = a.value(), &y = b.value();
  detail::require_same_shape("sub", x, y);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor(x.shape(), std::move(out)), {a, b}, [ia, ib](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
    }
    if (double* d = gr.grad_buffer(ib)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[i] -= go[i];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  auto& g = detail::graph_of(a, b);
  const Tensor x = a.value(), y = b.value();
  detail::require_same_shape("mul", x, y);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor(x.shape(), std::move(out)), {a, b}, [ia, ib, x, y](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i] * y[i];
    }
    if (double* d = gr.grad_buffer(ib)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i] * x[i];
    }
  });
}

/// a * s + shift, elementwise with scalar constants.
inline Var affine(Var a, double s, double shift = 0.0) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s + shift;
  const auto ia = a.id();
  return g.record(Tensor(x.shape(), std::move(out)), {a}, [ia, s](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i] * s;
    }
  });
}

inline Var scale(Var a, double s) { return affine(a, s, 0.0); }

/// Elementwise product with a constant tensor (no gradient to `c`).
inline Var mul_const(Var a, const Tensor& c) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  detail::require_same_shape("mul_const", x, c);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c[i];
  const auto ia = a.id();
  return g.record(Tensor(x.shape(), std::move(out)), {a}, [ia, c](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i] * c[i];
    }
  });
}

inline Var exp(Var a) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  Tensor y(x.shape(), std::move(out));
  const auto ia = a.id();
  return g.record(y, {a}, [ia, y](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i] * y[i];
    }
  });
}

inline Var log(Var a) {
  auto& g = detail::graph_of(a);
  const Tensor x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] >= 0.0)) throw NumericDomainError("log: argument " + std::to_string(x[i]) + " outside domain");
    out[i] = std::log(x[i]);
  }
  const auto ia = a.id();
  return g.record(Tensor(x.shape(), std::move(out)), {a}, [ia, x](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i] / x[i];
    }
  });
}

/// Exact GELU: x * Phi(x).
inline Var gelu(Var a) {
  auto& g = detail::graph_of(a);
  const Tensor x = a.value();
  std::vector<double> out(x.size());
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
  const auto ia = a.id();
  return g.record(Tensor(x.shape(), std::move(out)), {a}, [ia, x](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      constexpr double inv_sqrt2pi = 0.39894228040143267794;
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
        d[i] += go[i] * (cdf + x[i] * pdf);
      }
    }
  });
}

// ---- reductions ------------------------------------------------------------

inline Var sum(Var a) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const auto ia = a.id();
  return g.record(Tensor::scalar(s), {a}, [ia](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      const auto n = gr.value(ia).size();
      for (std::size_t i = 0; i < n; ++i) d[i] += go[0];
    }
  });
}

inline Var mean(Var a) {
  const auto n = a.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// Per-row sums of a matrix: [m x n] -> [m].
inline Var sum_rows(Var a) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  detail::require_matrix("sum_rows", x);
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += x.at(i, j);
  const auto ia = a.id();
  return g.record(Tensor(Shape{m}, std::move(out)), {a}, [ia, m, n](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += go[i];
    }
  });
}

// ---- linear algebra --------------------------------------------------------

inline Var matmul(Var a, Var b) {
  auto& g = detail::graph_of(a, b);
  const Tensor x = a.value(), y = b.value();
  detail::require_matrix("matmul", x);
  detail::require_matrix("matmul", y);
  if (x.cols() != y.rows()) {
    throw DimensionError("matmul: inner extents disagree, " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
  }
  const auto m = x.rows(), k = x.cols(), n = y.cols();
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(x.data(), y.data(), out.data(), m, k, n);
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor(Shape{m, n}, std::move(out)), {a, b},
                  [ia, ib, x, y, m, k, n](Graph& gr, std::span<const double> go) {
                    if (double* d = gr.grad_buffer(ia)) detail::gemm_nt_acc(go, y.data(), d, m, n, k);
                    if (double* d = gr.grad_buffer(ib)) detail::gemm_tn_acc(x.data(), go, d, k, m, n);
                  });
}

/// a * b^T without materialising the transpose. a: m x k, b: n x k.
inline Var matmul_nt(Var a, Var b) {
  auto& g = detail::graph_of(a, b);
  const Tensor x = a.value(), y = b.value();
  detail::require_matrix("matmul_nt", x);
  detail::require_matrix("matmul_nt", y);
  if (x.cols() != y.cols()) {
    throw DimensionError("matmul_nt: widths disagree, " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  const auto m = x.rows(), k = x.cols(), n = y.rows();
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt_acc(x.data(), y.data(), out.data(), m, k, n);
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor(Shape{m, n}, std::move(out)), {a, b},
                  [ia, ib, x, y, m, k, n](Graph& gr, std::span<const double> go) {
                    // dA = G * B, dB = G^T * A
                    if (double* d = gr.grad_buffer(ia)) detail::gemm_acc(go, y.data(), d, m, n, k);
                    if (double* d = gr.grad_buffer(ib)) detail::gemm_tn_acc(go, x.data(), d, n, m, k);
                  });
}

inline Var transpose(Var a) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  detail::require_matrix("transpose", x);
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.at(i, j);
  const auto ia = a.id();
  return g.record(Tensor(Shape{n, m}, std::move(out)), {a}, [ia, m, n](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += go[j * m + i];
    }
  });
}

/// Adds a length-n vector to every row of an m x n matrix.
inline Var add_rowvec(Var a, Var v) {
  auto& g = detail::graph_of(a, v);
  const Tensor& x = a.value();
  const Tensor& b = v.value();
  detail::require_matrix("add_rowvec", x);
  if (b.rank() != 1 || b.size() != x.cols()) {
    throw DimensionError("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.at(i, j) + b[j];
  const auto ia = a.id(), iv = v.id();
  return g.record(Tensor(x.shape(), std::move(out)), {a, v}, [ia, iv, m, n](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < m * n; ++i) d[i] += go[i];
    }
    if (double* d = gr.grad_buffer(iv)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += go[i * n + j];
    }
  });
}

// ---- row-wise nonlinearities -------------------------------------------------

/// Row softmax with per-row max subtraction.
inline Var softmax_rows(Var a) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  detail::require_matrix("softmax_rows", x);
  detail::require_finite("softmax_rows", x);
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(x.at(i, j) - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor y(x.shape(), std::move(out));
  const auto ia = a.id();
  return g.record(y, {a}, [ia, y, m, n](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * y.at(i, j);
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += y.at(i, j) * (go[i * n + j] - dot);
      }
    }
  });
}

/// Row log-softmax, x - max - log(sum(exp(x - max))).
inline Var log_softmax_rows(Var a) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  detail::require_matrix("log_softmax_rows", x);
  detail::require_finite("log_softmax_rows", x);
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x.at(i, j) - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.at(i, j) - lz;
  }
  Tensor y(x.shape(), std::move(out));
  const auto ia = a.id();
  return g.record(y, {a}, [ia, y, m, n](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < m; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += go[i * n + j];
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += go[i * n + j] - std::exp(y.at(i, j)) * gs;
      }
    }
  });
}

/// Per-row layer normalisation with population variance, then gain and bias.
inline Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-5) {
  auto& g = detail::graph_of(a, gain);
  detail::graph_of(a, bias);
  if (!(eps > 0.0)) throw ContractError("layer_norm_rows: eps must be positive");
  const Tensor& x = a.value();
  const Tensor gm = gain.value();
  const Tensor& bt = bias.value();
  detail::require_matrix("layer_norm_rows", x);
  const auto m = x.rows(), n = x.cols();
  if (gm.rank() != 1 || gm.size() != n || bt.rank() != 1 || bt.size() != n) {
    throw DimensionError("layer_norm_rows: input " + shape_str(x.shape()) + " with gain " + shape_str(gm.shape()) +
                         " and bias " + shape_str(bt.shape()));
  }
  std::vector<double> xhat(m * n), out(m * n), rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x.at(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x.at(i, j) - mu) * rstd[i];
      out[i * n + j] = xhat[i * n + j] * gm[j] + bt[j];
    }
  }
  const auto ia = a.id(), ig = gain.id(), ib = bias.id();
  return g.record(Tensor(x.shape(), std::move(out)), {a, gain, bias},
                  [ia, ig, ib, gm, xhat = std::move(xhat), rstd = std::move(rstd), m, n](Graph& gr,
                                                                                        std::span<const double> go) {
                    if (double* d = gr.grad_buffer(ig)) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) d[j] += go[i * n + j] * xhat[i * n + j];
                    }
                    if (double* d = gr.grad_buffer(ib)) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) d[j] += go[i * n + j];
                    }
                    if (double* d = gr.grad_buffer(ia)) {
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t i = 0; i < m; ++i) {
                        double s1 = 0.0, s2 = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double gx = go[i * n + j] * gm[j];
                          s1 += gx;
                          s2 += gx * xhat[i * n + j];
                        }
                        for (std::size_t j = 0; j < n; ++j) {
                          const double gx = go[i * n + j] * gm[j];
                          d[i * n + j] += rstd[i] * (gx - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
                        }
                      }
                    }
                  });
}

/// Scales each row to unit Euclidean norm; rows with norm < eps are divided by eps instead.
inline Var l2_normalize_rows(Var a, double eps = 1e-12) {
  auto& g = detail::graph_of(a);
  if (!(eps > 0.0)) throw ContractError("l2_normalize_rows: eps must be positive");
  const Tensor x = a.value();
  detail::require_matrix("l2_normalize_rows", x);
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m * n), denom(m);
  std::vector<char> clamped(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += x.at(i, j) * x.at(i, j);
    const double nrm = std::sqrt(ss);
    clamped[i] = nrm < eps;
    denom[i] = clamped[i] ? eps : nrm;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.at(i, j) / denom[i];
  }
  Tensor y(x.shape(), std::move(out));
  const auto ia = a.id();
  return g.record(y, {a}, [ia, y, denom = std::move(denom), clamped = std::move(clamped), m, n](
                              Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < m; ++i) {
        if (clamped[i]) {
          for (std::size_t j = 0; j < n; ++j) d[i * n + j] += go[i * n + j] / denom[i];
          continue;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * y.at(i, j);
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += (go[i * n + j] - y.at(i, j) * dot) / denom[i];
      }
    }
  });
}

// ---- structural ------------------------------------------------------------

/// Stacks matrices with equal column counts vertically.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  auto& g = detail::graph_of(parts.front());
  const auto n = parts.front().value().cols();
  std::vector<double> out;
  std::vector<std::size_t> ids, offsets;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::graph_of(parts.front(), p);
    const Tensor& t = p.value();
    if (t.cols() != n) throw DimensionError("concat_rows: width " + std::to_string(t.cols()) + " vs " + std::to_string(n));
    ids.push_back(p.id());
    offsets.push_back(out.size());
    out.insert(out.end(), t.data().begin(), t.data().end());
    rows += t.rows();
  }
  return g.record(Tensor(Shape{rows, n}, std::move(out)), parts,
                  [ids, offsets](Graph& gr, std::span<const double> go) {
                    for (std::size_t p = 0; p < ids.size(); ++p) {
                      if (double* d = gr.grad_buffer(ids[p])) {
                        const auto len = gr.value(ids[p]).size();
                        for (std::size_t i = 0; i < len; ++i) d[i] += go[offsets[p] + i];
                      }
                    }
                  });
}

/// Joins matrices with equal row counts side by side.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  auto& g = detail::graph_of(parts.front());
  const auto m = parts.front().value().rows();
  std::vector<std::size_t> ids, widths, col0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::graph_of(parts.front(), p);
    const Tensor& t = p.value();
    if (t.rows() != m) throw DimensionError("concat_cols: rows " + std::to_string(t.rows()) + " vs " + std::to_string(m));
    ids.push_back(p.id());
    widths.push_back(t.cols());
    col0.push_back(total);
    total += t.cols();
  }
  std::vector<double> out(m * total);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& t = parts[p].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[p]; ++j) out[i * total + col0[p] + j] = t.at(i, j);
  }
  return g.record(Tensor(Shape{m, total}, std::move(out)), parts,
                  [ids, widths, col0, m, total](Graph& gr, std::span<const double> go) {
                    for (std::size_t p = 0; p < ids.size(); ++p) {
                      if (double* d = gr.grad_buffer(ids[p])) {
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < widths[p]; ++j) d[i * widths[p] + j] += go[i * total + col0[p] + j];
                      }
                    }
                  });
}

/// Columns [c0, c1) of a matrix.
inline Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  detail::require_matrix("slice_cols", x);
  const auto m = x.rows(), n = x.cols();
  if (c0 >= c1 || c1 > n) throw DimensionError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + shape_str(x.shape()));
  const auto w = c1 - c0;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.at(i, c0 + j);
  const auto ia = a.id();
  return g.record(Tensor(Shape{m, w}, std::move(out)), {a}, [ia, m, n, w, c0](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) d[i * n + c0 + j] += go[i * w + j];
    }
  });
}

/// Rows [r0, r1) of a matrix.
inline Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  detail::require_matrix("slice_rows", x);
  const auto m = x.rows(), n = x.cols();
  if (r0 >= r1 || r1 > m) throw DimensionError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " + shape_str(x.shape()));
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                          x.data().begin() + static_cast<std::ptrdiff_t>(r1 * n));
  const auto ia = a.id();
  return g.record(Tensor(Shape{r1 - r0, n}, std::move(out)), {a}, [ia, r0, n](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[r0 * n + i] += go[i];
    }
  });
}

/// Row lookup: out[i] = table[ids[i]]. Backward scatters in index order.
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
  auto& g = detail::graph_of(table);
  const Tensor& t = table.value();
  detail::require_matrix("gather_rows", t);
  const auto n = t.cols();
  std::vector<double> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= t.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(ids[i]) + " outside table " + shape_str(t.shape()));
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = t.at(ids[i], j);
  }
  const auto it = table.id();
  const auto m = ids.size();
  return g.record(Tensor(Shape{m, n}, std::move(out)), {table},
                  [it, n, ids = std::move(ids)](Graph& gr, std::span<const double> go) {
                    if (double* d = gr.grad_buffer(it)) {
                      for (std::size_t i = 0; i < ids.size(); ++i)
                        for (std::size_t j = 0; j < n; ++j) d[ids[i] * n + j] += go[i * n + j];
                    }
                  });
}

/// out[i] = a[i, cols[i]] for an m x n matrix; result has shape [m].
inline Var pick(Var a, std::vector<std::size_t> cols) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  detail::require_matrix("pick", x);
  const auto m = x.rows(), n = x.cols();
  if (cols.size() != m) throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " + std::to_string(m) + " rows");
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] >= n) throw DimensionError("pick: column " + std::to_string(cols[i]) + " outside " + shape_str(x.shape()));
    out[i] = x.at(i, cols[i]);
  }
  const auto ia = a.id();
  return g.record(Tensor(Shape{m}, std::move(out)), {a}, [ia, n, cols = std::move(cols)](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < cols.size(); ++i) d[i * n + cols[i]] += go[i];
    }
  });
}

/// Reinterprets the data with a new shape of equal element count.
inline Var reshape(Var a, Shape shape) {
  auto& g = detail::graph_of(a);
  const Tensor& x = a.value();
  if (numel(shape) != x.size()) throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  const auto ia = a.id();
  return g.record(Tensor(std::move(shape), x.values()), {a}, [ia](Graph& gr, std::span<const double> go) {
    if (double* d = gr.grad_buffer(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
    }
  });
}

}  // namespace umr
