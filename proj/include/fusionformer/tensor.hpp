#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fusionformer/errors.hpp"
#include "fusionformer/util.hpp"

namespace fusionformer {

// Dense row-major tensor of 64-bit floats participating in a reverse-mode
// autodiff graph. A Tensor is a cheap handle onto a graph node; operations
// build new nodes that reference their parents, and backward() walks the
// resulting DAG once in reverse topological order.
//
// Graph construction and backward are single-threaded per graph. Tensors
// that are not attached to a graph are plain immutable buffers and can be
// shared across threads.

namespace detail {

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first backward reaching this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;  // accumulates this->grad into parents

  size_t size() const { return value.size(); }
};

inline thread_local bool g_grad_enabled = true;

inline size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive");
    n *= static_cast<size_t>(e);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream ss;
  ss << "[";
  for (size_t i = 0; i < shape.size(); ++i) ss << (i ? "x" : "") << shape[i];
  ss << "]";
  return ss.str();
}

}  // namespace detail

// Disables graph recording in scope; forward results come out detached.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    node_->shape = std::move(shape);
    node_->value.assign(detail::shape_numel(node_->shape), fill);
    node_->requires_grad = requires_grad;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(shape);
    if (detail::shape_numel(t.node_->shape) != data.size()) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + detail::shape_str(t.node_->shape));
    }
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t(std::move(shape), 0.0, requires_grad);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.node_->value) v = dist(rng);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  size_t size() const { return node_->value.size(); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int extent(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  // Rank-2 accessors; a rank-1 tensor behaves as a single row.
  int rows() const { return ndim() == 2 ? extent(0) : 1; }
  int cols() const { return ndim() == 2 ? extent(1) : extent(0); }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  double& at(int i, int j) { return node_->value[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return node_->value[static_cast<size_t>(i) * cols() + j]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of size " + std::to_string(size()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<double>& grad() {
    if (node_->grad.empty()) node_->grad.assign(size(), 0.0);
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& shared_node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline Tensor make_result(std::vector<int> shape, std::vector<Tensor> parents) {
  Tensor out(std::move(shape));
  bool req = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) req = req || p.requires_grad();
  }
  if (req) {
    out.set_requires_grad(true);
    auto& pv = out.node()->parents;
    pv.reserve(parents.size());
    for (const Tensor& p : parents) pv.push_back(p.shared_node());
  }
  return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// grad += contribution, guarded on requires_grad.
inline void accumulate(TensorNode* n, const std::vector<double>& contrib) {
  if (!n->requires_grad) return;
  for (size_t i = 0; i < contrib.size(); ++i) n->grad[i] += contrib[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix kernels (row-major, no aliasing between out and inputs).

namespace kernels {

// c[m,n] += a[m,k] * b[k,n]
inline void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
inline void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    const double* bi = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Graph operations.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = detail::make_result({m, n}, {a, b});
  kernels::matmul_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = out.node();
    out.node()->backprop = [an, bn, on, m, k, n] {
      if (an->requires_grad)
        kernels::matmul_nt_acc(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
      if (bn->requires_grad)
        kernels::matmul_tn_acc(an->value.data(), on->grad.data(), bn->grad.data(), m, k, n);
    };
  }
  return out;
}

// a[m,k] * b[n,k]^T -> [m,n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: incompatible shapes " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  }
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = detail::make_result({m, n}, {a, b});
  kernels::matmul_nt_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = out.node();
    out.node()->backprop = [an, bn, on, m, k, n] {
      // da += g * b ; db += g^T * a
      if (an->requires_grad)
        kernels::matmul_acc(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
      if (bn->requires_grad)
        kernels::matmul_tn_acc(on->grad.data(), an->value.data(), bn->grad.data(), m, n, k);
    };
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("transpose: rank-2 tensor required");
  const int m = a.rows(), n = a.cols();
  Tensor out = detail::make_result({n, m}, {a});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    out.node()->backprop = [an, on, m, n] {
      if (!an->requires_grad) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          an->grad[static_cast<size_t>(i) * n + j] += on->grad[static_cast<size_t>(j) * m + i];
    };
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = detail::make_result(a.shape(), {a, b});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = out.node();
    out.node()->backprop = [an, bn, on] {
      detail::accumulate(an, on->grad);
      detail::accumulate(bn, on->grad);
    };
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = detail::make_result(a.shape(), {a, b});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = out.node();
    out.node()->backprop = [an, bn, on] {
      detail::accumulate(an, on->grad);
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    };
  }
  return out;
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = detail::make_result(a.shape(), {a, b});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = out.node();
    out.node()->backprop = [an, bn, on] {
      if (an->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
    };
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_result(a.shape(), {a});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * c;
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    out.node()->backprop = [an, on, c] {
      if (an->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    };
  }
  return out;
}

// Adds a length-n row vector to every row of a [m,n] matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || static_cast<size_t>(a.cols()) != b.size()) {
    throw DimensionError("add_rowvec: " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  }
  const int m = a.rows(), n = a.cols();
  Tensor out = detail::make_result(a.shape(), {a, b});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) + b.data()[static_cast<size_t>(j)];
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = out.node();
    out.node()->backprop = [an, bn, on, m, n] {
      detail::accumulate(an, on->grad);
      if (bn->requires_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) bn->grad[static_cast<size_t>(j)] += on->grad[static_cast<size_t>(i) * n + j];
    };
  }
  return out;
}

inline Tensor sqrt_elem(const Tensor& a) {
  Tensor out = detail::make_result(a.shape(), {a});
  for (size_t i = 0; i < out.size(); ++i) {
    double v = a.data()[i];
    if (v < 0.0) throw ContractError("sqrt: negative input " + std::to_string(v));
    out.data()[i] = std::sqrt(v);
  }
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    // subgradient 0 at the origin
    out.node()->backprop = [an, on] {
      if (!an->requires_grad) return;
      for (size_t i = 0; i < on->grad.size(); ++i)
        if (on->value[i] > 0.0) an->grad[i] += on->grad[i] * 0.5 / on->value[i];
    };
  }
  return out;
}

inline Tensor abs_elem(const Tensor& a) {
  Tensor out = detail::make_result(a.shape(), {a});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = std::fabs(a.data()[i]);
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    out.node()->backprop = [an, on] {
      if (!an->requires_grad) return;
      for (size_t i = 0; i < on->grad.size(); ++i) {
        double x = an->value[i];
        if (x > 0.0)
          an->grad[i] += on->grad[i];
        else if (x < 0.0)
          an->grad[i] -= on->grad[i];
      }
    };
  }
  return out;
}

// sign(x): 1 for positive, -1 for negative, 0 at zero. Piecewise constant,
// so the result is detached from the graph (gradient-zero).
inline Tensor sign_elem(const Tensor& a) {
  Tensor out(a.shape());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = a.data()[i];
    out.data()[i] = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
  }
  return out;
}

// sign(x) * sqrt(|x|) with derivative 1/(2*sqrt(|x|)) off zero and
// subgradient 0 at zero.
inline Tensor signed_sqrt(const Tensor& a) {
  Tensor out = detail::make_result(a.shape(), {a});
  for (size_t i = 0; i < out.size(); ++i) {
    double x = a.data()[i];
    out.data()[i] = x >= 0.0 ? std::sqrt(x) : -std::sqrt(-x);
  }
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    out.node()->backprop = [an, on] {
      if (!an->requires_grad) return;
      for (size_t i = 0; i < on->grad.size(); ++i) {
        double ax = std::fabs(an->value[i]);
        if (ax > 0.0) an->grad[i] += on->grad[i] * 0.5 / std::sqrt(ax);
      }
    };
  }
  return out;
}

// Elementwise max; ties propagate the gradient to the first operand.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "maximum");
  Tensor out = detail::make_result(a.shape(), {a, b});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = std::max(a.data()[i], b.data()[i]);
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = out.node();
    out.node()->backprop = [an, bn, on] {
      for (size_t i = 0; i < on->grad.size(); ++i) {
        if (an->value[i] >= bn->value[i]) {
          if (an->requires_grad) an->grad[i] += on->grad[i];
        } else if (bn->requires_grad) {
          bn->grad[i] += on->grad[i];
        }
      }
    };
  }
  return out;
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "minimum");
  Tensor out = detail::make_result(a.shape(), {a, b});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = std::min(a.data()[i], b.data()[i]);
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* bn = b.node();
    auto* on = out.node();
    out.node()->backprop = [an, bn, on] {
      for (size_t i = 0; i < on->grad.size(); ++i) {
        if (an->value[i] <= bn->value[i]) {
          if (an->requires_grad) an->grad[i] += on->grad[i];
        } else if (bn->requires_grad) {
          bn->grad[i] += on->grad[i];
        }
      }
    };
  }
  return out;
}

namespace detail {

// Shared kernel for full and causal row softmax. allowed(i) gives the number
// of leading columns row i may attend to; the rest come out exactly zero and
// receive exactly zero gradient.
template <class AllowedFn>
Tensor softmax_rows_impl(const Tensor& a, AllowedFn allowed) {
  if (a.ndim() != 2) throw DimensionError("softmax_rows: rank-2 tensor required");
  const int m = a.rows(), n = a.cols();
  Tensor out = make_result(a.shape(), {a});
  std::vector<int> counts(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    int cnt = allowed(i);
    counts[static_cast<size_t>(i)] = cnt;
    const double* row = a.data().data() + static_cast<size_t>(i) * n;
    double* orow = out.data().data() + static_cast<size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < cnt; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < cnt; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (int j = 0; j < cnt; ++j) orow[j] /= z;
    for (int j = cnt; j < n; ++j) orow[j] = 0.0;
  }
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    out.node()->backprop = [an, on, counts = std::move(counts), m, n] {
      if (!an->requires_grad) return;
      for (int i = 0; i < m; ++i) {
        const int cnt = counts[static_cast<size_t>(i)];
        const double* y = on->value.data() + static_cast<size_t>(i) * n;
        const double* g = on->grad.data() + static_cast<size_t>(i) * n;
        double* gx = an->grad.data() + static_cast<size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < cnt; ++j) dot += g[j] * y[j];
        for (int j = 0; j < cnt; ++j) gx[j] += y[j] * (g[j] - dot);
      }
    };
  }
  return out;
}

}  // namespace detail

// Row-wise softmax, stabilized by row-max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
  const int n = a.ndim() == 2 ? a.cols() : static_cast<int>(a.size());
  if (a.ndim() == 1) {
    Tensor row = Tensor::from_data({1, n}, a.data(), false);
    // rank-1 convenience path, forward only
    Tensor r = detail::softmax_rows_impl(row, [n](int) { return n; });
    return Tensor::from_data({n}, r.data(), false);
  }
  return detail::softmax_rows_impl(a, [n](int) { return n; });
}

// Row i attends to columns 0..i. Disallowed entries are exactly zero.
inline Tensor causal_softmax_rows(const Tensor& a) {
  if (a.ndim() != 2 || a.rows() != a.cols())
    throw DimensionError("causal_softmax_rows: square matrix required, got " +
                         detail::shape_str(a.shape()));
  return detail::softmax_rows_impl(a, [](int i) { return i + 1; });
}

inline Tensor sum(const Tensor& a) {
  Tensor out = detail::make_result({1}, {a});
  out.data()[0] = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    out.node()->backprop = [an, on] {
      if (!an->requires_grad) return;
      for (double& g : an->grad) g += on->grad[0];
    };
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  Tensor s = sum(a);
  return scale(s, 1.0 / static_cast<double>(a.size()));
}

// Gathers rows of table by id. `table_name` labels out-of-range errors.
inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids,
                             const std::string& table_name) {
  if (table.ndim() != 2) throw DimensionError("embedding_rows: rank-2 table required");
  const int v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw VocabularyError("id " + std::to_string(id) + " out of range for table '" + table_name +
                            "' of size " + std::to_string(v));
    }
  }
  const int L = static_cast<int>(ids.size());
  Tensor out = detail::make_result({L, d}, {table});
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) = table.at(ids[static_cast<size_t>(i)], j);
  if (out.requires_grad()) {
    auto* tn = table.node();
    auto* on = out.node();
    auto ids_copy = ids;
    out.node()->backprop = [tn, on, ids_copy, d] {
      if (!tn->requires_grad) return;
      for (size_t i = 0; i < ids_copy.size(); ++i) {
        double* dst = tn->grad.data() + static_cast<size_t>(ids_copy[i]) * d;
        const double* src = on->grad.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

// Concatenates rank-2 tensors with equal row counts along the feature axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const int m = parts[0].rows();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.rows() != m)
      throw DimensionError("concat_cols: row mismatch " + detail::shape_str(p.shape()));
    total += p.cols();
  }
  Tensor out = detail::make_result({m, total}, parts);
  int off = 0;
  for (const Tensor& p : parts) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
    off += p.cols();
  }
  if (out.requires_grad()) {
    std::vector<detail::TensorNode*> pnodes;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
      pnodes.push_back(p.node());
      widths.push_back(p.cols());
    }
    auto* on = out.node();
    out.node()->backprop = [pnodes, widths, on, m, total] {
      int off2 = 0;
      for (size_t k = 0; k < pnodes.size(); ++k) {
        const int w = widths[k];
        if (pnodes[k]->requires_grad) {
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              pnodes[k]->grad[static_cast<size_t>(i) * w + j] +=
                  on->grad[static_cast<size_t>(i) * total + off2 + j];
        }
        off2 += w;
      }
    };
  }
  return out;
}

inline Tensor slice_cols(const Tensor& a, int start, int count) {
  if (a.ndim() != 2 || start < 0 || count <= 0 || start + count > a.cols())
    throw DimensionError("slice_cols: [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of " +
                         detail::shape_str(a.shape()));
  const int m = a.rows(), n = a.cols();
  Tensor out = detail::make_result({m, count}, {a});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < count; ++j) out.at(i, j) = a.at(i, start + j);
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    out.node()->backprop = [an, on, m, n, start, count] {
      if (!an->requires_grad) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j)
          an->grad[static_cast<size_t>(i) * n + start + j] +=
              on->grad[static_cast<size_t>(i) * count + j];
    };
  }
  return out;
}

// Per-row layer normalization with learnable gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.ndim() != 2) throw DimensionError("layer_norm: rank-2 input required");
  const int m = x.rows(), n = x.cols();
  if (static_cast<int>(gain.size()) != n || static_cast<int>(bias.size()) != n)
    throw DimensionError("layer_norm: gain/bias width mismatch");
  Tensor out = detail::make_result({m, n}, {x, gain, bias});
  std::vector<double> inv_std(static_cast<size_t>(m));
  std::vector<double> xhat(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const double* row = x.data().data() + static_cast<size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = inv;
    double* orow = out.data().data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double xh = (row[j] - mu) * inv;
      xhat[static_cast<size_t>(i) * n + j] = xh;
      orow[j] = xh * gain.data()[static_cast<size_t>(j)] + bias.data()[static_cast<size_t>(j)];
    }
  }
  if (out.requires_grad()) {
    auto* xn = x.node();
    auto* gn = gain.node();
    auto* bn = bias.node();
    auto* on = out.node();
    out.node()->backprop = [xn, gn, bn, on, inv_std = std::move(inv_std),
                            xhat = std::move(xhat), m, n] {
      for (int i = 0; i < m; ++i) {
        const double* g = on->grad.data() + static_cast<size_t>(i) * n;
        const double* xh = xhat.data() + static_cast<size_t>(i) * n;
        if (gn->requires_grad)
          for (int j = 0; j < n; ++j) gn->grad[static_cast<size_t>(j)] += g[j] * xh[j];
        if (bn->requires_grad)
          for (int j = 0; j < n; ++j) bn->grad[static_cast<size_t>(j)] += g[j];
        if (xn->requires_grad) {
          double mean_gxh = 0.0, mean_g = 0.0;
          for (int j = 0; j < n; ++j) {
            const double dxh = g[j] * gn->value[static_cast<size_t>(j)];
            mean_g += dxh;
            mean_gxh += dxh * xh[j];
          }
          mean_g /= n;
          mean_gxh /= n;
          double* gx = xn->grad.data() + static_cast<size_t>(i) * n;
          const double inv = inv_std[static_cast<size_t>(i)];
          for (int j = 0; j < n; ++j) {
            const double dxh = g[j] * gn->value[static_cast<size_t>(j)];
            gx[j] += inv * (dxh - mean_g - xh[j] * mean_gxh);
          }
        }
      }
    };
  }
  return out;
}

// GPT2's tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kK = 0.044715;
  Tensor out = detail::make_result(a.shape(), {a});
  for (size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kK * x * x * x)));
  }
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    out.node()->backprop = [an, on] {
      if (!an->requires_grad) return;
      for (size_t i = 0; i < on->grad.size(); ++i) {
        const double x = an->value[i];
        const double u = kC * (x + kK * x * x * x);
        const double t = std::tanh(u);
        const double sech2 = 1.0 - t * t;
        const double du = kC * (1.0 + 3.0 * kK * x * x);
        an->grad[i] += on->grad[i] * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du);
      }
    };
  }
  return out;
}

// Inverted dropout. Identity when `training` is false or p == 0.
inline Tensor dropout(const Tensor& a, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw ContractError("dropout: p must be < 1");
  const double keep = 1.0 - p;
  std::bernoulli_distribution dist(keep);
  std::vector<double> mask(a.size());
  for (double& mv : mask) mv = dist(rng) ? 1.0 / keep : 0.0;
  Tensor out = detail::make_result(a.shape(), {a});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * mask[i];
  if (out.requires_grad()) {
    auto* an = a.node();
    auto* on = out.node();
    out.node()->backprop = [an, on, mask] {
      if (!an->requires_grad) return;
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * mask[i];
    };
  }
  return out;
}

// Mean next-token cross-entropy from logits over rows whose target is not
// `ignore_id`. Stable log-softmax; gradient is (softmax - onehot)/n_valid.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                                 int ignore_id) {
  if (logits.ndim() != 2 || static_cast<size_t>(logits.rows()) != targets.size())
    throw DimensionError("cross_entropy_rows: logits " + detail::shape_str(logits.shape()) +
                         " vs " + std::to_string(targets.size()) + " targets");
  const int m = logits.rows(), v = logits.cols();
  int n_valid = 0;
  for (int t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || t >= v)
      throw VocabularyError("target id " + std::to_string(t) + " out of range for vocab " +
                            std::to_string(v));
    ++n_valid;
  }
  if (n_valid == 0) throw EmptyLossError("cross_entropy_rows: every target position is masked");
  Tensor out = detail::make_result({1}, {logits});
  std::vector<double> probs;
  const bool need_grad = out.requires_grad();
  if (need_grad) probs.resize(static_cast<size_t>(m) * v);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    const double* row = logits.data().data() + static_cast<size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double logz = std::log(z) + mx;
    if (t != ignore_id) total += logz - row[t];
    if (need_grad) {
      double* prow = probs.data() + static_cast<size_t>(i) * v;
      if (t == ignore_id) {
        std::fill(prow, prow + v, 0.0);
      } else {
        for (int j = 0; j < v; ++j) prow[j] = std::exp(row[j] - logz);
      }
    }
  }
  out.data()[0] = total / n_valid;
  if (need_grad) {
    auto* ln = logits.node();
    auto* on = out.node();
    auto tgt = targets;
    out.node()->backprop = [ln, on, probs = std::move(probs), tgt, ignore_id, m, v, n_valid] {
      if (!ln->requires_grad) return;
      const double g = on->grad[0] / n_valid;
      for (int i = 0; i < m; ++i) {
        const int t = tgt[static_cast<size_t>(i)];
        if (t == ignore_id) continue;
        const double* prow = probs.data() + static_cast<size_t>(i) * v;
        double* grow = ln->grad.data() + static_cast<size_t>(i) * v;
        for (int j = 0; j < v; ++j) grow[j] += g * prow[j];
        grow[t] -= g;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass.

inline void backward(const Tensor& root) {
  if (root.size() != 1)
    throw ContractError("backward: root must be scalar, got " +
                        detail::shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative DFS for reverse topological order; each node visited once.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> visited;
  std::vector<std::pair<detail::TensorNode*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::TensorNode* p = node->parents[idx++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::TensorNode* n : order) {
    if (n->grad.empty()) n->grad.assign(n->size(), 0.0);
  }
  root.node()->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
}

}  // namespace fusionformer
