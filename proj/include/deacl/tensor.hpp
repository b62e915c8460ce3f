#pragma once

// Dense real tensors with a reverse-mode differentiation graph.
//
// The graph is rebuilt on every forward pass: each op allocates a Node holding
// its value, the nodes it consumed, and a closure that pushes the output
// gradient back into those inputs. Nothing is retained across iterations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

// Float and double builds live in separate inline namespaces.
#ifdef DEACL_DOUBLE
#define DEACL_PRECISION_NS f64
#else
#define DEACL_PRECISION_NS f32
#endif

namespace deacl {
inline namespace DEACL_PRECISION_NS {

#ifdef DEACL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<Real>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), Real{0});
    return grad;
  }
};

inline thread_local bool grad_mode = true;

// Gradient buffer of input i, or nullptr when that input is not differentiated.
inline Real* input_grad(Node& self, std::size_t i) {
  auto& in = self.inputs[i];
  return in->requires_grad ? in->grad_buffer().data() : nullptr;
}

}  // namespace detail

/// Disables graph recording for the lifetime of the guard (thread-local).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode; }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, Real{0}), requires_grad);
  }

  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }

  static Tensor scalar(Real v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return checked().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= rank()) throw ShapeError("dimension index out of range");
    return shape()[i];
  }
  std::size_t numel() const { return checked().value.size(); }

  std::span<const Real> values() const { return checked().value; }

  /// Writable storage; only leaves may be mutated (graph outputs are immutable).
  std::span<Real> mutable_values() {
    if (!is_leaf()) throw GraphError("cannot mutate the output of an op");
    return checked().value;
  }

  Real item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return values()[0];
  }

  bool requires_grad() const { return checked().requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!is_leaf()) throw GraphError("requires_grad can only be toggled on leaves");
    checked().requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !checked().grad.empty(); }
  std::span<const Real> grad() const { return checked().grad; }
  void zero_grad() { checked().grad.clear(); }

  bool is_leaf() const { return checked().inputs.empty(); }

  /// Copy of the value as a fresh leaf, cut from the graph.
  Tensor detach() const { return Tensor(shape(), checked().value, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  detail::Node& checked() const {
    if (!node_) throw GraphError("use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const char* op, std::span<const Real> v) {
  for (Real x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
}

inline Tensor make_op(const char* op, Shape shape, std::vector<Real> value,
                      std::initializer_list<Tensor> inputs, std::function<void(Node&)> backward) {
  check_finite(op, value);
  Tensor out(std::move(shape), std::move(value), false);
  if (!grad_mode) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.op = op;
  n.requires_grad = true;
  for (const auto& t : inputs) n.inputs.push_back(t.node());
  n.backward = std::move(backward);
  return out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void require_rank(const char* op, const Tensor& a, std::size_t r) {
  if (a.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(a.shape()));
}

// Row-major GEMM kernels; plain loops in a fixed order so results are reproducible.
// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const Real* A, const Real* B, Real* C) {
  for (std::size_t i = 0; i < M; ++i) {
    Real* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const Real a = A[i * K + k];
      if (a == Real{0}) continue;
      const Real* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const Real* A, const Real* B, Real* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const Real* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const Real a = A[k * M + i];
      if (a == Real{0}) continue;
      Real* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

inline std::vector<Real> transposed(std::size_t rows, std::size_t cols, const Real* A) {
  std::vector<Real> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = A[i * cols + j];
  return t;
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const Real* A, const Real* B, Real* C) {
  const auto bt = transposed(N, K, B);
  gemm_nn(M, N, K, A, bt.data(), C);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  const auto av = a.values(), bv = b.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_op("add", a.shape(), std::move(out), {a, b}, [](detail::Node& s) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Real* g = detail::input_grad(s, k))
        for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  const auto av = a.values(), bv = b.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i];
    if (Real* g = detail::input_grad(s, 1))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] -= s.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  const auto av = a.values(), bv = b.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& s) {
    const auto& av = s.inputs[0]->value;
    const auto& bv = s.inputs[1]->value;
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * bv[i];
    if (Real* g = detail::input_grad(s, 1))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * av[i];
  });
}

/// Multiply by a constant.
inline Tensor scale(const Tensor& a, Real factor) {
  const auto av = a.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return detail::make_op("scale", a.shape(), std::move(out), {a}, [factor](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * factor;
  });
}

inline Tensor relu(const Tensor& a) {
  const auto av = a.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0 ? av[i] : Real{0};
  return detail::make_op("relu", a.shape(), std::move(out), {a}, [](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i)
        if (s.value[i] > 0) g[i] += s.grad[i];
  });
}

inline Tensor exp(const Tensor& a) {
  const auto av = a.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  return detail::make_op("exp", a.shape(), std::move(out), {a}, [](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * s.value[i];
  });
}

inline Tensor log(const Tensor& a) {
  const auto av = a.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  return detail::make_op("log", a.shape(), std::move(out), {a}, [](detail::Node& s) {
    const auto& av = s.inputs[0]->value;
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] / av[i];
  });
}

/// Clamp into [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& a, Real lo, Real hi) {
  if (lo > hi) throw Error("clamp: lo > hi");
  const auto av = a.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(av[i], lo, hi);
  return detail::make_op("clamp", a.shape(), std::move(out), {a}, [lo, hi](detail::Node& s) {
    const auto& av = s.inputs[0]->value;
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i)
        if (av[i] > lo && av[i] < hi) g[i] += s.grad[i];
  });
}

/// Elementwise sign. Never differentiated: the result is always a constant.
inline Tensor sign(const Tensor& a) {
  const auto av = a.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = av[i] > 0 ? Real{1} : (av[i] < 0 ? Real{-1} : Real{0});
  return Tensor(a.shape(), std::move(out), false);
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<Real> out(a.values().begin(), a.values().end());
  return detail::make_op("reshape", std::move(shape), std::move(out), {a}, [](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  Real acc = 0;
  for (Real v : a.values()) acc += v;
  return detail::make_op("sum", {1}, {acc}, {a}, [](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0)) {
      const auto n = s.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += s.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  Real acc = 0;
  for (Real v : a.values()) acc += v;
  const Real n = static_cast<Real>(a.numel());
  return detail::make_op("mean", {1}, {acc / n}, {a}, [n](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0)) {
      const auto cnt = s.inputs[0]->value.size();
      for (std::size_t i = 0; i < cnt; ++i) g[i] += s.grad[0] / n;
    }
  });
}

/// [B,N] -> [B]
inline Tensor sum_rows(const Tensor& a) {
  detail::require_rank("sum_rows", a, 2);
  const auto B = a.dim(0), N = a.dim(1);
  const auto av = a.values();
  std::vector<Real> out(B, Real{0});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < N; ++j) out[i] += av[i * N + j];
  return detail::make_op("sum_rows", {B}, std::move(out), {a}, [B, N](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < N; ++j) g[i * N + j] += s.grad[i];
  });
}

/// Row-wise Euclidean norm, [B,N] -> [B]. Zero rows are rejected.
inline Tensor l2_norm_rows(const Tensor& a) {
  detail::require_rank("l2_norm_rows", a, 2);
  const auto B = a.dim(0), N = a.dim(1);
  const auto av = a.values();
  std::vector<Real> out(B);
  for (std::size_t i = 0; i < B; ++i) {
    Real acc = 0;
    for (std::size_t j = 0; j < N; ++j) acc += av[i * N + j] * av[i * N + j];
    out[i] = std::sqrt(acc);
    if (!(out[i] > 0)) throw NumericError("l2_norm_rows: zero-norm row " + std::to_string(i));
  }
  return detail::make_op("l2_norm_rows", {B}, std::move(out), {a}, [B, N](detail::Node& s) {
    const auto& av = s.inputs[0]->value;
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < N; ++j) g[i * N + j] += s.grad[i] * av[i * N + j] / s.value[i];
  });
}

/// Scale each row to unit Euclidean norm. Zero rows are rejected.
inline Tensor normalize_rows(const Tensor& a) {
  detail::require_rank("normalize_rows", a, 2);
  const auto B = a.dim(0), N = a.dim(1);
  const auto av = a.values();
  std::vector<Real> out(av.size());
  std::vector<Real> norms(B);
  for (std::size_t i = 0; i < B; ++i) {
    Real acc = 0;
    for (std::size_t j = 0; j < N; ++j) acc += av[i * N + j] * av[i * N + j];
    norms[i] = std::sqrt(acc);
    if (!(norms[i] > 0)) throw NumericError("normalize_rows: zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < N; ++j) out[i * N + j] = av[i * N + j] / norms[i];
  }
  return detail::make_op("normalize_rows", a.shape(), std::move(out), {a},
                         [B, N, norms = std::move(norms)](detail::Node& s) {
                           Real* g = detail::input_grad(s, 0);
                           if (!g) return;
                           // d(x/|x|) = (g - y (y.g)) / |x|
                           for (std::size_t i = 0; i < B; ++i) {
                             const Real* y = s.value.data() + i * N;
                             const Real* go = s.grad.data() + i * N;
                             Real dot = 0;
                             for (std::size_t j = 0; j < N; ++j) dot += y[j] * go[j];
                             for (std::size_t j = 0; j < N; ++j)
                               g[i * N + j] += (go[j] - y[j] * dot) / norms[i];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const auto M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K)
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<Real> out(M * N, Real{0});
  detail::gemm_nn(M, N, K, a.values().data(), b.values().data(), out.data());
  return detail::make_op("matmul", {M, N}, std::move(out), {a, b}, [M, N, K](detail::Node& s) {
    const auto& av = s.inputs[0]->value;
    const auto& bv = s.inputs[1]->value;
    if (Real* g = detail::input_grad(s, 0)) detail::gemm_nt(M, K, N, s.grad.data(), bv.data(), g);
    if (Real* g = detail::input_grad(s, 1)) detail::gemm_tn(K, N, M, av.data(), s.grad.data(), g);
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const auto M = a.dim(0), N = a.dim(1);
  auto out = detail::transposed(M, N, a.values().data());
  return detail::make_op("transpose", {N, M}, std::move(out), {a}, [M, N](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) g[i * N + j] += s.grad[j * M + i];
  });
}

/// x[B,N] + bias[N] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank("add_bias", x, 2);
  detail::require_rank("add_bias", bias, 1);
  const auto B = x.dim(0), N = x.dim(1);
  if (bias.dim(0) != N) throw ShapeError("add_bias: bias length mismatch");
  const auto xv = x.values(), bv = bias.values();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < N; ++j) out[i * N + j] = xv[i * N + j] + bv[j];
  return detail::make_op("add_bias", x.shape(), std::move(out), {x, bias}, [B, N](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i];
    if (Real* g = detail::input_grad(s, 1))
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < N; ++j) g[j] += s.grad[i * N + j];
  });
}

/// Stack rows of a[B1,N] on top of b[B2,N].
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require_rank("concat_rows", a, 2);
  detail::require_rank("concat_rows", b, 2);
  if (a.dim(1) != b.dim(1)) throw ShapeError("concat_rows: column mismatch");
  const auto na = a.numel();
  std::vector<Real> out;
  out.reserve(na + b.numel());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return detail::make_op("concat_rows", {a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {a, b},
                         [na](detail::Node& s) {
                           if (Real* g = detail::input_grad(s, 0))
                             for (std::size_t i = 0; i < na; ++i) g[i] += s.grad[i];
                           if (Real* g = detail::input_grad(s, 1))
                             for (std::size_t i = na; i < s.grad.size(); ++i) g[i - na] += s.grad[i];
                         });
}

/// Rows [begin, end) of a [B,N] tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank("slice_rows", x, 2);
  if (begin > end || end > x.dim(0)) throw ShapeError("slice_rows: bad range");
  const auto N = x.dim(1);
  std::vector<Real> out(x.values().begin() + begin * N, x.values().begin() + end * N);
  return detail::make_op("slice_rows", {end - begin, N}, std::move(out), {x}, [N, begin](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[begin * N + i] += s.grad[i];
  });
}

/// Picks x[i, index[i]] for every row: [B,N] -> [B].
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  detail::require_rank("gather_rows", x, 2);
  const auto B = x.dim(0), N = x.dim(1);
  if (index.size() != B) throw ShapeError("gather_rows: index length mismatch");
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<Real> out(B);
  for (std::size_t i = 0; i < B; ++i) {
    if (idx[i] >= N) throw ShapeError("gather_rows: index out of range");
    out[i] = x.values()[i * N + idx[i]];
  }
  return detail::make_op("gather_rows", {B}, std::move(out), {x}, [N, idx = std::move(idx)](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) g[i * N + idx[i]] += s.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Row-wise softmax family

/// Softmax over each row of [B,N].
inline Tensor softmax(const Tensor& x) {
  detail::require_rank("softmax", x, 2);
  const auto B = x.dim(0), N = x.dim(1);
  const auto xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < B; ++i) {
    const Real* r = xv.data() + i * N;
    const Real m = *std::max_element(r, r + N);
    Real z = 0;
    for (std::size_t j = 0; j < N; ++j) z += (out[i * N + j] = std::exp(r[j] - m));
    for (std::size_t j = 0; j < N; ++j) out[i * N + j] /= z;
  }
  return detail::make_op("softmax", x.shape(), std::move(out), {x}, [B, N](detail::Node& s) {
    Real* g = detail::input_grad(s, 0);
    if (!g) return;
    for (std::size_t i = 0; i < B; ++i) {
      const Real* p = s.value.data() + i * N;
      const Real* go = s.grad.data() + i * N;
      Real dot = 0;
      for (std::size_t j = 0; j < N; ++j) dot += p[j] * go[j];
      for (std::size_t j = 0; j < N; ++j) g[i * N + j] += p[j] * (go[j] - dot);
    }
  });
}

/// Log-softmax over each row of [B,N]. Entries flagged in `excluded` (same
/// length as x, nonzero = excluded) take no part in the normalizer; their
/// output is 0 and they receive no gradient.
inline Tensor log_softmax(const Tensor& x, std::span<const std::uint8_t> excluded = {}) {
  detail::require_rank("log_softmax", x, 2);
  const auto B = x.dim(0), N = x.dim(1);
  if (!excluded.empty() && excluded.size() != x.numel())
    throw ShapeError("log_softmax: mask length mismatch");
  std::vector<std::uint8_t> mask(excluded.begin(), excluded.end());
  if (mask.empty()) mask.assign(x.numel(), 0);
  const auto xv = x.values();
  std::vector<Real> out(xv.size(), Real{0});
  for (std::size_t i = 0; i < B; ++i) {
    Real m = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < N; ++j)
      if (!mask[i * N + j]) m = std::max(m, xv[i * N + j]);
    if (!std::isfinite(m)) throw ShapeError("log_softmax: row " + std::to_string(i) + " fully excluded");
    Real z = 0;
    for (std::size_t j = 0; j < N; ++j)
      if (!mask[i * N + j]) z += std::exp(xv[i * N + j] - m);
    const Real lse = m + std::log(z);
    for (std::size_t j = 0; j < N; ++j)
      if (!mask[i * N + j]) out[i * N + j] = xv[i * N + j] - lse;
  }
  return detail::make_op("log_softmax", x.shape(), std::move(out), {x},
                         [B, N, mask = std::move(mask)](detail::Node& s) {
                           Real* g = detail::input_grad(s, 0);
                           if (!g) return;
                           for (std::size_t i = 0; i < B; ++i) {
                             Real total = 0;
                             for (std::size_t j = 0; j < N; ++j)
                               if (!mask[i * N + j]) total += s.grad[i * N + j];
                             for (std::size_t j = 0; j < N; ++j) {
                               const auto k = i * N + j;
                               if (!mask[k]) g[k] += s.grad[k] - std::exp(s.value[k]) * total;
                             }
                           }
                         });
}

/// Row-wise log-sum-exp of [B,N] -> [B], skipping entries flagged in
/// `excluded`. A fully excluded row yields 0 (empty sum convention).
inline Tensor logsumexp_rows(const Tensor& x, std::span<const std::uint8_t> excluded = {}) {
  detail::require_rank("logsumexp_rows", x, 2);
  const auto B = x.dim(0), N = x.dim(1);
  if (!excluded.empty() && excluded.size() != x.numel())
    throw ShapeError("logsumexp_rows: mask length mismatch");
  std::vector<std::uint8_t> mask(excluded.begin(), excluded.end());
  if (mask.empty()) mask.assign(x.numel(), 0);
  const auto xv = x.values();
  std::vector<Real> out(B, Real{0});
  for (std::size_t i = 0; i < B; ++i) {
    Real m = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < N; ++j)
      if (!mask[i * N + j]) m = std::max(m, xv[i * N + j]);
    if (!std::isfinite(m)) continue;
    Real z = 0;
    for (std::size_t j = 0; j < N; ++j)
      if (!mask[i * N + j]) z += std::exp(xv[i * N + j] - m);
    out[i] = m + std::log(z);
  }
  return detail::make_op("logsumexp_rows", {B}, std::move(out), {x}, [B, N, mask = std::move(mask)](detail::Node& s) {
    Real* g = detail::input_grad(s, 0);
    if (!g) return;
    const auto& xv = s.inputs[0]->value;
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const auto k = i * N + j;
        if (!mask[k]) g[k] += s.grad[i] * std::exp(xv[k] - s.value[i]);
      }
  });
}

// ---------------------------------------------------------------------------
// Convolution family. Images are [B,C,H,W] row-major.

namespace detail {

struct ConvGeometry {
  std::size_t B, C, H, W, O, stride, pad, Ho, Wo;
};

inline void im2col(const ConvGeometry& g, const Real* img, Real* cols) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        Real* row = cols + ((c * 3 + ky) * 3 + kx) * hw;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.H) &&
                                ix < static_cast<std::ptrdiff_t>(g.W);
            row[oy * g.Wo + ox] = inside ? img[(c * g.H + iy) * g.W + ix] : Real{0};
          }
        }
      }
}

inline void col2im_add(const ConvGeometry& g, const Real* cols, Real* img) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const Real* row = cols + ((c * 3 + ky) * 3 + kx) * hw;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) continue;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.W)) continue;
            img[(c * g.H + iy) * g.W + ix] += row[oy * g.Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 3x3 convolution, x[B,C,H,W] * w[O,C,3,3] -> [B,O,Ho,Wo], zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t padding = 1) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", w, 4);
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  if (padding > 1) throw ShapeError("conv2d: padding must be 0 or 1");
  if (w.dim(2) != 3 || w.dim(3) != 3) throw ShapeError("conv2d: only 3x3 kernels are supported");
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv2d: input channels " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), stride, padding, 0, 0};
  if (g.H + 2 * g.pad < 3 || g.W + 2 * g.pad < 3) throw ShapeError("conv2d: input smaller than kernel");
  g.Ho = (g.H + 2 * g.pad - 3) / g.stride + 1;
  g.Wo = (g.W + 2 * g.pad - 3) / g.stride + 1;
  const std::size_t K = g.C * 9, hw = g.Ho * g.Wo;
  auto cols = std::make_shared<std::vector<Real>>(g.B * K * hw);
  std::vector<Real> out(g.B * g.O * hw, Real{0});
  const Real* xv = x.values().data();
  const Real* wv = w.values().data();
  for (std::size_t b = 0; b < g.B; ++b) {
    Real* cb = cols->data() + b * K * hw;
    detail::im2col(g, xv + b * g.C * g.H * g.W, cb);
    detail::gemm_nn(g.O, hw, K, wv, cb, out.data() + b * g.O * hw);
  }
  return detail::make_op("conv2d", {g.B, g.O, g.Ho, g.Wo}, std::move(out), {x, w},
                         [g, K, hw, cols](detail::Node& s) {
                           const auto& wv = s.inputs[1]->value;
                           Real* gx = detail::input_grad(s, 0);
                           Real* gw = detail::input_grad(s, 1);
                           std::vector<Real> dcols(gx ? K * hw : 0);
                           std::vector<Real> dwt(gw ? K * g.O : 0, Real{0});
                           for (std::size_t b = 0; b < g.B; ++b) {
                             const Real* go = s.grad.data() + b * g.O * hw;
                             const Real* cb = cols->data() + b * K * hw;
                             if (gw) {
                               // dW^T[K,O] += cols[K,hw] * dOut^T[hw,O]
                               const auto got = detail::transposed(g.O, hw, go);
                               detail::gemm_nn(K, g.O, hw, cb, got.data(), dwt.data());
                             }
                             if (gx) {
                               std::fill(dcols.begin(), dcols.end(), Real{0});
                               detail::gemm_tn(K, hw, g.O, wv.data(), go, dcols.data());
                               detail::col2im_add(g, dcols.data(), gx + b * g.C * g.H * g.W);
                             }
                           }
                           if (gw)
                             for (std::size_t o = 0; o < g.O; ++o)
                               for (std::size_t k = 0; k < K; ++k) gw[o * K + k] += dwt[k * g.O + o];
                         });
}

/// Zero padding of the two spatial dimensions.
inline Tensor pad2d(const Tensor& x, std::size_t p) {
  detail::require_rank("pad2d", x, 4);
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Hp = H + 2 * p, Wp = W + 2 * p;
  std::vector<Real> out(B * C * Hp * Wp, Real{0});
  const auto xv = x.values();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out[(bc * Hp + y + p) * Wp + xx + p] = xv[(bc * H + y) * W + xx];
  return detail::make_op("pad2d", {B, C, Hp, Wp}, std::move(out), {x}, [B, C, H, W, p](detail::Node& s) {
    Real* g = detail::input_grad(s, 0);
    if (!g) return;
    const auto Hp = H + 2 * p, Wp = W + 2 * p;
    for (std::size_t bc = 0; bc < B * C; ++bc)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) g[(bc * H + y) * W + xx] += s.grad[(bc * Hp + y + p) * Wp + xx + p];
  });
}

/// Global average pool, [B,C,H,W] -> [B,C].
inline Tensor avgpool(const Tensor& x) {
  detail::require_rank("avgpool", x, 4);
  const auto B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xv = x.values();
  std::vector<Real> out(B * C, Real{0});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    Real acc = 0;
    for (std::size_t k = 0; k < hw; ++k) acc += xv[bc * hw + k];
    out[bc] = acc / static_cast<Real>(hw);
  }
  return detail::make_op("avgpool", {B, C}, std::move(out), {x}, [B, C, hw](detail::Node& s) {
    if (Real* g = detail::input_grad(s, 0))
      for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t k = 0; k < hw; ++k) g[bc * hw + k] += s.grad[bc] / static_cast<Real>(hw);
  });
}

// ---------------------------------------------------------------------------
// Batch-statistics normalization

enum class NormMode {
  Train,             // batch statistics, running averages updated
  TrainFrozenStats,  // batch statistics, running averages untouched (attack generation)
  Eval,              // running averages
};

struct NormBuffers {
  Tensor running_mean;
  Tensor running_var;
  Real momentum = Real(0.1);
  Real eps = Real(1e-5);
};

/// Per-channel normalization of x[B,C] or x[B,C,H,W] followed by gamma/beta.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormBuffers& buffers,
                         NormMode mode) {
  if (x.rank() != 2 && x.rank() != 4) throw ShapeError("batch_norm: expected [B,C] or [B,C,H,W]");
  const auto B = x.dim(0), C = x.dim(1);
  const auto hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : std::size_t{1};
  if (gamma.numel() != C || beta.numel() != C || buffers.running_mean.numel() != C ||
      buffers.running_var.numel() != C)
    throw ShapeError("batch_norm: parameter size mismatch for " + shape_str(x.shape()));
  const auto m = B * hw;
  if (m == 0) throw ShapeError("batch_norm: empty batch");
  const auto xv = x.values();
  const auto gv = gamma.values(), bv = beta.values();
  std::vector<Real> mu(C), invstd(C);
  const bool batch_stats = mode != NormMode::Eval;
  for (std::size_t c = 0; c < C; ++c) {
    if (batch_stats) {
      double s = 0, sq = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < hw; ++k) {
          const double v = xv[(b * C + c) * hw + k];
          s += v;
          sq += v * v;
        }
      const double mean = s / static_cast<double>(m);
      const double var = std::max(0.0, sq / static_cast<double>(m) - mean * mean);
      mu[c] = static_cast<Real>(mean);
      invstd[c] = static_cast<Real>(1.0 / std::sqrt(var + buffers.eps));
      if (mode == NormMode::Train) {
        const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
        auto rm = buffers.running_mean.mutable_values();
        auto rv = buffers.running_var.mutable_values();
        rm[c] = static_cast<Real>((1 - buffers.momentum) * rm[c] + buffers.momentum * mean);
        rv[c] = static_cast<Real>((1 - buffers.momentum) * rv[c] + buffers.momentum * unbiased);
      }
    } else {
      mu[c] = buffers.running_mean.values()[c];
      invstd[c] = Real(1) / std::sqrt(buffers.running_var.values()[c] + buffers.eps);
    }
  }
  std::vector<Real> out(xv.size());
  std::vector<Real> xhat(xv.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < hw; ++k) {
        const auto i = (b * C + c) * hw + k;
        xhat[i] = (xv[i] - mu[c]) * invstd[c];
        out[i] = gv[c] * xhat[i] + bv[c];
      }
  return detail::make_op(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [B, C, hw, m, batch_stats, invstd = std::move(invstd), xhat = std::move(xhat)](detail::Node& s) {
        const auto& gv = s.inputs[1]->value;
        Real* gx = detail::input_grad(s, 0);
        Real* gg = detail::input_grad(s, 1);
        Real* gb = detail::input_grad(s, 2);
        for (std::size_t c = 0; c < C; ++c) {
          Real sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < hw; ++k) {
              const auto i = (b * C + c) * hw + k;
              sum_dy += s.grad[i];
              sum_dy_xhat += s.grad[i] * xhat[i];
            }
          if (gg) gg[c] += sum_dy_xhat;
          if (gb) gb[c] += sum_dy;
          if (!gx) continue;
          const Real scale_c = gv[c] * invstd[c];
          const Real inv_m = Real(1) / static_cast<Real>(m);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < hw; ++k) {
              const auto i = (b * C + c) * hw + k;
              if (batch_stats)
                gx[i] += scale_c * (s.grad[i] - inv_m * sum_dy - xhat[i] * inv_m * sum_dy_xhat);
              else
                gx[i] += scale_c * s.grad[i];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Composite losses shared across modules

/// Row-wise cosine similarity of A[B,N] and B[B,N] -> [B].
inline Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("cosine_rows", a, b);
  return sum_rows(mul(normalize_rows(a), normalize_rows(b)));
}

/// Cosine similarity of two vectors (rank 1, or a single row) as a scalar.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel() || a.numel() == 0) throw ShapeError("cosine_similarity: length mismatch");
  const auto n = a.numel();
  return cosine_rows(reshape(a, {1, n}), reshape(b, {1, n}));
}

/// Mean softmax cross-entropy of logits[B,K] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  return scale(mean(gather_rows(log_softmax(logits), labels)), Real(-1));
}

// ---------------------------------------------------------------------------
// Backward pass

/// Accumulates d(loss)/d(t) into t.grad for every reachable t with requires_grad.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar");
  const auto& root = loss.node();
  if (root->backward_done) throw GraphError("backward: graph already consumed; rebuild it with a new forward");
  if (!root->requires_grad) throw GraphError("backward: loss does not depend on any differentiable tensor");

  // Iterative post-order DFS gives a topological order; reversing it visits
  // each node once, after every consumer has contributed to its gradient.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : order) n->grad_buffer();
  root->grad[0] += Real{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
  root->backward_done = true;
}

/// Largest |analytic - central difference| / max(1, |analytic|) over the
/// coordinates of x, for a scalar-valued f.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-3) {
  if (!(h > 0)) throw Error("grad_check: step must be positive");
  std::vector<Real> base(x.values().begin(), x.values().end());
  Tensor probe(x.shape(), base, true);
  Tensor y = f(probe);
  if (y.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  backward(y);
  std::vector<Real> analytic(probe.grad().begin(), probe.grad().end());

  NoGradGuard no_grad;
  double worst = 0;
  auto work = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    const Real up = static_cast<Real>(base[i] + h);
    const Real down = static_cast<Real>(base[i] - h);
    work[i] = up;
    const double fp = f(Tensor(x.shape(), work)).item();
    work[i] = down;
    const double fm = f(Tensor(x.shape(), work)).item();
    work[i] = base[i];
    const double numeric = (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
    if (!std::isfinite(numeric)) throw NumericError("grad_check: non-finite finite difference");
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl
