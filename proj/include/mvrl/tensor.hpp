#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mvrl/errors.hpp"
#include "mvrl/rng.hpp"

namespace mvrl {

using Shape = std::vector<int>;

// While alive, disables graph recording on this thread: op results carry
// values only, so forward passes through frozen networks cost no memory.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive extent in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// C[rows,cols] = A[rows,inner] * B[inner,cols]; accumulates when acc.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int rows, int inner, int cols,
             bool acc) {
  if (!acc) std::fill(c, c + static_cast<std::size_t>(rows) * cols, T(0));
  for (int i = 0; i < rows; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * inner;
    T* crow = c + static_cast<std::size_t>(i) * cols;
    for (int k = 0; k < inner; ++k) {
      const T aik = arow[k];
      const T* brow = b + static_cast<std::size_t>(k) * cols;
      for (int j = 0; j < cols; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C[rows,cols] = A[rows,inner] * B[cols,inner]^T (dot products of rows).
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int rows, int inner, int cols,
             bool acc) {
  for (int i = 0; i < rows; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * inner;
    T* crow = c + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * inner;
      T acc0 = 0;
      for (int k = 0; k < inner; ++k) acc0 += arow[k] * brow[k];
      crow[j] = acc ? crow[j] + acc0 : acc0;
    }
  }
}

// C[rows,cols] = A[inner,rows]^T * B[inner,cols].
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int rows, int inner, int cols,
             bool acc) {
  if (!acc) std::fill(c, c + static_cast<std::size_t>(rows) * cols, T(0));
  for (int k = 0; k < inner; ++k) {
    const T* arow = a + static_cast<std::size_t>(k) * rows;
    const T* brow = b + static_cast<std::size_t>(k) * cols;
    for (int i = 0; i < rows; ++i) {
      const T aki = arow[i];
      T* crow = c + static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) crow[j] += aki * brow[j];
    }
  }
}

}  // namespace detail

inline NoGradGuard::NoGradGuard() : prev_(detail::grad_mode()) {
  detail::grad_mode() = false;
}
inline NoGradGuard::~NoGradGuard() { detail::grad_mode() = prev_; }

// Dense n-dimensional array participating in reverse-mode differentiation.
// Row-major storage; cheap to copy (handle semantics over a shared node).
// Graph recording is automatic: an op output tracks gradients iff one of its
// inputs does, and non-tracking outputs carry neither parents nor a backward
// closure, so forward passes through frozen parameters cost nothing extra.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>,
                "Tensor scalar type must be float or double");

 public:
  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
      if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
  };

  Tensor() : n_(std::make_shared<Node>()) {
    n_->shape = {1};
    n_->data.assign(1, T(0));
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : n_(std::make_shared<Node>()) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match buffer of " +
                       std::to_string(data.size()) + " elements");
    n_->shape = std::move(shape);
    n_->data = std::move(data);
    n_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), T(0));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, T lo = T(0), T hi = T(1),
                             bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor rand_normal(Shape shape, Rng& rng, T mean = T(0), T stddev = T(1),
                            bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(rng.normal(mean, stddev));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::size_t numel() const { return n_->data.size(); }

  std::vector<T>& data() { return n_->data; }
  const std::vector<T>& data() const { return n_->data; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (n_->grad.empty()) throw ContractError("tensor has no gradient");
    return n_->grad;
  }

  void zero_grad() {
    if (n_->requires_grad) n_->grad.assign(n_->data.size(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor");
    return n_->data[0];
  }

  T at(const std::vector<int>& idx) const {
    return n_->data[offset_(idx)];
  }

  void set(const std::vector<int>& idx, T v) { n_->data[offset_(idx)] = v; }

  // Deep copy of values (and requires_grad flag); no graph history.
  Tensor clone() const {
    return Tensor(n_->shape, n_->data, n_->requires_grad);
  }

  // Runs reverse-mode differentiation from this scalar. Gradients accumulate
  // into every reachable tensor with requires_grad set (and interior nodes).
  void backward() const {
    if (numel() != 1)
      throw ContractError("backward() requires a scalar loss");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    topo_(n_.get(), seen, order);
    n_->ensure_grad();
    n_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward) node->backward(*node);
    }
  }

  std::shared_ptr<Node> node() const { return n_; }

  // Internal: construct an op result. parents/backward are dropped when no
  // input tracks gradients.
  static Tensor make_op(Shape shape, std::vector<T> data,
                        std::vector<std::shared_ptr<Node>> parents,
                        std::function<void(Node&)> backward) {
    bool track = detail::grad_mode();
    if (track) {
      track = false;
      for (const auto& p : parents)
        if (p->requires_grad || p->backward) track = true;
    }
    Tensor out(std::move(shape), std::move(data), false);
    if (track) {
      out.n_->parents = std::move(parents);
      out.n_->backward = std::move(backward);
    }
    return out;
  }

 private:
  std::size_t offset_(const std::vector<int>& idx) const {
    if (idx.size() != n_->shape.size())
      throw RangeError("index rank mismatch");
    std::size_t off = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= n_->shape[i])
        throw RangeError("index out of bounds");
      off = off * static_cast<std::size_t>(n_->shape[i]) +
            static_cast<std::size_t>(idx[i]);
    }
    return off;
  }

  static void topo_(Node* root, std::unordered_set<Node*>& seen,
                    std::vector<Node*>& order) {
    // Iterative DFS; graphs are shallow but wide.
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> n_;
};

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void accumulate(typename Tensor<T>::Node& dst, const std::vector<T>& src) {
  dst.ensure_grad();
  T* g = dst.grad.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < src.size(); ++i) g[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an, bn},
      [an, bn](typename Tensor<T>::Node& self) {
        detail::accumulate<T>(*an, self.grad);
        detail::accumulate<T>(*bn, self.grad);
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an, bn},
      [an, bn](typename Tensor<T>::Node& self) {
        detail::accumulate<T>(*an, self.grad);
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i] -= self.grad[i];
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an, bn},
      [an, bn](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          an->grad[i] += self.grad[i] * bn->data[i];
          bn->grad[i] += self.grad[i] * an->data[i];
        }
      });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  auto an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an},
      [an, s](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * s;
      });
}

template <typename T>
Tensor<T> scalar_add(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
  auto an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an},
      [an](typename Tensor<T>::Node& self) {
        detail::accumulate<T>(*an, self.grad);
      });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) { return scalar_mul(a, T(-1)); }

// Elementwise minimum of two same-shape arrays; ties split the gradient.
template <typename T>
Tensor<T> min2(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "min2");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(a.data()[i], b.data()[i]);
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an, bn},
      [an, bn](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T av = an->data[i], bv = bn->data[i];
          if (av < bv) an->grad[i] += self.grad[i];
          else if (bv < av) bn->grad[i] += self.grad[i];
          else {
            an->grad[i] += self.grad[i] * T(0.5);
            bn->grad[i] += self.grad[i] * T(0.5);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  auto an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an},
      [an](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (an->data[i] > T(0)) an->grad[i] += self.grad[i];
      });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  auto an = a.node();
  auto y = std::make_shared<std::vector<T>>(out);
  return Tensor<T>::make_op(a.shape(), std::move(out), {an},
      [an, y](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * (T(1) - (*y)[i] * (*y)[i]);
      });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  auto an = a.node();
  auto y = std::make_shared<std::vector<T>>(out);
  return Tensor<T>::make_op(a.shape(), std::move(out), {an},
      [an, y](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * (*y)[i];
      });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
  auto an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an},
      [an](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] / an->data[i];
      });
}

// log(1 + exp(x)) computed without overflow.
template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  auto an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an},
      [an](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T x = an->data[i];
          const T sig = x > T(0) ? T(1) / (T(1) + std::exp(-x))
                                 : std::exp(x) / (T(1) + std::exp(x));
          an->grad[i] += self.grad[i] * sig;
        }
      });
}

// Values clipped to [lo, hi]; gradient passes inside the closed interval.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::clamp(a.data()[i], lo, hi);
  auto an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an},
      [an, lo, hi](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T x = an->data[i];
          if (x >= lo && x <= hi) an->grad[i] += self.grad[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions, shape ops

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = std::accumulate(a.data().begin(), a.data().end(), T(0));
  auto an = a.node();
  return Tensor<T>::make_op({1}, {total}, {an},
      [an](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        const T g = self.grad[0];
        for (auto& v : an->grad) v += g;
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  T total = std::accumulate(a.data().begin(), a.data().end(), T(0)) * inv;
  auto an = a.node();
  return Tensor<T>::make_op({1}, {total}, {an},
      [an, inv](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        const T g = self.grad[0] * inv;
        for (auto& v : an->grad) v += g;
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) +
                     " -> " + shape_str(shape));
  auto an = a.node();
  return Tensor<T>::make_op(std::move(shape), a.data(), {an},
      [an](typename Tensor<T>::Node& self) {
        detail::accumulate<T>(*an, self.grad);
      });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  return reshape(a, {static_cast<int>(a.numel())});
}

// Breaks gradient flow: result shares values but records no history.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>(a.shape(), a.data(), false);
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  if (a.rank() != b.rank()) throw ShapeError("concat: rank mismatch");
  if (axis < 0 || axis >= a.rank()) throw RangeError("concat: bad axis");
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw ShapeError("concat: shape mismatch off axis");
  Shape out_shape = a.shape();
  out_shape[axis] += b.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.dim(i));
  for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<std::size_t>(a.dim(i));
  const std::size_t ablk = static_cast<std::size_t>(a.dim(axis)) * inner;
  const std::size_t bblk = static_cast<std::size_t>(b.dim(axis)) * inner;
  std::vector<T> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + o * ablk, ablk, out.data() + o * (ablk + bblk));
    std::copy_n(b.data().data() + o * bblk, bblk,
                out.data() + o * (ablk + bblk) + ablk);
  }
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), {an, bn},
      [an, bn, outer, ablk, bblk](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        bn->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* g = self.grad.data() + o * (ablk + bblk);
          T* ga = an->grad.data() + o * ablk;
          T* gb = bn->grad.data() + o * bblk;
          for (std::size_t i = 0; i < ablk; ++i) ga[i] += g[i];
          for (std::size_t i = 0; i < bblk; ++i) gb[i] += g[ablk + i];
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 operands");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_op({m, n}, std::move(out), {an, bn},
      [an, bn, m, k, n](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        bn->ensure_grad();
        // dA = dC * B^T, dB = A^T * dC
        detail::gemm_nt(self.grad.data(), bn->data.data(), an->grad.data(),
                        m, n, k, true);
        detail::gemm_tn(an->data.data(), self.grad.data(), bn->grad.data(),
                        k, m, n, true);
      });
}

// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw ShapeError("bmm: expects rank-3 operands");
  const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bs || b.dim(1) != k)
    throw ShapeError("bmm: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(bs) * m * n);
  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(k) * n;
  const std::size_t sc = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < bs; ++i)
    detail::gemm_nn(a.data().data() + i * sa, b.data().data() + i * sb,
                    out.data() + i * sc, m, k, n, false);
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_op({bs, m, n}, std::move(out), {an, bn},
      [an, bn, bs, m, k, n, sa, sb, sc](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        bn->ensure_grad();
        for (int i = 0; i < bs; ++i) {
          detail::gemm_nt(self.grad.data() + i * sc, bn->data.data() + i * sb,
                          an->grad.data() + i * sa, m, n, k, true);
          detail::gemm_tn(an->data.data() + i * sa, self.grad.data() + i * sc,
                          bn->grad.data() + i * sb, k, m, n, true);
        }
      });
}

// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() != 2 && a.rank() != 3)
    throw ShapeError("transpose_last2: expects rank 2 or 3");
  const int bs = a.rank() == 3 ? a.dim(0) : 1;
  const int m = a.dim(a.rank() - 2), n = a.dim(a.rank() - 1);
  Shape out_shape = a.shape();
  std::swap(out_shape[a.rank() - 2], out_shape[a.rank() - 1]);
  std::vector<T> out(a.numel());
  const std::size_t s = static_cast<std::size_t>(m) * n;
  for (int b = 0; b < bs; ++b) {
    const T* src = a.data().data() + b * s;
    T* dst = out.data() + b * s;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) dst[static_cast<std::size_t>(j) * m + i] =
          src[static_cast<std::size_t>(i) * n + j];
  }
  auto an = a.node();
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), {an},
      [an, bs, m, n, s](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (int b = 0; b < bs; ++b) {
          const T* g = self.grad.data() + b * s;   // [n, m]
          T* ga = an->grad.data() + b * s;         // [m, n]
          for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
              ga[static_cast<std::size_t>(i) * n + j] +=
                  g[static_cast<std::size_t>(j) * m + i];
        }
      });
}

// Affine map y = x W^T + b for x:[N,K], W:[O,K], b:[O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw ShapeError("linear: x must be [N,K], w [O,K], b [O]");
  const int n = x.dim(0), k = x.dim(1), o = w.dim(0);
  if (w.dim(1) != k || b.dim(0) != o)
    throw ShapeError("linear: shape mismatch x" + shape_str(x.shape()) + " w" +
                     shape_str(w.shape()) + " b" + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(n) * o);
  detail::gemm_nt(x.data().data(), w.data().data(), out.data(), n, k, o, false);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < o; ++j) out[static_cast<std::size_t>(i) * o + j] += b.data()[j];
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return Tensor<T>::make_op({n, o}, std::move(out), {xn, wn, bn},
      [xn, wn, bn, n, k, o](typename Tensor<T>::Node& self) {
        xn->ensure_grad();
        wn->ensure_grad();
        bn->ensure_grad();
        detail::gemm_nn(self.grad.data(), wn->data.data(), xn->grad.data(),
                        n, o, k, true);
        detail::gemm_tn(self.grad.data(), xn->data.data(), wn->grad.data(),
                        o, n, k, true);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < o; ++j)
            bn->grad[j] += self.grad[static_cast<std::size_t>(i) * o + j];
      });
}

// ---------------------------------------------------------------------------
// Softmax

// Numerically stable softmax along one axis (max subtraction).
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  if (axis < 0 || axis >= a.rank()) throw RangeError("softmax: bad axis");
  const int n = a.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.dim(i));
  for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<std::size_t>(a.dim(i));
  std::vector<T> out(a.numel());
  const T* src = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = src[base];
      for (int i = 1; i < n; ++i) mx = std::max(mx, src[base + i * inner]);
      T z = 0;
      for (int i = 0; i < n; ++i) {
        const T e = std::exp(src[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      const T invz = T(1) / z;
      for (int i = 0; i < n; ++i) out[base + i * inner] *= invz;
    }
  }
  auto an = a.node();
  auto y = std::make_shared<std::vector<T>>(out);
  return Tensor<T>::make_op(a.shape(), std::move(out), {an},
      [an, y, n, outer, inner](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T dot = 0;
            for (int i = 0; i < n; ++i)
              dot += self.grad[base + i * inner] * (*y)[base + i * inner];
            for (int i = 0; i < n; ++i) {
              const std::size_t k = base + i * inner;
              an->grad[k] += (*y)[k] * (self.grad[k] - dot);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions and layer norm

namespace detail {

struct ConvGeom {
  int n, c, h, w;      // input
  int f, k;            // filters, kernel
  int stride, pad;
  int ho, wo;          // output spatial
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, int stride,
                       int pad) {
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError("conv2d: input must be [C,H,W] or [N,C,H,W]");
  if (w.rank() != 4) throw ShapeError("conv2d: weights must be [F,C,k,k]");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (pad < 0) throw ContractError("conv2d: padding must be >= 0");
  ConvGeom g;
  const bool batched = x.rank() == 4;
  g.n = batched ? x.dim(0) : 1;
  g.c = x.dim(batched ? 1 : 0);
  g.h = x.dim(batched ? 2 : 1);
  g.w = x.dim(batched ? 3 : 2);
  g.f = w.dim(0);
  g.k = w.dim(2);
  if (w.dim(3) != g.k) throw ShapeError("conv2d: kernel must be square");
  if (w.dim(1) != g.c)
    throw ShapeError("conv2d: weight channels " + std::to_string(w.dim(1)) +
                     " do not match input channels " + std::to_string(g.c));
  if (g.k > g.h + 2 * pad || g.k > g.w + 2 * pad)
    throw ShapeError("conv2d: kernel larger than padded input");
  g.stride = stride;
  g.pad = pad;
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  return g;
}

// Gathers one sample's receptive fields into col [C*k*k, Ho*Wo]; zero padding.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const int p = g.ho * g.wo;
  for (int c = 0; c < g.c; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ki * g.k + kj) * p;
        for (int ho = 0; ho < g.ho; ++ho) {
          const int y = ho * g.stride + ki - g.pad;
          T* dst = row + static_cast<std::size_t>(ho) * g.wo;
          if (y < 0 || y >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(y) * g.w;
          for (int wo = 0; wo < g.wo; ++wo) {
            const int xcol = wo * g.stride + kj - g.pad;
            dst[wo] = (xcol >= 0 && xcol < g.w) ? xr[xcol] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-adds col gradients back to one sample's input gradient.
template <typename T>
void col2im_acc(const T* col, const ConvGeom& g, T* dx) {
  const int p = g.ho * g.wo;
  for (int c = 0; c < g.c; ++c) {
    T* xc = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row =
            col + (static_cast<std::size_t>(c) * g.k * g.k + ki * g.k + kj) * p;
        for (int ho = 0; ho < g.ho; ++ho) {
          const int y = ho * g.stride + ki - g.pad;
          if (y < 0 || y >= g.h) continue;
          T* xr = xc + static_cast<std::size_t>(y) * g.w;
          const T* src = row + static_cast<std::size_t>(ho) * g.wo;
          for (int wo = 0; wo < g.wo; ++wo) {
            const int xcol = wo * g.stride + kj - g.pad;
            if (xcol >= 0 && xcol < g.w) xr[xcol] += src[wo];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2D convolution with zero padding. x: [C,H,W] or [N,C,H,W]; w: [F,C,k,k];
// b: [F]. Output spatial extent floor((H + 2 pad - k)/stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int pad = 0) {
  const auto g = detail::conv_geometry(x, w, stride, pad);
  if (b.rank() != 1 || b.dim(0) != g.f)
    throw ShapeError("conv2d: bias must be [F]");
  const bool batched = x.rank() == 4;
  const int p = g.ho * g.wo;
  const int ckk = g.c * g.k * g.k;
  const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(g.f) * p;
  const std::size_t col_stride = static_cast<std::size_t>(ckk) * p;
  auto xn = x.node(), wn = w.node(), bn = b.node();
  const bool track =
      detail::grad_mode() &&
      (xn->requires_grad || xn->backward || wn->requires_grad || wn->backward ||
       bn->requires_grad || bn->backward);
  // The gathered columns are kept alive for the backward pass (when one will
  // happen) so they are built exactly once.
  auto cols = std::make_shared<std::vector<T>>(
      (track ? static_cast<std::size_t>(g.n) : 1) * col_stride);
  std::vector<T> out(static_cast<std::size_t>(g.n) * out_stride);
  for (int i = 0; i < g.n; ++i) {
    T* col = cols->data() + (track ? i * col_stride : 0);
    detail::im2col(x.data().data() + i * in_stride, g, col);
    T* o = out.data() + i * out_stride;
    detail::gemm_nn(w.data().data(), col, o, g.f, ckk, p, false);
    for (int f = 0; f < g.f; ++f) {
      const T bias = b.data()[f];
      T* orow = o + static_cast<std::size_t>(f) * p;
      for (int j = 0; j < p; ++j) orow[j] += bias;
    }
  }
  Shape out_shape = batched ? Shape{g.n, g.f, g.ho, g.wo} : Shape{g.f, g.ho, g.wo};
  if (!track) return Tensor<T>(std::move(out_shape), std::move(out));
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), {xn, wn, bn},
      [xn, wn, bn, g, p, ckk, in_stride, out_stride, col_stride, cols](
          typename Tensor<T>::Node& self) {
        xn->ensure_grad();
        wn->ensure_grad();
        bn->ensure_grad();
        std::vector<T> dcol(col_stride);
        for (int i = 0; i < g.n; ++i) {
          const T* dout = self.grad.data() + i * out_stride;
          detail::gemm_nt(dout, cols->data() + i * col_stride, wn->grad.data(),
                          g.f, p, ckk, true);
          detail::gemm_tn(wn->data.data(), dout, dcol.data(), ckk, g.f, p, false);
          detail::col2im_acc(dcol.data(), g, xn->grad.data() + i * in_stride);
          for (int f = 0; f < g.f; ++f) {
            const T* drow = dout + static_cast<std::size_t>(f) * p;
            T acc = 0;
            for (int j = 0; j < p; ++j) acc += drow[j];
            bn->grad[f] += acc;
          }
        }
      });
}

// Position-wise affine map over channels: w: [C_out, C_in], b: [C_out],
// x: [C,H,W] or [N,C,H,W]. Equivalent to conv2d with a 1x1 kernel.
template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError("conv1x1: input must be [C,H,W] or [N,C,H,W]");
  if (w.rank() != 2 || b.rank() != 1)
    throw ShapeError("conv1x1: weights must be [C_out,C_in], bias [C_out]");
  const bool batched = x.rank() == 4;
  const int n = batched ? x.dim(0) : 1;
  const int c = x.dim(batched ? 1 : 0);
  const int h = x.dim(batched ? 2 : 1);
  const int ww = x.dim(batched ? 3 : 2);
  const int co = w.dim(0);
  if (w.dim(1) != c)
    throw ShapeError("conv1x1: weight inner dim " + std::to_string(w.dim(1)) +
                     " does not match input channels " + std::to_string(c));
  if (b.dim(0) != co) throw ShapeError("conv1x1: bias size mismatch");
  const int p = h * ww;
  const std::size_t in_stride = static_cast<std::size_t>(c) * p;
  const std::size_t out_stride = static_cast<std::size_t>(co) * p;
  std::vector<T> out(static_cast<std::size_t>(n) * out_stride);
  for (int i = 0; i < n; ++i) {
    T* o = out.data() + i * out_stride;
    detail::gemm_nn(w.data().data(), x.data().data() + i * in_stride, o, co, c,
                    p, false);
    for (int f = 0; f < co; ++f) {
      const T bias = b.data()[f];
      T* orow = o + static_cast<std::size_t>(f) * p;
      for (int j = 0; j < p; ++j) orow[j] += bias;
    }
  }
  Shape out_shape = batched ? Shape{n, co, h, ww} : Shape{co, h, ww};
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), {xn, wn, bn},
      [xn, wn, bn, n, c, co, p, in_stride, out_stride](
          typename Tensor<T>::Node& self) {
        xn->ensure_grad();
        wn->ensure_grad();
        bn->ensure_grad();
        for (int i = 0; i < n; ++i) {
          const T* dout = self.grad.data() + i * out_stride;
          detail::gemm_nt(dout, xn->data.data() + i * in_stride,
                          wn->grad.data(), co, p, c, true);
          detail::gemm_tn(wn->data.data(), dout,
                          xn->grad.data() + i * in_stride, c, co, p, true);
          for (int f = 0; f < co; ++f) {
            const T* drow = dout + static_cast<std::size_t>(f) * p;
            T acc = 0;
            for (int j = 0; j < p; ++j) acc += drow[j];
            bn->grad[f] += acc;
          }
        }
      });
}

// LayerNorm over the channel axis, independently at every spatial position
// (and batch element). gain/bias: [C]. Biased variance, eps inside the sqrt.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError("layer_norm: input must be [C,H,W] or [N,C,H,W]");
  if (eps <= T(0)) throw ContractError("layer_norm: eps must be positive");
  const bool batched = x.rank() == 4;
  const int n = batched ? x.dim(0) : 1;
  const int c = x.dim(batched ? 1 : 0);
  const int p = x.dim(batched ? 2 : 1) * x.dim(batched ? 3 : 2);
  if (gain.rank() != 1 || gain.dim(0) != c || bias.rank() != 1 || bias.dim(0) != c)
    throw ShapeError("layer_norm: gain/bias must be [C]");
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * p);
  const T* src = x.data().data();
  const T invc = T(1) / static_cast<T>(c);
  for (int i = 0; i < n; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * c * p;
    for (int j = 0; j < p; ++j) {
      T mu = 0;
      for (int ch = 0; ch < c; ++ch) mu += src[base + static_cast<std::size_t>(ch) * p + j];
      mu *= invc;
      T var = 0;
      for (int ch = 0; ch < c; ++ch) {
        const T d = src[base + static_cast<std::size_t>(ch) * p + j] - mu;
        var += d * d;
      }
      var *= invc;
      const T istd = T(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(i) * p + j] = istd;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t k = base + static_cast<std::size_t>(ch) * p + j;
        const T xh = (src[k] - mu) * istd;
        (*xhat)[k] = xh;
        out[k] = xh * gain.data()[ch] + bias.data()[ch];
      }
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return Tensor<T>::make_op(x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, xhat, inv_std, n, c, p](typename Tensor<T>::Node& self) {
        xn->ensure_grad();
        gn->ensure_grad();
        bn->ensure_grad();
        const T invc = T(1) / static_cast<T>(c);
        for (int i = 0; i < n; ++i) {
          const std::size_t base = static_cast<std::size_t>(i) * c * p;
          for (int j = 0; j < p; ++j) {
            T s1 = 0, s2 = 0;
            for (int ch = 0; ch < c; ++ch) {
              const std::size_t k = base + static_cast<std::size_t>(ch) * p + j;
              const T dg = self.grad[k] * gn->data[ch];
              s1 += dg;
              s2 += dg * (*xhat)[k];
              gn->grad[ch] += self.grad[k] * (*xhat)[k];
              bn->grad[ch] += self.grad[k];
            }
            const T istd = (*inv_std)[static_cast<std::size_t>(i) * p + j];
            for (int ch = 0; ch < c; ++ch) {
              const std::size_t k = base + static_cast<std::size_t>(ch) * p + j;
              const T dg = self.grad[k] * gn->data[ch];
              xn->grad[k] += (dg - s1 * invc - (*xhat)[k] * s2 * invc) * istd;
            }
          }
        }
      });
}

}  // namespace mvrl
