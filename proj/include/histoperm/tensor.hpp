#pragma once

// Dense row-major tensors with reverse-mode gradients.
//
// A BasicTensor is a shared handle onto a graph node, so copying a tensor
// aliases it (use clone() for a deep copy). Ops record their inputs and a
// backward closure only when at least one input requires a gradient.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "histoperm/errors.hpp"

namespace histoperm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Tensor storage. Eigen picks its vectorized loop split from the runtime
/// address of each operand, so storage with varying alignment would change
/// the floating-point summation order between otherwise identical runs.
/// Aligning every buffer to Eigen's packet size pins that order.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct TensorNode {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into inputs[k]->grad.
  std::function<void(TensorNode&)> backward;
};

template <class T>
class BasicTensor {
 public:
  using Scalar = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;

  BasicTensor(Shape shape, Buffer<T> values, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_string(shape) + " holds " + std::to_string(shape_size(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  /// Copies from a vector with any other allocator.
  template <class Alloc>
  BasicTensor(Shape shape, const std::vector<T, Alloc>& values, bool requires_grad = false)
      : BasicTensor(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return BasicTensor(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
  }

  static BasicTensor scalar(T v, bool requires_grad = false) { return BasicTensor({1}, Buffer<T>{v}, requires_grad); }

  static BasicTensor from_node(std::shared_ptr<Node> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return ndim() > 1 ? node_->shape[1] : 1; }

  std::span<const T> values() const { return node_->value; }
  /// Mutable access for optimizers and initializers. Do not mutate values
  /// that an unfinished graph still needs for its backward pass.
  std::span<T> mutable_values() { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    ensure_grad(*node_);
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  /// Deep copy without graph history.
  BasicTensor clone(bool requires_grad) const { return BasicTensor(shape(), node_->value, requires_grad); }
  BasicTensor clone() const { return clone(requires_grad()); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  static void ensure_grad(Node& n) {
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
  }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const RowMatrix<T>> as_matrix(std::span<const T> v, std::size_t rows, std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <class T>
Eigen::Map<RowMatrix<T>> as_matrix(std::span<T> v, std::size_t rows, std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <class T>
Eigen::Map<const RowMatrix<T>> as_matrix(const BasicTensor<T>& t) {
  return as_matrix<T>(t.values(), t.rows(), t.cols());
}

/// Builds an op output. `backward` is stored only when some input requires a
/// gradient; it receives the output node and must accumulate into the inputs
/// that require one.
template <class T, class Fn>
BasicTensor<T> make_op(Shape shape, Buffer<T> value, std::vector<BasicTensor<T>> inputs, Fn&& backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::forward<Fn>(backward);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

namespace detail {

template <class T>
bool wants(const TensorNode<T>& self, std::size_t k) {
  return self.inputs[k]->requires_grad;
}

template <class T>
Buffer<T>& grad_of(TensorNode<T>& self, std::size_t k) {
  auto& in = *self.inputs[k];
  BasicTensor<T>::ensure_grad(in);
  return in.grad;
}

template <class T>
void require_matrix(const BasicTensor<T>& t, const char* op) {
  if (t.ndim() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

}  // namespace detail

/// Reverse-mode pass from a scalar. Gradients accumulate into every reachable
/// tensor that requires one; intermediate buffers are reset first.
template <class T>
void backward(const BasicTensor<T>& loss) {
  if (loss.size() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (node->backward) {
      node->grad.assign(node->value.size(), T(0));
    } else {
      BasicTensor<T>::ensure_grad(*node);
    }
  }
  loss.node().grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

/// Gradients of `loss` with respect to `params`, in order. Parameter grad
/// buffers are zeroed first; parameters the loss does not reach get zeros.
template <class T>
std::vector<std::vector<T>> gradients(const BasicTensor<T>& loss, std::span<const BasicTensor<T>> params) {
  for (auto p : params) p.zero_grad();
  backward(loss);
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.grad().begin(), p.grad().end());
  return out;
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(self, k)) continue;
      auto& g = detail::grad_of(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Elementwise product.
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (detail::wants(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return make_op<T>(a.shape(), std::move(out), {a}, [factor](TensorNode<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total = 0;
  for (auto v : a.values()) total += v;
  return make_op<T>({1}, {total}, {a}, [](TensorNode<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (auto& gi : g) gi += self.grad[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  if (a.size() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Matrix product of [N x K] and [K x M].
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t n = a.rows(), m = b.cols();
  Buffer<T> out(n * m);
  as_matrix<T>(std::span<T>(out), n, m).noalias() = as_matrix(a) * as_matrix(b);
  return make_op<T>({n, m}, std::move(out), {a, b}, [n, m](TensorNode<T>& self) {
    const auto& an = *self.inputs[0];
    const auto& bn = *self.inputs[1];
    const std::size_t k = an.shape[1];
    auto gy = as_matrix<T>(std::span<const T>(self.grad), n, m);
    if (detail::wants(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      as_matrix<T>(std::span<T>(g), n, k).noalias() += gy * as_matrix<T>(std::span<const T>(bn.value), k, m).transpose();
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      as_matrix<T>(std::span<T>(g), k, m).noalias() += as_matrix<T>(std::span<const T>(an.value), n, k).transpose() * gy;
    }
  });
}

/// Affine map y = xW + b applied row-wise.
template <class T>
BasicTensor<T> linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  detail::require_matrix(x, "linear_forward");
  detail::require_matrix(w, "linear_forward");
  if (x.cols() != w.rows() || b.size() != w.cols()) {
    throw DimensionError("linear_forward: x " + shape_string(x.shape()) + ", W " + shape_string(w.shape()) + ", b " +
                         shape_string(b.shape()));
  }
  const std::size_t n = x.rows(), din = w.rows(), dout = w.cols();
  Buffer<T> out(n * dout);
  auto y = as_matrix<T>(std::span<T>(out), n, dout);
  y.noalias() = as_matrix(x) * as_matrix(w);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.values().data(), static_cast<Eigen::Index>(dout));
  return make_op<T>({n, dout}, std::move(out), {x, w, b}, [n, din, dout](TensorNode<T>& self) {
    auto gy = as_matrix<T>(std::span<const T>(self.grad), n, dout);
    if (detail::wants(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      as_matrix<T>(std::span<T>(g), n, din).noalias() +=
          gy * as_matrix<T>(std::span<const T>(self.inputs[1]->value), din, dout).transpose();
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      as_matrix<T>(std::span<T>(g), din, dout).noalias() +=
          as_matrix<T>(std::span<const T>(self.inputs[0]->value), n, din).transpose() * gy;
    }
    if (detail::wants(self, 2)) {
      auto& g = detail::grad_of(self, 2);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(g.data(), static_cast<Eigen::Index>(dout)) += gy.colwise().sum();
    }
  });
}

/// max(0, x); the subgradient at 0 is 0.
template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return make_op<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

/// Divides each row by max(||row||, eps).
template <class T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, T eps = T(1e-12)) {
  detail::require_matrix(x, "l2_normalize");
  if (!(eps > T(0))) throw ContractError("l2_normalize: eps must be positive");
  const std::size_t n = x.rows(), d = x.cols();
  Buffer<T> out(x.size());
  std::vector<T> denom(n);
  for (std::size_t r = 0; r < n; ++r) {
    T ss = 0;
    for (std::size_t c = 0; c < d; ++c) ss += x[r * d + c] * x[r * d + c];
    denom[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x[r * d + c] / denom[r];
  }
  return make_op<T>(x.shape(), std::move(out), {x}, [n, d, eps, denom](TensorNode<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t r = 0; r < n; ++r) {
      const T* gy = &self.grad[r * d];
      const T* y = &self.value[r * d];
      if (denom[r] > eps) {
        // d(x/|x|) = (g - y <y, g>) / |x|
        T dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += y[c] * gy[c];
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += (gy[c] - y[c] * dot) / denom[r];
      } else {
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += gy[c] / eps;
      }
    }
  });
}

/// Identity forward; nothing flows back through it.
template <class T>
BasicTensor<T> stop_gradient(const BasicTensor<T>& x) {
  return BasicTensor<T>(x.shape(), Buffer<T>(x.values().begin(), x.values().end()), false);
}

/// Stacks two matrices with equal column counts; either may have zero rows.
template <class T>
BasicTensor<T> concat_rows(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: column mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Buffer<T> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t na = a.size();
  return make_op<T>({a.rows() + b.rows(), a.cols()}, std::move(out), {a, b}, [na](TensorNode<T>& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

/// Rows [begin, end) of a matrix.
template <class T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_rows");
  if (begin > end || end > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of " +
                         shape_string(x.shape()));
  }
  const std::size_t d = x.cols();
  Buffer<T> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * d),
                     x.values().begin() + static_cast<std::ptrdiff_t>(end * d));
  return make_op<T>({end - begin, d}, std::move(out), {x}, [begin, d](TensorNode<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * d + i] += self.grad[i];
  });
}

}  // namespace histoperm
