#pragma once

// Dense tensors with a reverse-mode tape. Every op result keeps a pointer to
// the node that produced it; backward() walks those links from a scalar loss.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hcbcam/common.hpp"

namespace hcbcam::ag {

using Shape = std::vector<int>;

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative extent in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class T>
struct Node;

template <class T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::shared_ptr<Node<T>> creator;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorData<T>>> inputs;
  /// Reads out.grad and accumulates into the inputs that require grad.
  std::function<void(TensorData<T>& out)> backward;
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables tape recording in the current scope (inference, gradient probes).
class NoGradGuard {
public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

template <class T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : d_(std::make_shared<TensorData<T>>()) {
    d_->value.assign(numel_of(shape), fill);
    d_->shape = std::move(shape);
    d_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size())
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor wrap(std::shared_ptr<TensorData<T>> d) {
    Tensor t;
    t.d_ = std::move(d);
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t numel() const { return d_->value.size(); }

  std::span<T> values() { return d_->value; }
  std::span<const T> values() const { return d_->value; }
  std::vector<T>& storage() { return d_->value; }
  const std::vector<T>& storage() const { return d_->value; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<const T> grad() const { return d_->grad; }
  std::vector<T>& grad_storage() { return d_->grad; }
  void zero_grad() { d_->grad.clear(); }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool r) { d_->requires_grad = r; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return d_->value[0];
  }

  const std::shared_ptr<TensorData<T>>& impl() const { return d_; }

  /// Detached deep copy of values.
  Tensor clone() const { return from(shape(), d_->value, requires_grad()); }

private:
  std::shared_ptr<TensorData<T>> d_;
};

template <class T>
void check_finite(std::span<const T> v, const char* op) {
  for (const T& x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

/// Builds an op result and, when recording, attaches its backward rule.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<std::shared_ptr<TensorData<T>>> inputs,
                      std::function<void(TensorData<T>&)> backward) {
  check_finite<T>(values, op);
  auto out = Tensor<T>::from(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const auto& d) { return d->requires_grad; });
  if (!needs) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->creator = std::move(node);
  return out;
}

/// Tensors reachable from `root` through creator links, inputs before users.
/// Throws if the links form a cycle.
template <class T>
std::vector<TensorData<T>*> topological_order(const Tensor<T>& root) {
  enum class Mark { Active, Done };
  std::unordered_map<const TensorData<T>*, Mark> mark;
  std::vector<TensorData<T>*> order;
  struct Frame {
    TensorData<T>* t;
    std::size_t next;
  };
  std::vector<Frame> stack{{root.impl().get(), 0}};
  mark[root.impl().get()] = Mark::Active;
  while (!stack.empty()) {
    auto& f = stack.back();
    const auto* node = f.t->creator.get();
    if (node && f.next < node->inputs.size()) {
      auto* in = node->inputs[f.next++].get();
      const auto it = mark.find(in);
      if (it == mark.end()) {
        mark[in] = Mark::Active;
        stack.push_back({in, 0});
      } else if (it->second == Mark::Active) {
        throw NumericError(std::string("cycle detected in autograd graph at op ") + node->op);
      }
      continue;
    }
    mark[f.t] = Mark::Done;
    order.push_back(f.t);
    stack.pop_back();
  }
  return order;
}

/// Seeds d(loss)/d(loss) = 1 and runs every backward rule once in reverse
/// topological order. Gradients accumulate into existing grad buffers.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  const auto order = topological_order(loss);
  auto& seed = loss.impl()->grad_buffer();
  seed[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorData<T>* t = *it;
    if (t->creator && !t->grad.empty()) t->creator->backward(*t);
  }
}

}  // namespace hcbcam::ag
