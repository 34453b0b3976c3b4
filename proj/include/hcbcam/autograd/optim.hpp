#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hcbcam/autograd/tensor.hpp"

namespace hcbcam::ag {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::vector<T> momentum_buffer;
  /// Excluded from weight decay when the optimizer is told to skip
  /// normalization parameters and biases.
  bool is_bias_or_norm = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> t, bool bias_or_norm = false)
      : name(std::move(n)), tensor(std::move(t)), momentum_buffer(tensor.numel(), T(0)), is_bias_or_norm(bias_or_norm) {
    tensor.set_requires_grad(true);
  }
};

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.005;
  bool decay_bias_and_norm = true;
};

/// Classic SGD with L2 folded into the gradient:
///   g = grad + wd * w;  buf = momentum * buf + g;  w -= lr * buf.
/// A parameter with no gradient is treated as having a zero gradient.
template <class T>
void sgd_step(std::vector<Parameter<T>*> params, const SgdOptions& opt) {
  for (auto* p : params) {
    auto& w = p->tensor.storage();
    auto& buf = p->momentum_buffer;
    const auto& grad = p->tensor.grad_storage();
    if (buf.size() != w.size()) throw ShapeError("sgd_step: momentum buffer shape mismatch for " + p->name);
    if (!grad.empty() && grad.size() != w.size()) throw ShapeError("sgd_step: gradient shape mismatch for " + p->name);
    const T wd = (p->is_bias_or_norm && !opt.decay_bias_and_norm) ? T(0) : static_cast<T>(opt.weight_decay);
    const T mom = static_cast<T>(opt.momentum), lr = static_cast<T>(opt.lr);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T g = (grad.empty() ? T(0) : grad[i]) + wd * w[i];
      buf[i] = mom * buf[i] + g;
      w[i] -= lr * buf[i];
    }
  }
}

/// lr0 * gamma^epoch, stepped once per epoch.
inline double lr_schedule(int epoch, double lr0 = 0.1, double gamma = 0.9) {
  if (epoch < 0) throw UsageError("lr_schedule: negative epoch");
  return lr0 * std::pow(gamma, epoch);
}

}  // namespace hcbcam::ag
