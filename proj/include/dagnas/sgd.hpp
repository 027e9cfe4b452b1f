#pragma once

#include <stdexcept>

#include "dagnas/tensor.hpp"

namespace dagnas {

struct SgdConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 1e-4;
};

// One mini-batch SGD update of a single parameter tensor:
//   g <- g + lambda * w        (only when decay applies to this parameter)
//   v <- mu * v + g
//   w <- w - eta * (mu * v + g)   (nesterov)   or   w <- w - eta * v
template <typename T>
void sgd_step(Tensor<T>& weights, const Tensor<T>& grads, Tensor<T>& velocity, const SgdConfig& cfg,
              bool apply_weight_decay) {
  if (weights.shape() != grads.shape() || weights.shape() != velocity.shape()) {
    throw std::invalid_argument("sgd_step: parameter, gradient and velocity shapes differ");
  }
  const T lr = static_cast<T>(cfg.learning_rate);
  const T mu = static_cast<T>(cfg.momentum);
  const T wd = apply_weight_decay ? static_cast<T>(cfg.weight_decay) : T(0);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const T g = grads[i] + wd * weights[i];
    velocity[i] = mu * velocity[i] + g;
    weights[i] -= cfg.nesterov ? lr * (mu * velocity[i] + g) : lr * velocity[i];
  }
}

}  // namespace dagnas
