#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dagnas/autograd.hpp"
#include "dagnas/rng.hpp"

namespace dagnas::testing {

using VarD = ag::Var<double>;
using TensorD = Tensor<double>;

inline TensorD random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  TensorD t(shape);
  for (auto& v : t.values()) v = scale * standard_normal(rng);
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0.0;  // worst over inputs of ||g_a - g_n|| / (||g_a|| + ||g_n||)
};

// Compares reverse-mode gradients of L = sum(f(x) * R) against central
// differences. R is a fixed random projection so every output contributes.
inline GradCheckResult grad_check(const std::function<VarD(const std::vector<VarD>&)>& f,
                                  const std::vector<TensorD>& inputs, Rng& rng, double h = 1e-6) {
  std::vector<VarD> vars;
  for (const auto& x : inputs) vars.push_back(VarD::parameter(x));
  VarD out = f(vars);
  const TensorD proj = random_tensor(out.shape(), rng);
  out.backward(proj);

  auto loss_at = [&](std::size_t which, std::size_t idx, double delta) {
    std::vector<VarD> probe;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      TensorD x = inputs[i];
      if (i == which) x[idx] += delta;
      probe.push_back(VarD::constant(std::move(x)));
    }
    const TensorD y = f(probe).value();
    double s = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) s += y[k] * proj[k];
    return s;
  };

  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const TensorD& analytic = vars[i].grad();
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double numeric = (loss_at(i, k, h) - loss_at(i, k, -h)) / (2 * h);
      diff += (analytic[k] - numeric) * (analytic[k] - numeric);
      na += analytic[k] * analytic[k];
      nn += numeric * numeric;
    }
    // Gradients that vanish identically (e.g. a bias feeding batch norm)
    // are compared absolutely; the numeric side is pure rounding noise.
    if (std::sqrt(diff) < 1e-8) continue;
    const double denom = std::max(std::sqrt(na) + std::sqrt(nn), 1e-12);
    res.max_rel_error = std::max(res.max_rel_error, std::sqrt(diff) / denom);
  }
  return res;
}

}  // namespace dagnas::testing
