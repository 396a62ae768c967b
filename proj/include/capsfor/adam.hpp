#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "capsfor/errors.hpp"
#include "capsfor/tape.hpp"
#include "capsfor/tensor.hpp"
#include "capsfor/weights.hpp"

namespace capsfor {

/// Bias-corrected Adam with per-parameter moments keyed by tensor name.
template <std::floating_point T>
struct AdamState {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/**
 * One Adam update of every trainable tensor of `model`:
 *   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
 *   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
 * Tensors without a recorded gradient are treated as having zero gradient.
 */
template <std::floating_point T, class Model>
void adam_step(Model& model, const GradientRecord<T>& grads, AdamState<T>& state) {
  // Validate everything first so a bad gradient leaves the model untouched.
  for (const auto& [name, g] : grads.params) {
    if (!g.all_finite()) throw NumericalError("gradient of '" + name + "' is NaN/Inf");
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  model.visit([&](const std::string& name, Tensor<T>& theta, ParamKind kind) {
    if (kind != ParamKind::trainable) return;
    auto git = grads.params.find(name);
    const Tensor<T>* g = git == grads.params.end() ? nullptr : &git->second;
    if (g && g->shape() != theta.shape()) {
      throw DimensionError("gradient of '" + name + "' has shape " + shape_str(g->shape()) + ", parameter " +
                           shape_str(theta.shape()));
    }
    auto& m = state.m.try_emplace(name, theta.shape()).first->second;
    auto& v = state.v.try_emplace(name, theta.shape()).first->second;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = g ? static_cast<double>((*g)[k]) : 0.0;
      const double mk = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      const double vk = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double step = state.lr * (mk / c1) / (std::sqrt(vk / c2) + state.eps);
      theta[k] = static_cast<T>(theta[k] - step);
    }
  });
}

}  // namespace capsfor
