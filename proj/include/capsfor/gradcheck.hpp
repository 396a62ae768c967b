#pragma once

#include <functional>

#include "capsfor/errors.hpp"
#include "capsfor/tensor.hpp"

namespace capsfor {

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every element of x.
template <std::floating_point T, class F>
Tensor<T> finite_difference_gradient(F&& f, const Tensor<T>& x, double h = 1e-4) {
  if (!(h > 0)) throw ParameterError("finite-difference step must be positive");
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = static_cast<T>(orig + h);
    const double up = static_cast<double>(f(probe));
    probe[i] = static_cast<T>(orig - h);
    const double down = static_cast<double>(f(probe));
    probe[i] = orig;
    grad[i] = static_cast<T>((up - down) / (2.0 * h));
  }
  return grad;
}

}  // namespace capsfor
