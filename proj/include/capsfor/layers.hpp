#pragma once

#include <cmath>
#include <string>

#include "capsfor/ops.hpp"
#include "capsfor/rng.hpp"
#include "capsfor/tape.hpp"
#include "capsfor/weights.hpp"

namespace capsfor {

/// Weights of a convolution; kernel [Co,Ci,kH,kW] (2D) or [Co,Ci,k] (1D).
template <std::floating_point T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;

  /// He-normal kernel (std sqrt(2 / fan_in)), zero bias.
  static ConvParams he_normal(Shape kernel_shape, RngStream& rng) {
    ConvParams p;
    p.weight = Tensor<T>(kernel_shape);
    p.bias = Tensor<T>(Shape{kernel_shape[0]});
    const std::size_t fan_in = p.weight.size() / kernel_shape[0];
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : p.weight.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    return p;
  }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".weight", self.weight, ParamKind::trainable);
    f(prefix + ".bias", self.bias, ParamKind::trainable);
  }
};

/// Affine batch-norm parameters plus running statistics.
template <std::floating_point T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static BatchNormParams identity(std::size_t channels) {
    return {Tensor<T>(Shape{channels}, T(1)), Tensor<T>(Shape{channels}),
            Tensor<T>(Shape{channels}), Tensor<T>(Shape{channels}, T(1))};
  }

  /// Exponential update with the batch's biased moments.
  void update_running(const BatchMoments& m, double momentum) {
    for (std::size_t c = 0; c < running_mean.size(); ++c) {
      running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * m.mean[c]);
      running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * m.var[c]);
    }
  }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".gamma", self.gamma, ParamKind::trainable);
    f(prefix + ".beta", self.beta, ParamKind::trainable);
    f(prefix + ".running_mean", self.running_mean, ParamKind::buffer);
    f(prefix + ".running_var", self.running_var, ParamKind::buffer);
  }
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Places model tensors on a tape, as parameters or as constants.
template <std::floating_point T>
class Binder {
 public:
  Binder(Tape<T>& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

  Var<T> operator()(const std::string& name, const Tensor<T>& value) const {
    return trainable_ ? tape_->parameter(name, value) : tape_->constant(value);
  }

  Tape<T>& tape() const { return *tape_; }
  bool trainable() const { return trainable_; }

 private:
  Tape<T>* tape_;
  bool trainable_;
};

}  // namespace capsfor
