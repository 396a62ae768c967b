#pragma once

// Capsule network with statistical pooling and regularised dynamic routing.
//
// Each primary capsule turns a [256,H,W] feature map into a 4-vector u:
//   conv3x3 256->64, BN, relu; conv3x3 64->16, BN, relu
//   statistical pooling -> [2,16] (mean row, variance row)
//   conv1d 2->8 (k5, s2), BN, relu -> [8,6]; conv1d 8->1 (k3, s1), BN -> [1,4]
// Output capsules v(j) are 4-vectors reached through 4x4 routing matrices.
// Tensor names: capsI.<layer>.<field> and routing.W.I.J (0-based).

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "capsfor/layers.hpp"
#include "capsfor/ops.hpp"
#include "capsfor/rng.hpp"
#include "capsfor/tape.hpp"
#include "capsfor/vgg.hpp"

namespace capsfor {

inline constexpr std::size_t kCapsuleDim = 4;  // primary capsule output u
inline constexpr std::size_t kOutputDim = 4;   // output capsule v
inline constexpr std::size_t kTrunkChannels1 = 64;
inline constexpr std::size_t kTrunkChannels2 = 16;
inline constexpr std::size_t kPooledChannels1d = 8;

struct RoutingConfig {
  int iterations = 2;
  double noise_sigma = 0.1;  // standard deviation of the additive noise on W
  double dropout_p = 0.05;

  void validate() const {
    if (iterations < 1) throw ParameterError("routing iterations must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ParameterError("routing dropout must satisfy 0 <= p < 1");
    if (!(noise_sigma >= 0.0)) throw ParameterError("routing noise sigma must be >= 0");
  }

  friend bool operator==(const RoutingConfig&, const RoutingConfig&) = default;
};

struct CapsuleConfig {
  std::size_t capsules = 3;  // 3 = light, 10 = full
  std::size_t classes = 2;
  std::size_t in_channels = kVggOutChannels;

  void validate() const {
    if (capsules < 1) throw ParameterError("need at least one primary capsule");
    if (classes < 2) throw ParameterError("need at least two output capsules");
  }

  friend bool operator==(const CapsuleConfig&, const CapsuleConfig&) = default;
};

template <std::floating_point T>
struct PrimaryCapsule {
  ConvParams<T> conv1, conv2, conv3, conv4;
  BatchNormParams<T> bn1, bn2, bn3, bn4;

  static PrimaryCapsule init(std::size_t in_channels, RngStream& rng) {
    PrimaryCapsule c;
    c.conv1 = ConvParams<T>::he_normal(Shape{kTrunkChannels1, in_channels, 3, 3}, rng);
    c.bn1 = BatchNormParams<T>::identity(kTrunkChannels1);
    c.conv2 = ConvParams<T>::he_normal(Shape{kTrunkChannels2, kTrunkChannels1, 3, 3}, rng);
    c.bn2 = BatchNormParams<T>::identity(kTrunkChannels2);
    c.conv3 = ConvParams<T>::he_normal(Shape{kPooledChannels1d, 2, 5}, rng);
    c.bn3 = BatchNormParams<T>::identity(kPooledChannels1d);
    c.conv4 = ConvParams<T>::he_normal(Shape{1, kPooledChannels1d, 3}, rng);
    c.bn4 = BatchNormParams<T>::identity(1);
    return c;
  }

  BatchNormParams<T>& norm(std::size_t k) { return *std::array{&bn1, &bn2, &bn3, &bn4}[k]; }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F& f) {
    ConvParams<T>::visit_impl(self.conv1, prefix + ".conv1", f);
    BatchNormParams<T>::visit_impl(self.bn1, prefix + ".bn1", f);
    ConvParams<T>::visit_impl(self.conv2, prefix + ".conv2", f);
    BatchNormParams<T>::visit_impl(self.bn2, prefix + ".bn2", f);
    ConvParams<T>::visit_impl(self.conv3, prefix + ".conv3", f);
    BatchNormParams<T>::visit_impl(self.bn3, prefix + ".bn3", f);
    ConvParams<T>::visit_impl(self.conv4, prefix + ".conv4", f);
    BatchNormParams<T>::visit_impl(self.bn4, prefix + ".bn4", f);
  }
};

template <std::floating_point T>
struct CapsuleNetwork {
  CapsuleConfig config;
  std::vector<PrimaryCapsule<T>> primary;
  std::vector<Tensor<T>> routing;  // [M,D] matrix for pair (i,j) at i*J + j

  static std::string capsule_name(std::size_t i) { return "caps" + std::to_string(i); }
  static std::string routing_name(std::size_t i, std::size_t j) {
    return "routing.W." + std::to_string(i) + "." + std::to_string(j);
  }

  /// He-normal trunks; routing matrices drawn from N(0, 0.01).
  static CapsuleNetwork init(const CapsuleConfig& config, RngStream& rng) {
    config.validate();
    CapsuleNetwork net;
    net.config = config;
    for (std::size_t i = 0; i < config.capsules; ++i) {
      net.primary.push_back(PrimaryCapsule<T>::init(config.in_channels, rng));
    }
    for (std::size_t k = 0; k < config.capsules * config.classes; ++k) {
      Tensor<T> w(Shape{kOutputDim, kCapsuleDim});
      for (auto& v : w.data()) v = static_cast<T>(rng.normal(0.0, 0.1));
      net.routing.push_back(std::move(w));
    }
    return net;
  }

  const Tensor<T>& routing_matrix(std::size_t i, std::size_t j) const { return routing.at(i * config.classes + j); }

  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }

  /// Applies train-mode batch statistics gathered by forward().
  void update_running_stats(const std::vector<BatchMoments>& moments, double momentum = kBatchNormMomentum) {
    if (moments.size() != primary.size() * 4) throw ParameterError("batch-moment count does not match the network");
    for (std::size_t i = 0; i < primary.size(); ++i) {
      for (std::size_t k = 0; k < 4; ++k) primary[i].norm(k).update_running(moments[i * 4 + k], momentum);
    }
  }

  template <std::floating_point U>
  CapsuleNetwork<U> cast() const {
    RngStream rng(0);
    CapsuleNetwork<U> out = CapsuleNetwork<U>::init(config, rng);
    assign_weights(out, collect_weights(*this), true);
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t i = 0; i < self.primary.size(); ++i) {
      PrimaryCapsule<T>::visit_impl(self.primary[i], capsule_name(i), f);
    }
    for (std::size_t i = 0; i < self.primary.size(); ++i) {
      for (std::size_t j = 0; j < self.config.classes; ++j) {
        f(routing_name(i, j), self.routing[i * self.config.classes + j], ParamKind::trainable);
      }
    }
  }
};

/// Evaluation switches for one forward pass.
struct ForwardOptions {
  Mode mode = Mode::infer;
  RoutingConfig routing{};
  RngStream* rng = nullptr;  // required in train mode
  ReluRule relu = ReluRule::standard;
};

/// Primary capsule trunk on [B,K,H,W] features; returns u as [B,4].
template <std::floating_point T>
Var<T> primary_capsule_forward(const PrimaryCapsule<T>& caps, const Binder<T>& bind, const std::string& name,
                               const Var<T>& features, Mode mode, ReluRule rule,
                               std::vector<BatchMoments>* moments) {
  const Shape& fs = features.shape();
  if (fs.size() != 4) throw DimensionError("capsule input must be [B,K,H,W], got " + shape_str(fs));
  if (fs[2] < 3 || fs[3] < 3) {
    throw DimensionError("capsule input needs feature map H,W >= 3, got " + shape_str(fs));
  }
  auto bn = [&](const Var<T>& x, const BatchNormParams<T>& p, const std::string& n) {
    BatchMoments m;
    Var<T> y = batch_norm(x, bind(n + ".gamma", p.gamma), bind(n + ".beta", p.beta), p.running_mean,
                          p.running_var, mode, kBatchNormEpsilon, &m);
    if (moments && mode == Mode::train) moments->push_back(std::move(m));
    return y;
  };
  auto conv = [&](const ConvParams<T>& p, const std::string& n) {
    return std::pair{bind(n + ".weight", p.weight), bind(n + ".bias", p.bias)};
  };
  auto [k1, b1] = conv(caps.conv1, name + ".conv1");
  Var<T> x = relu(bn(conv2d(features, k1, b1, 1, 1), caps.bn1, name + ".bn1"), rule);
  auto [k2, b2] = conv(caps.conv2, name + ".conv2");
  x = relu(bn(conv2d(x, k2, b2, 1, 1), caps.bn2, name + ".bn2"), rule);
  x = statistical_pool(x);  // [B,2,16]
  auto [k3, b3] = conv(caps.conv3, name + ".conv3");
  x = relu(bn(conv1d(x, k3, b3, 2), caps.bn3, name + ".bn3"), rule);
  auto [k4, b4] = conv(caps.conv4, name + ".conv4");
  x = bn(conv1d(x, k4, b4, 1), caps.bn4, name + ".bn4");  // [B,1,4]
  return reshape(x, Shape{fs[0], kCapsuleDim});
}

/// Tape-free single-sample convenience: [K,H,W] -> u (4-vector), infer mode.
template <std::floating_point T>
Tensor<T> primary_capsule_forward(const PrimaryCapsule<T>& caps, const Tensor<T>& features) {
  if (features.rank() != 3) throw DimensionError("expected features [K,H,W], got " + shape_str(features.shape()));
  Tape<T> tape;
  Binder<T> bind(tape, false);
  Var<T> f = tape.constant(features.reshaped(Shape{1, features.dim(0), features.dim(1), features.dim(2)}));
  Var<T> u = primary_capsule_forward(caps, bind, "caps", f, Mode::infer, ReluRule::standard, nullptr);
  return u.value().reshaped(Shape{kCapsuleDim});
}

/// Intermediate values of one routing pass, kept for diagnostics and tests.
template <std::floating_point T>
struct RoutingTrace {
  Tensor<T> u_hat;                  // [B,N,J,M] after noise and dropout
  std::vector<Tensor<T>> coupling;  // c per iteration, [B,N,J]
};

template <std::floating_point T>
struct RoutingResult {
  Var<T> v;  // [B,J,M]
  RoutingTrace<T> trace;
};

/**
 * Dynamic routing by agreement with train-only regularisation.
 * u: [B,N,D] primary capsule outputs; w: [N,J,M,D] routing matrices.
 *   W_hat = W + N(0, sigma^2) noise           (train)
 *   u_hat(i,j) = W_hat(i,j) squash(u(i))
 *   u_hat = dropout(u_hat)                     (train)
 *   b = 0; r times: c_i = softmax_j(b_i); s_j = sum_i c_ij u_hat(i,j);
 *                   v_j = squash(s_j); b_ij += u_hat(i,j) . v_j
 */
template <std::floating_point T>
RoutingResult<T> dynamic_routing(const Var<T>& u, const Var<T>& w, const RoutingConfig& cfg, Mode mode,
                                 RngStream* rng) {
  cfg.validate();
  const Shape& us = u.shape();
  const Shape& ws = w.shape();
  if (us.size() != 3 || ws.size() != 4) {
    throw DimensionError("routing expects u [B,N,D] and W [N,J,M,D], got " + shape_str(us) + " and " + shape_str(ws));
  }
  if (mode == Mode::train && !rng && (cfg.noise_sigma > 0 || cfg.dropout_p > 0)) {
    throw ParameterError("train-mode routing needs a random stream");
  }
  Var<T> w_hat = w;
  if (mode == Mode::train && cfg.noise_sigma > 0) {
    Tensor<T> noise(ws);
    for (auto& v : noise.data()) v = static_cast<T>(rng->normal(0.0, cfg.noise_sigma));
    w_hat = add_constant(w, noise);
  }
  Var<T> u_hat = route_predict(squash(u, 2), w_hat);
  u_hat = dropout(u_hat, cfg.dropout_p, mode, rng);

  const std::size_t B = us[0], N = us[1], J = ws[1];
  RoutingResult<T> out;
  out.trace.u_hat = u_hat.value();
  Var<T> logits = u.tape().constant(Tensor<T>(Shape{B, N, J}));
  for (int it = 0; it < cfg.iterations; ++it) {
    Var<T> c = softmax(logits, 2);
    out.trace.coupling.push_back(c.value());
    out.v = squash(weighted_sum(c, u_hat), 2);
    if (it + 1 < cfg.iterations) logits = add(logits, agreement(u_hat, out.v));
  }
  return out;
}

/// Stacks the per-pair routing matrices into [N,J,M,D] on the tape.
template <std::floating_point T>
Var<T> bind_routing(const CapsuleNetwork<T>& net, const Binder<T>& bind) {
  std::vector<Var<T>> rows;
  for (std::size_t i = 0; i < net.config.capsules; ++i) {
    std::vector<Var<T>> cols;
    for (std::size_t j = 0; j < net.config.classes; ++j) {
      cols.push_back(bind(CapsuleNetwork<T>::routing_name(i, j), net.routing_matrix(i, j)));
    }
    rows.push_back(stack(cols, 0));
  }
  return stack(rows, 0);
}

/// y_hat = mean over dimensions m of softmax_j(v[j][m]); v [B,J,M] -> [B,J].
template <std::floating_point T>
Var<T> predict(const Var<T>& v) {
  if (v.value().rank() != 3) throw DimensionError("predict expects v [B,J,M], got " + shape_str(v.shape()));
  return mean_axis(softmax(v, 1), 2);
}

/// Tape-free prediction from per-class output vectors of equal dimension.
template <std::floating_point T>
std::vector<T> predict(const std::vector<std::vector<T>>& v) {
  if (v.size() < 2) throw DimensionError("predict needs at least two output capsules");
  const std::size_t m = v.front().size();
  Tensor<T> packed(Shape{1, v.size(), m});
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (v[j].size() != m) throw DimensionError("output capsule " + std::to_string(j) + " has a different dimension");
    std::copy(v[j].begin(), v[j].end(), packed.raw() + j * m);
  }
  Tape<T> tape;
  Var<T> y = predict(tape.constant(packed));
  return y.value().vec();
}

/**
 * Cross-entropy of a probability vector against a class label, with
 * probabilities clamped to [1e-7, 1-1e-7]. Two classes use the binary form
 * -(y log p + (1-y) log(1-p)) on p = probs[1].
 */
inline double cross_entropy_loss(const std::vector<double>& probs, std::size_t label, double clamp = 1e-7) {
  if (label >= probs.size()) {
    throw ParameterError("label " + std::to_string(label) + " out of range for " + std::to_string(probs.size()) + " classes");
  }
  auto c = [clamp](double p) { return std::clamp(p, clamp, 1.0 - clamp); };
  if (probs.size() == 2) {
    const double y = static_cast<double>(label), p = c(probs[1]);
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  }
  return -std::log(c(probs[label]));
}

template <std::floating_point T>
struct ForwardResult {
  Var<T> probs;  // [B,J]
  Var<T> v;      // [B,J,M]
  Var<T> u;      // [B,N,D]
  RoutingTrace<T> trace;
  std::vector<BatchMoments> moments;  // train mode, four per capsule
};

/// Capsules -> routing -> prediction on [B,256,H,W] (or [256,H,W]) features.
template <std::floating_point T>
ForwardResult<T> forward(const CapsuleNetwork<T>& net, const Binder<T>& bind, const Var<T>& features,
                         const ForwardOptions& opt) {
  Var<T> x = features;
  if (x.value().rank() == 3) {
    const Shape& s = x.shape();
    x = reshape(x, Shape{1, s[0], s[1], s[2]});
  }
  if (x.value().dim(1) != net.config.in_channels) {
    throw DimensionError("feature axis K=" + std::to_string(x.value().dim(1)) + " but network expects " +
                         std::to_string(net.config.in_channels));
  }
  ForwardResult<T> r;
  std::vector<Var<T>> us;
  for (std::size_t i = 0; i < net.primary.size(); ++i) {
    us.push_back(primary_capsule_forward(net.primary[i], bind, CapsuleNetwork<T>::capsule_name(i), x, opt.mode,
                                         opt.relu, &r.moments));
  }
  r.u = stack(us, 1);
  RoutingResult<T> routed = dynamic_routing(r.u, bind_routing(net, bind), opt.routing, opt.mode, opt.rng);
  r.v = routed.v;
  r.trace = std::move(routed.trace);
  r.probs = predict(r.v);
  return r;
}

/// Infer-mode class probabilities for a batch of features; [B,J].
template <std::floating_point T>
Tensor<T> infer_probs(const CapsuleNetwork<T>& net, const Tensor<T>& features, const RoutingConfig& routing = {}) {
  Tape<T> tape;
  Binder<T> bind(tape, false);
  ForwardOptions opt;
  opt.routing = routing;
  return forward(net, bind, tape.constant(features), opt).probs.value();
}

template <class Model>
void require_finite(const Model& model, const char* what) {
  model.visit([&](const std::string& name, const auto& t, ParamKind) {
    if (!t.all_finite()) throw NumericalError(std::string(what) + ": tensor '" + name + "' holds NaN/Inf");
  });
}

/**
 * Guided-backprop saliency of class `target` for a [3,H,W] image in [0,1].
 * The target activation is the mean of v(target); its input gradient is
 * collapsed over channels by max |.| and scaled so the maximum is 1.
 */
template <std::floating_point T>
Tensor<T> saliency_map(const CapsuleNetwork<T>& net, const VggPrefix<T>& prefix, const Tensor<T>& image,
                       std::size_t target, const RoutingConfig& routing = {}) {
  if (target >= net.config.classes) {
    throw ParameterError("target class " + std::to_string(target) + " out of range");
  }
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("saliency expects image [3,H,W], got " + shape_str(image.shape()));
  require_finite(net, "saliency");
  require_finite(prefix, "saliency");
  Tape<T> tape;
  Binder<T> bind(tape, false);
  Var<T> input = tape.variable(normalize_image(prefix.normalization, image));
  Var<T> feats = vgg_forward(prefix, bind, input, ReluRule::guided);
  ForwardOptions opt;
  opt.routing = routing;
  opt.relu = ReluRule::guided;
  ForwardResult<T> r = forward(net, bind, feats, opt);
  Var<T> activation = mean(select(select(r.v, 0, 0), 0, target));
  tape.backward(activation);
  const Tensor<T> g = tape.grad_of(input);
  const std::size_t H = image.dim(1), W = image.dim(2);
  Tensor<T> map(Shape{H, W});
  for (std::size_t c = 0; c < 3; ++c) {
    const double inv = 1.0 / prefix.normalization.stddev[c];
    for (std::size_t p = 0; p < H * W; ++p) {
      map[p] = std::max(map[p], static_cast<T>(std::abs(g[c * H * W + p] * inv)));
    }
  }
  const T mx = *std::max_element(map.data().begin(), map.data().end());
  if (mx > T(0)) {
    for (auto& v : map.data()) v /= mx;
  }
  return map;
}

}  // namespace capsfor
