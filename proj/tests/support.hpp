#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <functional>
#include <string>
#include <vector>

#include "capsfor/capsule.hpp"
#include "capsfor/gradcheck.hpp"
#include "capsfor/rng.hpp"
#include "capsfor/tape.hpp"
#include "capsfor/tensor.hpp"

namespace capsfor::testing {

template <class T = double>
Tensor<T> random_tensor(Shape shape, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return t;
}

/// Integer-valued entries in [-k, k]; sums of products stay exact in float.
template <class T = float>
Tensor<T> integer_tensor(Shape shape, RngStream& rng, int k = 3) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(static_cast<int>(rng.next_u64() % (2 * k + 1)) - k);
  return t;
}

using LossBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Worst relative error between reverse-mode and central-difference gradients
/// over every leaf tensor.
inline double gradient_error(const LossBuilder& build, const std::vector<Tensor<double>>& leaves, double h = 1e-4,
                             double floor = 1e-6) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& l : leaves) vars.push_back(tape.variable(l));
  tape.backward(build(tape, vars));
  double worst = 0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto f = [&](const Tensor<double>& x) {
      Tape<double> t2;
      std::vector<Var<double>> v2;
      for (std::size_t j = 0; j < leaves.size(); ++j) v2.push_back(t2.constant(j == k ? x : leaves[j]));
      return build(t2, v2).value().item();
    };
    const Tensor<double> numeric = finite_difference_gradient(f, leaves[k], h);
    worst = std::max(worst, max_rel_error(tape.grad_of(vars[k]), numeric, floor));
  }
  return worst;
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct gradient.
inline Var<double> weighted_total(const Var<double>& y, std::uint64_t seed = 99) {
  RngStream rng(seed);
  return sum(mul(y, y.tape().constant(random_tensor(y.shape(), rng))));
}

struct EndToEndCheck {
  double max_rel_error = 0;
  std::size_t entries = 0;
  std::string worst;
};

/**
 * Loss gradient of a tiny 64-bit network (train mode, fixed noise and
 * dropout draws) against central differences. Tensors with more than
 * `per_tensor` entries are sampled at that many random positions.
 */
inline EndToEndCheck end_to_end_gradient_check(std::uint64_t seed, std::size_t capsules = 2, std::size_t extent = 8,
                                               std::size_t per_tensor = 8, double h = 1e-6) {
  RngStream rng(seed);
  CapsuleNetwork<double> net = CapsuleNetwork<double>::init({capsules, 2, kVggOutChannels}, rng);
  net.visit([&](const std::string& name, Tensor<double>& t, ParamKind kind) {
    if (kind != ParamKind::trainable || name.find("routing") != std::string::npos) return;
    const bool gamma = name.ends_with(".gamma");
    if (gamma || name.ends_with(".beta") || name.ends_with(".bias")) {
      for (auto& v : t.data()) v = (gamma ? 1.0 : 0.0) + 0.2 * rng.normal();
    }
  });
  const Tensor<double> features = random_tensor(Shape{3, kVggOutChannels, extent, extent}, rng, 0.0, 1.0);
  const std::vector<std::size_t> labels{0, 1, 1};

  auto loss = [&](bool record, GradientRecord<double>* grads) {
    Tape<double> tape;
    Binder<double> bind(tape, record);
    RngStream noise(seed ^ 0xABCDu);
    ForwardOptions opt;
    opt.mode = Mode::train;
    opt.rng = &noise;
    Var<double> l = nll_loss(forward(net, bind, tape.constant(features), opt).probs, labels);
    if (grads) *grads = tape.backward(l);
    return l.value().item();
  };
  GradientRecord<double> grads;
  loss(true, &grads);

  EndToEndCheck out;
  RngStream pick(seed + 17);
  net.visit([&](const std::string& name, Tensor<double>& t, ParamKind kind) {
    if (kind != ParamKind::trainable) return;
    const Tensor<double>& g = grads.at(name);
    std::vector<std::size_t> idx;
    if (t.size() <= per_tensor) {
      for (std::size_t i = 0; i < t.size(); ++i) idx.push_back(i);
    } else {
      for (std::size_t k = 0; k < per_tensor; ++k) idx.push_back(pick.next_u64() % t.size());
    }
    for (std::size_t i : idx) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = loss(false, nullptr);
      t[i] = orig - h;
      const double down = loss(false, nullptr);
      t[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(numeric - g[i]) / std::max({std::abs(numeric), std::abs(g[i]), 1e-6});
      ++out.entries;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  });
  return out;
}

/// Brute-force EER: every distinct score (and +inf) as a threshold, rates by
/// direct counting, linear interpolation across the FAR/FRR crossing.
inline double eer_oracle(const std::vector<double>& pos, const std::vector<double>& neg) {
  std::vector<double> ts(pos);
  ts.insert(ts.end(), neg.begin(), neg.end());
  ts.push_back(std::numeric_limits<double>::infinity());
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  auto rates = [&](double t) {
    double far = 0, frr = 0;
    for (double s : neg) far += s >= t;
    for (double s : pos) frr += s < t;
    return std::pair{far / static_cast<double>(neg.size()), frr / static_cast<double>(pos.size())};
  };
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const auto [far_lo, frr_lo] = rates(ts[k]);
    const auto [far_hi, frr_hi] = rates(ts[k + 1]);
    const double d_lo = far_lo - frr_lo, d_hi = far_hi - frr_hi;
    if (d_hi > 0) continue;
    if (d_hi == 0) return far_hi;
    return far_lo + d_lo / (d_lo - d_hi) * (far_hi - far_lo);
  }
  return 0.0;
}

}  // namespace capsfor::testing
