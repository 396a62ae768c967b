#pragma once

// Synthetic textures for desk-scale training runs. Class 0 is a clean
// texture; the other classes carry one locally manipulated region.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "capsfor/errors.hpp"
#include "capsfor/rng.hpp"
#include "capsfor/tensor.hpp"

namespace capsfor::toy {

enum class Manipulation { none, blur, noise, warp };

inline constexpr Manipulation kManipulations[] = {Manipulation::none, Manipulation::blur, Manipulation::noise,
                                                 Manipulation::warp};

inline std::string manipulation_name(Manipulation m) {
  switch (m) {
    case Manipulation::none: return "real";
    case Manipulation::blur: return "blur";
    case Manipulation::noise: return "noise";
    case Manipulation::warp: return "warp";
  }
  return "unknown";
}

/// Tint plus a few oriented gratings plus pixel noise, values in [0,1].
inline Tensor<float> texture(std::size_t size, RngStream& rng) {
  struct Grating {
    double fx, fy, phase, amp[3];
  };
  std::vector<Grating> gs(3);
  for (auto& g : gs) {
    const double f = 0.04 + 0.2 * rng.uniform();
    const double theta = std::numbers::pi * rng.uniform();
    g.fx = f * std::cos(theta);
    g.fy = f * std::sin(theta);
    g.phase = 2 * std::numbers::pi * rng.uniform();
    for (double& a : g.amp) a = 0.05 + 0.1 * rng.uniform();
  }
  double tint[3];
  for (double& t : tint) t = 0.3 + 0.4 * rng.uniform();
  Tensor<float> img(Shape{3, size, size});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double v = tint[c] + rng.normal(0.0, 0.02);
        for (const auto& g : gs) {
          v += g.amp[c] * std::sin(2 * std::numbers::pi * (g.fx * static_cast<double>(x) + g.fy * static_cast<double>(y)) + g.phase);
        }
        img[(c * size + y) * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return img;
}

namespace detail {

/// Separable box blur of radius r with clamped borders.
inline Tensor<float> box_blur(const Tensor<float>& img, std::size_t r) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor<float> tmp(img.shape()), out(img.shape());
  const long R = static_cast<long>(r);
  auto at = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(n) - 1)); };
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0;
        for (long d = -R; d <= R; ++d) acc += img[(c * H + y) * W + at(static_cast<long>(x) + d, W)];
        tmp[(c * H + y) * W + x] = static_cast<float>(acc / static_cast<double>(2 * R + 1));
      }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0;
        for (long d = -R; d <= R; ++d) acc += tmp[(c * H + at(static_cast<long>(y) + d, H)) * W + x];
        out[(c * H + y) * W + x] = static_cast<float>(acc / static_cast<double>(2 * R + 1));
      }
  return out;
}

/// Bilinear sample of channel c at a fractional position (clamped).
inline double sample(const Tensor<float>& img, std::size_t c, double y, double x) {
  const std::size_t H = img.dim(1), W = img.dim(2);
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  const std::size_t y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double wy = y - static_cast<double>(y0), wx = x - static_cast<double>(x0);
  auto p = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(img[(c * H + yy) * W + xx]); };
  return (p(y0, x0) * (1 - wx) + p(y0, x1) * wx) * (1 - wy) + (p(y1, x0) * (1 - wx) + p(y1, x1) * wx) * wy;
}

}  // namespace detail

/**
 * Applies `m` inside a random square region covering roughly a third of
 * the image side, blended in with a feathered mask.
 */
inline Tensor<float> manipulate(const Tensor<float>& img, Manipulation m, RngStream& rng) {
  if (m == Manipulation::none) return img;
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const std::size_t side = std::max<std::size_t>(8, static_cast<std::size_t>(std::min(H, W) * (0.35 + 0.15 * rng.uniform())));
  const std::size_t y0 = static_cast<std::size_t>(rng.uniform() * static_cast<double>(H - side + 1));
  const std::size_t x0 = static_cast<std::size_t>(rng.uniform() * static_cast<double>(W - side + 1));
  const double feather = static_cast<double>(side) / 8.0;

  Tensor<float> edited(img.shape());
  switch (m) {
    case Manipulation::blur:
      edited = detail::box_blur(img, 2);
      break;
    case Manipulation::noise:
      edited = img;
      for (auto& v : edited.data()) v = static_cast<float>(v + rng.normal(0.0, 0.08));
      break;
    case Manipulation::warp: {
      const double amp = 2.5 + 1.5 * rng.uniform(), freq = 0.15 + 0.1 * rng.uniform();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const double dx = amp * std::sin(freq * static_cast<double>(y));
            const double dy = amp * std::cos(freq * static_cast<double>(x));
            edited[(c * H + y) * W + x] =
                static_cast<float>(detail::sample(img, c, static_cast<double>(y) + dy, static_cast<double>(x) + dx));
          }
      break;
    }
    case Manipulation::none:
      break;
  }

  Tensor<float> out = img;
  for (std::size_t y = y0; y < y0 + side; ++y)
    for (std::size_t x = x0; x < x0 + side; ++x) {
      const double d = std::min({static_cast<double>(y - y0), static_cast<double>(y0 + side - 1 - y),
                                 static_cast<double>(x - x0), static_cast<double>(x0 + side - 1 - x)});
      const double a = std::min(1.0, (d + 1.0) / feather);
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t i = (c * H + y) * W + x;
        out[i] = static_cast<float>(std::clamp((1 - a) * img[i] + a * edited[i], 0.0, 1.0));
      }
    }
  return out;
}

struct ToySample {
  Tensor<float> image;
  std::size_t label;
  std::string id;
};

/**
 * `per_class` images for each of the first `classes` manipulations
 * (class 0 = clean texture). Samples are interleaved by class.
 */
inline std::vector<ToySample> make_dataset(std::size_t per_class, std::size_t classes, std::size_t size,
                                           std::uint64_t seed) {
  if (classes < 2 || classes > std::size(kManipulations)) throw ParameterError("toy data supports 2 to 4 classes");
  if (size < 16) throw ParameterError("toy images must be at least 16 pixels wide");
  std::vector<ToySample> out;
  RngStream root(seed);
  for (std::size_t k = 0; k < per_class; ++k) {
    for (std::size_t c = 0; c < classes; ++c) {
      RngStream rng = root.split(k * classes + c);
      Tensor<float> img = manipulate(texture(size, rng), kManipulations[c], rng);
      out.push_back({std::move(img), c, manipulation_name(kManipulations[c]) + "_" + std::to_string(k)});
    }
  }
  return out;
}

}  // namespace capsfor::toy
