#pragma once

// Frozen VGG-19 prefix: conv3-64 x2, pool, conv3-128 x2, pool, conv3-256 x4,
// pool (all 3x3, pad 1, stride 1; pools 2x2 stride 2). Tensors are named
// vgg.conv1 .. vgg.conv8.

#include <array>
#include <filesystem>
#include <string>

#include "capsfor/kernels.hpp"
#include "capsfor/layers.hpp"
#include "capsfor/ops.hpp"
#include "capsfor/rng.hpp"
#include "capsfor/weights.hpp"

namespace capsfor {

inline constexpr std::size_t kVggLayers = 8;
inline constexpr std::array<std::size_t, kVggLayers + 1> kVggChannels{3, 64, 64, 128, 128, 256, 256, 256, 256};
inline constexpr std::size_t kVggOutChannels = 256;
inline constexpr std::size_t kFeatureStride = 8;

/// A max pool follows these (1-based) conv layers.
constexpr bool vgg_pool_after(std::size_t layer) { return layer == 2 || layer == 4 || layer == 8; }

/// Per-channel affine normalisation applied to [0,1] RGB before the prefix.
struct InputNormalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  /// Constants the published ILSVRC-trained VGG weights expect.
  static InputNormalization imagenet() { return {{0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}}; }
  static InputNormalization unit() { return {}; }

  friend bool operator==(const InputNormalization&, const InputNormalization&) = default;
};

template <std::floating_point T>
struct VggPrefix {
  std::array<ConvParams<T>, kVggLayers> convs;
  InputNormalization normalization;
  bool trainable = false;

  static std::string layer_name(std::size_t i) { return "vgg.conv" + std::to_string(i + 1); }

  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t i = 0; i < kVggLayers; ++i) ConvParams<T>::visit_impl(self.convs[i], layer_name(i), f);
  }
};

/// Random fallback prefix: He-normal kernels, zero biases, [0,1] input scaling.
template <std::floating_point T>
VggPrefix<T> build_vgg_prefix(RngStream& rng) {
  VggPrefix<T> p;
  for (std::size_t i = 0; i < kVggLayers; ++i) {
    p.convs[i] = ConvParams<T>::he_normal(Shape{kVggChannels[i + 1], kVggChannels[i], 3, 3}, rng);
  }
  p.normalization = InputNormalization::unit();
  return p;
}

/// Pretrained prefix from a CFW1 file holding vgg.convK.{weight,bias}.
template <std::floating_point T>
VggPrefix<T> load_vgg_prefix(const std::filesystem::path& path) {
  VggPrefix<T> p;
  for (std::size_t i = 0; i < kVggLayers; ++i) {
    p.convs[i].weight = Tensor<T>(Shape{kVggChannels[i + 1], kVggChannels[i], 3, 3});
    p.convs[i].bias = Tensor<T>(Shape{kVggChannels[i + 1]});
  }
  assign_weights(p, load_weights(path), /*strict=*/false);
  p.normalization = InputNormalization::imagenet();
  return p;
}

/// Spatial extent after the three floor-halving pools.
constexpr std::size_t feature_extent(std::size_t s) { return s / 2 / 2 / 2; }

/// Maps [0,1] RGB ([3,H,W] or [B,3,H,W]) to the prefix input convention.
template <std::floating_point T>
Tensor<T> normalize_image(const InputNormalization& norm, const Tensor<T>& image) {
  const std::size_t r = image.rank();
  if ((r != 3 && r != 4) || image.dim(r - 3) != 3) {
    throw DimensionError("image must be [3,H,W] or [B,3,H,W], got " + shape_str(image.shape()));
  }
  Tensor<T> out = image;
  const std::size_t plane = image.dim(r - 1) * image.dim(r - 2);
  const std::size_t batch = r == 4 ? image.dim(0) : 1;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      T* p = out.raw() + (b * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<T>((p[i] - norm.mean[c]) / norm.stddev[c]);
    }
  return out;
}

namespace detail {
inline void check_prefix_input(const Shape& s) {
  const std::size_t r = s.size();
  if ((r != 3 && r != 4) || s[r - 3] != 3) {
    throw DimensionError("feature extractor input must be [3,H,W] or [B,3,H,W], got " + shape_str(s));
  }
  if (s[r - 2] < kFeatureStride || s[r - 1] < kFeatureStride) {
    throw DimensionError("feature extractor input needs H,W >= 8, got " + shape_str(s));
  }
}
}  // namespace detail

/// Deterministic tape-free forward pass; [3,H,W] -> [256,H/8,W/8] (floor-wise).
template <std::floating_point T>
Tensor<T> extract_features(const VggPrefix<T>& prefix, const Tensor<T>& image) {
  detail::check_prefix_input(image.shape());
  const bool single = image.rank() == 3;
  Tensor<T> x = single ? image.reshaped(Shape{1, 3, image.dim(1), image.dim(2)}) : image;
  for (std::size_t i = 0; i < kVggLayers; ++i) {
    x = kernels::relu_forward(kernels::conv2d_forward(x, prefix.convs[i].weight, prefix.convs[i].bias, 1, 1));
    if (vgg_pool_after(i + 1)) x = kernels::maxpool2d_forward(x, 2, 2);
  }
  return single ? x.reshaped(Shape{x.dim(1), x.dim(2), x.dim(3)}) : x;
}

/// Taped forward pass, for saliency and fine-tuning.
template <std::floating_point T>
Var<T> vgg_forward(const VggPrefix<T>& prefix, const Binder<T>& bind, const Var<T>& image,
                   ReluRule rule = ReluRule::standard) {
  detail::check_prefix_input(image.shape());
  Var<T> x = image;
  for (std::size_t i = 0; i < kVggLayers; ++i) {
    const std::string n = VggPrefix<T>::layer_name(i);
    x = conv2d(x, bind(n + ".weight", prefix.convs[i].weight), bind(n + ".bias", prefix.convs[i].bias), 1, 1);
    x = relu(x, rule);
    if (vgg_pool_after(i + 1)) x = maxpool2d(x, 2, 2);
  }
  return x;
}

}  // namespace capsfor
