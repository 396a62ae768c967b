#pragma once

// Tape-free numerical kernels. The differentiable ops in ops.hpp and the
// frozen feature extractor both call into these.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "capsfor/errors.hpp"
#include "capsfor/tensor.hpp"

namespace capsfor::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

/// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

struct ConvGeometry {
  std::size_t batch, in_ch, h, w, out_ch, kh, kw, stride, pad, out_h, out_w;
};

inline std::size_t conv_out(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad,
                            const char* axis) {
  if (stride < 1) throw ParameterError("convolution stride must be >= 1");
  if (k > n + 2 * pad) {
    throw DimensionError(std::string("kernel extent ") + std::to_string(k) +
                         " exceeds padded input extent " + std::to_string(n + 2 * pad) +
                         " on axis " + axis);
  }
  return (n + 2 * pad - k) / stride + 1;
}

template <class T>
ConvGeometry conv2d_geometry(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b,
                             std::size_t stride, std::size_t pad) {
  if (x.rank() != 4) throw DimensionError("conv2d input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (k.rank() != 4) throw DimensionError("conv2d kernel must be [Co,Ci,kH,kW], got " + shape_str(k.shape()));
  if (k.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d channel mismatch: input axis C=" + std::to_string(x.dim(1)) +
                         " vs kernel axis Ci=" + std::to_string(k.dim(1)));
  }
  if (b.rank() != 1 || b.dim(0) != k.dim(0)) {
    throw DimensionError("conv2d bias must be [" + std::to_string(k.dim(0)) + "], got " +
                         shape_str(b.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3),
                 stride, pad, 0, 0};
  g.out_h = conv_out(g.h, g.kh, stride, pad, "H");
  g.out_w = conv_out(g.w, g.kw, stride, pad, "W");
  return g;
}

/// Unfolds one [C,H,W] image into [C*kh*kw, out_h*out_w] columns.
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.out_w + ox] = inside ? img[(c * g.h + iy) * g.w + ix] : T(0);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters columns back into an image, accumulating.
template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

/// Batched 2D cross-correlation: [B,C,H,W] * [Co,C,kh,kw] + bias.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b,
                         std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv2d_geometry(x, k, b, stride, pad);
  const std::size_t patch = g.in_ch * g.kh * g.kw, plane = g.out_h * g.out_w;
  Tensor<T> y(Shape{g.batch, g.out_ch, g.out_h, g.out_w});
  std::vector<T> cols(patch * plane);
  CMapMat<T> kmat(k.raw(), g.out_ch, patch);
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(x.raw() + n * g.in_ch * g.h * g.w, g, cols.data());
    MapMat<T> out(y.raw() + n * g.out_ch * plane, g.out_ch, plane);
    out.noalias() = kmat * CMapMat<T>(cols.data(), patch, plane);
    for (std::size_t o = 0; o < g.out_ch; ++o) out.row(o).array() += b[o];
  }
  return y;
}

/// Gradients of conv2d; any of dx/dk/db may be null when not needed.
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& dy,
                     std::size_t stride, std::size_t pad, Tensor<T>* dx, Tensor<T>* dk,
                     Tensor<T>* db) {
  Tensor<T> bias_shape(Shape{k.dim(0)});
  const ConvGeometry g = conv2d_geometry(x, k, bias_shape, stride, pad);
  const std::size_t patch = g.in_ch * g.kh * g.kw, plane = g.out_h * g.out_w;
  std::vector<T> cols(patch * plane);
  CMapMat<T> kmat(k.raw(), g.out_ch, patch);
  for (std::size_t n = 0; n < g.batch; ++n) {
    CMapMat<T> gy(dy.raw() + n * g.out_ch * plane, g.out_ch, plane);
    if (db) {
      for (std::size_t o = 0; o < g.out_ch; ++o) {
        double acc = 0;
        for (std::size_t p = 0; p < plane; ++p) acc += gy(o, p);
        (*db)[o] += static_cast<T>(acc);
      }
    }
    if (dk) {
      im2col(x.raw() + n * g.in_ch * g.h * g.w, g, cols.data());
      MapMat<T> gk(dk->raw(), g.out_ch, patch);
      gk.noalias() += gy * CMapMat<T>(cols.data(), patch, plane).transpose();
    }
    if (dx) {
      MapMat<T> gc(cols.data(), patch, plane);
      gc.noalias() = kmat.transpose() * gy;
      col2im(cols.data(), g, dx->raw() + n * g.in_ch * g.h * g.w);
    }
  }
}

template <class T>
std::size_t check_pool(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  if (x.rank() != 4) throw DimensionError("maxpool2d input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (k < 1 || stride < 1) throw ParameterError("maxpool2d window and stride must be >= 1");
  if (k > std::min(x.dim(2), x.dim(3))) {
    throw DimensionError("maxpool2d window " + std::to_string(k) + " exceeds input extent on axes H/W " +
                         shape_str(x.shape()));
  }
  return 0;
}

/// Flat input index of each window maximum (first maximum on ties).
template <class T>
std::vector<std::size_t> maxpool2d_argmax(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  check_pool(x, k, stride);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t oh = (H - k) / stride + 1, ow = (W - k) / stride + 1;
  std::vector<std::size_t> idx(B * C * oh * ow);
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t base = bc * H * W;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + oy * stride * W + ox * stride;
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t p = base + (oy * stride + i) * W + ox * stride + j;
            if (x[p] > x[best]) best = p;
          }
        }
        idx[o++] = best;
      }
    }
  }
  return idx;
}

template <class T>
Tensor<T> maxpool2d_forward(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  const auto idx = maxpool2d_argmax(x, k, stride);
  const std::size_t oh = (x.dim(2) - k) / stride + 1, ow = (x.dim(3) - k) / stride + 1;
  Tensor<T> y(Shape{x.dim(0), x.dim(1), oh, ow});
  for (std::size_t i = 0; i < idx.size(); ++i) y[i] = x[idx[i]];
  return y;
}

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = v > T(0) ? v : T(0);
  return y;
}

/// Per-channel mean and biased variance over batch and trailing axes of [B,C,...].
template <class T>
void channel_moments(const Tensor<T>& x, std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.size() / (B * C);
  mean.assign(C, 0.0);
  var.assign(C, 0.0);
  const double n = static_cast<double>(B * S);
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const T* p = x.raw() + (b * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) acc += p[s];
    }
    mean[c] = acc / n;
    double sq = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const T* p = x.raw() + (b * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const double d = p[s] - mean[c];
        sq += d * d;
      }
    }
    var[c] = sq / n;
  }
}

/// Applies y = gamma * (x - mean) / sqrt(var + eps) + beta per channel.
template <class T>
Tensor<T> normalize_channels(const Tensor<T>& x, const std::vector<double>& mean,
                             const std::vector<double>& var, const Tensor<T>& gamma,
                             const Tensor<T>& beta, double eps) {
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.size() / (B * C);
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + eps);
    for (std::size_t b = 0; b < B; ++b) {
      const T* p = x.raw() + (b * C + c) * S;
      T* q = y.raw() + (b * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        q[s] = static_cast<T>(gamma[c] * ((p[s] - mean[c]) * inv) + beta[c]);
      }
    }
  }
  return y;
}

/// Numerically stable softmax along `axis`.
template <class T>
Tensor<T> softmax_forward(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < s.extent; ++a) mx = std::max(mx, x[base + a * s.inner]);
      double z = 0;
      for (std::size_t a = 0; a < s.extent; ++a) z += std::exp(static_cast<double>(x[base + a * s.inner] - mx));
      for (std::size_t a = 0; a < s.extent; ++a) {
        y[base + a * s.inner] = static_cast<T>(std::exp(static_cast<double>(x[base + a * s.inner] - mx)) / z);
      }
    }
  }
  return y;
}

}  // namespace capsfor::kernels
