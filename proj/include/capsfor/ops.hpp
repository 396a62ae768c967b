#pragma once

// Differentiable operations recorded on a Tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "capsfor/errors.hpp"
#include "capsfor/kernels.hpp"
#include "capsfor/rng.hpp"
#include "capsfor/tape.hpp"
#include "capsfor/tensor.hpp"

namespace capsfor {

enum class Mode { train, infer };

/// Backward rule for relu: `guided` also drops negative upstream gradients.
enum class ReluRule { standard, guided };

namespace detail {

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw TapeError("operands recorded on different tapes");
}

template <class T>
void add_into(Tape<T>& t, std::size_t id, const Tensor<T>& g) {
  if (t.requires_grad(id)) t.grad_buffer(id) += g;
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> y = a.value();
  y += b.value();
  return a.tape().record(std::move(y), {a.id(), b.id()}, [](Tape<T>& t, std::size_t self) {
    for (std::size_t in : t.inputs(self)) detail::add_into(t, in, t.grad(self));
  });
}

/// x + c for a constant tensor c.
template <class T>
Var<T> add_constant(const Var<T>& a, const Tensor<T>& c) {
  a.value().require_same_shape(c, "add_constant");
  Tensor<T> y = a.value();
  y += c;
  return a.tape().record(std::move(y), {a.id()}, [](Tape<T>& t, std::size_t self) {
    detail::add_into(t, t.inputs(self)[0], t.grad(self));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape().record(std::move(y), {a.id(), b.id()}, [](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const std::size_t ia = t.inputs(self)[0], ib = t.inputs(self)[1];
    const Tensor<T>& va = t.value(ia);
    const Tensor<T>& vb = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> y = a.value();
  for (auto& v : y.data()) v *= s;
  return a.tape().record(std::move(y), {a.id()}, [s](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    auto& gi = t.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += s * g[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  double acc = 0;
  for (T v : a.value().data()) acc += v;
  return a.tape().record(Tensor<T>::scalar(static_cast<T>(acc)), {a.id()},
                         [](Tape<T>& t, std::size_t self) {
                           const std::size_t in = t.inputs(self)[0];
                           if (!t.requires_grad(in)) return;
                           const T g = t.grad(self)[0];
                           for (auto& v : t.grad_buffer(in).data()) v += g;
                         });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(a.value().size())));
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(y), {a.id()}, [](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    auto& gi = t.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
  });
}

/// Stacks equally-shaped values along a new axis.
template <class T>
Var<T> stack(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("stack of zero tensors");
  const Shape& base = parts.front().shape();
  if (axis > base.size()) throw DimensionError("stack axis out of range");
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p);
    parts.front().value().require_same_shape(p.value(), "stack");
    ids.push_back(p.id());
  }
  Shape out_shape = base;
  out_shape.insert(out_shape.begin() + static_cast<long>(axis), parts.size());
  const kernels::AxisSplit s = kernels::split_axis(out_shape, axis);
  Tensor<T> y(out_shape);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& v = parts[k].value();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(v.raw() + o * s.inner, s.inner, y.raw() + (o * s.extent + k) * s.inner);
    }
  }
  return parts.front().tape().record(std::move(y), ids, [s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& ins = t.inputs(self);
    for (std::size_t k = 0; k < ins.size(); ++k) {
      if (!t.requires_grad(ins[k])) continue;
      auto& gi = t.grad_buffer(ins[k]);
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = g.raw() + (o * s.extent + k) * s.inner;
        T* dst = gi.raw() + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

/// Slice at `index` along `axis`; the axis is removed.
template <class T>
Var<T> select(const Var<T>& a, std::size_t axis, std::size_t index) {
  const kernels::AxisSplit s = kernels::split_axis(a.shape(), axis);
  if (index >= s.extent) throw DimensionError("select index out of range on axis " + std::to_string(axis));
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  Tensor<T> y(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(a.value().raw() + (o * s.extent + index) * s.inner, s.inner, y.raw() + o * s.inner);
  }
  return a.tape().record(std::move(y), {a.id()}, [s, index](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    auto& gi = t.grad_buffer(in);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) gi[(o * s.extent + index) * s.inner + i] += g[o * s.inner + i];
    }
  });
}

/// Mean over one axis; the axis is removed.
template <class T>
Var<T> mean_axis(const Var<T>& a, std::size_t axis) {
  const kernels::AxisSplit s = kernels::split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  Tensor<T> y(out_shape);
  const double inv = 1.0 / static_cast<double>(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double acc = 0;
      for (std::size_t e = 0; e < s.extent; ++e) acc += a.value()[(o * s.extent + e) * s.inner + i];
      y[o * s.inner + i] = static_cast<T>(acc * inv);
    }
  }
  return a.tape().record(std::move(y), {a.id()}, [s, inv](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    auto& gi = t.grad_buffer(in);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          gi[(o * s.extent + e) * s.inner + i] += static_cast<T>(g[o * s.inner + i] * inv);
        }
      }
    }
  });
}

/**
 * 2D cross-correlation. Input [C,H,W] or [B,C,H,W], kernel
 * [Co,Ci,kH,kW], bias [Co]. Output extent floor((H+2p-kH)/s)+1.
 */
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
  if (x.value().rank() == 3) {
    const Shape& s = x.shape();
    Var<T> y = conv2d(reshape(x, Shape{1, s[0], s[1], s[2]}), kernel, bias, stride, pad);
    const Shape& o = y.shape();
    return reshape(y, Shape{o[1], o[2], o[3]});
  }
  detail::require_same_tape(x, kernel);
  detail::require_same_tape(x, bias);
  Tensor<T> y = kernels::conv2d_forward(x.value(), kernel.value(), bias.value(), stride, pad);
  return x.tape().record(
      std::move(y), {x.id(), kernel.id(), bias.id()}, [stride, pad](Tape<T>& t, std::size_t self) {
        const auto& in = t.inputs(self);
        Tensor<T>* dx = t.requires_grad(in[0]) ? &t.grad_buffer(in[0]) : nullptr;
        Tensor<T>* dk = t.requires_grad(in[1]) ? &t.grad_buffer(in[1]) : nullptr;
        Tensor<T>* db = t.requires_grad(in[2]) ? &t.grad_buffer(in[2]) : nullptr;
        kernels::conv2d_backward(t.value(in[0]), t.value(in[1]), t.grad(self), stride, pad, dx, dk, db);
      });
}

/// 1D cross-correlation without padding. Input [C,L] or [B,C,L], kernel [Co,Ci,k].
template <class T>
Var<T> conv1d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t stride) {
  const std::size_t r = x.value().rank();
  if (r != 2 && r != 3) throw DimensionError("conv1d input must be [C,L] or [B,C,L], got " + shape_str(x.shape()));
  if (kernel.value().rank() != 3) {
    throw DimensionError("conv1d kernel must be [Co,Ci,k], got " + shape_str(kernel.shape()));
  }
  const Shape& s = x.shape();
  const std::size_t B = r == 3 ? s[0] : 1, C = s[r - 2], L = s[r - 1];
  const Shape& ks = kernel.shape();
  if (ks[2] > L) {
    throw DimensionError("conv1d kernel length " + std::to_string(ks[2]) + " exceeds input axis L=" +
                         std::to_string(L));
  }
  Var<T> x4 = reshape(x, Shape{B, C, 1, L});
  Var<T> k4 = reshape(kernel, Shape{ks[0], ks[1], 1, ks[2]});
  Var<T> y = conv2d(x4, k4, bias, stride, 0);
  const Shape& o = y.shape();
  return r == 3 ? reshape(y, Shape{o[0], o[1], o[3]}) : reshape(y, Shape{o[1], o[3]});
}

/// Max pooling over k x k windows on [C,H,W] or [B,C,H,W].
template <class T>
Var<T> maxpool2d(const Var<T>& x, std::size_t k, std::size_t stride) {
  if (x.value().rank() == 3) {
    const Shape& s = x.shape();
    Var<T> y = maxpool2d(reshape(x, Shape{1, s[0], s[1], s[2]}), k, stride);
    const Shape& o = y.shape();
    return reshape(y, Shape{o[1], o[2], o[3]});
  }
  auto idx = kernels::maxpool2d_argmax(x.value(), k, stride);
  const std::size_t oh = (x.value().dim(2) - k) / stride + 1, ow = (x.value().dim(3) - k) / stride + 1;
  Tensor<T> y(Shape{x.value().dim(0), x.value().dim(1), oh, ow});
  for (std::size_t i = 0; i < idx.size(); ++i) y[i] = x.value()[idx[i]];
  return x.tape().record(std::move(y), {x.id()}, [idx = std::move(idx)](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    auto& gi = t.grad_buffer(in);
    for (std::size_t i = 0; i < idx.size(); ++i) gi[idx[i]] += g[i];
  });
}

template <class T>
Var<T> relu(const Var<T>& x, ReluRule rule = ReluRule::standard) {
  return x.tape().record(kernels::relu_forward(x.value()), {x.id()}, [rule](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    const auto& xv = t.value(in);
    auto& gi = t.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] <= T(0)) continue;
      if (rule == ReluRule::guided && g[i] < T(0)) continue;
      gi[i] += g[i];
    }
  });
}

/// Batch statistics observed by a train-mode batch_norm call.
struct BatchMoments {
  std::vector<double> mean;
  std::vector<double> var;
};

/**
 * Batch normalisation over [B,C,...] with per-channel gamma/beta. Train
 * mode normalises by the biased batch statistics (reported through
 * `observed`); infer mode uses the running statistics.
 */
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  const Tensor<T>& running_mean, const Tensor<T>& running_var, Mode mode,
                  double eps = 1e-5, BatchMoments* observed = nullptr) {
  if (x.value().rank() < 2) throw DimensionError("batch_norm input must be [B,C,...], got " + shape_str(x.shape()));
  const std::size_t C = x.value().dim(1);
  if (gamma.value().size() != C || beta.value().size() != C) {
    throw DimensionError("batch_norm gamma/beta length must equal channel axis C=" + std::to_string(C));
  }
  std::vector<double> mean, var;
  if (mode == Mode::train) {
    kernels::channel_moments(x.value(), mean, var);
    if (observed) *observed = BatchMoments{mean, var};
  } else {
    if (running_mean.size() != C || running_var.size() != C) {
      throw DimensionError("batch_norm running statistics must have length C=" + std::to_string(C));
    }
    mean.assign(running_mean.data().begin(), running_mean.data().end());
    var.assign(running_var.data().begin(), running_var.data().end());
  }
  Tensor<T> y = kernels::normalize_channels(x.value(), mean, var, gamma.value(), beta.value(), eps);
  const bool batch_stats = mode == Mode::train;
  return x.tape().record(
      std::move(y), {x.id(), gamma.id(), beta.id()},
      [mean = std::move(mean), var = std::move(var), eps, batch_stats](Tape<T>& t, std::size_t self) {
        const auto& in = t.inputs(self);
        const Tensor<T>& xv = t.value(in[0]);
        const Tensor<T>& gv = t.value(in[1]);
        const Tensor<T>& dy = t.grad(self);
        const std::size_t B = xv.dim(0), C = xv.dim(1), S = xv.size() / (B * C);
        const double n = static_cast<double>(B * S);
        for (std::size_t c = 0; c < C; ++c) {
          const double inv = 1.0 / std::sqrt(var[c] + eps);
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t s = 0; s < S; ++s) {
              const std::size_t i = (b * C + c) * S + s;
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * (xv[i] - mean[c]) * inv;
            }
          }
          if (t.requires_grad(in[1])) t.grad_buffer(in[1])[c] += static_cast<T>(sum_dy_xhat);
          if (t.requires_grad(in[2])) t.grad_buffer(in[2])[c] += static_cast<T>(sum_dy);
          if (!t.requires_grad(in[0])) continue;
          auto& gx = t.grad_buffer(in[0]);
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t s = 0; s < S; ++s) {
              const std::size_t i = (b * C + c) * S + s;
              double d;
              if (batch_stats) {
                const double xhat = (xv[i] - mean[c]) * inv;
                d = gv[c] * inv / n * (n * dy[i] - sum_dy - xhat * sum_dy_xhat);
              } else {
                d = gv[c] * inv * dy[i];
              }
              gx[i] += static_cast<T>(d);
            }
          }
        }
      });
}

template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const kernels::AxisSplit s = kernels::split_axis(x.shape(), axis);
  return x.tape().record(kernels::softmax_forward(x.value(), axis), {x.id()}, [s](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gi = t.grad_buffer(in);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0;
        for (std::size_t a = 0; a < s.extent; ++a) dot += g[base + a * s.inner] * y[base + a * s.inner];
        for (std::size_t a = 0; a < s.extent; ++a) {
          const std::size_t k = base + a * s.inner;
          gi[k] += static_cast<T>(y[k] * (g[k] - dot));
        }
      }
    }
  });
}

/**
 * Inverted dropout: in train mode each element is zeroed with probability
 * p and survivors are scaled by 1/(1-p). Infer mode and p == 0 return the
 * input unchanged without consuming randomness.
 */
template <class T>
Var<T> dropout(const Var<T>& x, double p, Mode mode, RngStream* rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must satisfy 0 <= p < 1");
  if (mode == Mode::infer || p == 0.0) return x;
  if (!rng) throw ParameterError("dropout in train mode needs a random stream");
  std::vector<T> mask(x.value().size());
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : mask) m = rng->bernoulli(p) ? T(0) : keep;
  Tensor<T> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return x.tape().record(std::move(y), {x.id()}, [mask = std::move(mask)](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    auto& gi = t.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * mask[i];
  });
}

/// squash(u) = |u|^2/(1+|u|^2) * u/|u| applied to each vector along `axis`; squash(0) = 0.
template <class T>
Var<T> squash(const Var<T>& x, std::size_t axis) {
  const kernels::AxisSplit s = kernels::split_axis(x.shape(), axis);
  Tensor<T> y(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double n2 = 0;
      for (std::size_t a = 0; a < s.extent; ++a) n2 += static_cast<double>(xv[base + a * s.inner]) * xv[base + a * s.inner];
      const double n = std::sqrt(n2);
      const double f = n > 0 ? n / (1.0 + n2) : 0.0;
      for (std::size_t a = 0; a < s.extent; ++a) y[base + a * s.inner] = static_cast<T>(f * xv[base + a * s.inner]);
    }
  }
  return x.tape().record(std::move(y), {x.id()}, [s](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    const auto& xv = t.value(in);
    auto& gi = t.grad_buffer(in);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double n2 = 0, dot = 0;
        for (std::size_t a = 0; a < s.extent; ++a) {
          const std::size_t k = base + a * s.inner;
          n2 += static_cast<double>(xv[k]) * xv[k];
          dot += static_cast<double>(xv[k]) * g[k];
        }
        if (n2 == 0) continue;
        // d/du [f(n) u] = f I + (f'(n)/n) u u^T with f(n) = n/(1+n^2).
        const double n = std::sqrt(n2), den = 1.0 + n2;
        const double f = n / den;
        const double fprime_over_n = (1.0 - n2) / (den * den) / n;
        for (std::size_t a = 0; a < s.extent; ++a) {
          const std::size_t k = base + a * s.inner;
          gi[k] += static_cast<T>(f * g[k] + fprime_over_n * xv[k] * dot);
        }
      }
    }
  });
}

/**
 * Statistical pooling: [B,K,H,W] -> [B,2,K] (or [K,H,W] -> [2,K]).
 * Row 0 is the per-filter mean, row 1 the per-filter variance with the
 * H*W-1 denominator.
 */
template <class T>
Var<T> statistical_pool(const Var<T>& x) {
  if (x.value().rank() == 3) {
    const Shape& s = x.shape();
    Var<T> y = statistical_pool(reshape(x, Shape{1, s[0], s[1], s[2]}));
    return reshape(y, Shape{2, s[0]});
  }
  if (x.value().rank() != 4) throw DimensionError("statistical_pool input must be [B,K,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.value().dim(0), K = x.value().dim(1), HW = x.value().dim(2) * x.value().dim(3);
  if (HW < 2) throw DimensionError("statistical_pool needs H*W >= 2 for the variance, got H*W=" + std::to_string(HW));
  Tensor<T> y(Shape{B, 2, K});
  const Tensor<T>& xv = x.value();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      const T* p = xv.raw() + (b * K + k) * HW;
      double acc = 0;
      for (std::size_t i = 0; i < HW; ++i) acc += p[i];
      const double mu = acc / static_cast<double>(HW);
      double sq = 0;
      for (std::size_t i = 0; i < HW; ++i) sq += (p[i] - mu) * (p[i] - mu);
      y[(b * 2 + 0) * K + k] = static_cast<T>(mu);
      y[(b * 2 + 1) * K + k] = static_cast<T>(sq / static_cast<double>(HW - 1));
    }
  }
  return x.tape().record(std::move(y), {x.id()}, [B, K, HW](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    if (!t.requires_grad(in)) return;
    const auto& g = t.grad(self);
    const auto& xv = t.value(in);
    auto& gi = t.grad_buffer(in);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t k = 0; k < K; ++k) {
        const T* p = xv.raw() + (b * K + k) * HW;
        double acc = 0;
        for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        const double mu = acc / static_cast<double>(HW);
        const double gm = g[(b * 2 + 0) * K + k] / static_cast<double>(HW);
        const double gv = g[(b * 2 + 1) * K + k] * 2.0 / static_cast<double>(HW - 1);
        T* q = gi.raw() + (b * K + k) * HW;
        for (std::size_t i = 0; i < HW; ++i) q[i] += static_cast<T>(gm + gv * (p[i] - mu));
      }
    }
  });
}

/// Prediction vectors u_hat[b,i,j,:] = W[i,j] * u[b,i,:]; u [B,N,D], W [N,J,M,D].
template <class T>
Var<T> route_predict(const Var<T>& u, const Var<T>& w) {
  detail::require_same_tape(u, w);
  const Shape& us = u.shape();
  const Shape& ws = w.shape();
  if (us.size() != 3 || ws.size() != 4 || ws[0] != us[1] || ws[3] != us[2]) {
    throw DimensionError("route_predict expects u [B,N,D] and W [N,J,M,D], got " + shape_str(us) +
                         " and " + shape_str(ws));
  }
  const std::size_t B = us[0], N = us[1], D = us[2], J = ws[1], M = ws[2];
  Tensor<T> y(Shape{B, N, J, M});
  const Tensor<T>& uv = u.value();
  const Tensor<T>& wv = w.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t m = 0; m < M; ++m) {
          double acc = 0;
          for (std::size_t d = 0; d < D; ++d) acc += wv[((i * J + j) * M + m) * D + d] * uv[(b * N + i) * D + d];
          y[((b * N + i) * J + j) * M + m] = static_cast<T>(acc);
        }
  return u.tape().record(std::move(y), {u.id(), w.id()}, [B, N, D, J, M](Tape<T>& t, std::size_t self) {
    const auto& in = t.inputs(self);
    const auto& g = t.grad(self);
    const auto& uv = t.value(in[0]);
    const auto& wv = t.value(in[1]);
    Tensor<T>* gu = t.requires_grad(in[0]) ? &t.grad_buffer(in[0]) : nullptr;
    Tensor<T>* gw = t.requires_grad(in[1]) ? &t.grad_buffer(in[1]) : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < J; ++j)
          for (std::size_t m = 0; m < M; ++m) {
            const T gy = g[((b * N + i) * J + j) * M + m];
            for (std::size_t d = 0; d < D; ++d) {
              const std::size_t wi = ((i * J + j) * M + m) * D + d, ui = (b * N + i) * D + d;
              if (gu) (*gu)[ui] += gy * wv[wi];
              if (gw) (*gw)[wi] += gy * uv[ui];
            }
          }
  });
}

/// s[b,j,:] = sum_i c[b,i,j] * u_hat[b,i,j,:]; c [B,N,J], u_hat [B,N,J,M].
template <class T>
Var<T> weighted_sum(const Var<T>& c, const Var<T>& uhat) {
  detail::require_same_tape(c, uhat);
  const Shape& cs = c.shape();
  const Shape& us = uhat.shape();
  if (cs.size() != 3 || us.size() != 4 || cs[0] != us[0] || cs[1] != us[1] || cs[2] != us[2]) {
    throw DimensionError("weighted_sum expects c [B,N,J] and u_hat [B,N,J,M], got " + shape_str(cs) +
                         " and " + shape_str(us));
  }
  const std::size_t B = us[0], N = us[1], J = us[2], M = us[3];
  Tensor<T> y(Shape{B, J, M});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t m = 0; m < M; ++m) {
        double acc = 0;
        for (std::size_t i = 0; i < N; ++i) {
          acc += static_cast<double>(c.value()[(b * N + i) * J + j]) * uhat.value()[((b * N + i) * J + j) * M + m];
        }
        y[(b * J + j) * M + m] = static_cast<T>(acc);
      }
  return c.tape().record(std::move(y), {c.id(), uhat.id()}, [B, N, J, M](Tape<T>& t, std::size_t self) {
    const auto& in = t.inputs(self);
    const auto& g = t.grad(self);
    const auto& cv = t.value(in[0]);
    const auto& uv = t.value(in[1]);
    Tensor<T>* gc = t.requires_grad(in[0]) ? &t.grad_buffer(in[0]) : nullptr;
    Tensor<T>* gu = t.requires_grad(in[1]) ? &t.grad_buffer(in[1]) : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < J; ++j) {
          const std::size_t ci = (b * N + i) * J + j;
          double acc = 0;
          for (std::size_t m = 0; m < M; ++m) {
            const T gy = g[(b * J + j) * M + m];
            acc += static_cast<double>(gy) * uv[ci * M + m];
            if (gu) (*gu)[ci * M + m] += gy * cv[ci];
          }
          if (gc) (*gc)[ci] += static_cast<T>(acc);
        }
  });
}

/// a[b,i,j] = <u_hat[b,i,j,:], v[b,j,:]>.
template <class T>
Var<T> agreement(const Var<T>& uhat, const Var<T>& v) {
  detail::require_same_tape(uhat, v);
  const Shape& us = uhat.shape();
  const Shape& vs = v.shape();
  if (us.size() != 4 || vs.size() != 3 || vs[0] != us[0] || vs[1] != us[2] || vs[2] != us[3]) {
    throw DimensionError("agreement expects u_hat [B,N,J,M] and v [B,J,M], got " + shape_str(us) +
                         " and " + shape_str(vs));
  }
  const std::size_t B = us[0], N = us[1], J = us[2], M = us[3];
  Tensor<T> y(Shape{B, N, J});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        double acc = 0;
        for (std::size_t m = 0; m < M; ++m) {
          acc += static_cast<double>(uhat.value()[((b * N + i) * J + j) * M + m]) * v.value()[(b * J + j) * M + m];
        }
        y[(b * N + i) * J + j] = static_cast<T>(acc);
      }
  return uhat.tape().record(std::move(y), {uhat.id(), v.id()}, [B, N, J, M](Tape<T>& t, std::size_t self) {
    const auto& in = t.inputs(self);
    const auto& g = t.grad(self);
    const auto& uv = t.value(in[0]);
    const auto& vv = t.value(in[1]);
    Tensor<T>* gu = t.requires_grad(in[0]) ? &t.grad_buffer(in[0]) : nullptr;
    Tensor<T>* gv = t.requires_grad(in[1]) ? &t.grad_buffer(in[1]) : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < J; ++j) {
          const T gy = g[(b * N + i) * J + j];
          for (std::size_t m = 0; m < M; ++m) {
            const std::size_t ui = ((b * N + i) * J + j) * M + m, vi = (b * J + j) * M + m;
            if (gu) (*gu)[ui] += gy * vv[vi];
            if (gv) (*gv)[vi] += gy * uv[ui];
          }
        }
  });
}

/**
 * Mean negative log-likelihood of the labelled class, with probabilities
 * clamped to [clamp, 1-clamp]. For two classes this is the binary
 * cross-entropy on the second-class probability.
 */
template <class T>
Var<T> nll_loss(const Var<T>& probs, const std::vector<std::size_t>& labels, double clamp = 1e-7) {
  if (probs.value().rank() != 2) throw DimensionError("nll_loss expects probabilities [B,J], got " + shape_str(probs.shape()));
  const std::size_t B = probs.value().dim(0), J = probs.value().dim(1);
  if (labels.size() != B) throw DimensionError("nll_loss: " + std::to_string(labels.size()) + " labels for batch axis B=" + std::to_string(B));
  double acc = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= J) throw ParameterError("label " + std::to_string(labels[b]) + " out of range for " + std::to_string(J) + " classes");
    const double p = std::clamp(static_cast<double>(probs.value()[b * J + labels[b]]), clamp, 1.0 - clamp);
    acc -= std::log(p);
  }
  return probs.tape().record(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(B))), {probs.id()},
                             [labels, B, J, clamp](Tape<T>& t, std::size_t self) {
                               const std::size_t in = t.inputs(self)[0];
                               if (!t.requires_grad(in)) return;
                               const double g = t.grad(self)[0];
                               const auto& pv = t.value(in);
                               auto& gi = t.grad_buffer(in);
                               for (std::size_t b = 0; b < B; ++b) {
                                 const double p = pv[b * J + labels[b]];
                                 if (p < clamp || p > 1.0 - clamp) continue;
                                 gi[b * J + labels[b]] += static_cast<T>(-g / (p * static_cast<double>(B)));
                               }
                             });
}

}  // namespace capsfor
