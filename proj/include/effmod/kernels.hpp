#pragma once

// Forward (and matching backward) numerical kernels over NCHW tensors.
// Every kernel accumulates each output element in a fixed order, so results
// do not depend on the worker budget.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "effmod/errors.hpp"
#include "effmod/parallel.hpp"
#include "effmod/tensor.hpp"

namespace effmod {

namespace detail {

template <class T>
void check_finite(const Tensor<T>& t, const char* kernel) {
#ifdef EFFMOD_VALIDATE
  if (!t.all_finite()) throw NumericalError(std::string("non-finite value produced by ") + kernel);
#else
  (void)t;
  (void)kernel;
#endif
}

inline std::string dim_mismatch(const char* what, std::size_t got, std::size_t want) {
  return std::string(what) + " is " + std::to_string(got) + ", expected " + std::to_string(want);
}

}  // namespace detail

/// Geometry of a 2-D convolution. Padding is zero padding, applied
/// symmetrically on every side.
struct ConvSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  std::size_t padding = 0;

  /// Padding that keeps spatial extents at stride 1: d*(k-1)/2 per side.
  static ConvSpec same(std::size_t kernel, std::size_t dilation = 1, std::size_t groups = 1,
                       std::size_t stride = 1) {
    detail::require_config(kernel > 0 && kernel % 2 == 1,
                           "\"same\" padding requires an odd kernel, got " + std::to_string(kernel));
    return ConvSpec{kernel, stride, dilation, groups, dilation * (kernel - 1) / 2};
  }

  static ConvSpec pointwise() { return ConvSpec{}; }

  static ConvSpec depthwise(std::size_t kernel, std::size_t channels, std::size_t dilation = 1) {
    return same(kernel, dilation, channels);
  }

  bool is_pointwise() const {
    return kernel == 1 && stride == 1 && dilation == 1 && groups == 1 && padding == 0;
  }

  /// Output extent along one spatial axis, or throws if the input is too small.
  std::size_t out_extent(std::size_t in, const char* axis) const {
    const std::size_t span = dilation * (kernel - 1) + 1;
    detail::require(in + 2 * padding >= span,
                    std::string("conv2d: input ") + axis + " " + std::to_string(in) +
                        " too small for kernel " + std::to_string(kernel) + " dilation " +
                        std::to_string(dilation) + " padding " + std::to_string(padding));
    return (in + 2 * padding - span) / stride + 1;
  }

  void validate() const {
    detail::require_config(kernel > 0 && stride > 0 && dilation > 0 && groups > 0,
                           "conv2d: kernel, stride, dilation and groups must be positive");
  }
};

/// Shape produced by conv2d for input `x` and `c_out` filters.
inline Shape conv2d_out_shape(const Shape& x, std::size_t c_out, const ConvSpec& spec) {
  return Shape{x.n, c_out, spec.out_extent(x.h, "height"), spec.out_extent(x.w, "width")};
}

namespace detail {

inline void check_conv(const Shape& x, const Shape& w, std::size_t bias_len, const ConvSpec& spec) {
  spec.validate();
  require(x.c % spec.groups == 0, dim_mismatch("conv2d: input channels mod groups", x.c % spec.groups, 0));
  require(w.n % spec.groups == 0,
          dim_mismatch("conv2d: output channels mod groups", w.n % spec.groups, 0));
  require(w.c == x.c / spec.groups, dim_mismatch("conv2d: weight in-channels (dim 1)", w.c, x.c / spec.groups));
  require(w.h == spec.kernel, dim_mismatch("conv2d: weight kernel height (dim 2)", w.h, spec.kernel));
  require(w.w == spec.kernel, dim_mismatch("conv2d: weight kernel width (dim 3)", w.w, spec.kernel));
  require(bias_len == 0 || bias_len == w.n, dim_mismatch("conv2d: bias length", bias_len, w.n));
}

/// Valid [lo, hi) range of output columns whose input column ox*s + off lies in [0, extent).
inline void valid_range(std::ptrdiff_t off, std::size_t stride, std::size_t extent, std::size_t out,
                        std::size_t& lo, std::size_t& hi) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t first = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t last = (static_cast<std::ptrdiff_t>(extent) - 1 - off);
  last = last < 0 ? -1 : last / s;
  first = std::min<std::ptrdiff_t>(first, static_cast<std::ptrdiff_t>(out));
  last = std::min<std::ptrdiff_t>(last, static_cast<std::ptrdiff_t>(out) - 1);
  lo = static_cast<std::size_t>(first);
  hi = last < first ? lo : static_cast<std::size_t>(last + 1);
}

}  // namespace detail

/// 2-D cross-correlation. `w` is [c_out, c_in/groups, k, k]; `bias` is empty or
/// c_out long. Each output element is accumulated over (in-channel, ky, kx) in
/// ascending order, then the bias is added.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::span<const T> bias, const ConvSpec& spec) {
  const Shape& xs = x.shape();
  detail::check_conv(xs, w.shape(), bias.size(), spec);
  const Shape os = conv2d_out_shape(xs, w.n(), spec);
  Tensor<T> out(os);
  const std::size_t c_out = os.c;
  const std::size_t cin_g = xs.c / spec.groups;
  const std::size_t cout_g = c_out / spec.groups;
  const std::size_t plane_out = os.plane();

  if (spec.is_pointwise()) {
    const std::size_t blocks = (c_out + 3) / 4;
    parallel_for(xs.n * blocks, 4 * xs.c * plane_out, [&](std::size_t job) {
      const std::size_t n = job / blocks;
      const std::size_t o0 = (job % blocks) * 4;
      const std::size_t oc = std::min<std::size_t>(4, c_out - o0);
      T* acc[4];
      for (std::size_t j = 0; j < oc; ++j) acc[j] = out.plane(n, o0 + j);
      for (std::size_t i = 0; i < xs.c; ++i) {
        const T* xr = x.plane(n, i);
        if (oc == 4) {
          const T w0 = w[(o0 + 0) * xs.c + i], w1 = w[(o0 + 1) * xs.c + i];
          const T w2 = w[(o0 + 2) * xs.c + i], w3 = w[(o0 + 3) * xs.c + i];
          T* a0 = acc[0];
          T* a1 = acc[1];
          T* a2 = acc[2];
          T* a3 = acc[3];
          for (std::size_t p = 0; p < plane_out; ++p) {
            const T xv = xr[p];
            a0[p] += w0 * xv;
            a1[p] += w1 * xv;
            a2[p] += w2 * xv;
            a3[p] += w3 * xv;
          }
        } else {
          for (std::size_t j = 0; j < oc; ++j) {
            const T wv = w[(o0 + j) * xs.c + i];
            T* a = acc[j];
            for (std::size_t p = 0; p < plane_out; ++p) a[p] += wv * xr[p];
          }
        }
      }
      if (!bias.empty()) {
        for (std::size_t j = 0; j < oc; ++j) {
          const T b = bias[o0 + j];
          for (std::size_t p = 0; p < plane_out; ++p) acc[j][p] += b;
        }
      }
    });
    detail::check_finite(out, "conv2d");
    return out;
  }

  const std::size_t k = spec.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  parallel_for(xs.n * c_out, cin_g * k * k * plane_out, [&](std::size_t job) {
    const std::size_t n = job / c_out;
    const std::size_t o = job % c_out;
    const std::size_t grp = o / cout_g;
    T* acc = out.plane(n, o);
    for (std::size_t ic = 0; ic < cin_g; ++ic) {
      const T* xin = x.plane(n, grp * cin_g + ic);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t yoff = static_cast<std::ptrdiff_t>(ky * spec.dilation) - pad;
        std::size_t oy_lo, oy_hi;
        detail::valid_range(yoff, spec.stride, xs.h, os.h, oy_lo, oy_hi);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wv = w.at(o, ic, ky, kx);
          const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(kx * spec.dilation) - pad;
          std::size_t ox_lo, ox_hi;
          detail::valid_range(xoff, spec.stride, xs.w, os.w, ox_lo, ox_hi);
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            const T* row = xin + (static_cast<std::ptrdiff_t>(oy * spec.stride) + yoff) *
                                     static_cast<std::ptrdiff_t>(xs.w);
            T* arow = acc + oy * os.w;
            if (spec.stride == 1) {
              const T* src = row + xoff;
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) arow[ox] += wv * src[ox];
            } else {
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                arow[ox] += wv * row[static_cast<std::ptrdiff_t>(ox * spec.stride) + xoff];
            }
          }
        }
      }
    }
    if (!bias.empty()) {
      const T b = bias[o];
      for (std::size_t p = 0; p < plane_out; ++p) acc[p] += b;
    }
  });
  detail::check_finite(out, "conv2d");
  return out;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec) {
  return conv2d(x, w, std::span<const T>{}, spec);
}

/// Gradient of conv2d with respect to its input.
template <class T>
Tensor<T> conv2d_grad_input(const Tensor<T>& dy, const Tensor<T>& w, const Shape& x_shape,
                            const ConvSpec& spec) {
  detail::check_conv(x_shape, w.shape(), 0, spec);
  const Shape& os = dy.shape();
  detail::require(os == conv2d_out_shape(x_shape, w.n(), spec), "conv2d backward: gradient shape mismatch");
  Tensor<T> dx(x_shape);
  const std::size_t cin_g = x_shape.c / spec.groups;
  const std::size_t cout_g = os.c / spec.groups;
  const std::size_t k = spec.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  parallel_for(x_shape.n * x_shape.c, cout_g * k * k * os.plane(), [&](std::size_t job) {
    const std::size_t n = job / x_shape.c;
    const std::size_t i = job % x_shape.c;
    const std::size_t grp = i / cin_g;
    const std::size_t ic = i % cin_g;
    T* dxp = dx.plane(n, i);
    for (std::size_t oc = 0; oc < cout_g; ++oc) {
      const std::size_t o = grp * cout_g + oc;
      const T* g = dy.plane(n, o);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t yoff = static_cast<std::ptrdiff_t>(ky * spec.dilation) - pad;
        std::size_t oy_lo, oy_hi;
        detail::valid_range(yoff, spec.stride, x_shape.h, os.h, oy_lo, oy_hi);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wv = w.at(o, ic, ky, kx);
          const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(kx * spec.dilation) - pad;
          std::size_t ox_lo, ox_hi;
          detail::valid_range(xoff, spec.stride, x_shape.w, os.w, ox_lo, ox_hi);
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            T* row = dxp + (static_cast<std::ptrdiff_t>(oy * spec.stride) + yoff) *
                               static_cast<std::ptrdiff_t>(x_shape.w);
            const T* grow = g + oy * os.w;
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
              row[static_cast<std::ptrdiff_t>(ox * spec.stride) + xoff] += wv * grow[ox];
          }
        }
      }
    }
  });
  return dx;
}

/// Gradient of conv2d with respect to its weight.
template <class T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& dy, const Tensor<T>& x, const Shape& w_shape,
                             const ConvSpec& spec) {
  const Shape& xs = x.shape();
  detail::check_conv(xs, w_shape, 0, spec);
  const Shape& os = dy.shape();
  detail::require(os == conv2d_out_shape(xs, w_shape.n, spec), "conv2d backward: gradient shape mismatch");
  Tensor<T> dw(w_shape);
  const std::size_t cin_g = xs.c / spec.groups;
  const std::size_t cout_g = os.c / spec.groups;
  const std::size_t k = spec.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  parallel_for(os.c, xs.n * cin_g * k * k * os.plane(), [&](std::size_t o) {
    const std::size_t grp = o / cout_g;
    for (std::size_t ic = 0; ic < cin_g; ++ic) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t yoff = static_cast<std::ptrdiff_t>(ky * spec.dilation) - pad;
        std::size_t oy_lo, oy_hi;
        detail::valid_range(yoff, spec.stride, xs.h, os.h, oy_lo, oy_hi);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(kx * spec.dilation) - pad;
          std::size_t ox_lo, ox_hi;
          detail::valid_range(xoff, spec.stride, xs.w, os.w, ox_lo, ox_hi);
          T sum = 0;
          for (std::size_t n = 0; n < xs.n; ++n) {
            const T* g = dy.plane(n, o);
            const T* xin = x.plane(n, grp * cin_g + ic);
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const T* row = xin + (static_cast<std::ptrdiff_t>(oy * spec.stride) + yoff) *
                                       static_cast<std::ptrdiff_t>(xs.w);
              const T* grow = g + oy * os.w;
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                sum += grow[ox] * row[static_cast<std::ptrdiff_t>(ox * spec.stride) + xoff];
            }
          }
          dw.at(o, ic, ky, kx) = sum;
        }
      }
    }
  });
  return dw;
}

/// Per-channel sum of dy over batch and space: the gradient of an additive bias.
template <class T>
Tensor<T> channel_sum(const Tensor<T>& dy) {
  const Shape& s = dy.shape();
  Tensor<T> db(Shape{s.c, 1, 1, 1});
  for (std::size_t c = 0; c < s.c; ++c) {
    T sum = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* g = dy.plane(n, c);
      for (std::size_t p = 0; p < s.plane(); ++p) sum += g[p];
    }
    db[c] = sum;
  }
  return db;
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

/// d/dx GELU = Phi(x) + x phi(x).
template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu(x[i]);
  detail::check_finite(out, "gelu");
  return out;
}

template <class T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-position statistics kept by layer_norm for its backward pass.
template <class T>
struct LayerNormStats {
  Tensor<T> mean;  // [n, 1, h, w]
  Tensor<T> rstd;  // [n, 1, h, w]
};

/// Layer normalization over the channel axis at every (n, y, x) position,
/// using the biased variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps,
                     LayerNormStats<T>* stats = nullptr) {
  const Shape& s = x.shape();
  detail::require(s.c > 0, "layer_norm: channel count is 0");
  detail::require(gamma.size() == s.c, detail::dim_mismatch("layer_norm: gamma length", gamma.size(), s.c));
  detail::require(beta.size() == s.c, detail::dim_mismatch("layer_norm: beta length", beta.size(), s.c));
  detail::require(eps > 0, "layer_norm: eps must be positive");
  const std::size_t P = s.plane();
  Tensor<T> out(s);
  Tensor<T> mean(Shape{s.n, 1, s.h, s.w});
  Tensor<T> rstd(Shape{s.n, 1, s.h, s.w});
  const T inv_c = T(1) / static_cast<T>(s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    T* mu = mean.plane(n, 0);
    T* rs = rstd.plane(n, 0);
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xp = x.plane(n, c);
      for (std::size_t p = 0; p < P; ++p) mu[p] += xp[p];
    }
    for (std::size_t p = 0; p < P; ++p) mu[p] *= inv_c;
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xp = x.plane(n, c);
      for (std::size_t p = 0; p < P; ++p) {
        const T d = xp[p] - mu[p];
        rs[p] += d * d;
      }
    }
    for (std::size_t p = 0; p < P; ++p) rs[p] = T(1) / std::sqrt(rs[p] * inv_c + eps);
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xp = x.plane(n, c);
      T* op = out.plane(n, c);
      for (std::size_t p = 0; p < P; ++p) op[p] = (xp[p] - mu[p]) * rs[p] * gamma[c] + beta[c];
    }
  }
  if (stats) *stats = LayerNormStats<T>{std::move(mean), std::move(rstd)};
  detail::check_finite(out, "layer_norm");
  return out;
}

/// Gradients of layer_norm: (dx, dgamma, dbeta).
template <class T>
struct LayerNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

template <class T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& x, std::span<const T> gamma,
                                      const LayerNormStats<T>& stats) {
  const Shape& s = x.shape();
  const std::size_t P = s.plane();
  LayerNormGrads<T> g{Tensor<T>(s), Tensor<T>(Shape{s.c, 1, 1, 1}), Tensor<T>(Shape{s.c, 1, 1, 1})};
  const T inv_c = T(1) / static_cast<T>(s.c);
  std::vector<T> mean_g(P), mean_gx(P);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* mu = stats.mean.plane(n, 0);
    const T* rs = stats.rstd.plane(n, 0);
    std::fill(mean_g.begin(), mean_g.end(), T(0));
    std::fill(mean_gx.begin(), mean_gx.end(), T(0));
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xp = x.plane(n, c);
      const T* gp = dy.plane(n, c);
      T dgam = 0, dbet = 0;
      for (std::size_t p = 0; p < P; ++p) {
        const T xhat = (xp[p] - mu[p]) * rs[p];
        const T gh = gp[p] * gamma[c];
        mean_g[p] += gh;
        mean_gx[p] += gh * xhat;
        dgam += gp[p] * xhat;
        dbet += gp[p];
      }
      g.dgamma[c] += dgam;
      g.dbeta[c] += dbet;
    }
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xp = x.plane(n, c);
      const T* gp = dy.plane(n, c);
      T* dxp = g.dx.plane(n, c);
      for (std::size_t p = 0; p < P; ++p) {
        const T xhat = (xp[p] - mu[p]) * rs[p];
        dxp[p] = rs[p] * (gp[p] * gamma[c] - mean_g[p] * inv_c - xhat * mean_gx[p] * inv_c);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Softmax and batched matmul

/// Softmax along `axis` (0..3) with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < 4, "softmax: axis " + std::to_string(axis) + " out of range");
  const auto d = x.shape().dims();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= d[i];
  for (std::size_t i = axis + 1; i < 4; ++i) inner *= d[i];
  const std::size_t len = d[axis];
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) m = std::max(m, x[base + j * inner]);
      T sum = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(x[base + j * inner] - m);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= sum;
    }
  }
  detail::check_finite(out, "softmax");
  return out;
}

/// For every (n, c) slice, multiplies the h x w matrices: [n,c,m,k] x [n,c,k,p] -> [n,c,m,p].
template <class T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  detail::require(as.n == bs.n, detail::dim_mismatch("batched_matmul: batch dim 0", bs.n, as.n));
  detail::require(as.c == bs.c, detail::dim_mismatch("batched_matmul: batch dim 1", bs.c, as.c));
  detail::require(as.w == bs.h, detail::dim_mismatch("batched_matmul: inner dimension of b", bs.h, as.w));
  const std::size_t M = as.h, K = as.w, N = bs.w;
  Tensor<T> out(Shape{as.n, as.c, M, N});
  parallel_for(as.n * as.c, M * K * N, [&](std::size_t batch) {
    const T* A = a.data() + batch * M * K;
    const T* B = b.data() + batch * K * N;
    T* C = out.data() + batch * M * N;
    for (std::size_t i = 0; i < M; ++i) {
      T* crow = C + i * N;
      for (std::size_t kk = 0; kk < K; ++kk) {
        const T av = A[i * K + kk];
        const T* brow = B + kk * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
    }
  });
  detail::check_finite(out, "batched_matmul");
  return out;
}

/// Swaps the last two axes: [n,c,h,w] -> [n,c,w,h].
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  const Shape& s = a.shape();
  Tensor<T> out(Shape{s.n, s.c, s.w, s.h});
  for (std::size_t b = 0; b < s.n * s.c; ++b) {
    const T* src = a.data() + b * s.h * s.w;
    T* dst = out.data() + b * s.h * s.w;
    for (std::size_t i = 0; i < s.h; ++i)
      for (std::size_t j = 0; j < s.w; ++j) dst[j * s.h + i] = src[i * s.w + j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Modulation fusion

/// How a c-channel context is broadcast against an r*c-channel value tensor.
enum class FusionMode {
  repeat,   ///< materialize the context tiled r times along channels, then multiply
  reshape,  ///< index the value tensor as an (r, c) grid without materializing
};

/// Fusion arithmetic: modulation (product) or the summation ablation.
enum class FuseOp { mul, sum };

inline const char* to_string(FusionMode m) { return m == FusionMode::repeat ? "repeat" : "reshape"; }
inline const char* to_string(FuseOp op) { return op == FuseOp::mul ? "mul" : "sum"; }

namespace detail {

template <class T>
std::size_t fuse_ratio(const Shape& ctx, const Shape& v) {
  require(ctx.n == v.n && ctx.h == v.h && ctx.w == v.w,
          "fuse_modulate: ctx " + to_string(ctx) + " and v " + to_string(v) + " differ in batch/spatial extents");
  require(ctx.c > 0 && v.c % ctx.c == 0,
          "fuse_modulate: v channels " + std::to_string(v.c) + " not a multiple of ctx channels " +
              std::to_string(ctx.c));
  return v.c / ctx.c;
}

template <class T>
T fuse_apply(T ctx, T v, FuseOp op) {
  return op == FuseOp::mul ? v * ctx : v + ctx;
}

}  // namespace detail

/// ctx channels tiled r times: channel i of the result is ctx channel i mod c.
template <class T>
Tensor<T> repeat_channels(const Tensor<T>& ctx, std::size_t r) {
  const Shape& s = ctx.shape();
  Tensor<T> out(Shape{s.n, s.c * r, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t c = 0; c < s.c; ++c)
        std::copy_n(ctx.plane(n, c), s.plane(), out.plane(n, j * s.c + c));
  return out;
}

/// Inverse of repeat_channels for gradients: sums the r tiles (tile 0 first).
template <class T>
Tensor<T> fold_channels(const Tensor<T>& tiled, std::size_t c) {
  const Shape& s = tiled.shape();
  const std::size_t r = s.c / c;
  Tensor<T> out(Shape{s.n, c, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* src = tiled.plane(n, j * c + ch);
        T* dst = out.plane(n, ch);
        for (std::size_t p = 0; p < s.plane(); ++p) dst[p] += src[p];
      }
  return out;
}

/// Output channel i = v[i] (op) ctx[i mod c]. Both modes give bit-identical results.
template <class T>
Tensor<T> fuse_modulate(const Tensor<T>& ctx, const Tensor<T>& v, FusionMode mode, FuseOp op = FuseOp::mul) {
  const std::size_t r = detail::fuse_ratio<T>(ctx.shape(), v.shape());
  const Shape& vs = v.shape();
  Tensor<T> out(vs);
  if (mode == FusionMode::repeat) {
    const Tensor<T> tiled = repeat_channels(ctx, r);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::fuse_apply(tiled[i], v[i], op);
  } else {
    const std::size_t c = ctx.c(), P = vs.plane();
    for (std::size_t n = 0; n < vs.n; ++n)
      for (std::size_t j = 0; j < r; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* cp = ctx.plane(n, ch);
          const T* vp = v.plane(n, j * c + ch);
          T* op_ = out.plane(n, j * c + ch);
          for (std::size_t p = 0; p < P; ++p) op_[p] = detail::fuse_apply(cp[p], vp[p], op);
        }
  }
  detail::check_finite(out, "fuse_modulate");
  return out;
}

/// Gradients of fuse_modulate with respect to (ctx, v).
template <class T>
struct FuseGrads {
  Tensor<T> dctx;
  Tensor<T> dv;
};

template <class T>
FuseGrads<T> fuse_modulate_backward(const Tensor<T>& dy, const Tensor<T>& ctx, const Tensor<T>& v,
                                    FusionMode mode, FuseOp op = FuseOp::mul) {
  const std::size_t r = detail::fuse_ratio<T>(ctx.shape(), v.shape());
  const std::size_t c = ctx.c();
  const Shape& vs = v.shape();
  FuseGrads<T> g{Tensor<T>(ctx.shape()), Tensor<T>(vs)};
  if (mode == FusionMode::repeat) {
    const Tensor<T> tiled = repeat_channels(ctx, r);
    Tensor<T> dtiled(vs);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      g.dv[i] = op == FuseOp::mul ? dy[i] * tiled[i] : dy[i];
      dtiled[i] = op == FuseOp::mul ? dy[i] * v[i] : dy[i];
    }
    g.dctx = fold_channels(dtiled, c);
  } else {
    const std::size_t P = vs.plane();
    for (std::size_t n = 0; n < vs.n; ++n)
      for (std::size_t j = 0; j < r; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* cp = ctx.plane(n, ch);
          const T* vp = v.plane(n, j * c + ch);
          const T* gp = dy.plane(n, j * c + ch);
          T* dvp = g.dv.plane(n, j * c + ch);
          T* dcp = g.dctx.plane(n, ch);
          for (std::size_t p = 0; p < P; ++p) {
            dvp[p] = op == FuseOp::mul ? gp[p] * cp[p] : gp[p];
            dcp[p] += op == FuseOp::mul ? gp[p] * vp[p] : gp[p];
          }
        }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling and elementwise

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.plane() > 0, "global_avg_pool: empty spatial extent");
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const T inv = T(1) / static_cast<T>(s.plane());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = x.plane(n, c);
      T sum = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) sum += p[i];
      out.at(n, c, 0, 0) = sum * inv;
    }
  return out;
}

enum class ElementwiseOp { mul, add };

template <class T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, ElementwiseOp op) {
  detail::require(a.shape() == b.shape(),
                  "elementwise: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out(a.shape());
  if (op == ElementwiseOp::mul)
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  else
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  detail::check_finite(out, "elementwise");
  return out;
}

}  // namespace effmod
