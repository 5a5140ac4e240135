#pragma once

// Differentiable wrappers around the kernels. Each op computes its forward
// value with the plain kernel and records the matching backward rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "effmod/autodiff.hpp"
#include "effmod/kernels.hpp"

namespace effmod::ops {

namespace detail_ops {

template <class T>
std::span<const T> maybe_span(const Tape<T>& tape, Var v) {
  if (!v.valid()) return {};
  return tape.value(v).span();
}

}  // namespace detail_ops

/// conv2d with optional bias (pass an invalid Var for none).
template <class T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b, const ConvSpec& spec) {
  Tensor<T> out = effmod::conv2d(tape.value(x), tape.value(w), detail_ops::maybe_span(tape, b), spec);
  return tape.record(std::move(out), {x, w, b}, [x, w, b, spec](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(x)) t.accumulate(x, conv2d_grad_input(g, t.value(w), t.value(x).shape(), spec));
    if (t.requires_grad(w)) t.accumulate(w, conv2d_grad_weight(g, t.value(x), t.value(w).shape(), spec));
    if (t.requires_grad(b)) t.accumulate(b, channel_sum(g).reshaped(t.value(b).shape()));
  });
}

template <class T>
Var gelu(Tape<T>& tape, Var x) {
  return tape.record(effmod::gelu(tape.value(x)), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T> dx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = g[i] * gelu_derivative(xv[i]);
    t.accumulate(x, dx);
  });
}

template <class T>
Var sigmoid(Tape<T>& tape, Var x) {
  Tensor<T> out = effmod::sigmoid(tape.value(x));
  Tensor<T> saved = out;
  return tape.record(std::move(out), {x}, [x, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> dx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * saved[i] * (T(1) - saved[i]);
    t.accumulate(x, dx);
  });
}

template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, T eps) {
  LayerNormStats<T> stats;
  Tensor<T> out = effmod::layer_norm(tape.value(x), tape.value(gamma).span(), tape.value(beta).span(), eps, &stats);
  return tape.record(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, stats = std::move(stats)](Tape<T>& t, const Tensor<T>& g) {
                       auto grads = layer_norm_backward(g, t.value(x), t.value(gamma).span(), stats);
                       t.accumulate(x, grads.dx);
                       t.accumulate(gamma, grads.dgamma.reshaped(t.value(gamma).shape()));
                       t.accumulate(beta, grads.dbeta.reshaped(t.value(beta).shape()));
                     });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = elementwise(tape.value(a), tape.value(b), ElementwiseOp::add);
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = elementwise(tape.value(a), tape.value(b), ElementwiseOp::mul);
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a)) t.accumulate(a, elementwise(g, t.value(b), ElementwiseOp::mul));
    if (t.requires_grad(b)) t.accumulate(b, elementwise(g, t.value(a), ElementwiseOp::mul));
  });
}

namespace detail_ops {

inline std::size_t bcast_index(const Shape& full, const Shape& small, std::size_t i) {
  const std::size_t w = i % full.w;
  const std::size_t h = (i / full.w) % full.h;
  const std::size_t c = (i / full.plane()) % full.c;
  const std::size_t n = i / (full.plane() * full.c);
  return (((small.n == 1 ? 0 : n) * small.c + (small.c == 1 ? 0 : c)) * small.h + (small.h == 1 ? 0 : h)) *
             small.w +
         (small.w == 1 ? 0 : w);
}

}  // namespace detail_ops

/// a * b where every axis of b equals a's or is 1 (broadcast).
template <class T>
Var mul_broadcast(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  const Shape as = av.shape(), bs = bv.shape();
  for (std::size_t ax = 0; ax < 4; ++ax)
    effmod::detail::require(bs[ax] == as[ax] || bs[ax] == 1,
                            "mul_broadcast: cannot broadcast " + to_string(bs) + " to " + to_string(as));
  Tensor<T> out(as);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[detail_ops::bcast_index(as, bs, i)];
  return tape.record(std::move(out), {a, b}, [a, b, as, bs](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor<T> da(as);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * bv[detail_ops::bcast_index(as, bs, i)];
      t.accumulate(a, da);
    }
    if (t.requires_grad(b)) {
      Tensor<T> db(bs);
      for (std::size_t i = 0; i < g.size(); ++i) db[detail_ops::bcast_index(as, bs, i)] += g[i] * av[i];
      t.accumulate(b, db);
    }
  });
}

/// Same data viewed with a new shape.
template <class T>
Var reshape(Tape<T>& tape, Var x, Shape s) {
  const Shape orig = tape.value(x).shape();
  return tape.record(tape.value(x).reshaped(s), {x},
                     [x, orig](Tape<T>& t, const Tensor<T>& g) { t.accumulate(x, g.reshaped(orig)); });
}

/// Swaps axes 1 and 2: [n, a, b, w] -> [n, b, a, w]. Converts token-major
/// [n, t, c, 1] layouts to channel-major [n, c, t, 1] and back.
template <class T>
Tensor<T> swap_axes12(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> out(Shape{s.n, s.h, s.c, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t a = 0; a < s.c; ++a)
      for (std::size_t b = 0; b < s.h; ++b)
        for (std::size_t w = 0; w < s.w; ++w) out.at(n, b, a, w) = x.at(n, a, b, w);
  return out;
}

template <class T>
Var swap_axes12(Tape<T>& tape, Var x) {
  return tape.record(swap_axes12(tape.value(x)), {x},
                     [x](Tape<T>& t, const Tensor<T>& g) { t.accumulate(x, swap_axes12(g)); });
}

template <class T>
Var fuse(Tape<T>& tape, Var ctx, Var v, FusionMode mode, FuseOp op) {
  Tensor<T> out = fuse_modulate(tape.value(ctx), tape.value(v), mode, op);
  return tape.record(std::move(out), {ctx, v}, [ctx, v, mode, op](Tape<T>& t, const Tensor<T>& g) {
    auto grads = fuse_modulate_backward(g, t.value(ctx), t.value(v), mode, op);
    t.accumulate(ctx, grads.dctx);
    t.accumulate(v, grads.dv);
  });
}

template <class T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  return tape.record(effmod::global_avg_pool(tape.value(x)), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    const Shape s = t.value(x).shape();
    Tensor<T> dx(s);
    const T inv = T(1) / static_cast<T>(s.plane());
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const T v = g.at(n, c, 0, 0) * inv;
        T* p = dx.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) p[i] = v;
      }
    t.accumulate(x, dx);
  });
}

/// Sum of all elements, as a (1,1,1,1) tensor.
template <class T>
Var sum(Tape<T>& tape, Var x) {
  T s = 0;
  for (T v : tape.value(x).vec()) s += v;
  return tape.record(Tensor<T>(Shape{1, 1, 1, 1}, s), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, Tensor<T>(t.value(x).shape(), g[0]));
  });
}

/// sum(x * weights) for a fixed weight tensor; a random projection used to
/// reduce a tensor output to a scalar for gradient checks.
template <class T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights) {
  const Tensor<T>& xv = tape.value(x);
  effmod::detail::require(weights.shape() == xv.shape(), "weighted_sum: weight shape mismatch");
  T s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
  return tape.record(Tensor<T>(Shape{1, 1, 1, 1}, s), {x}, [x, weights](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> dx(weights.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[0] * weights[i];
    t.accumulate(x, dx);
  });
}

/// Multiplies sample i of x by factors[i] (stochastic depth keep/drop scaling).
template <class T>
Var scale_samples(Tape<T>& tape, Var x, std::vector<T> factors) {
  const Tensor<T>& xv = tape.value(x);
  effmod::detail::require(factors.size() == xv.n(), "scale_samples: one factor per sample required");
  const std::size_t per = xv.size() / std::max<std::size_t>(1, xv.n());
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factors[i / per];
  return tape.record(std::move(out), {x}, [x, factors = std::move(factors), per](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> dx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * factors[i / per];
    t.accumulate(x, dx);
  });
}

/// Multi-head scaled dot-product attention over the h*w positions of a
/// channel-major qkv tensor [n, 3c, h, w] (channels ordered q | k | v, each
/// split into `heads` contiguous groups). Returns [n, c, h, w].
template <class T>
Var multi_head_attention(Tape<T>& tape, Var qkv, std::size_t heads) {
  const Tensor<T>& in = tape.value(qkv);
  const Shape s = in.shape();
  effmod::detail::require(s.c % 3 == 0, "attention: qkv channels not divisible by 3");
  const std::size_t c = s.c / 3;
  effmod::detail::require(heads > 0 && c % heads == 0,
                          "attention: channels " + std::to_string(c) + " not divisible by heads " +
                              std::to_string(heads));
  const std::size_t dh = c / heads, tokens = s.plane();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  // q, k, v as [n*heads, 1, dh, t] matrix batches.
  const Shape mat{s.n * heads, 1, dh, tokens};
  auto slice = [&](const Tensor<T>& src, std::size_t part) {
    Tensor<T> m(mat);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t d = 0; d < dh; ++d)
          std::copy_n(src.plane(n, part * c + hd * dh + d), tokens, m.plane(n * heads + hd, 0) + d * tokens);
    return m;
  };
  Tensor<T> q = slice(in, 0), k = slice(in, 1), v = slice(in, 2);
  // scores [b, 1, t, t] = scale * q^T k
  Tensor<T> scores = batched_matmul(transpose_last2(q), k);
  for (T& e : scores.vec()) e *= scale;
  Tensor<T> attn = softmax(scores, 3);
  // out^T [b, 1, t, dh] = attn * v^T
  Tensor<T> out_t = batched_matmul(attn, transpose_last2(v));
  Tensor<T> out(Shape{s.n, c, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const T* src = out_t.plane(n * heads + hd, 0);
      for (std::size_t d = 0; d < dh; ++d) {
        T* dst = out.plane(n, hd * dh + d);
        for (std::size_t i = 0; i < tokens; ++i) dst[i] = src[i * dh + d];
      }
    }
  return tape.record(
      std::move(out), {qkv},
      [qkv, s, c, heads, dh, tokens, scale, q = std::move(q), k = std::move(k), v = std::move(v),
       attn = std::move(attn)](Tape<T>& t, const Tensor<T>& g) {
        const std::size_t B = s.n * heads;
        // dO^T [b, 1, t, dh]
        Tensor<T> dout_t(Shape{B, 1, tokens, dh});
        for (std::size_t n = 0; n < s.n; ++n)
          for (std::size_t hd = 0; hd < heads; ++hd) {
            T* dst = dout_t.plane(n * heads + hd, 0);
            for (std::size_t d = 0; d < dh; ++d) {
              const T* src = g.plane(n, hd * dh + d);
              for (std::size_t i = 0; i < tokens; ++i) dst[i * dh + d] = src[i];
            }
          }
        // dA = dO^T v  -> [b,1,t,t];  dV^T = A^T dO^T -> [b,1,t,dh]
        Tensor<T> dattn = batched_matmul(dout_t, v);
        Tensor<T> dv_t = batched_matmul(transpose_last2(attn), dout_t);
        // softmax backward along rows
        Tensor<T> dscores(attn.shape());
        for (std::size_t row = 0; row < B * tokens; ++row) {
          const T* a = attn.data() + row * tokens;
          const T* da = dattn.data() + row * tokens;
          T dot = 0;
          for (std::size_t j = 0; j < tokens; ++j) dot += a[j] * da[j];
          T* ds = dscores.data() + row * tokens;
          for (std::size_t j = 0; j < tokens; ++j) ds[j] = a[j] * (da[j] - dot) * scale;
        }
        // scores = q^T k: dq^T = dS k^T -> [b,1,t,dh]; dk = q dS -> [b,1,dh,t]
        Tensor<T> dq_t = batched_matmul(dscores, transpose_last2(k));
        Tensor<T> dk = batched_matmul(q, dscores);
        Tensor<T> dqkv(Shape{s.n, 3 * c, s.h, s.w});
        for (std::size_t n = 0; n < s.n; ++n)
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t b = n * heads + hd;
            for (std::size_t d = 0; d < dh; ++d) {
              T* gq = dqkv.plane(n, hd * dh + d);
              T* gk = dqkv.plane(n, c + hd * dh + d);
              T* gv = dqkv.plane(n, 2 * c + hd * dh + d);
              const T* dqs = dq_t.plane(b, 0);
              const T* dks = dk.plane(b, 0) + d * tokens;
              const T* dvs = dv_t.plane(b, 0);
              for (std::size_t i = 0; i < tokens; ++i) {
                gq[i] = dqs[i * dh + d];
                gk[i] = dks[i];
                gv[i] = dvs[i * dh + d];
              }
            }
          }
        t.accumulate(qkv, dqkv);
      });
}

/// Mean softmax cross-entropy of logits [n, classes, 1, 1] against labels.
template <class T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::vector<std::size_t> labels) {
  const Tensor<T>& z = tape.value(logits);
  const std::size_t n = z.n(), k = z.c();
  effmod::detail::require(labels.size() == n, "cross_entropy: one label per sample required");
  Tensor<T> prob = softmax(z.reshaped(Shape{n, k, 1, 1}), 1);
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    effmod::detail::require(labels[i] < k, "cross_entropy: label out of range");
    const T m = *std::max_element(z.data() + i * k, z.data() + (i + 1) * k);
    T lse = 0;
    for (std::size_t j = 0; j < k; ++j) lse += std::exp(z[i * k + j] - m);
    loss += std::log(lse) + m - z[i * k + labels[i]];
  }
  loss /= static_cast<T>(n);
  return tape.record(Tensor<T>(Shape{1, 1, 1, 1}, loss), {logits},
                     [logits, labels = std::move(labels), prob = std::move(prob), n, k](Tape<T>& t,
                                                                                        const Tensor<T>& g) {
                       Tensor<T> dz(t.value(logits).shape());
                       const T scale = g[0] / static_cast<T>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < k; ++j)
                           dz[i * k + j] = (prob[i * k + j] - (j == labels[i] ? T(1) : T(0))) * scale;
                       t.accumulate(logits, dz);
                     });
}

}  // namespace effmod::ops
