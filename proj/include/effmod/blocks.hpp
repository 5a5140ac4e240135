#pragma once

// Forward definitions of the modulation block and its relatives:
//   EfficientMod   p( fuse( g(gelu(DW_k(f(x)))), v(x) ) )
//   VAN            p( g(DW_{7,3}(DW_{5,1}(f(x)))) * f(x) ),  f = gelu(linear)
//   Focal context  g( sum_l gelu(DW_{k_l}(f(x))) * z_l(f(x)) )
//   MBConv         project(gelu(DW_k(gelu(expand(x)))))
//   SE             x * sigmoid(W2(gelu(W1(GAP(x)))))
//   Attention      pre-norm multi-head self-attention + pre-norm GELU MLP
// plus the residual wrapper (layer norm, layer scale, stochastic depth) and
// patch embedding. Every block is written once against Tape<T>; passing a
// const bundle (or a non-recording tape) gives plain inference.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "effmod/layers.hpp"

namespace effmod {

// ---------------------------------------------------------------------------
// EfficientMod

struct EfficientModConfig {
  std::size_t dim = 0;
  std::size_t out_dim = 0;  ///< 0 means dim
  std::size_t expansion = 1;
  std::size_t kernel = 7;
  bool bias = true;

  std::size_t out() const { return out_dim == 0 ? dim : out_dim; }
};

template <class T>
struct EfficientModParams : ParamBundle<EfficientModParams, T> {
  EfficientModConfig cfg;
  ConvLayer<T> f;   ///< context entry, c -> c
  ConvLayer<T> dw;  ///< depthwise k x k on c channels
  ConvLayer<T> g;   ///< context exit, c -> c
  ConvLayer<T> v;   ///< value expansion, c -> r c
  ConvLayer<T> p;   ///< squeeze, r c -> c_out

  static EfficientModParams make(const EfficientModConfig& cfg) {
    detail::require_config(cfg.dim > 0 && cfg.expansion > 0, "EfficientMod: dim and expansion must be positive");
    const std::size_t c = cfg.dim, rc = cfg.expansion * cfg.dim;
    EfficientModParams b;
    b.cfg = cfg;
    b.f = ConvLayer<T>::pointwise(c, c, cfg.bias);
    b.dw = ConvLayer<T>::make(c, c, ConvSpec::depthwise(cfg.kernel, c), cfg.bias);
    b.g = ConvLayer<T>::pointwise(c, c, cfg.bias);
    b.v = ConvLayer<T>::pointwise(c, rc, cfg.bias);
    b.p = ConvLayer<T>::pointwise(rc, cfg.out(), cfg.bias);
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    f.visit(join_name(prefix, "f"), fn);
    dw.visit(join_name(prefix, "dw"), fn);
    g.visit(join_name(prefix, "g"), fn);
    v.visit(join_name(prefix, "v"), fn);
    p.visit(join_name(prefix, "p"), fn);
  }
};

namespace detail {

inline void require_channels(const char* block, std::size_t got, std::size_t want) {
  require(got == want, std::string(block) + ": input channels " + std::to_string(got) + ", block expects " +
                           std::to_string(want));
}

}  // namespace detail

/// Context branch g(gelu(DW(f(x)))); channel preserving.
template <class T, class P>
Var efficient_mod_context(Tape<T>& tape, Var x, P& params) {
  detail::require_channels("EfficientMod", tape.value(x).c(), params.cfg.dim);
  Var h = params.f(tape, x);
  h = params.dw(tape, h);
  h = ops::gelu(tape, h);
  return params.g(tape, h);
}

/// Full EfficientMod block. When `ctx_out` is non-null it receives the
/// context-branch output (used for context-map visualization).
template <class T, class P>
Var efficient_mod(Tape<T>& tape, Var x, P& params, FusionMode mode = FusionMode::repeat,
                  FuseOp op = FuseOp::mul, Var* ctx_out = nullptr) {
  Var ctx = efficient_mod_context(tape, x, params);
  if (ctx_out) *ctx_out = ctx;
  Var value = params.v(tape, x);
  Var fused = ops::fuse(tape, ctx, value, mode, op);
  return params.p(tape, fused);
}

template <class T>
Tensor<T> efficient_mod_block(const Tensor<T>& x, const EfficientModParams<T>& params,
                              FusionMode mode = FusionMode::repeat, FuseOp op = FuseOp::mul) {
  Tape<T> tape(false);
  return tape.value(efficient_mod(tape, tape.view(x), params, mode, op));
}

// ---------------------------------------------------------------------------
// VAN

struct VANConfig {
  std::size_t dim = 0;
  bool bias = true;
};

template <class T>
struct VANParams : ParamBundle<VANParams, T> {
  VANConfig cfg;
  ConvLayer<T> f;    ///< entry projection, followed by GELU
  ConvLayer<T> dw5;  ///< depthwise 5x5, dilation 1
  ConvLayer<T> dw7;  ///< depthwise 7x7, dilation 3
  ConvLayer<T> g;
  ConvLayer<T> p;

  static VANParams make(const VANConfig& cfg) {
    detail::require_config(cfg.dim > 0, "VAN: dim must be positive");
    const std::size_t c = cfg.dim;
    VANParams b;
    b.cfg = cfg;
    b.f = ConvLayer<T>::pointwise(c, c, cfg.bias);
    b.dw5 = ConvLayer<T>::make(c, c, ConvSpec::depthwise(5, c, 1), cfg.bias);
    b.dw7 = ConvLayer<T>::make(c, c, ConvSpec::depthwise(7, c, 3), cfg.bias);
    b.g = ConvLayer<T>::pointwise(c, c, cfg.bias);
    b.p = ConvLayer<T>::pointwise(c, c, cfg.bias);
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    f.visit(join_name(prefix, "f"), fn);
    dw5.visit(join_name(prefix, "dw5"), fn);
    dw7.visit(join_name(prefix, "dw7"), fn);
    g.visit(join_name(prefix, "g"), fn);
    p.visit(join_name(prefix, "p"), fn);
  }
};

/// VAN context branch g(DW_{7,3}(DW_{5,1}(h))) applied to an already projected h.
template <class T, class P>
Var van_context(Tape<T>& tape, Var h, P& params) {
  Var c = params.dw5(tape, h);
  c = params.dw7(tape, c);
  return params.g(tape, c);
}

template <class T, class P>
Var van(Tape<T>& tape, Var x, P& params) {
  detail::require_channels("VAN", tape.value(x).c(), params.cfg.dim);
  Var fx = ops::gelu(tape, params.f(tape, x));  // shared by both branches
  Var ctx = van_context(tape, fx, params);
  return params.p(tape, ops::mul(tape, ctx, fx));
}

template <class T>
Tensor<T> van_block(const Tensor<T>& x, const VANParams<T>& params) {
  Tape<T> tape(false);
  return tape.value(van(tape, tape.view(x), params));
}

// ---------------------------------------------------------------------------
// Focal modulation context

struct FocalConfig {
  std::size_t dim = 0;
  std::vector<std::size_t> kernels{3, 5};  ///< one depthwise kernel per level
  bool bias = true;
};

template <class T>
struct FocalParams : ParamBundle<FocalParams, T> {
  FocalConfig cfg;
  ConvLayer<T> f;
  std::vector<ConvLayer<T>> levels;  ///< depthwise k_l x k_l
  std::vector<ConvLayer<T>> gates;   ///< z_l: c -> 1
  ConvLayer<T> g;

  static FocalParams make(const FocalConfig& cfg) {
    detail::require_config(!cfg.kernels.empty(), "Focal: at least one level (L >= 1) is required");
    detail::require_config(cfg.dim > 0, "Focal: dim must be positive");
    for (std::size_t l = 1; l < cfg.kernels.size(); ++l)
      detail::require_config(cfg.kernels[l] > cfg.kernels[l - 1], "Focal: level kernels must strictly increase");
    const std::size_t c = cfg.dim;
    FocalParams b;
    b.cfg = cfg;
    b.f = ConvLayer<T>::pointwise(c, c, cfg.bias);
    for (std::size_t k : cfg.kernels) {
      b.levels.push_back(ConvLayer<T>::make(c, c, ConvSpec::depthwise(k, c), cfg.bias));
      b.gates.push_back(ConvLayer<T>::pointwise(c, 1, cfg.bias));
    }
    b.g = ConvLayer<T>::pointwise(c, c, cfg.bias);
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    f.visit(join_name(prefix, "f"), fn);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      levels[l].visit(join_name(prefix, "level" + std::to_string(l + 1)), fn);
      gates[l].visit(join_name(prefix, "gate" + std::to_string(l + 1)), fn);
    }
    g.visit(join_name(prefix, "g"), fn);
  }
};

/// Every level convolves the shared f(x) directly (levels are summed, not nested).
template <class T, class P>
Var focal_context(Tape<T>& tape, Var x, P& params) {
  detail::require_channels("Focal", tape.value(x).c(), params.cfg.dim);
  Var fx = params.f(tape, x);
  Var acc{};
  for (std::size_t l = 0; l < params.levels.size(); ++l) {
    Var level = ops::gelu(tape, params.levels[l](tape, fx));
    Var gate = params.gates[l](tape, fx);
    Var term = ops::mul_broadcast(tape, level, gate);
    acc = acc.valid() ? ops::add(tape, acc, term) : term;
  }
  return params.g(tape, acc);
}

template <class T>
Tensor<T> focal_ctx(const Tensor<T>& x, const FocalParams<T>& params) {
  Tape<T> tape(false);
  return tape.value(focal_context(tape, tape.view(x), params));
}

// ---------------------------------------------------------------------------
// MBConv

struct MBConvConfig {
  std::size_t dim = 0;
  std::size_t expansion = 6;
  std::size_t kernel = 3;
  bool bias = true;
};

template <class T>
struct MBConvParams : ParamBundle<MBConvParams, T> {
  MBConvConfig cfg;
  ConvLayer<T> expand;   ///< c -> r c
  ConvLayer<T> dw;       ///< depthwise on r c channels
  ConvLayer<T> project;  ///< r c -> c

  static MBConvParams make(const MBConvConfig& cfg) {
    detail::require_config(cfg.dim > 0 && cfg.expansion > 0, "MBConv: dim and expansion must be positive");
    const std::size_t c = cfg.dim, rc = cfg.expansion * cfg.dim;
    MBConvParams b;
    b.cfg = cfg;
    b.expand = ConvLayer<T>::pointwise(c, rc, cfg.bias);
    b.dw = ConvLayer<T>::make(rc, rc, ConvSpec::depthwise(cfg.kernel, rc), cfg.bias);
    b.project = ConvLayer<T>::pointwise(rc, c, cfg.bias);
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    expand.visit(join_name(prefix, "expand"), fn);
    dw.visit(join_name(prefix, "dw"), fn);
    project.visit(join_name(prefix, "project"), fn);
  }
};

template <class T, class P>
Var mbconv(Tape<T>& tape, Var x, P& params) {
  detail::require_channels("MBConv", tape.value(x).c(), params.cfg.dim);
  Var h = ops::gelu(tape, params.expand(tape, x));
  h = ops::gelu(tape, params.dw(tape, h));
  return params.project(tape, h);
}

template <class T>
Tensor<T> mbconv_block(const Tensor<T>& x, const MBConvParams<T>& params) {
  Tape<T> tape(false);
  return tape.value(mbconv(tape, tape.view(x), params));
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation

struct SEConfig {
  std::size_t dim = 0;
  std::size_t reduction = 4;
  bool bias = true;
};

template <class T>
struct SEParams : ParamBundle<SEParams, T> {
  SEConfig cfg;
  ConvLayer<T> reduce;  ///< c -> c / reduction
  ConvLayer<T> excite;  ///< c / reduction -> c

  static SEParams make(const SEConfig& cfg) {
    detail::require_config(cfg.reduction > 0 && cfg.dim % cfg.reduction == 0,
                           "SE: reduction " + std::to_string(cfg.reduction) + " does not divide channels " +
                               std::to_string(cfg.dim));
    SEParams b;
    b.cfg = cfg;
    b.reduce = ConvLayer<T>::pointwise(cfg.dim, cfg.dim / cfg.reduction, cfg.bias);
    b.excite = ConvLayer<T>::pointwise(cfg.dim / cfg.reduction, cfg.dim, cfg.bias);
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    reduce.visit(join_name(prefix, "reduce"), fn);
    excite.visit(join_name(prefix, "excite"), fn);
  }
};

template <class T, class P>
Var squeeze_excite(Tape<T>& tape, Var x, P& params) {
  detail::require_channels("SE", tape.value(x).c(), params.cfg.dim);
  Var s = ops::global_avg_pool(tape, x);
  s = ops::gelu(tape, params.reduce(tape, s));
  Var gate = ops::sigmoid(tape, params.excite(tape, s));
  return ops::mul_broadcast(tape, x, gate);
}

template <class T>
Tensor<T> se_block(const Tensor<T>& x, const SEParams<T>& params) {
  Tape<T> tape(false);
  return tape.value(squeeze_excite(tape, tape.view(x), params));
}

// ---------------------------------------------------------------------------
// Vanilla attention

struct AttentionConfig {
  std::size_t dim = 0;
  std::size_t heads = 8;
  double mlp_ratio = 4.0;
  bool bias = true;

  std::size_t hidden() const { return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(dim))); }
};

template <class T>
struct AttentionParams : ParamBundle<AttentionParams, T> {
  AttentionConfig cfg;
  NormLayer<T> norm1;
  ConvLayer<T> qkv;   ///< c -> 3c
  ConvLayer<T> proj;  ///< c -> c
  NormLayer<T> norm2;
  ConvLayer<T> fc1;   ///< c -> m c
  ConvLayer<T> fc2;   ///< m c -> c

  static AttentionParams make(const AttentionConfig& cfg) {
    detail::require_config(cfg.heads > 0 && cfg.dim % cfg.heads == 0,
                           "attention: dim " + std::to_string(cfg.dim) + " not divisible by heads " +
                               std::to_string(cfg.heads));
    detail::require_config(cfg.hidden() > 0, "attention: MLP hidden width must be positive");
    const std::size_t c = cfg.dim;
    AttentionParams b;
    b.cfg = cfg;
    b.norm1 = NormLayer<T>::make(c);
    b.qkv = ConvLayer<T>::pointwise(c, 3 * c, cfg.bias);
    b.proj = ConvLayer<T>::pointwise(c, c, cfg.bias);
    b.norm2 = NormLayer<T>::make(c);
    b.fc1 = ConvLayer<T>::pointwise(c, cfg.hidden(), cfg.bias);
    b.fc2 = ConvLayer<T>::pointwise(cfg.hidden(), c, cfg.bias);
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    norm1.visit(join_name(prefix, "norm1"), fn);
    qkv.visit(join_name(prefix, "qkv"), fn);
    proj.visit(join_name(prefix, "proj"), fn);
    norm2.visit(join_name(prefix, "norm2"), fn);
    fc1.visit(join_name(prefix, "fc1"), fn);
    fc2.visit(join_name(prefix, "fc2"), fn);
  }
};

/// Attention over the h*w positions of a channel-major [n, c, h, w] feature;
/// no positional embedding.
template <class T, class P>
Var attention(Tape<T>& tape, Var x, P& params) {
  detail::require_channels("attention", tape.value(x).c(), params.cfg.dim);
  Var h = params.norm1(tape, x);
  h = ops::multi_head_attention(tape, params.qkv(tape, h), params.cfg.heads);
  Var x1 = ops::add(tape, x, params.proj(tape, h));
  Var m = params.norm2(tape, x1);
  m = params.fc2(tape, ops::gelu(tape, params.fc1(tape, m)));
  return ops::add(tape, x1, m);
}

/// Token-major entry point: tokens shaped [n, t, c, 1].
template <class T, class P>
Var attention_tokens(Tape<T>& tape, Var tokens, P& params) {
  Var x = ops::swap_axes12(tape, tokens);
  return ops::swap_axes12(tape, attention(tape, x, params));
}

template <class T>
Tensor<T> attention_block(const Tensor<T>& tokens, const AttentionParams<T>& params) {
  Tape<T> tape(false);
  return tape.value(attention_tokens(tape, tape.view(tokens), params));
}

// ---------------------------------------------------------------------------
// Residual wrapper

struct ResidualConfig {
  std::size_t dim = 0;
  double layer_scale_init = 1e-4;
  double drop_path = 0.0;
};

template <class T>
struct ResidualWrap : ParamBundle<ResidualWrap, T> {
  ResidualConfig cfg;
  NormLayer<T> norm;
  Param<T> layer_scale;  ///< [1, c, 1, 1]

  static ResidualWrap make(const ResidualConfig& cfg) {
    detail::require_config(cfg.drop_path >= 0.0 && cfg.drop_path < 1.0, "residual: drop_path must be in [0, 1)");
    ResidualWrap b;
    b.cfg = cfg;
    b.norm = NormLayer<T>::make(cfg.dim);
    b.layer_scale = Param<T>(Shape{1, cfg.dim, 1, 1});
    b.layer_scale.value.fill(static_cast<T>(cfg.layer_scale_init));
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    norm.visit(join_name(prefix, "norm"), fn);
    fn(join_name(prefix, "layer_scale"), ParamRole::layer_scale, layer_scale);
  }
};

/// Identifies one stochastic-depth draw: (seed, layer index, training step).
struct DropPathKey {
  std::uint64_t seed = 0;
  std::uint64_t layer = 0;
  std::uint64_t step = 0;
};

/// Per-sample branch multipliers: 0 when dropped, 1/(1-p) when kept.
template <class T>
std::vector<T> drop_path_factors(std::size_t batch, double p, const DropPathKey& key) {
  std::vector<T> f(batch, T(1));
  if (p <= 0.0) return f;
  Rng rng(mix_key(mix_key(key.seed, key.layer), key.step));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& v : f) v = rng.uniform() < p ? T(0) : keep_scale;
  return f;
}

/// x + drop_path(layer_scale * inner(norm(x))). Drop path only acts when training.
template <class T, class P, class Inner>
Var residual(Tape<T>& tape, Var x, P& wrap, Inner&& inner, bool training, const DropPathKey& key) {
  detail::require_channels("residual", tape.value(x).c(), wrap.cfg.dim);
  Var branch = inner(tape, wrap.norm(tape, x));
  branch = ops::mul_broadcast(tape, branch, tape.param(wrap.layer_scale));
  if (training && wrap.cfg.drop_path > 0.0)
    branch = ops::scale_samples(tape, branch, drop_path_factors<T>(tape.value(x).n(), wrap.cfg.drop_path, key));
  return ops::add(tape, x, branch);
}

/// Closure-based convenience form on plain tensors.
template <class T, class Inner>
Tensor<T> residual_apply(const Tensor<T>& x, Inner&& inner, const ResidualWrap<T>& wrap, bool training,
                         const DropPathKey& key) {
  Tape<T> tape(false);
  return tape.value(residual(tape, tape.view(x), wrap, inner, training, key));
}

/// Residual-wrapped EfficientMod, the unit stacked inside every stage.
struct ModBlockConfig {
  ResidualConfig residual;
  EfficientModConfig mod;
};

template <class T>
struct ModBlock : ParamBundle<ModBlock, T> {
  ModBlockConfig cfg;
  ResidualWrap<T> wrap;
  EfficientModParams<T> body;

  static ModBlock make(const ModBlockConfig& cfg) {
    detail::require_config(cfg.residual.dim == cfg.mod.dim && cfg.mod.out() == cfg.mod.dim,
                           "mod block: residual and block widths differ");
    ModBlock b;
    b.cfg = cfg;
    b.wrap = ResidualWrap<T>::make(cfg.residual);
    b.body = EfficientModParams<T>::make(cfg.mod);
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    wrap.visit(prefix, fn);
    body.visit(join_name(prefix, "mod"), fn);
  }
};

template <class T, class P>
Var mod_block(Tape<T>& tape, Var x, P& params, bool training, const DropPathKey& key,
              FusionMode mode = FusionMode::repeat, FuseOp op = FuseOp::mul, Var* ctx_out = nullptr) {
  auto inner = [&](Tape<T>& t, Var h) { return efficient_mod(t, h, params.body, mode, op, ctx_out); };
  return residual(tape, x, params.wrap, inner, training, key);
}

/// Residual-wrapped MBConv, the isotropic baseline unit.
struct MBConvBlockConfig {
  ResidualConfig residual;
  MBConvConfig mbconv;
};

template <class T>
struct MBConvBlock : ParamBundle<MBConvBlock, T> {
  MBConvBlockConfig cfg;
  ResidualWrap<T> wrap;
  MBConvParams<T> body;

  static MBConvBlock make(const MBConvBlockConfig& cfg) {
    detail::require_config(cfg.residual.dim == cfg.mbconv.dim, "mbconv block: residual and block widths differ");
    MBConvBlock b;
    b.cfg = cfg;
    b.wrap = ResidualWrap<T>::make(cfg.residual);
    b.body = MBConvParams<T>::make(cfg.mbconv);
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    wrap.visit(prefix, fn);
    body.visit(join_name(prefix, "mbconv"), fn);
  }
};

template <class T, class P>
Var mbconv_residual(Tape<T>& tape, Var x, P& params, bool training, const DropPathKey& key) {
  auto inner = [&](Tape<T>& t, Var h) { return mbconv(t, h, params.body); };
  return residual(tape, x, params.wrap, inner, training, key);
}

// ---------------------------------------------------------------------------
// Patch embedding

struct PatchEmbedConfig {
  std::size_t in_channels = 3;
  std::size_t out_channels = 0;
  std::size_t kernel = 7;
  std::size_t stride = 4;
  std::size_t padding = 3;
  bool bias = true;
};

template <class T>
struct PatchEmbedParams : ParamBundle<PatchEmbedParams, T> {
  PatchEmbedConfig cfg;
  ConvLayer<T> conv;

  static PatchEmbedParams make(const PatchEmbedConfig& cfg) {
    detail::require_config(cfg.stride > 0 && cfg.stride <= cfg.kernel,
                           "patch_embed: stride " + std::to_string(cfg.stride) + " exceeds kernel " +
                               std::to_string(cfg.kernel));
    PatchEmbedParams b;
    b.cfg = cfg;
    b.conv = ConvLayer<T>::make(cfg.in_channels, cfg.out_channels,
                                ConvSpec{cfg.kernel, cfg.stride, 1, 1, cfg.padding}, cfg.bias);
    return b;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    conv.visit(prefix, fn);
  }
};

template <class T, class P>
Var patch_embed(Tape<T>& tape, Var x, P& params) {
  return params.conv(tape, x);
}

template <class T>
Tensor<T> patch_embed(const Tensor<T>& x, const PatchEmbedParams<T>& params) {
  Tape<T> tape(false);
  return tape.value(patch_embed(tape, tape.view(x), params));
}

}  // namespace effmod
