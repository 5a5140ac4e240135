#pragma once

// Declarative model specs, the shipped presets, and the runnable model:
// a 4-stage hierarchy (stem /4, downsample /2 x3, EfficientMod blocks then
// attention blocks per stage) or an isotropic stack after one large patch
// embedding. Both end in GAP -> LayerNorm -> Linear.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "effmod/blocks.hpp"

namespace effmod {

struct ConvStepSpec {
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;
  bool operator==(const ConvStepSpec&) const = default;
};

struct StageSpec {
  std::size_t dim = 0;
  std::size_t mod_blocks = 0;
  std::size_t attn_blocks = 0;
  std::vector<std::size_t> expansion_pattern{1, 6};
  std::size_t dw_kernel = 7;
  bool operator==(const StageSpec&) const = default;

  /// Expansion ratio of the i-th EfficientMod block: the pattern cycled from index 0.
  std::size_t expansion(std::size_t block) const { return expansion_pattern[block % expansion_pattern.size()]; }
};

struct ModelSpec {
  std::string name = "custom";
  std::size_t in_channels = 3;
  ConvStepSpec stem{7, 4, 3};
  ConvStepSpec downsample{3, 2, 1};
  std::vector<StageSpec> stages;
  std::size_t classes = 1000;
  double drop_path_rate = 0.0;
  double layer_scale_init = 1e-4;
  double attn_mlp_ratio = 4.0;  ///< calibration knob, see presets
  std::size_t attn_heads = 8;
  bool bias = true;
  bool operator==(const ModelSpec&) const = default;

  void validate() const {
    auto fail = [&](const std::string& where, const std::string& what) {
      throw ConfigError(name + ": " + where + ": " + what);
    };
    if (stages.size() != 4) fail("stages", "exactly 4 stages required, got " + std::to_string(stages.size()));
    if (stem.stride != 4) fail("stem", "stride must be 4 (stage divisors 4, 2, 2, 2)");
    if (downsample.stride != 2) fail("downsample", "stride must be 2 (stage divisors 4, 2, 2, 2)");
    if (stem.stride > stem.kernel) fail("stem", "stride exceeds kernel");
    if (downsample.stride > downsample.kernel) fail("downsample", "stride exceeds kernel");
    if (in_channels == 0) fail("in_channels", "must be positive");
    if (classes == 0) fail("head", "classes must be positive");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) fail("drop_path_rate", "must be in [0, 1)");
    if (!(attn_mlp_ratio > 0.0)) fail("attn_mlp_ratio", "must be positive");
    if (attn_heads == 0) fail("attn_heads", "must be positive");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const StageSpec& s = stages[i];
      const std::string where = "stage " + std::to_string(i + 1);
      if (s.dim == 0) fail(where, "dim must be positive");
      if (s.mod_blocks + s.attn_blocks == 0) fail(where, "at least one block required");
      if (s.attn_blocks > 0 && i < 2) fail(where, "attention blocks are only allowed in stages 3 and 4");
      if (s.attn_blocks > 0 && s.dim % attn_heads != 0)
        fail(where, "dim " + std::to_string(s.dim) + " not divisible by " + std::to_string(attn_heads) + " heads");
      if (s.mod_blocks > 0 && s.expansion_pattern.empty()) fail(where, "expansion_pattern must be non-empty");
      for (std::size_t r : s.expansion_pattern)
        if (r == 0) fail(where, "expansion ratios must be positive");
      if (s.dw_kernel % 2 == 0) fail(where, "dw_kernel must be odd");
    }
  }
};

enum class IsoBlock { efficient_mod, mbconv };

inline const char* to_string(IsoBlock b) { return b == IsoBlock::efficient_mod ? "efficient_mod" : "mbconv"; }

struct IsotropicSpec {
  std::string name = "isotropic";
  IsoBlock block = IsoBlock::efficient_mod;
  std::size_t dim = 0;
  std::size_t depth = 0;
  std::size_t expansion = 6;
  std::size_t kernel = 7;  ///< depthwise kernel of each block
  std::size_t patch = 14;
  std::size_t in_channels = 3;
  std::size_t classes = 1000;
  double drop_path_rate = 0.0;
  double layer_scale_init = 1e-4;
  bool bias = true;
  bool operator==(const IsotropicSpec&) const = default;

  void validate() const {
    auto fail = [&](const std::string& what) { throw ConfigError(name + ": " + what); };
    if (dim == 0 || depth == 0 || expansion == 0) fail("dim, depth and expansion must be positive");
    if (patch == 0) fail("patch size must be positive");
    if (kernel % 2 == 0) fail("kernel must be odd");
    if (classes == 0) fail("classes must be positive");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) fail("drop_path_rate must be in [0, 1)");
  }
};

/// Either a hierarchical or an isotropic model description.
struct Architecture {
  bool isotropic = false;
  ModelSpec hier;
  IsotropicSpec iso;
  bool operator==(const Architecture&) const = default;

  const std::string& name() const { return isotropic ? iso.name : hier.name; }
  std::size_t classes() const { return isotropic ? iso.classes : hier.classes; }
  std::size_t in_channels() const { return isotropic ? iso.in_channels : hier.in_channels; }
  double layer_scale_init() const { return isotropic ? iso.layer_scale_init : hier.layer_scale_init; }
  void validate() const { isotropic ? iso.validate() : hier.validate(); }
};

inline Architecture as_architecture(ModelSpec s) { return Architecture{false, std::move(s), {}}; }
inline Architecture as_architecture(IsotropicSpec s) { return Architecture{true, {}, std::move(s)}; }

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline ModelSpec hierarchical_preset(std::string name, std::vector<std::size_t> dims,
                                     std::vector<std::pair<std::size_t, std::size_t>> blocks,
                                     std::vector<std::size_t> pattern, double drop_path, double mlp_ratio) {
  ModelSpec s;
  s.name = std::move(name);
  for (std::size_t i = 0; i < 4; ++i) s.stages.push_back(StageSpec{dims[i], blocks[i].first, blocks[i].second, pattern, 7});
  s.drop_path_rate = drop_path;
  s.attn_mlp_ratio = mlp_ratio;
  return s;
}

}  // namespace detail

/// Attention MLP ratios below are per-preset calibration values.
inline ModelSpec preset_spec(const std::string& name) {
  if (name == "xxs") return detail::hierarchical_preset("xxs", {32, 64, 128, 256}, {{2, 0}, {2, 0}, {6, 1}, {2, 2}}, {1, 6}, 0.0, 4.0);
  if (name == "xs") return detail::hierarchical_preset("xs", {32, 64, 144, 288}, {{3, 0}, {3, 0}, {4, 3}, {2, 3}}, {1, 4}, 0.0, 5.0);
  if (name == "s") return detail::hierarchical_preset("s", {32, 64, 144, 312}, {{4, 0}, {4, 0}, {8, 4}, {8, 4}}, {1, 6}, 0.02, 1.35);
  if (name == "s_conv")
    return detail::hierarchical_preset("s_conv", {40, 80, 160, 344}, {{4, 0}, {4, 0}, {12, 0}, {8, 0}}, {1, 6}, 0.02, 4.0);
  if (name == "micro") {
    ModelSpec s = detail::hierarchical_preset("micro", {8, 16, 24, 32}, {{1, 0}, {1, 0}, {1, 0}, {1, 0}}, {4}, 0.0, 4.0);
    s.classes = 4;
    return s;
  }
  throw ConfigError("unknown preset '" + name + "' (known: xxs, xs, s, s_conv, micro, iso_mod_256, iso_mbconv_256, "
                    "iso_mod_196, iso_mbconv_196)");
}

/// Isotropic comparison pairs: EfficientMod (r 6, k 7) against MBConv (r 7, k 3).
inline IsotropicSpec isotropic_preset(const std::string& name) {
  auto make = [&](IsoBlock b, std::size_t dim, std::size_t depth) {
    IsotropicSpec s;
    s.name = name;
    s.block = b;
    s.dim = dim;
    s.depth = depth;
    s.expansion = b == IsoBlock::efficient_mod ? 6 : 7;
    s.kernel = b == IsoBlock::efficient_mod ? 7 : 3;
    return s;
  };
  if (name == "iso_mod_256") return make(IsoBlock::efficient_mod, 256, 13);
  if (name == "iso_mbconv_256") return make(IsoBlock::mbconv, 256, 13);
  if (name == "iso_mod_196") return make(IsoBlock::efficient_mod, 196, 11);
  if (name == "iso_mbconv_196") return make(IsoBlock::mbconv, 196, 11);
  throw ConfigError("unknown isotropic preset '" + name + "'");
}

inline const std::vector<std::string>& hierarchical_preset_names() {
  static const std::vector<std::string> names{"xxs", "xs", "s", "s_conv", "micro"};
  return names;
}

inline const std::vector<std::string>& isotropic_preset_names() {
  static const std::vector<std::string> names{"iso_mod_256", "iso_mbconv_256", "iso_mod_196", "iso_mbconv_196"};
  return names;
}

inline Architecture preset(const std::string& name) {
  if (name.rfind("iso_", 0) == 0) return as_architecture(isotropic_preset(name));
  return as_architecture(preset_spec(name));
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct Stage {
  std::optional<ConvLayer<T>> down;  ///< absent in stage 1 and in isotropic models
  std::vector<ModBlock<T>> mods;
  std::vector<MBConvBlock<T>> mbconvs;
  std::vector<AttentionParams<T>> attns;
};

template <class T>
struct Model : ParamBundle<Model, T> {
  Architecture cfg;
  ConvLayer<T> stem;
  std::vector<Stage<T>> stages;
  NormLayer<T> head_norm;
  ConvLayer<T> head;

  static Model make(const Architecture& arch) {
    arch.validate();
    Model m;
    m.cfg = arch;
    if (arch.isotropic) {
      const IsotropicSpec& s = arch.iso;
      m.stem = ConvLayer<T>::make(s.in_channels, s.dim, ConvSpec{s.patch, s.patch, 1, 1, 0}, s.bias);
      Stage<T> st;
      const ResidualConfig res{s.dim, s.layer_scale_init, s.drop_path_rate};
      for (std::size_t i = 0; i < s.depth; ++i) {
        if (s.block == IsoBlock::efficient_mod)
          st.mods.push_back(ModBlock<T>::make({res, EfficientModConfig{s.dim, 0, s.expansion, s.kernel, s.bias}}));
        else
          st.mbconvs.push_back(MBConvBlock<T>::make({res, MBConvConfig{s.dim, s.expansion, s.kernel, s.bias}}));
      }
      m.stages.push_back(std::move(st));
      m.head_norm = NormLayer<T>::make(s.dim);
      m.head = ConvLayer<T>::pointwise(s.dim, s.classes, true);
      return m;
    }
    const ModelSpec& s = arch.hier;
    m.stem = ConvLayer<T>::make(s.in_channels, s.stages[0].dim,
                                ConvSpec{s.stem.kernel, s.stem.stride, 1, 1, s.stem.padding}, s.bias);
    for (std::size_t i = 0; i < s.stages.size(); ++i) {
      const StageSpec& ss = s.stages[i];
      Stage<T> st;
      if (i > 0)
        st.down = ConvLayer<T>::make(s.stages[i - 1].dim, ss.dim,
                                     ConvSpec{s.downsample.kernel, s.downsample.stride, 1, 1, s.downsample.padding},
                                     s.bias);
      const ResidualConfig res{ss.dim, s.layer_scale_init, s.drop_path_rate};
      for (std::size_t b = 0; b < ss.mod_blocks; ++b)
        st.mods.push_back(
            ModBlock<T>::make({res, EfficientModConfig{ss.dim, 0, ss.expansion(b), ss.dw_kernel, s.bias}}));
      for (std::size_t b = 0; b < ss.attn_blocks; ++b)
        st.attns.push_back(AttentionParams<T>::make(AttentionConfig{ss.dim, s.attn_heads, s.attn_mlp_ratio, s.bias}));
      m.stages.push_back(std::move(st));
    }
    m.head_norm = NormLayer<T>::make(s.stages.back().dim);
    m.head = ConvLayer<T>::pointwise(s.stages.back().dim, s.classes, true);
    return m;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    stem.visit(join_name(prefix, "stem"), fn);
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::string sp = join_name(prefix, "stages." + std::to_string(i));
      Stage<T>& st = stages[i];
      if (st.down) st.down->visit(join_name(sp, "down"), fn);
      for (std::size_t b = 0; b < st.mods.size(); ++b) st.mods[b].visit(join_name(sp, "mod" + std::to_string(b)), fn);
      for (std::size_t b = 0; b < st.mbconvs.size(); ++b)
        st.mbconvs[b].visit(join_name(sp, "mbconv" + std::to_string(b)), fn);
      for (std::size_t b = 0; b < st.attns.size(); ++b)
        st.attns[b].visit(join_name(sp, "attn" + std::to_string(b)), fn);
    }
    head_norm.visit(join_name(prefix, "head.norm"), fn);
    head.visit(join_name(prefix, "head.fc"), fn);
  }

  /// Total spatial reduction from input to the last stage.
  std::size_t reduction() const { return cfg.isotropic ? cfg.iso.patch : 32; }
};

/// Materializes a model with the default init policy; deterministic in seed.
template <class T = float>
Model<T> build_model(const Architecture& arch, std::uint64_t seed) {
  Model<T> m = Model<T>::make(arch);
  Rng rng(seed);
  m.init(rng, arch.layer_scale_init());
  return m;
}

// ---------------------------------------------------------------------------
// Forward

struct ForwardOptions {
  bool training = false;
  FusionMode mode = FusionMode::repeat;
  FuseOp op = FuseOp::mul;
  std::uint64_t seed = 0;  ///< stochastic depth stream
  std::uint64_t step = 0;
};

/// Optional diagnostics collected during a forward pass.
template <class T>
struct ForwardTrace {
  std::vector<Shape> stage_outputs;
  std::optional<std::pair<std::size_t, std::size_t>> ctx_at;  ///< (stage, mod block), 0-based
  Tensor<T> ctx;
};

template <class T, class M>
Var model_forward(Tape<T>& tape, Var x, M& model, const ForwardOptions& opt = {}, ForwardTrace<T>* trace = nullptr) {
  const Architecture& arch = model.cfg;
  const Shape in = tape.value(x).shape();
  detail::require(in.c == arch.in_channels(), "model_forward: input has " + std::to_string(in.c) +
                                                  " channels, model expects " + std::to_string(arch.in_channels()));
  const std::size_t red = model.reduction();
  detail::require(in.h % red == 0 && in.w % red == 0 && in.h > 0 && in.w > 0,
                  "model_forward: input " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                      " is not divisible by " + std::to_string(red));
  if (trace && trace->ctx_at) {
    const auto [s, b] = *trace->ctx_at;
    detail::require(s < model.stages.size() && b < model.stages[s].mods.size(),
                    "model_forward: stage " + std::to_string(s + 1) + " block " + std::to_string(b + 1) +
                        " is not an EfficientMod block");
  }

  Var h = model.stem(tape, x);
  std::uint64_t layer = 0;
  for (std::size_t si = 0; si < model.stages.size(); ++si) {
    auto& st = model.stages[si];
    if (st.down) h = (*st.down)(tape, h);
    for (std::size_t b = 0; b < st.mods.size(); ++b) {
      Var ctx{};
      const bool capture = trace && trace->ctx_at && trace->ctx_at->first == si && trace->ctx_at->second == b;
      h = mod_block(tape, h, st.mods[b], opt.training, DropPathKey{opt.seed, layer++, opt.step}, opt.mode, opt.op,
                    capture ? &ctx : nullptr);
      if (capture) trace->ctx = tape.value(ctx);
    }
    for (auto& blk : st.mbconvs) h = mbconv_residual(tape, h, blk, opt.training, DropPathKey{opt.seed, layer++, opt.step});
    for (auto& blk : st.attns) {
      h = attention(tape, h, blk);
      ++layer;
    }
    if (trace) trace->stage_outputs.push_back(tape.value(h).shape());
  }
  h = ops::global_avg_pool(tape, h);
  h = model.head_norm(tape, h);
  return model.head(tape, h);
}

/// Inference on a plain tensor; returns logits [n, classes, 1, 1].
template <class T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& x, const ForwardOptions& opt = {},
                  ForwardTrace<T>* trace = nullptr) {
  Tape<T> tape(false);
  return tape.value(model_forward(tape, tape.view(x), model, opt, trace));
}

}  // namespace effmod
