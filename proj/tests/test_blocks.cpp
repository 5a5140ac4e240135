#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "effmod/blocks.hpp"
#include "oracles.hpp"

using namespace effmod;

namespace {

template <class B>
B randomized(B b, std::uint64_t seed) {
  Rng rng(seed);
  b.randomize(rng);
  return b;
}

template <class T>
Tensor<T> apply_conv(const Tensor<T>& x, const ConvLayer<T>& l) {
  return conv2d(x, l.weight.value, l.bias.value.span(), l.spec);
}

void set_identity(ConvLayer<double>& l) {
  l.weight.value.fill(0.0);
  for (std::size_t c = 0; c < std::min(l.in_channels, l.out_channels); ++c) l.weight.value.at(c, c, 0, 0) = 1.0;
}

void zero_biases(auto& bundle) {
  bundle.visit("", [](const std::string&, ParamRole role, Param<double>& p) {
    if (role == ParamRole::bias) p.value.fill(0.0);
  });
}

}  // namespace

TEST(EfficientMod, ZeroInputNoBiasGivesZeros) {
  auto p = randomized(EfficientModParams<double>::make({8, 0, 3, 7, false}), 1);
  EXPECT_EQ(max_abs(efficient_mod_block(Tensor<double>({1, 8, 9, 9}), p)), 0.0);
}

TEST(EfficientMod, ShapeContract) {
  auto p = EfficientModParams<double>::make({64, 64, 6, 7, true});
  Rng rng(2);
  p.init(rng);
  const auto y = efficient_mod_block(random_tensor<double>({1, 64, 14, 14}, 3), p);
  EXPECT_EQ(y.shape(), (Shape{1, 64, 14, 14}));
  auto q = EfficientModParams<double>::make({8, 12, 2, 3, true});
  EXPECT_EQ(efficient_mod_block(random_tensor<double>({2, 8, 5, 5}, 4), q).shape(), (Shape{2, 12, 5, 5}));
}

TEST(EfficientMod, MatchesStepwiseComposition) {
  for (FusionMode mode : {FusionMode::repeat, FusionMode::reshape}) {
    auto p = randomized(EfficientModParams<double>::make({6, 0, 4, 5, true}), 5);
    const auto x = random_tensor<double>({2, 6, 7, 8}, 6);
    const auto ctx = apply_conv(gelu(apply_conv(apply_conv(x, p.f), p.dw)), p.g);
    const auto ref = apply_conv(fuse_modulate(ctx, apply_conv(x, p.v), FusionMode::repeat), p.p);
    EXPECT_TRUE(bit_identical(efficient_mod_block(x, p, mode), ref));
  }
}

TEST(EfficientMod, ChannelMismatchIsPrecondition) {
  auto p = EfficientModParams<double>::make({4, 0, 2, 3, true});
  EXPECT_THROW(efficient_mod_block(Tensor<double>({1, 5, 4, 4}), p), PreconditionError);
}

TEST(EfficientMod, IdentityLayersDegenerateToGeluTimesInput) {
  auto p = EfficientModParams<double>::make({3, 0, 1, 1, false});
  for (auto* l : {&p.f, &p.g, &p.v, &p.p}) set_identity(*l);
  p.dw.weight.value.fill(1.0);
  const auto x = random_tensor<double>({2, 3, 4, 4}, 7, -3, 3);
  const auto y = efficient_mod_block(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], gelu(x[i]) * x[i]);
}

TEST(EfficientMod, FusionModesNeverChangeOutput) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 1 + rng.below(6), r = 1 + rng.below(6), k = 1 + 2 * rng.below(4);
    auto p = randomized(EfficientModParams<double>::make({c, 0, r, k, true}), rng.next());
    const auto x = random_tensor<double>({1, c, 3 + rng.below(6), 3 + rng.below(6)}, rng.next());
    for (FuseOp op : {FuseOp::mul, FuseOp::sum})
      EXPECT_TRUE(bit_identical(efficient_mod_block(x, p, FusionMode::repeat, op),
                                efficient_mod_block(x, p, FusionMode::reshape, op)));
  }
}

TEST(EfficientMod, SumAblationKeepsParameterCount) {
  const auto p = EfficientModParams<double>::make({16, 0, 6, 7, true});
  const auto x = random_tensor<double>({1, 16, 6, 6}, 9);
  const auto before = p.param_count();
  EXPECT_NO_THROW(efficient_mod_block(x, p, FusionMode::repeat, FuseOp::sum));
  EXPECT_EQ(p.param_count(), before);
}

TEST(VAN, ZeroInputAndShape) {
  auto p = randomized(VANParams<double>::make({8, false}), 10);
  EXPECT_EQ(max_abs(van_block(Tensor<double>({1, 8, 9, 9}), p)), 0.0);
  EXPECT_EQ(van_block(random_tensor<double>({1, 8, 9, 9}, 11), p).shape(), (Shape{1, 8, 9, 9}));
}

TEST(VAN, ContextImpulseSupportRadiusIsEleven) {
  auto p = VANParams<double>::make({1, false});
  p.dw5.weight.value.fill(1.0);
  p.dw7.weight.value.fill(1.0);
  set_identity(p.g);
  Tensor<double> impulse({1, 1, 31, 31});
  impulse.at(0, 0, 15, 15) = 1.0;
  Tape<double> tape(false);
  const auto& ctx = tape.value(van_context(tape, tape.view(impulse), p));
  long radius = 0;
  for (std::size_t y = 0; y < 31; ++y)
    for (std::size_t x = 0; x < 31; ++x)
      if (ctx.at(0, 0, y, x) != 0.0)
        radius = std::max({radius, std::abs(static_cast<long>(y) - 15), std::abs(static_cast<long>(x) - 15)});
  EXPECT_EQ(radius, 11);
}

TEST(VAN, MatchesStepwiseComposition) {
  auto p = randomized(VANParams<double>::make({4, true}), 12);
  const auto x = random_tensor<double>({1, 4, 10, 10}, 13);
  const auto fx = gelu(apply_conv(x, p.f));
  const auto ctx = apply_conv(apply_conv(apply_conv(fx, p.dw5), p.dw7), p.g);
  EXPECT_TRUE(bit_identical(van_block(x, p), apply_conv(elementwise(ctx, fx, ElementwiseOp::mul), p.p)));
}

TEST(Focal, ZeroLevelsIsConfigError) {
  EXPECT_THROW(FocalParams<double>::make({4, {}, true}), ConfigError);
  EXPECT_THROW(FocalParams<double>::make({4, {5, 3}, true}), ConfigError);
}

TEST(Focal, ZeroInputNoBiasGivesZeros) {
  auto p = randomized(FocalParams<double>::make({4, {3, 5}, false}), 14);
  EXPECT_EQ(max_abs(focal_ctx(Tensor<double>({1, 4, 6, 6}), p)), 0.0);
}

namespace {

Tensor<double> gate_product(const Tensor<double>& level, const Tensor<double>& gate) {
  Tensor<double> out(level.shape());
  for (std::size_t n = 0; n < level.n(); ++n)
    for (std::size_t c = 0; c < level.c(); ++c)
      for (std::size_t i = 0; i < level.h() * level.w(); ++i)
        out.plane(n, c)[i] = level.plane(n, c)[i] * gate.plane(n, 0)[i];
  return out;
}

}  // namespace

TEST(Focal, SingleLevelReducesToOneTerm) {
  auto p = randomized(FocalParams<double>::make({4, {3}, true}), 15);
  const auto x = random_tensor<double>({2, 4, 6, 6}, 16);
  const auto fx = apply_conv(x, p.f);
  const auto term = gate_product(gelu(apply_conv(fx, p.levels[0])), apply_conv(fx, p.gates[0]));
  EXPECT_TRUE(bit_identical(focal_ctx(x, p), apply_conv(term, p.g)));
}

TEST(Focal, TwoLevelsEqualExplicitSum) {
  auto p = randomized(FocalParams<double>::make({4, {3, 5}, true}), 17);
  const auto x = random_tensor<double>({1, 4, 7, 7}, 18);
  const auto fx = apply_conv(x, p.f);
  const auto t1 = gate_product(gelu(apply_conv(fx, p.levels[0])), apply_conv(fx, p.gates[0]));
  const auto t2 = gate_product(gelu(apply_conv(fx, p.levels[1])), apply_conv(fx, p.gates[1]));
  EXPECT_TRUE(bit_identical(focal_ctx(x, p), apply_conv(elementwise(t1, t2, ElementwiseOp::add), p.g)));
}

TEST(MBConv, ZeroInputShapeAndParamCount) {
  auto p = randomized(MBConvParams<double>::make({8, 6, 3, false}), 19);
  EXPECT_EQ(max_abs(mbconv_block(Tensor<double>({1, 8, 5, 5}), p)), 0.0);
  EXPECT_EQ(MBConvParams<double>::make({64, 6, 3, false}).param_count(), 52608u);
}

TEST(MBConv, MatchesStepwiseComposition) {
  auto p = randomized(MBConvParams<double>::make({3, 4, 5, true}), 20);
  const auto x = random_tensor<double>({1, 3, 8, 8}, 21);
  const auto ref = apply_conv(gelu(apply_conv(gelu(apply_conv(x, p.expand)), p.dw)), p.project);
  EXPECT_TRUE(bit_identical(mbconv_block(x, p), ref));
  EXPECT_EQ(p.dw.in_channels, 12u);
}

TEST(SE, ZeroExciteHalvesInput) {
  auto p = randomized(SEParams<double>::make({8, 4, false}), 22);
  p.excite.weight.value.fill(0.0);
  const auto x = random_tensor<double>({2, 8, 4, 4}, 23);
  const auto y = se_block(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], 0.5 * x[i]);
}

TEST(SE, SaturatedGatePassesInput) {
  auto p = randomized(SEParams<double>::make({8, 4, true}), 24);
  p.excite.weight.value.fill(0.0);
  p.excite.bias.value.fill(50.0);
  const auto x = random_tensor<double>({1, 8, 3, 3}, 25);
  EXPECT_LT(oracle::max_rel_err(se_block(x, p), x), 1e-15);
}

TEST(SE, MatchesCompositionAndRejectsBadReduction) {
  auto p = randomized(SEParams<double>::make({8, 2, true}), 26);
  const auto x = random_tensor<double>({2, 8, 5, 5}, 27);
  const auto gate = sigmoid(apply_conv(gelu(apply_conv(global_avg_pool(x), p.reduce)), p.excite));
  const auto y = se_block(x, p);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(y.plane(n, c)[i], x.plane(n, c)[i] * gate.at(n, c, 0, 0));
  EXPECT_THROW(SEParams<double>::make({6, 4, true}), ConfigError);
}

TEST(Attention, IndivisibleHeadsIsConfigError) {
  EXPECT_THROW(AttentionParams<double>::make({10, 4, 4.0, true}), ConfigError);
}

TEST(Attention, SingleTokenAttendsToItself) {
  auto p = randomized(AttentionParams<double>::make({4, 2, 2.0, true}), 28);
  const auto x = random_tensor<double>({1, 4, 1, 1}, 29);  // one token, channel-major
  Tape<double> tape(false);
  const auto y = tape.value(attention(tape, tape.view(x), p));

  const auto qkv = apply_conv(layer_norm<double>(x, p.norm1.gamma.value.vec(), p.norm1.beta.value.vec(), 1e-6), p.qkv);
  Tensor<double> v({1, 4, 1, 1});
  for (std::size_t c = 0; c < 4; ++c) v[c] = qkv[8 + c];
  const auto a = elementwise(x, apply_conv(v, p.proj), ElementwiseOp::add);
  const auto m = apply_conv(
      gelu(apply_conv(layer_norm<double>(a, p.norm2.gamma.value.vec(), p.norm2.beta.value.vec(), 1e-6), p.fc1)),
      p.fc2);
  EXPECT_LT(oracle::max_rel_err(y, elementwise(a, m, ElementwiseOp::add)), 1e-14);
}

TEST(Attention, TokenPermutationEquivariance) {
  auto p = randomized(AttentionParams<double>::make({8, 2, 4.0, true}), 30);
  const std::size_t t = 7, c = 8;
  const auto tokens = random_tensor<double>({2, t, c, 1}, 31);
  std::vector<std::size_t> perm(t);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(32);
  for (std::size_t i = t - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  Tensor<double> permuted(tokens.shape());
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) permuted.at(n, i, ch, 0) = tokens.at(n, perm[i], ch, 0);
  const auto y = attention_block(tokens, p), yp = attention_block(permuted, p);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) EXPECT_NEAR(yp.at(n, i, ch, 0), y.at(n, perm[i], ch, 0), 1e-12);
}

TEST(Attention, ZeroInputZeroGammaGivesZeros) {
  auto p = randomized(AttentionParams<double>::make({8, 8, 4.0, true}), 33);
  zero_biases(p);
  for (auto* n : {&p.norm1, &p.norm2}) {
    n->gamma.value.fill(0.0);
    n->beta.value.fill(0.0);
  }
  EXPECT_EQ(max_abs(attention_block(Tensor<double>({1, 6, 8, 1}), p)), 0.0);
}

TEST(Residual, EvalWithZeroLayerScaleIsIdentity) {
  auto wrap = ResidualWrap<double>::make({4, 0.0, 0.2});
  auto inner_p = randomized(EfficientModParams<double>::make({4, 0, 2, 3, true}), 34);
  const auto x = random_tensor<double>({2, 4, 5, 5}, 35);
  auto inner = [&](Tape<double>& t, Var h) { return efficient_mod(t, h, inner_p); };
  EXPECT_EQ(residual_apply(x, inner, wrap, false, {}), x);
}

TEST(Residual, TrainingWithCertainDropIsIdentity) {
  auto wrap = ResidualWrap<double>::make({4, 1.0, 1.0 - 1e-9});
  auto inner_p = randomized(EfficientModParams<double>::make({4, 0, 2, 3, true}), 36);
  const auto x = random_tensor<double>({3, 4, 5, 5}, 37);
  auto inner = [&](Tape<double>& t, Var h) { return efficient_mod(t, h, inner_p); };
  EXPECT_EQ(residual_apply(x, inner, wrap, true, DropPathKey{1, 2, 3}), x);
}

TEST(Residual, LayerScaleBoundsBranch) {
  auto wrap = ResidualWrap<double>::make({4, 1e-4, 0.0});
  Rng rng(38);
  auto inner_p = randomized(EfficientModParams<double>::make({4, 0, 2, 3, true}), 39);
  const auto x = random_tensor<double>({1, 4, 6, 6}, 40);
  auto inner = [&](Tape<double>& t, Var h) { return efficient_mod(t, h, inner_p); };
  const auto y = residual_apply(x, inner, wrap, false, {});
  const auto normed = layer_norm<double>(x, wrap.norm.gamma.value.vec(), wrap.norm.beta.value.vec(), 1e-6);
  const double bound = 1e-4 * max_abs(efficient_mod_block(normed, inner_p));
  double diff = 0;
  for (std::size_t i = 0; i < x.size(); ++i) diff = std::max(diff, std::abs(y[i] - x[i]));
  EXPECT_LE(diff, bound * (1 + 1e-12));
  EXPECT_GT(diff, 0.0);
}

TEST(Residual, DropPathDeterministicPerKeyAndUnbiased) {
  EXPECT_EQ(drop_path_factors<double>(64, 0.3, {1, 2, 3}), drop_path_factors<double>(64, 0.3, {1, 2, 3}));
  EXPECT_NE(drop_path_factors<double>(64, 0.3, {1, 2, 3}), drop_path_factors<double>(64, 0.3, {1, 2, 4}));
  const auto f = drop_path_factors<double>(20000, 0.25, {9, 0, 0});
  double mean = 0;
  for (double v : f) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
    mean += v;
  }
  EXPECT_NEAR(mean / 20000, 1.0, 0.03);
  EXPECT_THROW(ResidualWrap<double>::make({4, 1e-4, 1.0}), ConfigError);
}

TEST(PatchEmbed, StemAndDownsampleExtents) {
  const auto stem = PatchEmbedParams<double>::make({3, 8, 7, 4, 3, true});
  EXPECT_EQ(patch_embed(Tensor<double>({1, 3, 224, 224}), stem).shape(), (Shape{1, 8, 56, 56}));
  const auto down = PatchEmbedParams<double>::make({4, 8, 3, 2, 1, true});
  EXPECT_EQ(patch_embed(Tensor<double>({1, 4, 56, 56}), down).shape(), (Shape{1, 8, 28, 28}));
  auto nb = randomized(PatchEmbedParams<double>::make({3, 8, 7, 4, 3, false}), 41);
  EXPECT_EQ(max_abs(patch_embed(Tensor<double>({1, 3, 32, 32}), nb)), 0.0);
  EXPECT_THROW(PatchEmbedParams<double>::make({3, 8, 3, 4, 1, true}), ConfigError);
}

TEST(Bundles, CastPreservesValuesAndNames) {
  auto p = randomized(FocalParams<double>::make({4, {3, 5, 7}, true}), 42);
  const auto q = p.cast<float>();
  std::vector<std::string> a, b;
  p.visit_const("x", [&](const std::string& n, ParamRole, const Param<double>&) { a.push_back(n); });
  q.visit_const("x", [&](const std::string& n, ParamRole, const Param<float>&) { b.push_back(n); });
  EXPECT_EQ(a, b);
  EXPECT_EQ(q.gates[2].weight.value[1], static_cast<float>(p.gates[2].weight.value[1]));
}
