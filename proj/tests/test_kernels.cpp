#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "effmod/kernels.hpp"
#include "effmod/random.hpp"
#include "oracles.hpp"

using namespace effmod;

namespace {

std::vector<double> to_vec(const Tensor<double>& t) { return t.vec(); }

}  // namespace

TEST(Conv2d, OnesSamePaddingCountsOverlap) {
  const auto x = Tensor<double>::ones({1, 1, 3, 3});
  const auto w = Tensor<double>::ones({1, 1, 3, 3});
  const auto y = conv2d(x, w, ConvSpec::same(3));
  const std::vector<double> expected{4, 6, 4, 6, 9, 6, 4, 6, 4};
  EXPECT_EQ(to_vec(y), expected);
}

TEST(Conv2d, IdentityKernelReturnsInput) {
  const auto x = random_tensor<double>({2, 3, 5, 4}, 1);
  Tensor<double> w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.0;
  EXPECT_EQ(conv2d(x, w, ConvSpec::pointwise()), x);
}

TEST(Conv2d, ZeroInputNoBiasGivesZeros) {
  const Tensor<double> x({1, 4, 6, 6});
  const auto w = random_tensor<double>({4, 1, 3, 3}, 2);
  const auto y = conv2d(x, w, ConvSpec::depthwise(3, 4));
  EXPECT_EQ(max_abs(y), 0.0);
}

TEST(Conv2d, EvenKernelSamePaddingIsConfigError) {
  EXPECT_THROW(ConvSpec::same(4), ConfigError);
}

TEST(Conv2d, ShapeMismatchNamesDimension) {
  const Tensor<double> x({1, 4, 6, 6});
  const Tensor<double> w({4, 2, 3, 3});
  try {
    conv2d(x, w, ConvSpec::same(3));
    FAIL() << "expected PreconditionError";
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("dim 1"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, InputTooSmallIsPrecondition) {
  const Tensor<double> x({1, 1, 2, 2});
  const Tensor<double> w({1, 1, 5, 5});
  EXPECT_THROW(conv2d(x, w, ConvSpec{5, 1, 1, 1, 0}),PreconditionError);
}

TEST(Conv2d, SamePaddingPreservesExtentsForAnyDilation) {
  for (std::size_t k : {1u, 3u, 5u, 7u})
    for (std::size_t d : {1u, 2u, 3u}) {
      const auto x = random_tensor<double>({1, 2, 9, 7}, 10 * k + d);
      const auto w = random_tensor<double>({2, 1, k, k}, 3);
      const auto y = conv2d(x, w, ConvSpec::depthwise(k, 2, d));
      EXPECT_EQ(y.shape(), x.shape()) << "k=" << k << " d=" << d;
    }
}

TEST(Conv2d, MatchesNaiveOracleOnRandomShapes) {
  Rng rng(42);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 1 + rng.below(3), groups = 1 + rng.below(3);
    const std::size_t cin = groups * (1 + rng.below(3)), cout = groups * (1 + rng.below(3));
    const std::size_t k = 1 + 2 * rng.below(3), d = 1 + rng.below(3), s = 1 + rng.below(2);
    const std::size_t pad = rng.below(d * (k - 1) / 2 + 2);
    const std::size_t span = d * (k - 1) + 1;
    const std::size_t h = std::max<std::size_t>(span, 3 + rng.below(7));
    const std::size_t w = std::max<std::size_t>(span, 3 + rng.below(7));
    const auto x = random_tensor<double>({n, cin, h, w}, rng.next());
    const auto wt = random_tensor<double>({cout, cin / groups, k, k}, rng.next());
    const auto b = random_tensor<double>({cout, 1, 1, 1}, rng.next());
    const auto y = conv2d(x, wt, b.span(), ConvSpec{k, s, d, groups, pad});
    const auto ref = oracle::conv2d(x, wt, b.vec(), s, d, groups, pad);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LE(oracle::max_rel_err(y, ref), 1e-10) << "trial " << trial;
  }
}

TEST(Conv2d, DepthwiseEqualsPerChannelCorrelation) {
  const auto x = random_tensor<double>({1, 3, 8, 8}, 5);
  const auto w = random_tensor<double>({3, 1, 5, 5}, 6);
  const auto y = conv2d(x, w, ConvSpec::depthwise(5, 3));
  for (std::size_t c = 0; c < 3; ++c) {
    Tensor<double> xc({1, 1, 8, 8}, std::vector<double>(x.plane(0, c), x.plane(0, c) + 64));
    Tensor<double> wc({1, 1, 5, 5}, std::vector<double>(w.plane(c, 0), w.plane(c, 0) + 25));
    const auto yc = conv2d(xc, wc, ConvSpec::same(5));
    for (std::size_t p = 0; p < 64; ++p) EXPECT_EQ(yc[p], y.plane(0, c)[p]);
  }
}

TEST(Conv2d, ResultIndependentOfWorkerCount) {
  const auto x = random_tensor<double>({2, 16, 20, 20}, 7);
  const auto w = random_tensor<double>({32, 16, 3, 3}, 8);
  Tensor<double> y1, y4;
  {
    ScopedWorkerBudget b(1);
    y1 = conv2d(x, w, ConvSpec::same(3));
  }
  {
    ScopedWorkerBudget b(4);
    y4 = conv2d(x, w, ConvSpec::same(3));
  }
  EXPECT_TRUE(bit_identical(y1, y4));
}

TEST(Gelu, KnownValues) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(1.0), 0.841345, 1e-6);
  EXPECT_LT(std::abs(gelu(-10.0)), 1e-8);
}

TEST(Gelu, MonotoneOnNonNegativeAxis) {
  double prev = gelu(0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double v = gelu(i * 0.01);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(LayerNorm, ThreeChannelExample) {
  Tensor<double> x({1, 3, 1, 1}, std::vector<double>{1, 2, 3});
  const std::vector<double> gamma(3, 1.0), beta(3, 0.0);
  const auto y = layer_norm<double>(x, gamma, beta, 1e-300);
  EXPECT_NEAR(y[0], -1.224745, 1e-6);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], 1.224745, 1e-6);
}

TEST(LayerNorm, ConstantChannelsGiveBeta) {
  Tensor<double> x({1, 4, 2, 2}, 3.5);
  const std::vector<double> gamma(4, 2.0), beta{0.1, 0.2, 0.3, 0.4};
  const auto y = layer_norm<double>(x, gamma, beta, 1e-6);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 4; ++p) EXPECT_DOUBLE_EQ(y.plane(0, c)[p], beta[c]);
}

TEST(LayerNorm, ZeroGammaGivesBetaBroadcast) {
  const auto x = random_tensor<double>({2, 5, 3, 3}, 11);
  const std::vector<double> gamma(5, 0.0), beta{1, 2, 3, 4, 5};
  const auto y = layer_norm<double>(x, gamma, beta, 1e-6);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t p = 0; p < 9; ++p) EXPECT_EQ(y.plane(n, c)[p], beta[c]);
}

TEST(LayerNorm, NormalizedMomentsPerPosition) {
  const auto x = random_tensor<double>({2, 16, 4, 4}, 12, -3, 5);
  const std::vector<double> gamma(16, 1.0), beta(16, 0.0);
  const auto y = layer_norm<double>(x, gamma, beta, 1e-12);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 16; ++p) {
      double m = 0, v = 0;
      for (std::size_t c = 0; c < 16; ++c) m += y.plane(n, c)[p];
      m /= 16;
      for (std::size_t c = 0; c < 16; ++c) v += (y.plane(n, c)[p] - m) * (y.plane(n, c)[p] - m);
      v /= 16;
      EXPECT_NEAR(m, 0.0, 1e-9);
      EXPECT_NEAR(v, 1.0, 1e-6);
    }
}

TEST(LayerNorm, ZeroChannelsIsPrecondition) {
  Tensor<double> x({1, 0, 2, 2});
  EXPECT_THROW(layer_norm<double>(x, {}, {}, 1e-6), PreconditionError);
}

TEST(Softmax, Examples) {
  Tensor<double> a({1, 1, 1, 2}, std::vector<double>{0, 0});
  EXPECT_EQ(softmax(a, 3).vec(), (std::vector<double>{0.5, 0.5}));
  Tensor<double> b({1, 1, 1, 2}, std::vector<double>{1000, 1000});
  EXPECT_EQ(softmax(b, 3).vec(), (std::vector<double>{0.5, 0.5}));
  Tensor<double> c({1, 1, 1, 2}, std::vector<double>{0, std::log(3.0)});
  const auto s = softmax(c, 3);
  EXPECT_NEAR(s[0], 0.25, 1e-15);
  EXPECT_NEAR(s[1], 0.75, 1e-15);
}

TEST(Softmax, SlicesSumToOneOnEveryAxis) {
  const auto x = random_tensor<double>({3, 4, 5, 6}, 13, -20, 20);
  for (std::size_t axis = 0; axis < 4; ++axis) {
    const auto s = softmax(x, axis);
    const auto d = x.shape().dims();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= d[i];
    for (std::size_t i = axis + 1; i < 4; ++i) inner *= d[i];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double sum = 0;
        for (std::size_t j = 0; j < d[axis]; ++j) sum += s[o * d[axis] * inner + j * inner + in];
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
  }
}

TEST(BatchedMatmul, IdentityAndZeros) {
  Tensor<double> eye({1, 1, 2, 2}, std::vector<double>{1, 0, 0, 1});
  const auto b = random_tensor<double>({1, 1, 2, 3}, 14);
  EXPECT_EQ(batched_matmul(eye, b), b);
  const Tensor<double> z({1, 1, 2, 2});
  EXPECT_EQ(max_abs(batched_matmul(z, b)), 0.0);
}

TEST(BatchedMatmul, MatchesLoopOracle) {
  const auto a = random_tensor<double>({1, 1, 3, 4}, 15);
  const auto b = random_tensor<double>({1, 1, 4, 2}, 16);
  const auto y = batched_matmul(a, b);
  const auto ref = oracle::matmul(a, b);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_LT(std::abs(y[i] - ref[i]), 1e-12);
}

TEST(BatchedMatmul, InnerMismatchIsPrecondition) {
  const Tensor<double> a({1, 1, 3, 4}), b({1, 1, 3, 2});
  EXPECT_THROW(batched_matmul(a, b), PreconditionError);
}

TEST(FuseModulate, RepeatTilesContext) {
  Tensor<double> ctx({1, 2, 1, 1}, std::vector<double>{2, 3});
  const auto v = Tensor<double>::ones({1, 4, 1, 1});
  for (FusionMode mode : {FusionMode::repeat, FusionMode::reshape})
    EXPECT_EQ(fuse_modulate(ctx, v, mode).vec(), (std::vector<double>{2, 3, 2, 3}));
}

TEST(FuseModulate, RatioOneIsElementwiseProduct) {
  const auto ctx = random_tensor<double>({2, 3, 4, 4}, 17);
  const auto v = random_tensor<double>({2, 3, 4, 4}, 18);
  EXPECT_EQ(fuse_modulate(ctx, v, FusionMode::repeat), elementwise(v, ctx, ElementwiseOp::mul));
}

TEST(FuseModulate, ModesBitIdenticalAndMatchIndexMapping) {
  Rng rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(2), c = 1 + rng.below(6), r = 1 + rng.below(6);
    const std::size_t h = 1 + rng.below(6), w = 1 + rng.below(6);
    const auto ctx = random_tensor<double>({n, c, h, w}, rng.next());
    const auto v = random_tensor<double>({n, r * c, h, w}, rng.next());
    for (FuseOp op : {FuseOp::mul, FuseOp::sum}) {
      const auto a = fuse_modulate(ctx, v, FusionMode::repeat, op);
      const auto b = fuse_modulate(ctx, v, FusionMode::reshape, op);
      ASSERT_TRUE(bit_identical(a, b));
      for (std::size_t in = 0; in < n; ++in)
        for (std::size_t i = 0; i < r * c; ++i)
          for (std::size_t p = 0; p < h * w; ++p) {
            const double cv = ctx.plane(in, i % c)[p], vv = v.plane(in, i)[p];
            ASSERT_EQ(a.plane(in, i)[p], op == FuseOp::mul ? vv * cv : vv + cv);
          }
    }
  }
}

TEST(FuseModulate, NonMultipleChannelsIsPrecondition) {
  const Tensor<double> ctx({1, 3, 2, 2}), v({1, 4, 2, 2});
  EXPECT_THROW(fuse_modulate(ctx, v, FusionMode::repeat), PreconditionError);
}

TEST(GlobalAvgPool, Examples) {
  EXPECT_EQ(global_avg_pool(Tensor<double>({1, 2, 3, 3}, 5.0)).vec(), (std::vector<double>{5, 5}));
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 3, 5, 7});
  EXPECT_EQ(global_avg_pool(x).vec(), std::vector<double>{4});
  EXPECT_EQ(max_abs(global_avg_pool(Tensor<double>({2, 3, 4, 4}))), 0.0);
}

TEST(Elementwise, IdentitiesAndOracle) {
  const auto x = random_tensor<double>({2, 3, 4, 5}, 20);
  const auto y = random_tensor<double>({2, 3, 4, 5}, 21);
  EXPECT_EQ(elementwise(x, Tensor<double>::ones(x.shape()), ElementwiseOp::mul), x);
  EXPECT_EQ(elementwise(x, Tensor<double>(x.shape()), ElementwiseOp::add), x);
  EXPECT_EQ(max_abs(elementwise(Tensor<double>(x.shape()), y, ElementwiseOp::mul)), 0.0);
  const auto p = elementwise(x, y, ElementwiseOp::mul);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(p[i], x[i] * y[i]);
  EXPECT_THROW(elementwise(x, Tensor<double>({1, 1, 1, 1}), ElementwiseOp::add), PreconditionError);
}
