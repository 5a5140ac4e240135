#include <gtest/gtest.h>

#include <cmath>

#include "effmod/gradcheck.hpp"

using namespace effmod;

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  const auto x = random_tensor<double>({2, 3, 4, 5}, 1);
  Var xv = tape.input(x);
  tape.backward(ops::sum(tape, xv));
  EXPECT_EQ(tape.grad(xv), Tensor<double>::ones(x.shape()));
}

TEST(Backward, SquareGivesTwiceInput) {
  Tape<double> tape;
  const auto x = random_tensor<double>({1, 2, 3, 3}, 2);
  Var xv = tape.input(x);
  tape.backward(ops::sum(tape, ops::mul(tape, xv, xv)));
  const auto g = tape.grad(xv);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(g[i], 2 * x[i]);
}

TEST(Backward, ConvWeightMatchesFiniteDifferences) {
  const auto x = random_tensor<double>({2, 3, 6, 6}, 3);
  const auto w = random_tensor<double>({4, 3, 3, 3}, 4);
  const ConvSpec spec = ConvSpec::same(3);
  Tape<double> tape;
  Var wv = tape.input(w);
  tape.backward(ops::sum(tape, ops::conv2d(tape, tape.constant(x), wv, Var{}, spec)));
  auto f = [&](const Tensor<double>& wt) {
    double s = 0;
    for (double v : conv2d(x, wt, spec).vec()) s += v;
    return s;
  };
  EXPECT_LT(max_relative_error(tape.grad(wv), finite_diff_grad(f, w)), 1e-6);
}

TEST(Backward, DisconnectedLeafHasZeroGradient) {
  Tape<double> tape;
  Var a = tape.input(random_tensor<double>({1, 2, 2, 2}, 5));
  Var b = tape.input(random_tensor<double>({1, 2, 2, 2}, 6));
  tape.backward(ops::sum(tape, ops::gelu(tape, a)));
  EXPECT_EQ(max_abs(tape.grad(b)), 0.0);
}

TEST(Backward, ZeroSeedGivesZeroGradients) {
  auto params = EfficientModParams<double>::make({4, 0, 2, 3, true});
  Rng rng(8);
  params.randomize(rng);
  Tape<double> tape;
  Var x = tape.input(random_tensor<double>({1, 4, 5, 5}, 9));
  Var y = efficient_mod(tape, x, params);
  tape.backward(y, Tensor<double>(tape.value(y).shape()));
  EXPECT_EQ(max_abs(tape.grad(x)), 0.0);
  for (auto* p : params.params()) EXPECT_EQ(max_abs(p->grad), 0.0);
}

TEST(Backward, SeedShapeMismatchIsPrecondition) {
  Tape<double> tape;
  Var x = tape.input(Tensor<double>({1, 2, 2, 2}));
  EXPECT_THROW(tape.backward(x, Tensor<double>({1, 1, 1, 1})), PreconditionError);
}

TEST(Backward, FanOutAccumulates) {
  Tape<double> tape;
  const auto x = random_tensor<double>({1, 1, 2, 2}, 10);
  Var xv = tape.input(x);
  Var y = ops::add(tape, ops::gelu(tape, xv), ops::mul(tape, xv, xv));
  tape.backward(ops::sum(tape, y));
  const auto g = tape.grad(xv);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i], gelu_derivative(x[i]) + 2 * x[i], 1e-14);
}

TEST(Backward, LinearityAcrossIndependentTapes) {
  const auto x = random_tensor<double>({1, 3, 4, 4}, 11);
  auto grad_of = [&](int which) {
    Tape<double> t;
    Var xv = t.input(x);
    Var fa = ops::sum(t, ops::gelu(t, xv));
    Var fb = ops::sum(t, ops::mul(t, xv, ops::sigmoid(t, xv)));
    Var out = which == 0 ? fa : which == 1 ? fb : ops::add(t, fa, fb);
    t.backward(out);
    return t.grad(xv);
  };
  const auto ga = grad_of(0), gb = grad_of(1), gab = grad_of(2);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(gab[i], ga[i] + gb[i], 1e-14);
}

TEST(Backward, InferenceTapeRecordsNoRules) {
  Tape<double> tape(false);
  Var x = tape.input(random_tensor<double>({1, 1, 2, 2}, 12));
  EXPECT_FALSE(tape.requires_grad(ops::gelu(tape, x)));
}

TEST(FiniteDiff, SumGivesOnes) {
  const auto x = random_tensor<double>({1, 2, 3, 3}, 13);
  auto f = [](const Tensor<double>& t) {
    double s = 0;
    for (double v : t.vec()) s += v;
    return s;
  };
  const auto g = finite_diff_grad(f, x);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], 1.0, 1e-9);
}

TEST(FiniteDiff, HalfSquaredNormGivesX) {
  const auto x = random_tensor<double>({1, 1, 4, 4}, 14);
  auto f = [](const Tensor<double>& t) {
    double s = 0;
    for (double v : t.vec()) s += 0.5 * v * v;
    return s;
  };
  const auto g = finite_diff_grad(f, x);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], x[i], 1e-9);
}

TEST(FiniteDiff, GeluSlopeAtOne) {
  // Phi(1) + phi(1) = 0.8413447461 + 0.2419707245
  auto f = [](const Tensor<double>& t) { return gelu(t[0]); };
  const auto g = finite_diff_grad(f, Tensor<double>({1, 1, 1, 1}, 1.0));
  EXPECT_NEAR(g[0], 1.0833154706, 1e-8);
  EXPECT_NEAR(gelu_derivative(1.0), 1.0833154706, 1e-9);
}

TEST(FiniteDiff, NonPositiveEpsIsPrecondition) {
  auto f = [](const Tensor<double>& t) { return t[0]; };
  EXPECT_THROW(finite_diff_grad(f, Tensor<double>({1, 1, 1, 1}), 0.0), PreconditionError);
}

TEST(GradCheck, EfficientModReferenceShape) {
  GradCheckOptions opt;
  opt.expansion = 2;
  opt.kernel = 3;
  const auto r = grad_check(BlockKind::efficient_mod, {1, 4, 6, 6}, 1e-5, opt);
  EXPECT_TRUE(r.pass()) << r.table();
}

TEST(GradCheck, AttentionOneHeadFiveTokens) {
  GradCheckOptions opt;
  opt.heads = 1;
  const auto r = grad_check(BlockKind::attention, {1, 5, 4, 1}, 1e-5, opt);
  EXPECT_TRUE(r.pass()) << r.table();
}

TEST(GradCheck, ReportListsInputAndEveryParameter) {
  const auto r = grad_check(BlockKind::mbconv, {1, 2, 4, 4});
  ASSERT_FALSE(r.entries.empty());
  EXPECT_EQ(r.entries.front().name, "input");
  EXPECT_EQ(r.entries.size(), 1u + 6u);
  EXPECT_NE(r.table().find("expand.weight"), std::string::npos);
}

TEST(GradCheck, UnknownKindIsConfigError) { EXPECT_THROW(parse_block_kind("conv9"), ConfigError); }

TEST(GradCheck, ReshapeAndRepeatGradientsIdentical) {
  auto params = EfficientModParams<double>::make({3, 0, 4, 3, true});
  Rng rng(15);
  params.randomize(rng);
  const auto x = random_tensor<double>({2, 3, 5, 5}, 16);
  std::vector<Tensor<double>> grads[2];
  for (int m = 0; m < 2; ++m) {
    params.zero_grad();
    Tape<double> tape;
    Var xv = tape.input(x);
    Var y = efficient_mod(tape, xv, params, m == 0 ? FusionMode::repeat : FusionMode::reshape);
    tape.backward(ops::sum(tape, y));
    grads[m].push_back(tape.grad(xv));
    for (auto* p : params.params()) grads[m].push_back(p->grad);
  }
  for (std::size_t i = 0; i < grads[0].size(); ++i) EXPECT_TRUE(bit_identical(grads[0][i], grads[1][i]));
}
