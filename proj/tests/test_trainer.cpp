#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <limits>
#include <numeric>
#include <filesystem>
#include <fstream>

#include "effmod/serialize.hpp"
#include "effmod/trainer.hpp"

using namespace effmod;

namespace {

TrainConfig small_config(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch = 16;
  c.seed = 3;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("effmod_" + name)).string();
}

}  // namespace

TEST(Dataset, DeterministicAndBalanced) {
  const auto a = gen_dataset(4, 40, 4), b = gen_dataset(4, 40, 4), c = gen_dataset(5, 40, 4);
  EXPECT_TRUE(bit_identical(a.images, b.images));
  EXPECT_FALSE(bit_identical(a.images, c.images));
  std::vector<std::size_t> hist(4, 0);
  for (auto l : a.labels) ++hist[l];
  EXPECT_EQ(hist, (std::vector<std::size_t>{10, 10, 10, 10}));
  EXPECT_EQ(a.images.shape(), (Shape{40, 3, 32, 32}));
}

TEST(Dataset, InvalidSizesAreConfigErrors) {
  EXPECT_THROW(gen_dataset(0, 10, 4), ConfigError);
  EXPECT_THROW(gen_dataset(0, 10, 1), ConfigError);
}

TEST(Dataset, LinearLeastSquaresBaselineLearnsNoiselessTask) {
  DatasetOptions clean;
  clean.noise = 0.0;
  const auto tr = gen_dataset(10, 800, 4, clean), te = gen_dataset(11, 400, 4, clean);
  const std::size_t d = 3 * 32 * 32;
  auto design = [&](const SyntheticDataset& ds) {
    Eigen::MatrixXd X(ds.size(), d + 1);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) X(i, j) = ds.images[i * d + j];
      X(i, d) = 1.0;
    }
    return X;
  };
  const Eigen::MatrixXd X = design(tr), Xt = design(te);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(tr.size(), 4);
  for (std::size_t i = 0; i < tr.size(); ++i) Y(i, tr.labels[i]) = 1.0;
  // ridge regression in dual form: W = X^T (X X^T + lambda I)^-1 Y
  const Eigen::MatrixXd K = X * X.transpose() + 1e-1 * Eigen::MatrixXd::Identity(tr.size(), tr.size());
  const Eigen::MatrixXd W = X.transpose() * K.ldlt().solve(Y);
  const Eigen::MatrixXd P = Xt * W;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < te.size(); ++i) {
    Eigen::Index arg;
    P.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    correct += static_cast<std::size_t>(arg) == te.labels[i];
  }
  EXPECT_GT(static_cast<double>(correct) / te.size(), 0.70);
}

TEST(Schedule, CosineEndpointsAndWarmup) {
  EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0.0, 0, 100, 0), 1.0);
  EXPECT_NEAR(cosine_lr(1.0, 0.0, 50, 100, 0), 0.5, 1e-12);
  EXPECT_NEAR(cosine_lr(1.0, 0.1, 100, 100, 0), 0.1, 1e-12);
  EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0.0, 0, 100, 10), 0.1);
  EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0.0, 10, 100, 10), 1.0);
}

TEST(Train, ZeroLearningRateLeavesLossUnchanged) {
  auto m = build_model<float>(preset("micro"), 1);
  const auto tr = gen_dataset(1, 64, 4), ev = gen_dataset(2, 32, 4);
  auto cfg = small_config(2);
  cfg.lr = 0.0;
  cfg.min_lr = 0.0;
  const auto h = train(m, tr, ev, cfg);
  EXPECT_NEAR(h.epochs.back().eval_loss, h.epochs.front().eval_loss, 1e-9);
}

TEST(Train, OneSmallStepDecreasesSampleLoss) {
  auto m = build_model<float>(preset("micro"), 2);
  const auto ds = gen_dataset(3, 4, 4);
  const std::vector<std::size_t> idx{1};
  const auto x = ds.batch(idx, 0, 1);
  const auto y = ds.batch_labels(idx, 0, 1);
  AdamWConfig ac;
  ac.weight_decay = 0.0;
  AdamW<float> opt(m, ac);
  const double before = train_step(m, opt, x, y, 1e-4, {});
  Tape<float> tape(false);
  const double after = tape.value(ops::softmax_cross_entropy(tape, model_forward(tape, tape.view(x), m), y))[0];
  EXPECT_LT(after, before);
}

TEST(Train, EveryParameterReceivesGradient) {
  auto m = build_model<float>(preset("micro"), 4);
  const auto ds = gen_dataset(5, 16, 4);
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  m.zero_grad();
  Tape<float> tape;
  ForwardOptions f;
  f.training = true;
  tape.backward(ops::softmax_cross_entropy(tape, model_forward(tape, tape.constant(ds.batch(idx, 0, 16)), m, f),
                                           ds.batch_labels(idx, 0, 16)));
  m.visit_const("", [](const std::string& name, ParamRole, const Param<float>& p) {
    double norm = 0;
    for (float g : p.grad.vec()) norm += static_cast<double>(g) * g;
    EXPECT_GT(norm, 0.0) << name;
  });
}

TEST(Train, DeterministicPerSeed) {
  const auto tr = gen_dataset(6, 64, 4), ev = gen_dataset(7, 32, 4);
  auto run = [&] {
    auto m = build_model<float>(preset("micro"), 8);
    return train(m, tr, ev, small_config(2)).csv();
  };
  EXPECT_EQ(run(), run());
}

TEST(Train, EvaluationIsRepeatable) {
  const auto m = build_model<float>(preset("micro"), 9);
  const auto ev = gen_dataset(10, 32, 4);
  const auto a = evaluate(m, ev, {}), b = evaluate(m, ev, {});
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.accuracy, b.accuracy);
}

TEST(Train, ClassMismatchIsConfigError) {
  auto m = build_model<float>(preset("micro"), 1);
  const auto ds = gen_dataset(1, 12, 3);
  EXPECT_THROW(train(m, ds, ds, small_config(1)), ConfigError);
}

TEST(Train, NonFiniteLossAbortsWithDiagnostic) {
  auto m = build_model<float>(preset("micro"), 1);
  m.head.bias.value[0] = std::numeric_limits<float>::quiet_NaN();
  const auto ds = gen_dataset(1, 16, 4);
  try {
    train(m, ds, ds, small_config(1));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Ablation, SharedInitAndBothLossesDecrease) {
  const auto tr = gen_dataset(11, 128, 4), ev = gen_dataset(12, 32, 4);
  const auto r = ablate_fusion(preset("micro"), 13, tr, ev, small_config(3));
  EXPECT_TRUE(r.identical_init);
  EXPECT_EQ(r.params, build_model<float>(preset("micro"), 0).param_count());
  EXPECT_LT(r.mul.epochs.back().train_loss, r.mul.epochs[1].train_loss);
  EXPECT_LT(r.sum.epochs.back().train_loss, r.sum.epochs[1].train_loss);
  const auto csv = ablation_csv(r);
  EXPECT_NE(csv.find("\nmul,3,"), std::string::npos);
  EXPECT_NE(csv.find("\nsum,3,"), std::string::npos);
}

TEST(Serialize, RoundTripIsBitExact) {
  const auto a = build_model<float>(preset("micro"), 21);
  auto b = build_model<float>(preset("micro"), 22);
  const auto path = temp_path("roundtrip.bin");
  save_params(path, a);
  load_params(path, b);
  std::vector<const Param<float>*> pa, pb;
  a.visit_const("", [&](const std::string&, ParamRole, const Param<float>& p) { pa.push_back(&p); });
  b.visit_const("", [&](const std::string&, ParamRole, const Param<float>& p) { pb.push_back(&p); });
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bit_identical(pa[i]->value, pb[i]->value));
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "EFMODPRM");
  std::filesystem::remove(path);
}

TEST(Serialize, DoublePrecisionAndHeaderLayout) {
  const auto p = EfficientModParams<double>::make({2, 0, 1, 3, false});
  const auto path = temp_path("layout.bin");
  save_params(path, p);
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  // header 8 + 4 + 4; first array "f.weight": 4 + 8 + 32 + 1 + 4 doubles
  ASSERT_GE(bytes.size(), 16u + 4 + 8 + 32 + 1);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 5);  // five arrays
  EXPECT_EQ(bytes[16], 8);  // name length
  EXPECT_EQ(std::string(bytes.begin() + 20, bytes.begin() + 28), "f.weight");
  EXPECT_EQ(bytes[28], 2);       // n
  EXPECT_EQ(bytes[28 + 32], 1);  // dtype f64
  std::filesystem::remove(path);
}

TEST(Serialize, MismatchesRejected) {
  const auto path = temp_path("mismatch.bin");
  save_params(path, build_model<float>(preset("micro"), 1));
  auto other = build_model<float>(preset("xxs"), 1);
  EXPECT_THROW(load_params(path, other), ConfigError);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXXXXXX", 8);
  }
  auto same = build_model<float>(preset("micro"), 1);
  EXPECT_THROW(load_params(path, same), ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_params(path, same), ConfigError);
}
