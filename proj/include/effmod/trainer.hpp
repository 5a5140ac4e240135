#pragma once

// Desk-scale training: a synthetic oriented-bar classification task, AdamW
// with cosine decay, cross-entropy, and the mul -> sum fusion ablation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "effmod/model.hpp"

namespace effmod {

// ---------------------------------------------------------------------------
// Dataset

struct DatasetOptions {
  std::size_t size = 32;      ///< image side
  double noise = 0.15;        ///< Gaussian pixel noise std; 0 for the noiseless variant
  double jitter = 4.0;        ///< max center offset in pixels
  double length = 20.0;       ///< mean bar length
  double thickness = 1.5;     ///< bar width in pixels
};

struct SyntheticDataset {
  std::uint64_t seed = 0;
  std::size_t classes = 0;
  Tensor<float> images;             ///< [n, 3, size, size]
  std::vector<std::size_t> labels;  ///< labels[i] = i % classes

  std::size_t size() const { return labels.size(); }

  /// Copies the samples listed in `idx` into a batch.
  Tensor<float> batch(const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) const {
    const std::size_t per = images.c() * images.h() * images.w();
    Tensor<float> out(Shape{end - begin, images.c(), images.h(), images.w()});
    for (std::size_t i = begin; i < end; ++i)
      std::copy_n(images.data() + idx[i] * per, per, out.data() + (i - begin) * per);
    return out;
  }
  std::vector<std::size_t> batch_labels(const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> out;
    for (std::size_t i = begin; i < end; ++i) out.push_back(labels[idx[i]]);
    return out;
  }
};

/// Class k is a bar at angle k * 180 / classes degrees. Each sample draws a
/// center offset, length, per-channel color scale and pixel noise from a
/// stream keyed by (seed, sample index).
inline SyntheticDataset gen_dataset(std::uint64_t seed, std::size_t n, std::size_t classes,
                                    const DatasetOptions& opt = {}) {
  if (classes < 2) throw ConfigError("gen_dataset: classes must be >= 2");
  if (n == 0 || n % classes != 0) throw ConfigError("gen_dataset: n must be a positive multiple of classes");
  SyntheticDataset ds;
  ds.seed = seed;
  ds.classes = classes;
  const std::size_t S = opt.size;
  ds.images = Tensor<float>(Shape{n, 3, S, S});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % classes;
    ds.labels[i] = label;
    Rng rng(mix_key(seed, i));
    const double angle = std::numbers::pi * static_cast<double>(label) / static_cast<double>(classes);
    const double cx = (S - 1) / 2.0 + rng.uniform(-opt.jitter, opt.jitter);
    const double cy = (S - 1) / 2.0 + rng.uniform(-opt.jitter, opt.jitter);
    const double half = 0.5 * opt.length * rng.uniform(0.8, 1.2);
    const double dx = std::cos(angle), dy = -std::sin(angle);
    double color[3];
    for (double& c : color) c = rng.uniform(0.5, 1.0);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double px = static_cast<double>(x) - cx, py = static_cast<double>(y) - cy;
        const double along = px * dx + py * dy;
        const double across = std::abs(-px * dy + py * dx);
        const double t = std::clamp(std::abs(along) - half, 0.0, 1e9);
        const double dist = std::hypot(t, across);
        const double v = std::clamp(opt.thickness / 2.0 + 0.5 - dist, 0.0, 1.0);  // 1-pixel soft edge
        for (std::size_t c = 0; c < 3; ++c) {
          double pix = v * color[c];
          if (opt.noise > 0) pix += opt.noise * rng.normal();
          ds.images.at(i, c, y, x) = static_cast<float>(pix);
        }
      }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Decoupled weight decay Adam. Decay applies to conv/linear weights only.
template <class T>
class AdamW {
 public:
  AdamW(Model<T>& model, AdamWConfig cfg) : cfg_(cfg) {
    model.visit("", [&](const std::string&, ParamRole role, Param<T>& p) {
      slots_.push_back({&p, std::vector<double>(p.size(), 0.0), std::vector<double>(p.size(), 0.0),
                        role == ParamRole::weight});
    });
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      auto& w = s.p->value;
      const auto& g = s.p->grad;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        double wi = static_cast<double>(w[i]);
        if (s.decay) wi -= lr * cfg_.weight_decay * wi;
        wi -= lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + cfg_.eps);
        w[i] = static_cast<T>(wi);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  struct Slot {
    Param<T>* p;
    std::vector<double> m, v;
    bool decay;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

/// Linear warmup then cosine decay from base_lr to min_lr.
inline double cosine_lr(double base_lr, double min_lr, std::size_t step, std::size_t total, std::size_t warmup) {
  if (total == 0) return base_lr;
  if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::size_t>(1, total - warmup));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double lr = 2e-3;
  double min_lr = 1e-5;
  std::size_t warmup_epochs = 1;
  AdamWConfig adamw;
  std::uint64_t seed = 0;  ///< data order and stochastic depth
  FuseOp op = FuseOp::mul;
  FusionMode mode = FusionMode::repeat;
};

struct EpochRecord {
  std::size_t epoch = 0;  ///< 0 is the untrained model
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double eval_loss = 0;
  double eval_acc = 0;
};

struct TrainHistory {
  TrainConfig config;
  std::string model;
  std::vector<EpochRecord> epochs;

  std::string csv() const {
    std::ostringstream os;
    os << "# model=" << model << " seed=" << config.seed << " epochs=" << config.epochs << " batch=" << config.batch
       << " lr=" << config.lr << " weight_decay=" << config.adamw.weight_decay
       << " op=" << (config.op == FuseOp::mul ? "mul" : "sum") << "\n";
    os << "epoch,lr,train_loss,train_acc,eval_loss,eval_acc\n";
    os << std::setprecision(9);
    for (const auto& e : epochs)
      os << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_acc << ',' << e.eval_loss << ','
         << e.eval_acc << '\n';
    return os.str();
  }
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

inline std::size_t argmax_row(const Tensor<float>& logits, std::size_t i) {
  const std::size_t k = logits.c();
  return static_cast<std::size_t>(std::max_element(logits.data() + i * k, logits.data() + (i + 1) * k) -
                                  (logits.data() + i * k));
}

/// Eval-mode loss and accuracy over the dataset in index order.
inline EvalResult evaluate(const Model<float>& model, const SyntheticDataset& ds, const ForwardOptions& fwd,
                           std::size_t batch = 64) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  ForwardOptions opt = fwd;
  opt.training = false;
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < ds.size(); b += batch) {
    const std::size_t e = std::min(ds.size(), b + batch);
    Tape<float> tape(false);
    Var logits = model_forward(tape, tape.view(ds.batch(idx, b, e)), model, opt);
    const auto labels = ds.batch_labels(idx, b, e);
    loss += static_cast<double>(tape.value(ops::softmax_cross_entropy(tape, logits, labels))[0]) *
            static_cast<double>(e - b);
    for (std::size_t i = 0; i < e - b; ++i) correct += argmax_row(tape.value(logits), i) == labels[i];
  }
  return {loss / static_cast<double>(ds.size()), static_cast<double>(correct) / static_cast<double>(ds.size())};
}

/// One optimizer step on a batch; returns the batch loss before the update.
inline double train_step(Model<float>& model, AdamW<float>& opt, const Tensor<float>& x,
                         const std::vector<std::size_t>& labels, double lr, const ForwardOptions& fwd,
                         std::size_t* correct = nullptr) {
  model.zero_grad();
  Tape<float> tape;
  ForwardOptions f = fwd;
  f.training = true;
  Var logits = model_forward(tape, tape.constant(x), model, f);
  Var loss = ops::softmax_cross_entropy(tape, logits, labels);
  const double value = tape.value(loss)[0];
  if (!std::isfinite(value))
    throw NumericalError("train: non-finite loss at step " + std::to_string(f.step) + " (lr " + std::to_string(lr) + ")");
  if (correct)
    for (std::size_t i = 0; i < labels.size(); ++i) *correct += argmax_row(tape.value(logits), i) == labels[i];
  tape.backward(loss);
  opt.step(lr);
  return value;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainHistory train(Model<float>& model, const SyntheticDataset& train_set, const SyntheticDataset& eval_set,
                          const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  if (model.cfg.classes() != train_set.classes)
    throw ConfigError("train: model head has " + std::to_string(model.cfg.classes()) + " classes, dataset has " +
                      std::to_string(train_set.classes));
  if (cfg.batch == 0) throw ConfigError("train: batch must be positive");
  TrainHistory hist;
  hist.config = cfg;
  hist.model = model.cfg.name();
  AdamW<float> opt(model, cfg.adamw);
  ForwardOptions fwd;
  fwd.mode = cfg.mode;
  fwd.op = cfg.op;
  fwd.seed = cfg.seed;

  const std::size_t steps_per_epoch = (train_set.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  const std::size_t warmup = steps_per_epoch * cfg.warmup_epochs;

  {
    const auto ev = evaluate(model, eval_set, fwd);
    const auto tr = evaluate(model, train_set, fwd);
    EpochRecord rec{0, 0.0, tr.loss, tr.accuracy, ev.loss, ev.accuracy};
    hist.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  std::vector<std::size_t> idx(train_set.size());
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(idx.begin(), idx.end(), 0);
    Rng order(mix_key(cfg.seed, 0x5eed0000 + epoch));
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[order.below(i + 1)]);
    double loss_sum = 0;
    std::size_t correct = 0;
    double lr = cfg.lr;
    for (std::size_t b = 0; b < idx.size(); b += cfg.batch) {
      const std::size_t e = std::min(idx.size(), b + cfg.batch);
      lr = cosine_lr(cfg.lr, cfg.min_lr, step, total, warmup);
      fwd.step = step;
      loss_sum += train_step(model, opt, train_set.batch(idx, b, e), train_set.batch_labels(idx, b, e), lr, fwd,
                             &correct) *
                  static_cast<double>(e - b);
      ++step;
    }
    const auto ev = evaluate(model, eval_set, fwd);
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(idx.size()),
                    static_cast<double>(correct) / static_cast<double>(idx.size()), ev.loss, ev.accuracy};
    hist.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return hist;
}

struct AblationResult {
  TrainHistory mul;
  TrainHistory sum;
  std::size_t params = 0;
  bool identical_init = false;
};

/// Trains the same architecture twice from one seed, once with the
/// multiplicative fusion and once with addition.
inline AblationResult ablate_fusion(const Architecture& arch, std::uint64_t model_seed,
                                    const SyntheticDataset& train_set, const SyntheticDataset& eval_set,
                                    TrainConfig cfg, const EpochCallback& on_epoch = {}) {
  AblationResult out;
  auto mul_model = build_model<float>(arch, model_seed);
  auto sum_model = build_model<float>(arch, model_seed);
  std::vector<const Param<float>*> a, b;
  mul_model.visit_const("", [&](const std::string&, ParamRole, const Param<float>& p) { a.push_back(&p); });
  sum_model.visit_const("", [&](const std::string&, ParamRole, const Param<float>& p) { b.push_back(&p); });
  out.identical_init = a.size() == b.size();
  for (std::size_t i = 0; i < a.size() && out.identical_init; ++i) out.identical_init = bit_identical(a[i]->value, b[i]->value);
  out.params = mul_model.param_count();
  if (sum_model.param_count() != out.params) throw ConfigError("ablate_fusion: variants differ in parameter count");
  cfg.op = FuseOp::mul;
  out.mul = train(mul_model, train_set, eval_set, cfg, on_epoch);
  cfg.op = FuseOp::sum;
  out.sum = train(sum_model, train_set, eval_set, cfg, on_epoch);
  return out;
}

inline std::string ablation_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "variant,epoch,lr,train_loss,train_acc,eval_loss,eval_acc\n" << std::setprecision(9);
  for (const auto* h : {&r.mul, &r.sum})
    for (const auto& e : h->epochs)
      os << (h == &r.mul ? "mul" : "sum") << ',' << e.epoch << ',' << e.lr << ',' << e.train_loss << ','
         << e.train_acc << ',' << e.eval_loss << ',' << e.eval_acc << '\n';
  return os.str();
}

}  // namespace effmod
