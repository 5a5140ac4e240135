#pragma once

// Parameter and MAC accounting. One MAC counts as one FLOP unit. A layer's
// MACs are its output positions times its per-position weight multiplies;
// attention adds t^2 c for Q K^T and again for A V. Norms, softmax and
// elementwise work are not counted.

#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <gmpxx.h>

#include "effmod/model.hpp"

namespace effmod {

struct LayerRow {
  std::string name;
  std::string kind;
  std::size_t params_with_bias = 0;
  std::size_t params_no_bias = 0;  ///< weights only: no bias, norm affine or layer scale
  std::uint64_t macs = 0;
  std::size_t stage = 0;           ///< 1-based; 0 for stem, 5 for head
};

struct ClosedFormCheck {
  std::string name;
  std::size_t C = 0, r = 0, k = 0, H = 0, W = 0;
  std::uint64_t counted_params = 0, formula_params = 0;
  std::uint64_t counted_macs = 0, formula_macs = 0;
  bool exact() const { return counted_params == formula_params && counted_macs == formula_macs; }
};

struct ComplexityReport {
  std::string model;
  std::size_t resolution = 0;
  std::vector<LayerRow> rows;
  std::vector<ClosedFormCheck> closed_form;

  std::size_t params_with_bias() const {
    std::size_t s = 0;
    for (const auto& r : rows) s += r.params_with_bias;
    return s;
  }
  std::size_t params_no_bias() const {
    std::size_t s = 0;
    for (const auto& r : rows) s += r.params_no_bias;
    return s;
  }
  std::uint64_t macs() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) s += r.macs;
    return s;
  }
  /// Parameters (with bias) excluding the classifier head.
  std::size_t params_without_head() const {
    std::size_t s = 0;
    for (const auto& r : rows)
      if (r.stage != 5) s += r.params_with_bias;
    return s;
  }
  /// Parameters with bias per stage 1..4 (downsampling counted in the stage it feeds).
  std::vector<std::size_t> stage_params() const {
    std::vector<std::size_t> s(4, 0);
    for (const auto& r : rows)
      if (r.stage >= 1 && r.stage <= 4) s[r.stage - 1] += r.params_with_bias;
    return s;
  }

  std::string csv() const {
    std::ostringstream os;
    os << "name,kind,stage,params_with_bias,params_no_bias,macs\n";
    for (const auto& r : rows)
      os << r.name << ',' << r.kind << ',' << r.stage << ',' << r.params_with_bias << ',' << r.params_no_bias << ','
         << r.macs << '\n';
    return os.str();
  }

  std::string table(bool per_layer = false) const {
    std::ostringstream os;
    if (per_layer) {
      std::size_t w = 4;
      for (const auto& r : rows) w = std::max(w, r.name.size());
      os << std::left << std::setw(static_cast<int>(w)) << "name" << "  " << std::setw(12) << "kind" << std::right
         << std::setw(12) << "params" << std::setw(12) << "no_bias" << std::setw(14) << "macs" << "\n";
      for (const auto& r : rows)
        os << std::left << std::setw(static_cast<int>(w)) << r.name << "  " << std::setw(12) << r.kind << std::right
           << std::setw(12) << r.params_with_bias << std::setw(12) << r.params_no_bias << std::setw(14) << r.macs
           << "\n";
    }
    os << std::fixed << std::setprecision(3);
    os << "model " << model << " @ " << resolution << "x" << resolution << "\n";
    os << "params (with bias)   " << params_with_bias() / 1e6 << " M  (" << params_with_bias() << ")\n";
    os << "params (no bias)     " << params_no_bias() / 1e6 << " M  (" << params_no_bias() << ")\n";
    os << "params without head  " << params_without_head() / 1e6 << " M\n";
    os << "MACs                 " << macs() / 1e9 << " G  (" << macs() << ")\n";
    return os.str();
  }
};

/// 2(r+1)C^2 + k^2 C parameters and HW times that many MACs.
struct BlockComplexity {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

inline BlockComplexity closed_form_block_complexity(std::uint64_t C, std::uint64_t r, std::uint64_t k,
                                                    std::uint64_t H = 1, std::uint64_t W = 1) {
  detail::require(C > 0 && r > 0 && k > 0 && H > 0 && W > 0, "closed_form_block_complexity: all arguments must be positive");
  const std::uint64_t p = 2 * (r + 1) * C * C + k * k * C;
  return {p, H * W * p};
}

namespace detail {

class Counter {
 public:
  explicit Counter(ComplexityReport& rep) : rep_(rep) {}

  std::size_t stage = 0;

  template <class T>
  void conv(const std::string& name, const ConvLayer<T>& l, std::size_t out_h, std::size_t out_w) {
    std::string kind = "conv";
    if (l.spec.groups == l.in_channels && l.in_channels == l.out_channels && l.in_channels > 1) kind = "depthwise";
    else if (l.spec.kernel == 1) kind = "pointwise";
    const std::size_t w = l.weight.size();
    rep_.rows.push_back({name, kind, w + l.bias.size(), w, static_cast<std::uint64_t>(out_h) * out_w * w, stage});
  }

  template <class T>
  void norm(const std::string& name, const NormLayer<T>& l) {
    rep_.rows.push_back({name, "layer_norm", l.gamma.size() + l.beta.size(), 0, 0, stage});
  }

  template <class T>
  void scale(const std::string& name, const Param<T>& p) {
    rep_.rows.push_back({name, "layer_scale", p.size(), 0, 0, stage});
  }

  void matmuls(const std::string& name, std::uint64_t t, std::uint64_t c) {
    rep_.rows.push_back({name, "attn_matmul", 0, 0, 2 * t * t * c, stage});
  }

 private:
  ComplexityReport& rep_;
};

}  // namespace detail

/// Per-layer accounting of a built model at a square input resolution.
template <class T>
ComplexityReport analyze(const Model<T>& model, std::size_t res) {
  const std::size_t red = model.reduction();
  detail::require(res > 0 && res % red == 0,
                  "analyze: resolution " + std::to_string(res) + " is not divisible by " + std::to_string(red));
  ComplexityReport rep;
  rep.model = model.cfg.name();
  rep.resolution = res;
  detail::Counter cnt(rep);

  std::size_t hw = model.cfg.isotropic ? res / model.cfg.iso.patch : res / 4;
  cnt.stage = 0;
  cnt.conv("stem", model.stem, hw, hw);
  for (std::size_t si = 0; si < model.stages.size(); ++si) {
    const auto& st = model.stages[si];
    const std::string sp = "stages." + std::to_string(si);
    cnt.stage = si + 1;
    if (st.down) {
      hw /= 2;
      cnt.conv(sp + ".down", *st.down, hw, hw);
    }
    for (std::size_t b = 0; b < st.mods.size(); ++b) {
      const auto& m = st.mods[b];
      const std::string bp = sp + ".mod" + std::to_string(b);
      cnt.norm(bp + ".norm", m.wrap.norm);
      cnt.scale(bp + ".layer_scale", m.wrap.layer_scale);
      const std::size_t before = rep.rows.size();
      cnt.conv(bp + ".mod.f", m.body.f, hw, hw);
      cnt.conv(bp + ".mod.dw", m.body.dw, hw, hw);
      cnt.conv(bp + ".mod.g", m.body.g, hw, hw);
      cnt.conv(bp + ".mod.v", m.body.v, hw, hw);
      cnt.conv(bp + ".mod.p", m.body.p, hw, hw);
      ClosedFormCheck cf{bp, m.body.cfg.dim, m.body.cfg.expansion, m.body.cfg.kernel, hw, hw, 0, 0, 0, 0};
      for (std::size_t i = before; i < rep.rows.size(); ++i) {
        cf.counted_params += rep.rows[i].params_no_bias;
        cf.counted_macs += rep.rows[i].macs;
      }
      const auto f = closed_form_block_complexity(cf.C, cf.r, cf.k, hw, hw);
      cf.formula_params = f.params;
      cf.formula_macs = f.macs;
      rep.closed_form.push_back(cf);
    }
    for (std::size_t b = 0; b < st.mbconvs.size(); ++b) {
      const auto& m = st.mbconvs[b];
      const std::string bp = sp + ".mbconv" + std::to_string(b);
      cnt.norm(bp + ".norm", m.wrap.norm);
      cnt.scale(bp + ".layer_scale", m.wrap.layer_scale);
      cnt.conv(bp + ".mbconv.expand", m.body.expand, hw, hw);
      cnt.conv(bp + ".mbconv.dw", m.body.dw, hw, hw);
      cnt.conv(bp + ".mbconv.project", m.body.project, hw, hw);
    }
    for (std::size_t b = 0; b < st.attns.size(); ++b) {
      const auto& a = st.attns[b];
      const std::string bp = sp + ".attn" + std::to_string(b);
      cnt.norm(bp + ".norm1", a.norm1);
      cnt.conv(bp + ".qkv", a.qkv, hw, hw);
      cnt.matmuls(bp + ".matmul", hw * hw, a.cfg.dim);
      cnt.conv(bp + ".proj", a.proj, hw, hw);
      cnt.norm(bp + ".norm2", a.norm2);
      cnt.conv(bp + ".fc1", a.fc1, hw, hw);
      cnt.conv(bp + ".fc2", a.fc2, hw, hw);
    }
  }
  cnt.stage = 5;
  cnt.norm("head.norm", model.head_norm);
  cnt.conv("head.fc", model.head, 1, 1);
  return rep;
}

/// Analysis of an architecture without materializing initialized weights.
inline ComplexityReport analyze(const Architecture& arch, std::size_t res) {
  return analyze(Model<float>::make(arch), res);
}

/// Degree in x0 of x_l for the scalar chain x_{i+1} = x_i + a_i x_i^2 with
/// seeded nonzero integer a_i, expanded with exact big-integer coefficients.
inline std::size_t degree_probe(std::size_t layers, std::uint64_t seed = 0) {
  detail::require(layers <= 12, "degree_probe: layers must be <= 12, got " + std::to_string(layers));
  std::vector<mpz_class> x{0, 1};  // x0
  Rng rng(seed);
  for (std::size_t i = 0; i < layers; ++i) {
    long a = 0;
    while (a == 0) a = static_cast<long>(rng.below(7)) - 3;
    std::vector<mpz_class> sq(2 * x.size() - 1, 0);
    for (std::size_t p = 0; p < x.size(); ++p) {
      if (x[p] == 0) continue;
      for (std::size_t q = 0; q < x.size(); ++q) sq[p + q] += x[p] * x[q];
    }
    for (auto& c : sq) c *= a;
    for (std::size_t p = 0; p < x.size(); ++p) sq[p] += x[p];
    x = std::move(sq);
  }
  std::size_t deg = x.size() - 1;
  while (deg > 0 && x[deg] == 0) --deg;
  return deg;
}

}  // namespace effmod
