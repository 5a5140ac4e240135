#pragma once

// Finite-difference certification of the tape's backward rules.
//
// The analytic side runs in double. The finite-difference side evaluates the
// same function on a long double copy of the parameters so that its rounding
// noise (about ulp(f) / eps) stays well below the 1e-5 tolerance even for
// small gradient entries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "effmod/blocks.hpp"

namespace effmod {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per element.
template <class T, class F>
Tensor<T> finite_diff_grad(F&& f, Tensor<T> x, T eps = T(1e-5)) {
  detail::require(eps > T(0), "finite_diff_grad: eps must be positive");
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x[i];
    x[i] = orig + eps;
    const T up = static_cast<T>(f(std::as_const(x)));
    x[i] = orig - eps;
    const T down = static_cast<T>(f(std::as_const(x)));
    x[i] = orig;
    g[i] = (up - down) / (T(2) * eps);
  }
  return g;
}

/// |a - b| / max(|a|, |b|, floor), maximized over elements.
template <class A, class B>
double max_relative_error(const Tensor<A>& a, const Tensor<B>& b, double floor = 1e-8) {
  detail::require(a.shape() == b.shape(), "max_relative_error: shape mismatch");
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return worst;
}

enum class BlockKind { efficient_mod, van, focal, mbconv, se, attention, patch_embed, residual };

inline const std::vector<std::pair<std::string, BlockKind>>& block_kinds() {
  static const std::vector<std::pair<std::string, BlockKind>> kinds{
      {"efficient_mod", BlockKind::efficient_mod}, {"van", BlockKind::van},
      {"focal", BlockKind::focal},                 {"mbconv", BlockKind::mbconv},
      {"se", BlockKind::se},                       {"attention", BlockKind::attention},
      {"patch_embed", BlockKind::patch_embed},     {"residual", BlockKind::residual},
  };
  return kinds;
}

inline BlockKind parse_block_kind(const std::string& name) {
  for (const auto& [n, k] : block_kinds())
    if (n == name) return k;
  std::string known;
  for (const auto& [n, k] : block_kinds()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown block kind '" + name + "' (known: " + known + ")");
}

inline std::string to_string(BlockKind k) {
  for (const auto& [n, kind] : block_kinds())
    if (kind == k) return n;
  return "?";
}

struct GradCheckOptions {
  std::size_t expansion = 2;               ///< EfficientMod r / MBConv r
  std::size_t kernel = 3;                  ///< depthwise kernel for EfficientMod / MBConv
  std::size_t heads = 1;                   ///< attention heads
  std::vector<std::size_t> focal_kernels{3, 5};
  std::size_t se_reduction = 2;
  std::size_t patch_out = 4;               ///< patch embed output channels
  std::size_t patch_kernel = 3, patch_stride = 2, patch_padding = 1;
  FusionMode mode = FusionMode::repeat;
  FuseOp op = FuseOp::mul;
  std::uint64_t seed = 7;
  double eps = 1e-5;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  std::size_t count = 0;
};

struct GradCheckReport {
  std::string block;
  Shape shape;
  double tolerance = 0;
  std::vector<GradCheckEntry> entries;

  std::size_t comparisons() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.count;
    return n;
  }
  const GradCheckEntry& worst() const {
    return *std::max_element(entries.begin(), entries.end(),
                             [](const auto& a, const auto& b) { return a.max_rel_err < b.max_rel_err; });
  }
  bool pass() const {
    for (const auto& e : entries)
      if (!(e.max_rel_err < tolerance)) return false;
    return true;
  }

  std::string table() const {
    std::ostringstream os;
    std::size_t width = 9;
    for (const auto& e : entries) width = std::max(width, e.name.size());
    os << "gradcheck " << block << " input " << to_string(shape) << " tol " << std::scientific
       << std::setprecision(1) << tolerance << "\n";
    os << std::left << std::setw(static_cast<int>(width)) << "parameter" << "  " << std::setw(8) << "count"
       << "  " << std::setw(11) << "max_rel_err" << "  result\n";
    for (const auto& e : entries)
      os << std::left << std::setw(static_cast<int>(width)) << e.name << "  " << std::setw(8) << e.count << "  "
         << std::scientific << std::setprecision(3) << std::setw(11) << e.max_rel_err << "  "
         << (e.max_rel_err < tolerance ? "pass" : "FAIL") << "\n";
    os << (pass() ? "PASS" : "FAIL") << " (" << comparisons() << " comparisons, worst " << worst().name << ")\n";
    return os.str();
  }
};

namespace detail {

/// Compares tape gradients of sum(w * fwd(x)) against central differences,
/// for the input and every parameter array of the bundle.
template <template <class> class Bundle, class Cfg, class Fwd>
GradCheckReport check_bundle(const std::string& name, const Cfg& cfg, Shape in, Fwd&& fwd,
                             const GradCheckOptions& opt, double tol) {
  using L = long double;
  Rng rng(opt.seed);
  auto params = Bundle<double>::make(cfg);
  params.randomize(rng);
  const auto x = random_tensor<double>(in, mix_key(opt.seed, 1));

  GradCheckReport report{name, in, tol, {}};
  Tape<double> tape;
  Var xv = tape.input(x);
  Var y = fwd(tape, xv, params);
  const auto weights = random_tensor<double>(tape.value(y).shape(), mix_key(opt.seed, 2));
  tape.backward(ops::weighted_sum(tape, y, weights));

  auto lp = params.template cast<L>();
  const auto wl = weights.template cast<L>();
  const Tensor<L> xl = x.template cast<L>();
  const L eps = static_cast<L>(opt.eps);
  auto f_input = [&](const Tensor<L>& xi) {
    Tape<L> t(false);
    return t.value(ops::weighted_sum(t, fwd(t, t.view(xi), lp), wl))[0];
  };
  const auto dx_fd = finite_diff_grad<L>(f_input, xl, eps);
  report.entries.push_back({"input", max_relative_error(tape.grad(xv), dx_fd), x.size()});

  std::vector<std::pair<std::string, Param<double>*>> analytic;
  params.visit("", [&](const std::string& n, ParamRole, Param<double>& p) { analytic.emplace_back(n, &p); });
  std::size_t idx = 0;
  lp.visit("", [&](const std::string&, ParamRole, Param<L>& p) {
    auto f_param = [&](const Tensor<L>& v) {
      Tensor<L> saved = std::exchange(p.value, v);
      Tape<L> t(false);
      const L r = t.value(ops::weighted_sum(t, fwd(t, t.view(xl), lp), wl))[0];
      p.value = std::move(saved);
      return r;
    };
    const auto fd = finite_diff_grad<L>(f_param, p.value, eps);
    const auto& [pname, ap] = analytic.at(idx++);
    report.entries.push_back({pname, max_relative_error(ap->grad, fd), fd.size()});
  });
  return report;
}

}  // namespace detail

/// Gradient check of one block kind at the given input shape. For attention
/// the shape is token-major [n, tokens, channels, 1].
inline GradCheckReport grad_check(BlockKind kind, Shape shape, double tol = 1e-5, const GradCheckOptions& opt = {}) {
  const std::string name = to_string(kind);
  const std::size_t c = shape.c;
  switch (kind) {
    case BlockKind::efficient_mod:
      return detail::check_bundle<EfficientModParams>(
          name, EfficientModConfig{c, 0, opt.expansion, opt.kernel, true}, shape,
          [&](auto& t, Var x, auto& p) { return efficient_mod(t, x, p, opt.mode, opt.op); }, opt, tol);
    case BlockKind::van:
      return detail::check_bundle<VANParams>(
          name, VANConfig{c, true}, shape, [](auto& t, Var x, auto& p) { return van(t, x, p); }, opt, tol);
    case BlockKind::focal:
      return detail::check_bundle<FocalParams>(
          name, FocalConfig{c, opt.focal_kernels, true}, shape,
          [](auto& t, Var x, auto& p) { return focal_context(t, x, p); }, opt, tol);
    case BlockKind::mbconv:
      return detail::check_bundle<MBConvParams>(
          name, MBConvConfig{c, opt.expansion, opt.kernel, true}, shape,
          [](auto& t, Var x, auto& p) { return mbconv(t, x, p); }, opt, tol);
    case BlockKind::se:
      return detail::check_bundle<SEParams>(
          name, SEConfig{c, opt.se_reduction, true}, shape,
          [](auto& t, Var x, auto& p) { return squeeze_excite(t, x, p); }, opt, tol);
    case BlockKind::attention:
      return detail::check_bundle<AttentionParams>(
          name, AttentionConfig{shape.h, opt.heads, 2.0, true}, shape,
          [](auto& t, Var x, auto& p) { return attention_tokens(t, x, p); }, opt, tol);
    case BlockKind::patch_embed:
      return detail::check_bundle<PatchEmbedParams>(
          name,
          PatchEmbedConfig{c, opt.patch_out, opt.patch_kernel, opt.patch_stride, opt.patch_padding, true}, shape,
          [](auto& t, Var x, auto& p) { return patch_embed(t, x, p); }, opt, tol);
    case BlockKind::residual:
      return detail::check_bundle<ModBlock>(
          name, ModBlockConfig{ResidualConfig{c, 0.5, 0.1}, EfficientModConfig{c, 0, opt.expansion, opt.kernel, true}},
          shape, [&](auto& t, Var x, auto& p) { return mod_block(t, x, p, false, DropPathKey{}, opt.mode, opt.op); },
          opt, tol);
  }
  throw ConfigError("grad_check: unhandled block kind");
}

/// Three small input shapes per block kind used for certification runs.
inline std::vector<Shape> gradcheck_shapes(BlockKind kind) {
  switch (kind) {
    case BlockKind::attention:
      return {{1, 5, 4, 1}, {2, 3, 6, 1}, {1, 7, 2, 1}};
    case BlockKind::se:
      return {{1, 4, 3, 3}, {2, 6, 4, 4}, {1, 8, 2, 5}};
    case BlockKind::patch_embed:
      return {{1, 3, 8, 8}, {2, 2, 6, 6}, {1, 4, 5, 7}};
    default:
      return {{1, 4, 6, 6}, {2, 2, 5, 5}, {1, 6, 4, 7}};
  }
}

}  // namespace effmod
