#pragma once

// Learnable layer primitives and the parameter-bundle machinery shared by
// every block: naming, role tagging, initialization, and precision casts.

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "effmod/autodiff.hpp"
#include "effmod/kernels.hpp"
#include "effmod/ops.hpp"
#include "effmod/random.hpp"

namespace effmod {

/// What a parameter array is, for initialization and accounting.
enum class ParamRole {
  weight,       ///< conv / linear weight (counted by the bias-free closed forms)
  bias,         ///< additive bias
  norm_gamma,   ///< layer-norm scale
  norm_beta,    ///< layer-norm shift
  layer_scale,  ///< per-channel residual branch scale
};

inline const char* to_string(ParamRole r) {
  switch (r) {
    case ParamRole::weight: return "weight";
    case ParamRole::bias: return "bias";
    case ParamRole::norm_gamma: return "norm_gamma";
    case ParamRole::norm_beta: return "norm_beta";
    case ParamRole::layer_scale: return "layer_scale";
  }
  return "?";
}

inline std::string join_name(std::string_view prefix, std::string_view name) {
  if (prefix.empty()) return std::string(name);
  return std::string(prefix) + "." + std::string(name);
}

/// Convolution (pointwise, depthwise, or dense) with optional bias.
template <class T>
struct ConvLayer {
  ConvSpec spec;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Param<T> weight;
  Param<T> bias;

  static ConvLayer make(std::size_t c_in, std::size_t c_out, ConvSpec spec, bool with_bias) {
    spec.validate();
    detail::require_config(c_in % spec.groups == 0 && c_out % spec.groups == 0,
                           "conv layer: groups " + std::to_string(spec.groups) + " must divide " +
                               std::to_string(c_in) + " and " + std::to_string(c_out));
    ConvLayer l;
    l.spec = spec;
    l.in_channels = c_in;
    l.out_channels = c_out;
    l.weight = Param<T>(Shape{c_out, c_in / spec.groups, spec.kernel, spec.kernel});
    if (with_bias) l.bias = Param<T>(Shape{c_out, 1, 1, 1});
    return l;
  }

  static ConvLayer pointwise(std::size_t c_in, std::size_t c_out, bool with_bias) {
    return make(c_in, c_out, ConvSpec::pointwise(), with_bias);
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    fn(join_name(prefix, "weight"), ParamRole::weight, weight);
    if (bias.present()) fn(join_name(prefix, "bias"), ParamRole::bias, bias);
  }

  template <class Self>
  static Var apply(Tape<T>& tape, Var x, Self& self) {
    return ops::conv2d(tape, x, tape.param(self.weight), tape.param(self.bias), self.spec);
  }

  Var operator()(Tape<T>& tape, Var x) { return apply(tape, x, *this); }
  Var operator()(Tape<T>& tape, Var x) const { return apply(tape, x, *this); }
};

/// Channel-axis layer norm.
template <class T>
struct NormLayer {
  Param<T> gamma;
  Param<T> beta;
  T eps = T(1e-6);

  static NormLayer make(std::size_t c) {
    NormLayer l;
    l.gamma = Param<T>(Shape{c, 1, 1, 1});
    l.beta = Param<T>(Shape{c, 1, 1, 1});
    return l;
  }

  template <class Fn>
  void visit(std::string_view prefix, Fn&& fn) {
    fn(join_name(prefix, "gamma"), ParamRole::norm_gamma, gamma);
    fn(join_name(prefix, "beta"), ParamRole::norm_beta, beta);
  }

  template <class Self>
  static Var apply(Tape<T>& tape, Var x, Self& self) {
    return ops::layer_norm(tape, x, tape.param(self.gamma), tape.param(self.beta), self.eps);
  }

  Var operator()(Tape<T>& tape, Var x) { return apply(tape, x, *this); }
  Var operator()(Tape<T>& tape, Var x) const { return apply(tape, x, *this); }
};

/// CRTP base for parameter bundles. Derived<T> provides `cfg`,
/// `static Derived make(const Config&)` (zero-filled arrays of the right
/// shapes) and `template <class Fn> void visit(std::string_view, Fn&&)`.
template <template <class> class Derived, class T>
struct ParamBundle {
  Derived<T>& self() { return static_cast<Derived<T>&>(*this); }
  const Derived<T>& self() const { return static_cast<const Derived<T>&>(*this); }

  /// fn(name, role, const Param<T>&).
  template <class Fn>
  void visit_const(std::string_view prefix, Fn&& fn) const {
    const_cast<Derived<T>&>(self()).visit(prefix, [&](const std::string& name, ParamRole role, Param<T>& p) {
      fn(name, role, std::as_const(p));
    });
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    self().visit("", [&](const std::string&, ParamRole, Param<T>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t param_count() const {
    std::size_t total = 0;
    visit_const("", [&](const std::string&, ParamRole, const Param<T>& p) { total += p.size(); });
    return total;
  }

  void zero_grad() {
    for (Param<T>* p : params()) p->zero_grad();
  }

  /// Truncated-normal(0.02) weights, zero biases, unit norm scales, and
  /// `layer_scale_init` for residual scales.
  void init(Rng& rng, double layer_scale_init = 1e-4) {
    self().visit("", [&](const std::string&, ParamRole role, Param<T>& p) {
      switch (role) {
        case ParamRole::weight:
          for (auto& v : p.value.vec()) v = static_cast<T>(rng.trunc_normal(0.02));
          break;
        case ParamRole::bias:
        case ParamRole::norm_beta: p.value.fill(T(0)); break;
        case ParamRole::norm_gamma: p.value.fill(T(1)); break;
        case ParamRole::layer_scale: p.value.fill(static_cast<T>(layer_scale_init)); break;
      }
      p.zero_grad();
    });
  }

  /// Every array drawn uniformly from [lo, hi] (used by gradient checks,
  /// where the default init would leave most gradients tiny).
  void randomize(Rng& rng, double lo = -0.5, double hi = 0.5) {
    self().visit("", [&](const std::string&, ParamRole, Param<T>& p) {
      rng.fill_uniform(p.value, lo, hi);
      p.zero_grad();
    });
  }

  template <class U>
  Derived<U> cast() const {
    Derived<U> out = Derived<U>::make(self().cfg);
    std::vector<const Param<T>*> src;
    visit_const("", [&](const std::string&, ParamRole, const Param<T>& p) { src.push_back(&p); });
    std::size_t i = 0;
    out.visit("", [&](const std::string&, ParamRole, Param<U>& p) {
      p.value = src.at(i++)->value.template cast<U>();
      p.zero_grad();
    });
    return out;
  }
};

}  // namespace effmod
