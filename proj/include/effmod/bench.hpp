#pragma once

// Wall-clock microbenchmarks: warmup, per-iteration timing on a monotonic
// clock, statistics from the stored sample vector, fixed worker budget.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <type_traits>
#include <vector>

#include "effmod/analyzer.hpp"
#include "effmod/parallel.hpp"

namespace effmod {

struct BenchProtocol {
  std::size_t warmup = 50;
  std::size_t iters = 4000;
  std::size_t threads = 1;
};

struct BenchResult {
  std::string experiment;
  std::string mode;
  std::string shape;
  double mean_ms = 0, std_ms = 0, p50_ms = 0, p90_ms = 0;
  std::size_t warmup = 0, iters = 0, threads = 0;
  std::vector<double> samples_ms;

  double cv() const { return mean_ms > 0 ? std_ms / mean_ms : 0.0; }
  bool unstable() const { return cv() > 0.20; }
};

/// Mean, standard deviation and nearest-rank percentiles; the samples are
/// sorted first so the result does not depend on their order.
inline void fill_statistics(BenchResult& r) {
  std::vector<double> s = r.samples_ms;
  detail::require(!s.empty(), "bench: no samples");
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / n;
  double var = 0;
  for (double v : s) var += (v - mean) * (v - mean);
  r.mean_ms = mean;
  r.std_ms = s.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  auto rank = [&](double q) { return s[static_cast<std::size_t>(std::ceil(q * n)) - 1]; };
  r.p50_ms = rank(0.50);
  r.p90_ms = rank(0.90);
}

namespace detail {

template <class T>
std::uint64_t fnv1a(const Tensor<T>& t) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
  for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) h = (h ^ bytes[i]) * 1099511628211ull;
  return h;
}

}  // namespace detail

/// Times `fn` under the protocol. When fn returns a Tensor, every output is
/// hashed and any change between iterations aborts with NumericalError.
template <class Fn>
BenchResult bench(Fn&& fn, const BenchProtocol& proto, std::string experiment = "", std::string mode = "",
                  std::string shape = "") {
  if (proto.iters == 0) throw ConfigError("bench: iters must be >= 1");
  if (proto.threads == 0) throw ConfigError("bench: threads must be >= 1");
  BenchResult r;
  r.experiment = std::move(experiment);
  r.mode = std::move(mode);
  r.shape = std::move(shape);
  r.warmup = proto.warmup;
  r.iters = proto.iters;
  r.threads = proto.threads;
  r.samples_ms.reserve(proto.iters);

  ScopedWorkerBudget budget(proto.threads);
  using Out = std::invoke_result_t<Fn&>;
  std::uint64_t reference = 0;
  bool have_reference = false;
  auto check = [&](const auto& out) {
    const std::uint64_t h = detail::fnv1a(out);
    if (!have_reference) {
      reference = h;
      have_reference = true;
    } else if (h != reference) {
      throw NumericalError("bench " + r.experiment + ": output changed between iterations (nondeterminism)");
    }
  };
  using Clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < proto.warmup + proto.iters; ++i) {
    if constexpr (std::is_void_v<Out>) {
      const auto t0 = Clock::now();
      fn();
      const auto t1 = Clock::now();
      if (i >= proto.warmup) r.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    } else {
      const auto t0 = Clock::now();
      Out out = fn();
      const auto t1 = Clock::now();
      if (i >= proto.warmup) r.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      check(out);
    }
  }
  fill_statistics(r);
  return r;
}

inline std::string bench_csv_header() {
  return "experiment,mode,shape,threads,warmup,iters,mean_ms,std_ms,p50_ms,p90_ms,cv,unstable\n";
}

inline std::string bench_csv_row(const BenchResult& r) {
  std::ostringstream os;
  os << std::setprecision(6) << r.experiment << ',' << r.mode << ',' << r.shape << ',' << r.threads << ','
     << r.warmup << ',' << r.iters << ',' << r.mean_ms << ',' << r.std_ms << ',' << r.p50_ms << ',' << r.p90_ms
     << ',' << r.cv() << ',' << (r.unstable() ? 1 : 0) << '\n';
  return os.str();
}

inline std::string bench_line(const BenchResult& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << r.experiment << " [" << r.mode << "] " << r.shape << ": mean "
     << r.mean_ms << " ms, std " << r.std_ms << ", p50 " << r.p50_ms << ", p90 " << r.p90_ms << " (" << r.iters
     << " iters, " << r.warmup << " warmup, " << r.threads << " threads)" << (r.unstable() ? " UNSTABLE" : "");
  return os.str();
}

struct FusionBench {
  BenchResult repeat;
  BenchResult reshape;
  double ratio() const { return repeat.mean_ms / reshape.mean_ms; }  ///< repeat / reshape
};

/// One EfficientMod block (c -> c, expansion r, k 7) timed under both fusion
/// modes on identical inputs, after checking the outputs are bit-identical.
inline FusionBench bench_fusion_modes(std::size_t C, std::size_t r, std::size_t H, std::size_t W,
                                      const BenchProtocol& proto, std::uint64_t seed = 0) {
  auto params = EfficientModParams<float>::make({C, 0, r, 7, true});
  Rng rng(seed);
  params.init(rng);
  const auto x = random_tensor<float>({1, C, H, W}, mix_key(seed, 1));
  const auto a = efficient_mod_block(x, params, FusionMode::repeat);
  const auto b = efficient_mod_block(x, params, FusionMode::reshape);
  if (!bit_identical(a, b)) throw NumericalError("bench_fusion_modes: repeat and reshape outputs differ");
  const std::string shape = "C" + std::to_string(C) + "_r" + std::to_string(r) + "_" + std::to_string(H) + "x" +
                            std::to_string(W);
  FusionBench out;
  out.repeat = bench([&] { return efficient_mod_block(x, params, FusionMode::repeat); }, proto, "fusion", "repeat", shape);
  out.reshape =
      bench([&] { return efficient_mod_block(x, params, FusionMode::reshape); }, proto, "fusion", "reshape", shape);
  return out;
}

struct PairBench {
  BenchResult efficient_mod;
  BenchResult mbconv;
  std::size_t params_mod = 0;
  std::size_t params_mbconv = 0;
  double param_delta() const {
    return std::abs(static_cast<double>(params_mod) - static_cast<double>(params_mbconv)) /
           static_cast<double>(std::max(params_mod, params_mbconv));
  }
};

/// Checks a matched EfficientMod / MBConv architecture pair: parameters must
/// agree within 2%. Returns both counts.
inline std::pair<std::size_t, std::size_t> check_pair_params(const Architecture& mod, const Architecture& mb) {
  const std::size_t pm = analyze(mod, mod.isotropic ? mod.iso.patch * 16 : 224).params_with_bias();
  const std::size_t pb = analyze(mb, mb.isotropic ? mb.iso.patch * 16 : 224).params_with_bias();
  const double delta = std::abs(static_cast<double>(pm) - static_cast<double>(pb)) / static_cast<double>(std::max(pm, pb));
  if (delta > 0.02)
    throw ConfigError("pair " + mod.name() + " / " + mb.name() + ": parameter mismatch " +
                      std::to_string(delta * 100) + "% exceeds 2%");
  return {pm, pb};
}

/// Latency pair for an isotropic comparison ("256" or "196") at batch 1.
inline PairBench bench_pair_mbconv(const std::string& pair, const BenchProtocol& proto, std::size_t res = 224,
                                   std::uint64_t seed = 0) {
  const auto mod_arch = preset("iso_mod_" + pair);
  const auto mb_arch = preset("iso_mbconv_" + pair);
  PairBench out;
  std::tie(out.params_mod, out.params_mbconv) = check_pair_params(mod_arch, mb_arch);
  const auto mod = build_model<float>(mod_arch, seed);
  const auto mb = build_model<float>(mb_arch, seed);
  const auto probe = random_tensor<float>({1, 3, 224, 224}, mix_key(seed, 2));
  if (!predict(mod, probe).all_finite() || !predict(mb, probe).all_finite())
    throw NumericalError("bench_pair_mbconv: non-finite logits on the probe input");
  const auto x = res == 224 ? probe : random_tensor<float>({1, 3, res, res}, mix_key(seed, 2));
  const std::string shape = "1x3x" + std::to_string(res) + "x" + std::to_string(res);
  out.efficient_mod = bench([&] { return predict(mod, x); }, proto, "iso_" + pair, "efficient_mod", shape);
  out.mbconv = bench([&] { return predict(mb, x); }, proto, "iso_" + pair, "mbconv", shape);
  return out;
}

/// Whole-model latency of a preset at batch 1.
inline BenchResult bench_model(const Architecture& arch, std::size_t res, const BenchProtocol& proto,
                               std::uint64_t seed = 0) {
  const auto m = build_model<float>(arch, seed);
  const auto x = random_tensor<float>({1, arch.in_channels(), res, res}, mix_key(seed, 3));
  return bench([&] { return predict(m, x); }, proto, "model_" + arch.name(), "eval",
               "1x" + std::to_string(arch.in_channels()) + "x" + std::to_string(res) + "x" + std::to_string(res));
}

}  // namespace effmod
