#pragma once

// Forward-only visualization of an EfficientMod block's context branch:
// channel mean of ctx(x), min-max scaled to 0..255.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "effmod/model.hpp"
#include "effmod/pnm.hpp"

namespace effmod {

struct ContextMap {
  std::size_t stage = 0;  ///< 1-based
  std::size_t block = 0;  ///< 1-based within the stage
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> values;  ///< row-major

  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  Image image() const { return {width, height, 1, values}; }
};

/// A constant channel mean maps to all zeros.
template <class T>
ContextMap context_map(const Model<T>& model, const Tensor<T>& image, std::size_t stage, std::size_t block) {
  if (image.n() != 1) throw PreconditionError("context_map: expects a single image");
  if (stage == 0 || stage > model.stages.size())
    throw PreconditionError("context_map: stage " + std::to_string(stage) + " out of range 1.." +
                            std::to_string(model.stages.size()));
  const auto& st = model.stages[stage - 1];
  const std::size_t total = st.mods.size() + st.mbconvs.size() + st.attns.size();
  if (block == 0 || block > total)
    throw PreconditionError("context_map: stage " + std::to_string(stage) + " has " + std::to_string(total) +
                            " blocks, block " + std::to_string(block) + " requested");
  if (block > st.mods.size())
    throw PreconditionError("context_map: stage " + std::to_string(stage) + " block " + std::to_string(block) +
                            " is an " + (st.attns.empty() ? "MBConv" : "attention") +
                            " block with no context branch");
  ForwardTrace<T> trace;
  trace.ctx_at = std::make_pair(stage - 1, block - 1);
  predict(model, image, {}, &trace);
  const Tensor<T>& ctx = trace.ctx;
  ContextMap out;
  out.stage = stage;
  out.block = block;
  out.height = ctx.h();
  out.width = ctx.w();
  std::vector<double> mean(out.height * out.width, 0.0);
  for (std::size_t c = 0; c < ctx.c(); ++c)
    for (std::size_t y = 0; y < out.height; ++y)
      for (std::size_t x = 0; x < out.width; ++x) mean[y * out.width + x] += static_cast<double>(ctx.at(0, c, y, x));
  for (double& m : mean) m /= static_cast<double>(ctx.c());
  const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
  const double span = *hi - *lo;
  out.values.resize(mean.size(), 0);
  if (span > 0)
    for (std::size_t i = 0; i < mean.size(); ++i)
      out.values[i] = static_cast<std::uint8_t>(std::clamp(std::lround((mean[i] - *lo) / span * 255.0), 0l, 255l));
  return out;
}

}  // namespace effmod
