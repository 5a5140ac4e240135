#pragma once

// Binary portable anymap I/O: P5 (gray) and P6 (RGB) with maxval <= 255.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "effmod/tensor.hpp"

namespace effmod {

struct Image {
  std::size_t width = 0, height = 0, channels = 0;  ///< channels: 1 (P5) or 3 (P6)
  std::vector<std::uint8_t> pixels;                 ///< row-major, interleaved

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
};

namespace detail {

inline std::size_t pnm_field(std::istream& is, const std::string& source) {
  int ch = is.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = is.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw ConfigError(source + ": malformed PNM header");
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    if (v > (1u << 24)) throw ConfigError(source + ": PNM header value too large");
    ch = is.get();
  }
  if (ch == EOF || !std::isspace(ch)) throw ConfigError(source + ": malformed PNM header");
  return v;
}

}  // namespace detail

inline Image read_pnm(std::istream& is, const std::string& source = "<stream>") {
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw ConfigError(source + ": only binary P5/P6 images are supported");
  Image img;
  img.channels = magic[1] == '5' ? 1 : 3;
  img.width = detail::pnm_field(is, source);
  img.height = detail::pnm_field(is, source);
  const std::size_t maxval = detail::pnm_field(is, source);
  if (img.width == 0 || img.height == 0) throw ConfigError(source + ": empty image");
  if (maxval == 0 || maxval > 255) throw ConfigError(source + ": maxval must be in 1..255");
  img.pixels.resize(img.width * img.height * img.channels);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
    throw ConfigError(source + ": truncated pixel data");
  if (maxval != 255)
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
  return img;
}

inline Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open '" + path + "'");
  return read_pnm(is, path);
}

inline void write_pnm(std::ostream& os, const Image& img) {
  os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_pnm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  write_pnm(os, img);
  if (!os) throw ConfigError("write to '" + path + "' failed");
}

/// Pixels scaled to [0, 1] as a [1, channels, h, w] tensor. Gray images are
/// replicated when `channels` is 3.
inline Tensor<float> image_to_tensor(const Image& img, std::size_t channels) {
  if (channels != img.channels && !(img.channels == 1 && channels == 3))
    throw ConfigError("image has " + std::to_string(img.channels) + " channels, model expects " +
                      std::to_string(channels));
  Tensor<float> t(Shape{1, channels, img.height, img.width});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        t.at(0, c, y, x) = static_cast<float>(img.at(y, x, img.channels == 1 ? 0 : c)) / 255.0f;
  return t;
}

}  // namespace effmod
