#pragma once

// Flat binary parameter files, little-endian throughout:
//   magic "EFMODPRM" (8 bytes), u32 version (1), u32 array count, then per array
//   u32 name length, name bytes, 4 x u64 dims (n, c, h, w), u8 dtype
//   (0 = f32, 1 = f64), and the elements in NCHW order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "effmod/layers.hpp"

namespace effmod {

inline constexpr char kParamMagic[8] = {'E', 'F', 'M', 'O', 'D', 'P', 'R', 'M'};
inline constexpr std::uint32_t kParamVersion = 1;

static_assert(std::endian::native == std::endian::little, "parameter files assume a little-endian host");

namespace detail {

template <class V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get(std::istream& is, const std::string& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw ConfigError(path + ": truncated parameter file");
  return v;
}

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "only f32 and f64 are serializable");
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <class Bundle>
void save_params(const std::string& path, const Bundle& bundle) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  std::uint32_t count = 0;
  bundle.visit_const("", [&](const std::string&, ParamRole, const auto&) { ++count; });
  os.write(kParamMagic, 8);
  detail::put(os, kParamVersion);
  detail::put(os, count);
  bundle.visit_const("", [&](const std::string& name, ParamRole, const auto& p) {
    using T = typename std::decay_t<decltype(p.value)>::value_type;
    detail::put(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    for (std::size_t d : p.value.shape().dims()) detail::put(os, static_cast<std::uint64_t>(d));
    detail::put(os, detail::dtype_code<T>());
    os.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(T)));
  });
  if (!os) throw ConfigError("write to '" + path + "' failed");
}

/// Loads into an already-built bundle; names, shapes and dtypes must match
/// exactly and in order.
template <class Bundle>
void load_params(const std::string& path, Bundle& bundle) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open '" + path + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kParamMagic, 8) != 0) throw ConfigError(path + ": bad magic");
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kParamVersion) throw ConfigError(path + ": unsupported version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is, path);
  std::uint32_t expected = 0;
  bundle.visit("", [&](const std::string&, ParamRole, auto&) { ++expected; });
  if (count != expected)
    throw ConfigError(path + ": file holds " + std::to_string(count) + " arrays, model has " + std::to_string(expected));
  bundle.visit("", [&](const std::string& name, ParamRole, auto& p) {
    using T = typename std::decay_t<decltype(p.value)>::value_type;
    const auto len = detail::get<std::uint32_t>(is, path);
    std::string stored(len, '\0');
    if (!is.read(stored.data(), len)) throw ConfigError(path + ": truncated parameter file");
    if (stored != name) throw ConfigError(path + ": expected array '" + name + "', found '" + stored + "'");
    std::array<std::size_t, 4> dims{};
    for (auto& d : dims) d = static_cast<std::size_t>(detail::get<std::uint64_t>(is, path));
    const Shape s{dims[0], dims[1], dims[2], dims[3]};
    if (s != p.value.shape())
      throw ConfigError(path + ": array '" + name + "' has shape " + to_string(s) + ", model expects " +
                        to_string(p.value.shape()));
    const auto dtype = detail::get<std::uint8_t>(is, path);
    if (dtype != detail::dtype_code<T>()) throw ConfigError(path + ": array '" + name + "' has a different dtype");
    if (!is.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(T))))
      throw ConfigError(path + ": truncated parameter file");
    p.zero_grad();
  });
}

}  // namespace effmod
