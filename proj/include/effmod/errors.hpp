#pragma once

#include <stdexcept>
#include <string>

namespace effmod {

/// Caller violated an operation's input contract (shapes, extents, counts).
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value is invalid (unknown preset, even "same" kernel, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf detected, gradient check failed, or a run became nondeterministic.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void fail_precondition(const std::string& what) {
  throw PreconditionError(what);
}

inline void require(bool ok, const std::string& what) {
  if (!ok) fail_precondition(what);
}

inline void require_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace detail
}  // namespace effmod
