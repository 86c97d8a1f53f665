#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace qdrop {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct RankError : Error {
  using Error::Error;
};
struct StaleTapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct TopologyError : Error {
  using Error::Error;
};
struct HookError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
// Non-finite loss or divergence. Carries a human-readable dump.
struct NumericalError : Error {
  using Error::Error;
};

// Per-thread sink for soft diagnostics (division by zero, all-zero channels,
// degenerate denominators). Nothing here aborts a computation.
struct Diagnostics {
  std::size_t div_by_zero = 0;
  std::vector<std::string> warnings;

  void warn(std::string msg) { warnings.push_back(std::move(msg)); }
  void clear() {
    div_by_zero = 0;
    warnings.clear();
  }
};

inline Diagnostics& diagnostics() {
  thread_local Diagnostics d;
  return d;
}

}  // namespace qdrop
