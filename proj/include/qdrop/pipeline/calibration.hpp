#pragma once

#include <string>
#include <vector>

#include "qdrop/pipeline/dataset.hpp"

namespace qdrop::pipeline {

struct CalibrationSet {
  Dataset data;
  std::vector<std::size_t> indices;  // into the source split
  std::string source;                // identity of the source distribution
};

// n samples drawn uniformly without replacement from `src`.
inline CalibrationSet sample_calibration(const Dataset& src, std::size_t n, std::uint64_t seed, std::string source) {
  if (n == 0) throw ConfigError("calibration size must be positive");
  if (n > src.size())
    throw ConfigError("calibration size " + std::to_string(n) + " exceeds source size " + std::to_string(src.size()));
  Rng rng = Rng::substream(seed, 0xca1b);
  auto perm = rng.permutation(src.size());
  perm.resize(n);
  CalibrationSet c{src.subset(perm), perm, std::move(source)};
  return c;
}

}  // namespace qdrop::pipeline
