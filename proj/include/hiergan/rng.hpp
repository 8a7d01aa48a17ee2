// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace hiergan {

/// splitmix64 stream keyed by (seed, salt); identical output on every platform.
class SplitMix {
 public:
  SplitMix(std::uint64_t seed, std::uint64_t salt)
      : state_(seed * 0x9E3779B97F4A7C15ULL ^ (salt + 0x632BE59BD9B4E019ULL)) {
    next();
  }

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n); the modulo bias is negligible for the small n used here.
  std::uint64_t below(std::uint64_t n) { return next() % n; }

 private:
  std::uint64_t state_;
};

}  // namespace hiergan
