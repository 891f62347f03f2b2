#pragma once

// Shared basics: error types, deterministic RNG, global debug toggles.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace hattn {

// Shape / precondition violations (caller bugs, bad config).
class dim_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf or other numerical breakdown detected at runtime.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw dim_error(msg);
}

// When enabled, ops assert finiteness of their outputs (slow; off by default).
inline bool& finite_checks() {
  static bool enabled = false;
  return enabled;
}

// Deterministic, platform-independent RNG (splitmix64 stream + Box-Muller).
// std::mt19937 distributions are not guaranteed identical across standard
// libraries; runs must be reproducible byte-for-byte.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Uniform in [0, n)
  int below(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }
};

}  // namespace hattn
