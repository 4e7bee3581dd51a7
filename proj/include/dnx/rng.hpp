#pragma once

#include <cmath>
#include <cstdint>

namespace dnx {

// splitmix64 seed expander. Tiny, portable, identical output on every
// platform, which is what makes seeded runs bit-reproducible.
struct SplitMix64 {
  uint64_t state = 0;

  explicit SplitMix64(uint64_t seed) : state(seed) {}

  uint64_t next() {
    state += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // uniform in (0,1], safe as a log() argument
  double next_unit_open() {
    return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
  }

  // uniform in [-1,1)
  double next_symmetric() { return 2.0 * next_unit() - 1.0; }

  // Box-Muller, two draws per sample. No cached second value so the stream
  // position stays a pure function of the sample index.
  double next_gaussian(double sigma) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    double u1 = next_unit_open();
    double u2 = next_unit();
    return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }
};

// Stable derived seed for substreams (per-step batches, per-run seeds, ...).
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  SplitMix64 g(seed ^ (salt * 0xD1B54A32D192ED03ULL));
  return g.next();
}

}  // namespace dnx
