#pragma once
// Deterministic, platform-independent random streams.  All randomness in the
// project flows through SplitMix64 so that a (seed, epoch, batch, sample,
// layer) tuple always produces the same noise on any machine.

#include <cmath>
#include <cstdint>

namespace lar {

struct SplitMix64 {
  uint64_t state;

  explicit SplitMix64(uint64_t seed = 0) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in (0, 1); never returns exactly 0 so log() is safe
  double u01() {
    return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53;
  }

  double gumbel() { return -std::log(-std::log(u01())); }

  double normal() {
    // Box-Muller, one value per call (second value discarded to keep the
    // stream position independent of call parity)
    double u1 = u01();
    double u2 = u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
};

// Hash-chain seed derivation: derive(seed, a, b, ...) mixes each component.
inline uint64_t derive_seed(uint64_t seed) { return seed; }

template <typename... Rest>
uint64_t derive_seed(uint64_t seed, uint64_t head, Rest... rest) {
  SplitMix64 mix(seed ^ (head + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2)));
  return derive_seed(mix.next(), rest...);
}

}  // namespace lar
