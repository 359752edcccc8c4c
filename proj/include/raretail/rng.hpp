#pragma once

#include <cstdint>
#include <random>

namespace raretail {

// Per-chain random stream. The engine is mt19937_64 (bit-exact across
// standard libraries); variates are derived from raw engine output so that
// streams do not depend on implementation-defined distribution classes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer on [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer; used to derive independent seeds from
// (master seed, stream tag, index).
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag,
                                    std::uint64_t index) {
  return mix64(mix64(mix64(master) ^ tag) ^ index);
}

namespace stream {
inline constexpr std::uint64_t kDirect = 0x44495245ULL;
inline constexpr std::uint64_t kPositiveArm = 0x504f5341ULL;
inline constexpr std::uint64_t kNegativeArm = 0x4e454741ULL;
inline constexpr std::uint64_t kBootstrap = 0x424f4f54ULL;
}  // namespace stream

}  // namespace raretail
