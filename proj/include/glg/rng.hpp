#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace glg {

// splitmix64 step; used to derive well-separated seeds for per-tree streams
// from a single user seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Seedable random stream with a splittable (seed, stream) identity.  The
// uniform and normal generators are written out explicitly (rather than using
// std::uniform_real_distribution / std::normal_distribution) because the
// standard distributions are not pinned by the standard and differ across
// library implementations; mt19937_64 itself is fully specified, so streams
// here produce the same values on every platform.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed ^ (0xd1342543de82ef95ULL * (stream + 1));
    std::uint64_t init[8];
    for (auto& w : init) w = splitmix64(s);
    std::seed_seq seq{static_cast<std::uint32_t>(init[0]), static_cast<std::uint32_t>(init[0] >> 32),
                      static_cast<std::uint32_t>(init[1]), static_cast<std::uint32_t>(init[1] >> 32),
                      static_cast<std::uint32_t>(init[2]), static_cast<std::uint32_t>(init[2] >> 32),
                      static_cast<std::uint32_t>(init[3]), static_cast<std::uint32_t>(init[3] >> 32),
                      static_cast<std::uint32_t>(init[4]), static_cast<std::uint32_t>(init[4] >> 32),
                      static_cast<std::uint32_t>(init[5]), static_cast<std::uint32_t>(init[5] >> 32),
                      static_cast<std::uint32_t>(init[6]), static_cast<std::uint32_t>(init[6] >> 32),
                      static_cast<std::uint32_t>(init[7]), static_cast<std::uint32_t>(init[7] >> 32)};
    engine_.seed(seq);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace glg
