#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "stq/tensor.hpp"

namespace stq {

// Seeded generator with platform-independent output. std::mt19937_64 is
// specified bit-exactly by the standard; the distributions on top of it are
// not, so the conversions to real values are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t position() const noexcept { return position_; }

  std::uint64_t next_u64() {
    ++position_;
    return engine_();
  }

  // Uniform in [0, 1) with 53 random bits.
  Real uniform() { return static_cast<Real>(next_u64() >> 11) * 0x1.0p-53; }

  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one draw per call, the partner value is discarded so the
  // stream position stays a simple function of the call count.
  Real normal() {
    Real u1 = uniform();
    Real u2 = uniform();
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  int sign() { return (next_u64() >> 63) ? 1 : -1; }

  Tensor uniform_tensor(Shape shape, Real lo, Real hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = uniform(lo, hi);
    return t;
  }

  Tensor normal_tensor(Shape shape, Real stddev = 1) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = stddev * normal();
    return t;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t position_ = 0;
  std::mt19937_64 engine_;
};

// Derives an independent child seed; used to give each layer, video and
// stage its own stream from a single user seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace stq
