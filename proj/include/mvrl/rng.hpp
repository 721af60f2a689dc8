#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace mvrl {

// Deterministic counter-seeded generator (xoshiro256++ core, splitmix64
// seeding). Identical (seed, stream) pairs produce identical sequences on
// every platform; distinct streams are decorrelated through the seeding mix.
// All stochastic components of the project draw from instances of this class
// so that trained runs, simulator trajectories and augmentations replay
// bitwise.
class Rng {
 public:
  Rng() : Rng(0, 0) {}

  Rng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
    std::uint64_t x = seed ^ mix_(stream + 0x9E3779B97F4A7C15ULL);
    for (auto& w : s_) w = splitmix_(x);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl_(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl_(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  // Standard normal via Box-Muller. Stateless between calls so that the
  // serialized state is exactly the four xoshiro words.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi_ * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derive an independent generator; deterministic in (seed, stream, salt).
  Rng split(std::uint64_t salt) const {
    return Rng(seed_ ^ mix_(salt + 0x632BE59BD9B4E019ULL), stream_);
  }

  std::array<std::uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { s_ = s; }

 private:
  static constexpr double kPi_ = 3.14159265358979323846;

  static std::uint64_t rotl_(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  static std::uint64_t splitmix_(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    return mix_(x);
  }

  static std::uint64_t mix_(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace mvrl
