#pragma once

#include <cstdint>
#include <random>

namespace capsfor {

/// splitmix64 finaliser, used to derive independent child seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/**
 * Seeded random stream. Same seed and same sequence of draws give
 * bit-identical values. Single owner; parallel consumers take child
 * streams from split().
 */
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed), engine_(mix_seed(seed)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }

  /// Uniform in [0, 1).
  double uniform() {
    ++draws_;
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    ++draws_;
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Child stream whose seed depends only on this stream's seed and the tag.
  RngStream split(std::uint64_t tag) const {
    return RngStream(mix_seed(seed_ ^ mix_seed(tag + 0x632BE59BD9B4E019ull)));
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
  std::mt19937_64 engine_;
};

}  // namespace capsfor
