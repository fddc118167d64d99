#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace aegis {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ULL)); }
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix_seed(mix_seed(a, b), c); }

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) { return std::normal_distribution<double>(mean, stddev)(engine_); }
  std::int64_t integer(std::int64_t lo, std::int64_t hi_inclusive) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi_inclusive)(engine_);
  }
  // Beta(a, 1) by inverse CDF: F(t) = t^a.
  double beta_a1(double a) { return std::pow(uniform(), 1.0 / a); }

  std::vector<double> normal_vector(std::size_t n, double stddev = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal(0.0, stddev);
    return v;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace aegis
