#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace metagrad {

/// Base exception for every recoverable failure raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised when a learner run leaves its numerical safe zone.
class DivergenceError : public Error {
public:
  using Error::Error;
};

inline constexpr double kLogitClamp = 20.0;

inline double clamp_logit(double x) {
  if (x > kLogitClamp) return kLogitClamp;
  if (x < -kLogitClamp) return -kLogitClamp;
  return x;
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Inverse of sigmoid, clamped to the admissible logit range.
inline double logit(double p) {
  if (!(p > 0.0)) return -kLogitClamp;
  if (!(p < 1.0)) return kLogitClamp;
  return clamp_logit(std::log(p) - std::log1p(-p));
}

/// Seedable generator that can derive independent named child streams.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  /// Child stream keyed by name; the parent stream is left untouched.
  Rng split(std::string_view name) const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : name) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    return Rng(mix(seed_ ^ mix(h)));
  }

  Rng split(std::uint64_t index) const { return Rng(mix(seed_ + 0x9e3779b97f4a7c15ull * (index + 1))); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

  std::mt19937_64& engine() { return engine_; }

private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Picks an index from a discrete distribution using one uniform draw.
template <typename Probs>
std::size_t sample_discrete(const Probs& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  const std::size_t n = static_cast<std::size_t>(probs.size());
  for (std::size_t i = 0; i < n; ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return n - 1;
}

/// Mixed relative/absolute error: relative above magnitude 1, absolute below.
inline double rel_error(double a, double b) {
  const double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) / scale;
}

}  // namespace metagrad
