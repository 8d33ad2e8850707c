#pragma once

#include <cmath>
#include <cstdint>

namespace focus {

/// Deterministic, platform-independent random stream (xoshiro256++ seeded
/// via splitmix64). Standard-library distributions are avoided on purpose:
/// their output differs across implementations, and identical streams on
/// every build are a hard requirement for reproducible runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  /// Independent child stream; (seed, stream) pairs map to distinct states.
  Rng child(std::uint64_t stream) const {
    std::uint64_t x = state_[0] ^ (0x9e3779b97f4a7c15ULL + stream);
    x ^= state_[2] + (stream << 1);
    return Rng(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0,1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // Multiply-shift bound; bias is negligible for n << 2^64.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller. Two uniforms per draw, no cached spare,
  /// so the stream position is independent of call history.
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  /// Gumbel(0,1) as -log(-log(u)), u clamped away from {0,1}.
  double gumbel() {
    constexpr double kEps = 1e-12;
    double u = uniform01();
    if (u < kEps) u = kEps;
    if (u > 1.0 - kEps) u = 1.0 - kEps;
    return -std::log(-std::log(u));
  }

  /// Normal truncated to two standard deviations, resampled on excess.
  double truncated_normal(double sigma) {
    double z = normal();
    while (std::fabs(z) > 2.0) z = normal();
    return z * sigma;
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::uint64_t state_[4];
};

/// FNV-1a over arbitrary bytes; used for content hashes in sidecar metadata.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace focus
