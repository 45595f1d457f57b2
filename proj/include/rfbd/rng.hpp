#pragma once

#include <cstdint>
#include <random>

namespace rfbd {

// 64-bit finalizer (splitmix64 step). Used to whiten user-supplied seeds and
// to derive independent substreams so that per-frame / per-sample generation
// is a pure function of (seed, indices) and can run in any order.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stable substream seed from a parent seed plus up to three stream indices.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                    std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ mix64(a + 0x1000));
  h = mix64(h ^ mix64(b + 0x2000));
  h = mix64(h ^ mix64(c + 0x3000));
  return h;
}

// The single generator family of the project: a seeded mt19937_64 plus the
// standard library distributions. Reproducible within one build for a fixed
// seed; cross-platform bit-exactness is not promised.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(mix64(seed)) {}

  // Uniform in [0, 1).
  double uniform() { return unif_(eng_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal.
  double normal() { return norm_(eng_); }
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return std::uniform_int_distribution<std::int64_t>(0, n - 1)(eng_);
  }

  // Child generator on an independent stream; consumes one draw of the parent.
  Rng fork(std::uint64_t stream) { return Rng(derive_seed(eng_(), stream)); }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
  std::normal_distribution<double> norm_{0.0, 1.0};
};

}  // namespace rfbd
