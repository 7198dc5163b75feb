#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace imaformer {

// splitmix64 finalizer; derives an independent child seed from a master seed
// and a stream id so per-episode streams can be drawn in any order.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// mt19937_64 with hand-rolled distributions. The std:: distributions are
// implementation-defined, which would break bit-reproducibility across
// standard libraries; the generator itself is fully specified.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1) with 53-bit resolution
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n); multiply-high bounding, no rejection loop
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(gen_()) * n) >> 64);
  }

  // Box-Muller; consumes exactly two draws per call
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
  }

  // N(0, stddev^2) resampled until within +-bound_sigmas standard deviations
  double truncated_normal(double stddev, double bound_sigmas = 2.0) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (std::abs(v) <= bound_sigmas * stddev) return v;
    }
  }

  // partial Fisher-Yates: k distinct indices from [0, n)
  template <typename OutIt>
  void sample_without_replacement(std::uint64_t n, std::uint64_t k, OutIt out) {
    std::vector<std::uint64_t> pool(n);
    for (std::uint64_t i = 0; i < n; ++i) pool[i] = i;
    for (std::uint64_t i = 0; i < k; ++i) {
      std::uint64_t j = i + uniform_int(n - i);
      std::swap(pool[i], pool[j]);
      *out++ = pool[i];
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace imaformer
