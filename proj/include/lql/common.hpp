#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lql {

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dimension, index, or length violations.
struct shape_error : error {
  using error::error;
};

/// Invalid configuration values or invalid command usage.
struct config_error : error {
  using error::error;
};

/// API contract violations (backward on a non-scalar, all-masked loss, ...).
struct contract_error : error {
  using error::error;
};

/// Non-finite values or degenerate numeric situations.
struct numeric_error : error {
  using error::error;
};

/// Malformed serialized artifacts (checkpoints, token files, reports).
struct format_error : error {
  using error::error;
};

/// Corpus or sample construction failures.
struct data_error : error {
  using error::error;
};

/// Per-token loss participation flags; nonzero means the token at that
/// position contributes to the training loss (i.e. is predicted).
using LossMask = std::vector<std::uint8_t>;

/// Deterministic random source. All distributions are implemented by hand
/// on top of mt19937_64 so streams are reproducible independent of the
/// standard library's distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the paired value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling keeps the stream unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Fisher-Yates shuffle driven by Rng::below (stable across platforms).
template <class T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace lql
