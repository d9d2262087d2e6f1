#pragma once

#include <cstdint>
#include <cstddef>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace sacnn {

// Error taxonomy. The CLI maps these onto distinct exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// All randomness in the library flows through Rng so that results are
// reproducible across platforms and standard libraries (std::*_distribution
// is not portable). SplitMix64 core, with uniform/normal helpers.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (fresh pair each call, no cached state).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed from (base, index), e.g. one stream per
// neuron or per image. Plain XOR would correlate streams for nearby indices.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
  Rng r(base ^ (0x632be59bd9b4e019ull * (index + 1)));
  return r.next_u64();
}

// CRC-32 (IEEE, reflected) used by the dataset container and checkpoints.
std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed = 0);

inline bool is_finite(float v) { return std::isfinite(v); }
inline bool is_finite(double v) { return std::isfinite(v); }

}  // namespace sacnn
