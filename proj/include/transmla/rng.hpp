#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "transmla/matrix.hpp"

namespace transmla {

/// Counter-based generator: the value at (seed, stream, index) is a pure
/// function of the triple, computed with two rounds of the SplitMix64
/// finalizer. Any element of any stream can be produced independently, so
/// generation order and thread count never change the numbers.
class CounterRng {
public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  constexpr std::uint64_t bits(std::uint64_t index) const {
    return mix(mix(seed_ ^ mix(stream_ + 0xD1B54A32D192ED03ULL)) + index);
  }

  /// Uniform in (0, 1): 53 random mantissa bits, offset by half an ulp so 0 never appears.
  double uniform(std::uint64_t index) const {
    return (static_cast<double>(bits(index) >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box–Muller on the uniforms at 2i and 2i+1.
  double normal(std::uint64_t index) const {
    const double u1 = uniform(2 * index);
    const double u2 = uniform(2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  CounterRng substream(std::uint64_t id) const { return {seed_, mix(stream_ ^ (id * 0xA24BAED4963EE407ULL))}; }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

private:
  std::uint64_t seed_;
  std::uint64_t stream_;
};

inline Matrix normal_matrix(const CounterRng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal(i);
  return m;
}

/// Orthogonal n×n matrix: modified Gram–Schmidt on a Gaussian matrix.
inline Matrix random_orthogonal(const CounterRng& rng, std::size_t n) {
  Matrix q = normal_matrix(rng, n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double proj = 0.0;
        for (std::size_t i = 0; i < n; ++i) proj += q(i, k) * q(i, j);
        for (std::size_t i = 0; i < n; ++i) q(i, j) -= proj * q(i, k);
      }
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) nrm += q(i, j) * q(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= nrm;
  }
  return q;
}

}  // namespace transmla
