#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "transmla/attention.hpp"
#include "transmla/rng.hpp"

namespace transmla {

// Seeded stand-ins for pretrained weights and calibration activations. Every
// matrix draws from its own substream so adding a tensor never perturbs the
// others.

namespace synth_stream {
inline constexpr std::uint64_t kWq = 1, kWk = 2, kWv = 3, kWo = 4;
inline constexpr std::uint64_t kCalib = 16, kCalibBasis = 17;
}  // namespace synth_stream

inline GqaLayer synth_gqa(std::uint64_t seed, std::size_t D, std::size_t h, std::size_t g, double rope_base = 10000.0) {
  require(h > 0 && g > 0, "synth_gqa: h and g must be positive");
  require(D % h == 0, "synth_gqa: h = " + std::to_string(h) + " does not divide D = " + std::to_string(D));
  require(h % g == 0, "synth_gqa: g = " + std::to_string(g) + " does not divide h = " + std::to_string(h));
  const std::size_t d = D / h;
  require(d % 2 == 0, "synth_gqa: head dim must be even");
  const CounterRng rng(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(D));
  GqaLayer layer{D,
                 h,
                 g,
                 d,
                 normal_matrix(rng.substream(synth_stream::kWq), h * d, D, s),
                 normal_matrix(rng.substream(synth_stream::kWk), g * d, D, s),
                 normal_matrix(rng.substream(synth_stream::kWv), g * d, D, s),
                 normal_matrix(rng.substream(synth_stream::kWo), D, h * d, s),
                 RopeSchedule::standard(d, rope_base)};
  layer.validate();
  return layer;
}

struct CalibStructure {
  enum class Kind { kIid, kLowRank, kKeyDominant };
  Kind kind = Kind::kIid;
  std::size_t rank = 0;  // kLowRank
  double factor = 1.0;   // kKeyDominant

  static CalibStructure iid() { return {}; }
  static CalibStructure low_rank(std::size_t r) { return {Kind::kLowRank, r, 1.0}; }
  static CalibStructure key_dominant(double f) { return {Kind::kKeyDominant, 0, f}; }

  std::string describe() const {
    switch (kind) {
      case Kind::kLowRank: return "low_rank(" + std::to_string(rank) + ")";
      case Kind::kKeyDominant: return "key_dominant(" + std::to_string(factor) + ")";
      default: return "iid";
    }
  }
};

/// n × D activations.
///   iid             entries N(0,1)
///   low_rank(r)     Z·B with Z n×r and B r×D standard normal (B scaled 1/√r);
///                   rows span exactly r dims
///   key_dominant(f) feature j scaled by f^(1 − j/(D−1)), a log-linear decay
///                   from f to 1 (anisotropic, so PCA directions are unequal;
///                   pair with a layer whose NoPE keys are scaled up by f)
inline Matrix synth_calib(std::uint64_t seed, std::size_t n, std::size_t D,
                          const CalibStructure& structure = CalibStructure::iid()) {
  require(n >= 1, "synth_calib: n must be at least 1");
  require(D >= 1, "synth_calib: D must be at least 1");
  const CounterRng rng = CounterRng(seed).substream(synth_stream::kCalib);
  switch (structure.kind) {
    case CalibStructure::Kind::kIid: return normal_matrix(rng, n, D);
    case CalibStructure::Kind::kLowRank: {
      const std::size_t r = structure.rank;
      require(r >= 1 && r <= D, "synth_calib: rank " + std::to_string(r) + " must lie in [1, D]");
      const Matrix z = normal_matrix(rng, n, r);
      const Matrix b = normal_matrix(CounterRng(seed).substream(synth_stream::kCalibBasis), r, D,
                                     1.0 / std::sqrt(static_cast<double>(r)));
      return matmul(z, b);
    }
    case CalibStructure::Kind::kKeyDominant: {
      const double f = structure.factor;
      require(std::isfinite(f) && f >= 1.0, "synth_calib: key_dominant factor must be >= 1");
      Matrix x = normal_matrix(rng, n, D);
      for (std::size_t j = 0; j < D; ++j) {
        const double frac = D > 1 ? static_cast<double>(j) / static_cast<double>(D - 1) : 0.0;
        const double s = std::pow(f, 1.0 - frac);
        for (std::size_t t = 0; t < n; ++t) x(t, j) *= s;
      }
      return x;
    }
  }
  throw InvariantError("synth_calib: unknown structure");
}

}  // namespace transmla
