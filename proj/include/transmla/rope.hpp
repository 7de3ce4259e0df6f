#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "transmla/errors.hpp"

namespace transmla {

/// Rotation frequencies for interleaved RoPE: pair l covers dims (2l, 2l+1)
/// and turns by t·thetas[l] at position t.
struct RopeSchedule {
  std::vector<double> thetas;
  double base = 10000.0;

  /// θ_l = base^(-2l/d), l = 0..d/2-1. base = 1 gives the degenerate
  /// all-ones schedule, which is allowed (frequencies are then non-increasing
  /// rather than strictly decreasing).
  static RopeSchedule standard(std::size_t head_dim, double base = 10000.0) {
    require(head_dim % 2 == 0, "RopeSchedule: head dim must be even, got " + std::to_string(head_dim));
    require(base >= 1.0 && std::isfinite(base), "RopeSchedule: base must be finite and >= 1");
    RopeSchedule s;
    s.base = base;
    s.thetas.resize(head_dim / 2);
    for (std::size_t l = 0; l < s.thetas.size(); ++l)
      s.thetas[l] = std::pow(base, -2.0 * static_cast<double>(l) / static_cast<double>(head_dim));
    return s;
  }

  /// Explicit per-pair frequencies (e.g. a folded or re-ordered rope head).
  static RopeSchedule from_thetas(std::vector<double> thetas, double base = 10000.0) {
    for (double t : thetas) require(std::isfinite(t) && t >= 0.0, "RopeSchedule: bad frequency");
    return RopeSchedule{std::move(thetas), base};
  }

  std::size_t dim() const { return 2 * thetas.size(); }
  std::size_t pairs() const { return thetas.size(); }

  bool operator==(const RopeSchedule&) const = default;
};

/// Rotates x (length sched.dim()) in place to position t.
inline void apply_rope_inplace(std::span<double> x, std::int64_t t, const RopeSchedule& sched) {
  require(x.size() % 2 == 0, "apply_rope: odd vector length " + std::to_string(x.size()));
  require(x.size() == sched.dim(), "apply_rope: vector length " + std::to_string(x.size()) +
                                       " != schedule dim " + std::to_string(sched.dim()));
  const double pos = static_cast<double>(t);
  for (std::size_t l = 0; l < sched.pairs(); ++l) {
    const double angle = pos * sched.thetas[l];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double re = x[2 * l];
    const double im = x[2 * l + 1];
    x[2 * l] = re * c - im * s;
    x[2 * l + 1] = re * s + im * c;
  }
}

inline std::vector<double> apply_rope(std::span<const double> x, std::int64_t t, const RopeSchedule& sched) {
  std::vector<double> out(x.begin(), x.end());
  apply_rope_inplace(out, t, sched);
  return out;
}

/// The same schedule repeated on every consecutive sched.dim() block of x:
/// per-head RoPE on a concatenation of heads.
inline void apply_rope_blocks_inplace(std::span<double> x, std::int64_t t, const RopeSchedule& sched) {
  const std::size_t d = sched.dim();
  if (d == 0) {
    require(x.empty(), "apply_rope_blocks: empty schedule on non-empty vector");
    return;
  }
  require(x.size() % d == 0, "apply_rope_blocks: length not a multiple of the schedule dim");
  for (std::size_t off = 0; off < x.size(); off += d) apply_rope_inplace(x.subspan(off, d), t, sched);
}

}  // namespace transmla
