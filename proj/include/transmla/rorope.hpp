#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "transmla/linalg.hpp"
#include "transmla/rewrites.hpp"
#include "transmla/rng.hpp"

namespace transmla {

// RoRoPE: per-frequency orthogonal rotations of the merged key head that pack
// key energy into the leading heads without changing RoPE logits, plus
// FreqFold (treating M adjacent frequencies as one) and the final RoPE/NoPE
// split of the rotated key.
//
// Layout. The merged key has g heads of d dims; pair l of head j sits at
// (j·d + 2l, j·d + 2l + 1). Fold group p covers pairs pM..pM+M-1. Its real
// parts form an (M·g)-vector whose slot c = j·M + m is pair pM+m of head j;
// the imaginary parts use the same slots, one dim over. Slot order is
// head-major so the leading M slots of every group are exactly head 0.

inline std::size_t fold_slot_dim(std::size_t d, std::size_t M, std::size_t group, std::size_t slot) {
  const std::size_t head = slot / M;
  const std::size_t m = slot % M;
  return head * d + 2 * (group * M + m);
}

struct FreqStats {
  std::size_t g = 0, d = 0, group_size = 1;
  std::vector<Matrix> sigma_x;  // per group, (M·g)², uncentered Σ k_re k_reᵀ
  std::vector<Matrix> sigma_y;  // per group, imaginary parts
  std::size_t sample_count = 0;
  std::vector<double> abs_sum;  // per merged key dim, Σ|k|

  std::size_t groups() const { return d / (2 * group_size); }
  std::size_t slot_count() const { return group_size * g; }

  static FreqStats empty(std::size_t g, std::size_t d, std::size_t M) {
    require(g > 0 && d > 0 && d % 2 == 0, "FreqStats: bad key shape");
    require(M > 0 && (d / 2) % M == 0, "FreqStats: group size " + std::to_string(M) + " does not divide d/2 = " +
                                           std::to_string(d / 2));
    FreqStats s;
    s.g = g;
    s.d = d;
    s.group_size = M;
    s.sigma_x.assign(s.groups(), Matrix(M * g, M * g));
    s.sigma_y.assign(s.groups(), Matrix(M * g, M * g));
    s.abs_sum.assign(g * d, 0.0);
    return s;
  }

  /// Mean |k| per merged key dim (zero when no samples were seen).
  std::vector<double> mean_abs() const {
    std::vector<double> out(abs_sum.size(), 0.0);
    if (sample_count == 0) return out;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = abs_sum[i] / static_cast<double>(sample_count);
    return out;
  }
};

/// Adds the per-group second moments of the given pre-RoPE merged keys (n × gd).
inline void accumulate_key_stats(FreqStats& stats, const Matrix& keys) {
  const std::size_t gd = stats.g * stats.d, M = stats.group_size, slots = stats.slot_count();
  require(keys.cols() == gd, "accumulate_key_stats: key width != gd");
  for (std::size_t p = 0; p < stats.groups(); ++p) {
    Matrix re(keys.rows(), slots), im(keys.rows(), slots);
    for (std::size_t t = 0; t < keys.rows(); ++t) {
      for (std::size_t c = 0; c < slots; ++c) {
        const std::size_t dim = fold_slot_dim(stats.d, M, p, c);
        re(t, c) = keys(t, dim);
        im(t, c) = keys(t, dim + 1);
      }
    }
    stats.sigma_x[p] = add(stats.sigma_x[p], matmul_tn(re, re));
    stats.sigma_y[p] = add(stats.sigma_y[p], matmul_tn(im, im));
  }
  for (std::size_t t = 0; t < keys.rows(); ++t)
    for (std::size_t i = 0; i < gd; ++i) stats.abs_sum[i] += std::abs(keys(t, i));
  stats.sample_count += keys.rows();
}

/// Calibration pass over a token stream (n × D rows of hidden states).
inline FreqStats collect_key_stats(const MergedGqaLayer& layer, const Matrix& x, std::size_t M) {
  layer.validate();
  require(x.rows() > 0, "collect_key_stats: empty calibration stream");
  require(x.cols() == layer.D, "collect_key_stats: stream width != D");
  FreqStats stats = FreqStats::empty(layer.g, layer.d, M);
  accumulate_key_stats(stats, matmul_nt(x, layer.Wk));
  return stats;
}

inline FreqStats merge_stats(const FreqStats& a, const FreqStats& b) {
  require(a.g == b.g && a.d == b.d && a.group_size == b.group_size, "merge_stats: shape or group size mismatch");
  FreqStats out = a;
  for (std::size_t p = 0; p < a.groups(); ++p) {
    out.sigma_x[p] = add(a.sigma_x[p], b.sigma_x[p]);
    out.sigma_y[p] = add(a.sigma_y[p], b.sigma_y[p]);
  }
  for (std::size_t i = 0; i < out.abs_sum.size(); ++i) out.abs_sum[i] += b.abs_sum[i];
  out.sample_count += b.sample_count;
  return out;
}

struct RotationSet {
  std::size_t g = 0, d = 0, group_size = 1;
  std::vector<Matrix> rotations;               // per group, (M·g)² orthogonal; columns = new slot axes
  std::vector<std::vector<double>> energies;   // eigenvalues of σx+σy, descending (empty if not fitted)

  std::size_t groups() const { return rotations.size(); }

  static RotationSet identity(std::size_t g, std::size_t d, std::size_t M) {
    const FreqStats shape = FreqStats::empty(g, d, M);
    RotationSet r{g, d, M, std::vector<Matrix>(shape.groups(), Matrix::identity(M * g)), {}};
    return r;
  }

  RotationSet inverse() const {
    RotationSet r = *this;
    for (auto& u : r.rotations) u = transpose(u);
    r.energies.clear();
    return r;
  }
};

/// U_p = eigenvectors of σx,p + σy,p in descending eigenvalue order, which
/// maximizes the energy landing in the leading slots of every group.
inline RotationSet solve_rotations(const FreqStats& stats) {
  RotationSet out{stats.g, stats.d, stats.group_size, {}, {}};
  for (std::size_t p = 0; p < stats.groups(); ++p) {
    auto eig = sym_eig(add(stats.sigma_x[p], stats.sigma_y[p]));
    out.rotations.push_back(std::move(eig.eigenvectors));
    out.energies.push_back(std::move(eig.eigenvalues));
  }
  return out;
}

/// Replaces every frequency in a fold group by the group's first frequency.
inline RopeSchedule fold_schedule(const RopeSchedule& sched, std::size_t M) {
  require(M > 0 && sched.pairs() % M == 0, "fold_schedule: group size must divide d/2");
  RopeSchedule out = sched;
  for (std::size_t l = 0; l < out.pairs(); ++l) out.thetas[l] = sched.thetas[(l / M) * M];
  return out;
}

inline MergedGqaLayer fold_frequencies(const MergedGqaLayer& layer, std::size_t M) {
  MergedGqaLayer out = layer;
  out.rope = fold_schedule(layer.rope, M);
  return out;
}

/// Rotates the key projection rows and the matching Wuk columns group by
/// group, real and imaginary slots with the same U. Requires every fold group
/// of the layer's schedule to share one frequency (see fold_frequencies).
inline MergedGqaLayer apply_rotations(const MergedGqaLayer& layer, const RotationSet& rot) {
  layer.validate();
  const std::size_t M = rot.group_size, d = layer.d, slots = M * layer.g;
  require(rot.g == layer.g && rot.d == layer.d, "apply_rotations: rotation set shape does not match layer");
  require(rot.groups() == d / (2 * M), "apply_rotations: wrong number of rotation groups");
  for (std::size_t p = 0; p < rot.groups(); ++p) {
    require_shape(rot.rotations[p], slots, slots, "apply_rotations: rotation");
    const double defect = orthonormal_defect(rot.rotations[p]);
    require(defect <= 1e-8, "apply_rotations: rotation " + std::to_string(p) + " has orthonormal defect " +
                                std::to_string(defect));
    for (std::size_t m = 1; m < M; ++m)
      require(layer.rope.thetas[p * M + m] == layer.rope.thetas[p * M],
              "apply_rotations: frequencies differ inside fold group " + std::to_string(p) +
                  "; fold the schedule first");
  }

  MergedGqaLayer out = layer;
  for (std::size_t p = 0; p < rot.groups(); ++p) {
    const Matrix& u = rot.rotations[p];
    for (std::size_t part = 0; part < 2; ++part) {
      std::vector<std::size_t> dims(slots);
      for (std::size_t c = 0; c < slots; ++c) dims[c] = fold_slot_dim(d, M, p, c) + part;
      // New key row c = Σ_a U(a,c)·old row a, i.e. k' = Uᵀk on the slot vector.
      for (std::size_t c = 0; c < slots; ++c) {
        auto dst = out.Wk.row(dims[c]);
        std::fill(dst.begin(), dst.end(), 0.0);
        for (std::size_t a = 0; a < slots; ++a) {
          const double w = u(a, c);
          if (w == 0.0) continue;
          auto src = layer.Wk.row(dims[a]);
          for (std::size_t col = 0; col < layer.D; ++col) dst[col] += w * src[col];
        }
      }
      // Queries see q̂ = Wukᵀq, so Wuk' = Wuk·U on the same columns.
      for (std::size_t r = 0; r < layer.Wuk.rows(); ++r) {
        for (std::size_t c = 0; c < slots; ++c) {
          double s = 0.0;
          for (std::size_t a = 0; a < slots; ++a) s += layer.Wuk(r, dims[a]) * u(a, c);
          out.Wuk(r, dims[c]) = s;
        }
      }
    }
  }
  return out;
}

/// Mean |k| per merged key dim over a stream: the per-dimension norm profile.
inline std::vector<double> key_dim_norms(const MergedGqaLayer& layer, const Matrix& x) {
  const Matrix k = matmul_nt(x, layer.Wk);
  std::vector<double> out(k.cols(), 0.0);
  if (k.rows() == 0) return out;
  for (std::size_t t = 0; t < k.rows(); ++t)
    for (std::size_t i = 0; i < k.cols(); ++i) out[i] += std::abs(k(t, i));
  for (double& v : out) v /= static_cast<double>(k.rows());
  return out;
}

// ---------------------------------------------------------------------------
// RoPE / NoPE split

/// Merged layer after the split: the first d_rope key dims keep RoPE and are
/// shared by all heads, the rest are position-free.
struct SplitKeyLayer {
  std::size_t D = 0, h = 0, g = 0, d = 0, d_rope = 0;
  Matrix Wq;          // hd × D
  Matrix Wuk_rope;    // hd × d_rope
  Matrix Wuk_nope;    // hd × (gd − d_rope); plays W^UK's role for the NoPE keys
  Matrix Wdk_rope;    // d_rope × D
  Matrix Wdk_nope;    // (gd − d_rope) × D
  Matrix Wdv;         // gd × D
  Matrix Wuv;         // hd × gd
  Matrix Wo;          // D × hd
  RopeSchedule rope;  // over d_rope

  std::size_t nope_dim() const { return g * d - d_rope; }
  double scale() const { return 1.0 / std::sqrt(static_cast<double>(d)); }

  void validate() const {
    const std::size_t gd = g * d;
    require(d_rope <= gd && d_rope % 2 == 0, "SplitKeyLayer: bad rope width");
    require_shape(Wq, h * d, D, "SplitKeyLayer.Wq");
    require_shape(Wuk_rope, h * d, d_rope, "SplitKeyLayer.Wuk_rope");
    require_shape(Wuk_nope, h * d, gd - d_rope, "SplitKeyLayer.Wuk_nope");
    require_shape(Wdk_rope, d_rope, D, "SplitKeyLayer.Wdk_rope");
    require_shape(Wdk_nope, gd - d_rope, D, "SplitKeyLayer.Wdk_nope");
    require_shape(Wdv, gd, D, "SplitKeyLayer.Wdv");
    require_shape(Wuv, h * d, gd, "SplitKeyLayer.Wuv");
    require_shape(Wo, D, h * d, "SplitKeyLayer.Wo");
    require(rope.dim() == d_rope, "SplitKeyLayer: rope schedule dim != d_rope");
  }
};

/// Keeps RoPE on the leading n_keep_heads·d dims of the (rotated) merged key
/// and drops it from the rest. Exact only when the dropped dims carry no
/// position-dependent energy.
inline SplitKeyLayer split_rope_nope(const MergedGqaLayer& layer, std::size_t n_keep_heads = 1) {
  layer.validate();
  const std::size_t d = layer.d, gd = layer.g * layer.d, dr = n_keep_heads * d;
  require(dr <= gd, "split_rope_nope: n_keep_heads " + std::to_string(n_keep_heads) + " exceeds g");
  std::vector<double> thetas;
  for (std::size_t k = 0; k < n_keep_heads; ++k)
    thetas.insert(thetas.end(), layer.rope.thetas.begin(), layer.rope.thetas.end());
  return SplitKeyLayer{layer.D,
                       layer.h,
                       layer.g,
                       d,
                       dr,
                       layer.Wq,
                       col_slice(layer.Wuk, 0, dr),
                       col_slice(layer.Wuk, dr, gd),
                       row_slice(layer.Wk, 0, dr),
                       row_slice(layer.Wk, dr, gd),
                       layer.Wv,
                       layer.Wuv,
                       layer.Wo,
                       RopeSchedule::from_thetas(std::move(thetas), layer.rope.base)};
}

struct SplitActivations {
  Matrix qhat;  // T × h·gd, per head [RoPE'd rope part; nope part]
  Matrix k;     // T × gd, [RoPE'd rope key; nope key]
  Matrix v;     // T × gd
};

inline SplitActivations split_activations(const SplitKeyLayer& layer, const Matrix& x) {
  layer.validate();
  require(x.cols() == layer.D, "split forward: input width != D");
  const std::size_t h = layer.h, d = layer.d, dr = layer.d_rope, gd = layer.g * layer.d, T = x.rows();
  const Matrix q = matmul_nt(x, layer.Wq);
  Matrix qhat(T, h * gd);
  for (std::size_t i = 0; i < h; ++i) {
    const Matrix qi = col_slice(q, i * d, (i + 1) * d);
    Matrix qr = matmul(qi, row_slice(layer.Wuk_rope, i * d, (i + 1) * d));
    const Matrix qn = matmul(qi, row_slice(layer.Wuk_nope, i * d, (i + 1) * d));
    detail::rope_rows_inplace(qr, layer.rope);
    for (std::size_t t = 0; t < T; ++t) {
      auto dst = qhat.row(t).subspan(i * gd, gd);
      std::copy(qr.row(t).begin(), qr.row(t).end(), dst.begin());
      std::copy(qn.row(t).begin(), qn.row(t).end(), dst.begin() + static_cast<std::ptrdiff_t>(dr));
    }
  }
  Matrix kr = matmul_nt(x, layer.Wdk_rope);
  detail::rope_rows_inplace(kr, layer.rope);
  return {std::move(qhat), hstack(kr, matmul_nt(x, layer.Wdk_nope)), matmul_nt(x, layer.Wdv)};
}

/// Finishes attention given (possibly substituted) split activations.
inline Matrix split_attend(const SplitKeyLayer& layer, const SplitActivations& act) {
  const std::size_t h = layer.h, d = layer.d, gd = layer.g * layer.d, T = act.qhat.rows();
  const Matrix ohat = causal_attention(act.qhat, act.k, act.v, h, 1, layer.scale());
  Matrix o(T, h * d);
  for (std::size_t i = 0; i < h; ++i) {
    const Matrix oi = matmul_nt(col_slice(ohat, i * gd, (i + 1) * gd), row_slice(layer.Wuv, i * d, (i + 1) * d));
    for (std::size_t t = 0; t < T; ++t)
      std::copy(oi.row(t).begin(), oi.row(t).end(), o.row(t).begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return matmul_nt(o, layer.Wo);
}

inline Matrix split_forward(const SplitKeyLayer& layer, const Matrix& x) {
  return split_attend(layer, split_activations(layer, x));
}

/// Unscaled attention logits q̂_t,iᵀ k̂_j for every head (T×T each, all pairs).
inline std::vector<Matrix> split_logits(const SplitKeyLayer& layer, const Matrix& x) {
  const auto act = split_activations(layer, x);
  const std::size_t gd = layer.g * layer.d;
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < layer.h; ++i) out.push_back(matmul_nt(col_slice(act.qhat, i * gd, (i + 1) * gd), act.k));
  return out;
}

inline std::vector<Matrix> merged_logits(const MergedGqaLayer& layer, const Matrix& x) {
  Matrix qhat = merged_queries(layer, x);
  Matrix k = matmul_nt(x, layer.Wk);
  detail::rope_rows_inplace(qhat, layer.rope);
  detail::rope_rows_inplace(k, layer.rope);
  const std::size_t gd = layer.g * layer.d;
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < layer.h; ++i) out.push_back(matmul_nt(col_slice(qhat, i * gd, (i + 1) * gd), k));
  return out;
}

// ---------------------------------------------------------------------------
// Joint PCA over concatenated groups vs separate per-group PCA

struct Prop2Values {
  double v1 = 0.0;  // Σ_p top eigenvalue of each group's covariance
  double v2 = 0.0;  // Σ top-M eigenvalues of the concatenated covariance
};

/// Groups are N×d′ sample matrices; each is mean-centered here.
inline Prop2Values prop2_values(std::span<const Matrix> groups) {
  require(!groups.empty(), "prop2_values: no groups");
  const std::size_t n = groups.front().rows();
  require(n >= 2, "prop2_values: need n >= 2");
  Matrix concat(n, 0);
  Prop2Values out;
  for (const Matrix& g : groups) {
    require(g.rows() == n, "prop2_values: groups differ in sample count");
    const Matrix c = center_columns(g, column_means(g));
    out.v1 += sym_eig(covariance(c)).eigenvalues.front();
    concat = hstack(concat, c);
  }
  out.v2 = top_sum(sym_eig(covariance(concat)).eigenvalues, groups.size());
  return out;
}

/// Random correlated groups: X_p = Z·A_p + 0.5·E_p with a shared latent Z.
inline Prop2Values prop2_check(std::size_t M, std::size_t d_prime, std::size_t n, std::uint64_t seed) {
  require(n >= 2, "prop2_check: need n >= 2");
  require(M > 0 && d_prime > 0, "prop2_check: empty groups");
  const CounterRng rng(seed, 0x9201);
  const std::size_t latent = 2;
  const Matrix z = normal_matrix(rng.substream(0), n, latent);
  std::vector<Matrix> groups;
  for (std::size_t p = 0; p < M; ++p) {
    const Matrix a = normal_matrix(rng.substream(1 + 2 * p), latent, d_prime);
    const Matrix e = normal_matrix(rng.substream(2 + 2 * p), n, d_prime, 0.5);
    groups.push_back(add(matmul(z, a), e));
  }
  return prop2_values(groups);
}

}  // namespace transmla
