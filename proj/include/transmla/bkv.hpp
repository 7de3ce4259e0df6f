#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "transmla/attention.hpp"
#include "transmla/linalg.hpp"
#include "transmla/rorope.hpp"

namespace transmla {

// Balanced joint low-rank compression of NoPE keys and values, and assembly
// of the final latent-attention layer.

struct BalanceFactor {
  double alpha = 1.0;
  double mean_knope_norm = 0.0;
  double mean_v_norm = 0.0;
};

struct NormMeans {
  double knope = 0.0;  // E_t ‖Wdk_nope·x_t‖₂
  double v = 0.0;      // E_t ‖Wdv·x_t‖₂
};

inline NormMeans nope_value_norm_means(const SplitKeyLayer& split, const Matrix& x) {
  split.validate();
  require(x.rows() > 0, "nope_value_norm_means: empty calibration stream");
  require(x.cols() == split.D, "nope_value_norm_means: stream width != D");
  const Matrix kn = matmul_nt(x, split.Wdk_nope);
  const Matrix v = matmul_nt(x, split.Wdv);
  NormMeans m;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    m.knope += norm2(kn.row(t));
    m.v += norm2(v.row(t));
  }
  m.knope /= static_cast<double>(x.rows());
  m.v /= static_cast<double>(x.rows());
  return m;
}

/// α = E‖k_nope‖ / E‖v‖ over the stream, norms taken over the full
/// concatenated NoPE-key (resp. value) vector of each token.
inline BalanceFactor compute_alpha(const SplitKeyLayer& split, const Matrix& x) {
  const NormMeans m = nope_value_norm_means(split, x);
  require(m.v > 0.0, "compute_alpha: mean value norm is zero");
  require(m.knope > 0.0, "compute_alpha: mean NoPE key norm is zero, nothing to balance");
  return {m.knope / m.v, m.knope, m.v};
}

/// Wdk_nope /= α and Wuk_nope *= α: the NoPE logits are unchanged.
inline SplitKeyLayer balance(const SplitKeyLayer& split, const BalanceFactor& a) {
  require(std::isfinite(a.alpha) && a.alpha > 0.0, "balance: alpha must be finite and positive");
  SplitKeyLayer out = split;
  out.Wdk_nope = scaled(split.Wdk_nope, 1.0 / a.alpha);
  out.Wuk_nope = scaled(split.Wuk_nope, a.alpha);
  return out;
}

enum class PcaSource {
  kActivations,  // covariance of c_t = [Wdk_nope·x_t; Wdv·x_t] over the stream
  kWeights,      // W·Wᵀ of the stacked down-projection, no data
};

struct KvPcaBasis {
  std::vector<double> mean;         // of the concatenated activations (zeros for weight-based)
  Matrix basis;                     // (nope+gd) × r_kv, orthonormal columns
  double captured_energy_fraction = 1.0;
  std::vector<double> eigenvalues;  // full spectrum, descending
};

inline Matrix stacked_kv_down(const SplitKeyLayer& split) { return vstack(split.Wdk_nope, split.Wdv); }

/// c_t = [k_nope,t; v_t] for every token, n × (nope+gd).
inline Matrix nope_kv_activations(const SplitKeyLayer& split, const Matrix& x) {
  return matmul_nt(x, stacked_kv_down(split));
}

/// Top-r_kv principal directions of the (centered) NoPE-key/value activations.
inline KvPcaBasis joint_kv_pca(const SplitKeyLayer& balanced, const Matrix& x, std::size_t r_kv,
                               PcaSource source = PcaSource::kActivations) {
  balanced.validate();
  const std::size_t dim = balanced.nope_dim() + balanced.g * balanced.d;
  require(r_kv <= dim, "joint_kv_pca: r_kv " + std::to_string(r_kv) + " exceeds " + std::to_string(dim));

  KvPcaBasis out;
  Matrix cov;
  if (source == PcaSource::kActivations) {
    require(x.rows() >= std::max<std::size_t>(2, r_kv),
            "joint_kv_pca: " + std::to_string(x.rows()) + " samples is too few for r_kv = " + std::to_string(r_kv));
    const Matrix c = nope_kv_activations(balanced, x);
    out.mean = column_means(c);
    cov = covariance(center_columns(c, out.mean));
  } else {
    const Matrix w = stacked_kv_down(balanced);
    out.mean.assign(dim, 0.0);
    cov = matmul_nt(w, w);
  }
  auto eig = sym_eig(cov);
  out.basis = col_slice(eig.eigenvectors, 0, r_kv);
  double total = 0.0;
  for (double lam : eig.eigenvalues) total += std::max(0.0, lam);
  double kept = 0.0;
  for (std::size_t i = 0; i < r_kv; ++i) kept += std::max(0.0, eig.eigenvalues[i]);
  out.captured_energy_fraction = total > 0.0 ? std::min(1.0, kept / total) : 1.0;
  out.eigenvalues = std::move(eig.eigenvalues);
  return out;
}

struct KvDecomposition {
  Matrix Wdkv;                        // r_kv × D
  Matrix Wuk;                         // hd × r_kv
  Matrix Wuv;                         // hd × r_kv
  std::vector<double> residual_mean;  // (I − R·Rᵀ)·μ, what the latent cannot carry
};

/// Wdkv' = Rᵀ·[Wdk_nope; Wdv] and the up-projections blockdiag(Wuk_nope, Wuv)·R.
inline KvDecomposition decompose_projections(const SplitKeyLayer& balanced, const KvPcaBasis& basis) {
  balanced.validate();
  const std::size_t nope = balanced.nope_dim(), gd = balanced.g * balanced.d;
  const Matrix& r = basis.basis;
  require(r.rows() == nope + gd, "decompose_projections: basis height != nope + gd");
  require(basis.mean.size() == nope + gd, "decompose_projections: mean length mismatch");

  KvDecomposition out;
  out.Wdkv = matmul_tn(r, stacked_kv_down(balanced));
  out.Wuk = matmul(balanced.Wuk_nope, row_slice(r, 0, nope));
  out.Wuv = matmul(balanced.Wuv, row_slice(r, nope, nope + gd));
  const auto proj = matvec(r, matvec_t(r, basis.mean));
  out.residual_mean.resize(basis.mean.size());
  for (std::size_t i = 0; i < proj.size(); ++i) out.residual_mean[i] = basis.mean[i] - proj[i];
  return out;
}

/// Builds the latent-attention layer. Queries are rescaled by √((d+d_rope)/d)
/// so the 1/√(d_nope+d_rope) softmax scale reproduces the source's 1/√d
/// logits. The key-side mean residual is a per-query constant across key
/// positions and cancels in the softmax; the value-side residual becomes the
/// output bias.
inline MlaLayer assemble_mla(const SplitKeyLayer& balanced, const KvDecomposition& parts) {
  balanced.validate();
  const std::size_t h = balanced.h, d = balanced.d, dr = balanced.d_rope, D = balanced.D;
  const std::size_t r = parts.Wdkv.rows(), nope = balanced.nope_dim(), gd = balanced.g * d;
  require_shape(parts.Wdkv, r, D, "assemble_mla: Wdkv");
  require_shape(parts.Wuk, h * d, r, "assemble_mla: Wuk");
  require_shape(parts.Wuv, h * d, r, "assemble_mla: Wuv");
  require(parts.residual_mean.empty() || parts.residual_mean.size() == nope + gd,
          "assemble_mla: residual mean length mismatch");

  const double s = std::sqrt(static_cast<double>(d + dr) / static_cast<double>(d));
  MlaLayer mla;
  mla.D = D;
  mla.h = h;
  mla.d_nope = d;
  mla.d_rope = dr;
  mla.r_kv = r;
  mla.Wdkv = parts.Wdkv;
  mla.Wuk = parts.Wuk;
  mla.Wuv = parts.Wuv;
  mla.Wkr = balanced.Wdk_rope;
  mla.Wq_nope = scaled(balanced.Wq, s);
  mla.Wq_rope = Matrix(h * dr, D);
  for (std::size_t i = 0; i < h; ++i) {
    const Matrix qr = matmul_tn(row_slice(balanced.Wuk_rope, i * d, (i + 1) * d),
                                row_slice(balanced.Wq, i * d, (i + 1) * d));  // dr × D
    for (std::size_t row = 0; row < dr; ++row)
      for (std::size_t c = 0; c < D; ++c) mla.Wq_rope(i * dr + row, c) = s * qr(row, c);
  }
  mla.Wo = balanced.Wo;
  mla.rope = balanced.rope;

  if (!parts.residual_mean.empty()) {
    const std::vector<double> bv(parts.residual_mean.begin() + static_cast<std::ptrdiff_t>(nope),
                                 parts.residual_mean.end());
    const auto head_bias = matvec(balanced.Wuv, bv);  // hd
    auto bias = matvec(balanced.Wo, head_bias);
    double mx = 0.0;
    for (double b : bias) mx = std::max(mx, std::abs(b));
    if (mx > 0.0) mla.out_bias = std::move(bias);
  }
  mla.validate();
  return mla;
}

// ---------------------------------------------------------------------------
// Low-rank query

struct QueryCompression {
  MlaLayer layer;
  double captured_energy_fraction = 1.0;
};

/// Factors the stacked query projection through r_q dims using the top
/// principal directions of the (uncentered) query activations. Uncentered so
/// the factorization stays bias-free: a query offset would shift logits per
/// key position and not cancel in the softmax.
inline QueryCompression compress_query(const MlaLayer& layer, const Matrix& x, std::size_t r_q) {
  layer.validate();
  const std::size_t width = layer.h * (layer.d_nope + layer.d_rope);
  require(r_q > 0 && r_q <= width, "compress_query: r_q must be in [1, " + std::to_string(width) + "]");
  require(x.cols() == layer.D && x.rows() > 0, "compress_query: bad calibration stream");

  const Matrix stacked = layer.has_low_rank_q() ? matmul(layer.Wuq, layer.Wdq) : vstack(layer.Wq_nope, layer.Wq_rope);
  const Matrix acts = matmul_nt(x, stacked);
  auto eig = sym_eig(matmul_tn(acts, acts));
  const Matrix rq = col_slice(eig.eigenvectors, 0, r_q);

  QueryCompression out{layer, 1.0};
  out.layer.r_q = r_q;
  out.layer.Wdq = matmul_tn(rq, stacked);
  out.layer.Wuq = rq;
  out.layer.Wq_nope = Matrix();
  out.layer.Wq_rope = Matrix();
  double total = 0.0, kept = 0.0;
  for (std::size_t i = 0; i < eig.eigenvalues.size(); ++i) {
    const double lam = std::max(0.0, eig.eigenvalues[i]);
    total += lam;
    if (i < r_q) kept += lam;
  }
  out.captured_energy_fraction = total > 0.0 ? std::min(1.0, kept / total) : 1.0;
  out.layer.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction diagnostics

struct KvReconstructionError {
  double key = 0.0;    // Σ‖k − k̂‖² / Σ‖k − μ_k‖² on the NoPE keys as fitted
  double value = 0.0;  // same for values
};

/// Relative error of reconstructing c_t as μ + R·Rᵀ·(c_t − μ), split into the
/// key and value blocks. `fitted` must be the layer the basis was fitted on.
inline KvReconstructionError kv_reconstruction_error(const SplitKeyLayer& fitted, const Matrix& x,
                                                     const KvPcaBasis& basis) {
  const Matrix c = nope_kv_activations(fitted, x);
  const std::size_t nope = fitted.nope_dim();
  require(basis.basis.rows() == c.cols(), "kv_reconstruction_error: basis does not match layer");
  const Matrix centered = center_columns(c, basis.mean);
  const Matrix recon = matmul_nt(matmul(centered, basis.basis), basis.basis);
  const auto mu = column_means(c);
  double kerr = 0.0, kden = 0.0, verr = 0.0, vden = 0.0;
  for (std::size_t t = 0; t < c.rows(); ++t) {
    for (std::size_t j = 0; j < c.cols(); ++j) {
      const double e = centered(t, j) - recon(t, j);
      const double dev = c(t, j) - mu[j];
      if (j < nope) {
        kerr += e * e;
        kden += dev * dev;
      } else {
        verr += e * e;
        vden += dev * dev;
      }
    }
  }
  return {kden > 0.0 ? kerr / kden : 0.0, vden > 0.0 ? verr / vden : 0.0};
}

}  // namespace transmla
