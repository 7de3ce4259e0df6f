#include <gtest/gtest.h>

#include "oracles.hpp"
#include "transmla/bkv.hpp"
#include "transmla/synth.hpp"

using namespace transmla;

namespace {

MergedGqaLayer rotated(std::uint64_t seed, std::size_t D, std::size_t h, std::size_t g, const Matrix& x) {
  const MergedGqaLayer m = merge_key_heads(synth_gqa(seed, D, h, g));
  return apply_rotations(m, solve_rotations(collect_key_stats(m, x, 1)));
}

SplitKeyLayer split_layer(std::uint64_t seed, std::size_t D, std::size_t h, std::size_t g, const Matrix& x,
                          std::size_t keep = 1) {
  return split_rope_nope(rotated(seed, D, h, g, x), keep);
}

double logit_gap(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i], b[i]));
  return m;
}

MlaLayer assemble(const SplitKeyLayer& s, const Matrix& x, std::size_t r_kv) {
  return assemble_mla(s, decompose_projections(s, joint_kv_pca(s, x, r_kv)));
}

// Rescales the NoPE key so E‖k_nope‖ / E‖v‖ equals target, logits unchanged.
SplitKeyLayer with_alpha(const SplitKeyLayer& s, const Matrix& x, double target) {
  const double a = compute_alpha(s, x).alpha;
  return balance(s, BalanceFactor{a / target, 0.0, 0.0});
}

// Substitutes c_t ← μ + R·Rᵀ·(c_t − μ) into the split activations, written
// with plain loops.
SplitActivations substitute(const SplitKeyLayer& s, SplitActivations act, const KvPcaBasis& b) {
  const std::size_t dr = s.d_rope, nope = s.nope_dim(), dim = b.basis.rows(), r = b.basis.cols();
  for (std::size_t t = 0; t < act.k.rows(); ++t) {
    std::vector<double> c(dim);
    for (std::size_t j = 0; j < nope; ++j) c[j] = act.k(t, dr + j) - b.mean[j];
    for (std::size_t j = 0; j < act.v.cols(); ++j) c[nope + j] = act.v(t, j) - b.mean[nope + j];
    std::vector<double> z(r, 0.0), rec(dim);
    for (std::size_t a = 0; a < r; ++a)
      for (std::size_t j = 0; j < dim; ++j) z[a] += b.basis(j, a) * c[j];
    for (std::size_t j = 0; j < dim; ++j) {
      rec[j] = b.mean[j];
      for (std::size_t a = 0; a < r; ++a) rec[j] += b.basis(j, a) * z[a];
    }
    for (std::size_t j = 0; j < nope; ++j) act.k(t, dr + j) = rec[j];
    for (std::size_t j = 0; j < act.v.cols(); ++j) act.v(t, j) = rec[nope + j];
  }
  return act;
}

}  // namespace

TEST(Alpha, ProportionalProjections) {
  const Matrix x = synth_calib(1, 30, 32);
  SplitKeyLayer s = split_layer(1, 32, 4, 2, x, 0);  // no RoPE part: nope width = gd
  ASSERT_EQ(s.nope_dim(), s.Wdv.rows());
  s.Wdk_nope = scaled(s.Wdv, 2.0);
  const BalanceFactor a = compute_alpha(s, x);
  EXPECT_DOUBLE_EQ(a.alpha, 2.0);
  EXPECT_DOUBLE_EQ(a.mean_knope_norm, 2.0 * a.mean_v_norm);
  s.Wdk_nope = s.Wdv;
  EXPECT_DOUBLE_EQ(compute_alpha(s, x).alpha, 1.0);
}

TEST(Alpha, MatchesTwoPassOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix x = synth_calib(seed, 50, 32);
    const SplitKeyLayer s = split_layer(seed, 32, 8, 4, x);
    const double kn = oracle::mean_row_norm(s.Wdk_nope, 0, s.Wdk_nope.rows(), x);
    const double vn = oracle::mean_row_norm(s.Wdv, 0, s.Wdv.rows(), x);
    const BalanceFactor a = compute_alpha(s, x);
    EXPECT_NEAR(a.alpha, kn / vn, 1e-12 * (kn / vn));
    EXPECT_NEAR(a.mean_knope_norm, kn, 1e-12 * kn);
    EXPECT_NEAR(a.mean_v_norm, vn, 1e-12 * vn);
  }
}

TEST(Alpha, Errors) {
  const Matrix x = synth_calib(2, 10, 32);
  SplitKeyLayer s = split_layer(2, 32, 4, 2, x);
  EXPECT_THROW(compute_alpha(s, Matrix(0, 32)), InvariantError);
  SplitKeyLayer zero_v = s;
  zero_v.Wdv = Matrix(s.Wdv.rows(), s.Wdv.cols());
  EXPECT_THROW(compute_alpha(zero_v, x), InvariantError);
  EXPECT_THROW(balance(s, BalanceFactor{std::nan(""), 0, 0}), InvariantError);
  EXPECT_THROW(balance(s, BalanceFactor{INFINITY, 0, 0}), InvariantError);
  EXPECT_THROW(balance(s, BalanceFactor{0.0, 0, 0}), InvariantError);
}

TEST(Balance, UnitAlphaIsIdentity) {
  const Matrix x = synth_calib(3, 10, 32);
  const SplitKeyLayer s = split_layer(3, 32, 4, 2, x);
  const SplitKeyLayer b = balance(s, BalanceFactor{1.0, 0, 0});
  EXPECT_EQ(b.Wdk_nope, s.Wdk_nope);
  EXPECT_EQ(b.Wuk_nope, s.Wuk_nope);
}

TEST(Balance, PreservesLogitsAndOutputs) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t D = 16 + 16 * (seed % 4), h = 4 << (seed % 2), g = 2;
    const Matrix x = synth_calib(seed, 1 + seed % 16, D);
    const SplitKeyLayer s = split_layer(seed, D, h, g, synth_calib(seed + 1000, 40, D));
    const SplitKeyLayer b = balance(s, compute_alpha(s, x));
    ASSERT_LE(logit_gap(split_logits(b, x), split_logits(s, x)), 1e-10) << "seed " << seed;
    ASSERT_LE(max_abs_diff(split_forward(b, x), split_forward(s, x)), 1e-10) << "seed " << seed;
  }
}

TEST(Balance, RecomputedAlphaIsOne) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix x = synth_calib(seed, 40, 32, CalibStructure::key_dominant(4.0));
    const SplitKeyLayer s = split_layer(seed, 32, 8, 4, x);
    EXPECT_NEAR(compute_alpha(balance(s, compute_alpha(s, x)), x).alpha, 1.0, 1e-9);
  }
}

TEST(JointPca, ExactLowRankReconstruction) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::size_t r = 3 + seed;
    const Matrix x = synth_calib(seed, 60, 32, CalibStructure::low_rank(r));
    const SplitKeyLayer s = split_layer(seed, 32, 4, 2, x);
    const KvPcaBasis b = joint_kv_pca(s, x, r);
    EXPECT_LE(orthonormal_defect(b.basis), 1e-10);
    const KvReconstructionError e = kv_reconstruction_error(s, x, b);
    EXPECT_LE(e.key, 1e-9);
    EXPECT_LE(e.value, 1e-9);
    EXPECT_NEAR(b.captured_energy_fraction, 1.0, 1e-9);
  }
}

TEST(JointPca, FullRankCapturesEverything) {
  const Matrix x = synth_calib(4, 80, 32);
  const SplitKeyLayer s = split_layer(4, 32, 8, 4, x);
  const std::size_t full = s.nope_dim() + s.g * s.d;
  EXPECT_EQ(full, (2 * s.g - 1) * s.d);
  const KvPcaBasis b = joint_kv_pca(s, x, full);
  EXPECT_DOUBLE_EQ(b.captured_energy_fraction, 1.0);
  EXPECT_LE(orthonormal_defect(b.basis), 1e-10);
  const KvReconstructionError e = kv_reconstruction_error(s, x, b);
  EXPECT_LE(e.key + e.value, 1e-20);
}

TEST(JointPca, CapturedFractionMatchesOracle) {
  const Matrix x = synth_calib(5, 50, 16);
  const SplitKeyLayer s = split_layer(5, 16, 4, 2, x);  // dim = 3·4 = 12
  const Matrix w = vstack(s.Wdk_nope, s.Wdv);
  // Centered covariance written out.
  const std::size_t n = x.rows(), dim = w.rows();
  std::vector<oracle::Vec> c(n);
  oracle::Vec mu(dim, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    c[t] = oracle::project(w, 0, dim, x, t);
    for (std::size_t j = 0; j < dim; ++j) mu[j] += c[t][j] / static_cast<double>(n);
  }
  Matrix cov(dim, dim);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t a = 0; a < dim; ++a)
      for (std::size_t b = 0; b < dim; ++b) cov(a, b) += (c[t][a] - mu[a]) * (c[t][b] - mu[b]) / double(n - 1);
  double total = 0.0;
  for (std::size_t j = 0; j < dim; ++j) total += cov(j, j);
  for (std::size_t r : {1, 4, 7, 11}) {
    const KvPcaBasis b = joint_kv_pca(s, x, r);
    EXPECT_NEAR(b.captured_energy_fraction, oracle::top_eigen_sum(cov, r) / total, 1e-8) << "r " << r;
    EXPECT_NEAR(oracle::trace_top(cov, b.basis, r), oracle::top_eigen_sum(cov, r), 1e-8 * total);
  }
}

TEST(JointPca, Errors) {
  const Matrix x = synth_calib(6, 10, 16);
  const SplitKeyLayer s = split_layer(6, 16, 4, 2, x);
  EXPECT_THROW(joint_kv_pca(s, x, 13), InvariantError);
  EXPECT_THROW(joint_kv_pca(s, row_slice(x, 0, 5), 8), InvariantError);
  EXPECT_THROW(joint_kv_pca(s, row_slice(x, 0, 1), 1), InvariantError);
  EXPECT_NO_THROW(joint_kv_pca(s, Matrix(0, 16), 4, PcaSource::kWeights));
}

TEST(JointPca, MonotoneInRank) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix x = synth_calib(seed, 60, 32);
    const SplitKeyLayer s = split_layer(seed, 32, 4, 2, x);
    double prev_frac = -1.0, prev_err = INFINITY;
    for (std::size_t r = 1; r <= 24; ++r) {
      const KvPcaBasis b = joint_kv_pca(s, x, r);
      const KvReconstructionError e = kv_reconstruction_error(s, x, b);
      const double err = e.key + e.value;
      EXPECT_GE(b.captured_energy_fraction, prev_frac - 1e-12);
      EXPECT_LE(err, prev_err + 1e-12);
      prev_frac = b.captured_energy_fraction;
      prev_err = err;
    }
  }
}

TEST(Decompose, FullRankPreservesOutputs) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix fit = synth_calib(seed, 80, 32);
    const Matrix x = synth_calib(seed + 500, 1 + seed % 16, 32);
    const SplitKeyLayer s = split_layer(seed, 32, 4, 2, fit);
    const SplitKeyLayer b = balance(s, compute_alpha(s, fit));
    const MlaLayer mla = assemble(b, fit, b.nope_dim() + b.g * b.d);
    ASSERT_LE(max_abs_diff(mla_forward_absorbed(mla, x).y, split_forward(b, x)), 1e-9) << "seed " << seed;
  }
}

TEST(Decompose, DownAndUpProjectionShapes) {
  const Matrix x = synth_calib(7, 40, 32);
  const SplitKeyLayer s = split_layer(7, 32, 4, 2, x);
  const KvPcaBasis basis = joint_kv_pca(s, x, 10);
  const KvDecomposition p = decompose_projections(s, basis);
  EXPECT_EQ(p.Wdkv, matmul_tn(basis.basis, vstack(s.Wdk_nope, s.Wdv)));
  EXPECT_EQ(p.Wuk.rows(), 32u);
  EXPECT_EQ(p.Wuk.cols(), 10u);
  EXPECT_EQ(p.Wuv.cols(), 10u);
  KvPcaBasis bad = basis;
  bad.basis = Matrix(5, 10);
  EXPECT_THROW(decompose_projections(s, bad), InvariantError);
}

TEST(Decompose, TrueLatentRankIsExact) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t r = 5 + seed % 4;
    const Matrix x = synth_calib(seed, 60, 32);
    SplitKeyLayer s = split_layer(seed, 32, 4, 2, x);
    // [Wdk_nope; Wdv] = A·B with B r × D.
    const Matrix a = normal_matrix(CounterRng(seed, 1), s.nope_dim() + s.Wdv.rows(), r);
    const Matrix bm = normal_matrix(CounterRng(seed, 2), r, 32, 0.2);
    const Matrix w = matmul(a, bm);
    s.Wdk_nope = row_slice(w, 0, s.nope_dim());
    s.Wdv = row_slice(w, s.nope_dim(), w.rows());
    const Matrix y = synth_calib(seed + 99, 12, 32);
    EXPECT_LE(max_abs_diff(mla_forward_absorbed(assemble(s, x, r), y).y, split_forward(s, y)), 1e-8);
  }
}

TEST(Decompose, TruncationErrorEqualsProjectionOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix x = synth_calib(seed, 60, 32);
    const SplitKeyLayer s = split_layer(seed, 32, 4, 2, x);
    const KvPcaBasis basis = joint_kv_pca(s, x, 6);
    const MlaLayer mla = assemble_mla(s, decompose_projections(s, basis));
    const Matrix y = synth_calib(seed + 7, 12, 32);
    const Matrix got = mla_forward_absorbed(mla, y).y;
    const Matrix expected = split_attend(s, substitute(s, split_activations(s, y), basis));
    EXPECT_GT(max_abs_diff(got, split_forward(s, y)), 1e-6);
    EXPECT_LE(max_abs_diff(got, expected), 1e-9) << "seed " << seed;
  }
}

TEST(QueryCompression, FullRankIsIdentityBehaviour) {
  const Matrix x = synth_calib(8, 60, 16);
  const SplitKeyLayer s = split_layer(8, 16, 2, 2, x);  // width h(d+dR) = 32
  const MlaLayer mla = assemble(s, x, 12);
  const QueryCompression q = compress_query(mla, x, 32);
  EXPECT_NEAR(q.captured_energy_fraction, 1.0, 1e-12);
  EXPECT_EQ(q.layer.r_q, 32u);
  const Matrix y = synth_calib(18, 10, 16);
  EXPECT_LE(max_abs_diff(mla_forward_absorbed(q.layer, y).y, mla_forward_absorbed(mla, y).y), 1e-9);
  EXPECT_LE(max_abs_diff(mla_forward_mha_paradigm(q.layer, y), mla_forward_absorbed(q.layer, y).y), 1e-10);
}

TEST(QueryCompression, LowRankQueriesAreExact) {
  const Matrix x = synth_calib(9, 60, 16);
  MlaLayer mla = assemble(split_layer(9, 16, 2, 2, x), x, 12);
  const std::size_t r = 5;
  const Matrix q = matmul(normal_matrix(CounterRng(9, 1), 32, r), normal_matrix(CounterRng(9, 2), r, 16, 0.3));
  mla.Wq_nope = row_slice(q, 0, 16);
  mla.Wq_rope = row_slice(q, 16, 32);
  const QueryCompression c = compress_query(mla, x, r);
  const Matrix y = synth_calib(19, 10, 16);
  EXPECT_LE(max_abs_diff(mla_forward_absorbed(c.layer, y).y, mla_forward_absorbed(mla, y).y), 1e-9);
  EXPECT_NEAR(c.captured_energy_fraction, 1.0, 1e-12);
}

TEST(QueryCompression, EnergyGapShrinksWithRank) {
  const Matrix x = synth_calib(10, 60, 16);
  const MlaLayer mla = assemble(split_layer(10, 16, 2, 2, x), x, 12);
  const Matrix acts = matmul_nt(x, vstack(mla.Wq_nope, mla.Wq_rope));
  const Matrix gram = matmul_tn(acts, acts);
  double total = 0.0;
  for (std::size_t j = 0; j < gram.rows(); ++j) total += gram(j, j);
  double prev_gap = INFINITY;
  for (std::size_t r = 1; r <= 32; ++r) {
    const double gap = 1.0 - compress_query(mla, x, r).captured_energy_fraction;
    EXPECT_LE(gap, prev_gap + 1e-12);
    if (r % 5 == 0) EXPECT_NEAR(gap, 1.0 - oracle::top_eigen_sum(gram, r) / total, 1e-8) << "r " << r;
    prev_gap = gap;
  }
}

TEST(QueryCompression, Errors) {
  const Matrix x = synth_calib(11, 30, 16);
  const MlaLayer mla = assemble(split_layer(11, 16, 2, 2, x), x, 12);
  EXPECT_THROW(compress_query(mla, x, 0), InvariantError);
  EXPECT_THROW(compress_query(mla, x, 33), InvariantError);
  EXPECT_THROW(compress_query(mla, Matrix(4, 8), 4), InvariantError);
}

TEST(Assemble, CacheAccounting) {
  const Matrix x = synth_calib(12, 60, 32);
  const SplitKeyLayer s = split_layer(12, 32, 4, 2, x);  // d = 8, 2gd = 32
  const MlaLayer full = assemble(s, x, 3 * 8);
  EXPECT_EQ(full.d_rope, 8u);
  EXPECT_EQ(full.cache_scalars_per_token(), 32u);
  EXPECT_DOUBLE_EQ(cache_reduction_percent(32, full.cache_scalars_per_token()), 0.0);
  EXPECT_EQ(assemble(s, x, 8).cache_scalars_per_token(), 16u);
  EXPECT_NEAR(cache_reduction_percent(8192, 512 + 64), 92.96875, 1e-12);
}

TEST(Assemble, ParadigmsAgreeAndTraceCachesLatent) {
  const Matrix x = synth_calib(13, 60, 32);
  const SplitKeyLayer s = split_layer(13, 32, 4, 2, x);
  const MlaLayer mla = assemble(balance(s, compute_alpha(s, x)), x, 10);
  const Matrix y = synth_calib(14, 9, 32);
  const AbsorbedOutput out = mla_forward_absorbed(mla, y);
  EXPECT_LE(max_abs_diff(out.y, mla_forward_mha_paradigm(mla, y)), 1e-10);
  EXPECT_EQ(out.cache_trace, std::vector<std::size_t>(9, 18));
}

TEST(Assemble, FullRankRoundTripMatchesMergedLayer) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix x = synth_calib(seed, 60, 32);
    MergedGqaLayer m = rotated(seed, 32, 4, 2, x);
    // Queries ignore the trailing key dims, so dropping their RoPE is exact.
    for (std::size_t r = 0; r < m.Wuk.rows(); ++r)
      for (std::size_t c = m.d; c < m.g * m.d; ++c) m.Wuk(r, c) = 0.0;
    const SplitKeyLayer s = split_rope_nope(m, 1);
    const SplitKeyLayer b = balance(s, compute_alpha(s, x));
    const MlaLayer mla = assemble(b, x, b.nope_dim() + b.g * b.d);
    const Matrix y = synth_calib(seed + 3, 1 + seed % 16, 32);
    ASSERT_LE(max_abs_diff(mla_forward_absorbed(mla, y).y, merged_forward(m, y)), 1e-8) << "seed " << seed;
  }
}

TEST(Assemble, InconsistentPartsRejected) {
  const Matrix x = synth_calib(15, 40, 32);
  const SplitKeyLayer s = split_layer(15, 32, 4, 2, x);
  KvDecomposition p = decompose_projections(s, joint_kv_pca(s, x, 8));
  p.Wuk = Matrix(32, 7);
  EXPECT_THROW(assemble_mla(s, p), InvariantError);
}

// With NoPE keys four times the values in mean norm, unbalanced PCA spends
// its rank on keys; balancing should improve the value reconstruction.
TEST(Bkv, BalancingLowersValueErrorOnKeyDominantLayers) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Matrix x = synth_calib(seed, 128, 32, CalibStructure::key_dominant(4.0));
    const SplitKeyLayer s = with_alpha(split_layer(seed, 32, 4, 2, x), x, 4.0);
    const std::size_t r = 12;  // of 24
    const double plain = kv_reconstruction_error(s, x, joint_kv_pca(s, x, r)).value;
    const SplitKeyLayer b = balance(s, compute_alpha(s, x));
    const double balanced = kv_reconstruction_error(b, x, joint_kv_pca(b, x, r)).value;
    wins += balanced < plain;
  }
  EXPECT_GE(wins, 90);
}
