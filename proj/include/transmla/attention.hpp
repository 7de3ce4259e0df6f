#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "transmla/matrix.hpp"
#include "transmla/rope.hpp"

namespace transmla {

/// Whether a forward pass applies the layer's rotary schedule. kNone gives
/// the content-only attention used by the RoPE-free expressiveness rewrites.
enum class Positional { kRope, kNone };

namespace detail {

inline void softmax_inplace(std::span<double> s) {
  if (s.empty()) return;
  const double mx = *std::max_element(s.begin(), s.end());
  double sum = 0.0;
  for (double& v : s) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : s) v /= sum;
}

/// Rotates every head block of every row; row t is at position t + pos0.
inline void rope_rows_inplace(Matrix& m, const RopeSchedule& sched, std::int64_t pos0 = 0) {
  for (std::size_t t = 0; t < m.rows(); ++t)
    apply_rope_blocks_inplace(m.row(t), static_cast<std::int64_t>(t) + pos0, sched);
}

}  // namespace detail

/// Causal multi-head attention over precomputed projections.
///
/// q is T×(n_heads·dq), k is T×(n_kv·dq), v is T×(n_kv·dv); query head i reads
/// kv head i / (n_heads / n_kv). Returns the concatenated head outputs,
/// T×(n_heads·dv).
inline Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n_heads,
                               std::size_t n_kv, double scale) {
  require(n_heads > 0 && n_kv > 0 && n_heads % n_kv == 0, "causal_attention: heads must divide evenly");
  require(q.rows() == k.rows() && k.rows() == v.rows(), "causal_attention: sequence lengths differ");
  require(q.cols() % n_heads == 0 && v.cols() % n_kv == 0, "causal_attention: width not divisible by heads");
  const std::size_t dq = q.cols() / n_heads;
  const std::size_t dv = v.cols() / n_kv;
  require(k.cols() == n_kv * dq, "causal_attention: key width " + std::to_string(k.cols()) +
                                     " != " + std::to_string(n_kv * dq));
  const std::size_t T = q.rows();
  const std::size_t per_kv = n_heads / n_kv;

  Matrix out(T, n_heads * dv);
  std::vector<double> scores(T);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < n_heads; ++i) {
      const std::size_t kv = i / per_kv;
      auto qi = q.row(t).subspan(i * dq, dq);
      for (std::size_t j = 0; j <= t; ++j) scores[j] = scale * dot(qi, k.row(j).subspan(kv * dq, dq));
      std::span<double> sc(scores.data(), t + 1);
      detail::softmax_inplace(sc);
      auto oi = out.row(t).subspan(i * dv, dv);
      for (std::size_t j = 0; j <= t; ++j) {
        auto vj = v.row(j).subspan(kv * dv, dv);
        const double p = sc[j];
        for (std::size_t c = 0; c < dv; ++c) oi[c] += p * vj[c];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grouped-query attention

struct GqaLayer {
  std::size_t D = 0;  // hidden size
  std::size_t h = 0;  // query heads
  std::size_t g = 0;  // kv groups
  std::size_t d = 0;  // head dim, D / h
  Matrix Wq;          // hd × D
  Matrix Wk;          // gd × D
  Matrix Wv;          // gd × D
  Matrix Wo;          // D × hd
  RopeSchedule rope;  // over d

  void validate() const {
    require(h > 0 && g > 0 && d > 0, "GqaLayer: zero dimension");
    require(h % g == 0, "GqaLayer: g must divide h");
    require(h * d == D, "GqaLayer: h*d != D");
    require(d % 2 == 0, "GqaLayer: head dim must be even");
    require_shape(Wq, h * d, D, "GqaLayer.Wq");
    require_shape(Wk, g * d, D, "GqaLayer.Wk");
    require_shape(Wv, g * d, D, "GqaLayer.Wv");
    require_shape(Wo, D, h * d, "GqaLayer.Wo");
    require(rope.dim() == d, "GqaLayer: rope schedule dim != head dim");
  }

  std::size_t cache_scalars_per_token() const { return 2 * g * d; }
};

/// y_t = Wo·[o_t,1; …; o_t,h] with o_t,i attending over positions ≤ t of its
/// group's key/value head, scale 1/√d.
inline Matrix gqa_forward(const GqaLayer& layer, const Matrix& x, Positional pos = Positional::kRope) {
  layer.validate();
  require(x.cols() == layer.D, "gqa_forward: input width " + std::to_string(x.cols()) + " != D");
  Matrix q = matmul_nt(x, layer.Wq);
  Matrix k = matmul_nt(x, layer.Wk);
  const Matrix v = matmul_nt(x, layer.Wv);
  if (pos == Positional::kRope) {
    detail::rope_rows_inplace(q, layer.rope);
    detail::rope_rows_inplace(k, layer.rope);
  }
  const Matrix o = causal_attention(q, k, v, layer.h, layer.g, 1.0 / std::sqrt(static_cast<double>(layer.d)));
  return matmul_nt(o, layer.Wo);
}

// ---------------------------------------------------------------------------
// Multi-head latent attention

struct MlaLayer {
  std::size_t D = 0;
  std::size_t h = 0;
  std::size_t d_nope = 0;  // per-head content dim (keys and values)
  std::size_t d_rope = 0;  // shared rotary key dim
  std::size_t r_kv = 0;    // latent dim
  Matrix Wdkv;             // r_kv × D
  Matrix Wuk;              // h·d_nope × r_kv
  Matrix Wuv;              // h·d_nope × r_kv
  Matrix Wkr;              // d_rope × D
  Matrix Wq_nope;          // h·d_nope × D   (empty when the query is factored)
  Matrix Wq_rope;          // h·d_rope × D   (empty when the query is factored)
  Matrix Wo;               // D × h·d_nope
  RopeSchedule rope;       // over d_rope

  // Optional low-rank query: [q^C; q^R] = Wuq·(Wdq·x), content rows first.
  std::size_t r_q = 0;
  Matrix Wdq;  // r_q × D
  Matrix Wuq;  // h·(d_nope+d_rope) × r_q

  // Constant added to every output row. Carries the value-side mean residual
  // of a centered latent projection; empty means zero.
  std::vector<double> out_bias;

  bool has_low_rank_q() const { return r_q > 0; }
  double scale() const { return 1.0 / std::sqrt(static_cast<double>(d_nope + d_rope)); }
  std::size_t cache_scalars_per_token() const { return r_kv + d_rope; }

  void validate() const {
    require(D > 0 && h > 0, "MlaLayer: zero dimension");
    require(d_nope + d_rope > 0, "MlaLayer: empty head");
    require(d_rope % 2 == 0, "MlaLayer: rope dim must be even");
    require_shape(Wdkv, r_kv, D, "MlaLayer.Wdkv");
    require_shape(Wuk, h * d_nope, r_kv, "MlaLayer.Wuk");
    require_shape(Wuv, h * d_nope, r_kv, "MlaLayer.Wuv");
    require_shape(Wkr, d_rope, D, "MlaLayer.Wkr");
    require_shape(Wo, D, h * d_nope, "MlaLayer.Wo");
    require(rope.dim() == d_rope, "MlaLayer: rope schedule dim != d_rope");
    if (has_low_rank_q()) {
      require_shape(Wdq, r_q, D, "MlaLayer.Wdq");
      require_shape(Wuq, h * (d_nope + d_rope), r_q, "MlaLayer.Wuq");
    } else {
      require_shape(Wq_nope, h * d_nope, D, "MlaLayer.Wq_nope");
      require_shape(Wq_rope, h * d_rope, D, "MlaLayer.Wq_rope");
    }
    require(out_bias.empty() || out_bias.size() == D, "MlaLayer: out_bias length != D");
  }
};

struct MlaQueries {
  Matrix content;  // T × h·d_nope
  Matrix rope;     // T × h·d_rope, position-free (RoPE not yet applied)
};

inline MlaQueries mla_queries(const MlaLayer& layer, const Matrix& x) {
  if (!layer.has_low_rank_q()) return {matmul_nt(x, layer.Wq_nope), matmul_nt(x, layer.Wq_rope)};
  const Matrix q = matmul_nt(matmul_nt(x, layer.Wdq), layer.Wuq);
  const std::size_t nc = layer.h * layer.d_nope;
  return {col_slice(q, 0, nc), col_slice(q, nc, q.cols())};
}

namespace detail {
inline void add_bias_rows(Matrix& y, const std::vector<double>& bias) {
  if (bias.empty()) return;
  for (std::size_t t = 0; t < y.rows(); ++t)
    for (std::size_t c = 0; c < y.cols(); ++c) y(t, c) += bias[c];
}
}  // namespace detail

/// Training-style path: per-head keys [k^C_i; k^R], values W^UV_i·c^KV.
inline Matrix mla_forward_mha_paradigm(const MlaLayer& layer, const Matrix& x) {
  layer.validate();
  require(x.cols() == layer.D, "mla_forward_mha_paradigm: input width != D");
  const std::size_t T = x.rows(), h = layer.h, dn = layer.d_nope, dr = layer.d_rope;
  const Matrix c = matmul_nt(x, layer.Wdkv);
  const Matrix kc = matmul_nt(c, layer.Wuk);
  const Matrix v = matmul_nt(c, layer.Wuv);
  Matrix kr = matmul_nt(x, layer.Wkr);
  detail::rope_rows_inplace(kr, layer.rope);
  auto [qc, qr] = mla_queries(layer, x);
  detail::rope_rows_inplace(qr, layer.rope);

  Matrix q(T, h * (dn + dr)), k(T, h * (dn + dr));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < h; ++i) {
      auto qdst = q.row(t).subspan(i * (dn + dr), dn + dr);
      auto kdst = k.row(t).subspan(i * (dn + dr), dn + dr);
      std::copy_n(qc.row(t).begin() + static_cast<std::ptrdiff_t>(i * dn), dn, qdst.begin());
      std::copy_n(qr.row(t).begin() + static_cast<std::ptrdiff_t>(i * dr), dr, qdst.begin() + static_cast<std::ptrdiff_t>(dn));
      std::copy_n(kc.row(t).begin() + static_cast<std::ptrdiff_t>(i * dn), dn, kdst.begin());
      std::copy_n(kr.row(t).begin(), dr, kdst.begin() + static_cast<std::ptrdiff_t>(dn));
    }
  }
  const Matrix o = causal_attention(q, k, v, h, h, layer.scale());
  Matrix y = matmul_nt(o, layer.Wo);
  detail::add_bias_rows(y, layer.out_bias);
  return y;
}

struct AbsorbedOutput {
  Matrix y;
  std::vector<std::size_t> cache_trace;  // scalars stored per token
};

/// Inference path: W^UK folded into the queries, W^UV into the output, so
/// every head attends over the shared cache [c^KV_t; k^R_t].
inline AbsorbedOutput mla_forward_absorbed(const MlaLayer& layer, const Matrix& x) {
  layer.validate();
  require(x.cols() == layer.D, "mla_forward_absorbed: input width != D");
  const std::size_t T = x.rows(), h = layer.h, dn = layer.d_nope, dr = layer.d_rope, r = layer.r_kv;

  const Matrix c = matmul_nt(x, layer.Wdkv);
  Matrix kr = matmul_nt(x, layer.Wkr);
  detail::rope_rows_inplace(kr, layer.rope);
  auto [qc, qr] = mla_queries(layer, x);
  detail::rope_rows_inplace(qr, layer.rope);

  Matrix khat = hstack(c, kr);  // the cache
  Matrix qhat(T, h * (r + dr));
  for (std::size_t i = 0; i < h; ++i) {
    const Matrix wuk_i = row_slice(layer.Wuk, i * dn, (i + 1) * dn);
    const Matrix absorbed = matmul(col_slice(qc, i * dn, (i + 1) * dn), wuk_i);  // T × r
    for (std::size_t t = 0; t < T; ++t) {
      auto dst = qhat.row(t).subspan(i * (r + dr), r + dr);
      std::copy(absorbed.row(t).begin(), absorbed.row(t).end(), dst.begin());
      std::copy_n(qr.row(t).begin() + static_cast<std::ptrdiff_t>(i * dr), dr, dst.begin() + static_cast<std::ptrdiff_t>(r));
    }
  }
  const Matrix ohat = causal_attention(qhat, khat, c, h, 1, layer.scale());  // T × h·r

  Matrix o(T, h * dn);
  for (std::size_t i = 0; i < h; ++i) {
    const Matrix oi = matmul_nt(col_slice(ohat, i * r, (i + 1) * r), row_slice(layer.Wuv, i * dn, (i + 1) * dn));
    for (std::size_t t = 0; t < T; ++t)
      std::copy(oi.row(t).begin(), oi.row(t).end(), o.row(t).begin() + static_cast<std::ptrdiff_t>(i * dn));
  }
  AbsorbedOutput out{matmul_nt(o, layer.Wo), std::vector<std::size_t>(T, khat.cols())};
  detail::add_bias_rows(out.y, layer.out_bias);
  return out;
}

// ---------------------------------------------------------------------------
// Cache accounting

struct CacheSpec {
  std::size_t per_token_scalars = 0;
  std::size_t dtype_bytes = 2;
  std::string label;
};

inline std::size_t kv_cache_bytes(const CacheSpec& spec, std::size_t seq_len) {
  return spec.per_token_scalars * spec.dtype_bytes * seq_len;
}

/// 1 − after/before, as a percentage.
inline double cache_reduction_percent(std::size_t before_scalars, std::size_t after_scalars) {
  require(before_scalars > 0, "cache_reduction_percent: empty baseline");
  return 100.0 * (1.0 - static_cast<double>(after_scalars) / static_cast<double>(before_scalars));
}

}  // namespace transmla
