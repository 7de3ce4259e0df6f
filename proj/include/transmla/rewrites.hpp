#pragma once

#include <cmath>
#include <cstddef>

#include "transmla/attention.hpp"

namespace transmla {

// Output-preserving rewrites between attention forms. The factorized and MQA
// forms are content-only (no rotary); positional attention goes through the
// merged form below.

/// GQA written as low-rank K/V: c = Wdkv·x (2gd), k_i = Wuk_i·c, v_i = Wuv_i·c.
struct MlaFactorizedLayer {
  std::size_t D = 0, h = 0, g = 0, d = 0;
  Matrix Wdkv;  // 2gd × D
  Matrix Wuk;   // hd × 2gd
  Matrix Wuv;   // hd × 2gd
  Matrix Wq;    // hd × D
  Matrix Wo;    // D × hd

  std::size_t latent_dim() const { return Wdkv.rows(); }

  void validate() const {
    require(h > 0 && d > 0, "MlaFactorizedLayer: zero dimension");
    const std::size_t r = Wdkv.rows();
    require_shape(Wdkv, r, D, "MlaFactorizedLayer.Wdkv");
    require_shape(Wuk, h * d, r, "MlaFactorizedLayer.Wuk");
    require_shape(Wuv, h * d, r, "MlaFactorizedLayer.Wuv");
    require_shape(Wq, h * d, D, "MlaFactorizedLayer.Wq");
    require_shape(Wo, D, h * d, "MlaFactorizedLayer.Wo");
  }
};

inline Matrix mla_factorized_forward(const MlaFactorizedLayer& layer, const Matrix& x) {
  layer.validate();
  require(x.cols() == layer.D, "mla_factorized_forward: input width != D");
  const Matrix c = matmul_nt(x, layer.Wdkv);
  const Matrix k = matmul_nt(c, layer.Wuk);
  const Matrix v = matmul_nt(c, layer.Wuv);
  const Matrix q = matmul_nt(x, layer.Wq);
  const Matrix o = causal_attention(q, k, v, layer.h, layer.h, 1.0 / std::sqrt(static_cast<double>(layer.d)));
  return matmul_nt(o, layer.Wo);
}

/// Selector construction: Wdkv = [Wk; Wv], head i picks key block k and value
/// block g+k of the latent, k = group of head i.
inline MlaFactorizedLayer gqa_to_mla_factorized(const GqaLayer& src) {
  src.validate();
  const std::size_t h = src.h, g = src.g, d = src.d;
  MlaFactorizedLayer out{src.D, h, g, d, vstack(src.Wk, src.Wv), Matrix(h * d, 2 * g * d),
                         Matrix(h * d, 2 * g * d), src.Wq, src.Wo};
  const std::size_t per_group = h / g;
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t k = i / per_group;
    for (std::size_t c = 0; c < d; ++c) {
      out.Wuk(i * d + c, k * d + c) = 1.0;
      out.Wuv(i * d + c, (g + k) * d + c) = 1.0;
    }
  }
  return out;
}

/// One shared key/value head of width kv_dim attended by h wide query heads.
struct MqaLayer {
  std::size_t D = 0, h = 0, kv_dim = 0;
  Matrix Wq;   // h·kv_dim × D
  Matrix Wkv;  // kv_dim × D
  Matrix Wo;   // D × h·kv_dim
  double scale = 1.0;

  void validate() const {
    require(h > 0 && kv_dim > 0, "MqaLayer: zero dimension");
    require_shape(Wq, h * kv_dim, D, "MqaLayer.Wq");
    require_shape(Wkv, kv_dim, D, "MqaLayer.Wkv");
    require_shape(Wo, D, h * kv_dim, "MqaLayer.Wo");
  }

  Matrix query_block(std::size_t i) const { return row_slice(Wq, i * kv_dim, (i + 1) * kv_dim); }
};

inline Matrix mqa_forward(const MqaLayer& layer, const Matrix& x) {
  layer.validate();
  require(x.cols() == layer.D, "mqa_forward: input width != D");
  const Matrix q = matmul_nt(x, layer.Wq);
  const Matrix c = matmul_nt(x, layer.Wkv);
  const Matrix o = causal_attention(q, c, c, layer.h, 1, layer.scale);
  return matmul_nt(o, layer.Wo);
}

/// W'Q_i = Wuk_iᵀ·Wq_i and W'O = Wo·blockdiag(Wuv_1..Wuv_h); the latent is
/// the shared key and value.
inline MqaLayer mla_factorized_to_mqa(const MlaFactorizedLayer& src) {
  src.validate();
  const std::size_t h = src.h, d = src.d, r = src.latent_dim();
  MqaLayer out{src.D, h, r, Matrix(h * r, src.D), src.Wdkv, Matrix(src.D, h * r),
               1.0 / std::sqrt(static_cast<double>(d))};
  for (std::size_t i = 0; i < h; ++i) {
    const Matrix wuk_i = row_slice(src.Wuk, i * d, (i + 1) * d);
    const Matrix wq_i = row_slice(src.Wq, i * d, (i + 1) * d);
    const Matrix wq_wide = matmul_tn(wuk_i, wq_i);  // r × D
    std::copy(wq_wide.data().begin(), wq_wide.data().end(),
              out.Wq.data().begin() + static_cast<std::ptrdiff_t>(i * r * src.D));
    const Matrix wo_i = matmul(col_slice(src.Wo, i * d, (i + 1) * d), row_slice(src.Wuv, i * d, (i + 1) * d));
    for (std::size_t row = 0; row < src.D; ++row)
      std::copy(wo_i.row(row).begin(), wo_i.row(row).end(), out.Wo.row(row).begin() + static_cast<std::ptrdiff_t>(i * r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// All key heads merged into one gd-wide head with blockwise RoPE

struct MergedGqaLayer {
  std::size_t D = 0, h = 0, g = 0, d = 0;
  Matrix Wq;          // hd × D
  Matrix Wk;          // gd × D, the key half of the latent
  Matrix Wv;          // gd × D, the value half of the latent
  Matrix Wuk;         // hd × gd; query i reads q̂_i = Wuk_iᵀ q_i
  Matrix Wuv;         // hd × gd
  Matrix Wo;          // D × hd
  RopeSchedule rope;  // over d, repeated on every d-block of the merged key

  std::size_t cache_scalars_per_token() const { return 2 * g * d; }

  void validate() const {
    require(h > 0 && g > 0 && d > 0 && d % 2 == 0, "MergedGqaLayer: bad dimensions");
    require_shape(Wq, h * d, D, "MergedGqaLayer.Wq");
    require_shape(Wk, g * d, D, "MergedGqaLayer.Wk");
    require_shape(Wv, g * d, D, "MergedGqaLayer.Wv");
    require_shape(Wuk, h * d, g * d, "MergedGqaLayer.Wuk");
    require_shape(Wuv, h * d, g * d, "MergedGqaLayer.Wuv");
    require_shape(Wo, D, h * d, "MergedGqaLayer.Wo");
    require(rope.dim() == d, "MergedGqaLayer: rope schedule dim != d");
  }
};

/// Per-head absorbed queries q̂_i = Wuk_iᵀ·Wq_i·x, T × h·gd, before RoPE.
inline Matrix merged_queries(const MergedGqaLayer& layer, const Matrix& x) {
  const std::size_t h = layer.h, d = layer.d, gd = layer.g * layer.d;
  const Matrix q = matmul_nt(x, layer.Wq);
  Matrix qhat(x.rows(), h * gd);
  for (std::size_t i = 0; i < h; ++i) {
    const Matrix qi = matmul(col_slice(q, i * d, (i + 1) * d), row_slice(layer.Wuk, i * d, (i + 1) * d));
    for (std::size_t t = 0; t < x.rows(); ++t)
      std::copy(qi.row(t).begin(), qi.row(t).end(), qhat.row(t).begin() + static_cast<std::ptrdiff_t>(i * gd));
  }
  return qhat;
}

inline Matrix merged_forward(const MergedGqaLayer& layer, const Matrix& x, Positional pos = Positional::kRope) {
  layer.validate();
  require(x.cols() == layer.D, "merged_forward: input width != D");
  const std::size_t h = layer.h, d = layer.d, gd = layer.g * layer.d;
  Matrix qhat = merged_queries(layer, x);
  Matrix k = matmul_nt(x, layer.Wk);
  const Matrix v = matmul_nt(x, layer.Wv);
  if (pos == Positional::kRope) {
    detail::rope_rows_inplace(qhat, layer.rope);
    detail::rope_rows_inplace(k, layer.rope);
  }
  const Matrix ohat = causal_attention(qhat, k, v, h, 1, 1.0 / std::sqrt(static_cast<double>(d)));
  Matrix o(x.rows(), h * d);
  for (std::size_t i = 0; i < h; ++i) {
    const Matrix oi = matmul_nt(col_slice(ohat, i * gd, (i + 1) * gd), row_slice(layer.Wuv, i * d, (i + 1) * d));
    for (std::size_t t = 0; t < x.rows(); ++t)
      std::copy(oi.row(t).begin(), oi.row(t).end(), o.row(t).begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return matmul_nt(o, layer.Wo);
}

/// Identity selectors on each head's own group; the cache stays at 2gd
/// scalars per token.
inline MergedGqaLayer merge_key_heads(const GqaLayer& src) {
  src.validate();
  const std::size_t h = src.h, g = src.g, d = src.d;
  MergedGqaLayer out{src.D, h, g, d, src.Wq, src.Wk, src.Wv, Matrix(h * d, g * d), Matrix(h * d, g * d), src.Wo,
                     src.rope};
  const std::size_t per_group = h / g;
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t k = i / per_group;
    for (std::size_t c = 0; c < d; ++c) {
      out.Wuk(i * d + c, k * d + c) = 1.0;
      out.Wuv(i * d + c, k * d + c) = 1.0;
    }
  }
  return out;
}

}  // namespace transmla
