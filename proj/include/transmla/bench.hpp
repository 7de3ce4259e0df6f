#pragma once

#include <algorithm>
#include <ctime>
#include <cmath>
#include <vector>

#include "transmla/attention.hpp"
#include "transmla/report.hpp"
#include "transmla/synth.hpp"

namespace transmla {

// Single-stream decode loops with explicit KV caches. Each session holds
// exactly what a serving engine would keep per token.

namespace detail {

inline void matvec_into(const Matrix& a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto row = a.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) s += row[k] * x[k];
    y[i] = s;
  }
}

}  // namespace detail

/// GQA decoding: caches post-RoPE keys and values, 2gd scalars per token.
class GqaDecodeSession {
 public:
  explicit GqaDecodeSession(const GqaLayer& layer) : l_(layer) {
    l_.validate();
    kv_ = 2 * l_.g * l_.d;
  }

  std::size_t length() const { return len_; }
  std::size_t cache_scalars() const { return cache_.size(); }

  /// Fills the cache for x's rows without computing outputs.
  void prefill(const Matrix& x) {
    Matrix k = matmul_nt(x, l_.Wk);
    const Matrix v = matmul_nt(x, l_.Wv);
    detail::rope_rows_inplace(k, l_.rope, static_cast<std::int64_t>(len_));
    for (std::size_t t = 0; t < x.rows(); ++t) {
      cache_.insert(cache_.end(), k.row(t).begin(), k.row(t).end());
      cache_.insert(cache_.end(), v.row(t).begin(), v.row(t).end());
    }
    len_ += x.rows();
  }

  std::vector<double> step(std::span<const double> x) {
    const std::size_t h = l_.h, g = l_.g, d = l_.d, gd = g * d;
    q_.resize(h * d);
    kv_tmp_.resize(2 * gd);
    detail::matvec_into(l_.Wq, x, q_);
    detail::matvec_into(l_.Wk, x, std::span<double>(kv_tmp_).first(gd));
    detail::matvec_into(l_.Wv, x, std::span<double>(kv_tmp_).subspan(gd));
    const auto pos = static_cast<std::int64_t>(len_);
    apply_rope_blocks_inplace(q_, pos, l_.rope);
    apply_rope_blocks_inplace(std::span<double>(kv_tmp_).first(gd), pos, l_.rope);
    cache_.insert(cache_.end(), kv_tmp_.begin(), kv_tmp_.end());
    ++len_;

    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    scores_.resize(len_);
    o_.assign(h * d, 0.0);
    const std::size_t per_group = h / g;
    for (std::size_t i = 0; i < h; ++i) {
      const std::size_t grp = i / per_group;
      const double* qi = q_.data() + i * d;
      for (std::size_t j = 0; j < len_; ++j) {
        const double* kj = cache_.data() + j * kv_ + grp * d;
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += qi[c] * kj[c];
        scores_[j] = s * scale;
      }
      detail::softmax_inplace(scores_);
      double* oi = o_.data() + i * d;
      for (std::size_t j = 0; j < len_; ++j) {
        const double* vj = cache_.data() + j * kv_ + gd + grp * d;
        const double w = scores_[j];
        for (std::size_t c = 0; c < d; ++c) oi[c] += w * vj[c];
      }
    }
    std::vector<double> y(l_.D);
    detail::matvec_into(l_.Wo, o_, y);
    return y;
  }

 private:
  GqaLayer l_;
  std::size_t kv_ = 0, len_ = 0;
  std::vector<double> cache_, q_, kv_tmp_, scores_, o_;
};

/// Absorbed MLA decoding: caches [c^KV; RoPE'd k^R], r_kv + d_rope scalars
/// per token. W^UK is folded into the query projection and W^UV into the
/// output projection once, at session start.
class MlaDecodeSession {
 public:
  explicit MlaDecodeSession(const MlaLayer& layer) : l_(layer) {
    l_.validate();
    const std::size_t h = l_.h, dn = l_.d_nope, dr = l_.d_rope, r = l_.r_kv;
    width_ = r + dr;
    // Stacked query map: per head [Wuk_iᵀ·Wq_nope_i (r rows); Wq_rope_i (dr rows)].
    Matrix qc, qr;
    if (l_.has_low_rank_q()) {
      const Matrix full = matmul(l_.Wuq, l_.Wdq);
      qc = row_slice(full, 0, h * dn);
      qr = row_slice(full, h * dn, full.rows());
    } else {
      qc = l_.Wq_nope;
      qr = l_.Wq_rope;
    }
    wq_ = Matrix(h * width_, l_.D);
    wo_ = Matrix(l_.D, h * r);
    for (std::size_t i = 0; i < h; ++i) {
      const Matrix a = matmul_tn(row_slice(l_.Wuk, i * dn, (i + 1) * dn), row_slice(qc, i * dn, (i + 1) * dn));
      for (std::size_t row = 0; row < r; ++row)
        std::copy(a.row(row).begin(), a.row(row).end(), wq_.row(i * width_ + row).begin());
      for (std::size_t row = 0; row < dr; ++row)
        std::copy(qr.row(i * dr + row).begin(), qr.row(i * dr + row).end(), wq_.row(i * width_ + r + row).begin());
      const Matrix b = matmul(col_slice(l_.Wo, i * dn, (i + 1) * dn), row_slice(l_.Wuv, i * dn, (i + 1) * dn));
      for (std::size_t row = 0; row < l_.D; ++row)
        std::copy(b.row(row).begin(), b.row(row).end(), wo_.row(row).begin() + static_cast<std::ptrdiff_t>(i * r));
    }
    wkv_ = vstack(l_.Wdkv, l_.Wkr);
  }

  std::size_t length() const { return len_; }
  std::size_t cache_scalars() const { return cache_.size(); }

  void prefill(const Matrix& x) {
    Matrix c = matmul_nt(x, wkv_);
    for (std::size_t t = 0; t < x.rows(); ++t) {
      auto kr = c.row(t).subspan(l_.r_kv);
      apply_rope_inplace(kr, static_cast<std::int64_t>(len_ + t), l_.rope);
      cache_.insert(cache_.end(), c.row(t).begin(), c.row(t).end());
    }
    len_ += x.rows();
  }

  std::vector<double> step(std::span<const double> x) {
    const std::size_t h = l_.h, r = l_.r_kv;
    const auto pos = static_cast<std::int64_t>(len_);
    q_.resize(h * width_);
    entry_.resize(width_);
    detail::matvec_into(wq_, x, q_);
    detail::matvec_into(wkv_, x, entry_);
    apply_rope_inplace(std::span<double>(entry_).subspan(r), pos, l_.rope);
    for (std::size_t i = 0; i < h; ++i) apply_rope_inplace(std::span<double>(q_).subspan(i * width_ + r, l_.d_rope), pos, l_.rope);
    cache_.insert(cache_.end(), entry_.begin(), entry_.end());
    ++len_;

    scores_.resize(len_);
    o_.assign(h * r, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
      const double* qi = q_.data() + i * width_;
      for (std::size_t j = 0; j < len_; ++j) {
        const double* kj = cache_.data() + j * width_;
        double s = 0.0;
        for (std::size_t c = 0; c < width_; ++c) s += qi[c] * kj[c];
        scores_[j] = s * l_.scale();
      }
      detail::softmax_inplace(scores_);
      double* oi = o_.data() + i * r;
      for (std::size_t j = 0; j < len_; ++j) {
        const double* cj = cache_.data() + j * width_;
        const double w = scores_[j];
        for (std::size_t c = 0; c < r; ++c) oi[c] += w * cj[c];
      }
    }
    std::vector<double> y(l_.D);
    detail::matvec_into(wo_, o_, y);
    for (std::size_t c = 0; c < l_.out_bias.size(); ++c) y[c] += l_.out_bias[c];
    return y;
  }

 private:
  MlaLayer l_;
  std::size_t width_ = 0, len_ = 0;
  Matrix wq_, wo_, wkv_;
  std::vector<double> cache_, q_, entry_, scores_, o_;
};

namespace detail {

// CPU time of the calling thread; unlike wall time it excludes periods when
// the host deschedules the benchmark.
inline double thread_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

}  // namespace detail

struct DecodeTiming {
  double tokens_per_s = 0.0;
  std::size_t cache_bytes = 0;
};

/// Decode steps timed per run; the context is prefilled up to its length
/// minus this window (or half the context when shorter).
inline constexpr std::size_t kDecodeWindow = 64;

/// Prefills the context minus the decode window, then times decoding the
/// window one token at a time, ending at the full context. Best of `repeats`.
template <class Session, class Layer>
DecodeTiming time_decode(const Layer& layer, const Matrix& tokens, std::size_t context, std::size_t dtype_bytes,
                         int repeats) {
  require(context >= 2 && tokens.rows() >= context, "time_decode: token stream shorter than context");
  const std::size_t prefill = context - std::min(kDecodeWindow, context / 2);
  const Matrix head = row_slice(tokens, 0, prefill);
  DecodeTiming best;
  double best_s = -1.0;
  double sink = 0.0;
  for (int rep = 0; rep < std::max(1, repeats); ++rep) {
    Session s(layer);
    s.prefill(head);
    const double t0 = detail::thread_cpu_seconds();
    for (std::size_t t = prefill; t < context; ++t) sink += s.step(tokens.row(t))[0];
    const double secs = detail::thread_cpu_seconds() - t0;
    if (best_s < 0.0 || secs < best_s) best_s = secs;
    best.cache_bytes = s.cache_scalars() * dtype_bytes;
  }
  if (!std::isfinite(sink)) throw InvariantError("time_decode: non-finite decode output");
  best.tokens_per_s = static_cast<double>(context - prefill) / std::max(best_s, 1e-12);
  return best;
}

/// One row per context length: decode throughput of both layers and their
/// exact cache footprint at that length. The two sessions decode the same
/// window in lockstep, one timed step each in turn, so load on the host hits
/// both alike; throughput is total steps over total time across `repeats`.
inline std::vector<BenchRow> bench_decode(const GqaLayer& gqa, const MlaLayer& mla,
                                          const std::vector<std::size_t>& contexts, std::size_t dtype_bytes = 2,
                                          int repeats = 3, std::uint64_t seed = 0) {
  require(gqa.D == mla.D, "bench_decode: layers differ in D");
  std::vector<BenchRow> rows;
  if (contexts.empty()) return rows;
  const std::size_t longest = *std::max_element(contexts.begin(), contexts.end());
  const Matrix tokens = synth_calib(seed, std::max<std::size_t>(longest, 2), gqa.D);
  double sink = 0.0;
  for (std::size_t ctx : contexts) {
    require(ctx >= 2, "bench_decode: context must be at least 2");
    const std::size_t prefill = ctx - std::min(kDecodeWindow, ctx / 2);
    const Matrix head = row_slice(tokens, 0, prefill);
    double g_secs = 0.0, m_secs = 0.0;
    std::size_t steps = 0, g_scalars = 0, m_scalars = 0;
    for (int rep = 0; rep < std::max(1, repeats); ++rep) {
      GqaDecodeSession gs(gqa);
      MlaDecodeSession ms(mla);
      gs.prefill(head);
      ms.prefill(head);
      for (std::size_t t = prefill; t < ctx; ++t, ++steps) {
        double t0 = detail::thread_cpu_seconds();
        sink += gs.step(tokens.row(t))[0];
        double t1 = detail::thread_cpu_seconds();
        g_secs += t1 - t0;
        sink += ms.step(tokens.row(t))[0];
        t0 = detail::thread_cpu_seconds();
        m_secs += t0 - t1;
      }
      g_scalars = gs.cache_scalars();
      m_scalars = ms.cache_scalars();
    }
    const double g_tps = static_cast<double>(steps) / std::max(g_secs, 1e-12);
    const double m_tps = static_cast<double>(steps) / std::max(m_secs, 1e-12);
    rows.push_back({ctx, g_tps, m_tps, m_tps / g_tps, g_scalars * dtype_bytes, m_scalars * dtype_bytes});
  }
  if (!std::isfinite(sink)) throw InvariantError("bench_decode: non-finite decode output");
  return rows;
}

/// Parses "1k,2k,4096" style lists (k = 1024).
inline std::vector<std::size_t> parse_context_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t i = 0;
  while (i <= text.size()) {
    const std::size_t j = std::min(text.find(',', i), text.size());
    std::string tok = text.substr(i, j - i);
    require(!tok.empty(), "contexts: empty entry in '" + text + "'");
    std::size_t mult = 1;
    if (tok.back() == 'k' || tok.back() == 'K') {
      mult = 1024;
      tok.pop_back();
    }
    require(!tok.empty() && tok.find_first_not_of("0123456789") == std::string::npos,
            "contexts: bad entry '" + text.substr(i, j - i) + "'");
    const std::size_t v = std::stoull(tok) * mult;
    require(v >= 2, "contexts: each context must be at least 2 tokens");
    out.push_back(v);
    i = j + 1;
  }
  return out;
}

}  // namespace transmla
