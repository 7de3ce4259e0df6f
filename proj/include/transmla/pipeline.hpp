#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "transmla/bench.hpp"
#include "transmla/bkv.hpp"
#include "transmla/bundle.hpp"
#include "transmla/layer.hpp"
#include "transmla/report.hpp"
#include "transmla/rorope.hpp"
#include "transmla/synth.hpp"

namespace transmla {

struct ConversionOptions {
  std::size_t group_size = 1;    // FreqFold M
  std::size_t n_keep_heads = 1;  // RoPE heads kept, d_rope = n_keep_heads·d
  std::size_t r_kv = 0;          // 0 = full rank, 2gd − d_rope
  std::size_t r_q = 0;           // 0 = full-rank query
  bool balance = true;
  PcaSource pca = PcaSource::kActivations;
  double fit_fraction = 0.9;
  std::vector<std::size_t> rank_sweep;  // r_kv values for the errors-vs-rank table
};

/// The layer after every stage, for inspection and tests.
struct ConversionTrace {
  MergedGqaLayer merged;
  MergedGqaLayer rotated;
  RotationSet rotations;
  SplitKeyLayer split;
  SplitKeyLayer balanced;
  KvPcaBasis basis;
};

struct ConversionResult {
  MlaLayer layer;
  ConversionReport report;
  ConversionTrace trace;
};

struct EquivalenceSummary {
  double max_abs = 0.0;
  double max_rel = 0.0;  // max_abs / max |a|
  std::vector<double> per_position;
  double tol = 0.0;
  bool within_tol = true;
};

inline EquivalenceSummary compare_outputs(const Matrix& ref, const Matrix& out, double tol = 0.0) {
  require(ref.rows() == out.rows() && ref.cols() == out.cols(),
          "compare_outputs: shape " + shape_str(ref) + " vs " + shape_str(out));
  EquivalenceSummary s;
  s.tol = tol;
  s.per_position.assign(ref.rows(), 0.0);
  for (std::size_t t = 0; t < ref.rows(); ++t)
    for (std::size_t c = 0; c < ref.cols(); ++c)
      s.per_position[t] = std::max(s.per_position[t], std::abs(ref(t, c) - out(t, c)));
  for (double v : s.per_position) s.max_abs = std::max(s.max_abs, v);
  const double scale = max_abs(ref);
  s.max_rel = scale > 0.0 ? s.max_abs / scale : s.max_abs;
  s.within_tol = s.max_abs <= tol;
  return s;
}

/// Runs both layers on X as one causal sequence and compares outputs. Content-
/// only forms are compared with RoPE disabled on the other side.
inline EquivalenceSummary verify_equivalence(const AnyLayer& a, const AnyLayer& b, const Matrix& x, double tol) {
  require(layer_hidden_dim(a) == layer_hidden_dim(b), "verify_equivalence: layers differ in D");
  require(x.cols() == layer_hidden_dim(a), "verify_equivalence: stream width != D");
  const Positional pos = content_only(a) || content_only(b) ? Positional::kNone : Positional::kRope;
  return compare_outputs(layer_forward(a, x, pos), layer_forward(b, x, pos), tol);
}

namespace detail {

template <class F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const IoError& e) {
    throw IoError(std::string("stage '") + stage + "': " + e.what());
  } catch (const InvariantError& e) {
    throw InvariantError(std::string("stage '") + stage + "': " + e.what());
  }
}

/// c_nope rows replaced by μ + R·Rᵀ(c − μ), as the latent would carry them.
inline SplitActivations project_nope_kv(const SplitKeyLayer& layer, SplitActivations act, const KvPcaBasis& basis) {
  const std::size_t dr = layer.d_rope, nope = layer.nope_dim();
  Matrix c = hstack(col_slice(act.k, dr, act.k.cols()), act.v);
  const Matrix centered = center_columns(c, basis.mean);
  const Matrix recon = matmul_nt(matmul(centered, basis.basis), basis.basis);
  for (std::size_t t = 0; t < c.rows(); ++t)
    for (std::size_t j = 0; j < c.cols(); ++j) c(t, j) = basis.mean[j] + recon(t, j);
  for (std::size_t t = 0; t < c.rows(); ++t) {
    for (std::size_t j = 0; j < nope; ++j) act.k(t, dr + j) = c(t, j);
    for (std::size_t j = 0; j < act.v.cols(); ++j) act.v(t, j) = c(t, nope + j);
  }
  return act;
}

inline double leading_energy_fraction(const MergedGqaLayer& layer, const Matrix& x, std::size_t lead) {
  const Matrix k = matmul_nt(x, layer.Wk);
  double kept = 0.0, total = 0.0;
  for (std::size_t t = 0; t < k.rows(); ++t)
    for (std::size_t i = 0; i < k.cols(); ++i) {
      const double e = k(t, i) * k(t, i);
      total += e;
      if (i < lead) kept += e;
    }
  return total > 0.0 ? kept / total : 1.0;
}

}  // namespace detail

/// Number of leading rows used for fitting; the rest verify. Falls back to
/// verifying on the fitting rows when the stream is too short to split.
inline std::size_t fit_rows(std::size_t n, double fit_fraction) {
  require(fit_fraction > 0.0 && fit_fraction <= 1.0, "fit_fraction must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(fit_fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, std::min<std::size_t>(n, 2), n);
}

/// merge → fold → collect → rotate → split → balance → PCA → decompose →
/// assemble (→ query compression). Stage errors are measured on the held-out
/// rows against the source layer.
inline ConversionResult convert_layer(const GqaLayer& src, const Matrix& calib, const ConversionOptions& opt) {
  src.validate();
  require(calib.cols() == src.D, "convert: calibration width " + std::to_string(calib.cols()) + " != D " +
                                     std::to_string(src.D));
  require(calib.rows() >= 2, "convert: calibration stream needs at least 2 tokens");
  const std::size_t g = src.g, d = src.d, gd = g * d;
  require(opt.n_keep_heads >= 1 && opt.n_keep_heads <= g,
          "convert: n_keep_heads must lie in [1, g = " + std::to_string(g) + "]");
  const std::size_t dr = opt.n_keep_heads * d;
  const std::size_t max_rank = 2 * gd - dr;
  const std::size_t r_kv = opt.r_kv == 0 ? max_rank : opt.r_kv;
  require(r_kv <= max_rank, "convert: r_kv " + std::to_string(r_kv) + " exceeds 2gd − d_rope = " +
                                std::to_string(max_rank));

  const std::size_t n_fit = fit_rows(calib.rows(), opt.fit_fraction);
  const Matrix x_fit = row_slice(calib, 0, n_fit);
  const Matrix x_ver = n_fit < calib.rows() ? row_slice(calib, n_fit, calib.rows()) : x_fit;

  ConversionResult res;
  ConversionReport& rep = res.report;
  ConversionTrace& tr = res.trace;
  rep.D = src.D;
  rep.h = src.h;
  rep.g = g;
  rep.d = d;
  rep.group_size = opt.group_size;
  rep.n_keep_heads = opt.n_keep_heads;
  rep.d_rope = dr;
  rep.r_kv = r_kv;
  rep.r_q = opt.r_q;
  rep.fit_tokens = n_fit;
  rep.verify_tokens = x_ver.rows();
  if (n_fit == calib.rows()) rep.notes.push_back("stream too short to hold out rows; verified on the fitting rows");

  const Matrix y_src = gqa_forward(src, x_ver);
  Matrix y_prev = y_src;
  auto record = [&](const char* stage, const Matrix& y) {
    const auto vs_src = compare_outputs(y_src, y);
    const auto vs_prev = compare_outputs(y_prev, y);
    rep.stages.push_back({stage, vs_src.max_abs, vs_src.max_rel, vs_prev.max_abs});
    y_prev = y;
  };

  tr.merged = detail::run_stage("merge", [&] { return merge_key_heads(src); });
  record("merge", merged_forward(tr.merged, x_ver));

  detail::run_stage("rotate", [&] {
    const MergedGqaLayer folded = fold_frequencies(tr.merged, opt.group_size);
    tr.rotations = solve_rotations(collect_key_stats(folded, x_fit, opt.group_size));
    tr.rotated = apply_rotations(folded, tr.rotations);
    rep.rope_energy_fraction = detail::leading_energy_fraction(tr.rotated, x_fit, dr);

    const auto pre = key_dim_norms(tr.merged, x_fit);
    const auto post_fold = key_dim_norms(tr.rotated, x_fit);
    std::vector<double> post_rorope = post_fold;
    if (opt.group_size != 1)
      post_rorope = key_dim_norms(apply_rotations(tr.merged, solve_rotations(collect_key_stats(tr.merged, x_fit, 1))),
                                  x_fit);
    for (std::size_t i = 0; i < gd; ++i) rep.key_norms.push_back({i, pre[i], post_rorope[i], post_fold[i]});
    return 0;
  });
  record("rotate", merged_forward(tr.rotated, x_ver));

  tr.split = detail::run_stage("split", [&] { return split_rope_nope(tr.rotated, opt.n_keep_heads); });
  record("split", split_forward(tr.split, x_ver));

  tr.balanced = detail::run_stage("balance", [&] {
    const NormMeans m = nope_value_norm_means(tr.split, x_fit);
    if (!opt.balance) {
      rep.notes.push_back("balancing disabled");
      return tr.split;
    }
    if (tr.split.nope_dim() == 0 || m.knope <= 0.0 || m.v <= 0.0) {
      rep.notes.push_back("balancing skipped: no NoPE key or value energy");
      return tr.split;
    }
    const BalanceFactor a = compute_alpha(tr.split, x_fit);
    rep.balance_applied = true;
    rep.alpha = a.alpha;
    rep.balance_norms = {{"k_nope", a.mean_knope_norm, a.mean_knope_norm / a.alpha},
                         {"v", a.mean_v_norm, a.mean_v_norm}};
    return balance(tr.split, a);
  });
  record("balance", split_forward(tr.balanced, x_ver));

  tr.basis = detail::run_stage("compress", [&] { return joint_kv_pca(tr.balanced, x_fit, r_kv, opt.pca); });
  rep.kv_captured_energy = tr.basis.captured_energy_fraction;
  record("compress", split_attend(tr.balanced, detail::project_nope_kv(tr.balanced, split_activations(tr.balanced, x_ver),
                                                                       tr.basis)));

  res.layer = detail::run_stage("assemble", [&] {
    MlaLayer mla = assemble_mla(tr.balanced, decompose_projections(tr.balanced, tr.basis));
    if (opt.r_q > 0) {
      auto qc = compress_query(mla, x_fit, opt.r_q);
      rep.q_captured_energy = qc.captured_energy_fraction;
      mla = std::move(qc.layer);
    }
    return mla;
  });
  record("assemble", mla_forward_absorbed(res.layer, x_ver).y);

  rep.cache_scalars_before = src.cache_scalars_per_token();
  rep.cache_scalars_after = res.layer.cache_scalars_per_token();
  rep.cache_reduction_percent = cache_reduction_percent(rep.cache_scalars_before, rep.cache_scalars_after);

  // Errors vs rank for the four PCA variants.
  for (std::size_t r : opt.rank_sweep) {
    require(r >= 1 && r <= max_rank, "rank_sweep: r_kv " + std::to_string(r) + " out of range");
    struct Variant {
      const char* name;
      PcaSource src;
      bool bkv;
    };
    for (const Variant v : {Variant{"W-based", PcaSource::kWeights, false}, Variant{"WX-based", PcaSource::kActivations, false},
                            Variant{"W-based+BKV", PcaSource::kWeights, true},
                            Variant{"WX-based+BKV", PcaSource::kActivations, true}}) {
      const SplitKeyLayer& fitted = v.bkv ? tr.balanced : tr.split;
      const KvPcaBasis basis = joint_kv_pca(fitted, x_fit, r, v.src);
      const MlaLayer mla = assemble_mla(fitted, decompose_projections(fitted, basis));
      const auto err = compare_outputs(y_src, mla_forward_absorbed(mla, x_ver).y);
      const auto recon = kv_reconstruction_error(fitted, x_fit, basis);
      rep.errors_vs_rank.push_back({v.name, r, err.max_rel, recon.key, recon.value});
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Config-driven pipeline

struct PipelineConfig {
  std::uint64_t seed = 0;

  std::optional<std::filesystem::path> source_bundle;
  std::size_t synth_D = 64, synth_h = 4, synth_g = 2;
  double synth_rope_base = 10000.0;

  std::optional<std::filesystem::path> calib_path;  // MLAF tensor, n × D
  std::size_t calib_n = 256;
  CalibStructure calib_structure;

  ConversionOptions options;
  double tolerance = 1e-8;
  std::vector<std::size_t> bench_contexts;
  std::size_t bench_dtype_bytes = 2;

  std::optional<std::filesystem::path> out_bundle;
  std::optional<std::filesystem::path> out_report;
  std::optional<std::filesystem::path> out_csv_dir;
  DType out_dtype = DType::kF64;
};

namespace detail {

template <class T>
T json_get(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw InvariantError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace detail

/// Relative paths resolve against `base_dir` (the config file's directory).
inline PipelineConfig parse_pipeline_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
  using detail::json_get;
  require(j.is_object(), "config: top level must be an object");
  PipelineConfig c;
  c.seed = json_get<std::uint64_t>(j, "seed", 0);

  const auto source = json_get<nlohmann::json>(j, "source", nlohmann::json::object());
  if (source.contains("bundle")) {
    c.source_bundle = detail::resolve(base_dir, json_get<std::string>(source, "bundle", ""));
  } else {
    const auto s = json_get<nlohmann::json>(source, "synth", nlohmann::json::object());
    c.synth_D = json_get<std::size_t>(s, "D", c.synth_D);
    c.synth_h = json_get<std::size_t>(s, "h", c.synth_h);
    c.synth_g = json_get<std::size_t>(s, "g", c.synth_g);
    c.synth_rope_base = json_get<double>(s, "rope_base", c.synth_rope_base);
  }

  const auto calib = json_get<nlohmann::json>(j, "calibration", nlohmann::json::object());
  if (calib.contains("path")) {
    c.calib_path = detail::resolve(base_dir, json_get<std::string>(calib, "path", ""));
  } else {
    const auto s = json_get<nlohmann::json>(calib, "synth", nlohmann::json::object());
    c.calib_n = json_get<std::size_t>(s, "n", c.calib_n);
    const auto kind = json_get<std::string>(s, "structure", "iid");
    if (kind == "iid") {
      c.calib_structure = CalibStructure::iid();
    } else if (kind == "low_rank") {
      c.calib_structure = CalibStructure::low_rank(json_get<std::size_t>(s, "rank", 1));
    } else if (kind == "key_dominant") {
      c.calib_structure = CalibStructure::key_dominant(json_get<double>(s, "factor", 4.0));
    } else {
      throw InvariantError("config: unknown calibration structure '" + kind + "'");
    }
  }

  auto& o = c.options;
  o.group_size = json_get<std::size_t>(j, "freqfold", o.group_size);
  o.n_keep_heads = json_get<std::size_t>(j, "n_keep_heads", o.n_keep_heads);
  o.r_kv = json_get<std::size_t>(j, "r_kv", o.r_kv);
  o.r_q = json_get<std::size_t>(j, "r_q", o.r_q);
  o.balance = json_get<bool>(j, "balance", o.balance);
  const auto pca = json_get<std::string>(j, "pca", "activations");
  require(pca == "activations" || pca == "weights", "config: pca must be 'activations' or 'weights'");
  o.pca = pca == "weights" ? PcaSource::kWeights : PcaSource::kActivations;
  o.fit_fraction = json_get<double>(j, "fit_fraction", o.fit_fraction);
  o.rank_sweep = json_get<std::vector<std::size_t>>(j, "rank_sweep", {});
  c.tolerance = json_get<double>(j, "tolerance", c.tolerance);
  c.bench_contexts = json_get<std::vector<std::size_t>>(j, "bench_contexts", {});
  c.bench_dtype_bytes = json_get<std::size_t>(j, "bench_dtype_bytes", c.bench_dtype_bytes);

  const auto out = json_get<nlohmann::json>(j, "output", nlohmann::json::object());
  if (out.contains("bundle")) c.out_bundle = detail::resolve(base_dir, json_get<std::string>(out, "bundle", ""));
  if (out.contains("report")) c.out_report = detail::resolve(base_dir, json_get<std::string>(out, "report", ""));
  if (out.contains("csv_dir")) c.out_csv_dir = detail::resolve(base_dir, json_get<std::string>(out, "csv_dir", ""));
  const auto dtype = json_get<std::string>(out, "dtype", "f64");
  require(dtype == "f64" || dtype == "f32", "config: output dtype must be 'f64' or 'f32'");
  c.out_dtype = dtype == "f32" ? DType::kF32 : DType::kF64;
  return c;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": malformed JSON: " + e.what());
  }
  return parse_pipeline_config(j, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

struct PipelineOutput {
  GqaLayer source;
  ConversionResult result;
};

inline PipelineOutput convert_pipeline(const PipelineConfig& cfg) {
  GqaLayer src;
  if (cfg.source_bundle) {
    AnyLayer l = load_layer_bundle(*cfg.source_bundle);
    require(std::holds_alternative<GqaLayer>(l), "convert: source bundle must be a gqa layer");
    src = std::get<GqaLayer>(std::move(l));
  } else {
    src = synth_gqa(cfg.seed, cfg.synth_D, cfg.synth_h, cfg.synth_g, cfg.synth_rope_base);
  }
  const Matrix calib =
      cfg.calib_path ? load_tensor(*cfg.calib_path) : synth_calib(cfg.seed, cfg.calib_n, src.D, cfg.calib_structure);
  require(calib.all_finite(), "convert: calibration stream has non-finite entries");

  PipelineOutput out{src, convert_layer(src, calib, cfg.options)};
  auto& rep = out.result.report;
  for (const auto& s : rep.stages)
    if (s.max_abs > cfg.tolerance)
      rep.notes.push_back("stage '" + s.stage + "' exceeds tolerance " + detail::num(cfg.tolerance) + " (lossy step)");
  if (!cfg.bench_contexts.empty())
    rep.bench = bench_decode(src, out.result.layer, cfg.bench_contexts, cfg.bench_dtype_bytes, 3, cfg.seed);

  if (cfg.out_bundle) save_bundle(*cfg.out_bundle, out.result.layer, cfg.out_dtype);
  if (cfg.out_report) save_report_json(*cfg.out_report, rep);
  if (cfg.out_csv_dir) emit_csv(rep, *cfg.out_csv_dir);
  return out;
}

}  // namespace transmla
