#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "transmla/errors.hpp"

namespace transmla {

struct StageError {
  std::string stage;
  double max_abs = 0.0;       // vs the source layer, held-out slice
  double max_rel = 0.0;       // max_abs / max |source output|
  double step_max_abs = 0.0;  // vs the previous stage
};

struct KeyNormRow {
  std::size_t dim = 0;
  double pre = 0.0;
  double post_rorope = 0.0;
  double post_freqfold = 0.0;
};

struct BalanceNormRow {
  std::string component;  // "k_nope" or "v"
  double pre = 0.0;
  double post = 0.0;
};

struct RankErrorRow {
  std::string method;  // W-based, WX-based, W-based+BKV, WX-based+BKV
  std::size_t r_kv = 0;
  double output_rel_error = 0.0;  // held-out, vs source
  double key_recon_error = 0.0;   // fitting stream, relative
  double value_recon_error = 0.0;
};

struct BenchRow {
  std::size_t context = 0;
  double gqa_tokens_per_s = 0.0;
  double mla_tokens_per_s = 0.0;
  double speedup = 0.0;
  std::size_t gqa_cache_bytes = 0;
  std::size_t mla_cache_bytes = 0;
};

struct ConversionReport {
  std::size_t D = 0, h = 0, g = 0, d = 0;
  std::size_t group_size = 1, n_keep_heads = 1, d_rope = 0, r_kv = 0, r_q = 0;
  std::size_t fit_tokens = 0, verify_tokens = 0;

  std::vector<StageError> stages;

  std::size_t cache_scalars_before = 0;
  std::size_t cache_scalars_after = 0;
  double cache_reduction_percent = 0.0;

  bool balance_applied = false;
  double alpha = 1.0;
  double rope_energy_fraction = 0.0;  // share of key energy in the kept RoPE dims after rotation
  double kv_captured_energy = 1.0;
  double q_captured_energy = 1.0;

  std::vector<KeyNormRow> key_norms;
  std::vector<BalanceNormRow> balance_norms;
  std::vector<RankErrorRow> errors_vs_rank;
  std::vector<BenchRow> bench;
  std::vector<std::string> notes;

  const StageError* stage(const std::string& name) const {
    for (const auto& s : stages)
      if (s.stage == name) return &s;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// JSON

using ordered_json = nlohmann::ordered_json;

inline ordered_json report_to_json(const ConversionReport& r) {
  ordered_json j;
  j["shape"] = {{"D", r.D}, {"h", r.h}, {"g", r.g}, {"d", r.d}};
  j["settings"] = {{"group_size", r.group_size}, {"n_keep_heads", r.n_keep_heads}, {"d_rope", r.d_rope},
                   {"r_kv", r.r_kv}, {"r_q", r.r_q}, {"fit_tokens", r.fit_tokens},
                   {"verify_tokens", r.verify_tokens}};
  j["stages"] = ordered_json::array();
  for (const auto& s : r.stages)
    j["stages"].push_back(
        {{"stage", s.stage}, {"max_abs", s.max_abs}, {"max_rel", s.max_rel}, {"step_max_abs", s.step_max_abs}});
  j["cache"] = {{"scalars_before", r.cache_scalars_before},
                {"scalars_after", r.cache_scalars_after},
                {"reduction_percent", r.cache_reduction_percent}};
  j["balance"] = {{"applied", r.balance_applied}, {"alpha", r.alpha}};
  j["energy"] = {{"rope_fraction", r.rope_energy_fraction},
                 {"kv_captured", r.kv_captured_energy},
                 {"q_captured", r.q_captured_energy}};
  j["key_norms"] = ordered_json::array();
  for (const auto& n : r.key_norms)
    j["key_norms"].push_back(
        {{"dim", n.dim}, {"pre", n.pre}, {"post_rorope", n.post_rorope}, {"post_freqfold", n.post_freqfold}});
  j["balance_norms"] = ordered_json::array();
  for (const auto& n : r.balance_norms)
    j["balance_norms"].push_back({{"component", n.component}, {"pre", n.pre}, {"post", n.post}});
  j["errors_vs_rank"] = ordered_json::array();
  for (const auto& e : r.errors_vs_rank)
    j["errors_vs_rank"].push_back({{"method", e.method},
                                   {"r_kv", e.r_kv},
                                   {"output_rel_error", e.output_rel_error},
                                   {"key_recon_error", e.key_recon_error},
                                   {"value_recon_error", e.value_recon_error}});
  j["bench"] = ordered_json::array();
  for (const auto& b : r.bench)
    j["bench"].push_back({{"context", b.context},
                          {"gqa_tokens_per_s", b.gqa_tokens_per_s},
                          {"mla_tokens_per_s", b.mla_tokens_per_s},
                          {"speedup", b.speedup},
                          {"gqa_cache_bytes", b.gqa_cache_bytes},
                          {"mla_cache_bytes", b.mla_cache_bytes}});
  j["notes"] = r.notes;
  return j;
}

inline ConversionReport report_from_json(const ordered_json& j) {
  ConversionReport r;
  try {
    const auto& sh = j.at("shape");
    r.D = sh.at("D");
    r.h = sh.at("h");
    r.g = sh.at("g");
    r.d = sh.at("d");
    const auto& st = j.at("settings");
    r.group_size = st.at("group_size");
    r.n_keep_heads = st.at("n_keep_heads");
    r.d_rope = st.at("d_rope");
    r.r_kv = st.at("r_kv");
    r.r_q = st.at("r_q");
    r.fit_tokens = st.at("fit_tokens");
    r.verify_tokens = st.at("verify_tokens");
    for (const auto& s : j.at("stages"))
      r.stages.push_back({s.at("stage"), s.at("max_abs"), s.at("max_rel"), s.at("step_max_abs")});
    const auto& c = j.at("cache");
    r.cache_scalars_before = c.at("scalars_before");
    r.cache_scalars_after = c.at("scalars_after");
    r.cache_reduction_percent = c.at("reduction_percent");
    r.balance_applied = j.at("balance").at("applied");
    r.alpha = j.at("balance").at("alpha");
    r.rope_energy_fraction = j.at("energy").at("rope_fraction");
    r.kv_captured_energy = j.at("energy").at("kv_captured");
    r.q_captured_energy = j.at("energy").at("q_captured");
    for (const auto& n : j.at("key_norms"))
      r.key_norms.push_back({n.at("dim"), n.at("pre"), n.at("post_rorope"), n.at("post_freqfold")});
    for (const auto& n : j.at("balance_norms")) r.balance_norms.push_back({n.at("component"), n.at("pre"), n.at("post")});
    for (const auto& e : j.at("errors_vs_rank"))
      r.errors_vs_rank.push_back(
          {e.at("method"), e.at("r_kv"), e.at("output_rel_error"), e.at("key_recon_error"), e.at("value_recon_error")});
    for (const auto& b : j.at("bench"))
      r.bench.push_back({b.at("context"), b.at("gqa_tokens_per_s"), b.at("mla_tokens_per_s"), b.at("speedup"),
                         b.at("gqa_cache_bytes"), b.at("mla_cache_bytes")});
    r.notes = j.at("notes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("report: schema error: ") + e.what());
  }
  return r;
}

inline std::string report_json_text(const ConversionReport& r) { return report_to_json(r).dump(2) + "\n"; }

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

inline void save_report_json(const std::filesystem::path& path, const ConversionReport& r) {
  write_text_file(path, report_json_text(r));
}

inline ConversionReport load_report_json(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  ordered_json j;
  try {
    j = ordered_json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": malformed JSON: " + e.what());
  }
  return report_from_json(j);
}

// ---------------------------------------------------------------------------
// CSV, one table per file

namespace detail {
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline std::string key_norms_csv(const ConversionReport& r) {
  std::string s = "dim,pre,post_rorope,post_freqfold\n";
  for (const auto& n : r.key_norms)
    s += std::to_string(n.dim) + "," + detail::num(n.pre) + "," + detail::num(n.post_rorope) + "," +
         detail::num(n.post_freqfold) + "\n";
  return s;
}

inline std::string balance_norms_csv(const ConversionReport& r) {
  std::string s = "component,pre,post\n";
  for (const auto& n : r.balance_norms) s += n.component + "," + detail::num(n.pre) + "," + detail::num(n.post) + "\n";
  return s;
}

inline std::string errors_vs_rank_csv(const ConversionReport& r) {
  std::string s = "method,r_kv,output_rel_error,key_recon_error,value_recon_error\n";
  for (const auto& e : r.errors_vs_rank)
    s += e.method + "," + std::to_string(e.r_kv) + "," + detail::num(e.output_rel_error) + "," +
         detail::num(e.key_recon_error) + "," + detail::num(e.value_recon_error) + "\n";
  return s;
}

inline std::string bench_csv(const ConversionReport& r) {
  std::string s = "context,gqa_tokens_per_s,mla_tokens_per_s,speedup,gqa_cache_bytes,mla_cache_bytes\n";
  for (const auto& b : r.bench)
    s += std::to_string(b.context) + "," + detail::num(b.gqa_tokens_per_s) + "," + detail::num(b.mla_tokens_per_s) +
         "," + detail::num(b.speedup) + "," + std::to_string(b.gqa_cache_bytes) + "," +
         std::to_string(b.mla_cache_bytes) + "\n";
  return s;
}

inline std::string stages_csv(const ConversionReport& r) {
  std::string s = "stage,max_abs,max_rel,step_max_abs\n";
  for (const auto& e : r.stages)
    s += e.stage + "," + detail::num(e.max_abs) + "," + detail::num(e.max_rel) + "," + detail::num(e.step_max_abs) +
         "\n";
  return s;
}

/// Writes stages.csv, norms.csv, balance.csv, errors_vs_rank.csv and
/// bench.csv into dir; returns the paths written.
inline std::vector<std::filesystem::path> emit_csv(const ConversionReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::vector<std::pair<std::string, std::string>> tables = {
      {"stages.csv", stages_csv(r)},
      {"norms.csv", key_norms_csv(r)},
      {"balance.csv", balance_norms_csv(r)},
      {"errors_vs_rank.csv", errors_vs_rank_csv(r)},
      {"bench.csv", bench_csv(r)}};
  std::vector<std::filesystem::path> out;
  for (const auto& [name, text] : tables) {
    write_text_file(dir / name, text);
    out.push_back(dir / name);
  }
  return out;
}

}  // namespace transmla
