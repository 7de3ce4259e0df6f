#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "transmla/layer.hpp"
#include "transmla/rorope.hpp"
#include "transmla/tensor_io.hpp"

namespace transmla {

// Layer bundle: a directory holding manifest.json plus one .mlaf file per
// tensor. Manifest schema:
//
//   {
//     "format": "mlaf-bundle",
//     "version": 1,
//     "kind": "gqa" | "mla" | "mla_factorized" | "freq_stats",
//     "config": { "D", "h", "g", "d", "d_rope", "r_kv", "r_q",
//                 "rope_base", "rope_thetas", ... kind-specific subset },
//     "tensors": [ { "name", "file", "shape": [rows, cols], "dtype": "f32"|"f64" } ]
//   }
//
// Keys are written sorted, so identical layers give identical bytes.

using json = nlohmann::json;

inline constexpr const char* kBundleFormat = "mlaf-bundle";
inline constexpr int kBundleVersion = 1;

namespace detail {

struct BundleWriter {
  std::filesystem::path dir;
  DType dtype;
  json tensors = json::array();

  void put(const std::string& name, const Matrix& m) {
    const std::string file = name + ".mlaf";
    save_tensor(dir / file, m, dtype);
    tensors.push_back({{"name", name},
                       {"file", file},
                       {"shape", {m.rows(), m.cols()}},
                       {"dtype", dtype == DType::kF32 ? "f32" : "f64"}});
  }
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

inline void finish_bundle(BundleWriter& w, const std::string& kind, json config) {
  json manifest = {{"format", kBundleFormat},
                   {"version", kBundleVersion},
                   {"kind", kind},
                   {"config", std::move(config)},
                   {"tensors", w.tensors}};
  write_text(w.dir / "manifest.json", manifest.dump(2) + "\n");
}

inline BundleWriter open_bundle(const std::filesystem::path& dir, DType dtype) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create bundle directory " + dir.string() + ": " + ec.message());
  return {dir, dtype};
}

inline json rope_config(const RopeSchedule& r) { return {{"rope_base", r.base}, {"rope_thetas", r.thetas}}; }

struct LoadedBundle {
  std::string kind;
  json config;
  std::map<std::string, Matrix> tensors;

  const Matrix& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("bundle: missing tensor '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  std::size_t size(const char* key) const {
    if (!config.contains(key)) throw IoError(std::string("bundle: config lacks '") + key + "'");
    const auto& v = config.at(key);
    if (!v.is_number_unsigned()) throw IoError(std::string("bundle: config '") + key + "' is not a count");
    return v.get<std::size_t>();
  }

  RopeSchedule rope() const {
    try {
      return RopeSchedule::from_thetas(config.at("rope_thetas").get<std::vector<double>>(),
                                       config.at("rope_base").get<double>());
    } catch (const json::exception& e) {
      throw IoError(std::string("bundle: bad rope config: ") + e.what());
    }
  }
};

inline LoadedBundle read_bundle(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw IoError("bundle: no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(read_text(manifest_path));
  } catch (const json::parse_error& e) {
    throw IoError("bundle: malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  LoadedBundle out;
  try {
    if (manifest.at("format").get<std::string>() != kBundleFormat) throw IoError("bundle: unknown format tag");
    if (manifest.at("version").get<int>() != kBundleVersion) throw IoError("bundle: unsupported version");
    out.kind = manifest.at("kind").get<std::string>();
    out.config = manifest.at("config");
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto file = entry.at("file").get<std::string>();
      if (file.find('/') != std::string::npos || file.find("..") != std::string::npos)
        throw IoError("bundle: tensor file '" + file + "' escapes the bundle directory");
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      Matrix m = load_tensor(dir / file);
      if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols())
        throw IoError("bundle: tensor '" + name + "' is " + shape_str(m) + ", manifest disagrees");
      if (!m.all_finite()) throw IoError("bundle: tensor '" + name + "' has non-finite entries");
      if (!out.tensors.emplace(name, std::move(m)).second) throw IoError("bundle: duplicate tensor '" + name + "'");
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("bundle: manifest schema error: ") + e.what());
  }
  return out;
}

inline std::vector<double> row_vector(const Matrix& m) {
  require(m.rows() == 1, "bundle: expected a 1×n row");
  return {m.data().begin(), m.data().end()};
}

}  // namespace detail

inline std::string bundle_kind(const std::filesystem::path& dir) { return detail::read_bundle(dir).kind; }

// ---------------------------------------------------------------------------
// Save

inline void save_bundle(const std::filesystem::path& dir, const GqaLayer& l, DType dtype = DType::kF64) {
  l.validate();
  auto w = detail::open_bundle(dir, dtype);
  w.put("Wq", l.Wq);
  w.put("Wk", l.Wk);
  w.put("Wv", l.Wv);
  w.put("Wo", l.Wo);
  json cfg = detail::rope_config(l.rope);
  cfg.update({{"D", l.D}, {"h", l.h}, {"g", l.g}, {"d", l.d}});
  detail::finish_bundle(w, "gqa", cfg);
}

inline void save_bundle(const std::filesystem::path& dir, const MlaLayer& l, DType dtype = DType::kF64) {
  l.validate();
  auto w = detail::open_bundle(dir, dtype);
  w.put("Wdkv", l.Wdkv);
  w.put("Wuk", l.Wuk);
  w.put("Wuv", l.Wuv);
  w.put("Wkr", l.Wkr);
  if (l.has_low_rank_q()) {
    w.put("Wdq", l.Wdq);
    w.put("Wuq", l.Wuq);
  } else {
    w.put("Wq_nope", l.Wq_nope);
    w.put("Wq_rope", l.Wq_rope);
  }
  w.put("Wo", l.Wo);
  if (!l.out_bias.empty()) w.put("out_bias", Matrix(1, l.out_bias.size(), l.out_bias));
  json cfg = detail::rope_config(l.rope);
  cfg.update({{"D", l.D}, {"h", l.h}, {"d", l.d_nope}, {"d_rope", l.d_rope}, {"r_kv", l.r_kv}, {"r_q", l.r_q}});
  detail::finish_bundle(w, "mla", cfg);
}

inline void save_bundle(const std::filesystem::path& dir, const MlaFactorizedLayer& l, DType dtype = DType::kF64) {
  l.validate();
  auto w = detail::open_bundle(dir, dtype);
  w.put("Wdkv", l.Wdkv);
  w.put("Wuk", l.Wuk);
  w.put("Wuv", l.Wuv);
  w.put("Wq", l.Wq);
  w.put("Wo", l.Wo);
  detail::finish_bundle(w, "mla_factorized",
                        {{"D", l.D}, {"h", l.h}, {"g", l.g}, {"d", l.d}, {"r_kv", l.latent_dim()}});
}

inline void save_bundle(const std::filesystem::path& dir, const AnyLayer& layer, DType dtype = DType::kF64) {
  std::visit([&](const auto& l) { save_bundle(dir, l, dtype); }, layer);
}

inline void save_bundle(const std::filesystem::path& dir, const FreqStats& s, DType dtype = DType::kF64) {
  auto w = detail::open_bundle(dir, dtype);
  for (std::size_t p = 0; p < s.groups(); ++p) {
    w.put("sigma_x_" + std::to_string(p), s.sigma_x[p]);
    w.put("sigma_y_" + std::to_string(p), s.sigma_y[p]);
  }
  w.put("abs_sum", Matrix(1, s.abs_sum.size(), s.abs_sum));
  detail::finish_bundle(w, "freq_stats",
                        {{"g", s.g}, {"d", s.d}, {"group_size", s.group_size}, {"sample_count", s.sample_count}});
}

// ---------------------------------------------------------------------------
// Load

namespace detail {

inline AnyLayer layer_from_bundle(const LoadedBundle& b) {
  AnyLayer out;
  if (b.kind == "gqa") {
    out = GqaLayer{b.size("D"), b.size("h"), b.size("g"), b.size("d"), b.get("Wq"), b.get("Wk"),
                   b.get("Wv"), b.get("Wo"), b.rope()};
  } else if (b.kind == "mla") {
    MlaLayer l;
    l.D = b.size("D");
    l.h = b.size("h");
    l.d_nope = b.size("d");
    l.d_rope = b.size("d_rope");
    l.r_kv = b.size("r_kv");
    l.r_q = b.size("r_q");
    l.Wdkv = b.get("Wdkv");
    l.Wuk = b.get("Wuk");
    l.Wuv = b.get("Wuv");
    l.Wkr = b.get("Wkr");
    if (l.has_low_rank_q()) {
      l.Wdq = b.get("Wdq");
      l.Wuq = b.get("Wuq");
    } else {
      l.Wq_nope = b.get("Wq_nope");
      l.Wq_rope = b.get("Wq_rope");
    }
    l.Wo = b.get("Wo");
    if (b.has("out_bias")) l.out_bias = row_vector(b.get("out_bias"));
    l.rope = b.rope();
    out = std::move(l);
  } else if (b.kind == "mla_factorized") {
    out = MlaFactorizedLayer{b.size("D"),    b.size("h"),   b.size("g"),   b.size("d"), b.get("Wdkv"),
                             b.get("Wuk"),   b.get("Wuv"),  b.get("Wq"),   b.get("Wo")};
  } else {
    throw IoError("bundle: kind '" + b.kind + "' is not a layer");
  }
  validate_layer(out);
  return out;
}

inline FreqStats stats_from_bundle(const LoadedBundle& b) {
  FreqStats s = FreqStats::empty(b.size("g"), b.size("d"), b.size("group_size"));
  s.sample_count = b.size("sample_count");
  const std::size_t slots = s.slot_count();
  for (std::size_t p = 0; p < s.groups(); ++p) {
    s.sigma_x[p] = b.get("sigma_x_" + std::to_string(p));
    s.sigma_y[p] = b.get("sigma_y_" + std::to_string(p));
    require_shape(s.sigma_x[p], slots, slots, "freq_stats.sigma_x");
    require_shape(s.sigma_y[p], slots, slots, "freq_stats.sigma_y");
  }
  s.abs_sum = row_vector(b.get("abs_sum"));
  require(s.abs_sum.size() == s.g * s.d, "freq_stats: abs_sum length != gd");
  return s;
}

}  // namespace detail

inline AnyLayer load_layer_bundle(const std::filesystem::path& dir) {
  const auto b = detail::read_bundle(dir);
  try {
    return detail::layer_from_bundle(b);
  } catch (const InvariantError& e) {
    throw IoError("bundle " + dir.string() + ": inconsistent layer: " + e.what());
  }
}

inline FreqStats load_stats_bundle(const std::filesystem::path& dir) {
  const auto b = detail::read_bundle(dir);
  if (b.kind != "freq_stats") throw IoError("bundle: kind '" + b.kind + "' is not freq_stats");
  try {
    return detail::stats_from_bundle(b);
  } catch (const InvariantError& e) {
    throw IoError("bundle " + dir.string() + ": inconsistent stats: " + e.what());
  }
}

}  // namespace transmla
