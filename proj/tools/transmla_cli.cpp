// transmla: convert, verify, calibrate, benchmark and report on attention
// layers. Exit codes: 0 success, 1 invariant violation, 2 I/O error.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "transmla/transmla.hpp"

using namespace transmla;

namespace {

Matrix load_stream(const std::string& path, std::size_t D) {
  Matrix x = load_tensor(path);
  require(x.cols() == D, "calibration stream " + path + " is " + shape_str(x) + ", expected width " + std::to_string(D));
  require(x.all_finite(), "calibration stream " + path + " has non-finite entries");
  return x;
}

int cmd_convert(const std::string& config_path) {
  const auto cfg = load_pipeline_config(config_path);
  const auto out = convert_pipeline(cfg);
  const auto& r = out.result.report;
  std::printf("converted D=%zu h=%zu g=%zu d=%zu  ->  r_kv=%zu d_rope=%zu r_q=%zu\n", r.D, r.h, r.g, r.d, r.r_kv,
              r.d_rope, r.r_q);
  std::printf("%-9s %12s %12s %12s\n", "stage", "max_abs", "max_rel", "step");
  for (const auto& s : r.stages)
    std::printf("%-9s %12.4e %12.4e %12.4e\n", s.stage.c_str(), s.max_abs, s.max_rel, s.step_max_abs);
  std::printf("kv cache per token: %zu -> %zu scalars (%.2f%% reduction)\n", r.cache_scalars_before,
              r.cache_scalars_after, r.cache_reduction_percent);
  for (const auto& n : r.notes) std::printf("note: %s\n", n.c_str());
  if (cfg.out_bundle) std::printf("bundle: %s\n", cfg.out_bundle->string().c_str());
  if (cfg.out_report) std::printf("report: %s\n", cfg.out_report->string().c_str());
  return 0;
}

int cmd_verify(const std::string& a_path, const std::string& b_path, const std::string& calib, double tol,
               bool strict) {
  const AnyLayer a = load_layer_bundle(a_path);
  const AnyLayer b = load_layer_bundle(b_path);
  const Matrix x = load_stream(calib, layer_hidden_dim(a));
  const auto s = verify_equivalence(a, b, x, tol);
  std::printf("a=%s (%s)  b=%s (%s)  tokens=%zu\n", a_path.c_str(), layer_kind(a).c_str(), b_path.c_str(),
              layer_kind(b).c_str(), x.rows());
  std::printf("max_abs %.6e  max_rel %.6e  tol %.3e  %s\n", s.max_abs, s.max_rel, tol,
              s.within_tol ? "within tolerance" : "exceeds tolerance");
  std::printf("position,max_abs\n");
  for (std::size_t t = 0; t < s.per_position.size(); ++t) std::printf("%zu,%.6e\n", t, s.per_position[t]);
  return strict && !s.within_tol ? 1 : 0;
}

int cmd_calibrate(const std::string& layer_path, const std::string& out, const std::string& calib, std::size_t M,
                  std::size_t n, std::uint64_t seed) {
  const AnyLayer l = load_layer_bundle(layer_path);
  require(std::holds_alternative<GqaLayer>(l), "calibrate: layer must be a gqa bundle");
  const auto& gqa = std::get<GqaLayer>(l);
  const Matrix x = calib.empty() ? synth_calib(seed, n, gqa.D) : load_stream(calib, gqa.D);
  const auto merged = fold_frequencies(merge_key_heads(gqa), M);
  const auto stats = collect_key_stats(merged, x, M);
  save_bundle(out, stats);
  std::printf("stats: %zu groups of %zu slots over %zu tokens -> %s\n", stats.groups(), stats.slot_count(),
              stats.sample_count, out.c_str());
  return 0;
}

int cmd_bench(const std::string& layer_path, const std::string& baseline_path, const std::string& contexts_text,
              std::size_t dtype_bytes, int repeats, std::uint64_t seed, const std::string& csv_out) {
  const auto contexts = parse_context_list(contexts_text);
  const AnyLayer layer = load_layer_bundle(layer_path);
  ConversionReport rep;
  if (!baseline_path.empty()) {
    const AnyLayer base = load_layer_bundle(baseline_path);
    require(std::holds_alternative<GqaLayer>(base), "bench: --baseline must be a gqa bundle");
    require(std::holds_alternative<MlaLayer>(layer), "bench: --layer must be an mla bundle when a baseline is given");
    rep.bench = bench_decode(std::get<GqaLayer>(base), std::get<MlaLayer>(layer), contexts, dtype_bytes, repeats, seed);
  } else {
    const std::size_t D = layer_hidden_dim(layer);
    std::size_t longest = 2;
    for (auto c : contexts) longest = std::max(longest, c);
    const Matrix tokens = synth_calib(seed, longest, D);
    for (std::size_t ctx : contexts) {
      BenchRow row{ctx, 0, 0, 0, 0, 0};
      if (const auto* g = std::get_if<GqaLayer>(&layer)) {
        const auto t = time_decode<GqaDecodeSession>(*g, tokens, ctx, dtype_bytes, repeats);
        row.gqa_tokens_per_s = t.tokens_per_s;
        row.gqa_cache_bytes = t.cache_bytes;
      } else if (const auto* m = std::get_if<MlaLayer>(&layer)) {
        const auto t = time_decode<MlaDecodeSession>(*m, tokens, ctx, dtype_bytes, repeats);
        row.mla_tokens_per_s = t.tokens_per_s;
        row.mla_cache_bytes = t.cache_bytes;
      } else {
        throw InvariantError("bench: only gqa and mla layers have a decode path");
      }
      rep.bench.push_back(row);
    }
  }
  const std::string text = bench_csv(rep);
  std::fputs(text.c_str(), stdout);
  if (!csv_out.empty()) write_text_file(csv_out, text);
  return 0;
}

int cmd_report(const std::string& in, const std::string& format, const std::string& out_dir) {
  const auto rep = load_report_json(in);
  if (format == "json") {
    const std::string text = report_json_text(rep);
    if (out_dir.empty()) {
      std::fputs(text.c_str(), stdout);
    } else {
      write_text_file(std::filesystem::path(out_dir) / "report.json", text);
    }
    return 0;
  }
  std::filesystem::path dir = out_dir;
  if (dir.empty()) {
    const std::filesystem::path p(in);
    dir = p.parent_path() / (p.stem().string() + "_csv");
  }
  for (const auto& f : emit_csv(rep, dir)) std::printf("%s\n", f.string().c_str());
  return 0;
}

int cmd_synth(const std::string& layer_out, const std::string& calib_out, std::size_t D, std::size_t h, std::size_t g,
              double base, std::size_t n, std::uint64_t seed) {
  if (!layer_out.empty()) save_bundle(layer_out, synth_gqa(seed, D, h, g, base));
  if (!calib_out.empty()) save_tensor(calib_out, synth_calib(seed, n, D));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GQA to MLA conversion toolkit"};
  app.require_subcommand(1);

  std::string config;
  auto* convert = app.add_subcommand("convert", "Run the conversion pipeline from a JSON config");
  convert->add_option("--config", config, "Pipeline config (JSON)")->required();

  std::string va, vb, vcalib;
  double tol = 1e-8;
  bool strict = false;
  auto* verify = app.add_subcommand("verify", "Compare two layer bundles on a token stream");
  verify->add_option("--a", va, "First layer bundle")->required();
  verify->add_option("--b", vb, "Second layer bundle")->required();
  verify->add_option("--calib", vcalib, "Token stream (MLAF tensor, n x D)")->required();
  verify->add_option("--tol", tol, "Max-abs tolerance");
  verify->add_flag("--strict", strict, "Exit 1 when the tolerance is exceeded");

  std::string clayer, cout_path, ccalib;
  std::size_t cM = 1, cn = 512;
  std::uint64_t cseed = 0;
  auto* calibrate = app.add_subcommand("calibrate", "Collect per-frequency key statistics");
  calibrate->add_option("--layer", clayer, "GQA layer bundle")->required();
  calibrate->add_option("--out", cout_path, "Output stats bundle directory")->required();
  calibrate->add_option("--calib", ccalib, "Token stream (MLAF tensor); synthetic if omitted");
  calibrate->add_option("--freqfold", cM, "FreqFold group size M");
  calibrate->add_option("--n", cn, "Synthetic stream length");
  calibrate->add_option("--seed", cseed, "Synthetic stream seed");

  std::string blayer, bbase, bctx = "1k,2k,4k,8k", bcsv;
  std::size_t bdtype = 2;
  int brepeats = 3;
  std::uint64_t bseed = 0;
  auto* bench = app.add_subcommand("bench", "Single-stream decode throughput and cache size");
  bench->add_option("--layer", blayer, "Layer bundle (gqa or mla)")->required();
  bench->add_option("--baseline", bbase, "GQA bundle to compare an mla layer against");
  bench->add_option("--contexts", bctx, "Context lengths, e.g. 1k,2k,4k,8k");
  bench->add_option("--dtype-bytes", bdtype, "Bytes per cached scalar");
  bench->add_option("--repeats", brepeats, "Runs per point: best run for one layer, pooled when paired with --baseline");
  bench->add_option("--seed", bseed, "Token stream seed");
  bench->add_option("--csv", bcsv, "Also write the rows to this file");

  std::string rin, rformat = "csv", rout;
  auto* report = app.add_subcommand("report", "Re-emit a conversion report");
  report->add_option("--in", rin, "Report JSON")->required();
  report->add_option("--format", rformat, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  report->add_option("--out", rout, "Output directory");

  std::string slayer, scalib;
  std::size_t sD = 64, sh = 4, sg = 2, sn = 256;
  double sbase = 10000.0;
  std::uint64_t sseed = 0;
  auto* synth = app.add_subcommand("synth", "Write a seeded GQA layer bundle and/or token stream");
  synth->add_option("--layer-out", slayer, "GQA bundle directory");
  synth->add_option("--calib-out", scalib, "Token stream file");
  synth->add_option("--hidden", sD, "Hidden size D");
  synth->add_option("--heads", sh, "Query heads h");
  synth->add_option("--groups", sg, "KV groups g");
  synth->add_option("--rope-base", sbase, "RoPE base");
  synth->add_option("--n", sn, "Stream length");
  synth->add_option("--seed", sseed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (convert->parsed()) return cmd_convert(config);
    if (verify->parsed()) return cmd_verify(va, vb, vcalib, tol, strict);
    if (calibrate->parsed()) return cmd_calibrate(clayer, cout_path, ccalib, cM, cn, cseed);
    if (bench->parsed()) return cmd_bench(blayer, bbase, bctx, bdtype, brepeats, bseed, bcsv);
    if (report->parsed()) return cmd_report(rin, rformat, rout);
    if (synth->parsed()) return cmd_synth(slayer, scalib, sD, sh, sg, sbase, sn, sseed);
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 2;
  } catch (const InvariantError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
