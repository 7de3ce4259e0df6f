// Convert a seeded GQA layer into an MLA layer and print what each stage cost.

#include <cstdio>

#include "transmla/transmla.hpp"

int main() {
  using namespace transmla;

  const GqaLayer gqa = synth_gqa(/*seed=*/7, /*D=*/128, /*h=*/8, /*g=*/2);
  const Matrix calib = synth_calib(/*seed=*/7, /*n=*/512, gqa.D);

  ConversionOptions opt;
  opt.group_size = 2;    // FreqFold pairs of adjacent frequencies
  opt.n_keep_heads = 1;  // one shared RoPE key head, d_rope = d
  opt.r_kv = 16;         // latent width; cache = r_kv + d_rope per token

  const ConversionResult res = convert_layer(gqa, calib, opt);
  for (const auto& s : res.report.stages)
    std::printf("%-9s max_abs %.3e  rel %.3e\n", s.stage.c_str(), s.max_abs, s.max_rel);
  std::printf("cache %zu -> %zu scalars/token (%.2f%% smaller)\n", res.report.cache_scalars_before,
              res.report.cache_scalars_after, res.report.cache_reduction_percent);

  // The absorbed (inference) path and the per-head path agree.
  const Matrix x = row_slice(calib, 0, 16);
  const double gap = max_abs_diff(mla_forward_absorbed(res.layer, x).y, mla_forward_mha_paradigm(res.layer, x));
  std::printf("absorbed vs per-head forward: %.3e\n", gap);
  return 0;
}
