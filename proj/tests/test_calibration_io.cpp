#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "transmla/bundle.hpp"
#include "transmla/linalg.hpp"
#include "transmla/synth.hpp"

using namespace transmla;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("transmla_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

void rewrite_manifest(const fs::path& dir, const std::function<void(nlohmann::json&)>& edit) {
  std::ifstream in(dir / "manifest.json");
  nlohmann::json j = nlohmann::json::parse(in);
  in.close();
  edit(j);
  std::ofstream(dir / "manifest.json") << j.dump(2);
}

}  // namespace

TEST(TensorFile, EmptyRoundTrip) {
  const auto bytes = encode_tensor(Matrix(0, 0));
  EXPECT_EQ(bytes.size(), 8u + 16u);
  const Matrix m = decode_tensor(bytes).matrix;
  EXPECT_EQ(m.rows(), 0u);
  EXPECT_EQ(m.cols(), 0u);
}

TEST(TensorFile, RandomRoundTripIsBitExact) {
  const fs::path dir = scratch("roundtrip");
  Matrix m = normal_matrix(CounterRng(1), 3, 5);
  m(0, 0) = -0.0;
  m(2, 4) = 5e-324;  // subnormal
  save_tensor(dir / "m.mlaf", m);
  EXPECT_TRUE(bit_equal(load_tensor(dir / "m.mlaf"), m));
  // Re-encoding the decoded tensor reproduces the file bytes.
  EXPECT_EQ(encode_tensor(load_tensor(dir / "m.mlaf")), read_file_bytes(dir / "m.mlaf"));
}

TEST(TensorFile, ByteLayoutIsLittleEndian) {
  const auto bytes = encode_tensor(Matrix(1, 1, 1.0));
  const std::vector<std::uint8_t> expected = {'M', 'L', 'A', 'F', 1, 0, 1, 2,               // magic, version, f64, ndim
                                              1,   0,   0,   0,   0, 0, 0, 0,               // rows
                                              1,   0,   0,   0,   0, 0, 0, 0,               // cols
                                              0,   0,   0,   0,   0, 0, 0xF0, 0x3F};        // 1.0
  EXPECT_EQ(bytes, expected);
}

TEST(TensorFile, Float32RoundTripsRepresentableValues) {
  const Matrix m = Matrix::from_rows({{0.5, -2.0, 3.25}, {1e10f, 0.0, -0.125}});
  const auto bytes = encode_tensor(m, DType::kF32);
  EXPECT_EQ(bytes.size(), 8u + 16u + 6u * 4u);
  const DecodedTensor d = decode_tensor(bytes);
  EXPECT_EQ(d.dtype, DType::kF32);
  EXPECT_TRUE(bit_equal(d.matrix, m));
  const Matrix r = normal_matrix(CounterRng(2), 4, 4);
  const Matrix back = decode_tensor(encode_tensor(r, DType::kF32)).matrix;
  for (std::size_t i = 0; i < r.size(); ++i)
    EXPECT_EQ(back.data()[i], static_cast<double>(static_cast<float>(r.data()[i])));
}

TEST(TensorFile, OneDimensionalDecodesAsRow) {
  std::vector<std::uint8_t> bytes = {'M', 'L', 'A', 'F', 1, 0, 1, 1, 2, 0, 0, 0, 0, 0, 0, 0};
  for (double v : {1.5, -3.0}) detail::put_le(bytes, std::bit_cast<std::uint64_t>(v), 8);
  EXPECT_EQ(decode_tensor(bytes).matrix, Matrix::from_rows({{1.5, -3.0}}));
}

TEST(TensorFile, CorruptedInputsAreRejected) {
  const auto good = encode_tensor(normal_matrix(CounterRng(3), 2, 3));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_tensor(bad_magic), IoError);
  auto bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(decode_tensor(bad_version), IoError);
  auto bad_dtype = good;
  bad_dtype[6] = 7;
  EXPECT_THROW(decode_tensor(bad_dtype), IoError);
  auto bad_ndim = good;
  bad_ndim[7] = 3;
  EXPECT_THROW(decode_tensor(bad_ndim), IoError);
  for (std::size_t cut : {0u, 5u, 8u, 15u, 23u, 24u, 40u})
    EXPECT_THROW(decode_tensor(std::span(good).first(cut)), IoError) << "cut " << cut;
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_tensor(trailing), IoError);
}

TEST(TensorFile, DimensionOverflowIsRejected) {
  std::vector<std::uint8_t> bytes = {'M', 'L', 'A', 'F', 1, 0, 1, 2};
  detail::put_le(bytes, 1ull << 40, 8);
  detail::put_le(bytes, 1ull << 40, 8);
  EXPECT_THROW(decode_tensor(bytes), IoError);
  std::vector<std::uint8_t> big = {'M', 'L', 'A', 'F', 1, 0, 1, 2};
  detail::put_le(big, 1ull << 62, 8);
  detail::put_le(big, 1, 8);
  EXPECT_THROW(decode_tensor(big), IoError);
}

TEST(TensorFile, MissingFileIsIoError) {
  EXPECT_THROW(load_tensor(scratch("missing") / "nope.mlaf"), IoError);
}

TEST(SynthGqa, DeterministicPerSeed) {
  const GqaLayer a = synth_gqa(5, 32, 4, 2), b = synth_gqa(5, 32, 4, 2), c = synth_gqa(6, 32, 4, 2);
  EXPECT_TRUE(bit_equal(a.Wq, b.Wq) && bit_equal(a.Wk, b.Wk) && bit_equal(a.Wv, b.Wv) && bit_equal(a.Wo, b.Wo));
  EXPECT_NE(a.Wq, c.Wq);
  EXPECT_NE(a.Wk, c.Wk);
  EXPECT_NE(a.Wq, a.Wo);
}

TEST(SynthGqa, EntryScaleAndSpectralBound) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t D = 64, h = 8;
    const GqaLayer l = synth_gqa(seed, D, h, 2);
    const double sigma = singular_values(l.Wq).front();
    EXPECT_LE(sigma, 4.0 * std::sqrt(static_cast<double>(h * l.d) / D + 1.0)) << "seed " << seed;
    double ss = 0.0;
    for (double v : l.Wq.data()) ss += v * v;
    EXPECT_NEAR(ss / static_cast<double>(l.Wq.size()), 1.0 / D, 0.25 / D);
  }
}

TEST(SynthGqa, ShapeErrors) {
  EXPECT_THROW(synth_gqa(0, 30, 4, 2), InvariantError);
  EXPECT_THROW(synth_gqa(0, 32, 4, 3), InvariantError);
  EXPECT_THROW(synth_gqa(0, 12, 4, 2), InvariantError);  // odd head dim
}

TEST(SynthCalib, LowRankHasExactRank) {
  const Matrix x = synth_calib(1, 50, 8, CalibStructure::low_rank(2));
  EXPECT_EQ(numerical_rank(covariance(x)), 2u);
  EXPECT_EQ(numerical_rank(x), 2u);
  EXPECT_THROW(synth_calib(1, 5, 8, CalibStructure::low_rank(9)), InvariantError);
  EXPECT_THROW(synth_calib(1, 0, 8), InvariantError);
}

TEST(SynthCalib, IidMeanWithinStatisticalBound) {
  const Matrix x = synth_calib(2, 1000, 16);
  for (double mu : column_means(x)) EXPECT_LE(std::abs(mu), 4.0 / std::sqrt(1000.0));
}

TEST(SynthCalib, DeterministicAndStructured) {
  for (const auto& s : {CalibStructure::iid(), CalibStructure::low_rank(3), CalibStructure::key_dominant(4.0)}) {
    EXPECT_TRUE(bit_equal(synth_calib(3, 20, 8, s), synth_calib(3, 20, 8, s))) << s.describe();
    EXPECT_NE(synth_calib(3, 20, 8, s), synth_calib(4, 20, 8, s)) << s.describe();
  }
  const Matrix iid = synth_calib(3, 20, 8);
  const Matrix kd = synth_calib(3, 20, 8, CalibStructure::key_dominant(4.0));
  for (std::size_t t = 0; t < 20; ++t) {
    EXPECT_DOUBLE_EQ(kd(t, 0), 4.0 * iid(t, 0));
    EXPECT_DOUBLE_EQ(kd(t, 7), iid(t, 7));
  }
  EXPECT_THROW(synth_calib(3, 4, 8, CalibStructure::key_dominant(0.5)), InvariantError);
}

TEST(MergeStats, EmptyIsIdentityAndOrderFree) {
  const MergedGqaLayer m = merge_key_heads(synth_gqa(4, 32, 4, 2));
  const FreqStats a = collect_key_stats(m, synth_calib(4, 20, 32), 2);
  const FreqStats b = collect_key_stats(m, synth_calib(5, 13, 32), 2);
  const FreqStats e = FreqStats::empty(2, 8, 2);
  const FreqStats ae = merge_stats(a, e);
  for (std::size_t p = 0; p < a.groups(); ++p) EXPECT_TRUE(bit_equal(ae.sigma_x[p], a.sigma_x[p]));
  EXPECT_EQ(ae.sample_count, a.sample_count);
  const FreqStats ab = merge_stats(a, b), ba = merge_stats(b, a);
  for (std::size_t p = 0; p < a.groups(); ++p) {
    EXPECT_LE(max_abs_diff(ab.sigma_x[p], ba.sigma_x[p]), 1e-12);
    EXPECT_LE(max_abs_diff(ab.sigma_y[p], ba.sigma_y[p]), 1e-12);
  }
  EXPECT_EQ(ab.sample_count, 33u);
}

TEST(MergeStats, ShardsMatchSinglePassAndAssociate) {
  const MergedGqaLayer m = merge_key_heads(synth_gqa(6, 32, 8, 4));
  const Matrix x = synth_calib(6, 90, 32);
  const FreqStats whole = collect_key_stats(m, x, 1);
  const FreqStats s1 = collect_key_stats(m, row_slice(x, 0, 30), 1);
  const FreqStats s2 = collect_key_stats(m, row_slice(x, 30, 61), 1);
  const FreqStats s3 = collect_key_stats(m, row_slice(x, 61, 90), 1);
  const FreqStats left = merge_stats(merge_stats(s1, s2), s3), right = merge_stats(s1, merge_stats(s2, s3));
  for (std::size_t p = 0; p < whole.groups(); ++p) {
    EXPECT_LE(max_abs_diff(left.sigma_x[p], whole.sigma_x[p]), 1e-12);
    EXPECT_LE(max_abs_diff(right.sigma_y[p], whole.sigma_y[p]), 1e-12);
    EXPECT_LE(max_abs_diff(left.sigma_y[p], right.sigma_y[p]), 1e-12);
  }
}

TEST(Bundle, GqaRoundTripIsBitExact) {
  const fs::path dir = scratch("gqa");
  const GqaLayer l = synth_gqa(7, 32, 4, 2, 500.0);
  save_bundle(dir, l);
  EXPECT_EQ(bundle_kind(dir), "gqa");
  const auto back = std::get<GqaLayer>(load_layer_bundle(dir));
  EXPECT_TRUE(bit_equal(back.Wq, l.Wq) && bit_equal(back.Wk, l.Wk) && bit_equal(back.Wv, l.Wv) &&
              bit_equal(back.Wo, l.Wo));
  EXPECT_EQ(back.rope, l.rope);
  EXPECT_EQ(back.g, 2u);
}

TEST(Bundle, MlaRoundTripKeepsBiasAndLowRankQuery) {
  const fs::path dir = scratch("mla");
  MlaLayer l;
  l.D = 8;
  l.h = 2;
  l.d_nope = 4;
  l.d_rope = 2;
  l.r_kv = 3;
  l.r_q = 5;
  const CounterRng rng(8);
  l.Wdkv = normal_matrix(rng.substream(1), 3, 8);
  l.Wuk = normal_matrix(rng.substream(2), 8, 3);
  l.Wuv = normal_matrix(rng.substream(3), 8, 3);
  l.Wkr = normal_matrix(rng.substream(4), 2, 8);
  l.Wdq = normal_matrix(rng.substream(5), 5, 8);
  l.Wuq = normal_matrix(rng.substream(6), 12, 5);
  l.Wo = normal_matrix(rng.substream(7), 8, 8);
  l.rope = RopeSchedule::from_thetas({0.25}, 16.0);
  l.out_bias = {1, 2, 3, 4, 5, 6, 7, 8};
  save_bundle(dir, AnyLayer{l});
  const auto back = std::get<MlaLayer>(load_layer_bundle(dir));
  EXPECT_TRUE(bit_equal(back.Wdq, l.Wdq) && bit_equal(back.Wuq, l.Wuq) && bit_equal(back.Wkr, l.Wkr));
  EXPECT_EQ(back.out_bias, l.out_bias);
  EXPECT_EQ(back.r_q, 5u);
  EXPECT_EQ(back.rope, l.rope);
  const Matrix x = synth_calib(8, 5, 8);
  EXPECT_TRUE(bit_equal(mla_forward_absorbed(back, x).y, mla_forward_absorbed(l, x).y));
}

TEST(Bundle, FactorizedAndStatsRoundTrip) {
  const fs::path dir = scratch("fact");
  const GqaLayer src = synth_gqa(9, 16, 4, 2);
  const auto f = gqa_to_mla_factorized(src);
  save_bundle(dir / "f", f);
  const auto back = std::get<MlaFactorizedLayer>(load_layer_bundle(dir / "f"));
  EXPECT_TRUE(bit_equal(back.Wdkv, f.Wdkv) && bit_equal(back.Wuk, f.Wuk));

  const FreqStats s = collect_key_stats(merge_key_heads(src), synth_calib(9, 12, 16), 2);
  save_bundle(dir / "s", s);
  const FreqStats sb = load_stats_bundle(dir / "s");
  EXPECT_EQ(sb.sample_count, 12u);
  EXPECT_EQ(sb.group_size, 2u);
  for (std::size_t p = 0; p < s.groups(); ++p) EXPECT_TRUE(bit_equal(sb.sigma_x[p], s.sigma_x[p]));
  EXPECT_EQ(sb.abs_sum, s.abs_sum);
  EXPECT_THROW(load_layer_bundle(dir / "s"), IoError);
  EXPECT_THROW(load_stats_bundle(dir / "f"), IoError);
}

TEST(Bundle, Float32OutputNarrowsPayload) {
  const fs::path dir = scratch("f32");
  const GqaLayer l = synth_gqa(10, 16, 4, 2);
  save_bundle(dir, l, DType::kF32);
  const auto back = std::get<GqaLayer>(load_layer_bundle(dir));
  EXPECT_EQ(back.Wq(1, 2), static_cast<double>(static_cast<float>(l.Wq(1, 2))));
  EXPECT_EQ(fs::file_size(dir / "Wq.mlaf"), 24u + 16u * 16u * 4u);
}

TEST(Bundle, InconsistentManifestsAreRejected) {
  const fs::path base = scratch("bad");
  const GqaLayer l = synth_gqa(11, 16, 4, 2);
  auto fresh = [&](const std::string& name) {
    const fs::path d = base / name;
    save_bundle(d, l);
    return d;
  };
  EXPECT_THROW(load_layer_bundle(base / "absent"), IoError);

  const fs::path shape = fresh("shape");
  rewrite_manifest(shape, [](auto& j) { j["tensors"][0]["shape"] = {3, 3}; });
  EXPECT_THROW(load_layer_bundle(shape), IoError);

  const fs::path escape = fresh("escape");
  rewrite_manifest(escape, [](auto& j) { j["tensors"][0]["file"] = "../x.mlaf"; });
  EXPECT_THROW(load_layer_bundle(escape), IoError);

  const fs::path dup = fresh("dup");
  rewrite_manifest(dup, [](auto& j) { j["tensors"].push_back(j["tensors"][0]); });
  EXPECT_THROW(load_layer_bundle(dup), IoError);

  const fs::path config = fresh("config");
  rewrite_manifest(config, [](auto& j) { j["config"]["g"] = 3; });
  EXPECT_THROW(load_layer_bundle(config), IoError);

  const fs::path missing = fresh("missing");
  fs::remove(missing / "Wv.mlaf");
  EXPECT_THROW(load_layer_bundle(missing), IoError);

  const fs::path schema = fresh("schema");
  rewrite_manifest(schema, [](auto& j) { j.erase("tensors"); });
  EXPECT_THROW(load_layer_bundle(schema), IoError);

  const fs::path garbage = fresh("garbage");
  std::ofstream(garbage / "manifest.json") << "{not json";
  EXPECT_THROW(load_layer_bundle(garbage), IoError);

  const fs::path nonfinite = fresh("nonfinite");
  Matrix wq = l.Wq;
  wq(0, 0) = std::nan("");
  save_tensor(nonfinite / "Wq.mlaf", wq);
  EXPECT_THROW(load_layer_bundle(nonfinite), IoError);
}

TEST(Bundle, SameSeedGivesIdenticalBytes) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  save_bundle(a, synth_gqa(12, 32, 8, 2));
  save_bundle(b, synth_gqa(12, 32, 8, 2));
  for (const auto& entry : fs::directory_iterator(a))
    EXPECT_EQ(read_file_bytes(entry.path()), read_file_bytes(b / entry.path().filename())) << entry.path();
}
