#include <gtest/gtest.h>

#include <filesystem>

#include "wmlab/imageio.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/synth.hpp"
#include "wmlab/util.hpp"

using namespace wmlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("wmlab_" + name);
  fs::remove_all(p);
  return p;
}

std::string tree_digest(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Sha256 h;
  for (const auto& f : files) {
    h.update(fs::relative(f, root).string());
    h.update(read_file(f));
  }
  return h.hex_digest();
}

SynthParams small_params() {
  SynthParams p;
  p.victim_pairs = 6;
  p.attacker_pairs = 6;
  p.val_pairs = 3;
  p.eval_pairs = 3;
  p.textures = 4;
  p.seed = 17;
  return p;
}

}  // namespace

TEST(ImageIo, PngRoundTripIsLosslessOnEightBitLattice) {
  std::mt19937_64 rng(3);
  auto img = quantize8(synth_clean(rng, 32));
  auto back = decode_png(encode_png(img));
  EXPECT_EQ(back, img);
  auto mark = default_watermark(32);
  EXPECT_EQ(decode_png(encode_png(mark)), mark);
  EXPECT_EQ(png_from_base64(png_base64(img)), img);
}

TEST(ImageIo, DecodeRejectsGarbageAndConvertsChannels) {
  EXPECT_THROW(decode_png({1, 2, 3}), std::invalid_argument);
  auto mark = default_watermark(16);
  auto png = encode_png(mark);
  png.resize(png.size() / 2);
  EXPECT_THROW(decode_png(png), std::invalid_argument);
  auto rgb = decode_png(encode_png(mark), 3);
  EXPECT_EQ(rgb.channels(), 3);
  EXPECT_EQ(rgb.at(0, 0, 2), 1.0);
}

TEST(ImageIo, JpegQualityHundredIsNearLossless) {
  std::mt19937_64 rng(4);
  auto img = quantize8(synth_clean(rng, 64));
  EXPECT_GE(psnr(jpeg_roundtrip(img, 100), img), 35.0);
  EXPECT_LT(psnr(jpeg_roundtrip(img, 20), img), psnr(jpeg_roundtrip(img, 90), img));
  EXPECT_THROW(jpeg_roundtrip(img, 0), std::invalid_argument);
  EXPECT_THROW(jpeg_roundtrip(img, 101), std::invalid_argument);
}

TEST(Synth, WatermarkIsHighContrastGlyph) {
  auto w = default_watermark(64);
  EXPECT_EQ(w.channels(), 1);
  EXPECT_NO_THROW(Watermark::from_image(w));
  EXPECT_EQ(w.at(0, 0, 0), 1.0);
  EXPECT_EQ(w.at(32, 32, 0), 0.0);  // centre of the cross
}

TEST(Synth, RainNoiseWindow) {
  double sum = 0.0;
  const int n = 200;
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(1000 + i);
    auto b = synth_clean(rng, 64);
    auto a = synth_rain(rng, b, 1.0);
    sum += psnr(a, b);
  }
  const double mean = sum / n;
  EXPECT_GE(mean, 18.0);
  EXPECT_LE(mean, 26.0);
}

TEST(Synth, ZeroNoiseLevelLeavesImageUntouched) {
  std::mt19937_64 rng(5);
  auto b = synth_clean(rng, 32);
  EXPECT_EQ(synth_rain(rng, b, 0.0), b);
}

TEST(Synth, DatasetIsDeterministicAndSplitsAreDisjoint) {
  const auto d1 = scratch("synth_a"), d2 = scratch("synth_b");
  synth_dataset(small_params(), d1);
  synth_dataset(small_params(), d2);
  EXPECT_EQ(tree_digest(d1), tree_digest(d2));

  auto ds = load_dataset(d1);
  EXPECT_EQ(ds.victim.size(), 6u);
  EXPECT_EQ(ds.textures.size(), 4u);
  auto hv = image_hashes(ds.victim.b);
  auto ha = image_hashes(ds.attacker.b);
  for (const auto& h : hv) EXPECT_EQ(std::count(ha.begin(), ha.end(), h), 0);

  auto p = small_params();
  p.noise_level = 0.0;
  const auto d3 = scratch("synth_c");
  synth_dataset(p, d3);
  auto clean = load_dataset(d3);
  for (std::size_t i = 0; i < clean.victim.size(); ++i) {
    EXPECT_EQ(clean.victim.a[i], clean.victim.b[i]);
  }
  for (const auto& d : {d1, d2, d3}) fs::remove_all(d);
}

TEST(Synth, TamperedDatasetIsDetected) {
  const auto d = scratch("synth_t");
  synth_dataset(small_params(), d);
  std::mt19937_64 rng(9);
  write_png(d / "eval" / "a" / "000001.png", quantize8(synth_clean(rng, 64)));
  EXPECT_THROW(load_dataset(d), std::runtime_error);
  fs::remove_all(d);
}

TEST(Synth, InvalidParamsRejected) {
  auto p = small_params();
  p.image_size = 30;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = small_params();
  p.victim_pairs = 0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}
