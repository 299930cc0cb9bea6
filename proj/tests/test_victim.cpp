#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "wmlab/imageio.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/nn/convert.hpp"
#include "wmlab/synth.hpp"
#include "wmlab/victim.hpp"
#include "test_support.hpp"

using namespace wmlab;
namespace fs = std::filesystem;

using namespace wmlab::fixtures;

TEST(TrainingConfig, RejectsNonPositiveFidelityOrMarkWeights) {
  TrainingConfig c;
  c.beta1 = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.beta2 = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.beta3 = 0;
  EXPECT_NO_THROW(c.validate());
  c.lr_schedule = "step";
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TrainingConfig, JsonRoundTrip) {
  TrainingConfig c = quick(7, 99);
  c.lr_schedule = "cosine";
  TrainingConfig back = nlohmann::json(c).get<TrainingConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
}

TEST(TrainGnet, ConstantTargetsRejected) {
  PairSet p;
  for (int i = 0; i < 3; ++i) {
    p.a.push_back(ImageTensor::filled({kSize, kSize, 3}, 0.3));
    p.b.push_back(ImageTensor::filled({kSize, kSize, 3}, 0.7));
  }
  EXPECT_THROW(train_gnet(p, spec(nn::NetKind::gnet, 3, 3, 2, 1), quick(1, 1)),
               std::invalid_argument);
}

TEST(TrainGnet, WrongKindAndEmptyRejected) {
  auto p = pairs(2, 1.0, 1);
  EXPECT_THROW(train_gnet(p, spec(nn::NetKind::snet, 3, 3, 2, 1), quick(1, 1)),
               std::invalid_argument);
  EXPECT_THROW(train_gnet(PairSet{}, spec(nn::NetKind::gnet, 3, 3, 2, 1), quick(1, 1)),
               std::invalid_argument);
}

TEST(TrainGnet, ZeroNoiseLearnsNearIdentity) {
  auto p = pairs(48, 0.0, 11);
  auto held = pairs(8, 0.0, 12);
  TrainingConfig c = quick(15, 13);
  auto g = train_gnet(p, spec(nn::NetKind::gnet, 3, 3, 2, 14), c);
  auto out = nn::map_images(*g.net, held.b);
  double total = 0;
  for (std::size_t i = 0; i < out.size(); ++i) total += psnr(out[i], held.b[i]);
  EXPECT_GE(total / held.size(), 30.0);
}

TEST(TrainGnet, SameSeedGivesIdenticalParameters) {
  auto p = pairs(8, 1.0, 21);
  auto g1 = train_gnet(p, spec(nn::NetKind::gnet, 3, 3, 2, 22), quick(1, 23));
  auto g2 = train_gnet(p, spec(nn::NetKind::gnet, 3, 3, 2, 22), quick(1, 23));
  EXPECT_EQ(g1.net->parameter_hash(), g2.net->parameter_hash());
  EXPECT_EQ(g1.manifest["loss_curve"], g2.manifest["loss_curve"]);
}

TEST(Embed, OutputShapeMatchesCarrierAndIsClamped) {
  auto hnet = nn::Network::create(spec(nn::NetKind::hnet, 4, 3, 2, 1));
  std::mt19937_64 rng(1);
  auto b = synth_clean(rng, kSize);
  auto out = embed(*hnet, b, mark());
  EXPECT_EQ(out.shape(), b.shape());
  for (double v : out.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Embed, WatermarkSizeMismatchIsShapeError) {
  auto hnet = nn::Network::create(spec(nn::NetKind::hnet, 4, 3, 2, 1));
  std::mt19937_64 rng(1);
  auto b = synth_clean(rng, kSize);
  auto big = Watermark::from_image(default_watermark(2 * kSize));
  EXPECT_THROW(embed(*hnet, b, big), ShapeError);
}

TEST(Embed, MockLinearResidualIsExactlyScaledMark) {
  // Test double: b' = b + 0.1 * delta. Subtraction is exact up to one ulp of b.
  Shape s{4, 4, 1};
  std::vector<double> bv(s.size()), dv(s.size());
  for (std::size_t i = 0; i < bv.size(); ++i) {
    bv[i] = (i % 8) / 16.0;
    dv[i] = (i % 2) ? 1.0 : 0.0;
  }
  ImageTensor b(s, bv);
  std::vector<double> marked(s.size());
  for (std::size_t i = 0; i < marked.size(); ++i) marked[i] = bv[i] + 0.1 * dv[i];
  auto r = Residual::difference(ImageTensor(s, marked), b, ResidualRole::delta_prime_b);
  for (std::size_t i = 0; i < r.data.size(); ++i) EXPECT_NEAR(r.data[i], 0.1 * dv[i], 1.2e-16);
}

TEST(Watermark, ShippedAssetIsTheBuiltInGlyph) {
  const auto w = load_watermark(fs::path(WMLAB_ASSET_DIR) / "watermark.png", 64);
  EXPECT_EQ(w.image(), default_watermark(64));
  EXPECT_EQ(load_watermark({}, 64).image(), default_watermark(64));
}

TEST(Watermark, UserPngMustMatchSizeAndVary) {
  auto dir = scratch_dir("watermark_png");
  write_png(dir / "small.png", default_watermark(kSize));
  EXPECT_EQ(load_watermark(dir / "small.png", kSize).image(), default_watermark(kSize));
  EXPECT_THROW(load_watermark(dir / "small.png", 2 * kSize), ShapeError);
  write_png(dir / "flat.png", ImageTensor::filled({kSize, kSize, 1}, 1.0));
  EXPECT_THROW(load_watermark(dir / "flat.png", kSize), std::invalid_argument);
  // RGB input is read as grayscale.
  const auto glyph = default_watermark(kSize);
  std::vector<double> rgb;
  for (double v : glyph.data()) rgb.insert(rgb.end(), {v, v, v});
  write_png(dir / "rgb.png", ImageTensor({kSize, kSize, 3}, rgb));
  const auto gray = load_watermark(dir / "rgb.png", kSize).image();
  for (std::size_t i = 0; i < gray.size(); ++i) EXPECT_NEAR(gray.data()[i], glyph.data()[i], 1e-12);
}

TEST(Extract, UntrainedOutputHasWatermarkShape) {
  auto enet = nn::Network::create(spec(nn::NetKind::enet, 3, 1, 3, 2));
  std::mt19937_64 rng(2);
  auto out = extract(*enet, synth_clean(rng, kSize));
  EXPECT_EQ(out.shape(), (Shape{kSize, kSize, 1}));
}

TEST(JointTrain, GnetFrozenAndBeta3ZeroRuns) {
  auto data = pairs(8, 1.0, 5);
  auto g = train_gnet(data, spec(nn::NetKind::gnet, 3, 3, 2, 1), quick(1, 2));
  const std::string before = g.net->parameter_hash();
  TrainingConfig c = quick(1, 3);
  c.beta3 = 0;
  auto bundle = joint_train(std::move(g.net), data.b, textures(8, 9), mark(), c,
                            spec(nn::NetKind::hnet, 4, 3, 2, 4),
                            spec(nn::NetKind::enet, 3, 1, 3, 5),
                            spec(nn::NetKind::disc, 3, 1, 3, 6));
  EXPECT_EQ(bundle.gnet->parameter_hash(), before);
  ASSERT_TRUE(bundle.manifest.contains("loss_curve"));
  EXPECT_FALSE(bundle.manifest["loss_curve"].empty());
}

TEST(JointTrain, PreconditionsRejected) {
  auto data = pairs(2, 1.0, 5);
  auto mk = [] { return nn::Network::create(spec(nn::NetKind::gnet, 3, 3, 2, 1)); };
  auto h = spec(nn::NetKind::hnet, 4, 3, 2, 4);
  auto e = spec(nn::NetKind::enet, 3, 1, 3, 5);
  auto d = spec(nn::NetKind::disc, 3, 1, 3, 6);
  EXPECT_THROW(joint_train(mk(), data.b, textures(2, 1), Watermark::null_mark({kSize, kSize, 1}),
                           quick(1, 1), h, e, d),
               std::invalid_argument);
  EXPECT_THROW(joint_train(mk(), {}, textures(2, 1), mark(), quick(1, 1), h, e, d),
               std::invalid_argument);
  EXPECT_THROW(joint_train(mk(), data.b, {}, mark(), quick(1, 1), h, e, d),
               std::invalid_argument);
}

TEST(VictimBundle, SaveLoadPreservesWeightsAndManifest) {
  auto bundle = tiny_bundle(0.01);
  auto dir = fs::temp_directory_path() / "wmlab_bundle_roundtrip";
  fs::remove_all(dir);
  bundle.save(dir);
  auto back = VictimBundle::load(dir);
  EXPECT_EQ(back.gnet->parameter_hash(), bundle.gnet->parameter_hash());
  EXPECT_EQ(back.hnet->parameter_hash(), bundle.hnet->parameter_hash());
  EXPECT_EQ(back.enet->parameter_hash(), bundle.enet->parameter_hash());
  EXPECT_EQ(back.disc->parameter_hash(), bundle.disc->parameter_hash());
  EXPECT_EQ(back.delta.image(), bundle.delta.image());
  EXPECT_EQ(back.manifest_hash(), bundle.manifest_hash());
  fs::remove_all(dir);
}
