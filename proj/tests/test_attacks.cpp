#include <gtest/gtest.h>

#include <cmath>

#include "wmlab/attacks.hpp"
#include "wmlab/imageio.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/nn/convert.hpp"
#include "mock_linear.hpp"
#include "test_support.hpp"

using namespace wmlab;
using namespace wmlab::fixtures;

namespace {

const VictimBundle& shared_bundle() {
  static VictimBundle b = tiny_bundle();
  return b;
}

std::vector<ImageTensor> clean_images(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ImageTensor> v;
  for (int i = 0; i < n; ++i) v.push_back(quantize8(synth_clean(rng, kSize)));
  return v;
}

/// Fake gateway: returns f(x) and counts calls.
class FnClient : public GatewayClient {
 public:
  explicit FnClient(std::function<QueryResponse(const ImageTensor&)> f) : f_(std::move(f)) {}
  QueryResponse query(const ImageTensor& a) override {
    ++calls;
    return f_(a);
  }
  std::atomic<int> calls{0};

 private:
  std::function<QueryResponse(const ImageTensor&)> f_;
};

AttackDataset dataset(Provenance p, int n = 4) {
  auto imgs = clean_images(n, 77);
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("q" + std::to_string(i));
  return AttackDataset(p, imgs, imgs, ids);
}

ImageTensor smooth(int size) {
  std::vector<double> v(static_cast<std::size_t>(size) * size * 3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        v[(y * size + x) * 3 + c] = 0.2 + 0.6 * (x + y) / (2.0 * size) + 0.05 * c;
  return ImageTensor({size, size, 3}, v);
}

}  // namespace

// ---- forward removal algebra ----

TEST(ForwardRemove, HandAlgebraConstantImages) {
  Shape s{2, 2, 3};
  auto a = ImageTensor::filled(s, 0.8);
  auto b_prime = ImageTensor::filled(s, 0.6);
  Surrogate snet = [](const ImageTensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + 0.1;
    return out;
  };
  auto r = forward_remove(snet, a, b_prime);
  EXPECT_EQ(r.method, RemovalMethod::forward);
  for (double v : r.b_hat.data()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(ForwardRemove, MockLinearIdentityIsBitExact) {
  EXPECT_EQ(forward_identity_mismatches(1000, 2024), 0);
}

TEST(ForwardRemove, NoOpVictimReturnsResponse) {
  auto a = clean_images(1, 3)[0];
  Surrogate identity = [](const ImageTensor& x) { return x.values(); };
  auto r = forward_remove(identity, a, a);
  EXPECT_EQ(r.b_hat, a);
}

TEST(ForwardRemove, OutputClampedAndShapesChecked) {
  Shape s{2, 2, 1};
  Surrogate dark = [](const ImageTensor& x) { return std::vector<double>(x.size(), -5.0); };
  auto r = forward_remove(dark, ImageTensor::filled(s, 0.5), ImageTensor::filled(s, 0.5));
  for (double v : r.b_hat.data()) EXPECT_EQ(v, 1.0);
  auto raw = forward_remove_raw(dark, ImageTensor::filled(s, 0.5), ImageTensor::filled(s, 0.5));
  EXPECT_EQ(raw[0], 6.0);
  EXPECT_THROW(forward_remove(dark, ImageTensor::filled(s, 0.5),
                              ImageTensor::filled({2, 3, 1}, 0.5)),
               ShapeError);
}

TEST(EstimateNoise, MockLinearGivesExactNoise) {
  std::mt19937_64 rng(5);
  for (int n = 0; n < 50; ++n) {
    auto c = mock_linear_case(rng, {4, 4, 3});
    auto r = estimate_noise(mock_surrogate(c.w), c.a, c.b_prime);
    EXPECT_EQ(r.role, ResidualRole::noise_est);
    auto truth = Residual::difference(c.a, c.b, ResidualRole::noise_gt);
    EXPECT_EQ(r.data, truth.data);
  }
}

TEST(EstimateNoise, KeepsSignAndMagnitude) {
  Shape s{1, 1, 1};
  Surrogate big = [](const ImageTensor&) { return std::vector<double>{1.75}; };
  auto r = estimate_noise(big, ImageTensor::filled(s, 0.5), ImageTensor::filled(s, 0.25));
  EXPECT_EQ(r.data[0], 1.5);
}

// ---- curation and collection ----

TEST(Curation, RejectsZeroAndTakesFirstNWithoutProbe) {
  auto pool = clean_images(5, 1);
  EXPECT_THROW(curate_bypass_set(pool, nullptr, 0), std::invalid_argument);
  auto r = curate_bypass_set(pool, nullptr, 3);
  ASSERT_EQ(r.images.size(), 3u);
  EXPECT_EQ(r.images[2], pool[2]);
  EXPECT_EQ(r.discarded, 0);
}

TEST(Curation, ProbeDiscardsAndExhaustionCarriesPartial) {
  const auto& bundle = shared_bundle();
  auto pool = clean_images(6, 2);
  // Impossible bar: everything discarded.
  try {
    curate_bypass_set(pool, bundle.gnet.get(), 2, 200.0);
    FAIL() << "expected PoolExhausted";
  } catch (const PoolExhausted& e) {
    EXPECT_EQ(e.partial.examined, 6);
    EXPECT_EQ(e.partial.discarded, 6);
    EXPECT_DOUBLE_EQ(e.partial.discard_rate, 1.0);
  }
  auto ok = curate_bypass_set(pool, bundle.gnet.get(), 2, -1.0);
  EXPECT_EQ(ok.images.size(), 2u);
  EXPECT_TRUE(ok.stats.contains("mean_probe_psnr"));
}

TEST(Collect, NoDefenseKeepsEveryPairInOrder) {
  const auto& bundle = shared_bundle();
  GatewayConfig c;
  ONet onet(bundle, c);
  InProcessClient client(onet, "att");
  auto set = clean_images(12, 3);
  auto ds = collect_pairs(client, set, {.parallelism = 3, .min_pairs = 1});
  EXPECT_EQ(ds.size(), 12u);
  EXPECT_EQ(ds.queries_issued, 12);
  EXPECT_TRUE(ds.exclusions.empty());
  EXPECT_EQ(ds.provenance(), Provenance::bypass);
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(ds.inputs()[i], set[i]);
    EXPECT_EQ(ds.responses()[i], onet.query(set[i], "check").image);
  }
}

TEST(Collect, DuplicatesRetained) {
  FnClient client([](const ImageTensor& a) { return QueryResponse{a, false, "id"}; });
  auto one = clean_images(1, 4)[0];
  auto ds = collect_pairs(client, {one, one, one});
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(client.calls.load(), 3);
}

TEST(Collect, WarnedResponsesExcludedAndAllFlaggedAborts) {
  int n = 0;
  FnClient some([&n](const ImageTensor& a) { return QueryResponse{a, (n++ % 2) == 0, "id"}; });
  auto set = clean_images(6, 5);
  auto ds = collect_pairs(some, set);
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.exclusions.size(), 3u);

  FnClient all([](const ImageTensor& a) { return QueryResponse{a, true, "id"}; });
  try {
    collect_pairs(all, set);
    FAIL() << "expected AttackAborted";
  } catch (const AttackAborted& e) {
    EXPECT_EQ(e.report["flagged"], 6);
    EXPECT_EQ(e.report["usable_pairs"], 0);
  }
  EXPECT_THROW(collect_pairs(all, {}), std::invalid_argument);
}

TEST(Collect, MinPairsAborts) {
  FnClient ok([](const ImageTensor& a) { return QueryResponse{a, false, "id"}; });
  EXPECT_THROW(collect_pairs(ok, clean_images(3, 6), {.parallelism = 1, .min_pairs = 4}),
               AttackAborted);
}

TEST(Collect, AblationTagged) {
  FnClient ok([](const ImageTensor& a) { return QueryResponse{a, false, "id"}; });
  auto ds = ablation_collect(ok, pairs(3, 1.0, 7).a);
  EXPECT_EQ(ds.provenance(), Provenance::ablation);
}

TEST(AttackDataset, InvariantsAndRoundTrip) {
  EXPECT_THROW(AttackDataset(Provenance::bypass, {}, {}, {}), std::invalid_argument);
  auto imgs = clean_images(2, 8);
  std::mt19937_64 rng(1);
  auto big = synth_clean(rng, 2 * kSize);
  EXPECT_THROW(AttackDataset(Provenance::bypass, {imgs[0], big}, {imgs[0], imgs[1]}, {"a", "b"}),
               ShapeError);

  auto ds = dataset(Provenance::ablation, 3);
  ds.queries_issued = 5;
  auto dir = scratch_dir("attack_ds");
  ds.save(dir);
  auto back = AttackDataset::load(dir);
  EXPECT_EQ(back.provenance(), Provenance::ablation);
  EXPECT_EQ(back.inputs(), ds.inputs());
  EXPECT_EQ(back.responses(), ds.responses());
  EXPECT_EQ(back.query_ids(), ds.query_ids());
  EXPECT_EQ(back.queries_issued, 5);
}

// ---- training guards and oracles ----

TEST(AttackTraining, ProvenanceAndKindGuards) {
  auto bypass = dataset(Provenance::bypass);
  auto ablation = dataset(Provenance::ablation);
  auto inv = spec(nn::NetKind::hnet_inverse, 3, 3, 2, 1);
  auto sn = spec(nn::NetKind::snet, 3, 3, 2, 2);
  EXPECT_THROW(train_inverse(ablation, inv, quick(1, 1)), std::invalid_argument);
  EXPECT_THROW(train_surrogate(ablation, sn, quick(1, 1)), std::invalid_argument);
  EXPECT_THROW(train_inverse(bypass, sn, quick(1, 1)), std::invalid_argument);
  EXPECT_THROW(train_surrogate(bypass, inv, quick(1, 1)), std::invalid_argument);
  EXPECT_THROW(ablation_train(bypass, inv, sn, quick(1, 1)), std::invalid_argument);
  EXPECT_NO_THROW(ablation_train(ablation, inv, sn, quick(1, 1)));
}

TEST(AttackTraining, InverseOfNullWatermarkerIsNearIdentity) {
  auto imgs = pairs(48, 0.0, 31).b;
  std::vector<std::string> ids(imgs.size(), "q");
  AttackDataset ds(Provenance::bypass, imgs, imgs, ids);
  auto fit = train_inverse(ds, spec(nn::NetKind::hnet_inverse, 3, 3, 2, 32), quick(20, 33));
  auto held = pairs(8, 0.0, 34).b;
  auto out = apply_inverse_all(*fit.net, held);
  double total = 0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    EXPECT_EQ(out[i].method, RemovalMethod::inversion);
    EXPECT_EQ(out[i].b_hat.shape(), held[i].shape());
    total += psnr(out[i].b_hat, held[i]);
  }
  EXPECT_GE(total / held.size(), 35.0);
}

TEST(AttackTraining, SurrogateLearnsMockLinearMark) {
  // b' = b + w with a fixed low-amplitude pattern w.
  Shape s{kSize, kSize, 3};
  std::vector<double> w(s.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = ((i / 3) % 7 < 3) ? 0.03 : -0.03;
  auto add = [&](const ImageTensor& x) {
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] + w[i];
    return ImageTensor::from_unclamped(s, v);
  };
  auto train = pairs(64, 0.0, 41).b;
  std::vector<ImageTensor> marked;
  for (const auto& b : train) marked.push_back(add(b));
  AttackDataset ds(Provenance::bypass, train, marked,
                   std::vector<std::string>(train.size(), "q"));
  auto fit = train_surrogate(ds, spec(nn::NetKind::snet, 3, 3, 2, 42), quick(25, 43));
  auto held = pairs(8, 0.0, 44).b;
  auto snet = as_surrogate(*fit.net);
  double err = 0;
  std::size_t count = 0;
  for (const auto& x : held) {
    const auto y = snet(x);
    const auto target = add(x);
    for (std::size_t i = 0; i < y.size(); ++i) err += std::abs(y[i] - target.data()[i]);
    count += y.size();
  }
  EXPECT_LE(err / count, 0.02);
}

TEST(AttackTraining, EmptyDatasetRejected) {
  EXPECT_THROW(fit_image_map({}, {}, spec(nn::NetKind::snet, 3, 3, 2, 1), quick(1, 1)),
               std::invalid_argument);
}

TEST(ApplyInverse, ShapeContract) {
  auto net = nn::Network::create(spec(nn::NetKind::hnet_inverse, 3, 3, 2, 1));
  auto img = clean_images(1, 9)[0];
  EXPECT_EQ(apply_inverse(*net, img).b_hat.shape(), img.shape());
  EXPECT_THROW(apply_inverse(*net, ImageTensor::filled({kSize, kSize, 1}, 0.5)), ShapeError);
}

// ---- baselines ----

TEST(Baselines, JpegNearLosslessAtQuality100AndRejectsZero) {
  auto img = smooth(32);
  auto r = baseline_jpeg(img, 100);
  EXPECT_EQ(r.method, RemovalMethod::jpeg);
  EXPECT_GE(psnr(r.b_hat, img), 35.0);
  EXPECT_LT(psnr(baseline_jpeg(img, 20).b_hat, img), psnr(r.b_hat, img));
  EXPECT_THROW(baseline_jpeg(img, 0), std::invalid_argument);
  EXPECT_THROW(baseline_jpeg(img, 101), std::invalid_argument);
}

TEST(Baselines, AwgnSeededAndScaled) {
  auto img = smooth(128);
  auto r100 = baseline_awgn(img, 100.0, 1);
  EXPECT_EQ(r100.method, RemovalMethod::awgn);
  EXPECT_GE(psnr(r100.b_hat, img), 50.0);
  EXPECT_EQ(baseline_awgn(img, 20.0, 7).b_hat, baseline_awgn(img, 20.0, 7).b_hat);
  EXPECT_NE(baseline_awgn(img, 20.0, 7).b_hat, baseline_awgn(img, 20.0, 8).b_hat);
  EXPECT_THROW(baseline_awgn(img, NAN, 1), std::invalid_argument);

  // Realized SNR; the smooth image never touches the clamp at 30 dB.
  auto r30 = baseline_awgn(img, 30.0, 3);
  double sig = 0, noise = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    sig += img.data()[i] * img.data()[i];
    const double d = r30.b_hat.data()[i] - img.data()[i];
    noise += d * d;
  }
  EXPECT_NEAR(10.0 * std::log10(sig / noise), 30.0, 0.1);
}

// ---- white-box verification ----

TEST(VerifyAdditive, UnmarkedResidualIsDegenerate) {
  const auto& bundle = shared_bundle();
  auto b = clean_images(1, 10)[0];
  auto r = verify_additive(bundle, b, b);
  for (double v : r.residual.data) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r.extracted.shape(), bundle.delta.image().shape());
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.correlation, 0.0);
  EXPECT_FALSE(exceeds_extraction_threshold(r.correlation));
}

TEST(VerifyDeltaApprox, IdenticalInputsAreSentinel) {
  const auto& bundle = shared_bundle();
  auto b = clean_images(1, 11)[0];
  auto m = verify_delta_approx(bundle, b, b);
  EXPECT_EQ(m.psnr_db, kPsnrSentinelDb);
  EXPECT_EQ(m.correlation, 1.0);
  EXPECT_THROW(verify_delta_approx(bundle, b, ImageTensor::filled({kSize, 8, 3}, 0.5)),
               ShapeError);
}

TEST(Summarize, NeedsEvaluatedResults) {
  EXPECT_THROW(summarize({}), std::invalid_argument);
  RemovalResult r{clean_images(1, 12)[0], RemovalMethod::none, {}, {}, {}, {}};
  EXPECT_THROW(summarize({r}), std::invalid_argument);
  evaluate_removal(shared_bundle(), r, &r.b_hat);
  auto m = summarize({r});
  EXPECT_EQ(m.sample_count, 1);
  EXPECT_EQ(m.psnr_db, kPsnrSentinelDb);
}
