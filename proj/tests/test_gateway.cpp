#include <gtest/gtest.h>

#include <future>
#include <set>

#include "wmlab/gateway.hpp"
#include "wmlab/imageio.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/nn/convert.hpp"
#include "wmlab/util.hpp"
#include "test_support.hpp"

using namespace wmlab;
using namespace wmlab::fixtures;

namespace {

const VictimBundle& shared_bundle() {
  static VictimBundle b = tiny_bundle();
  return b;
}

ImageTensor clean(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return quantize8(synth_clean(rng, kSize));
}

GatewayConfig local() {
  GatewayConfig c;
  c.bind_address = "127.0.0.1:0";
  return c;
}

}  // namespace

TEST(GatewayConfig, ScreenerNeedsPositiveThreshold) {
  GatewayConfig c;
  c.screener_enabled = true;
  c.screener_threshold = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.screener_threshold = 0.01;
  EXPECT_NO_THROW(c.validate());
  c.screener_enabled = false;
  c.screener_threshold = 0.0;
  EXPECT_NO_THROW(c.validate());
}

TEST(GatewayConfig, BindAddressParsing) {
  GatewayConfig c;
  c.bind_address = "0.0.0.0:9001";
  EXPECT_EQ(c.host(), "0.0.0.0");
  EXPECT_EQ(c.port(), 9001);
  c.bind_address = "nohost";
  EXPECT_THROW(c.port(), std::invalid_argument);
  c.bind_address = "h:70000";
  EXPECT_THROW(c.port(), std::invalid_argument);
}

TEST(GatewayConfig, JsonRoundTrip) {
  GatewayConfig c = local();
  c.max_queries_per_client = 7;
  c.screener_enabled = true;
  c.screener_threshold = 0.02;
  auto back = nlohmann::json(c).get<GatewayConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
}

TEST(ONet, WrongInputSizeIsShapeError) {
  ONet onet(shared_bundle(), local());
  std::mt19937_64 rng(1);
  EXPECT_THROW(onet.query(synth_clean(rng, 2 * kSize), "c"), ShapeError);
}

TEST(ONet, IdenticalQueriesGiveIdenticalResponses) {
  ONet onet(shared_bundle(), local());
  auto a = clean(2);
  auto r1 = onet.query(a, "c");
  auto r2 = onet.query(a, "c");
  EXPECT_EQ(r1.image, r2.image);
  EXPECT_NE(r1.query_id, r2.query_id);
  EXPECT_FALSE(r1.warning);
  EXPECT_EQ(quantize8(r1.image), r1.image);
}

TEST(ONet, ResponseIsEmbedOfGnetOutput) {
  const auto& bundle = shared_bundle();
  ONet onet(bundle, local());
  auto a = clean(3);
  auto b = nn::map_images(*bundle.gnet, {a})[0];
  EXPECT_EQ(onet.query(a, "c").image, quantize8(embed(*bundle.hnet, b, bundle.delta)));
}

TEST(Screener, FlaggedQueryReturnsInputWithWarning) {
  const auto& bundle = shared_bundle();
  auto a = clean(4);
  const double d = screen_distance(*bundle.gnet, a);
  ASSERT_GT(d, 0.0);
  GatewayConfig c = local();
  c.screener_enabled = true;
  c.screener_threshold = d * 1.5;
  ONet onet(bundle, c);
  auto r = onet.query(a, "c");
  EXPECT_TRUE(r.warning);
  EXPECT_EQ(r.image, a);
  EXPECT_EQ(onet.queries_flagged(), 1);

  c.screener_threshold = d * 0.5;
  ONet lenient(bundle, c);
  EXPECT_FALSE(lenient.query(a, "c").warning);
}

TEST(Screener, SilentModeHidesWarning) {
  const auto& bundle = shared_bundle();
  auto a = clean(5);
  GatewayConfig c = local();
  c.screener_enabled = true;
  c.screener_threshold = 10.0;
  c.silent_warning = true;
  ONet onet(bundle, c);
  auto r = onet.query(a, "c");
  EXPECT_FALSE(r.warning);
  EXPECT_EQ(r.image, a);
  EXPECT_EQ(onet.queries_flagged(), 1);
}

TEST(Screener, VerdictFollowsStrictThreshold) {
  const auto& bundle = shared_bundle();
  auto a = clean(6);
  const double d = screen_distance(*bundle.gnet, a);
  EXPECT_FALSE(screen_query(bundle, a, d).flagged);
  EXPECT_TRUE(screen_query(bundle, a, std::nextafter(d, 1.0)).flagged);
  EXPECT_DOUBLE_EQ(screen_query(bundle, a, 1.0).distance, d);
  EXPECT_THROW(screen_query(bundle, a, 0.0), std::invalid_argument);
}

TEST(Screener, NearIdentityGnetFlagsCleanInput) {
  // GNet trained on a = b is close to the identity, so clean images sit
  // well under any sensible threshold.
  auto data = pairs(48, 0.0, 11);
  auto g = train_gnet(data, spec(nn::NetKind::gnet, 3, 3, 2, 14), quick(15, 13));
  auto a = clean(7);
  const double d = screen_distance(*g.net, a);
  EXPECT_LT(d, 0.05);
}

TEST(Screener, CalibrationFlagsFewGenuineQueries) {
  const auto& bundle = shared_bundle();
  auto genuine = pairs(40, 1.0, 8).a;
  const double t = calibrate_threshold(bundle, genuine);
  EXPECT_GT(t, 0.0);
  int flagged = 0;
  for (const auto& a : genuine) flagged += screen_query(bundle, a, t).flagged;
  EXPECT_LE(flagged, 8);  // at most the 20th percentile, and halved
  EXPECT_THROW(calibrate_threshold(bundle, {}), std::invalid_argument);
}

TEST(ONet, QuotaPerClient) {
  GatewayConfig c = local();
  c.max_queries_per_client = 2;
  ONet onet(shared_bundle(), c);
  auto a = clean(9);
  onet.query(a, "x");
  onet.query(a, "x");
  EXPECT_THROW(onet.query(a, "x"), QuotaExceeded);
  EXPECT_NO_THROW(onet.query(a, "y"));
}

TEST(QueryLog, OneRecordPerQueryWithoutImages) {
  auto dir = scratch_dir("gateway_log");
  GatewayConfig c = local();
  c.query_log = dir / "q.jsonl";
  c.screener_enabled = true;
  c.screener_threshold = 1e-9;
  {
    ONet onet(shared_bundle(), c);
    for (int i = 0; i < 5; ++i) onet.query(clean(10 + i), "logger");
  }
  auto recs = QueryLog::read(c.query_log);
  ASSERT_EQ(recs.size(), 5u);
  std::set<std::string> ids;
  for (const auto& r : recs) {
    ids.insert(r.query_id);
    EXPECT_EQ(r.client_id, "logger");
    EXPECT_FALSE(r.flagged);
    EXPECT_EQ(r.input_hash.size(), 64u);
    EXPECT_EQ(r.response_hash.size(), 64u);
    EXPECT_FALSE(r.timestamp.empty());
  }
  EXPECT_EQ(ids.size(), 5u);
  std::istringstream lines(read_file(c.query_log));
  for (std::string line; std::getline(lines, line);) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.size(), 7u);
    EXPECT_FALSE(j.contains("image"));
  }
}

TEST(Http, HealthAndRoundTripMatchInProcess) {
  const auto& bundle = shared_bundle();
  ONet onet(bundle, local());
  HttpServer server(onet);
  server.start();
  HttpClient client("127.0.0.1", server.port(), "h");
  auto health = client.health();
  EXPECT_EQ(health["status"], "ok");
  EXPECT_EQ(health["bundle_hash"], bundle.manifest_hash());
  EXPECT_EQ(health["screener_enabled"], false);

  ONet reference(bundle, local());
  auto a = clean(20);
  EXPECT_EQ(client.query(a).image, reference.query(a, "r").image);
  std::mt19937_64 rng(1);
  EXPECT_THROW(client.query(quantize8(synth_clean(rng, 2 * kSize))), ShapeError);
  server.stop();
}

TEST(Http, HundredConcurrentQueriesMatchSequential) {
  const auto& bundle = shared_bundle();
  ONet onet(bundle, local());
  HttpServer server(onet);
  server.start();
  std::vector<ImageTensor> inputs;
  for (int i = 0; i < 100; ++i) inputs.push_back(clean(100 + i % 10));
  ONet reference(bundle, local());
  std::vector<ImageTensor> expected;
  for (const auto& a : inputs) expected.push_back(reference.query(a, "seq").image);

  std::vector<std::future<QueryResponse>> futures;
  for (const auto& a : inputs) {
    futures.push_back(std::async(std::launch::async, [&server, a] {
      HttpClient c("127.0.0.1", server.port(), "par");
      return c.query(a);
    }));
  }
  for (std::size_t i = 0; i < futures.size(); ++i) {
    EXPECT_EQ(futures[i].get().image, expected[i]) << "query " << i;
  }
  EXPECT_EQ(onet.queries_served(), 100);
  server.stop();
}

TEST(Http, OverBudgetClientGetsQuotaError) {
  GatewayConfig c = local();
  c.max_queries_per_client = 1;
  ONet onet(shared_bundle(), c);
  HttpServer server(onet);
  server.start();
  HttpClient client("127.0.0.1", server.port(), "greedy");
  auto a = clean(30);
  EXPECT_NO_THROW(client.query(a));
  EXPECT_THROW(client.query(a), QuotaExceeded);
  server.stop();
}

TEST(Http, UnreachableGatewayReported) {
  HttpClient client("127.0.0.1", 1, "nobody");
  EXPECT_THROW(client.query(clean(1)), GatewayUnavailable);
}
