#include "wmlab/gateway.hpp"

// httplib defaults to a backlog of 5, which drops bursts of concurrent clients.
#define CPPHTTPLIB_LISTEN_BACKLOG 512
#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "wmlab/imageio.hpp"
#include "wmlab/nn/convert.hpp"
#include "wmlab/util.hpp"

namespace wmlab {

using nlohmann::json;

void GatewayConfig::validate() const {
  if (screener_enabled && !(screener_threshold > 0.0)) {
    throw std::invalid_argument("gateway: screener_threshold must be > 0 when the screener is enabled");
  }
  if (!std::isfinite(screener_threshold) || screener_threshold < 0.0) {
    throw std::invalid_argument("gateway: screener_threshold must be finite and >= 0");
  }
  if (max_queries_per_client && *max_queries_per_client < 0) {
    throw std::invalid_argument("gateway: max_queries_per_client must be >= 0");
  }
  port();
}

std::string GatewayConfig::host() const {
  const auto colon = bind_address.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("gateway: bind_address must be host:port");
  return bind_address.substr(0, colon);
}

int GatewayConfig::port() const {
  const auto colon = bind_address.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("gateway: bind_address must be host:port");
  const int p = std::stoi(bind_address.substr(colon + 1));
  if (p < 0 || p > 65535) throw std::invalid_argument("gateway: port out of range");
  return p;
}

void to_json(json& j, const GatewayConfig& c) {
  j = json{{"screener_enabled", c.screener_enabled},
           {"screener_threshold", c.screener_threshold},
           {"max_queries_per_client",
            c.max_queries_per_client ? json(*c.max_queries_per_client) : json(nullptr)},
           {"bind_address", c.bind_address},
           {"silent_warning", c.silent_warning},
           {"query_log", c.query_log.string()}};
}

void from_json(const json& j, GatewayConfig& c) {
  GatewayConfig d;
  c.screener_enabled = j.value("screener_enabled", d.screener_enabled);
  c.screener_threshold = j.value("screener_threshold", d.screener_threshold);
  c.max_queries_per_client.reset();
  if (j.contains("max_queries_per_client") && !j["max_queries_per_client"].is_null()) {
    c.max_queries_per_client = j["max_queries_per_client"].get<long>();
  }
  c.bind_address = j.value("bind_address", d.bind_address);
  c.silent_warning = j.value("silent_warning", d.silent_warning);
  c.query_log = j.value("query_log", std::string());
}

void to_json(json& j, const QueryRecord& r) {
  j = json{{"query_id", r.query_id},
           {"client_id", r.client_id},
           {"input_hash", r.input_hash},
           {"response_hash", r.response_hash},
           {"screener_distance", r.screener_distance},
           {"flagged", r.flagged},
           {"timestamp", r.timestamp}};
}

void from_json(const json& j, QueryRecord& r) {
  r.query_id = j.at("query_id");
  r.client_id = j.at("client_id");
  r.input_hash = j.at("input_hash");
  r.response_hash = j.at("response_hash");
  r.screener_distance = j.at("screener_distance");
  r.flagged = j.at("flagged");
  r.timestamp = j.at("timestamp");
}

QueryLog::QueryLog(const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  out_.open(file, std::ios::app);
  if (!out_) throw std::runtime_error("cannot open query log " + file.string());
}

void QueryLog::append(const QueryRecord& r) {
  const std::string line = json(r).dump() + "\n";
  std::lock_guard lock(mu_);
  out_ << line;
  out_.flush();
}

std::vector<QueryRecord> QueryLog::read(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open query log " + file.string());
  std::vector<QueryRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line).get<QueryRecord>());
  }
  return out;
}

namespace {

double rms(const ImageTensor& x, const ImageTensor& y) {
  const auto a = x.data(), b = y.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc / a.size());
}

std::string content_hash(const ImageTensor& img) {
  const auto png = encode_png(img);
  return sha256_hex(std::as_bytes(std::span(png)));
}

}  // namespace

double screen_distance(const nn::Network& gnet, const ImageTensor& a) {
  const ImageTensor b = nn::to_image(gnet.forward(nn::to_tensor(a)), 0);
  return rms(a, b);
}

ScreenVerdict screen_query(const VictimBundle& bundle, const ImageTensor& a,
                           double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("screen_query: threshold must be > 0");
  const double d = screen_distance(*bundle.gnet, a);
  return {d < threshold, d};
}

double calibrate_threshold(const VictimBundle& bundle,
                           const std::vector<ImageTensor>& genuine) {
  if (genuine.empty()) throw std::invalid_argument("calibrate_threshold: no samples");
  const auto out = nn::map_images(*bundle.gnet, genuine);
  std::vector<double> d;
  d.reserve(genuine.size());
  for (std::size_t i = 0; i < genuine.size(); ++i) d.push_back(rms(genuine[i], out[i]));
  std::sort(d.begin(), d.end());
  // Linear-interpolated percentile.
  const double pos = 0.2 * (d.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const double frac = pos - lo;
  const double p20 = lo + 1 < d.size() ? d[lo] * (1 - frac) + d[lo + 1] * frac : d[lo];
  return 0.5 * p20;
}

ONet::ONet(const VictimBundle& bundle, GatewayConfig config)
    : bundle_(bundle), config_(std::move(config)), bundle_hash_(bundle.manifest_hash()) {
  config_.validate();
  if (!config_.query_log.empty()) log_ = std::make_unique<QueryLog>(config_.query_log);
}

std::atomic<long>& ONet::budget_for(const std::string& client_id) {
  std::lock_guard lock(budgets_mu_);
  auto& slot = budgets_[client_id];
  if (!slot) slot = std::make_unique<std::atomic<long>>(0);
  return *slot;
}

QueryResponse ONet::query(const ImageTensor& a, const std::string& client_id) {
  require_same_shape(a.shape(), bundle_.carrier_shape(), "query");
  if (config_.max_queries_per_client) {
    const long used = budget_for(client_id).fetch_add(1) + 1;
    if (used > *config_.max_queries_per_client) {
      throw QuotaExceeded("client '" + client_id + "' exceeded " +
                          std::to_string(*config_.max_queries_per_client) + " queries");
    }
  }
  char id[24];
  std::snprintf(id, sizeof id, "q%08ld", next_id_.fetch_add(1));

  // b stays inside this scope.
  const ImageTensor b = nn::to_image(bundle_.gnet->forward(nn::to_tensor(a)), 0);
  const double distance = rms(a, b);
  const bool flagged = config_.screener_enabled && distance < config_.screener_threshold;
  QueryResponse resp{flagged ? a : quantize8(embed(*bundle_.hnet, b, bundle_.delta)),
                     flagged && !config_.silent_warning, id};
  ++served_;
  if (flagged) ++flagged_;
  if (log_) {
    log_->append({id, client_id, content_hash(a), content_hash(resp.image), distance,
                  flagged, utc_timestamp()});
  }
  return resp;
}

json ONet::health() const {
  const Shape s = bundle_.carrier_shape();
  return {{"status", "ok"},
          {"bundle_hash", bundle_hash_},
          {"screener_enabled", config_.screener_enabled},
          {"input_shape", {s.height, s.width, s.channels}},
          {"queries_served", served_.load()}};
}

QueryResponse InProcessClient::query(const ImageTensor& a) {
  return onet_.query(a, client_id_);
}

struct HttpClient::Impl {
  std::string host;
  int port;
};

HttpClient::HttpClient(std::string host, int port, std::string client_id)
    : impl_(std::make_unique<Impl>(Impl{std::move(host), port})),
      client_id_(std::move(client_id)) {}

HttpClient::~HttpClient() = default;

QueryResponse HttpClient::query(const ImageTensor& a) {
  // One connection per call keeps the client usable from several threads.
  httplib::Client cli(impl_->host, impl_->port);
  cli.set_read_timeout(120, 0);
  const json body = {{"image", png_base64(a)}, {"client_id", client_id_}};
  auto res = cli.Post("/query", body.dump(), "application/json");
  if (!res) {
    throw GatewayUnavailable("gateway " + impl_->host + ":" + std::to_string(impl_->port) +
                             " unreachable: " + httplib::to_string(res.error()));
  }
  if (res->status == 429) throw QuotaExceeded(res->body);
  if (res->status == 400) throw ShapeError(res->body);
  if (res->status != 200) {
    throw GatewayUnavailable("gateway returned HTTP " + std::to_string(res->status));
  }
  const json j = json::parse(res->body);
  return {png_from_base64(j.at("image").get<std::string>(), 3), j.at("warning").get<bool>(),
          j.value("query_id", std::string())};
}

json HttpClient::health() {
  httplib::Client cli(impl_->host, impl_->port);
  auto res = cli.Get("/health");
  if (!res || res->status != 200) throw GatewayUnavailable("health check failed");
  return json::parse(res->body);
}

struct HttpServer::Impl {
  httplib::Server svr;
};

HttpServer::HttpServer(ONet& onet) : impl_(std::make_unique<Impl>()), onet_(onet) {
  auto& svr = impl_->svr;
  svr.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(onet_.health().dump(), "application/json");
  });
  svr.Post("/query", [this](const httplib::Request& req, httplib::Response& res) {
    auto fail = [&](int status, const std::string& msg) {
      res.status = status;
      res.set_content(json{{"error", msg}}.dump(), "application/json");
    };
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return fail(400, "body is not JSON");
    }
    if (!body.contains("image") || !body["image"].is_string()) {
      return fail(400, "missing field: image");
    }
    const std::string client = body.value("client_id", std::string("anonymous"));
    try {
      const ImageTensor a = png_from_base64(body["image"].get<std::string>(), 3);
      const QueryResponse r = onet_.query(a, client);
      res.set_content(json{{"image", png_base64(r.image)},
                           {"warning", r.warning},
                           {"query_id", r.query_id}}
                          .dump(),
                      "application/json");
    } catch (const QuotaExceeded& e) {
      fail(429, e.what());
    } catch (const std::invalid_argument& e) {
      fail(400, e.what());
    } catch (const std::domain_error& e) {
      fail(400, e.what());
    }
  });
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::bind() {
  const auto& cfg = onet_.config();
  const int want = cfg.port();
  if (want == 0) {
    port_ = impl_->svr.bind_to_any_port(cfg.host());
    if (port_ <= 0) throw std::runtime_error("cannot bind " + cfg.host());
  } else {
    if (!impl_->svr.bind_to_port(cfg.host(), want)) {
      throw std::runtime_error("cannot bind " + cfg.bind_address + " (port in use?)");
    }
    port_ = want;
  }
}

void HttpServer::start() {
  bind();
  thread_ = std::thread([this] { impl_->svr.listen_after_bind(); });
  impl_->svr.wait_until_ready();
}

void HttpServer::run() {
  bind();
  impl_->svr.listen_after_bind();
}

void HttpServer::stop() {
  impl_->svr.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace wmlab
