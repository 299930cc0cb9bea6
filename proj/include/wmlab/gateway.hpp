#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "wmlab/image.hpp"
#include "wmlab/victim.hpp"

namespace wmlab {

struct GatewayConfig {
  bool screener_enabled = false;
  double screener_threshold = 0.0;  // RMS pixel distance
  std::optional<long> max_queries_per_client;  // unset = unlimited
  std::string bind_address = "127.0.0.1:8080";
  /// Flagged queries still get the input back, but without the warning bit.
  bool silent_warning = false;
  std::filesystem::path query_log;  // empty = no persistent log

  /// Throws std::invalid_argument when the screener is on with threshold <= 0.
  void validate() const;
  std::string host() const;
  int port() const;
};

void to_json(nlohmann::json& j, const GatewayConfig& c);
void from_json(const nlohmann::json& j, GatewayConfig& c);

/// One gateway transaction. Never carries an image.
struct QueryRecord {
  std::string query_id;
  std::string client_id;
  std::string input_hash;
  std::string response_hash;
  double screener_distance = 0.0;
  bool flagged = false;
  std::string timestamp;
};

void to_json(nlohmann::json& j, const QueryRecord& r);
void from_json(const nlohmann::json& j, QueryRecord& r);

class QuotaExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GatewayUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Append-only JSON-lines log with serialized writes.
class QueryLog {
 public:
  explicit QueryLog(const std::filesystem::path& file);
  void append(const QueryRecord& r);
  static std::vector<QueryRecord> read(const std::filesystem::path& file);

 private:
  std::mutex mu_;
  std::ofstream out_;
};

struct ScreenVerdict {
  bool flagged = false;
  double distance = 0.0;
};

/// RMS distance between `a` and GNet(a).
double screen_distance(const nn::Network& gnet, const ImageTensor& a);
/// Flags `a` when its distance is strictly below `threshold` (> 0).
ScreenVerdict screen_query(const VictimBundle& bundle, const ImageTensor& a,
                           double threshold);
/// Half of the 20th percentile of screen distances over genuine queries.
double calibrate_threshold(const VictimBundle& bundle,
                           const std::vector<ImageTensor>& genuine);

struct QueryResponse {
  ImageTensor image;
  bool warning = false;
  std::string query_id;
};

/// The black-box operation network HNet(GNet(a), delta). Responses are
/// rounded to 8 bits so in-process and HTTP callers see identical pixels.
/// Thread-safe: weights are read-only, budgets are atomic, the log serializes.
class ONet {
 public:
  ONet(const VictimBundle& bundle, GatewayConfig config);

  QueryResponse query(const ImageTensor& a, const std::string& client_id);

  const GatewayConfig& config() const { return config_; }
  nlohmann::json health() const;
  long queries_served() const { return served_.load(); }
  long queries_flagged() const { return flagged_.load(); }

 private:
  std::atomic<long>& budget_for(const std::string& client_id);

  const VictimBundle& bundle_;
  GatewayConfig config_;
  std::string bundle_hash_;
  std::unique_ptr<QueryLog> log_;
  std::mutex budgets_mu_;
  std::map<std::string, std::unique_ptr<std::atomic<long>>> budgets_;
  std::atomic<long> next_id_{0};
  std::atomic<long> served_{0};
  std::atomic<long> flagged_{0};
};

/// What an attacker holds: a way to send images and read responses.
class GatewayClient {
 public:
  virtual ~GatewayClient() = default;
  /// Throws QuotaExceeded, ShapeError or GatewayUnavailable.
  virtual QueryResponse query(const ImageTensor& a) = 0;
};

class InProcessClient : public GatewayClient {
 public:
  InProcessClient(ONet& onet, std::string client_id)
      : onet_(onet), client_id_(std::move(client_id)) {}
  QueryResponse query(const ImageTensor& a) override;

 private:
  ONet& onet_;
  std::string client_id_;
};

class HttpClient : public GatewayClient {
 public:
  HttpClient(std::string host, int port, std::string client_id);
  ~HttpClient() override;
  QueryResponse query(const ImageTensor& a) override;
  nlohmann::json health();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string client_id_;
};

/// HTTP front end: POST /query, GET /health.
class HttpServer {
 public:
  explicit HttpServer(ONet& onet);
  ~HttpServer();
  /// Binds (port 0 picks a free port) and serves on a background thread.
  void start();
  /// Serves on the calling thread until stop().
  void run();
  void stop();
  int port() const { return port_; }

 private:
  void bind();
  struct Impl;
  std::unique_ptr<Impl> impl_;
  ONet& onet_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace wmlab
