#pragma once

// Real-time audit service: LTS trajectories scored against a calibration
// artifact, a persistent append-only audit log, and the HTTP surface
// (POST /audit, GET /history, GET /stats, GET /health).

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "crm/calibration.hpp"

namespace httplib {
class Server;
}

namespace crm {

struct AnomalyResult {
  double score = 0.0;
  bool flag = false;
  std::vector<std::size_t> flagged_layers;   // model layer indices with |LTS| > display threshold
  std::vector<std::size_t> excluded_layers;  // zero-sigma layers left out of score and z-rule
};

// score = mean over scored layers of |LTS - mu| / sigma; flag when any scored
// layer exceeds z_threshold standard deviations.
AnomalyResult score_anomaly(std::span<const double> lts, const CalibrationArtifact& artifact,
                            double z_threshold = 2.0, double display_threshold = 1.0);

struct TextPayload {
  std::string context;
  std::string query;
};

struct DisplacementPayload {
  std::vector<std::vector<double>> rows;  // one row per model layer
};

struct LtsPayload {
  std::vector<double> values;  // one per selected layer, artifact order
};

struct AuditRequest {
  std::variant<TextPayload, DisplacementPayload, LtsPayload> payload;

  // Exactly one of {context, query} | displacements | lts; anything else is
  // rejected with InvalidInput.
  static AuditRequest from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
  std::string kind() const;
};

struct AuditRecord {
  std::string record_id;
  std::string timestamp;
  std::string request_digest;  // SHA-256 of the canonical request document
  std::string request_kind;
  std::optional<std::string> context;  // only with text retention enabled
  std::optional<std::string> query;
  std::vector<double> lts_trajectory;
  std::vector<std::size_t> trajectory_layers;
  double anomaly_score = 0.0;
  bool anomaly_flag = false;
  std::vector<std::size_t> flagged_layers;
  std::vector<std::size_t> excluded_layers;
  double latency_ms = 0.0;

  bool operator==(const AuditRecord&) const = default;
};

nlohmann::json record_to_json(const AuditRecord& record);
AuditRecord record_from_json(const nlohmann::json& doc);

// Result of the extractor wire contract POST /extract {context, query}.
struct ExtractResult {
  std::vector<std::vector<double>> displacements;
  std::string model_name;
};

class ExtractorClient {
 public:
  virtual ~ExtractorClient() = default;
  // Throws ExtractorUnavailable or UpstreamTimeout.
  virtual ExtractResult extract(const std::string& context, const std::string& query) = 0;
};

class HttpExtractorClient : public ExtractorClient {
 public:
  HttpExtractorClient(std::string endpoint, std::chrono::milliseconds deadline);
  ExtractResult extract(const std::string& context, const std::string& query) override;

 private:
  std::string endpoint_;
  std::chrono::milliseconds deadline_;
};

struct ServiceConfig {
  std::filesystem::path artifact_path;
  std::filesystem::path log_path = "audit_log.jsonl";
  std::string bind_host = "127.0.0.1";
  int port = 8000;
  std::string extractor_endpoint;  // empty: text audits answer 503
  double z_threshold = 2.0;
  double display_threshold = 1.0;
  bool retain_text = false;
  double extractor_timeout_s = 30.0;
  std::filesystem::path dashboard_path;  // served at GET / when set
};

// Append-only JSON-lines log. A torn final line (crash mid-write) is dropped on
// load; any other unreadable line is an error.
class AuditLog {
 public:
  explicit AuditLog(std::filesystem::path path);

  const std::vector<AuditRecord>& records() const { return records_; }
  void append(const AuditRecord& record);
  void flush();
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::vector<AuditRecord> records_;
  std::ofstream out_;
};

struct ServerStats {
  std::string model_name;
  std::uint32_t num_layers = 0;
  std::uint32_t hidden_dim = 0;
  std::size_t trajectory_length = 0;
  std::uint64_t total_requests = 0;
  std::uint64_t total_anomalies = 0;
  std::uint64_t failed_requests = 0;
  double uptime_s = 0.0;
  double z_threshold = 2.0;
  double display_threshold = 1.0;
  std::string artifact_fingerprint;
};

nlohmann::json stats_to_json(const ServerStats& stats);

class AuditService {
 public:
  // `artifact` may be empty, in which case the service reports degraded health
  // and refuses audits.
  AuditService(std::optional<CalibrationArtifact> artifact, ServiceConfig config,
               std::unique_ptr<ExtractorClient> extractor = nullptr);

  AuditRecord handle_audit(const AuditRequest& request);
  std::vector<AuditRecord> history(std::size_t limit, std::size_t offset) const;
  ServerStats stats() const;
  bool healthy() const { return artifact_.has_value(); }
  void note_failure();
  void flush();

  const ServiceConfig& config() const { return config_; }
  const std::optional<CalibrationArtifact>& artifact() const { return artifact_; }

 private:
  std::vector<double> trajectory_for(const AuditRequest& request);

  const std::optional<CalibrationArtifact> artifact_;
  const std::string fingerprint_;
  const ServiceConfig config_;
  std::unique_ptr<ExtractorClient> extractor_;
  const std::chrono::steady_clock::time_point started_;

  mutable std::mutex mutex_;
  AuditLog log_;
  std::uint64_t next_id_ = 0;
  std::uint64_t anomalies_ = 0;
  std::atomic<std::uint64_t> failures_{0};
};

// HTTP front-end over an AuditService. start() binds and serves on a
// background thread; port 0 picks a free port.
class AuditServer {
 public:
  AuditServer(AuditService& service, std::string host, int port);
  ~AuditServer();
  AuditServer(const AuditServer&) = delete;
  AuditServer& operator=(const AuditServer&) = delete;

  void start();
  void stop();
  int port() const { return port_; }

 private:
  void install_routes();

  AuditService& service_;
  std::string host_;
  int port_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

// Loads the artifact (required), opens the log and builds the extractor client
// from `config`; throws with a readable message when the artifact is missing.
std::unique_ptr<AuditService> make_service(const ServiceConfig& config);

}  // namespace crm
