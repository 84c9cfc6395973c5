#include "crm/audit_service.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include <httplib.h>

#include "crm/digest.hpp"
#include "crm/error.hpp"

namespace crm {

using nlohmann::json;

AnomalyResult score_anomaly(std::span<const double> lts, const CalibrationArtifact& artifact, double z_threshold,
                            double display_threshold) {
  if (lts.size() != artifact.size())
    throw ShapeMismatch("artifact/request disagreement: trajectory has " + std::to_string(lts.size()) +
                        " values, artifact has " + std::to_string(artifact.size()) + " layers");
  AnomalyResult out;
  double total = 0.0;
  std::size_t scored = 0;
  for (std::size_t i = 0; i < lts.size(); ++i) {
    const LayerStats& st = artifact.lts_stats[i];
    const std::size_t layer = artifact.directions[i].layer_index;
    if (!(st.std > 0.0)) {
      out.excluded_layers.push_back(layer);
      continue;
    }
    const double z = std::abs(lts[i] - st.mean) / st.std;
    total += z;
    ++scored;
    if (z > z_threshold) out.flag = true;
    if (std::abs(lts[i]) > display_threshold) out.flagged_layers.push_back(layer);
  }
  out.score = scored > 0 ? total / static_cast<double>(scored) : 0.0;
  return out;
}

// --- requests and records -------------------------------------------------

namespace {

std::vector<double> numbers(const json& node, const std::string& what) {
  if (!node.is_array()) throw InvalidInput(what + " must be an array of numbers");
  std::vector<double> out;
  out.reserve(node.size());
  for (const auto& v : node) {
    if (!v.is_number()) throw InvalidInput(what + " must contain only numbers");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw InvalidInput(what + " must contain finite numbers");
    out.push_back(x);
  }
  return out;
}

std::vector<std::vector<double>> matrix(const json& node, const std::string& what) {
  if (!node.is_array() || node.empty()) throw InvalidInput(what + " must be a non-empty array of rows");
  std::vector<std::vector<double>> rows;
  rows.reserve(node.size());
  for (const auto& row : node) rows.push_back(numbers(row, what + " row"));
  return rows;
}

}  // namespace

AuditRequest AuditRequest::from_json(const json& doc) {
  if (!doc.is_object()) throw InvalidInput("audit request must be a JSON object");
  for (const auto& [key, value] : doc.items())
    if (key != "context" && key != "query" && key != "displacements" && key != "lts")
      throw InvalidInput("unknown audit request field '" + key + "'");
  const bool has_context = doc.contains("context");
  const bool has_query = doc.contains("query");
  if (has_context != has_query) throw InvalidInput("text audits need both 'context' and 'query'");
  const int variants = (has_context ? 1 : 0) + (doc.contains("displacements") ? 1 : 0) + (doc.contains("lts") ? 1 : 0);
  if (variants != 1)
    throw InvalidInput("audit request must carry exactly one of {context, query}, displacements, lts");

  AuditRequest req;
  if (has_context) {
    if (!doc["context"].is_string() || !doc["query"].is_string())
      throw InvalidInput("'context' and 'query' must be strings");
    req.payload = TextPayload{doc["context"].get<std::string>(), doc["query"].get<std::string>()};
  } else if (doc.contains("displacements")) {
    req.payload = DisplacementPayload{matrix(doc["displacements"], "displacements")};
  } else {
    req.payload = LtsPayload{numbers(doc["lts"], "lts")};
  }
  return req;
}

json AuditRequest::to_json() const {
  return std::visit(
      [](const auto& p) -> json {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, TextPayload>) return {{"context", p.context}, {"query", p.query}};
        else if constexpr (std::is_same_v<T, DisplacementPayload>) return {{"displacements", p.rows}};
        else return {{"lts", p.values}};
      },
      payload);
}

std::string AuditRequest::kind() const {
  switch (payload.index()) {
    case 0: return "text";
    case 1: return "displacements";
    default: return "lts";
  }
}

json record_to_json(const AuditRecord& r) {
  json doc{{"record_id", r.record_id},
           {"timestamp", r.timestamp},
           {"request_digest", r.request_digest},
           {"request_kind", r.request_kind},
           {"lts_trajectory", r.lts_trajectory},
           {"trajectory_layers", r.trajectory_layers},
           {"anomaly_score", r.anomaly_score},
           {"anomaly_flag", r.anomaly_flag},
           {"flagged_layers", r.flagged_layers},
           {"excluded_layers", r.excluded_layers},
           {"latency_ms", r.latency_ms}};
  if (r.context) doc["context"] = *r.context;
  if (r.query) doc["query"] = *r.query;
  return doc;
}

AuditRecord record_from_json(const json& doc) {
  try {
    AuditRecord r;
    r.record_id = doc.at("record_id").get<std::string>();
    r.timestamp = doc.at("timestamp").get<std::string>();
    r.request_digest = doc.at("request_digest").get<std::string>();
    r.request_kind = doc.at("request_kind").get<std::string>();
    r.lts_trajectory = doc.at("lts_trajectory").get<std::vector<double>>();
    r.trajectory_layers = doc.at("trajectory_layers").get<std::vector<std::size_t>>();
    r.anomaly_score = doc.at("anomaly_score").get<double>();
    r.anomaly_flag = doc.at("anomaly_flag").get<bool>();
    r.flagged_layers = doc.at("flagged_layers").get<std::vector<std::size_t>>();
    r.excluded_layers = doc.at("excluded_layers").get<std::vector<std::size_t>>();
    r.latency_ms = doc.at("latency_ms").get<double>();
    if (doc.contains("context")) r.context = doc["context"].get<std::string>();
    if (doc.contains("query")) r.query = doc["query"].get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed audit record: ") + e.what());
  }
}

// --- extractor client -----------------------------------------------------

HttpExtractorClient::HttpExtractorClient(std::string endpoint, std::chrono::milliseconds deadline)
    : endpoint_(std::move(endpoint)), deadline_(deadline) {
  while (!endpoint_.empty() && endpoint_.back() == '/') endpoint_.pop_back();
}

ExtractResult HttpExtractorClient::extract(const std::string& context, const std::string& query) {
  httplib::Client client(endpoint_);
  if (!client.is_valid()) throw ExtractorUnavailable("extractor unavailable: invalid endpoint '" + endpoint_ + "'");
  const auto secs = deadline_.count() / 1000;
  const auto usecs = (deadline_.count() % 1000) * 1000;
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);

  const std::string body = json{{"context", context}, {"query", query}}.dump();
  const auto res = client.Post("/extract", body, "application/json");
  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout)
      throw UpstreamTimeout("upstream timeout: extractor did not answer within " + std::to_string(deadline_.count()) +
                            " ms");
    throw ExtractorUnavailable("extractor unavailable: " + httplib::to_string(err));
  }
  if (res->status != 200)
    throw ExtractorUnavailable("extractor unavailable: /extract answered HTTP " + std::to_string(res->status));
  try {
    const json doc = json::parse(res->body);
    ExtractResult out;
    out.displacements = matrix(doc.at("displacements"), "extractor displacements");
    out.model_name = doc.at("model_name").get<std::string>();
    return out;
  } catch (const json::exception& e) {
    throw ExtractorUnavailable(std::string("extractor unavailable: malformed /extract response: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ExtractorUnavailable(std::string("extractor unavailable: ") + e.what());
  }
}

// --- audit log ------------------------------------------------------------

AuditLog::AuditLog(std::filesystem::path path) : path_(std::move(path)) {
  if (std::filesystem::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0, good_end = 0, line_no = 0;
    while (pos < content.size()) {
      const std::size_t nl = content.find('\n', pos);
      const bool complete = nl != std::string::npos;
      const std::string line = content.substr(pos, complete ? nl - pos : std::string::npos);
      ++line_no;
      if (!complete) break;  // torn tail: dropped below
      if (!line.empty()) {
        try {
          records_.push_back(record_from_json(json::parse(line)));
        } catch (const std::exception& e) {
          throw InvalidInput("audit log " + path_.string() + " line " + std::to_string(line_no) +
                             " is unreadable: " + e.what());
        }
      }
      pos = nl + 1;
      good_end = pos;
    }
    if (good_end < content.size()) std::filesystem::resize_file(path_, good_end);
  } else if (path_.has_parent_path()) {
    std::filesystem::create_directories(path_.parent_path());
  }
  out_.open(path_, std::ios::binary | std::ios::app);
  if (!out_) throw InvalidInput("cannot open audit log " + path_.string() + " for appending");
}

void AuditLog::append(const AuditRecord& record) {
  out_ << record_to_json(record).dump() << '\n';
  out_.flush();
  if (!out_) throw Error("failed to write audit log " + path_.string());
  records_.push_back(record);
}

void AuditLog::flush() { out_.flush(); }

// --- service --------------------------------------------------------------

json stats_to_json(const ServerStats& s) {
  return json{{"model_name", s.model_name},
              {"num_layers", s.num_layers},
              {"hidden_dim", s.hidden_dim},
              {"trajectory_length", s.trajectory_length},
              {"total_requests", s.total_requests},
              {"total_anomalies", s.total_anomalies},
              {"failed_requests", s.failed_requests},
              {"uptime_s", s.uptime_s},
              {"z_threshold", s.z_threshold},
              {"display_threshold", s.display_threshold},
              {"artifact_fingerprint", s.artifact_fingerprint}};
}

AuditService::AuditService(std::optional<CalibrationArtifact> artifact, ServiceConfig config,
                           std::unique_ptr<ExtractorClient> extractor)
    : artifact_(std::move(artifact)),
      fingerprint_(artifact_ ? artifact_fingerprint(*artifact_) : std::string()),
      config_(std::move(config)),
      extractor_(std::move(extractor)),
      started_(std::chrono::steady_clock::now()),
      log_(config_.log_path) {
  next_id_ = log_.records().size();
  for (const auto& r : log_.records())
    if (r.anomaly_flag) ++anomalies_;
}

std::vector<double> AuditService::trajectory_for(const AuditRequest& request) {
  const CalibrationArtifact& art = *artifact_;
  auto project = [&](const std::vector<std::vector<double>>& rows) {
    if (rows.size() != art.num_layers)
      throw ShapeMismatch("artifact/request disagreement: displacements have " + std::to_string(rows.size()) +
                          " layers, artifact expects " + std::to_string(art.num_layers));
    for (const auto& row : rows)
      if (row.size() != art.hidden_dim)
        throw ShapeMismatch("artifact/request disagreement: displacement row has " + std::to_string(row.size()) +
                            " values, artifact hidden_dim is " + std::to_string(art.hidden_dim));
    std::vector<double> lts;
    lts.reserve(art.size());
    for (const auto& dir : art.directions) lts.push_back(project_displacement(rows[dir.layer_index], dir));
    return lts;
  };

  if (const auto* lts = std::get_if<LtsPayload>(&request.payload)) return lts->values;
  if (const auto* disp = std::get_if<DisplacementPayload>(&request.payload)) return project(disp->rows);

  const auto& text = std::get<TextPayload>(request.payload);
  if (!extractor_) throw ExtractorUnavailable("extractor unavailable: no extractor endpoint configured");
  const ExtractResult extracted = extractor_->extract(text.context, text.query);
  if (extracted.model_name != art.model_name)
    throw ShapeMismatch("artifact/request disagreement: extractor serves model '" + extracted.model_name +
                        "', artifact was calibrated on '" + art.model_name + "'");
  return project(extracted.displacements);
}

AuditRecord AuditService::handle_audit(const AuditRequest& request) {
  const auto start = std::chrono::steady_clock::now();
  if (!artifact_) throw ExtractorUnavailable("service degraded: no calibration artifact loaded");

  AuditRecord rec;
  rec.lts_trajectory = trajectory_for(request);
  const AnomalyResult scored =
      score_anomaly(rec.lts_trajectory, *artifact_, config_.z_threshold, config_.display_threshold);
  rec.request_kind = request.kind();
  rec.request_digest = sha256_hex(request.to_json().dump());
  if (config_.retain_text)
    if (const auto* text = std::get_if<TextPayload>(&request.payload)) {
      rec.context = text->context;
      rec.query = text->query;
    }
  rec.trajectory_layers = artifact_->selected_layers();
  rec.anomaly_score = scored.score;
  rec.anomaly_flag = scored.flag;
  rec.flagged_layers = scored.flagged_layers;
  rec.excluded_layers = scored.excluded_layers;
  rec.timestamp = utc_timestamp();

  std::lock_guard lock(mutex_);
  char id[32];
  std::snprintf(id, sizeof(id), "rec-%08llu", static_cast<unsigned long long>(next_id_));
  rec.record_id = id;
  rec.latency_ms = std::max(
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count(), 1e-6);
  log_.append(rec);
  ++next_id_;
  if (rec.anomaly_flag) ++anomalies_;
  return rec;
}

std::vector<AuditRecord> AuditService::history(std::size_t limit, std::size_t offset) const {
  std::lock_guard lock(mutex_);
  const auto& all = log_.records();
  std::vector<AuditRecord> out;
  if (offset >= all.size()) return out;
  const std::size_t available = all.size() - offset;
  const std::size_t count = std::min(limit, available);
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(all[all.size() - 1 - offset - i]);
  return out;
}

ServerStats AuditService::stats() const {
  ServerStats s;
  if (artifact_) {
    s.model_name = artifact_->model_name;
    s.num_layers = artifact_->num_layers;
    s.hidden_dim = artifact_->hidden_dim;
    s.trajectory_length = artifact_->size();
  }
  s.artifact_fingerprint = fingerprint_;
  s.z_threshold = config_.z_threshold;
  s.display_threshold = config_.display_threshold;
  s.failed_requests = failures_.load();
  s.uptime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  std::lock_guard lock(mutex_);
  s.total_requests = log_.records().size();
  s.total_anomalies = anomalies_;
  return s;
}

void AuditService::note_failure() { ++failures_; }

void AuditService::flush() {
  std::lock_guard lock(mutex_);
  log_.flush();
}

// --- HTTP -----------------------------------------------------------------

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, json{{"error", message}});
}

std::size_t query_size(const httplib::Request& req, const char* name, std::size_t fallback) {
  if (!req.has_param(name)) return fallback;
  const std::string v = req.get_param_value(name);
  if (v.empty() || v.size() > 9 || !std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw InvalidInput(std::string("query parameter '") + name + "' must be a non-negative integer");
  return std::stoul(v);
}

}  // namespace

AuditServer::AuditServer(AuditService& service, std::string host, int port)
    : service_(service), host_(std::move(host)), port_(port), server_(std::make_unique<httplib::Server>()) {
  server_->new_task_queue = [] { return new httplib::ThreadPool(16); };
  server_->set_tcp_nodelay(true);
  install_routes();
}

AuditServer::~AuditServer() { stop(); }

void AuditServer::install_routes() {
  server_->Post("/audit", [this](const httplib::Request& req, httplib::Response& res) {
    try {
      json doc;
      try {
        doc = json::parse(req.body);
      } catch (const json::exception& e) {
        throw InvalidInput(std::string("request body is not valid JSON: ") + e.what());
      }
      const AuditRecord rec = service_.handle_audit(AuditRequest::from_json(doc));
      send_json(res, 200, record_to_json(rec));
    } catch (const InvalidInput& e) {
      service_.note_failure();
      send_error(res, 400, e.what());
    } catch (const ShapeMismatch& e) {
      service_.note_failure();
      send_error(res, 422, e.what());
    } catch (const UpstreamTimeout& e) {
      service_.note_failure();
      send_error(res, 504, e.what());
    } catch (const ExtractorUnavailable& e) {
      service_.note_failure();
      send_error(res, 503, e.what());
    } catch (const std::exception& e) {
      service_.note_failure();
      send_error(res, 500, e.what());
    }
  });

  server_->Get("/history", [this](const httplib::Request& req, httplib::Response& res) {
    try {
      const std::size_t limit = query_size(req, "limit", 20);
      const std::size_t offset = query_size(req, "offset", 0);
      json records = json::array();
      for (const auto& r : service_.history(limit, offset)) records.push_back(record_to_json(r));
      send_json(res, 200,
                json{{"records", std::move(records)},
                     {"total", service_.stats().total_requests},
                     {"limit", limit},
                     {"offset", offset}});
    } catch (const InvalidInput& e) {
      send_error(res, 400, e.what());
    }
  });

  server_->Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, stats_to_json(service_.stats()));
  });

  server_->Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    if (service_.healthy())
      send_json(res, 200, json{{"status", "ok"}, {"model_name", service_.artifact()->model_name}});
    else
      send_json(res, 503, json{{"status", "degraded"}, {"reason", "no calibration artifact loaded"}});
  });

  server_->Get("/", [this](const httplib::Request&, httplib::Response& res) {
    const auto& path = service_.config().dashboard_path;
    std::ifstream in(path, std::ios::binary);
    if (path.empty() || !in) {
      send_error(res, 404, "no dashboard configured");
      return;
    }
    std::string html((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    res.set_content(html, "text/html; charset=utf-8");
  });
}

void AuditServer::start() {
  if (port_ == 0) {
    port_ = server_->bind_to_any_port(host_);
    if (port_ < 0) throw Error("cannot bind " + host_ + " on any port");
  } else if (!server_->bind_to_port(host_, port_)) {
    throw Error("cannot bind " + host_ + ":" + std::to_string(port_));
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void AuditServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
  service_.flush();
}

std::unique_ptr<AuditService> make_service(const ServiceConfig& config) {
  if (config.artifact_path.empty()) throw InvalidInput("no calibration artifact configured (--artifact)");
  if (!std::filesystem::exists(config.artifact_path))
    throw InvalidInput("calibration artifact not found: " + config.artifact_path.string());
  CalibrationArtifact artifact = load_artifact(config.artifact_path);
  std::unique_ptr<ExtractorClient> extractor;
  if (!config.extractor_endpoint.empty())
    extractor = std::make_unique<HttpExtractorClient>(
        config.extractor_endpoint,
        std::chrono::milliseconds(static_cast<long long>(std::llround(config.extractor_timeout_s * 1000.0))));
  return std::make_unique<AuditService>(std::move(artifact), config, std::move(extractor));
}

}  // namespace crm
