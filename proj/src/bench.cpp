#include "crm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "crm/error.hpp"
#include "crm/random.hpp"
#include "crm/reports.hpp"

// After the Eigen-based headers: resolv.h (pulled in by httplib) defines _res.
#include <httplib.h>

namespace crm {

using nlohmann::json;

std::string to_string(PayloadKind kind) {
  switch (kind) {
    case PayloadKind::lts: return "lts";
    case PayloadKind::displacements: return "displacements";
    case PayloadKind::text: return "text";
  }
  return "lts";
}

PayloadKind payload_kind_from_string(std::string_view name) {
  if (name == "lts") return PayloadKind::lts;
  if (name == "displacements") return PayloadKind::displacements;
  if (name == "text") return PayloadKind::text;
  throw InvalidInput("unknown payload kind '" + std::string(name) + "' (expected lts, displacements or text)");
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidInput("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

const char* const kContexts[] = {
    "The committee published its findings after a two-year review of regional water use.",
    "A small harbor town rebuilt its lighthouse using stones from the original quarry.",
    "Researchers catalogued the migration routes of several alpine bird species.",
    "The library digitized a collection of nineteenth-century shipping ledgers.",
    "Engineers tested a new bridge design against sustained crosswinds.",
};
const char* const kQueries[] = {
    "What did the review conclude?", "Where did the stones come from?", "Which species were studied?",
    "What was digitized?", "How was the design tested?",
};

json make_payload(PayloadKind kind, Rng& rng, std::size_t num_layers, std::size_t hidden_dim, std::size_t length) {
  switch (kind) {
    case PayloadKind::lts: {
      std::vector<double> lts(length);
      for (double& v : lts) v = 1.5 * rng.normal();
      return {{"lts", lts}};
    }
    case PayloadKind::displacements: {
      std::vector<std::vector<double>> rows(num_layers, std::vector<double>(hidden_dim));
      for (auto& row : rows)
        for (double& v : row) v = rng.normal();
      return {{"displacements", rows}};
    }
    case PayloadKind::text:
      return {{"context", kContexts[rng.uniform_index(std::size(kContexts))]},
              {"query", kQueries[rng.uniform_index(std::size(kQueries))]}};
  }
  return {};
}

}  // namespace

BenchReport run_bench(const BenchConfig& config) {
  if (config.n_requests == 0) throw InvalidInput("bench needs at least one request");
  httplib::Client client(config.endpoint);
  if (!client.is_valid()) throw InvalidInput("invalid server endpoint '" + config.endpoint + "'");
  const auto secs = static_cast<time_t>(config.timeout_s);
  client.set_connection_timeout(secs);
  client.set_read_timeout(secs);
  client.set_keep_alive(true);
  client.set_tcp_nodelay(true);

  const auto stats_res = client.Get("/stats");
  if (!stats_res)
    throw Error("cannot reach audit server at " + config.endpoint + ": " + httplib::to_string(stats_res.error()));
  if (stats_res->status != 200)
    throw Error("audit server /stats answered HTTP " + std::to_string(stats_res->status));
  const json stats = json::parse(stats_res->body);

  BenchReport report;
  report.endpoint = config.endpoint;
  report.kind = config.kind;
  report.model_name = stats.at("model_name").get<std::string>();
  report.trajectory_length = stats.at("trajectory_length").get<std::size_t>();
  const auto num_layers = stats.at("num_layers").get<std::size_t>();
  const auto hidden_dim = stats.at("hidden_dim").get<std::size_t>();

  // Payloads are drawn up front so request timing excludes generation.
  Rng rng(config.seed);
  std::vector<std::string> bodies;
  bodies.reserve(config.n_requests);
  for (std::size_t i = 0; i < config.n_requests; ++i)
    bodies.push_back(make_payload(config.kind, rng, num_layers, hidden_dim, report.trajectory_length).dump());

  std::vector<double> latencies;
  latencies.reserve(config.n_requests);
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& body : bodies) {
    const auto start = std::chrono::steady_clock::now();
    const auto res = client.Post("/audit", body, "application/json");
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (!res) throw Error("audit server connection failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      ++report.n_errors;
      continue;
    }
    latencies.push_back(ms);
    if (json::parse(res->body).at("anomaly_flag").get<bool>()) ++report.n_anomalies;
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  report.n_requests = config.n_requests;
  report.throughput_rps = static_cast<double>(config.n_requests) / wall;
  if (!latencies.empty()) {
    report.mean_ms = std::accumulate(latencies.begin(), latencies.end(), 0.0) / static_cast<double>(latencies.size());
    report.p50_ms = percentile(latencies, 50.0);
    report.p95_ms = percentile(latencies, 95.0);
    report.p99_ms = percentile(latencies, 99.0);
    report.anomaly_rate = static_cast<double>(report.n_anomalies) / static_cast<double>(latencies.size());
  }
  return report;
}

json bench_to_json(const BenchReport& r) {
  return json{{"format", "crm-bench-report"},
              {"endpoint", r.endpoint},
              {"model_name", r.model_name},
              {"payload_kind", to_string(r.kind)},
              {"trajectory_length", r.trajectory_length},
              {"n_requests", r.n_requests},
              {"n_errors", r.n_errors},
              {"throughput_rps", r.throughput_rps},
              {"latency_mean_ms", r.mean_ms},
              {"latency_p50_ms", r.p50_ms},
              {"latency_p95_ms", r.p95_ms},
              {"latency_p99_ms", r.p99_ms},
              {"anomaly_rate", r.anomaly_rate}};
}

std::string format_bench(const BenchReport& r) {
  TextTable t({"Metric", "Value"});
  t.add_row({"Throughput", fmt(r.throughput_rps, 1) + " req/s"});
  t.add_row({"Latency (mean)", fmt(r.mean_ms, 2) + " ms"});
  t.add_row({"Latency (p50)", fmt(r.p50_ms, 2) + " ms"});
  t.add_row({"Latency (p95)", fmt(r.p95_ms, 2) + " ms"});
  t.add_row({"Latency (p99)", fmt(r.p99_ms, 2) + " ms"});
  t.add_row({"Anomaly rate", fmt(100.0 * r.anomaly_rate, 1) + "%"});
  t.add_row({"Model", r.model_name});
  t.add_row({"Features per audit", std::to_string(r.trajectory_length) + " scalars (LTS trajectory)"});
  t.add_row({"Requests", std::to_string(r.n_requests) + " (" + to_string(r.kind) + ", " +
                             std::to_string(r.n_errors) + " errors)"});
  return t.render();
}

}  // namespace crm
