#pragma once

// Load generator for a running audit server: seeded randomized payloads,
// client-side wall-clock latency, and the prototype benchmark table.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace crm {

enum class PayloadKind { lts, displacements, text };

std::string to_string(PayloadKind kind);
PayloadKind payload_kind_from_string(std::string_view name);

struct BenchConfig {
  std::string endpoint = "http://127.0.0.1:8000";
  std::size_t n_requests = 100;
  PayloadKind kind = PayloadKind::lts;
  std::uint64_t seed = 42;
  double timeout_s = 30.0;
};

struct BenchReport {
  std::string endpoint;
  std::string model_name;
  PayloadKind kind = PayloadKind::lts;
  std::size_t trajectory_length = 0;
  std::size_t n_requests = 0;
  std::size_t n_errors = 0;
  std::size_t n_anomalies = 0;
  double throughput_rps = 0.0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double p99_ms = 0.0;
  double anomaly_rate = 0.0;  // over successful requests
};

// Linear-interpolation percentile (q in [0, 100]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

// Throws InvalidInput for n_requests == 0 and Error when the server cannot be
// reached.
BenchReport run_bench(const BenchConfig& config);

nlohmann::json bench_to_json(const BenchReport& report);
std::string format_bench(const BenchReport& report);

}  // namespace crm
