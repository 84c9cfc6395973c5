#pragma once

// Serialisation of evaluation results: structured JSON documents that parse
// back into the same structures, and aligned plain-text tables for reading.

#include <string>
#include <vector>

#include <json.hpp>

#include "crm/detector_lab.hpp"

namespace crm {

class TextTable {
 public:
  explicit TextTable(std::vector<std::string> headers);

  void add_row(std::vector<std::string> cells);
  std::string render() const;

 private:
  std::vector<std::string> headers_;
  std::vector<std::vector<std::string>> rows_;
};

// Fixed-point with `digits` decimals; signed adds an explicit '+'.
std::string fmt(double value, int digits = 3);
std::string fmt_signed(double value, int digits = 3);

nlohmann::json report_to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const nlohmann::json& doc);
std::string format_report(const EvaluationReport& report);

nlohmann::json ablation_to_json(const AblationTable& table);
AblationTable ablation_from_json(const nlohmann::json& doc);
std::string format_ablation(const AblationTable& table);

nlohmann::json sweep_to_json(const std::vector<SweepRow>& rows, const std::string& key_name);
std::vector<SweepRow> sweep_from_json(const nlohmann::json& doc);
std::string format_sweep(const std::vector<SweepRow>& rows, const std::string& key_name,
                         const std::string& key_prefix = "");

nlohmann::json delta_table_to_json(const DeltaTable& table);
DeltaTable delta_table_from_json(const nlohmann::json& doc);
std::string format_delta_table(const DeltaTable& table);

nlohmann::json permutation_to_json(const std::vector<double>& aucs);
std::string format_permutation(const std::vector<double>& aucs);

}  // namespace crm
