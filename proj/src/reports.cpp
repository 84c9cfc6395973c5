#include "crm/reports.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "crm/error.hpp"

namespace crm {

using nlohmann::json;

TextTable::TextTable(std::vector<std::string> headers) : headers_(std::move(headers)) {}

void TextTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != headers_.size()) throw InvalidInput("table row width differs from header");
  rows_.push_back(std::move(cells));
}

std::string TextTable::render() const {
  std::vector<std::size_t> width(headers_.size());
  for (std::size_t c = 0; c < headers_.size(); ++c) width[c] = headers_[c].size();
  for (const auto& row : rows_)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());

  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      // First column left-aligned (labels), the rest right-aligned (numbers).
      const std::size_t pad = width[c] - cells[c].size();
      if (c > 0) out << "  ";
      if (c == 0) out << cells[c] << std::string(pad, ' ');
      else out << std::string(pad, ' ') << cells[c];
    }
    out << '\n';
  };
  line(headers_);
  std::size_t total = 0;
  for (std::size_t w : width) total += w;
  total += 2 * (width.size() - 1);
  out << std::string(total, '-') << '\n';
  for (const auto& row : rows_) line(row);
  return out.str();
}

namespace {

// Values that round to zero print without a sign.
double clean_zero(double value, int digits) {
  return std::abs(value) < 0.5 * std::pow(10.0, -digits) ? 0.0 : value;
}

}  // namespace

std::string fmt(double value, int digits) {
  value = clean_zero(value, digits);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, value);
  return buf;
}

std::string fmt_signed(double value, int digits) {
  value = clean_zero(value, digits);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%+.*f", digits, value);
  return buf;
}

json report_to_json(const EvaluationReport& r) {
  return json{{"format", "crm-evaluation-report"},
              {"version", 1},
              {"tag", r.tag},
              {"classifier", r.classifier},
              {"k", r.k},
              {"fold_seed", r.fold_seed},
              {"per_fold_auc", r.per_fold_auc},
              {"mean_auc", r.mean_auc},
              {"pooled_auc", r.pooled_auc},
              {"ci", {r.ci.lo, r.ci.hi}},
              {"n_boot", r.n_boot},
              {"config_fingerprint", r.config_fingerprint},
              {"oof_scores", r.oof_scores},
              {"fold_of", r.fold_of}};
}

EvaluationReport report_from_json(const json& doc) {
  try {
    if (doc.at("format") != "crm-evaluation-report") throw InvalidInput("not an evaluation report document");
    EvaluationReport r;
    r.tag = doc.at("tag").get<std::string>();
    r.classifier = doc.at("classifier").get<std::string>();
    r.k = doc.at("k").get<std::size_t>();
    r.fold_seed = doc.at("fold_seed").get<std::uint64_t>();
    r.per_fold_auc = doc.at("per_fold_auc").get<std::vector<double>>();
    r.mean_auc = doc.at("mean_auc").get<double>();
    r.pooled_auc = doc.at("pooled_auc").get<double>();
    r.ci = {doc.at("ci").at(0).get<double>(), doc.at("ci").at(1).get<double>()};
    r.n_boot = doc.at("n_boot").get<std::size_t>();
    r.config_fingerprint = doc.at("config_fingerprint").get<std::string>();
    r.oof_scores = doc.at("oof_scores").get<std::vector<double>>();
    r.fold_of = doc.at("fold_of").get<std::vector<std::size_t>>();
    return r;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed evaluation report: ") + e.what());
  }
}

std::string format_report(const EvaluationReport& r) {
  std::ostringstream out;
  out << "Evaluation";
  if (!r.tag.empty()) out << " [" << r.tag << "]";
  out << ": " << r.classifier << ", " << r.k << "-fold stratified CV (seed " << r.fold_seed << ")\n";
  TextTable folds({"Fold", "AUC"});
  for (std::size_t f = 0; f < r.per_fold_auc.size(); ++f) folds.add_row({std::to_string(f), fmt(r.per_fold_auc[f])});
  out << folds.render();
  out << "Mean AUC    " << fmt(r.mean_auc) << '\n';
  out << "Pooled AUC  " << fmt(r.pooled_auc);
  if (r.n_boot > 0) out << " [" << fmt(r.ci.lo) << ", " << fmt(r.ci.hi) << "] (" << r.n_boot << " bootstrap)";
  out << '\n' << "Fingerprint " << r.config_fingerprint << '\n';
  return out.str();
}

json ablation_to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) rows.push_back({{"layer", r.layer}, {"auc", r.auc}, {"delta", r.delta}});
  return json{{"format", "crm-loo-ablation"}, {"full_auc", t.full_auc}, {"rows", std::move(rows)}};
}

AblationTable ablation_from_json(const json& doc) {
  try {
    AblationTable t;
    t.full_auc = doc.at("full_auc").get<double>();
    for (const auto& r : doc.at("rows"))
      t.rows.push_back({r.at("layer").get<std::size_t>(), r.at("auc").get<double>(), r.at("delta").get<double>()});
    return t;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed ablation table: ") + e.what());
  }
}

std::string format_ablation(const AblationTable& t) {
  TextTable table({"Removed layer", "AUC", "Delta AUC"});
  for (const auto& r : t.rows) table.add_row({"L" + std::to_string(r.layer), fmt(r.auc), fmt_signed(r.delta)});
  std::ostringstream out;
  out << "Leave-one-layer-out (full AUC " << fmt(t.full_auc) << ")\n" << table.render();
  if (!t.rows.empty()) {
    const auto best = std::max_element(t.rows.begin(), t.rows.end(),
                                       [](const AblationRow& a, const AblationRow& b) { return a.delta < b.delta; });
    out << "Max delta " << fmt_signed(best->delta) << " (L" << best->layer << ")\n";
  }
  return out.str();
}

json sweep_to_json(const std::vector<SweepRow>& rows, const std::string& key_name) {
  json out = json::array();
  for (const auto& r : rows) out.push_back({{"key", r.key}, {"auc", r.auc}});
  return json{{"format", "crm-sweep"}, {"key_name", key_name}, {"rows", std::move(out)}};
}

std::vector<SweepRow> sweep_from_json(const json& doc) {
  try {
    std::vector<SweepRow> rows;
    for (const auto& r : doc.at("rows")) rows.push_back({r.at("key").get<std::size_t>(), r.at("auc").get<double>()});
    return rows;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed sweep: ") + e.what());
  }
}

std::string format_sweep(const std::vector<SweepRow>& rows, const std::string& key_name,
                         const std::string& key_prefix) {
  TextTable table({key_name, "AUC"});
  for (const auto& r : rows) table.add_row({key_prefix + std::to_string(r.key), fmt(r.auc)});
  return table.render();
}

json delta_table_to_json(const DeltaTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) rows.push_back({{"condition", r.condition}, {"auc", r.auc}, {"delta", r.delta}});
  return json{{"format", "crm-delta-auc"},
              {"clean_tag", t.clean_tag},
              {"clean_auc", t.clean_auc},
              {"rows", std::move(rows)}};
}

DeltaTable delta_table_from_json(const json& doc) {
  try {
    DeltaTable t;
    t.clean_tag = doc.at("clean_tag").get<std::string>();
    t.clean_auc = doc.at("clean_auc").get<double>();
    for (const auto& r : doc.at("rows"))
      t.rows.push_back({r.at("condition").get<std::string>(), r.at("auc").get<double>(), r.at("delta").get<double>()});
    return t;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed delta table: ") + e.what());
  }
}

std::string format_delta_table(const DeltaTable& t) {
  TextTable table({"Condition", "AUC", "Delta AUC"});
  table.add_row({t.clean_tag.empty() ? "clean" : t.clean_tag, fmt(t.clean_auc), "-"});
  for (const auto& r : t.rows) table.add_row({r.condition, fmt(r.auc), fmt_signed(r.delta)});
  return table.render();
}

json permutation_to_json(const std::vector<double>& aucs) {
  return json{{"format", "crm-permutation-control"}, {"aucs", aucs}};
}

std::string format_permutation(const std::vector<double>& aucs) {
  TextTable table({"Shuffle", "Mean AUC"});
  for (std::size_t i = 0; i < aucs.size(); ++i) table.add_row({std::to_string(i), fmt(aucs[i])});
  std::ostringstream out;
  out << table.render();
  if (!aucs.empty()) {
    const double mean = std::accumulate(aucs.begin(), aucs.end(), 0.0) / static_cast<double>(aucs.size());
    double dev = 0.0;
    for (double a : aucs) dev = std::max(dev, std::abs(a - 0.5));
    out << "Permuted AUC " << fmt(mean, 2) << " (max |AUC - 0.50| = " << fmt(dev, 3) << ")\n";
  }
  return out.str();
}

}  // namespace crm
