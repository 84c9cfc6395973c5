#include "crm/calibration.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "crm/digest.hpp"
#include "crm/error.hpp"

namespace crm {

using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto begin = s.find_first_not_of(" \t");
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(" \t");
  return std::string(s.substr(begin, end - begin + 1));
}

LayerDirection fit_direction(const Eigen::MatrixXd& disp, std::span<const int> labels, const DirectionSpec& spec,
                             std::size_t layer) {
  switch (spec.kind) {
    case DirectionKind::pc1: return pc1_direction(disp, layer);
    case DirectionKind::pc_rank: return pc_rank_direction(disp, spec.rank, layer);
    case DirectionKind::supervised: return supervised_direction(disp, labels, layer);
  }
  throw InvalidInput("unknown direction kind");
}

LayerStats lts_stats(const Eigen::MatrixXd& disp, const LayerDirection& dir) {
  const Eigen::Map<const Eigen::VectorXd> v(dir.v.data(), static_cast<Eigen::Index>(dir.v.size()));
  const Eigen::VectorXd lts = disp * v;
  LayerStats st;
  st.mean = lts.mean();
  st.std = std::sqrt((lts.array() - st.mean).square().sum() / static_cast<double>(lts.size()));
  return st;
}

// Directions and stats for `layers`, fitted on `calibration`.
void fit_layers(const Dataset& calibration, std::span<const std::size_t> layers, const DirectionSpec& spec,
                CalibrationArtifact& artifact) {
  const std::vector<int> labels = calibration.labels();
  artifact.directions.clear();
  artifact.lts_stats.clear();
  for (std::size_t layer : layers) {
    const Eigen::MatrixXd disp = layer_displacements(calibration, layer);
    LayerDirection dir = fit_direction(disp, labels, spec, layer);
    artifact.lts_stats.push_back(lts_stats(disp, dir));
    artifact.directions.push_back(std::move(dir));
  }
}

json artifact_body(const CalibrationArtifact& a) {
  json layers = json::array();
  for (std::size_t i = 0; i < a.directions.size(); ++i) {
    const LayerDirection& d = a.directions[i];
    layers.push_back({
        {"layer_index", d.layer_index},
        {"kind", to_string(d.kind)},
        {"rank", d.rank},
        {"explained_variance_ratio",
         d.explained_variance_ratio ? json(*d.explained_variance_ratio) : json(nullptr)},
        {"direction", d.v},
        {"lts_mean", a.lts_stats[i].mean},
        {"lts_std", a.lts_stats[i].std},
    });
  }
  return json{
      {"format", "crm-calibration-artifact"},
      {"version", 1},
      {"model_name", a.model_name},
      {"num_layers", a.num_layers},
      {"hidden_dim", a.hidden_dim},
      {"seed", a.seed},
      {"n_cal", a.n_cal},
      {"variance_ratio_threshold", a.variance_ratio_threshold},
      {"score_mode", to_string(a.score_mode)},
      {"layer_scores", a.layer_scores},
      {"layers", std::move(layers)},
      {"calibration_ids", a.calibration_ids},
  };
}

}  // namespace

std::vector<std::size_t> CalibrationArtifact::selected_layers() const {
  std::vector<std::size_t> out;
  out.reserve(directions.size());
  for (const auto& d : directions) out.push_back(d.layer_index);
  return out;
}

DirectionSpec DirectionSpec::parse(std::string_view text) {
  const std::string t = lower(trim(text));
  if (t == "pc1") return {DirectionKind::pc1, 1};
  if (t == "supervised") return {DirectionKind::supervised, 0};
  const std::string prefix = "pc-rank:";
  if (t.rfind(prefix, 0) == 0) {
    const std::string num = t.substr(prefix.size());
    std::size_t consumed = 0;
    unsigned long r = 0;
    try {
      r = std::stoul(num, &consumed);
    } catch (const std::exception&) {
      consumed = 0;
    }
    if (consumed != num.size() || num.empty() || r == 0)
      throw InvalidInput("direction 'pc-rank:<r>' needs a positive integer rank");
    return {r == 1 ? DirectionKind::pc1 : DirectionKind::pc_rank, r};
  }
  throw InvalidInput("unknown direction '" + std::string(text) + "' (expected pc1, supervised or pc-rank:<r>)");
}

std::string DirectionSpec::to_string() const {
  switch (kind) {
    case DirectionKind::pc1: return "pc1";
    case DirectionKind::supervised: return "supervised";
    case DirectionKind::pc_rank: return "pc-rank:" + std::to_string(rank);
  }
  return "unknown";
}

CalibrationArtifact calibrate(const Dataset& dataset, const CalibrationConfig& config) {
  const CalibrationSplit split = split_calibration(dataset, config.n_cal, config.seed);
  const LayerSelection selection = select_target_layers(split.calibration, config.threshold, config.score_mode);
  if (selection.layers.empty())
    throw DegenerateInput("no layer exceeds the variance-ratio threshold " + std::to_string(config.threshold));

  CalibrationArtifact a;
  a.model_name = dataset.header.model_name;
  a.num_layers = dataset.header.num_layers;
  a.hidden_dim = dataset.header.hidden_dim;
  a.seed = config.seed;
  a.n_cal = config.n_cal;
  a.variance_ratio_threshold = config.threshold;
  a.score_mode = config.score_mode;
  a.layer_scores = selection.scores;
  for (const auto& s : split.calibration.samples) a.calibration_ids.push_back(s.sample_id);
  fit_layers(split.calibration, selection.layers, config.direction, a);
  return a;
}

CalibrationArtifact refit_directions(const Dataset& dataset, const CalibrationArtifact& base,
                                     const DirectionSpec& spec) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) index.emplace(dataset.samples[i].sample_id, i);
  std::vector<std::size_t> rows;
  rows.reserve(base.calibration_ids.size());
  for (const auto& id : base.calibration_ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw InvalidInput("calibration sample '" + id + "' not present in trace");
    rows.push_back(it->second);
  }
  const Dataset calibration = subset(dataset, rows);
  CalibrationArtifact out = base;
  const std::vector<std::size_t> layers = base.selected_layers();
  fit_layers(calibration, layers, spec, out);
  return out;
}

json artifact_to_json(const CalibrationArtifact& artifact) {
  json doc = artifact_body(artifact);
  doc["fingerprint"] = sha256_hex(doc.dump());
  return doc;
}

std::string artifact_fingerprint(const CalibrationArtifact& artifact) {
  return sha256_hex(artifact_body(artifact).dump());
}

CalibrationArtifact artifact_from_json(const json& doc) {
  CalibrationArtifact a;
  try {
    if (doc.at("format").get<std::string>() != "crm-calibration-artifact")
      throw InvalidInput("not a calibration artifact document");
    if (doc.at("version").get<int>() != 1) throw InvalidInput("unsupported artifact version");
    a.model_name = doc.at("model_name").get<std::string>();
    a.num_layers = doc.at("num_layers").get<std::uint32_t>();
    a.hidden_dim = doc.at("hidden_dim").get<std::uint32_t>();
    a.seed = doc.at("seed").get<std::uint64_t>();
    a.n_cal = doc.at("n_cal").get<std::size_t>();
    a.variance_ratio_threshold = doc.at("variance_ratio_threshold").get<double>();
    a.score_mode = layer_score_mode_from_string(doc.at("score_mode").get<std::string>());
    a.layer_scores = doc.at("layer_scores").get<std::vector<double>>();
    a.calibration_ids = doc.at("calibration_ids").get<std::vector<std::string>>();
    for (const json& layer : doc.at("layers")) {
      LayerDirection d;
      d.layer_index = layer.at("layer_index").get<std::size_t>();
      d.kind = direction_kind_from_string(layer.at("kind").get<std::string>());
      d.rank = layer.at("rank").get<std::size_t>();
      if (!layer.at("explained_variance_ratio").is_null())
        d.explained_variance_ratio = layer.at("explained_variance_ratio").get<double>();
      d.v = layer.at("direction").get<std::vector<double>>();
      if (d.v.size() != a.hidden_dim) throw InvalidInput("artifact direction length differs from hidden_dim");
      if (d.layer_index >= a.num_layers) throw InvalidInput("artifact layer index out of range");
      LayerStats st{layer.at("lts_mean").get<double>(), layer.at("lts_std").get<double>()};
      if (!(st.std >= 0.0)) throw InvalidInput("artifact lts_std must be >= 0");
      a.directions.push_back(std::move(d));
      a.lts_stats.push_back(st);
    }
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed calibration artifact: ") + e.what());
  }
  if (doc.contains("fingerprint")) {
    const std::string stored = doc.at("fingerprint").get<std::string>();
    if (stored != artifact_fingerprint(a)) throw InvalidInput("calibration artifact fingerprint mismatch");
  }
  return a;
}

void save_artifact(const CalibrationArtifact& artifact, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << artifact_to_json(artifact).dump(2) << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

CalibrationArtifact load_artifact(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open calibration artifact " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidInput("calibration artifact " + path.string() + " is not valid JSON: " + e.what());
  }
  return artifact_from_json(doc);
}

// --- features -------------------------------------------------------------

LevelSet LevelSet::parse(std::string_view text) {
  LevelSet set{false, false, false};
  std::stringstream ss{std::string(text)};
  std::string item;
  bool any = false;
  while (std::getline(ss, item, ',')) {
    const std::string t = lower(trim(item));
    if (t.empty()) continue;
    if (t == "l1") set.l1 = true;
    else if (t == "l2") set.l2 = true;
    else if (t == "l3") set.l3 = true;
    else if (t == "all") set = {true, true, true};
    else throw InvalidInput("unknown feature level '" + item + "' (expected L1, L2, L3)");
    any = true;
  }
  if (!any) throw InvalidInput("empty feature level list");
  return set;
}

std::string LevelSet::to_string() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += name;
  };
  add(l1, "L1");
  add(l2, "L2");
  add(l3, "L3");
  return out;
}

std::vector<std::size_t> FeatureLayout::columns(Level level) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (slots[i].level == level) out.push_back(i);
  return out;
}

std::vector<double> FeatureVector::flatten() const {
  std::vector<double> out;
  if (l1) out.push_back(*l1);
  if (l2) out.insert(out.end(), l2->begin(), l2->end());
  out.insert(out.end(), l3.begin(), l3.end());
  return out;
}

FeatureLayout feature_layout(const CalibrationArtifact& artifact, LevelSet levels, const FeatureOptions& options) {
  FeatureLayout layout;
  if (levels.l1) layout.slots.push_back({Level::l1, "semantic_delta", std::nullopt});
  if (levels.l2) {
    static const char* kNames[] = {"kl_mean", "kl_max", "kl_var", "kl_early_late", "kl_trend"};
    const std::size_t count = options.compact_l2 ? 1 : 5;
    for (std::size_t i = 0; i < count; ++i) layout.slots.push_back({Level::l2, kNames[i], std::nullopt});
  }
  if (levels.l3) {
    for (const auto& d : artifact.directions)
      layout.slots.push_back({Level::l3, "lts_L" + std::to_string(d.layer_index), d.layer_index});
  }
  return layout;
}

FeatureVector compute_features(const TraceSample& sample, const CalibrationArtifact& artifact, LevelSet levels,
                               const FeatureOptions& options) {
  FeatureVector fv;
  if (levels.l1) {
    if (!sample.embeddings)
      throw MissingSection("embeddings", "L1 requested but sample '" + sample.sample_id + "' has no embeddings");
    fv.l1 = semantic_delta(std::span<const float>(sample.embeddings->no_context),
                           std::span<const float>(sample.embeddings->with_context));
  }
  if (levels.l2) {
    if (!sample.kl_series)
      throw MissingSection("kl_series", "L2 requested but sample '" + sample.sample_id + "' has no KL series");
    const KlStatistics st = kl_statistics(std::span<const float>(*sample.kl_series), options.early_window);
    if (options.compact_l2) {
      fv.l2 = std::vector<double>{st.mean};
    } else {
      const auto values = st.values();
      fv.l2 = std::vector<double>(values.begin(), values.end());
    }
  }
  if (levels.l3) {
    fv.l3.reserve(artifact.directions.size());
    for (const auto& dir : artifact.directions) {
      if (dir.layer_index >= sample.h0.layers)
        throw InvalidInput("artifact layer " + std::to_string(dir.layer_index) + " not present in sample");
      fv.l3.push_back(lts_project(sample.h0.row(dir.layer_index), sample.hc.row(dir.layer_index), dir));
    }
  }
  return fv;
}

FeatureTable FeatureTable::select_columns(std::span<const std::size_t> columns) const {
  FeatureTable out;
  out.labels = labels;
  out.sample_ids = sample_ids;
  out.values.resize(values.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) {
    if (columns[j] >= layout.size()) throw InvalidInput("feature column out of range");
    out.layout.slots.push_back(layout.slots[columns[j]]);
    out.values.col(static_cast<Eigen::Index>(j)) = values.col(static_cast<Eigen::Index>(columns[j]));
  }
  return out;
}

FeatureTable FeatureTable::select_rows(std::span<const std::size_t> rows) const {
  FeatureTable out;
  out.layout = layout;
  out.values.resize(static_cast<Eigen::Index>(rows.size()), values.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.values.row(static_cast<Eigen::Index>(i)) = values.row(static_cast<Eigen::Index>(rows[i]));
    out.labels.push_back(labels[rows[i]]);
    out.sample_ids.push_back(sample_ids[rows[i]]);
  }
  return out;
}

FeatureTable extract_features(const Dataset& dataset, const CalibrationArtifact& artifact, LevelSet levels,
                              const FeatureOptions& options) {
  if (!levels.l1 && !levels.l2 && !levels.l3) throw InvalidInput("no feature level requested");
  if (levels.l3) {
    if (artifact.hidden_dim != dataset.header.hidden_dim)
      throw InvalidInput("artifact hidden_dim " + std::to_string(artifact.hidden_dim) +
                         " differs from trace hidden_dim " + std::to_string(dataset.header.hidden_dim));
    for (const auto& d : artifact.directions)
      if (d.layer_index >= dataset.header.num_layers)
        throw InvalidInput("artifact layer " + std::to_string(d.layer_index) + " exceeds trace layer count");
  }
  if (levels.l1 && !dataset.header.sections.embeddings)
    throw MissingSection("embeddings", "L1 requested but the trace carries no embeddings section");
  if (levels.l2 && !dataset.header.sections.kl_series)
    throw MissingSection("kl_series", "L2 requested but the trace carries no kl_series section");

  FeatureTable table;
  table.layout = feature_layout(artifact, levels, options);
  table.values.resize(static_cast<Eigen::Index>(dataset.samples.size()),
                      static_cast<Eigen::Index>(table.layout.size()));
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    const std::vector<double> row = compute_features(s, artifact, levels, options).flatten();
    for (std::size_t j = 0; j < row.size(); ++j)
      table.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
    table.labels.push_back(s.label);
    table.sample_ids.push_back(s.sample_id);
  }
  return table;
}

namespace {

std::string level_name(Level level) {
  switch (level) {
    case Level::l1: return "L1";
    case Level::l2: return "L2";
    case Level::l3: return "L3";
  }
  return "?";
}

Level level_from_name(const std::string& name) {
  if (name == "L1") return Level::l1;
  if (name == "L2") return Level::l2;
  if (name == "L3") return Level::l3;
  throw InvalidInput("unknown level '" + name + "'");
}

}  // namespace

json features_to_json(const FeatureTable& table) {
  json layout = json::array();
  for (const auto& slot : table.layout.slots)
    layout.push_back({{"level", level_name(slot.level)},
                      {"name", slot.name},
                      {"layer", slot.layer ? json(*slot.layer) : json(nullptr)}});
  json rows = json::array();
  for (Eigen::Index i = 0; i < table.values.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(table.values.cols()));
    for (Eigen::Index j = 0; j < table.values.cols(); ++j) row[static_cast<std::size_t>(j)] = table.values(i, j);
    rows.push_back(std::move(row));
  }
  return json{{"format", "crm-features"},
              {"layout", std::move(layout)},
              {"sample_ids", table.sample_ids},
              {"labels", table.labels},
              {"values", std::move(rows)}};
}

FeatureTable features_from_json(const json& doc) {
  FeatureTable t;
  try {
    for (const json& slot : doc.at("layout")) {
      FeatureSlot s;
      s.level = level_from_name(slot.at("level").get<std::string>());
      s.name = slot.at("name").get<std::string>();
      if (!slot.at("layer").is_null()) s.layer = slot.at("layer").get<std::size_t>();
      t.layout.slots.push_back(std::move(s));
    }
    t.sample_ids = doc.at("sample_ids").get<std::vector<std::string>>();
    t.labels = doc.at("labels").get<std::vector<int>>();
    const json& rows = doc.at("values");
    t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.layout.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != t.layout.size()) throw InvalidInput("feature row width differs from layout");
      for (std::size_t j = 0; j < rows[i].size(); ++j)
        t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j].get<double>();
    }
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed feature document: ") + e.what());
  }
  if (t.labels.size() != static_cast<std::size_t>(t.values.rows()) || t.sample_ids.size() != t.labels.size())
    throw InvalidInput("feature document row counts disagree");
  return t;
}

Eigen::MatrixXd concatenated_displacements(const Dataset& dataset, std::span<const std::size_t> layers) {
  const auto d = static_cast<Eigen::Index>(dataset.header.hidden_dim);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(dataset.samples.size()),
                      d * static_cast<Eigen::Index>(layers.size()));
  for (std::size_t k = 0; k < layers.size(); ++k)
    out.middleCols(d * static_cast<Eigen::Index>(k), d) = layer_displacements(dataset, layers[k]);
  return out;
}

}  // namespace crm
