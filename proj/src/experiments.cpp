#include "crm/experiments.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "crm/error.hpp"
#include "crm/random.hpp"
#include "crm/reports.hpp"
#include "crm/synth_oracle.hpp"

namespace crm {

using nlohmann::json;

namespace {

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  out.push_back(cur);
  return out;
}

std::size_t parse_index(const std::string& s) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
    throw InvalidInput("expected a layer index, got '" + s + "'");
  return std::stoul(s);
}

std::size_t smallest_training_fold(const FoldPlan& plan) {
  std::size_t smallest = plan.fold_of.size();
  for (std::size_t f = 0; f < plan.k; ++f) smallest = std::min(smallest, plan.train_indices(f).size());
  return smallest;
}

Eigen::MatrixXd column_of(const Eigen::MatrixXd& m, std::size_t c) { return m.col(static_cast<Eigen::Index>(c)); }

}  // namespace

ControlSelection ControlSelection::all() {
  ControlSelection s;
  s.permutation = s.l3_only = s.loo = s.pca_sweep = s.pc_rank = s.same_topic = s.layer_sweep = s.baselines =
      s.noise = true;
  return s;
}

ControlSelection ControlSelection::parse(std::string_view text) {
  ControlSelection s;
  for (const auto& item : split(text, ',')) {
    if (item.empty() || item == "none") continue;
    if (item == "all") s = all();
    else if (item == "permutation") s.permutation = true;
    else if (item == "l3-only" || item == "l3_only") s.l3_only = true;
    else if (item == "loo") s.loo = true;
    else if (item == "pca-sweep" || item == "pca_sweep") s.pca_sweep = true;
    else if (item == "pc-rank" || item == "pc_rank") s.pc_rank = true;
    else if (item == "same-topic" || item == "same_topic") s.same_topic = true;
    else if (item == "layer-sweep" || item == "layer_sweep") s.layer_sweep = true;
    else if (item == "baselines") s.baselines = true;
    else if (item == "noise") s.noise = true;
    else throw InvalidInput("unknown control '" + item + "'");
  }
  return s;
}

std::string ControlSelection::to_string() const {
  std::vector<std::string> parts;
  if (permutation) parts.push_back("permutation");
  if (l3_only) parts.push_back("l3-only");
  if (loo) parts.push_back("loo");
  if (pca_sweep) parts.push_back("pca-sweep");
  if (pc_rank) parts.push_back("pc-rank");
  if (same_topic) parts.push_back("same-topic");
  if (layer_sweep) parts.push_back("layer-sweep");
  if (baselines) parts.push_back("baselines");
  if (noise) parts.push_back("noise");
  if (parts.empty()) return "none";
  std::string out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out += "," + parts[i];
  return out;
}

bool ControlSelection::any() const {
  return permutation || l3_only || loo || pca_sweep || pc_rank || same_topic || layer_sweep || baselines || noise;
}

NoiseBlock NoiseBlock::parse(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0) throw InvalidInput("noise block must look like name=a-b or name=a,b");
  NoiseBlock block;
  block.name = std::string(text.substr(0, eq));
  for (const auto& part : split(text.substr(eq + 1), ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      block.layers.push_back(parse_index(part));
      continue;
    }
    const std::size_t lo = parse_index(part.substr(0, dash));
    const std::size_t hi = parse_index(part.substr(dash + 1));
    if (hi < lo) throw InvalidInput("noise block range '" + part + "' is reversed");
    for (std::size_t l = lo; l <= hi; ++l) block.layers.push_back(l);
  }
  std::sort(block.layers.begin(), block.layers.end());
  block.layers.erase(std::unique(block.layers.begin(), block.layers.end()), block.layers.end());
  return block;
}

EvaluationReport evaluate_table(const FeatureTable& table, const ExperimentConfig& config, const std::string& tag) {
  const FoldPlan plan = make_folds(table.labels, config.folds, config.fold_seed);
  EvaluationReport report = cross_validate(table.values, table.labels, plan, config.eval);
  report.tag = tag;
  return report;
}

std::vector<LayerProbeRow> layer_sweep(const Dataset& dataset, const ExperimentConfig& config) {
  const auto labels = dataset.labels();
  const FoldPlan plan = make_folds(labels, config.folds, config.fold_seed);
  const std::size_t cap = std::min<std::size_t>(
      {config.probe_components, dataset.header.hidden_dim, smallest_training_fold(plan) - 1});

  std::vector<LayerProbeRow> rows;
  for (std::size_t layer = 0; layer < dataset.header.num_layers; ++layer) {
    const Eigen::MatrixXd disp = layer_displacements(dataset, layer);
    // Every training fold must support the component count; take the smallest rank.
    std::size_t k = cap;
    for (std::size_t f = 0; f < plan.k && k > 0; ++f) {
      const auto train = plan.train_indices(f);
      Eigen::MatrixXd rows_f(static_cast<Eigen::Index>(train.size()), disp.cols());
      for (std::size_t i = 0; i < train.size(); ++i) rows_f.row(static_cast<Eigen::Index>(i)) = disp.row(static_cast<Eigen::Index>(train[i]));
      k = std::min(k, principal_axes(rows_f, 1).rank);
    }
    if (k == 0) {
      rows.push_back({layer, 0, 0.5});
      continue;
    }
    const std::size_t ks[] = {k};
    rows.push_back({layer, k, pca_dim_sweep(disp, labels, plan, ks, config.eval).front().auc});
  }
  return rows;
}

std::vector<SweepRow> pc_rank_sweep(const Dataset& dataset, const CalibrationArtifact& artifact,
                                    const ExperimentConfig& config) {
  EvalConfig quick = config.eval;
  quick.n_boot = 0;
  std::vector<SweepRow> rows;
  for (std::size_t r : config.pc_ranks) {
    DirectionSpec spec;
    spec.kind = r == 1 ? DirectionKind::pc1 : DirectionKind::pc_rank;
    spec.rank = r;
    const CalibrationArtifact refit = refit_directions(dataset, artifact, spec);
    const FeatureTable table = extract_features(dataset, refit, LevelSet{false, false, true}, config.features);
    ExperimentConfig c = config;
    c.eval = quick;
    rows.push_back({r, evaluate_table(table, c).mean_auc});
  }
  return rows;
}

SameTopicResult same_topic_control(const Dataset& dataset, const CalibrationArtifact& artifact,
                                   const ExperimentConfig& config) {
  if (!dataset.header.sections.embeddings)
    throw MissingSection("embeddings", "same-topic control needs generation embeddings");
  const std::size_t dim = dataset.header.sections.embedding_dim;
  std::vector<std::size_t> member_rows, non_member_rows;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i)
    (dataset.samples[i].label == 1 ? member_rows : non_member_rows).push_back(i);

  auto embed = [&](const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& e = dataset.samples[rows[r]].embeddings->with_context;
      for (std::size_t j = 0; j < dim; ++j) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = e[j];
      m.row(static_cast<Eigen::Index>(r)).normalize();
    }
    return m;
  };
  const Eigen::MatrixXd members = embed(member_rows);
  const Eigen::MatrixXd non_members = embed(non_member_rows);
  const TopicMatching matching = same_topic_pairs(members, non_members, config.same_topic_with_replacement);

  SameTopicResult out;
  out.total = dataset.samples.size();
  out.members = member_rows.size();
  out.matched_similarity = matching.mean_similarity;
  out.random_similarity = (members * non_members.transpose()).mean();

  const std::set<std::size_t> matched(matching.match.begin(), matching.match.end());
  out.matched_non_members = matched.size();
  std::vector<std::size_t> rows = member_rows;
  for (std::size_t m : matched) rows.push_back(non_member_rows[m]);
  std::sort(rows.begin(), rows.end());

  const FeatureTable l3 = extract_features(dataset, artifact, LevelSet{false, false, true}, config.features);
  out.full_auc = evaluate_table(l3, config).mean_auc;
  if (matched.size() < config.folds)
    throw InvalidInput("same-topic control matched only " + std::to_string(matched.size()) +
                       " distinct non-members, fewer than the " + std::to_string(config.folds) + " folds");
  out.report = evaluate_table(l3.select_rows(rows), config, "same-topic");
  return out;
}

std::vector<BaselineRow> baseline_table(const Dataset& dataset, const CalibrationArtifact& artifact,
                                        const ExperimentConfig& config) {
  ExperimentConfig quick = config;
  quick.eval.n_boot = 0;
  const auto labels = dataset.labels();
  const FoldPlan plan = make_folds(labels, config.folds, config.fold_seed);
  auto cv = [&](const Eigen::MatrixXd& x) { return cross_validate(x, labels, plan, quick.eval).mean_auc; };
  const auto n = static_cast<Eigen::Index>(dataset.samples.size());

  std::vector<BaselineRow> rows;

  if (dataset.header.sections.token_logprobs) {
    std::vector<std::string> names{"ppl", "zlib"};
    for (double k : config.min_k_percents) {
      std::ostringstream name;
      name << "min_k_" << k;
      names.push_back(name.str());
    }
    Eigen::MatrixXd scores(n, static_cast<Eigen::Index>(names.size()));
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& doc = *dataset.samples[static_cast<std::size_t>(i)].document;
      const std::vector<double> lp(doc.logprobs.begin(), doc.logprobs.end());
      const auto b = likelihood_baselines(lp, doc.text, config.min_k_percents);
      for (std::size_t c = 0; c < names.size(); ++c) scores(i, static_cast<Eigen::Index>(c)) = b.at(names[c]);
    }
    for (std::size_t c = 0; c < names.size(); ++c)
      rows.push_back({"likelihood", names[c], 1, cv(column_of(scores, c))});
  }

  const FeatureTable l3 = extract_features(dataset, artifact, LevelSet{false, false, true}, config.features);
  const auto layers = artifact.selected_layers();
  rows.push_back({"access-matched", "CRM-LTS (all target layers)", layers.size(), cv(l3.values)});
  rows.push_back({"access-matched", "mean LTS", 1, cv(l3.values.rowwise().mean())});

  std::vector<std::pair<double, std::size_t>> single;
  for (std::size_t c = 0; c < layers.size(); ++c) single.emplace_back(cv(column_of(l3.values, c)), c);
  std::stable_sort(single.begin(), single.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  rows.push_back({"access-matched", "best single layer (L" + std::to_string(layers[single.front().second]) + ")", 1,
                  single.front().first});
  if (single.size() >= 3) {
    std::vector<std::size_t> top;
    for (std::size_t i = 0; i < 3; ++i) top.push_back(single[i].second);
    std::sort(top.begin(), top.end());
    rows.push_back({"access-matched", "top-3 layers", 3, cv(l3.select_columns(top).values)});
  }
  if (layers.size() >= 2 && smallest_training_fold(plan) > 2) {
    const std::size_t ks[] = {2};
    try {
      rows.push_back({"access-matched", "LTS PCA 2d", 2, pca_dim_sweep(l3.values, labels, plan, ks, quick.eval).front().auc});
    } catch (const InvalidInput&) {
      // Rank-deficient L3 features: the 2d projection does not exist.
    }
  }

  Eigen::MatrixXd norms(n, static_cast<Eigen::Index>(layers.size()));
  for (std::size_t c = 0; c < layers.size(); ++c)
    norms.col(static_cast<Eigen::Index>(c)) = layer_displacements(dataset, layers[c]).rowwise().norm();
  rows.push_back({"access-matched", "L2 norm mean", 1, cv(norms.rowwise().mean())});
  rows.push_back({"access-matched", "L2 norm multilayer", layers.size(), cv(norms)});

  const bool surface = dataset.header.sections.embeddings && dataset.header.sections.kl_series;
  if (surface) {
    const FeatureTable l12 = extract_features(dataset, artifact, LevelSet{true, true, false}, config.features);
    rows.push_back({"access-matched", "L1+L2", l12.layout.size(), cv(l12.values)});
  }

  // Raw displacement probes, PCA-reduced inside each training fold so the
  // classifier stays well-posed when d exceeds the training-fold size.
  const std::size_t k = std::min<std::size_t>(
      {config.probe_components, dataset.header.hidden_dim, smallest_training_fold(plan) - 1});
  auto probe = [&](const std::string& name, const Eigen::MatrixXd& x) {
    if (k == 0) return;
    const std::size_t ks[] = {k};
    try {
      rows.push_back({"raw-probe", name, k, pca_dim_sweep(x, labels, plan, ks, quick.eval).front().auc});
    } catch (const InvalidInput&) {
      const std::size_t rank = principal_axes(x, 1).rank;
      if (rank == 0) return;
      const std::size_t ks_low[] = {std::min(k, rank) > 1 ? std::min(k, rank) - 1 : 1};
      rows.push_back({"raw-probe", name, ks_low[0], pca_dim_sweep(x, labels, plan, ks_low, quick.eval).front().auc});
    }
  };
  probe("final-layer diff", layer_displacements(dataset, dataset.header.num_layers - 1));
  Eigen::MatrixXd mean_disp = Eigen::MatrixXd::Zero(n, dataset.header.hidden_dim);
  for (std::size_t l = 0; l < dataset.header.num_layers; ++l) mean_disp += layer_displacements(dataset, l);
  mean_disp /= static_cast<double>(dataset.header.num_layers);
  probe("all-layer mean diff", mean_disp);
  return rows;
}

std::vector<NoiseBlock> default_noise_blocks(const CalibrationArtifact& artifact) {
  std::vector<NoiseBlock> blocks;
  blocks.push_back({"target", artifact.selected_layers()});
  NoiseBlock early{"early_control", {}};
  for (std::size_t l = 0; l < std::min<std::size_t>(8, artifact.num_layers); ++l) early.layers.push_back(l);
  blocks.push_back(std::move(early));
  return blocks;
}

DeltaTable noise_block_control(const Dataset& dataset, const CalibrationArtifact& artifact,
                               const EvaluationReport& clean, const ExperimentConfig& config) {
  const auto blocks = config.noise_blocks.empty() ? default_noise_blocks(artifact) : config.noise_blocks;
  std::vector<std::pair<std::string, EvaluationReport>> perturbed;
  std::uint64_t stream = 0;
  for (const auto& block : blocks) {
    for (double eps : config.noise_eps) {
      const Dataset noisy = emulate_feature_noise(dataset, block.layers, eps, derive_seed(config.noise_seed, stream++));
      const FeatureTable table = extract_features(noisy, artifact, config.levels, config.features);
      std::ostringstream name;
      name << block.name << " eps=" << eps;
      perturbed.emplace_back(name.str(), evaluate_table(table, config, name.str()));
    }
  }
  return delta_auc_report(clean, perturbed);
}

ControlResults run_evaluation(const Dataset& dataset, const CalibrationArtifact& artifact,
                              const ExperimentConfig& config, const ControlSelection& controls) {
  ControlResults out;
  out.levels = config.levels.to_string();
  const FeatureTable table = extract_features(dataset, artifact, config.levels, config.features);
  out.feature_dim = table.layout.size();
  out.main = evaluate_table(table, config, "clean");

  if (controls.permutation)
    out.permutation = permutation_control(table.values, table.labels, config.folds, config.fold_seed, config.n_perms,
                                          config.permutation_seed, config.eval);
  if (controls.l3_only) {
    const FeatureTable l3 = extract_features(dataset, artifact, LevelSet{false, false, true}, config.features);
    out.l3_only = evaluate_table(l3, config, "L3 only");
  }
  if (controls.loo) {
    if (table.layout.columns(Level::l3).size() >= 2)
      out.loo = loo_ablation(table, make_folds(table.labels, config.folds, config.fold_seed), config.eval);
    else
      out.notes.push_back("loo skipped: fewer than 2 L3 features");
  }
  if (controls.pca_sweep) {
    const auto layers = artifact.selected_layers();
    const Eigen::MatrixXd disp = concatenated_displacements(dataset, layers);
    const FoldPlan plan = make_folds(table.labels, config.folds, config.fold_seed);
    const std::size_t limit =
        std::min<std::size_t>(static_cast<std::size_t>(disp.cols()), smallest_training_fold(plan) - 1);
    std::vector<std::size_t> ks;
    for (std::size_t k : config.pca_ks)
      if (k <= limit) ks.push_back(k);
    if (ks.size() < config.pca_ks.size()) out.notes.push_back("pca-sweep: dropped k above the training-fold rank bound");
    if (!ks.empty()) out.pca_sweep = pca_dim_sweep(disp, table.labels, plan, ks, config.eval);
  }
  if (controls.pc_rank) {
    std::vector<std::size_t> ranks;
    const std::size_t limit = std::min<std::size_t>(artifact.calibration_ids.size() - 1, artifact.hidden_dim);
    for (std::size_t r : config.pc_ranks)
      if (r <= limit) ranks.push_back(r);
    if (ranks.size() < config.pc_ranks.size()) out.notes.push_back("pc-rank: dropped ranks above min(n_cal - 1, d)");
    ExperimentConfig c = config;
    c.pc_ranks = ranks;
    try {
      if (!ranks.empty()) out.pc_rank = pc_rank_sweep(dataset, artifact, c);
    } catch (const DegenerateInput& e) {
      out.notes.push_back(std::string("pc-rank skipped: ") + e.what());
    }
  }
  if (controls.same_topic) {
    if (dataset.header.sections.embeddings) out.same_topic = same_topic_control(dataset, artifact, config);
    else out.notes.push_back("same-topic skipped: trace has no embeddings section");
  }
  if (controls.layer_sweep) out.layer_sweep = layer_sweep(dataset, config);
  if (controls.baselines) out.baselines = baseline_table(dataset, artifact, config);
  if (controls.noise) out.noise = noise_block_control(dataset, artifact, out.main, config);
  return out;
}

json controls_to_json(const ControlResults& r) {
  json doc{{"format", "crm-evaluation"},
           {"levels", r.levels},
           {"feature_dim", r.feature_dim},
           {"main", report_to_json(r.main)},
           {"notes", r.notes}};
  if (r.permutation) doc["permutation"] = permutation_to_json(*r.permutation);
  if (r.l3_only) {
    doc["l3_only"] = report_to_json(*r.l3_only);
    doc["l3_only_delta"] = r.l3_only->mean_auc - r.main.mean_auc;
  }
  if (r.loo) doc["loo"] = ablation_to_json(*r.loo);
  if (r.pca_sweep) doc["pca_sweep"] = sweep_to_json(*r.pca_sweep, "k");
  if (r.pc_rank) doc["pc_rank"] = sweep_to_json(*r.pc_rank, "rank");
  if (r.same_topic) {
    const auto& s = *r.same_topic;
    doc["same_topic"] = {{"total", s.total},
                         {"members", s.members},
                         {"matched_non_members", s.matched_non_members},
                         {"matched_similarity", s.matched_similarity},
                         {"random_similarity", s.random_similarity},
                         {"full_auc", s.full_auc},
                         {"report", report_to_json(s.report)}};
  }
  if (r.layer_sweep) {
    json rows = json::array();
    for (const auto& l : *r.layer_sweep) rows.push_back({{"layer", l.layer}, {"components", l.components}, {"auc", l.auc}});
    doc["layer_sweep"] = std::move(rows);
  }
  if (r.baselines) {
    json rows = json::array();
    for (const auto& b : *r.baselines) rows.push_back({{"tier", b.tier}, {"name", b.name}, {"dim", b.dim}, {"auc", b.auc}});
    doc["baselines"] = std::move(rows);
  }
  if (r.noise) doc["noise"] = delta_table_to_json(*r.noise);
  return doc;
}

std::string format_controls(const ControlResults& r) {
  std::ostringstream out;
  out << "== Main evaluation (levels " << r.levels << ", " << r.feature_dim << " features) ==\n"
      << format_report(r.main);
  if (r.permutation) out << "\n== Label permutation ==\n" << format_permutation(*r.permutation);
  if (r.l3_only) {
    TextTable t({"Features", "AUC", "Delta AUC"});
    t.add_row({r.levels, fmt(r.main.mean_auc), "-"});
    t.add_row({"L3", fmt(r.l3_only->mean_auc), fmt_signed(r.l3_only->mean_auc - r.main.mean_auc)});
    out << "\n== L3-only ablation ==\n" << t.render();
  }
  if (r.loo) out << "\n== " << format_ablation(*r.loo);
  if (r.pca_sweep) out << "\n== PCA dimension sweep ==\n" << format_sweep(*r.pca_sweep, "Components", "");
  if (r.pc_rank) out << "\n== PC rank ablation ==\n" << format_sweep(*r.pc_rank, "Direction", "PC");
  if (r.same_topic) {
    const auto& s = *r.same_topic;
    TextTable t({"Condition", "n", "Similarity", "AUC"});
    t.add_row({"all samples", std::to_string(s.total), fmt(s.random_similarity, 2),
               fmt(s.full_auc)});
    t.add_row({"same-topic", std::to_string(s.members + s.matched_non_members), fmt(s.matched_similarity, 2),
               fmt(s.report.mean_auc)});
    out << "\n== Same-topic control ==\n"
        << t.render() << "Delta AUC " << fmt_signed(s.report.mean_auc - s.full_auc) << '\n';
  }
  if (r.layer_sweep) {
    TextTable t({"Layer", "Components", "AUC"});
    for (const auto& l : *r.layer_sweep) t.add_row({"L" + std::to_string(l.layer), std::to_string(l.components), fmt(l.auc)});
    out << "\n== Per-layer probe ==\n" << t.render();
    if (!r.layer_sweep->empty()) {
      auto sorted = *r.layer_sweep;
      std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.auc > b.auc; });
      out << "Best L" << sorted.front().layer << " " << fmt(sorted.front().auc);
      if (sorted.size() > 1) out << ", 2nd L" << sorted[1].layer << " " << fmt(sorted[1].auc);
      out << ", worst L" << sorted.back().layer << " " << fmt(sorted.back().auc) << '\n';
    }
  }
  if (r.baselines) {
    TextTable t({"Baseline", "Tier", "Dim", "AUC"});
    for (const auto& b : *r.baselines) t.add_row({b.name, b.tier, std::to_string(b.dim), fmt(b.auc)});
    out << "\n== Baselines ==\n" << t.render();
  }
  if (r.noise) out << "\n== Noise injection (trace-level) ==\n" << format_delta_table(*r.noise);
  for (const auto& note : r.notes) out << "note: " << note << '\n';
  return out.str();
}

}  // namespace crm
