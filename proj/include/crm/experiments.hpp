#pragma once

// Orchestration of the evaluation protocol and its controls over a trace and a
// calibration artifact. Everything here is built from detector-lab and
// feature-pipeline primitives; this layer only decides which matrices to feed
// them.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "crm/calibration.hpp"
#include "crm/detector_lab.hpp"

namespace crm {

struct ControlSelection {
  bool permutation = false;
  bool l3_only = false;
  bool loo = false;
  bool pca_sweep = false;
  bool pc_rank = false;
  bool same_topic = false;
  bool layer_sweep = false;
  bool baselines = false;
  bool noise = false;

  // Comma list of permutation, l3-only, loo, pca-sweep, pc-rank, same-topic,
  // layer-sweep, baselines, noise; or "all" / "none".
  static ControlSelection parse(std::string_view text);
  static ControlSelection all();
  std::string to_string() const;
  bool any() const;
};

struct NoiseBlock {
  std::string name;
  std::vector<std::size_t> layers;

  // "name=a-b" or "name=a,b,c" (inclusive ranges allowed inside the list).
  static NoiseBlock parse(std::string_view text);
};

struct ExperimentConfig {
  std::size_t folds = 5;
  std::uint64_t fold_seed = 42;
  EvalConfig eval;
  LevelSet levels{true, true, true};
  FeatureOptions features;

  std::size_t n_perms = 10;
  std::uint64_t permutation_seed = 42;
  std::vector<std::size_t> pca_ks{1, 2, 4, 8};
  std::vector<std::size_t> pc_ranks{1, 2, 3, 4, 5, 6, 7, 8};
  std::size_t probe_components = 64;
  std::vector<double> min_k_percents{10.0, 20.0};
  bool same_topic_with_replacement = true;

  // Empty means: the artifact's selected layers plus an early-control block.
  std::vector<NoiseBlock> noise_blocks;
  std::vector<double> noise_eps{0.1, 0.5, 1.0};
  std::uint64_t noise_seed = 42;
};

// Stratified folds over `labels` followed by cross_validate.
EvaluationReport evaluate_table(const FeatureTable& table, const ExperimentConfig& config,
                                const std::string& tag = "");

// Per-model-layer raw displacement probe: PCA fitted in each training fold,
// LR on the top components. Layers whose displacements are rank deficient for
// the requested component count are reported with the reduced count.
struct LayerProbeRow {
  std::size_t layer = 0;
  std::size_t components = 0;
  double auc = 0.0;
};
std::vector<LayerProbeRow> layer_sweep(const Dataset& dataset, const ExperimentConfig& config);

// Directions refit as the r-th principal axis for every r in config.pc_ranks;
// multi-layer LR AUC per rank on L3 features.
std::vector<SweepRow> pc_rank_sweep(const Dataset& dataset, const CalibrationArtifact& artifact,
                                    const ExperimentConfig& config);

struct SameTopicResult {
  std::size_t total = 0;
  std::size_t members = 0;
  std::size_t matched_non_members = 0;  // distinct non-members in the matched pool
  double matched_similarity = 0.0;
  double random_similarity = 0.0;  // mean cosine over all member/non-member pairs
  double full_auc = 0.0;           // L3 AUC on the whole dataset
  EvaluationReport report;         // L3 AUC on members + matched non-members
};

// Topic proxy: the with-context generation embedding of each sample.
SameTopicResult same_topic_control(const Dataset& dataset, const CalibrationArtifact& artifact,
                                   const ExperimentConfig& config);

struct BaselineRow {
  std::string tier;
  std::string name;
  std::size_t dim = 0;
  double auc = 0.0;
};

// Likelihood baselines (when document tokens are present), access-matched
// LTS summaries and PCA-reduced raw displacement probes.
std::vector<BaselineRow> baseline_table(const Dataset& dataset, const CalibrationArtifact& artifact,
                                        const ExperimentConfig& config);

// Trace-level noise on each block at each epsilon, features recomputed with the
// clean artifact, compared against `clean` (which must come from the same
// configuration).
DeltaTable noise_block_control(const Dataset& dataset, const CalibrationArtifact& artifact,
                               const EvaluationReport& clean, const ExperimentConfig& config);

std::vector<NoiseBlock> default_noise_blocks(const CalibrationArtifact& artifact);

struct ControlResults {
  std::string levels;
  std::size_t feature_dim = 0;
  EvaluationReport main;
  std::optional<std::vector<double>> permutation;
  std::optional<EvaluationReport> l3_only;
  std::optional<AblationTable> loo;
  std::optional<std::vector<SweepRow>> pca_sweep;
  std::optional<std::vector<SweepRow>> pc_rank;
  std::optional<SameTopicResult> same_topic;
  std::optional<std::vector<LayerProbeRow>> layer_sweep;
  std::optional<std::vector<BaselineRow>> baselines;
  std::optional<DeltaTable> noise;
  std::vector<std::string> notes;  // controls skipped or adjusted, with reasons
};

ControlResults run_evaluation(const Dataset& dataset, const CalibrationArtifact& artifact,
                              const ExperimentConfig& config, const ControlSelection& controls);

nlohmann::json controls_to_json(const ControlResults& results);
std::string format_controls(const ControlResults& results);

}  // namespace crm
