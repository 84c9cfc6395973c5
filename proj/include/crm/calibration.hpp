#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "crm/feature_pipeline.hpp"
#include "crm/trace_store.hpp"

namespace crm {

struct LayerStats {
  double mean = 0.0;
  double std = 0.0;  // population std of calibration LTS values
  bool operator==(const LayerStats&) const = default;
};

// Immutable result of calibration. Directions and stats are parallel arrays in
// selected-layer order.
struct CalibrationArtifact {
  std::string model_name;
  std::uint32_t num_layers = 0;  // model layer count of the source trace
  std::uint32_t hidden_dim = 0;
  std::uint64_t seed = 42;
  std::size_t n_cal = 0;
  double variance_ratio_threshold = 0.01;
  LayerScoreMode score_mode = LayerScoreMode::cross_layer_variance;
  std::vector<double> layer_scores;  // one per model layer
  std::vector<LayerDirection> directions;
  std::vector<LayerStats> lts_stats;
  std::vector<std::string> calibration_ids;

  std::vector<std::size_t> selected_layers() const;
  std::size_t size() const { return directions.size(); }

  bool operator==(const CalibrationArtifact&) const = default;
};

struct DirectionSpec {
  DirectionKind kind = DirectionKind::pc1;
  std::size_t rank = 1;  // used by pc_rank

  // "pc1", "supervised" or "pc-rank:<r>"
  static DirectionSpec parse(std::string_view text);
  std::string to_string() const;
};

struct CalibrationConfig {
  std::size_t n_cal = 100;
  double threshold = 0.01;
  std::uint64_t seed = 42;
  DirectionSpec direction;
  LayerScoreMode score_mode = LayerScoreMode::cross_layer_variance;
};

// split -> layer selection -> per-layer direction -> per-layer LTS mean/std.
CalibrationArtifact calibrate(const Dataset& dataset, const CalibrationConfig& config);

// Same selection and calibration subset as `base`, directions refit with `spec`
// and stats recomputed. Used by rank sweeps.
CalibrationArtifact refit_directions(const Dataset& dataset, const CalibrationArtifact& base,
                                     const DirectionSpec& spec);

// Canonical document; "fingerprint" is the SHA-256 of the document without it.
nlohmann::json artifact_to_json(const CalibrationArtifact& artifact);
CalibrationArtifact artifact_from_json(const nlohmann::json& doc);
std::string artifact_fingerprint(const CalibrationArtifact& artifact);

void save_artifact(const CalibrationArtifact& artifact, const std::filesystem::path& path);
// Rejects a document whose stored fingerprint does not match its content.
CalibrationArtifact load_artifact(const std::filesystem::path& path);

// --- features -------------------------------------------------------------

enum class Level { l1, l2, l3 };

struct LevelSet {
  bool l1 = false;
  bool l2 = false;
  bool l3 = true;

  // Comma list such as "L1,L2,L3" (case-insensitive).
  static LevelSet parse(std::string_view text);
  std::string to_string() const;
  bool operator==(const LevelSet&) const = default;
};

struct FeatureSlot {
  Level level = Level::l3;
  std::string name;
  std::optional<std::size_t> layer;
  bool operator==(const FeatureSlot&) const = default;
};

struct FeatureLayout {
  std::vector<FeatureSlot> slots;

  std::size_t size() const { return slots.size(); }
  std::vector<std::size_t> columns(Level level) const;
  bool operator==(const FeatureLayout&) const = default;
};

struct FeatureOptions {
  std::size_t early_window = kDefaultEarlyWindow;
  // Emit only kl_mean for L2 instead of the five statistics.
  bool compact_l2 = false;
};

// One sample's feature vector, split by level.
struct FeatureVector {
  std::optional<double> l1;
  std::optional<std::vector<double>> l2;
  std::vector<double> l3;

  std::vector<double> flatten() const;
};

FeatureLayout feature_layout(const CalibrationArtifact& artifact, LevelSet levels,
                             const FeatureOptions& options = {});

FeatureVector compute_features(const TraceSample& sample, const CalibrationArtifact& artifact, LevelSet levels,
                               const FeatureOptions& options = {});

// Row-per-sample matrix plus layout, labels and ids.
struct FeatureTable {
  FeatureLayout layout;
  Eigen::MatrixXd values;
  std::vector<int> labels;
  std::vector<std::string> sample_ids;

  FeatureTable select_columns(std::span<const std::size_t> columns) const;
  FeatureTable select_rows(std::span<const std::size_t> rows) const;
};

FeatureTable extract_features(const Dataset& dataset, const CalibrationArtifact& artifact, LevelSet levels,
                              const FeatureOptions& options = {});

nlohmann::json features_to_json(const FeatureTable& table);
FeatureTable features_from_json(const nlohmann::json& doc);

// N x (|layers| * d) concatenation of per-layer displacements.
Eigen::MatrixXd concatenated_displacements(const Dataset& dataset, std::span<const std::size_t> layers);

}  // namespace crm
