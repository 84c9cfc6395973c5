#pragma once

// Layer selection, projection directions, LTS projection and the surface
// (L1/L2) statistics. Everything here is a pure function of its inputs; all
// arithmetic runs in double precision regardless of on-disk float32.

#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "crm/error.hpp"
#include "crm/trace_store.hpp"

namespace crm {

enum class DirectionKind { pc1, pc_rank, supervised };

std::string to_string(DirectionKind kind);
DirectionKind direction_kind_from_string(std::string_view name);

struct LayerDirection {
  std::size_t layer_index = 0;
  std::vector<double> v;  // unit norm
  DirectionKind kind = DirectionKind::pc1;
  std::size_t rank = 1;   // PC rank for pc1 / pc_rank
  std::optional<double> explained_variance_ratio;

  bool operator==(const LayerDirection&) const = default;
};

// --- principal axes -------------------------------------------------------

// Top principal axes of a mean-centred row matrix. Components are unit rows,
// sign-normalised so the largest-magnitude coordinate is positive (lowest
// index wins ties).
struct PrincipalAxes {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;       // k x d
  Eigen::VectorXd eigenvalues;      // k, sums of squares along each axis
  double total_sum_squares = 0.0;
  std::size_t rank = 0;             // numerical rank of the centred matrix
};

PrincipalAxes principal_axes(const Eigen::MatrixXd& rows, std::size_t max_components);

// Flip `v` so its largest-|coordinate| entry is positive.
void normalize_sign(Eigen::Ref<Eigen::RowVectorXd> v);

// --- layer selection ------------------------------------------------------

enum class LayerScoreMode {
  cross_layer_variance,    // total displacement variance / sum over layers
  pc1_explained_variance,  // per-layer PC1 explained-variance ratio
};

std::string to_string(LayerScoreMode mode);
LayerScoreMode layer_score_mode_from_string(std::string_view name);

struct LayerSelection {
  std::vector<std::size_t> layers;  // ascending
  std::vector<double> scores;       // one per model layer
};

// N x d matrix of displacements hc - h0 at `layer`.
Eigen::MatrixXd layer_displacements(const Dataset& dataset, std::size_t layer);

LayerSelection select_target_layers(const Dataset& calibration, double threshold,
                                    LayerScoreMode mode = LayerScoreMode::cross_layer_variance);

// --- directions -----------------------------------------------------------

LayerDirection pc1_direction(const Eigen::MatrixXd& displacements, std::size_t layer_index = 0);
LayerDirection pc_rank_direction(const Eigen::MatrixXd& displacements, std::size_t rank,
                                 std::size_t layer_index = 0);
LayerDirection supervised_direction(const Eigen::MatrixXd& displacements, std::span<const int> labels,
                                    std::size_t layer_index = 0);

// <hc - h0, v>
template <std::floating_point T>
double lts_project(std::span<const T> h0, std::span<const T> hc, const LayerDirection& dir) {
  if (h0.size() != hc.size() || h0.size() != dir.v.size())
    throw InvalidInput("lts_project: dimension mismatch (" + std::to_string(h0.size()) + ", " +
                       std::to_string(hc.size()) + ", " + std::to_string(dir.v.size()) + ")");
  double acc = 0.0;
  for (std::size_t i = 0; i < h0.size(); ++i)
    acc += (static_cast<double>(hc[i]) - static_cast<double>(h0[i])) * dir.v[i];
  return acc;
}

// Projection of an already-formed displacement row.
double project_displacement(std::span<const double> displacement, const LayerDirection& dir);

// --- surface levels -------------------------------------------------------

// 1 - cos(e0, ec); inputs are renormalised before the dot product.
double semantic_delta(std::span<const double> e0, std::span<const double> ec);
double semantic_delta(std::span<const float> e0, std::span<const float> ec);

struct KlStatistics {
  double mean = 0.0;
  double max = 0.0;
  double variance = 0.0;    // population
  double early_late = 0.0;  // mean(first window) - mean(rest); 0 without a rest
  double trend = 0.0;       // OLS slope against 0-based step

  std::array<double, 5> values() const { return {mean, max, variance, early_late, trend}; }
};

inline constexpr std::size_t kDefaultEarlyWindow = 32;

KlStatistics kl_statistics(std::span<const double> series, std::size_t early_window = kDefaultEarlyWindow);
KlStatistics kl_statistics(std::span<const float> series, std::size_t early_window = kDefaultEarlyWindow);

// Tier-1 likelihood baselines: "ppl", "zlib", and "min_k_<K>" per K.
std::map<std::string, double> likelihood_baselines(std::span<const double> doc_logprobs,
                                                   std::string_view doc_text,
                                                   std::span<const double> k_percents);

// Byte length of the zlib stream for `bytes` at the default compression level.
std::size_t deflate_length(std::string_view bytes);

// --- interpretation -------------------------------------------------------

struct TokenScore {
  std::size_t index = 0;
  std::string token;
  double score = 0.0;
};

std::vector<TokenScore> vocab_backproject(const LayerDirection& dir, const Eigen::MatrixXd& unembed,
                                          std::span<const std::string> vocab, std::size_t top_k);

}  // namespace crm
