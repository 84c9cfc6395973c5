#pragma once

// Synthetic traces with planted member/non-member structure, and the exact
// Gaussian AUC those plants imply.
//
// Generative model per sample and layer l:
//   h0 ~ N(0, base_std^2 I)
//   hc = h0 + label * shift_l * axis_l + noise_std * N(0, I) + sum_nuisance z * std * u
// so the displacement hc - h0 is Gaussian with a class-dependent mean.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "crm/trace_store.hpp"

namespace crm {

struct NuisanceAxis {
  std::size_t layer = 0;
  std::vector<double> axis;  // unit norm
  double std = 1.0;
};

struct PlantedSpec {
  std::string model_name = "synthetic";
  std::size_t num_layers = 1;
  std::size_t hidden_dim = 1;
  std::size_t num_samples = 2;
  double member_shift = 1.0;
  // One entry per layer; nullopt marks a layer without planted signal.
  std::vector<std::optional<std::vector<double>>> shift_axes;
  double noise_std = 1.0;
  double base_std = 1.0;
  std::vector<NuisanceAxis> nuisance;
  // Layers in a block share the shift: each gets member_shift / sqrt(|block|).
  std::vector<std::vector<std::size_t>> blocks;
  // Emit label-independent KL series, embeddings, texts and document tokens.
  bool surface_sections = false;
  std::size_t embedding_dim = 16;
  std::uint64_t seed = 42;

  // Shift magnitude planted at `layer` (0 for null layers).
  double layer_shift(std::size_t layer) const;
  void validate() const;

  // Convenience: signal on `signal_layers` along basis axis e_(layer mod d).
  static PlantedSpec simple(std::size_t num_layers, std::size_t hidden_dim, std::size_t num_samples,
                            double member_shift, std::span<const std::size_t> signal_layers,
                            double noise_std = 1.0, std::uint64_t seed = 42);
};

std::vector<double> basis_axis(std::size_t dim, std::size_t index);

nlohmann::json planted_spec_to_json(const PlantedSpec& spec);
PlantedSpec planted_spec_from_json(const nlohmann::json& doc);

Dataset generate(const PlantedSpec& spec);

// sum over terms of <w_l, hc_l - h0_l>
struct LinearFunctional {
  std::vector<std::pair<std::size_t, std::vector<double>>> terms;

  static LinearFunctional along(std::size_t layer, std::vector<double> weights) {
    return LinearFunctional{{{layer, std::move(weights)}}};
  }
};

// ||hc_l - h0_l||_2 at one layer; no closed form.
struct DisplacementNorm {
  std::size_t layer = 0;
};

using FeatureDescription = std::variant<LinearFunctional, DisplacementNorm>;

struct OracleAuc {
  double auc = 0.5;
  std::optional<double> standard_error;  // set for Monte Carlo results
  bool closed_form = true;
};

// Closed form Phi(delta / (s sqrt 2)) for linear functionals; Monte Carlo with
// `mc_samples` pairs otherwise.
OracleAuc oracle_auc(const PlantedSpec& spec, const FeatureDescription& feature,
                     std::size_t mc_samples = 1'000'000, std::uint64_t mc_seed = 7);

// Monte Carlo estimate for any feature: P(f(member) > f(non-member)) + ties/2
// over independent pairs.
OracleAuc monte_carlo_auc(const PlantedSpec& spec, const FeatureDescription& feature, std::size_t pairs,
                          std::uint64_t seed);

// Standard normal CDF.
double normal_cdf(double x);

// hc' = hc + eps * sigma_l * N(0, 1) at `layers`, sigma_l being the std of all
// recorded hc activations at layer l across the dataset.
Dataset emulate_feature_noise(const Dataset& dataset, std::span<const std::size_t> layers, double epsilon,
                              std::uint64_t seed);

}  // namespace crm
