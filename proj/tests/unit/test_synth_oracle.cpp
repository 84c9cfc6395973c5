#include <gtest/gtest.h>

#include <cmath>

#include "crm/detector_lab.hpp"
#include "crm/error.hpp"
#include "crm/synth_oracle.hpp"
#include "oracles.hpp"

using namespace crm;

TEST(NormalCdf, AgreesWithSimpsonIntegration) {
  for (double x : {-4.0, -1.5, -0.3, 0.0, 0.2, 0.7071, 1.0, 2.5, 5.0})
    EXPECT_NEAR(normal_cdf(x), oracle::simpson_normal_cdf(x), 1e-10) << x;
}

TEST(PlantedSpec, ValidateRejectsInconsistentSpecs) {
  PlantedSpec spec = PlantedSpec::simple(2, 3, 10, 1.0, std::vector<std::size_t>{0});
  EXPECT_NO_THROW(spec.validate());

  PlantedSpec odd = spec;
  odd.num_samples = 11;
  EXPECT_THROW(odd.validate(), InvalidInput);

  PlantedSpec not_unit = spec;
  not_unit.shift_axes[0] = std::vector<double>{1.0, 1.0, 0.0};
  EXPECT_THROW(not_unit.validate(), InvalidInput);

  PlantedSpec bad_noise = spec;
  bad_noise.noise_std = 0.0;
  EXPECT_THROW(bad_noise.validate(), InvalidInput);

  PlantedSpec overlapping = PlantedSpec::simple(3, 2, 10, 1.0, std::vector<std::size_t>{0, 1, 2});
  overlapping.blocks = {{0, 1}, {1, 2}};
  EXPECT_THROW(overlapping.validate(), InvalidInput);
}

TEST(PlantedSpec, BlockSplitsShiftBySqrtOfSize) {
  PlantedSpec spec = PlantedSpec::simple(5, 2, 10, 2.0, std::vector<std::size_t>{0, 1, 2, 3});
  spec.blocks = {{0, 1, 2, 3}};
  EXPECT_DOUBLE_EQ(spec.layer_shift(0), 1.0);
  EXPECT_DOUBLE_EQ(spec.layer_shift(3), 1.0);
  EXPECT_DOUBLE_EQ(spec.layer_shift(4), 0.0);
}

TEST(PlantedSpec, JsonRoundTripAndShorthands) {
  PlantedSpec spec = PlantedSpec::simple(3, 4, 20, 1.5, std::vector<std::size_t>{1});
  spec.nuisance.push_back({2, basis_axis(4, 3), 2.5});
  spec.surface_sections = true;
  const PlantedSpec back = planted_spec_from_json(planted_spec_to_json(spec));
  EXPECT_EQ(planted_spec_to_json(back), planted_spec_to_json(spec));

  const auto doc = nlohmann::json::parse(R"({"num_layers": 3, "hidden_dim": 4, "num_samples": 20,
      "member_shift": 1.5, "shift_axes": [null, {"basis": 1}, null]})");
  const PlantedSpec parsed = planted_spec_from_json(doc);
  EXPECT_EQ(*parsed.shift_axes[1], basis_axis(4, 1));
  EXPECT_FALSE(parsed.shift_axes[0].has_value());
}

TEST(Generate, DeterministicBalancedAndValid) {
  PlantedSpec spec = PlantedSpec::simple(3, 4, 40, 1.0, std::vector<std::size_t>{1});
  spec.surface_sections = true;
  const Dataset a = generate(spec);
  EXPECT_EQ(a, generate(spec));
  EXPECT_NO_THROW(validate(a));
  int members = 0;
  for (const auto& s : a.samples) members += s.label;
  EXPECT_EQ(members, 20);
  EXPECT_TRUE(a.header.sections.kl_series && a.header.sections.embeddings && a.header.sections.token_logprobs &&
              a.header.sections.generation_texts);
  spec.seed = 43;
  EXPECT_NE(generate(spec).samples[0].h0, a.samples[0].h0);
}

TEST(Generate, DisplacementMomentsMatchSpec) {
  PlantedSpec spec = PlantedSpec::simple(2, 3, 4000, 2.0, std::vector<std::size_t>{0}, 0.5, 3);
  const Dataset ds = generate(spec);
  std::vector<double> members, non_members, null_layer;
  for (const auto& s : ds.samples) {
    const double d = double(s.hc.row(0)[0]) - double(s.h0.row(0)[0]);
    (s.label ? members : non_members).push_back(d);
    null_layer.push_back(double(s.hc.row(1)[2]) - double(s.h0.row(1)[2]));
  }
  EXPECT_NEAR(oracle::direct_mean(members) - oracle::direct_mean(non_members), 2.0, 0.05);
  EXPECT_NEAR(std::sqrt(oracle::direct_variance(non_members)), 0.5, 0.02);
  EXPECT_NEAR(oracle::direct_mean(null_layer), 0.0, 0.03);
}

TEST(OracleAuc, ClosedFormForLinearFunctionals) {
  PlantedSpec spec = PlantedSpec::simple(1, 2, 10, 1.0, std::vector<std::size_t>{0}, 1.0);
  const OracleAuc o = oracle_auc(spec, LinearFunctional::along(0, basis_axis(2, 0)));
  EXPECT_TRUE(o.closed_form);
  EXPECT_NEAR(o.auc, oracle::simpson_normal_cdf(1.0 / std::sqrt(2.0)), 1e-10);
  // Orthogonal readout sees no signal.
  EXPECT_DOUBLE_EQ(oracle_auc(spec, LinearFunctional::along(0, basis_axis(2, 1))).auc, 0.5);
}

TEST(OracleAuc, ClosedFormAgreesWithMonteCarloWithinThreeStandardErrors) {
  PlantedSpec spec = PlantedSpec::simple(3, 3, 10, 1.2, std::vector<std::size_t>{0, 2}, 1.0);
  spec.nuisance.push_back({2, basis_axis(3, 2), 2.0});
  const LinearFunctional f{{{0, {1.0, 0.0, 0.0}}, {2, {0.0, 0.0, 0.5}}}};
  const OracleAuc exact = oracle_auc(spec, f);
  const OracleAuc mc = monte_carlo_auc(spec, f, 200000, 5);
  ASSERT_TRUE(mc.standard_error.has_value());
  EXPECT_LT(std::abs(exact.auc - mc.auc), 3.0 * *mc.standard_error);
}

TEST(OracleAuc, NonLinearFeatureFallsBackToMonteCarlo) {
  PlantedSpec spec = PlantedSpec::simple(1, 2, 10, 3.0, std::vector<std::size_t>{0}, 1.0);
  const OracleAuc o = oracle_auc(spec, DisplacementNorm{0}, 50000, 1);
  EXPECT_FALSE(o.closed_form);
  EXPECT_TRUE(o.standard_error.has_value());
  EXPECT_GT(o.auc, 0.8);
}

TEST(FeatureNoise, ZeroEpsilonIsIdentityAndNoiseScalesWithSigma) {
  const Dataset ds = generate(PlantedSpec::simple(3, 4, 200, 1.0, std::vector<std::size_t>{0}, 1.0, 8));
  const std::vector<std::size_t> layers{1};
  EXPECT_EQ(emulate_feature_noise(ds, layers, 0.0, 1), ds);

  const Dataset noisy = emulate_feature_noise(ds, layers, 0.5, 1);
  std::vector<double> all_hc, diffs;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(noisy.samples[i].h0, ds.samples[i].h0);
    EXPECT_EQ(noisy.samples[i].hc.row(0)[0], ds.samples[i].hc.row(0)[0]);
    for (std::size_t j = 0; j < 4; ++j) {
      all_hc.push_back(ds.samples[i].hc.row(1)[j]);
      diffs.push_back(double(noisy.samples[i].hc.row(1)[j]) - double(ds.samples[i].hc.row(1)[j]));
    }
  }
  const double sigma = std::sqrt(oracle::direct_variance(all_hc));
  EXPECT_NEAR(std::sqrt(oracle::direct_variance(diffs)), 0.5 * sigma, 0.05 * sigma);
}
