#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "crm/calibration.hpp"
#include "crm/error.hpp"
#include "crm/synth_oracle.hpp"
#include "oracles.hpp"

using namespace crm;

namespace {

Dataset planted(std::uint64_t seed = 3) {
  std::vector<std::size_t> signal{1, 2};
  return generate(PlantedSpec::simple(4, 6, 120, 3.0, signal, 1.0, seed));
}

CalibrationConfig config(std::size_t n_cal = 60, DirectionKind kind = DirectionKind::pc1) {
  CalibrationConfig c;
  c.n_cal = n_cal;
  c.threshold = 0.27;
  c.direction.kind = kind;
  return c;
}

}  // namespace

TEST(Calibrate, SelectsSignalLayersAndRecordsProvenance) {
  const Dataset ds = planted();
  const CalibrationArtifact a = calibrate(ds, config());
  EXPECT_EQ(a.selected_layers(), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(a.model_name, ds.header.model_name);
  EXPECT_EQ(a.num_layers, 4u);
  EXPECT_EQ(a.hidden_dim, 6u);
  EXPECT_EQ(a.calibration_ids.size(), 60u);
  EXPECT_EQ(a.layer_scores.size(), 4u);
  ASSERT_EQ(a.lts_stats.size(), a.directions.size());
}

TEST(Calibrate, StatsArePopulationMomentsOverCalibrationSubset) {
  const Dataset ds = planted();
  const CalibrationArtifact a = calibrate(ds, config());
  const auto split = split_calibration(ds, 60, 42);
  for (std::size_t k = 0; k < a.size(); ++k) {
    std::vector<double> lts;
    for (const auto& s : split.calibration.samples)
      lts.push_back(lts_project(s.h0.row(a.directions[k].layer_index), s.hc.row(a.directions[k].layer_index),
                                a.directions[k]));
    EXPECT_NEAR(a.lts_stats[k].mean, oracle::direct_mean(lts), 1e-10);
    EXPECT_NEAR(a.lts_stats[k].std, std::sqrt(oracle::direct_variance(lts)), 1e-10);
  }
}

TEST(Calibrate, DeterministicForFixedSeed) {
  const Dataset ds = planted();
  EXPECT_EQ(calibrate(ds, config()), calibrate(ds, config()));
  CalibrationConfig other = config();
  other.seed = 7;
  EXPECT_NE(calibrate(ds, other).calibration_ids, calibrate(ds, config()).calibration_ids);
}

TEST(Calibrate, NothingSelectedIsDegenerate) {
  CalibrationConfig c = config();
  c.threshold = 0.99;
  EXPECT_THROW(calibrate(planted(), c), DegenerateInput);
}

TEST(Calibrate, SupervisedDirectionPointsFromNonMembersToMembers) {
  const Dataset ds = planted();
  const CalibrationArtifact a = calibrate(ds, config(120, DirectionKind::supervised));
  for (std::size_t k = 0; k < a.size(); ++k) {
    const std::size_t l = a.directions[k].layer_index;
    EXPECT_GT(a.directions[k].v[l % 6], 0.9);  // basis axis e_(l mod d)
  }
}

TEST(Refit, KeepsSelectionAndSubsetButChangesDirections) {
  const Dataset ds = planted();
  const CalibrationArtifact base = calibrate(ds, config());
  const CalibrationArtifact r2 = refit_directions(ds, base, DirectionSpec::parse("pc-rank:2"));
  EXPECT_EQ(r2.selected_layers(), base.selected_layers());
  EXPECT_EQ(r2.calibration_ids, base.calibration_ids);
  for (std::size_t k = 0; k < base.size(); ++k) {
    EXPECT_EQ(r2.directions[k].rank, 2u);
    double dot = 0;
    for (std::size_t j = 0; j < 6; ++j) dot += r2.directions[k].v[j] * base.directions[k].v[j];
    EXPECT_NEAR(dot, 0.0, 1e-9);
  }
  EXPECT_EQ(refit_directions(ds, base, DirectionSpec::parse("pc1")), base);

  Dataset missing = ds;
  std::erase_if(missing.samples, [&](const TraceSample& t) { return t.sample_id == base.calibration_ids.front(); });
  missing.header.num_samples = missing.samples.size();
  EXPECT_THROW(refit_directions(missing, base, DirectionSpec::parse("pc1")), InvalidInput);
}

TEST(DirectionSpec, ParsesAndPrints) {
  EXPECT_EQ(DirectionSpec::parse("PC1").kind, DirectionKind::pc1);
  EXPECT_EQ(DirectionSpec::parse("supervised").kind, DirectionKind::supervised);
  EXPECT_EQ(DirectionSpec::parse("pc-rank:3").rank, 3u);
  EXPECT_EQ(DirectionSpec::parse("pc-rank:3").to_string(), "pc-rank:3");
  EXPECT_THROW(DirectionSpec::parse("pc-rank:0"), InvalidInput);
  EXPECT_THROW(DirectionSpec::parse("pc-rank:x"), InvalidInput);
  EXPECT_THROW(DirectionSpec::parse("lda"), InvalidInput);
}

TEST(Artifact, JsonRoundTripAndFingerprint) {
  const CalibrationArtifact a = calibrate(planted(), config());
  const auto doc = artifact_to_json(a);
  EXPECT_EQ(artifact_from_json(doc), a);
  EXPECT_EQ(doc.at("fingerprint").get<std::string>(), artifact_fingerprint(a));
  EXPECT_EQ(artifact_fingerprint(a).size(), 64u);

  auto tampered = doc;
  tampered["layers"][0]["lts_mean"] = 123.0;
  EXPECT_THROW(artifact_from_json(tampered), InvalidInput);

  auto bad = doc;
  bad["format"] = "something-else";
  EXPECT_THROW(artifact_from_json(bad), InvalidInput);
}

TEST(Artifact, SaveLoadFile) {
  const auto path = std::filesystem::temp_directory_path() / "crm-calibration-test.json";
  const CalibrationArtifact a = calibrate(planted(), config());
  save_artifact(a, path);
  EXPECT_EQ(load_artifact(path), a);
  {
    std::ofstream out(path, std::ios::trunc);
    out << "{ not json";
  }
  EXPECT_THROW(load_artifact(path), InvalidInput);
  std::filesystem::remove(path);
  EXPECT_THROW(load_artifact(path), Error);
}
