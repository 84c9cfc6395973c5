#include <gtest/gtest.h>
#include <set>

#include "crm/error.hpp"
#include "crm/experiments.hpp"
#include "crm/reports.hpp"
#include "crm/synth_oracle.hpp"

using namespace crm;

namespace {

struct Fixture {
  Dataset ds;
  CalibrationArtifact art;
};

Fixture small_world() {
  PlantedSpec spec = PlantedSpec::simple(6, 4, 160, 2.0, std::vector<std::size_t>{2, 3}, 1.0, 12);
  spec.surface_sections = true;
  Fixture f{generate(spec), {}};
  CalibrationConfig cc;
  cc.n_cal = 80;
  cc.threshold = 0.17;
  f.art = calibrate(f.ds, cc);
  EXPECT_EQ(f.art.selected_layers(), (std::vector<std::size_t>{2, 3}));
  return f;
}

ExperimentConfig fast_config() {
  ExperimentConfig c;
  c.eval.n_boot = 0;
  c.n_perms = 3;
  c.pc_ranks = {1, 2, 3};
  c.pca_ks = {1, 2};
  c.noise_eps = {0.5};
  return c;
}

}  // namespace

TEST(ControlSelection, ParseAllNoneAndUnknown) {
  EXPECT_FALSE(ControlSelection::parse("none").any());
  const ControlSelection all = ControlSelection::parse("all");
  EXPECT_TRUE(all.permutation && all.noise && all.baselines && all.same_topic);
  const ControlSelection two = ControlSelection::parse("loo,pc-rank");
  EXPECT_TRUE(two.loo && two.pc_rank && !two.permutation);
  EXPECT_EQ(ControlSelection::parse(two.to_string()).to_string(), two.to_string());
  EXPECT_THROW(ControlSelection::parse("loo,bogus"), InvalidInput);
}

TEST(NoiseBlock, ParsesRangesAndLists) {
  const NoiseBlock a = NoiseBlock::parse("target=3-5");
  EXPECT_EQ(a.name, "target");
  EXPECT_EQ(a.layers, (std::vector<std::size_t>{3, 4, 5}));
  EXPECT_EQ(NoiseBlock::parse("mix=0,2-3").layers, (std::vector<std::size_t>{0, 2, 3}));
  EXPECT_THROW(NoiseBlock::parse("nolayers"), InvalidInput);
  EXPECT_THROW(NoiseBlock::parse("x=5-3"), InvalidInput);
}

TEST(Experiments, EvaluateTableUsesConfiguredFolds) {
  const Fixture f = small_world();
  ExperimentConfig c = fast_config();
  c.folds = 4;
  const EvaluationReport r = evaluate_table(extract_features(f.ds, f.art, LevelSet{}), c, "demo");
  EXPECT_EQ(r.k, 4u);
  EXPECT_EQ(r.tag, "demo");
  EXPECT_GT(r.pooled_auc, 0.8);
}

TEST(Experiments, LayerSweepPeaksOnSignalLayers) {
  const Fixture f = small_world();
  const auto rows = layer_sweep(f.ds, fast_config());
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& r : rows) {
    if (r.layer == 2 || r.layer == 3) EXPECT_GT(r.auc, 0.8) << r.layer;
    else EXPECT_LT(r.auc, 0.7) << r.layer;
    EXPECT_GE(r.components, 1u);
  }
}

TEST(Experiments, PcRankSweepReportsEachRank) {
  const Fixture f = small_world();
  const auto rows = pc_rank_sweep(f.ds, f.art, fast_config());
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].key, 1u);
  // The planted axis dominates variance on signal layers, so rank 1 carries it.
  EXPECT_GT(rows[0].auc, rows[2].auc);
}

TEST(Experiments, SameTopicControlCountsSubset) {
  const Fixture f = small_world();
  const SameTopicResult r = same_topic_control(f.ds, f.art, fast_config());
  EXPECT_EQ(r.members, 80u);
  EXPECT_EQ(r.total, 160u);
  EXPECT_LE(r.matched_non_members, 80u);
  EXPECT_GE(r.matched_non_members, 5u);
  EXPECT_GE(r.matched_similarity, r.random_similarity);
}

TEST(Experiments, BaselineTableHasAllTiers) {
  const Fixture f = small_world();
  const auto rows = baseline_table(f.ds, f.art, fast_config());
  std::set<std::string> tiers, names;
  for (const auto& r : rows) {
    tiers.insert(r.tier);
    names.insert(r.name);
    EXPECT_GE(r.auc, 0.0);
    EXPECT_LE(r.auc, 1.0);
  }
  EXPECT_EQ(tiers.size(), 3u);
  EXPECT_TRUE(names.count("ppl") && names.count("zlib") && names.count("min_k_10"));
}

TEST(Experiments, NoiseControlUsesComparableRuns) {
  const Fixture f = small_world();
  ExperimentConfig c = fast_config();
  c.levels = LevelSet{};
  const EvaluationReport clean = evaluate_table(extract_features(f.ds, f.art, c.levels), c, "clean");
  const DeltaTable t = noise_block_control(f.ds, f.art, clean, c);
  EXPECT_EQ(t.rows.size(), default_noise_blocks(f.art).size() * c.noise_eps.size());
  for (const auto& r : t.rows) EXPECT_NEAR(r.delta, r.auc - clean.mean_auc, 1e-12);
}

TEST(Experiments, RunEvaluationWithAllControlsProducesEverySection) {
  const Fixture f = small_world();
  const ControlResults r = run_evaluation(f.ds, f.art, fast_config(), ControlSelection::all());
  EXPECT_TRUE(r.permutation && r.l3_only && r.loo && r.pca_sweep && r.pc_rank && r.same_topic && r.layer_sweep &&
              r.baselines && r.noise);
  const auto doc = controls_to_json(r);
  for (const char* key : {"main", "permutation", "l3_only", "loo", "pca_sweep", "pc_rank", "same_topic",
                          "layer_sweep", "baselines", "noise"})
    EXPECT_TRUE(doc.contains(key)) << key;
  const std::string text = format_controls(r);
  EXPECT_NE(text.find("Permuted AUC"), std::string::npos);
  EXPECT_NE(text.find("Leave-one-layer-out"), std::string::npos);
}

TEST(Experiments, MissingSurfaceSectionsAreNotedNotFatal) {
  PlantedSpec spec = PlantedSpec::simple(4, 4, 80, 2.0, std::vector<std::size_t>{1}, 1.0, 3);
  const Dataset ds = generate(spec);
  CalibrationConfig cc;
  cc.n_cal = 40;
  cc.threshold = 0.28;
  const CalibrationArtifact art = calibrate(ds, cc);
  ExperimentConfig c = fast_config();
  c.levels = LevelSet{};
  ControlSelection sel;
  sel.same_topic = true;
  sel.loo = true;
  const ControlResults r = run_evaluation(ds, art, c, sel);
  EXPECT_FALSE(r.same_topic.has_value());
  EXPECT_FALSE(r.loo.has_value());
  EXPECT_EQ(r.notes.size(), 2u);
}

TEST(Reports, EvaluationReportJsonRoundTrip) {
  const Fixture f = small_world();
  ExperimentConfig c = fast_config();
  c.eval.n_boot = 200;
  const EvaluationReport r = evaluate_table(extract_features(f.ds, f.art, LevelSet{}), c, "tagged");
  EXPECT_EQ(report_from_json(report_to_json(r)), r);
  EXPECT_THROW(report_from_json(nlohmann::json{{"format", "nope"}}), InvalidInput);
  const std::string text = format_report(r);
  EXPECT_NE(text.find("[tagged]"), std::string::npos);
  EXPECT_NE(text.find("bootstrap"), std::string::npos);
}

TEST(Reports, TableRenderingAndNumberFormatting) {
  TextTable t({"Name", "AUC"});
  t.add_row({"alpha", "0.500"});
  t.add_row({"b", "10.125"});
  EXPECT_EQ(t.render(), "Name      AUC\n-------------\nalpha   0.500\nb      10.125\n");
  EXPECT_THROW(t.add_row({"only-one"}), InvalidInput);
  EXPECT_EQ(fmt(-0.0001), "0.000");
  EXPECT_EQ(fmt_signed(-0.0001), "+0.000");
  EXPECT_EQ(fmt_signed(-0.25, 2), "-0.25");
}

TEST(Reports, SweepAblationAndDeltaRoundTrips) {
  const std::vector<SweepRow> rows{{1, 0.6}, {2, 0.7}};
  const auto back = sweep_from_json(sweep_to_json(rows, "k"));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].key, 2u);
  EXPECT_DOUBLE_EQ(back[1].auc, 0.7);

  AblationTable ab{0.8, {{3, 0.75, -0.05}}};
  const AblationTable ab2 = ablation_from_json(ablation_to_json(ab));
  EXPECT_DOUBLE_EQ(ab2.rows[0].delta, -0.05);

  DeltaTable dt{"clean", 0.8, {{"target eps=0.5", 0.7, -0.1}}};
  const DeltaTable dt2 = delta_table_from_json(delta_table_to_json(dt));
  EXPECT_EQ(dt2.rows[0].condition, "target eps=0.5");
  EXPECT_NE(format_delta_table(dt).find("-0.100"), std::string::npos);
}
