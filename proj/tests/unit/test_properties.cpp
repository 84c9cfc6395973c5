#include <gtest/gtest.h>

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <random>

#include "crm/audit_service.hpp"
#include "crm/calibration.hpp"
#include "crm/detector_lab.hpp"
#include "crm/experiments.hpp"
#include "crm/synth_oracle.hpp"
#include "crm/trace_store.hpp"
#include "oracles.hpp"

using namespace crm;

namespace {

constexpr int kTrials = 200;

std::vector<int> random_labels(std::mt19937_64& gen, std::size_t n) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(gen() & 1);
  y[0] = 0;
  y[1] = 1;
  return y;
}

std::vector<double> random_vector(std::mt19937_64& gen, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(gen);
  return v;
}

Eigen::MatrixXd random_matrix(std::mt19937_64& gen, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = nd(gen);
  return m;
}

Eigen::MatrixXd random_orthogonal(std::mt19937_64& gen, std::size_t d) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(gen, d, d));
  return qr.householderQ();
}

// Displacements with one dominant axis so PC1 is well separated from PC2.
Eigen::MatrixXd anisotropic(std::mt19937_64& gen, std::size_t n, std::size_t d) {
  Eigen::MatrixXd x = random_matrix(gen, n, d);
  x.col(0) *= 6.0;
  return x * random_orthogonal(gen, d).transpose();
}

double lts(const Eigen::RowVectorXd& disp, const LayerDirection& dir) {
  const std::vector<double> v(disp.data(), disp.data() + disp.size());
  return project_displacement(v, dir);
}

}  // namespace

TEST(AucProperty, InvariantUnderStrictlyIncreasingTransforms) {
  std::mt19937_64 gen(21);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t n = 2 + gen() % 150;
    const auto y = random_labels(gen, n);
    auto s = random_vector(gen, n);
    for (std::size_t i = 0; i + 1 < n; i += 3) s[i + 1] = s[i];  // plant ties
    std::vector<double> cubed(n), squashed(n);
    for (std::size_t i = 0; i < n; ++i) {
      cubed[i] = s[i] * s[i] * s[i] + 5.0;
      squashed[i] = std::atan(s[i]) * 100.0;
    }
    const double base = roc_auc(s, y);
    EXPECT_EQ(roc_auc(cubed, y), base);
    EXPECT_EQ(roc_auc(squashed, y), base);
  }
}

TEST(AucProperty, ComplementOfNegatedScoresForTieFreeInput) {
  std::mt19937_64 gen(22);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t n = 2 + gen() % 150;
    const auto y = random_labels(gen, n);
    const auto s = random_vector(gen, n);
    std::vector<double> neg(n);
    std::transform(s.begin(), s.end(), neg.begin(), [](double x) { return -x; });
    EXPECT_NEAR(roc_auc(s, y) + roc_auc(neg, y), 1.0, 1e-12);
  }
}

TEST(AucProperty, MatchesAllPairsCountOnSmallInstances) {
  std::mt19937_64 gen(23);
  std::uniform_int_distribution<int> level(0, 6);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t n = 2 + gen() % 199;
    const auto y = random_labels(gen, n);
    std::vector<double> s(n);
    for (auto& v : s) v = level(gen);
    EXPECT_DOUBLE_EQ(roc_auc(s, y), oracle::all_pairs_auc(s, y));
  }
}

TEST(FoldProperty, StratifiedPartitionForAnyLabelMultiset) {
  std::mt19937_64 gen(24);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t k = 2 + gen() % 9;
    // Each class needs at least k members for a k-fold plan.
    const std::size_t n1 = k + gen() % 150, n0 = k + gen() % 150, n = n0 + n1;
    std::vector<int> y(n, 0);
    std::fill(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n1), 1);
    std::shuffle(y.begin(), y.end(), gen);
    const FoldPlan plan = make_folds(y, k, gen());
    ASSERT_EQ(plan.fold_of.size(), n);
    std::size_t covered = 0;
    for (std::size_t f = 0; f < k; ++f) covered += plan.test_indices(f).size();
    EXPECT_EQ(covered, n);
    EXPECT_LE(oracle::stratification_deviation(y, plan.fold_of, k), 1.0);
  }
}

TEST(DetectorProperty, AffineFeatureRescalingLeavesOutOfFoldAucUnchanged) {
  std::mt19937_64 gen(25);
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 120, p = 4;
    const auto y = random_labels(gen, n);
    Eigen::MatrixXd x = random_matrix(gen, n, p);
    for (std::size_t i = 0; i < n; ++i) x(static_cast<Eigen::Index>(i), 0) += 0.8 * y[i];
    Eigen::MatrixXd scaled = x;
    for (Eigen::Index j = 0; j < scaled.cols(); ++j) scaled.col(j) = scaled.col(j).array() * (0.01 + 50.0 * j) - 7.0 * j;
    const FoldPlan plan = make_folds(y, 5, 42);
    EvalConfig cfg;
    cfg.n_boot = 0;
    const EvaluationReport a = cross_validate(x, y, plan, cfg);
    const EvaluationReport b = cross_validate(scaled, y, plan, cfg);
    EXPECT_NEAR(a.pooled_auc, b.pooled_auc, 1e-9);
    EXPECT_NEAR(a.mean_auc, b.mean_auc, 1e-9);
    EXPECT_EQ(cross_validate(x, y, plan, cfg), a);
  }
}

TEST(ProjectionProperty, LinearAlongAChainOfStates) {
  std::mt19937_64 gen(26);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t d = 1 + gen() % 32;
    const auto h0 = random_vector(gen, d, 10.0), hc = random_vector(gen, d, 10.0), h2 = random_vector(gen, d, 10.0);
    LayerDirection dir;
    dir.v = random_vector(gen, d);
    const double norm = std::sqrt(std::inner_product(dir.v.begin(), dir.v.end(), dir.v.begin(), 0.0));
    for (auto& x : dir.v) x /= norm;
    const double lhs = lts_project<double>(h0, hc, dir) + lts_project<double>(hc, h2, dir);
    EXPECT_NEAR(lhs, lts_project<double>(h0, h2, dir), 1e-9);
  }
}

TEST(DirectionProperty, Pc1IsBitIdenticalAcrossCalls) {
  std::mt19937_64 gen(27);
  for (int t = 0; t < 20; ++t) {
    const Eigen::MatrixXd x = anisotropic(gen, 40 + gen() % 100, 2 + gen() % 20);
    EXPECT_EQ(pc1_direction(x, 3), pc1_direction(x, 3));
  }
}

TEST(DirectionProperty, ScalingDisplacementsScalesLtsAndKeepsDirections) {
  std::mt19937_64 gen(28);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 60, d = 2 + gen() % 10;
    const Eigen::MatrixXd x = anisotropic(gen, n, d);
    const auto y = random_labels(gen, n);
    const double s = std::exp(std::uniform_real_distribution<double>(-3.0, 3.0)(gen));
    const Eigen::MatrixXd xs = s * x;
    const LayerDirection p = pc1_direction(x), ps = pc1_direction(xs);
    const LayerDirection u = supervised_direction(x, y), us = supervised_direction(xs, y);
    for (std::size_t j = 0; j < d; ++j) {
      EXPECT_NEAR(p.v[j], ps.v[j], 1e-9);
      EXPECT_NEAR(u.v[j], us.v[j], 1e-9);
    }
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      EXPECT_NEAR(lts(xs.row(i), ps), s * lts(x.row(i), p), 1e-9 * std::max(1.0, s));
      EXPECT_NEAR(lts(xs.row(i), us), s * lts(x.row(i), u), 1e-9 * std::max(1.0, s));
    }
  }
}

// The supervised direction rotates exactly. PC1 is fixed by a coordinate-wise
// sign rule that is not rotation invariant, so it matches up to sign.
TEST(DirectionProperty, RotatingStatesRotatesDirections) {
  std::mt19937_64 gen(29);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 80, d = 2 + gen() % 10;
    const Eigen::MatrixXd x = anisotropic(gen, n, d);
    const auto y = random_labels(gen, n);
    const Eigen::MatrixXd q = random_orthogonal(gen, d);
    const Eigen::MatrixXd xq = x * q.transpose();

    const LayerDirection u = supervised_direction(x, y), uq = supervised_direction(xq, y);
    const Eigen::VectorXd expected = q * Eigen::Map<const Eigen::VectorXd>(u.v.data(), static_cast<Eigen::Index>(d));
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(uq.v[j], expected[static_cast<Eigen::Index>(j)], 1e-6);

    const LayerDirection p = pc1_direction(x), pq = pc1_direction(xq);
    const Eigen::VectorXd pexp = q * Eigen::Map<const Eigen::VectorXd>(p.v.data(), static_cast<Eigen::Index>(d));
    const double sign = pexp.dot(Eigen::Map<const Eigen::VectorXd>(pq.v.data(), static_cast<Eigen::Index>(d))) >= 0 ? 1.0 : -1.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      EXPECT_NEAR(lts(xq.row(i), uq), lts(x.row(i), u), 1e-6);
      EXPECT_NEAR(lts(xq.row(i), pq), sign * lts(x.row(i), p), 1e-6);
    }
  }
}

TEST(KlProperty, MeanVarianceAndTrendReversal) {
  std::mt19937_64 gen(30);
  std::exponential_distribution<double> ex(2.0);
  for (int t = 0; t < kTrials; ++t) {
    std::vector<double> s(1 + gen() % 80);
    for (auto& v : s) v = ex(gen);
    const KlStatistics k = kl_statistics(s);
    EXPECT_NEAR(k.mean, oracle::direct_mean(s), 1e-12);
    EXPECT_GE(k.variance, 0.0);
    std::vector<double> r(s.rbegin(), s.rend());
    EXPECT_NEAR(kl_statistics(r).trend, -k.trend, 1e-12);
  }
}

TEST(SemanticDeltaProperty, SymmetricAndBounded) {
  std::mt19937_64 gen(31);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t d = 1 + gen() % 64;
    const auto a = random_vector(gen, d), b = random_vector(gen, d);
    const double ab = semantic_delta(a, b);
    EXPECT_DOUBLE_EQ(ab, semantic_delta(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 2.0);
    std::vector<double> neg(a);
    for (auto& x : neg) x = -x;
    EXPECT_NEAR(semantic_delta(a, neg), 2.0, 1e-12);
  }
}

TEST(BaselineProperty, MinKAtHundredPercentIsTheMean) {
  std::mt19937_64 gen(32);
  std::exponential_distribution<double> ex(0.5);
  const std::vector<double> k{100.0};
  for (int t = 0; t < kTrials; ++t) {
    std::vector<double> lp(1 + gen() % 300);
    for (auto& v : lp) v = -ex(gen);
    const auto out = likelihood_baselines(lp, "some document text", k);
    double sum = 0.0;
    for (double v : lp) sum += v;
    const double mean = sum / static_cast<double>(lp.size());
    EXPECT_NEAR(out.at("min_k_100"), mean, 1e-14 * std::abs(mean));
    EXPECT_DOUBLE_EQ(std::exp(-out.at("min_k_100")), out.at("ppl"));
  }
}

TEST(TraceProperty, RoundTripAndByteDeterminism) {
  std::mt19937_64 gen(33);
  for (int t = 0; t < 50; ++t) {
    const Dataset ds = oracle::random_dataset(gen);
    std::stringstream a, b;
    write_trace(ds, a);
    write_trace(ds, b);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(read_trace(a), ds);
  }
}

TEST(TraceProperty, CalibrationSplitIsPure) {
  std::mt19937_64 gen(34);
  const Dataset ds = generate(PlantedSpec::simple(2, 3, 60, 1.0, std::vector<std::size_t>{0}, 1.0, 2));
  for (int t = 0; t < 20; ++t) {
    const std::size_t n_cal = 2 + gen() % 50;
    const std::uint64_t seed = gen();
    const auto a = split_calibration(ds, n_cal, seed), b = split_calibration(ds, n_cal, seed);
    EXPECT_EQ(a.calibration, b.calibration);
    EXPECT_EQ(a.indices, b.indices);
  }
}

TEST(OracleProperty, ClosedFormWithinThreeStandardErrorsOfMonteCarlo) {
  std::mt19937_64 gen(35);
  for (int t = 0; t < 8; ++t) {
    const std::size_t d = 2 + gen() % 3;
    PlantedSpec spec = PlantedSpec::simple(2, d, 10, std::uniform_real_distribution<double>(0.2, 2.5)(gen),
                                           std::vector<std::size_t>{0, 1}, 1.0);
    spec.nuisance.push_back({1, basis_axis(d, d - 1), 1.5});
    const auto w0 = random_vector(gen, d), w1 = random_vector(gen, d);
    const LinearFunctional f{{{0, w0}, {1, w1}}};
    const OracleAuc exact = oracle_auc(spec, f);
    ASSERT_TRUE(exact.closed_form);
    const OracleAuc mc = monte_carlo_auc(spec, f, 100000, gen());
    EXPECT_LT(std::abs(exact.auc - mc.auc), 3.0 * *mc.standard_error) << t;
  }
}

TEST(OracleProperty, GenerateIsSeedDeterministicAndBalanced) {
  std::mt19937_64 gen(36);
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 2 * (1 + gen() % 50);
    PlantedSpec spec = PlantedSpec::simple(1 + gen() % 3, 1 + gen() % 4, n, 1.0, std::vector<std::size_t>{0}, 1.0, gen());
    const Dataset a = generate(spec);
    EXPECT_EQ(a, generate(spec));
    std::size_t members = 0;
    for (const auto& s : a.samples) members += static_cast<std::size_t>(s.label);
    EXPECT_EQ(members, n / 2);
  }
}

TEST(OracleProperty, CrossValidatedAucApproachesClosedFormAtTwoThousand) {
  PlantedSpec spec;
  spec.num_layers = 1;
  spec.hidden_dim = 4;
  spec.num_samples = 2000;
  spec.member_shift = 1.0;
  spec.shift_axes = {basis_axis(4, 1)};
  const Dataset ds = generate(spec);
  CalibrationConfig cc;
  cc.n_cal = 1000;
  cc.direction.kind = DirectionKind::supervised;
  const CalibrationArtifact art = calibrate(ds, cc);
  ExperimentConfig cfg;
  cfg.eval.n_boot = 0;
  const double got = evaluate_table(extract_features(ds, art, LevelSet{}), cfg).pooled_auc;
  EXPECT_NEAR(got, oracle_auc(spec, LinearFunctional::along(0, basis_axis(4, 1))).auc, 0.02);
}

TEST(AnomalyProperty, ZRuleIsAffineConsistent) {
  std::mt19937_64 gen(37);
  std::uniform_real_distribution<double> u(-3.0, 3.0), s(0.1, 4.0);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t L = 1 + gen() % 30;
    const double a = (gen() & 1 ? 1.0 : -1.0) * std::exp(u(gen)), b = 5.0 * u(gen);
    CalibrationArtifact art, art2;
    art.num_layers = art2.num_layers = static_cast<std::uint32_t>(L);
    art.hidden_dim = art2.hidden_dim = 1;
    std::vector<double> x(L), x2(L);
    double margin = 1e9;
    for (std::size_t l = 0; l < L; ++l) {
      const double m = u(gen), sd = s(gen);
      x[l] = m + 3.0 * sd * u(gen) / 3.0;
      x2[l] = a * x[l] + b;
      art.directions.push_back({l, {1.0}});
      art2.directions.push_back({l, {1.0}});
      art.lts_stats.push_back({m, sd});
      art2.lts_stats.push_back({a * m + b, std::abs(a) * sd});
      margin = std::min(margin, std::abs(std::abs(x[l] - m) / sd - 2.0));
    }
    const AnomalyResult r1 = score_anomaly(x, art), r2 = score_anomaly(x2, art2);
    EXPECT_NEAR(r1.score, r2.score, 1e-9 * std::max(1.0, r1.score));
    if (margin > 1e-9) EXPECT_EQ(r1.flag, r2.flag);
    EXPECT_GE(r1.score, 0.0);
  }
}
