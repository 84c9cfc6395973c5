#pragma once

// Detector training and evaluation: stratified folds, L2-regularised logistic
// regression, exact ROC-AUC, bootstrap intervals and the control/ablation
// suite built on cross-validation.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "crm/calibration.hpp"

namespace crm {

struct FoldPlan {
  std::size_t k = 5;
  std::uint64_t seed = 42;
  std::vector<std::size_t> fold_of;  // one entry per sample

  std::vector<std::size_t> test_indices(std::size_t fold) const;
  std::vector<std::size_t> train_indices(std::size_t fold) const;
};

FoldPlan make_folds(std::span<const int> labels, std::size_t k, std::uint64_t seed);

struct TrainerConfig {
  double l2_strength = 1.0;  // penalty 0.5 * l2_strength * |w|^2 on standardised weights
  std::size_t max_iter = 500;
  double tol = 1e-8;         // gradient infinity-norm at convergence
};

struct LinearModel {
  Eigen::VectorXd weights;  // on standardised features
  double bias = 0.0;
  Eigen::VectorXd feature_mean;
  Eigen::VectorXd feature_scale;  // 1 for zero-variance features
  std::size_t iterations = 0;
  double gradient_norm = 0.0;

  Eigen::VectorXd decision(const Eigen::MatrixXd& features) const;
};

LinearModel train_lr(const Eigen::MatrixXd& features, std::span<const int> labels, const TrainerConfig& config = {});

// Mann-Whitney AUC with half credit for ties.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Interval&) const = default;
};

Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels, std::size_t n_boot,
                      std::uint64_t seed, double level = 0.95);

struct EvalConfig {
  TrainerConfig trainer;
  std::size_t n_boot = 1000;
  std::uint64_t bootstrap_seed = 42;
  double ci_level = 0.95;
  std::string classifier = "logistic_regression";
};

struct EvaluationReport {
  std::string tag;  // perturbation / condition label, excluded from the fingerprint
  std::string classifier = "logistic_regression";
  std::size_t k = 0;
  std::uint64_t fold_seed = 0;
  std::vector<double> per_fold_auc;
  double mean_auc = 0.0;
  double pooled_auc = 0.0;
  Interval ci;
  std::size_t n_boot = 0;
  std::string config_fingerprint;
  std::vector<double> oof_scores;
  std::vector<std::size_t> fold_of;

  bool operator==(const EvaluationReport&) const = default;
};

// Fingerprint of everything that must match for two runs to be comparable.
std::string evaluation_fingerprint(const EvalConfig& config, const FoldPlan& plan, std::size_t num_samples,
                                   std::size_t num_features);

EvaluationReport cross_validate(const Eigen::MatrixXd& features, std::span<const int> labels, const FoldPlan& plan,
                                const EvalConfig& config = {});

// Mean cross-validated AUC per label shuffle. Folds are re-stratified on each
// shuffled label vector with (k, fold_seed).
std::vector<double> permutation_control(const Eigen::MatrixXd& features, std::span<const int> labels,
                                        std::size_t k, std::uint64_t fold_seed, std::size_t n_perms,
                                        std::uint64_t seed, const EvalConfig& config = {});

struct AblationRow {
  std::size_t layer = 0;
  double auc = 0.0;
  double delta = 0.0;  // ablated - full
};

struct AblationTable {
  double full_auc = 0.0;
  std::vector<AblationRow> rows;
};

AblationTable loo_ablation(const FeatureTable& table, const FoldPlan& plan, const EvalConfig& config = {});

struct SweepRow {
  std::size_t key = 0;  // k for PCA sweeps, rank for PC-rank sweeps, layer for layer sweeps
  double auc = 0.0;
};

// PCA fitted inside each training fold on the concatenated displacements,
// both folds projected onto the top k axes, LR evaluated per k.
std::vector<SweepRow> pca_dim_sweep(const Eigen::MatrixXd& displacements, std::span<const int> labels,
                                    const FoldPlan& plan, std::span<const std::size_t> ks,
                                    const EvalConfig& config = {});

struct TopicMatching {
  std::vector<std::size_t> match;  // member row -> non-member row
  std::vector<double> similarity;
  double mean_similarity = 0.0;
};

TopicMatching same_topic_pairs(const Eigen::MatrixXd& members, const Eigen::MatrixXd& non_members,
                               bool with_replacement = true);

struct DeltaRow {
  std::string condition;
  double auc = 0.0;
  double delta = 0.0;  // perturbed - clean
};

struct DeltaTable {
  std::string clean_tag;
  double clean_auc = 0.0;
  std::vector<DeltaRow> rows;
};

DeltaTable delta_auc_report(const EvaluationReport& clean,
                            std::span<const std::pair<std::string, EvaluationReport>> perturbed);

}  // namespace crm
