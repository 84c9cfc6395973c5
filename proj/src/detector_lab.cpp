#include "crm/detector_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "crm/digest.hpp"
#include "crm/error.hpp"
#include "crm/random.hpp"

namespace crm {

// --- folds ----------------------------------------------------------------

std::vector<std::size_t> FoldPlan::test_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i)
    if (fold_of[i] == fold) out.push_back(i);
  return out;
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i)
    if (fold_of[i] != fold) out.push_back(i);
  return out;
}

FoldPlan make_folds(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw InvalidInput("fold count must be at least 2");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InvalidInput("labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  for (int c = 0; c < 2; ++c)
    if (by_class[c].size() < k)
      throw InvalidInput("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                         " samples, fewer than k = " + std::to_string(k));

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.fold_of.assign(labels.size(), 0);
  // Round-robin within each shuffled class; the second class starts where the
  // first stopped so fold totals stay balanced too.
  std::size_t offset = 0;
  for (int c = 0; c < 2; ++c) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    rng.shuffle(std::span<std::size_t>(by_class[c]));
    for (std::size_t pos = 0; pos < by_class[c].size(); ++pos) plan.fold_of[by_class[c][pos]] = (offset + pos) % k;
    offset = (offset + by_class[c].size()) % k;
  }
  return plan;
}

// --- logistic regression --------------------------------------------------

Eigen::VectorXd LinearModel::decision(const Eigen::MatrixXd& features) const {
  if (features.cols() != weights.size()) throw InvalidInput("LinearModel: feature width mismatch");
  const Eigen::MatrixXd z =
      (features.rowwise() - feature_mean.transpose()).array().rowwise() / feature_scale.transpose().array();
  return (z * weights).array() + bias;
}

namespace {

double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

LinearModel train_lr(const Eigen::MatrixXd& features, std::span<const int> labels, const TrainerConfig& config) {
  const Eigen::Index n = features.rows();
  const Eigen::Index p = features.cols();
  if (static_cast<std::size_t>(n) != labels.size()) throw InvalidInput("train_lr: label count differs from rows");
  std::size_t positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw InvalidInput("train_lr: labels must be 0 or 1");
    positives += static_cast<std::size_t>(y);
  }
  if (positives == 0 || positives == labels.size()) throw InvalidInput("train_lr needs both classes present");
  if (!(config.l2_strength > 0.0)) throw InvalidInput("train_lr: l2_strength must be positive");

  LinearModel model;
  model.feature_mean = features.colwise().mean().transpose();
  model.feature_scale = Eigen::VectorXd::Ones(p);
  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double var = (features.col(j).array() - model.feature_mean[j]).square().mean();
    const double sd = std::sqrt(var);
    if (sd > 1e-12 * (1.0 + std::abs(model.feature_mean[j]))) {
      model.feature_scale[j] = sd;
      active.push_back(j);
    }
  }

  // Design matrix: standardised active columns plus an intercept column.
  const auto a = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd z(n, a + 1);
  for (Eigen::Index c = 0; c < a; ++c)
    z.col(c) = (features.col(active[c]).array() - model.feature_mean[active[c]]) / model.feature_scale[active[c]];
  z.col(a).setOnes();
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = labels[static_cast<std::size_t>(i)];

  const double lambda = config.l2_strength;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(a + 1);
  auto objective = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = z * b;
    double f = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) f += log1pexp(eta[i]) - y[i] * eta[i];
    return f + 0.5 * lambda * b.head(a).squaredNorm();
  };

  double f = objective(beta);
  double grad_norm = 0.0;
  std::size_t iter = 0;
  for (;; ++iter) {
    const Eigen::VectorXd eta = z * beta;
    Eigen::VectorXd prob(n), weight(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      prob[i] = sigmoid(eta[i]);
      weight[i] = prob[i] * (1.0 - prob[i]);
    }
    Eigen::VectorXd grad = z.transpose() * (prob - y);
    grad.head(a) += lambda * beta.head(a);
    grad_norm = grad.lpNorm<Eigen::Infinity>();
    if (grad_norm <= config.tol) break;
    if (iter >= config.max_iter)
      throw ConvergenceError("logistic regression did not converge in " + std::to_string(config.max_iter) +
                                 " iterations (gradient norm " + std::to_string(grad_norm) + ")",
                             grad_norm);

    Eigen::MatrixXd hessian = z.transpose() * weight.asDiagonal() * z;
    hessian.diagonal().head(a).array() += lambda;
    hessian(a, a) += 1e-12;  // intercept curvature can vanish on separable folds
    const Eigen::VectorXd step = hessian.ldlt().solve(-grad);

    // Armijo backtracking; the relative slack absorbs round-off near the optimum.
    const double slope = grad.dot(step);
    double t = 1.0;
    Eigen::VectorXd candidate = beta + step;
    double f_new = objective(candidate);
    int halvings = 0;
    while (f_new > f + 1e-4 * t * slope + 1e-13 * std::abs(f) && halvings < 60) {
      t *= 0.5;
      candidate = beta + t * step;
      f_new = objective(candidate);
      ++halvings;
    }
    beta = candidate;
    f = f_new;
  }

  model.weights = Eigen::VectorXd::Zero(p);
  for (Eigen::Index c = 0; c < a; ++c) model.weights[active[c]] = beta[c];
  model.bias = beta[a];
  model.iterations = iter;
  model.gradient_norm = grad_norm;
  return model;
}

// --- AUC ------------------------------------------------------------------

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidInput("roc_auc: score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw InvalidInput("roc_auc: NaN score");
    (labels[i] == 1 ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0) throw InvalidInput("roc_auc needs both classes present");
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the Mann-Whitney count: 2 per concordant pair, 1 per tie.
  std::uint64_t twice = 0, neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t group_pos = 0, group_neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? group_pos : group_neg) += 1;
      ++j;
    }
    twice += 2 * group_pos * neg_below + group_pos * group_neg;
    neg_below += group_neg;
    i = j;
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels, std::size_t n_boot,
                      std::uint64_t seed, double level) {
  if (n_boot < 100) throw InvalidInput("bootstrap needs at least 100 resamples");
  if (!(level > 0.0 && level < 1.0)) throw InvalidInput("confidence level must lie in (0, 1)");
  if (scores.size() != labels.size()) throw InvalidInput("bootstrap_ci: score and label counts differ");
  const std::size_t n = scores.size();
  bool has[2] = {false, false};
  for (int y : labels) has[y == 1] = true;
  if (!has[0] || !has[1]) throw InvalidInput("bootstrap_ci needs both classes present");

  Rng rng(seed);
  std::vector<double> aucs;
  aucs.reserve(n_boot);
  std::vector<double> s(n);
  std::vector<int> y(n);
  while (aucs.size() < n_boot) {
    bool seen[2] = {false, false};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = rng.uniform_index(n);
      s[i] = scores[idx];
      y[i] = labels[idx];
      seen[y[i] == 1] = true;
    }
    if (!seen[0] || !seen[1]) continue;  // redraw single-class resamples
    aucs.push_back(roc_auc(s, y));
  }
  std::sort(aucs.begin(), aucs.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(aucs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, aucs.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return aucs[lo] + frac * (aucs[hi] - aucs[lo]);
  };
  const double alpha = (1.0 - level) / 2.0;
  return {quantile(alpha), quantile(1.0 - alpha)};
}

// --- cross-validation -----------------------------------------------------

std::string evaluation_fingerprint(const EvalConfig& config, const FoldPlan& plan, std::size_t num_samples,
                                   std::size_t num_features) {
  const nlohmann::json doc{
      {"classifier", config.classifier},
      {"k", plan.k},
      {"fold_seed", plan.seed},
      {"l2_strength", config.trainer.l2_strength},
      {"max_iter", config.trainer.max_iter},
      {"tol", config.trainer.tol},
      {"n_boot", config.n_boot},
      {"bootstrap_seed", config.bootstrap_seed},
      {"ci_level", config.ci_level},
      {"num_samples", num_samples},
      {"num_features", num_features},
  };
  return sha256_hex(doc.dump()).substr(0, 16);
}

namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::vector<int> take(std::span<const int> labels, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(labels[r]);
  return out;
}

void check_plan(const FoldPlan& plan, std::size_t n) {
  if (plan.fold_of.size() != n) throw InvalidInput("fold plan does not cover every sample");
  for (std::size_t f : plan.fold_of)
    if (f >= plan.k) throw InvalidInput("fold plan assigns an out-of-range fold");
}

}  // namespace

EvaluationReport cross_validate(const Eigen::MatrixXd& features, std::span<const int> labels, const FoldPlan& plan,
                                const EvalConfig& config) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (labels.size() != n) throw InvalidInput("cross_validate: label count differs from rows");
  check_plan(plan, n);

  EvaluationReport report;
  report.classifier = config.classifier;
  report.k = plan.k;
  report.fold_seed = plan.seed;
  report.fold_of = plan.fold_of;
  report.oof_scores.assign(n, 0.0);
  report.n_boot = config.n_boot;
  report.config_fingerprint = evaluation_fingerprint(config, plan, n, static_cast<std::size_t>(features.cols()));

  for (std::size_t fold = 0; fold < plan.k; ++fold) {
    const auto train = plan.train_indices(fold);
    const auto test = plan.test_indices(fold);
    const LinearModel model = train_lr(take_rows(features, train), take(labels, train), config.trainer);
    const Eigen::VectorXd scores = model.decision(take_rows(features, test));
    std::vector<double> fold_scores(scores.data(), scores.data() + scores.size());
    for (std::size_t i = 0; i < test.size(); ++i) report.oof_scores[test[i]] = fold_scores[i];
    report.per_fold_auc.push_back(roc_auc(fold_scores, take(labels, test)));
  }
  report.mean_auc = std::accumulate(report.per_fold_auc.begin(), report.per_fold_auc.end(), 0.0) /
                    static_cast<double>(plan.k);
  report.pooled_auc = roc_auc(report.oof_scores, labels);
  if (config.n_boot > 0) {
    report.ci = bootstrap_ci(report.oof_scores, labels, config.n_boot, config.bootstrap_seed, config.ci_level);
  } else {
    report.ci = {report.pooled_auc, report.pooled_auc};
  }
  return report;
}

std::vector<double> permutation_control(const Eigen::MatrixXd& features, std::span<const int> labels,
                                        std::size_t k, std::uint64_t fold_seed, std::size_t n_perms,
                                        std::uint64_t seed, const EvalConfig& config) {
  if (n_perms == 0) throw InvalidInput("permutation control needs at least one permutation");
  EvalConfig quick = config;
  quick.n_boot = 0;
  std::vector<double> out;
  out.reserve(n_perms);
  for (std::size_t p = 0; p < n_perms; ++p) {
    std::vector<int> shuffled(labels.begin(), labels.end());
    Rng rng(derive_seed(seed, p));
    rng.shuffle(std::span<int>(shuffled));
    const FoldPlan plan = make_folds(shuffled, k, fold_seed);
    out.push_back(cross_validate(features, shuffled, plan, quick).mean_auc);
  }
  return out;
}

AblationTable loo_ablation(const FeatureTable& table, const FoldPlan& plan, const EvalConfig& config) {
  const std::vector<std::size_t> l3 = table.layout.columns(Level::l3);
  if (l3.size() < 2) throw InvalidInput("leave-one-layer-out needs at least 2 L3 features");
  EvalConfig quick = config;
  quick.n_boot = 0;

  AblationTable out;
  out.full_auc = cross_validate(table.values, table.labels, plan, quick).mean_auc;
  for (std::size_t drop : l3) {
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < table.layout.size(); ++c)
      if (c != drop) keep.push_back(c);
    const FeatureTable reduced = table.select_columns(keep);
    const double auc = cross_validate(reduced.values, reduced.labels, plan, quick).mean_auc;
    out.rows.push_back({table.layout.slots[drop].layer.value_or(drop), auc, auc - out.full_auc});
  }
  return out;
}

std::vector<SweepRow> pca_dim_sweep(const Eigen::MatrixXd& displacements, std::span<const int> labels,
                                    const FoldPlan& plan, std::span<const std::size_t> ks,
                                    const EvalConfig& config) {
  if (ks.empty()) throw InvalidInput("PCA sweep needs at least one k");
  const auto n = static_cast<std::size_t>(displacements.rows());
  if (labels.size() != n) throw InvalidInput("pca_dim_sweep: label count differs from rows");
  check_plan(plan, n);
  const std::size_t k_max = *std::max_element(ks.begin(), ks.end());
  if (*std::min_element(ks.begin(), ks.end()) == 0) throw InvalidInput("PCA sweep k must be positive");

  std::vector<std::vector<double>> fold_aucs(ks.size());
  for (std::size_t fold = 0; fold < plan.k; ++fold) {
    const auto train = plan.train_indices(fold);
    const auto test = plan.test_indices(fold);
    const Eigen::MatrixXd train_x = take_rows(displacements, train);
    const PrincipalAxes axes = principal_axes(train_x, k_max);
    if (k_max > axes.rank)
      throw InvalidInput("PCA sweep k = " + std::to_string(k_max) + " exceeds training-fold rank " +
                         std::to_string(axes.rank));
    const Eigen::MatrixXd train_proj = (train_x.rowwise() - axes.mean) * axes.components.transpose();
    const Eigen::MatrixXd test_proj =
        (take_rows(displacements, test).rowwise() - axes.mean) * axes.components.transpose();
    const auto train_y = take(labels, train);
    const auto test_y = take(labels, test);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(ks[i]);
      const LinearModel model = train_lr(train_proj.leftCols(k), train_y, config.trainer);
      const Eigen::VectorXd s = model.decision(test_proj.leftCols(k));
      fold_aucs[i].push_back(roc_auc(std::vector<double>(s.data(), s.data() + s.size()), test_y));
    }
  }
  std::vector<SweepRow> out;
  for (std::size_t i = 0; i < ks.size(); ++i)
    out.push_back({ks[i], std::accumulate(fold_aucs[i].begin(), fold_aucs[i].end(), 0.0) /
                              static_cast<double>(plan.k)});
  return out;
}

TopicMatching same_topic_pairs(const Eigen::MatrixXd& members, const Eigen::MatrixXd& non_members,
                               bool with_replacement) {
  if (members.rows() == 0 || non_members.rows() == 0) throw InvalidInput("same-topic matching needs non-empty pools");
  if (members.cols() != non_members.cols()) throw InvalidInput("same-topic matching: embedding dimensions differ");
  if (!with_replacement && non_members.rows() < members.rows())
    throw InvalidInput("matching without replacement needs at least as many non-members as members");

  auto unit_rows = [](const Eigen::MatrixXd& m) {
    Eigen::MatrixXd out = m;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const double norm = out.row(i).norm();
      if (!(norm > 0.0)) throw InvalidInput("same-topic matching: zero embedding");
      out.row(i) /= norm;
    }
    return out;
  };
  const Eigen::MatrixXd sims = unit_rows(members) * unit_rows(non_members).transpose();

  TopicMatching out;
  std::vector<bool> used(static_cast<std::size_t>(non_members.rows()), false);
  for (Eigen::Index i = 0; i < sims.rows(); ++i) {
    Eigen::Index best = -1;
    for (Eigen::Index j = 0; j < sims.cols(); ++j) {
      if (!with_replacement && used[static_cast<std::size_t>(j)]) continue;
      if (best < 0 || sims(i, j) > sims(i, best)) best = j;
    }
    used[static_cast<std::size_t>(best)] = true;
    out.match.push_back(static_cast<std::size_t>(best));
    out.similarity.push_back(sims(i, best));
  }
  out.mean_similarity =
      std::accumulate(out.similarity.begin(), out.similarity.end(), 0.0) / static_cast<double>(out.similarity.size());
  return out;
}

DeltaTable delta_auc_report(const EvaluationReport& clean,
                            std::span<const std::pair<std::string, EvaluationReport>> perturbed) {
  DeltaTable table;
  table.clean_tag = clean.tag;
  table.clean_auc = clean.mean_auc;
  for (const auto& [name, report] : perturbed) {
    if (report.config_fingerprint != clean.config_fingerprint)
      throw IncomparableRuns("incomparable runs: '" + name + "' has fingerprint " + report.config_fingerprint +
                             ", clean run has " + clean.config_fingerprint);
    table.rows.push_back({name, report.mean_auc, report.mean_auc - clean.mean_auc});
  }
  return table;
}

}  // namespace crm
