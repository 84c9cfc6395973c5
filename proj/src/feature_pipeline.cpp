#include "crm/feature_pipeline.hpp"

#include <zlib.h>

#include <algorithm>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace crm {

std::string to_string(DirectionKind kind) {
  switch (kind) {
    case DirectionKind::pc1: return "pc1";
    case DirectionKind::pc_rank: return "pc_rank";
    case DirectionKind::supervised: return "supervised";
  }
  return "unknown";
}

DirectionKind direction_kind_from_string(std::string_view name) {
  if (name == "pc1") return DirectionKind::pc1;
  if (name == "pc_rank") return DirectionKind::pc_rank;
  if (name == "supervised") return DirectionKind::supervised;
  throw InvalidInput("unknown direction kind '" + std::string(name) + "'");
}

std::string to_string(LayerScoreMode mode) {
  return mode == LayerScoreMode::cross_layer_variance ? "cross_layer_variance" : "pc1_explained_variance";
}

LayerScoreMode layer_score_mode_from_string(std::string_view name) {
  if (name == "cross_layer_variance") return LayerScoreMode::cross_layer_variance;
  if (name == "pc1_explained_variance") return LayerScoreMode::pc1_explained_variance;
  throw InvalidInput("unknown layer score mode '" + std::string(name) + "'");
}

void normalize_sign(Eigen::Ref<Eigen::RowVectorXd> v) {
  Eigen::Index best = 0;
  double best_abs = -1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double a = std::abs(v[i]);
    if (a > best_abs) {  // strict: lowest index wins ties
      best_abs = a;
      best = i;
    }
  }
  if (v.size() > 0 && v[best] < 0.0) v = -v;
}

PrincipalAxes principal_axes(const Eigen::MatrixXd& rows, std::size_t max_components) {
  const Eigen::Index n = rows.rows();
  const Eigen::Index d = rows.cols();
  if (n < 2) throw InvalidInput("principal axes need at least 2 samples");
  if (d < 1) throw InvalidInput("principal axes need at least 1 dimension");

  PrincipalAxes out;
  out.mean = rows.colwise().mean();
  const Eigen::MatrixXd centred = rows.rowwise() - out.mean;
  out.total_sum_squares = centred.squaredNorm();

  // Eigendecompose whichever Gram matrix is smaller.
  const bool use_sample_gram = n <= d;
  const Eigen::MatrixXd gram =
      use_sample_gram ? Eigen::MatrixXd(centred * centred.transpose()) : Eigen::MatrixXd(centred.transpose() * centred);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
  if (solver.info() != Eigen::Success) throw Error("eigendecomposition failed");
  const Eigen::VectorXd& evals = solver.eigenvalues();  // ascending
  const Eigen::Index m = evals.size();

  const double top = std::max(evals[m - 1], 0.0);
  const double tol = top * 1e-9 + std::numeric_limits<double>::min();
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < m; ++i)
    if (evals[i] > tol) ++rank;
  if (top <= 0.0) rank = 0;
  out.rank = rank;

  const std::size_t k = std::min(max_components, rank);
  out.components.resize(static_cast<Eigen::Index>(k), d);
  out.eigenvalues.resize(static_cast<Eigen::Index>(k));
  for (std::size_t j = 0; j < k; ++j) {
    const Eigen::Index col = m - 1 - static_cast<Eigen::Index>(j);
    Eigen::RowVectorXd axis;
    if (use_sample_gram) {
      axis = (centred.transpose() * solver.eigenvectors().col(col)).transpose();
    } else {
      axis = solver.eigenvectors().col(col).transpose();
    }
    axis.normalize();
    normalize_sign(axis);
    out.components.row(static_cast<Eigen::Index>(j)) = axis;
    out.eigenvalues[static_cast<Eigen::Index>(j)] = evals[col];
  }
  return out;
}

Eigen::MatrixXd layer_displacements(const Dataset& dataset, std::size_t layer) {
  const std::size_t d = dataset.header.hidden_dim;
  if (layer >= dataset.header.num_layers)
    throw InvalidInput("layer " + std::to_string(layer) + " out of range");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(dataset.samples.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto h0 = dataset.samples[i].h0.row(layer);
    const auto hc = dataset.samples[i].hc.row(layer);
    for (std::size_t j = 0; j < d; ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          static_cast<double>(hc[j]) - static_cast<double>(h0[j]);
  }
  return out;
}

LayerSelection select_target_layers(const Dataset& calibration, double threshold, LayerScoreMode mode) {
  if (calibration.samples.empty()) throw InvalidInput("calibration set is empty");
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidInput("threshold must lie in (0, 1)");

  const std::size_t num_layers = calibration.header.num_layers;
  LayerSelection sel;
  sel.scores.assign(num_layers, 0.0);

  if (mode == LayerScoreMode::cross_layer_variance) {
    double total = 0.0;
    for (std::size_t l = 0; l < num_layers; ++l) {
      const Eigen::MatrixXd disp = layer_displacements(calibration, l);
      const Eigen::RowVectorXd mean = disp.colwise().mean();
      sel.scores[l] = (disp.rowwise() - mean).squaredNorm() / static_cast<double>(disp.rows());
      total += sel.scores[l];
    }
    if (!(total > 0.0)) throw DegenerateInput("degenerate calibration: zero displacement variance on every layer");
    for (double& s : sel.scores) s /= total;
  } else {
    if (calibration.samples.size() < 2) throw InvalidInput("PC1 layer scoring needs at least 2 samples");
    bool any = false;
    for (std::size_t l = 0; l < num_layers; ++l) {
      const PrincipalAxes axes = principal_axes(layer_displacements(calibration, l), 1);
      if (axes.rank > 0) {
        sel.scores[l] = axes.eigenvalues[0] / axes.total_sum_squares;
        any = true;
      }
    }
    if (!any) throw DegenerateInput("degenerate calibration: zero displacement variance on every layer");
  }

  for (std::size_t l = 0; l < num_layers; ++l)
    if (sel.scores[l] > threshold) sel.layers.push_back(l);
  return sel;
}

LayerDirection pc_rank_direction(const Eigen::MatrixXd& displacements, std::size_t rank, std::size_t layer_index) {
  if (rank == 0) throw InvalidInput("PC rank must be positive");
  if (displacements.rows() < 2) throw InvalidInput("direction fitting needs at least 2 samples");
  const auto max_rank = static_cast<std::size_t>(std::min(displacements.rows() - 1, displacements.cols()));
  if (rank > max_rank)
    throw InvalidInput("PC rank " + std::to_string(rank) + " exceeds min(N-1, d) = " + std::to_string(max_rank));

  const PrincipalAxes axes = principal_axes(displacements, rank);
  if (axes.rank == 0) throw DegenerateInput("degenerate displacements: centred matrix has rank 0");
  if (rank > axes.rank)
    throw InvalidInput("PC rank " + std::to_string(rank) + " exceeds numerical rank " + std::to_string(axes.rank));

  LayerDirection dir;
  dir.layer_index = layer_index;
  dir.kind = rank == 1 ? DirectionKind::pc1 : DirectionKind::pc_rank;
  dir.rank = rank;
  const Eigen::RowVectorXd axis = axes.components.row(static_cast<Eigen::Index>(rank - 1));
  dir.v.assign(axis.data(), axis.data() + axis.size());
  dir.explained_variance_ratio = axes.eigenvalues[static_cast<Eigen::Index>(rank - 1)] / axes.total_sum_squares;
  return dir;
}

LayerDirection pc1_direction(const Eigen::MatrixXd& displacements, std::size_t layer_index) {
  return pc_rank_direction(displacements, 1, layer_index);
}

LayerDirection supervised_direction(const Eigen::MatrixXd& displacements, std::span<const int> labels,
                                    std::size_t layer_index) {
  if (static_cast<std::size_t>(displacements.rows()) != labels.size())
    throw InvalidInput("supervised_direction: label count differs from row count");
  Eigen::RowVectorXd member_sum = Eigen::RowVectorXd::Zero(displacements.cols());
  Eigen::RowVectorXd non_member_sum = Eigen::RowVectorXd::Zero(displacements.cols());
  std::size_t members = 0, non_members = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      member_sum += displacements.row(static_cast<Eigen::Index>(i));
      ++members;
    } else {
      non_member_sum += displacements.row(static_cast<Eigen::Index>(i));
      ++non_members;
    }
  }
  if (members == 0 || non_members == 0) throw InvalidInput("supervised direction needs both classes present");

  const Eigen::RowVectorXd diff =
      member_sum / static_cast<double>(members) - non_member_sum / static_cast<double>(non_members);
  const double norm = diff.norm();
  if (norm <= 1e-12) throw DegenerateInput("degenerate direction: class mean displacements coincide");

  LayerDirection dir;
  dir.layer_index = layer_index;
  dir.kind = DirectionKind::supervised;
  dir.rank = 0;
  const Eigen::RowVectorXd unit = diff / norm;
  dir.v.assign(unit.data(), unit.data() + unit.size());
  return dir;
}

double project_displacement(std::span<const double> displacement, const LayerDirection& dir) {
  if (displacement.size() != dir.v.size()) throw InvalidInput("project_displacement: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < displacement.size(); ++i) acc += displacement[i] * dir.v[i];
  return acc;
}

double semantic_delta(std::span<const double> e0, std::span<const double> ec) {
  if (e0.size() != ec.size()) throw InvalidInput("semantic_delta: embedding dimensions differ");
  double n0 = 0.0, nc = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < e0.size(); ++i) {
    n0 += e0[i] * e0[i];
    nc += ec[i] * ec[i];
    dot += e0[i] * ec[i];
  }
  if (!(n0 > 0.0) || !(nc > 0.0)) throw InvalidInput("semantic_delta: zero embedding vector");
  const double cosine = std::clamp(dot / (std::sqrt(n0) * std::sqrt(nc)), -1.0, 1.0);
  return 1.0 - cosine;
}

double semantic_delta(std::span<const float> e0, std::span<const float> ec) {
  const std::vector<double> a(e0.begin(), e0.end());
  const std::vector<double> b(ec.begin(), ec.end());
  return semantic_delta(std::span<const double>(a), std::span<const double>(b));
}

KlStatistics kl_statistics(std::span<const double> series, std::size_t early_window) {
  const std::size_t n = series.size();
  if (n == 0) throw InvalidInput("kl_statistics: empty series");
  if (early_window == 0) throw InvalidInput("kl_statistics: early window must be positive");
  for (double v : series)
    if (!(v >= 0.0)) throw InvalidInput("kl_statistics: negative or NaN KL value");

  KlStatistics st;
  double sum = 0.0;
  st.max = series[0];
  for (double v : series) {
    sum += v;
    st.max = std::max(st.max, v);
  }
  st.mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (double v : series) ss += (v - st.mean) * (v - st.mean);
  st.variance = ss / static_cast<double>(n);

  // The early window shrinks to keep at least one late step; a single-step
  // series has an empty late segment whose mean counts as 0.
  if (n == 1) {
    st.early_late = series[0];
  } else {
    const std::size_t w = std::min(early_window, n - 1);
    double early = 0.0, late = 0.0;
    for (std::size_t i = 0; i < w; ++i) early += series[i];
    for (std::size_t i = w; i < n; ++i) late += series[i];
    st.early_late = early / static_cast<double>(w) - late / static_cast<double>(n - w);
  }

  if (n > 1) {
    const double t_mean = static_cast<double>(n - 1) / 2.0;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dt = static_cast<double>(i) - t_mean;
      num += dt * (series[i] - st.mean);
      den += dt * dt;
    }
    st.trend = num / den;
  }
  return st;
}

KlStatistics kl_statistics(std::span<const float> series, std::size_t early_window) {
  const std::vector<double> values(series.begin(), series.end());
  return kl_statistics(std::span<const double>(values), early_window);
}

std::size_t deflate_length(std::string_view bytes) {
  uLongf out_len = compressBound(static_cast<uLong>(bytes.size()));
  std::vector<Bytef> out(out_len);
  const int rc = compress2(out.data(), &out_len, reinterpret_cast<const Bytef*>(bytes.data()),
                           static_cast<uLong>(bytes.size()), Z_DEFAULT_COMPRESSION);
  if (rc != Z_OK) throw Error("zlib compression failed");
  return out_len;
}

namespace {

std::string min_k_name(double k) {
  std::ostringstream os;
  os << "min_k_" << k;
  return os.str();
}

}  // namespace

std::map<std::string, double> likelihood_baselines(std::span<const double> doc_logprobs, std::string_view doc_text,
                                                   std::span<const double> k_percents) {
  const std::size_t n = doc_logprobs.size();
  if (n == 0) throw InvalidInput("likelihood baselines need at least one token log-probability");
  for (double k : k_percents)
    if (!(k > 0.0 && k <= 100.0)) throw InvalidInput("Min-K percent must lie in (0, 100]");

  // Ascending order; the same summation order backs the mean and Min-K so
  // that Min-K at 100% equals the mean exactly.
  std::vector<double> sorted(doc_logprobs.begin(), doc_logprobs.end());
  std::sort(sorted.begin(), sorted.end());
  const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  const double mean = total / static_cast<double>(n);

  std::map<std::string, double> out;
  out["ppl"] = std::exp(-mean);
  out["zlib"] = -total / (static_cast<double>(deflate_length(doc_text)) * 8.0);
  for (double k : k_percents) {
    auto count = static_cast<std::size_t>(std::ceil(k * static_cast<double>(n) / 100.0 - 1e-9));
    count = std::clamp<std::size_t>(count, 1, n);
    const double partial = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(count), 0.0);
    out[min_k_name(k)] = partial / static_cast<double>(count);
  }
  return out;
}

std::vector<TokenScore> vocab_backproject(const LayerDirection& dir, const Eigen::MatrixXd& unembed,
                                          std::span<const std::string> vocab, std::size_t top_k) {
  if (static_cast<std::size_t>(unembed.cols()) != dir.v.size())
    throw InvalidInput("vocab_backproject: unembedding width differs from direction dimension");
  if (static_cast<std::size_t>(unembed.rows()) != vocab.size())
    throw InvalidInput("vocab_backproject: vocabulary size differs from unembedding rows");
  if (top_k > vocab.size()) throw InvalidInput("vocab_backproject: top_k exceeds vocabulary size");

  const Eigen::Map<const Eigen::VectorXd> v(dir.v.data(), static_cast<Eigen::Index>(dir.v.size()));
  const Eigen::VectorXd scores = unembed * v;
  std::vector<std::size_t> order(vocab.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = scores[static_cast<Eigen::Index>(a)];
                      const double sb = scores[static_cast<Eigen::Index>(b)];
                      return sa != sb ? sa > sb : a < b;
                    });
  std::vector<TokenScore> out;
  out.reserve(top_k);
  for (std::size_t i = 0; i < top_k; ++i)
    out.push_back({order[i], vocab[order[i]], scores[static_cast<Eigen::Index>(order[i])]});
  return out;
}

}  // namespace crm
