#pragma once

// Reference implementations used only by tests. Each one computes its answer
// the slow, obvious way so that it shares no code path with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "crm/trace_store.hpp"

namespace crm::oracle {

// All-pairs Mann-Whitney count: (2 * wins + ties) / (2 * P * N).
inline double all_pairs_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::uint64_t twice = 0, pos = 0, neg = 0;
  for (int y : labels) (y == 1 ? pos : neg)++;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j]) twice += 2;
      else if (scores[i] == scores[j]) twice += 1;
    }
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

inline double direct_mean(const std::vector<double>& x) {
  long double s = 0;
  for (double v : x) s += v;
  return static_cast<double>(s / static_cast<long double>(x.size()));
}

// Population variance by two-pass direct summation in long double.
inline double direct_variance(const std::vector<double>& x) {
  const long double m = direct_mean(x);
  long double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return static_cast<double>(s / static_cast<long double>(x.size()));
}

// Ordinary least squares slope of x against 0, 1, 2, ...
inline double hand_ols_slope(const std::vector<double>& y) {
  const std::size_t n = y.size();
  if (n < 2) return 0.0;
  long double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += i;
    sy += y[i];
    sxx += static_cast<long double>(i) * i;
    sxy += static_cast<long double>(i) * y[i];
  }
  return static_cast<double>((n * sxy - sx * sy) / (n * sxx - sx * sx));
}

// Leading eigenvector of the sample covariance by power iteration on the
// explicitly formed d x d matrix.
inline std::vector<double> power_iteration_pc1(const std::vector<std::vector<double>>& rows, int iterations = 2000) {
  const std::size_t n = rows.size(), d = rows.front().size();
  std::vector<double> mean(d, 0.0);
  for (const auto& r : rows)
    for (std::size_t j = 0; j < d; ++j) mean[j] += r[j] / static_cast<double>(n);
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (const auto& r : rows)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
  std::vector<double> v(d, 1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t j = 0; j < d; ++j) v[j] += 1e-3 * static_cast<double>(j);
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> w(d, 0.0);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) w[a] += cov[a][b] * v[b];
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    for (std::size_t a = 0; a < d; ++a) v[a] = w[a] / norm;
  }
  return v;
}

inline double abs_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return std::abs(ab) / std::sqrt(aa * bb);
}

// Standard normal CDF by composite Simpson integration of the density.
inline double simpson_normal_cdf(double x) {
  const double lo = -12.0;
  if (x <= lo) return 0.0;
  const int n = 20000;
  const double h = (x - lo) / n;
  auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
  double s = pdf(lo) + pdf(x);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * pdf(lo + i * h);
  return s * h / 3.0;
}

// Exhaustive dot-product-and-sort reference for vocabulary back-projection.
inline std::vector<std::pair<std::size_t, double>> exhaustive_backproject(const std::vector<std::vector<double>>& unembed,
                                                                          const std::vector<double>& v,
                                                                          std::size_t top_k) {
  std::vector<std::pair<std::size_t, double>> all;
  for (std::size_t i = 0; i < unembed.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < v.size(); ++j) s += unembed[i][j] * v[j];
    all.emplace_back(i, s);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  all.resize(std::min(top_k, all.size()));
  return all;
}

// Per-fold class-count deviation from n_c / k, maximised over folds/classes.
inline double stratification_deviation(const std::vector<int>& labels, const std::vector<std::size_t>& fold_of,
                                       std::size_t k) {
  double worst = 0.0;
  for (int c = 0; c < 2; ++c) {
    const auto n_c = static_cast<double>(std::count(labels.begin(), labels.end(), c));
    for (std::size_t f = 0; f < k; ++f) {
      std::size_t count = 0;
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == c && fold_of[i] == f) ++count;
      worst = std::max(worst, std::abs(static_cast<double>(count) - n_c / static_cast<double>(k)));
    }
  }
  return worst;
}

// Random dataset with every optional section toggled independently.
inline Dataset random_dataset(std::mt19937_64& gen, std::size_t max_samples = 8, std::size_t max_layers = 4,
                              std::size_t max_dim = 6) {
  std::uniform_int_distribution<std::size_t> n_dist(1, max_samples), l_dist(1, max_layers), d_dist(1, max_dim);
  std::uniform_real_distribution<float> val(-1e3f, 1e3f);
  std::bernoulli_distribution coin(0.5);
  Dataset ds;
  ds.header.model_name = "model-" + std::to_string(gen() % 1000);
  ds.header.num_layers = static_cast<std::uint32_t>(l_dist(gen));
  ds.header.hidden_dim = static_cast<std::uint32_t>(d_dist(gen));
  ds.header.num_samples = n_dist(gen);
  ds.header.created_at = "2026-01-01T00:00:00.000Z";
  ds.header.extractor_version = "test";
  auto& sec = ds.header.sections;
  sec.kl_series = coin(gen);
  sec.generation_texts = coin(gen);
  sec.embeddings = coin(gen);
  sec.embedding_dim = sec.embeddings ? static_cast<std::uint32_t>(1 + gen() % 8) : 0;
  sec.token_logprobs = coin(gen);
  for (std::size_t i = 0; i < ds.header.num_samples; ++i) {
    TraceSample s;
    s.sample_id = "s" + std::to_string(i) + "-" + std::to_string(gen() % 100000);
    s.label = static_cast<int>(gen() % 2);
    s.h0 = LayerMatrix(ds.header.num_layers, ds.header.hidden_dim);
    s.hc = LayerMatrix(ds.header.num_layers, ds.header.hidden_dim);
    for (float& v : s.h0.values) v = val(gen);
    for (float& v : s.hc.values) v = val(gen);
    if (sec.kl_series) {
      std::vector<float> kl(gen() % 10);
      for (float& v : kl) v = std::abs(val(gen));
      s.kl_series = kl;
    }
    if (sec.generation_texts) s.texts = GenerationTexts{"y0 \xc3\xa9 " + std::to_string(gen()), "yc\n" + std::to_string(gen())};
    if (sec.embeddings) {
      auto unit = [&] {
        std::vector<float> e(sec.embedding_dim);
        double n = 0;
        for (float& v : e) {
          v = val(gen) + 1.0f;
          n += static_cast<double>(v) * v;
        }
        for (float& v : e) v = static_cast<float>(v / std::sqrt(n));
        return e;
      };
      s.embeddings = EmbeddingPair{unit(), unit()};
    }
    if (sec.token_logprobs) {
      DocumentTokens doc;
      doc.logprobs.resize(gen() % 12);
      for (float& v : doc.logprobs) v = -std::abs(val(gen));
      doc.text = "doc " + std::to_string(gen());
      s.document = doc;
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace crm::oracle
