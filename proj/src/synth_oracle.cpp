#include "crm/synth_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "crm/error.hpp"
#include "crm/random.hpp"

namespace crm {

using nlohmann::json;

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_unit(std::span<const double> axis, std::size_t dim, const std::string& what) {
  if (axis.size() != dim) throw InvalidInput(what + " has length " + std::to_string(axis.size()) +
                                             ", expected hidden_dim " + std::to_string(dim));
  if (std::abs(norm(axis) - 1.0) > 1e-6) throw InvalidInput(what + " is not unit-norm");
}

const char* const kWords[] = {"river", "stone", "ledger", "winter", "orbit", "signal", "harbor", "copper",
                              "meadow", "lantern", "archive", "summit", "violet", "engine", "quartz", "falcon"};

std::string random_words(Rng& rng, std::size_t count) {
  std::string out;
  for (std::size_t i = 0; i < count; ++i) {
    if (i) out += ' ';
    out += kWords[rng.uniform_index(std::size(kWords))];
  }
  return out;
}

std::vector<float> random_unit(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  while (!(n > 1e-6)) {
    for (double& x : v) x = rng.normal();
    n = norm(v);
  }
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] / n);
  return out;
}

}  // namespace

std::vector<double> basis_axis(std::size_t dim, std::size_t index) {
  if (index >= dim) throw InvalidInput("basis axis index out of range");
  std::vector<double> e(dim, 0.0);
  e[index] = 1.0;
  return e;
}

double PlantedSpec::layer_shift(std::size_t layer) const {
  if (layer >= shift_axes.size() || !shift_axes[layer]) return 0.0;
  for (const auto& block : blocks)
    if (std::find(block.begin(), block.end(), layer) != block.end())
      return member_shift / std::sqrt(static_cast<double>(block.size()));
  return member_shift;
}

void PlantedSpec::validate() const {
  if (num_layers == 0 || hidden_dim == 0 || num_samples == 0)
    throw InvalidInput("planted spec needs positive num_layers, hidden_dim and num_samples");
  if (num_samples % 2 != 0) throw InvalidInput("planted spec needs an even sample count for balanced labels");
  if (!(noise_std > 0.0)) throw InvalidInput("planted spec noise_std must be positive");
  if (!(base_std >= 0.0)) throw InvalidInput("planted spec base_std must be >= 0");
  if (shift_axes.size() != num_layers) throw InvalidInput("planted spec needs one shift_axes entry per layer");
  for (std::size_t l = 0; l < num_layers; ++l)
    if (shift_axes[l]) check_unit(*shift_axes[l], hidden_dim, "shift axis at layer " + std::to_string(l));
  for (const auto& n : nuisance) {
    if (n.layer >= num_layers) throw InvalidInput("nuisance axis layer out of range");
    check_unit(n.axis, hidden_dim, "nuisance axis");
    if (!(n.std >= 0.0)) throw InvalidInput("nuisance std must be >= 0");
  }
  std::set<std::size_t> seen;
  for (const auto& block : blocks) {
    if (block.empty()) throw InvalidInput("empty layer block");
    for (std::size_t l : block) {
      if (l >= num_layers) throw InvalidInput("block layer out of range");
      if (!shift_axes[l]) throw InvalidInput("block layer " + std::to_string(l) + " has no shift axis");
      if (!seen.insert(l).second) throw InvalidInput("layer " + std::to_string(l) + " appears in two blocks");
    }
  }
  if (surface_sections && embedding_dim == 0) throw InvalidInput("embedding_dim must be positive");
}

PlantedSpec PlantedSpec::simple(std::size_t num_layers, std::size_t hidden_dim, std::size_t num_samples,
                                double member_shift, std::span<const std::size_t> signal_layers, double noise_std,
                                std::uint64_t seed) {
  PlantedSpec spec;
  spec.num_layers = num_layers;
  spec.hidden_dim = hidden_dim;
  spec.num_samples = num_samples;
  spec.member_shift = member_shift;
  spec.noise_std = noise_std;
  spec.seed = seed;
  spec.shift_axes.assign(num_layers, std::nullopt);
  for (std::size_t l : signal_layers) {
    if (l >= num_layers) throw InvalidInput("signal layer out of range");
    spec.shift_axes[l] = basis_axis(hidden_dim, l % hidden_dim);
  }
  return spec;
}

json planted_spec_to_json(const PlantedSpec& spec) {
  json axes = json::array();
  for (const auto& a : spec.shift_axes) axes.push_back(a ? json(*a) : json(nullptr));
  json nuisance = json::array();
  for (const auto& n : spec.nuisance) nuisance.push_back({{"layer", n.layer}, {"axis", n.axis}, {"std", n.std}});
  return json{{"model_name", spec.model_name},
              {"num_layers", spec.num_layers},
              {"hidden_dim", spec.hidden_dim},
              {"num_samples", spec.num_samples},
              {"member_shift", spec.member_shift},
              {"shift_axes", std::move(axes)},
              {"noise_std", spec.noise_std},
              {"base_std", spec.base_std},
              {"nuisance", std::move(nuisance)},
              {"blocks", spec.blocks},
              {"surface_sections", spec.surface_sections},
              {"embedding_dim", spec.embedding_dim},
              {"seed", spec.seed}};
}

PlantedSpec planted_spec_from_json(const json& doc) {
  PlantedSpec spec;
  try {
    spec.model_name = doc.value("model_name", spec.model_name);
    spec.num_layers = doc.at("num_layers").get<std::size_t>();
    spec.hidden_dim = doc.at("hidden_dim").get<std::size_t>();
    spec.num_samples = doc.at("num_samples").get<std::size_t>();
    spec.member_shift = doc.value("member_shift", spec.member_shift);
    spec.noise_std = doc.value("noise_std", spec.noise_std);
    spec.base_std = doc.value("base_std", spec.base_std);
    spec.surface_sections = doc.value("surface_sections", false);
    spec.embedding_dim = doc.value("embedding_dim", spec.embedding_dim);
    spec.seed = doc.value("seed", spec.seed);
    spec.shift_axes.assign(spec.num_layers, std::nullopt);
    if (doc.contains("shift_axes")) {
      const json& axes = doc.at("shift_axes");
      if (axes.size() != spec.num_layers) throw InvalidInput("shift_axes needs one entry per layer");
      for (std::size_t l = 0; l < spec.num_layers; ++l) {
        const json& a = axes[l];
        if (a.is_null()) continue;
        // {"basis": k} is shorthand for the k-th standard basis vector.
        if (a.is_object()) spec.shift_axes[l] = basis_axis(spec.hidden_dim, a.at("basis").get<std::size_t>());
        else spec.shift_axes[l] = a.get<std::vector<double>>();
      }
    }
    if (doc.contains("signal_layers")) {
      for (std::size_t l : doc.at("signal_layers").get<std::vector<std::size_t>>()) {
        if (l >= spec.num_layers) throw InvalidInput("signal layer out of range");
        spec.shift_axes[l] = basis_axis(spec.hidden_dim, l % spec.hidden_dim);
      }
    }
    for (const json& n : doc.value("nuisance", json::array())) {
      NuisanceAxis axis;
      axis.layer = n.at("layer").get<std::size_t>();
      const json& a = n.at("axis");
      axis.axis = a.is_object() ? basis_axis(spec.hidden_dim, a.at("basis").get<std::size_t>())
                                : a.get<std::vector<double>>();
      axis.std = n.at("std").get<double>();
      spec.nuisance.push_back(std::move(axis));
    }
    spec.blocks = doc.value("blocks", std::vector<std::vector<std::size_t>>{});
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed planted spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

Dataset generate(const PlantedSpec& spec) {
  spec.validate();
  const std::size_t L = spec.num_layers, d = spec.hidden_dim, n = spec.num_samples;

  Dataset ds;
  ds.header.model_name = spec.model_name;
  ds.header.num_layers = static_cast<std::uint32_t>(L);
  ds.header.hidden_dim = static_cast<std::uint32_t>(d);
  ds.header.num_samples = n;
  ds.header.created_at = "synthetic";
  ds.header.extractor_version = "synth-oracle/1";
  if (spec.surface_sections) {
    ds.header.sections.kl_series = true;
    ds.header.sections.generation_texts = true;
    ds.header.sections.embeddings = true;
    ds.header.sections.embedding_dim = static_cast<std::uint32_t>(spec.embedding_dim);
    ds.header.sections.token_logprobs = true;
  }

  std::vector<int> labels(n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n / 2), 1);
  Rng label_rng(derive_seed(spec.seed, 0));
  label_rng.shuffle(std::span<int>(labels));

  std::vector<double> shifts(L);
  for (std::size_t l = 0; l < L; ++l) shifts[l] = spec.layer_shift(l);

  Rng rng(derive_seed(spec.seed, 1));
  Rng surface_rng(derive_seed(spec.seed, 2));
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    TraceSample s;
    s.sample_id = "syn-" + std::to_string(i);
    s.label = labels[i];
    s.h0 = LayerMatrix(L, d);
    s.hc = LayerMatrix(L, d);
    std::vector<double> disp(d);
    for (std::size_t l = 0; l < L; ++l) {
      auto h0 = s.h0.row(l);
      auto hc = s.hc.row(l);
      for (std::size_t j = 0; j < d; ++j) disp[j] = spec.noise_std * rng.normal();
      if (s.label == 1 && spec.shift_axes[l])
        for (std::size_t j = 0; j < d; ++j) disp[j] += shifts[l] * (*spec.shift_axes[l])[j];
      for (const auto& nu : spec.nuisance) {
        if (nu.layer != l) continue;
        const double z = nu.std * rng.normal();
        for (std::size_t j = 0; j < d; ++j) disp[j] += z * nu.axis[j];
      }
      for (std::size_t j = 0; j < d; ++j) {
        const double base = spec.base_std * rng.normal();
        h0[j] = static_cast<float>(base);
        hc[j] = static_cast<float>(base + disp[j]);
      }
    }
    if (spec.surface_sections) {
      std::vector<float> kl(8 + surface_rng.uniform_index(33));
      for (float& v : kl) v = static_cast<float>(0.5 * std::abs(surface_rng.normal()));
      s.kl_series = std::move(kl);
      s.texts = GenerationTexts{random_words(surface_rng, 12), random_words(surface_rng, 12)};
      s.embeddings = EmbeddingPair{random_unit(surface_rng, spec.embedding_dim),
                                   random_unit(surface_rng, spec.embedding_dim)};
      DocumentTokens doc;
      doc.logprobs.resize(24);
      for (float& v : doc.logprobs) v = static_cast<float>(-3.0 * std::abs(surface_rng.normal()));
      doc.text = random_words(surface_rng, 24);
      s.document = std::move(doc);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

namespace {

// Weights per layer after merging terms; validated against the spec.
std::map<std::size_t, std::vector<double>> merged_weights(const PlantedSpec& spec, const LinearFunctional& f) {
  if (f.terms.empty()) throw InvalidInput("linear functional has no terms");
  std::map<std::size_t, std::vector<double>> out;
  for (const auto& [layer, w] : f.terms) {
    if (layer >= spec.num_layers) throw InvalidInput("functional layer out of range");
    if (w.size() != spec.hidden_dim) throw InvalidInput("functional weight length differs from hidden_dim");
    auto& acc = out[layer];
    acc.resize(spec.hidden_dim, 0.0);
    for (std::size_t j = 0; j < w.size(); ++j) acc[j] += w[j];
  }
  return out;
}

// Displacement at `layer` for one draw.
void draw_displacement(const PlantedSpec& spec, std::size_t layer, int label, Rng& rng, std::vector<double>& out) {
  const std::size_t d = spec.hidden_dim;
  out.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) out[j] = spec.noise_std * rng.normal();
  if (label == 1 && spec.shift_axes[layer]) {
    const double shift = spec.layer_shift(layer);
    for (std::size_t j = 0; j < d; ++j) out[j] += shift * (*spec.shift_axes[layer])[j];
  }
  for (const auto& nu : spec.nuisance) {
    if (nu.layer != layer) continue;
    const double z = nu.std * rng.normal();
    for (std::size_t j = 0; j < d; ++j) out[j] += z * nu.axis[j];
  }
}

}  // namespace

OracleAuc monte_carlo_auc(const PlantedSpec& spec, const FeatureDescription& feature, std::size_t pairs,
                          std::uint64_t seed) {
  spec.validate();
  if (pairs == 0) throw InvalidInput("Monte Carlo needs at least one pair");

  std::map<std::size_t, std::vector<double>> weights;
  std::size_t norm_layer = 0;
  if (const auto* lin = std::get_if<LinearFunctional>(&feature)) {
    weights = merged_weights(spec, *lin);
  } else {
    norm_layer = std::get<DisplacementNorm>(feature).layer;
    if (norm_layer >= spec.num_layers) throw InvalidInput("feature layer out of range");
  }

  Rng rng(seed);
  std::vector<double> disp;
  auto evaluate = [&](int label) {
    if (weights.empty()) {
      draw_displacement(spec, norm_layer, label, rng, disp);
      return norm(disp);
    }
    double f = 0.0;
    for (const auto& [layer, w] : weights) {
      draw_displacement(spec, layer, label, rng, disp);
      f += dot(w, disp);
    }
    return f;
  };

  double wins = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    const double member = evaluate(1);
    const double non_member = evaluate(0);
    wins += member > non_member ? 1.0 : (member == non_member ? 0.5 : 0.0);
  }
  OracleAuc out;
  out.closed_form = false;
  out.auc = wins / static_cast<double>(pairs);
  out.standard_error = std::sqrt(std::max(out.auc * (1.0 - out.auc), 0.0) / static_cast<double>(pairs));
  return out;
}

OracleAuc oracle_auc(const PlantedSpec& spec, const FeatureDescription& feature, std::size_t mc_samples,
                     std::uint64_t mc_seed) {
  spec.validate();
  const auto* lin = std::get_if<LinearFunctional>(&feature);
  if (!lin) return monte_carlo_auc(spec, feature, mc_samples, mc_seed);

  double mean_gap = 0.0, variance = 0.0;
  for (const auto& [layer, w] : merged_weights(spec, *lin)) {
    if (spec.shift_axes[layer]) mean_gap += spec.layer_shift(layer) * dot(w, *spec.shift_axes[layer]);
    const double wn = norm(w);
    variance += spec.noise_std * spec.noise_std * wn * wn;
    for (const auto& nu : spec.nuisance) {
      if (nu.layer != layer) continue;
      const double proj = dot(w, nu.axis);
      variance += nu.std * nu.std * proj * proj;
    }
  }
  OracleAuc out;
  if (!(variance > 0.0)) {
    out.auc = mean_gap > 0.0 ? 1.0 : (mean_gap < 0.0 ? 0.0 : 0.5);
  } else {
    out.auc = normal_cdf(mean_gap / (std::sqrt(variance) * std::sqrt(2.0)));
  }
  return out;
}

Dataset emulate_feature_noise(const Dataset& dataset, std::span<const std::size_t> layers, double epsilon,
                              std::uint64_t seed) {
  if (!(epsilon >= 0.0)) throw InvalidInput("noise scale epsilon must be >= 0");
  for (std::size_t l : layers)
    if (l >= dataset.header.num_layers) throw InvalidInput("noise layer " + std::to_string(l) + " out of range");
  Dataset out = dataset;
  if (epsilon == 0.0) return out;

  Rng rng(seed);
  for (std::size_t l : layers) {
    double sum = 0.0, sum_sq = 0.0;
    std::size_t count = 0;
    for (const auto& s : dataset.samples)
      for (float v : s.hc.row(l)) {
        sum += v;
        sum_sq += static_cast<double>(v) * v;
        ++count;
      }
    const double mean = sum / static_cast<double>(count);
    const double sigma = std::sqrt(std::max(sum_sq / static_cast<double>(count) - mean * mean, 0.0));
    for (auto& s : out.samples)
      for (float& v : s.hc.row(l)) v = static_cast<float>(v + epsilon * sigma * rng.normal());
  }
  return out;
}

}  // namespace crm
