#pragma once

// CRMT trace container: paired no-context / with-context last-token hidden
// states per layer, plus the optional per-sample sections the surface-level
// features need.
//
// On-disk layout (all integers little-endian):
//   "CRMT" | u32 version | u64 header_length | header (UTF-8 JSON)
//   per sample, in header order:
//     h0 then hc, each L*d f32, layer-major
//     [kl_series]        u64 count, count f32
//     [generation_texts] u64 len, y0 bytes, u64 len, yc bytes
//     [embeddings]       u64 count, count f32 (enc(y0)); u64 count, count f32 (enc(yc))
//     [token_logprobs]   u64 count, count f32; u64 len, document bytes
//
// Sample ids and labels live in the header document so that the payload of a
// sample without optional sections is exactly 2*L*d*4 bytes.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crm {

inline constexpr char kTraceMagic[4] = {'C', 'R', 'M', 'T'};
inline constexpr std::uint32_t kTraceVersion = 1;

// L x d matrix of 32-bit floats stored layer-major.
struct LayerMatrix {
  std::size_t layers = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  LayerMatrix() = default;
  LayerMatrix(std::size_t num_layers, std::size_t hidden_dim)
      : layers(num_layers), dim(hidden_dim), values(num_layers * hidden_dim, 0.0f) {}

  std::span<const float> row(std::size_t layer) const {
    return std::span<const float>(values).subspan(layer * dim, dim);
  }
  std::span<float> row(std::size_t layer) { return std::span<float>(values).subspan(layer * dim, dim); }

  bool operator==(const LayerMatrix&) const = default;
};

struct GenerationTexts {
  std::string no_context;    // y0
  std::string with_context;  // yc
  bool operator==(const GenerationTexts&) const = default;
};

struct EmbeddingPair {
  std::vector<float> no_context;    // enc(y0)
  std::vector<float> with_context;  // enc(yc)
  bool operator==(const EmbeddingPair&) const = default;
};

// Per-token log-probabilities of the raw document plus its text (the text
// feeds the zlib baseline).
struct DocumentTokens {
  std::vector<float> logprobs;
  std::string text;
  bool operator==(const DocumentTokens&) const = default;
};

struct TraceSample {
  std::string sample_id;
  int label = 0;  // 1 = member, 0 = non-member
  LayerMatrix h0;
  LayerMatrix hc;
  std::optional<std::vector<float>> kl_series;
  std::optional<GenerationTexts> texts;
  std::optional<EmbeddingPair> embeddings;
  std::optional<DocumentTokens> document;

  bool operator==(const TraceSample&) const = default;
};

struct SectionFlags {
  bool kl_series = false;
  bool generation_texts = false;
  bool embeddings = false;
  std::uint32_t embedding_dim = 0;
  bool token_logprobs = false;

  bool operator==(const SectionFlags&) const = default;
};

struct TraceHeader {
  std::string model_name;
  std::uint32_t num_layers = 0;
  std::uint32_t hidden_dim = 0;
  std::uint64_t num_samples = 0;
  SectionFlags sections;
  std::string created_at;
  std::string extractor_version;
  // How row indices map to model layers, e.g. "embedding+layers+final_norm".
  std::string layer_indexing = "layers";

  bool operator==(const TraceHeader&) const = default;
};

struct Dataset {
  TraceHeader header;
  std::vector<TraceSample> samples;

  bool operator==(const Dataset&) const = default;

  std::vector<int> labels() const;
};

// Throws InvalidInput describing the first violated invariant.
void validate(const Dataset& dataset);

// Serializes `dataset`; validation happens before any byte is written.
std::uint64_t write_trace(const Dataset& dataset, std::ostream& sink);
Dataset read_trace(std::istream& source);

std::uint64_t save_trace(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_trace(const std::filesystem::path& path);

struct CalibrationSplit {
  std::vector<std::size_t> indices;  // positions in the full dataset, ascending
  Dataset calibration;
};

// Seeded stratified draw without replacement. Members get ceil(n_cal/2) or
// floor(n_cal/2) slots depending on which class is larger; a class that is
// too small donates its shortfall to the other.
CalibrationSplit split_calibration(const Dataset& dataset, std::size_t n_cal, std::uint64_t seed);

// Copy of `dataset` restricted to `indices` (in the given order).
Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices);

}  // namespace crm
