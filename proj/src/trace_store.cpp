#include "crm/trace_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <unordered_set>

#include <json.hpp>

#include "crm/error.hpp"
#include "crm/random.hpp"

namespace crm {
namespace {

using nlohmann::json;

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void floats(std::span<const float> values) {
    for (float v : values) f32(v);
  }
  void counted_floats(std::span<const float> values) {
    u64(values.size());
    floats(values);
  }
  void counted_bytes(std::string_view bytes) {
    u64(bytes.size());
    buf_.append(bytes);
  }
  void raw(std::string_view bytes) { buf_.append(bytes); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::size_t remaining() const { return data_.size() - pos_; }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void floats(std::span<float> out) {
    need(out.size() * 4);
    for (float& v : out) v = f32();
  }
  std::vector<float> counted_floats() {
    const std::uint64_t count = u64();
    if (count > remaining() / 4) throw TraceFormatError("corrupt trace: truncated payload");
    std::vector<float> out(count);
    floats(out);
    return out;
  }
  std::string counted_bytes() {
    const std::uint64_t len = u64();
    if (len > remaining()) throw TraceFormatError("corrupt trace: truncated payload");
    std::string out(data_.substr(pos_, len));
    pos_ += len;
    return out;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw TraceFormatError("corrupt trace: truncated payload");
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

json header_document(const Dataset& dataset) {
  const TraceHeader& h = dataset.header;
  json samples = json::array();
  for (const auto& s : dataset.samples) samples.push_back({{"id", s.sample_id}, {"label", s.label}});
  return json{
      {"model_name", h.model_name},
      {"num_layers", h.num_layers},
      {"hidden_dim", h.hidden_dim},
      {"num_samples", h.num_samples},
      {"sections",
       {{"kl_series", h.sections.kl_series},
        {"generation_texts", h.sections.generation_texts},
        {"embeddings", h.sections.embeddings},
        {"embedding_dim", h.sections.embedding_dim},
        {"token_logprobs", h.sections.token_logprobs}}},
      {"created_at", h.created_at},
      {"extractor_version", h.extractor_version},
      {"layer_indexing", h.layer_indexing},
      {"samples", std::move(samples)},
  };
}

double l2_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

}  // namespace

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

void validate(const Dataset& dataset) {
  const TraceHeader& h = dataset.header;
  if (h.num_layers == 0 || h.hidden_dim == 0 || h.num_samples == 0)
    throw InvalidInput("trace header requires positive num_layers, hidden_dim and num_samples");
  if (dataset.samples.size() != h.num_samples)
    throw InvalidInput("sample count " + std::to_string(dataset.samples.size()) +
                       " differs from header num_samples " + std::to_string(h.num_samples));
  if (h.sections.embeddings && h.sections.embedding_dim == 0)
    throw InvalidInput("embeddings section declared with embedding_dim 0");

  std::unordered_set<std::string> ids;
  for (const auto& s : dataset.samples) {
    const std::string where = "sample '" + s.sample_id + "': ";
    if (!ids.insert(s.sample_id).second) throw InvalidInput(where + "duplicate sample_id");
    if (s.label != 0 && s.label != 1) throw InvalidInput(where + "label must be 0 or 1");
    for (const LayerMatrix* m : {&s.h0, &s.hc}) {
      if (m->layers != h.num_layers || m->dim != h.hidden_dim ||
          m->values.size() != m->layers * m->dim)
        throw InvalidInput(where + "hidden-state shape does not match header L x d");
    }
    if (s.kl_series.has_value() != h.sections.kl_series)
      throw InvalidInput(where + "kl_series presence disagrees with header flag");
    if (s.texts.has_value() != h.sections.generation_texts)
      throw InvalidInput(where + "generation_texts presence disagrees with header flag");
    if (s.embeddings.has_value() != h.sections.embeddings)
      throw InvalidInput(where + "embeddings presence disagrees with header flag");
    if (s.document.has_value() != h.sections.token_logprobs)
      throw InvalidInput(where + "token_logprobs presence disagrees with header flag");
    if (s.kl_series) {
      for (float v : *s.kl_series)
        if (!(v >= 0.0f) || !std::isfinite(v)) throw InvalidInput(where + "kl_series values must be >= 0");
    }
    if (s.embeddings) {
      for (const auto* e : {&s.embeddings->no_context, &s.embeddings->with_context}) {
        if (e->size() != h.sections.embedding_dim)
          throw InvalidInput(where + "embedding length differs from embedding_dim");
        if (std::abs(l2_norm(*e) - 1.0) > 1e-4) throw InvalidInput(where + "embedding is not unit-norm");
      }
    }
  }
}

std::uint64_t write_trace(const Dataset& dataset, std::ostream& sink) {
  validate(dataset);

  ByteWriter w;
  w.raw(std::string_view(kTraceMagic, 4));
  w.u32(kTraceVersion);
  const std::string header = header_document(dataset).dump();
  w.u64(header.size());
  w.raw(header);

  const SectionFlags& flags = dataset.header.sections;
  for (const auto& s : dataset.samples) {
    w.floats(s.h0.values);
    w.floats(s.hc.values);
    if (flags.kl_series) w.counted_floats(*s.kl_series);
    if (flags.generation_texts) {
      w.counted_bytes(s.texts->no_context);
      w.counted_bytes(s.texts->with_context);
    }
    if (flags.embeddings) {
      w.counted_floats(s.embeddings->no_context);
      w.counted_floats(s.embeddings->with_context);
    }
    if (flags.token_logprobs) {
      w.counted_floats(s.document->logprobs);
      w.counted_bytes(s.document->text);
    }
  }

  const std::string& bytes = w.bytes();
  sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!sink) throw Error("failed writing trace");
  return bytes.size();
}

Dataset read_trace(std::istream& source) {
  const std::string data{std::istreambuf_iterator<char>(source), std::istreambuf_iterator<char>()};
  ByteReader r(data);

  if (data.size() < 4 || std::memcmp(data.data(), kTraceMagic, 4) != 0)
    throw TraceFormatError("not a trace file");
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kTraceVersion)
    throw TraceFormatError("unsupported version " + std::to_string(version));
  const std::uint64_t header_len = r.u64();
  if (header_len > r.remaining()) throw TraceFormatError("corrupt trace: truncated header");

  Dataset ds;
  json doc;
  json sample_docs;
  try {
    doc = json::parse(r.take(header_len));
    TraceHeader& h = ds.header;
    h.model_name = doc.at("model_name").get<std::string>();
    h.num_layers = doc.at("num_layers").get<std::uint32_t>();
    h.hidden_dim = doc.at("hidden_dim").get<std::uint32_t>();
    h.num_samples = doc.at("num_samples").get<std::uint64_t>();
    const json& sec = doc.at("sections");
    h.sections.kl_series = sec.at("kl_series").get<bool>();
    h.sections.generation_texts = sec.at("generation_texts").get<bool>();
    h.sections.embeddings = sec.at("embeddings").get<bool>();
    h.sections.embedding_dim = sec.at("embedding_dim").get<std::uint32_t>();
    h.sections.token_logprobs = sec.at("token_logprobs").get<bool>();
    h.created_at = doc.at("created_at").get<std::string>();
    h.extractor_version = doc.at("extractor_version").get<std::string>();
    h.layer_indexing = doc.at("layer_indexing").get<std::string>();
    sample_docs = doc.at("samples");
  } catch (const json::exception& e) {
    throw TraceFormatError(std::string("corrupt trace: bad header document: ") + e.what());
  }

  const TraceHeader& h = ds.header;
  if (!sample_docs.is_array() || sample_docs.size() != h.num_samples)
    throw TraceFormatError("header/payload disagreement: sample list length differs from num_samples");
  if (h.num_layers == 0 || h.hidden_dim == 0)
    throw TraceFormatError("header/payload disagreement: zero layer count or hidden dim");

  const std::size_t per_matrix = static_cast<std::size_t>(h.num_layers) * h.hidden_dim;
  ds.samples.reserve(h.num_samples);
  for (const json& sd : sample_docs) {
    TraceSample s;
    try {
      s.sample_id = sd.at("id").get<std::string>();
      s.label = sd.at("label").get<int>();
    } catch (const json::exception& e) {
      throw TraceFormatError(std::string("corrupt trace: bad sample entry: ") + e.what());
    }
    s.h0 = LayerMatrix(h.num_layers, h.hidden_dim);
    s.hc = LayerMatrix(h.num_layers, h.hidden_dim);
    if (per_matrix * 8 > r.remaining()) throw TraceFormatError("corrupt trace: truncated payload");
    r.floats(s.h0.values);
    r.floats(s.hc.values);
    if (h.sections.kl_series) s.kl_series = r.counted_floats();
    if (h.sections.generation_texts) {
      GenerationTexts t;
      t.no_context = r.counted_bytes();
      t.with_context = r.counted_bytes();
      s.texts = std::move(t);
    }
    if (h.sections.embeddings) {
      EmbeddingPair e;
      e.no_context = r.counted_floats();
      e.with_context = r.counted_floats();
      if (e.no_context.size() != h.sections.embedding_dim ||
          e.with_context.size() != h.sections.embedding_dim)
        throw TraceFormatError("header/payload disagreement: embedding length differs from embedding_dim");
      s.embeddings = std::move(e);
    }
    if (h.sections.token_logprobs) {
      DocumentTokens d;
      d.logprobs = r.counted_floats();
      d.text = r.counted_bytes();
      s.document = std::move(d);
    }
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw TraceFormatError("corrupt trace: trailing bytes after payload");

  try {
    validate(ds);
  } catch (const InvalidInput& e) {
    throw TraceFormatError(std::string("header/payload disagreement: ") + e.what());
  }
  return ds;
}

std::uint64_t save_trace(const Dataset& dataset, const std::filesystem::path& path) {
  validate(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  return write_trace(dataset, out);
}

Dataset load_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open trace " + path.string());
  return read_trace(in);
}

Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices) {
  Dataset out;
  out.header = dataset.header;
  out.header.num_samples = indices.size();
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= dataset.samples.size()) throw InvalidInput("subset index out of range");
    out.samples.push_back(dataset.samples[i]);
  }
  return out;
}

CalibrationSplit split_calibration(const Dataset& dataset, std::size_t n_cal, std::uint64_t seed) {
  const std::size_t n = dataset.samples.size();
  if (n_cal == 0) throw InvalidInput("n_cal must be positive");
  if (n_cal > n)
    throw InvalidInput("n_cal " + std::to_string(n_cal) + " exceeds dataset size " + std::to_string(n));

  std::vector<std::size_t> members, non_members;
  for (std::size_t i = 0; i < n; ++i)
    (dataset.samples[i].label == 1 ? members : non_members).push_back(i);
  if (members.empty() || non_members.empty())
    throw InvalidInput("calibration split needs both classes present");

  Rng member_rng(derive_seed(seed, 1));
  Rng non_member_rng(derive_seed(seed, 0));
  member_rng.shuffle(std::span<std::size_t>(members));
  non_member_rng.shuffle(std::span<std::size_t>(non_members));

  // Odd remainder goes to the larger class (members on a tie).
  std::size_t want_members = n_cal / 2;
  if (n_cal % 2 == 1 && members.size() >= non_members.size()) ++want_members;
  std::size_t want_non = n_cal - want_members;
  if (want_members > members.size()) {
    want_non += want_members - members.size();
    want_members = members.size();
  }
  if (want_non > non_members.size()) {
    want_members += want_non - non_members.size();
    want_non = non_members.size();
  }

  CalibrationSplit split;
  split.indices.assign(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(want_members));
  split.indices.insert(split.indices.end(), non_members.begin(),
                       non_members.begin() + static_cast<std::ptrdiff_t>(want_non));
  std::sort(split.indices.begin(), split.indices.end());
  split.calibration = subset(dataset, split.indices);
  return split;
}

}  // namespace crm
