#pragma once

// Flat cosine index over candidate [RET] embeddings.
//
// File layout (little-endian):
//   "PUMAIDX1", u32 count, u32 dim, then per record:
//   u32 id, u8 modality, u8 dataset, 2 zero bytes, dim x f32

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "umr/binio.hpp"
#include "umr/datagen.hpp"
#include "umr/encoder.hpp"

namespace umr {

/// Vectors are held at 32-bit, the persisted precision.
struct EmbeddingIndex {
  std::uint32_t dim = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::uint8_t> modalities;
  std::vector<std::uint8_t> datasets;
  std::vector<float> vectors;

  std::size_t size() const { return ids.size(); }
  std::span<const float> vector(std::size_t row) const { return {vectors.data() + row * dim, dim}; }

  void add(std::uint32_t id, Modality m, std::uint8_t dataset, std::span<const double> normalized) {
    if (dim == 0 && ids.empty()) dim = static_cast<std::uint32_t>(normalized.size());
    if (normalized.size() != dim) {
      throw DimensionError("index: vector of width " + std::to_string(normalized.size()) + ", expected " +
                           std::to_string(dim));
    }
    ids.push_back(id);
    modalities.push_back(static_cast<std::uint8_t>(m));
    datasets.push_back(dataset);
    for (double x : normalized) vectors.push_back(static_cast<float>(x));
  }

  bool identical(const EmbeddingIndex& o) const {
    return dim == o.dim && ids == o.ids && modalities == o.modalities && datasets == o.datasets &&
           vectors.size() == o.vectors.size() &&
           std::memcmp(vectors.data(), o.vectors.data(), vectors.size() * sizeof(float)) == 0;
  }
};

/// Unit-length copy; an all-zero vector stays zero.
inline std::vector<double> l2_normalized(std::span<const double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double n = std::sqrt(ss);
  std::vector<double> out(v.begin(), v.end());
  if (n > 0.0)
    for (auto& x : out) x /= n;
  return out;
}

inline TokenSequence candidate_prompt(const Candidate& c, const EncoderConfig& cfg, const VocabLayout& layout) {
  try {
    return assemble_prompt(Task::t2t, c.modality, c.tokens, Side::candidate, cfg.max_seq, layout);
  } catch (const LengthError& e) {
    throw LengthError("candidate " + std::to_string(c.id) + ": " + e.what());
  }
}

inline TokenSequence query_prompt(const Sample& s, const EncoderConfig& cfg, const VocabLayout& layout) {
  try {
    return assemble_prompt(s.task, s.modality, s.tokens, Side::query, cfg.max_seq, layout);
  } catch (const LengthError& e) {
    throw LengthError("query " + std::to_string(s.id) + ": " + e.what());
  }
}

inline EmbeddingIndex build_index(const Encoder& encoder, const std::vector<Candidate>& candidates, std::size_t k_layers,
                                  const VocabLayout& layout = {}) {
  EmbeddingIndex index;
  index.dim = encoder.config().d_model;
  std::set<std::uint32_t> seen;
  for (const auto& c : candidates) {
    if (!seen.insert(c.id).second) throw ContractError("build_index: duplicate candidate id " + std::to_string(c.id));
    const auto e = embed(encoder, candidate_prompt(c, encoder.config(), layout), k_layers);
    index.add(c.id, c.modality, dataset_code(c.dataset), l2_normalized(e.vector));
  }
  return index;
}

inline std::vector<double> embed_query(const Encoder& encoder, const Sample& s, std::size_t k_layers,
                                       const VocabLayout& layout = {}) {
  return l2_normalized(embed(encoder, query_prompt(s, encoder.config(), layout), k_layers).vector);
}

struct Hit {
  std::uint32_t id = 0;
  double score = 0.0;
  bool operator==(const Hit&) const = default;
};

/// Descending score, ties by ascending id. `dataset` restricts the pool to one dataset code.
inline std::vector<Hit> search_topk(const EmbeddingIndex& index, std::span<const double> query, std::size_t k,
                                    std::optional<std::uint8_t> dataset = std::nullopt) {
  if (k < 1) throw ContractError("search_topk: k must be at least 1");
  if (index.size() > 0 && query.size() != index.dim) {
    throw DimensionError("search_topk: query width " + std::to_string(query.size()) + ", index width " +
                         std::to_string(index.dim));
  }
  std::vector<Hit> hits;
  hits.reserve(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (dataset && index.datasets[r] != *dataset) continue;
    const auto v = index.vector(r);
    double s = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) s += static_cast<double>(v[j]) * query[j];
    hits.push_back({index.ids[r], s});
  }
  const auto better = [](const Hit& a, const Hit& b) { return a.score != b.score ? a.score > b.score : a.id < b.id; };
  const auto n = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(n), hits.end(), better);
  hits.resize(n);
  return hits;
}

inline constexpr std::string_view kIndexMagic = "PUMAIDX1";

inline std::vector<unsigned char> encode_index(const EmbeddingIndex& index) {
  binio::Writer w;
  w.bytes(kIndexMagic.data(), kIndexMagic.size());
  w.u32(static_cast<std::uint32_t>(index.size()));
  w.u32(index.dim);
  for (std::size_t r = 0; r < index.size(); ++r) {
    w.u32(index.ids[r]);
    w.u8(index.modalities[r]);
    w.u8(index.datasets[r]);
    w.u8(0);
    w.u8(0);
    for (float x : index.vector(r)) w.f32(x);
  }
  return w.buffer();
}

inline void save_index(const EmbeddingIndex& index, const std::filesystem::path& path) {
  binio::Writer w;
  const auto bytes = encode_index(index);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline EmbeddingIndex decode_index(binio::Reader r) {
  r.expect_magic(kIndexMagic);
  const auto count = r.u32();
  const auto dim = r.u32();
  const std::size_t record = 8 + static_cast<std::size_t>(dim) * sizeof(float);
  if (r.remaining() / record < count) r.fail("truncated, header declares " + std::to_string(count) + " records");
  EmbeddingIndex index;
  index.dim = dim;
  std::set<std::uint32_t> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto id = r.u32();
    if (!seen.insert(id).second) r.fail("duplicate id " + std::to_string(id));
    const auto m = r.u8();
    if (m > static_cast<std::uint8_t>(Modality::image_text)) r.fail("bad modality code " + std::to_string(m));
    const auto ds = r.u8();
    r.u8();
    r.u8();
    index.ids.push_back(id);
    index.modalities.push_back(m);
    index.datasets.push_back(ds);
    for (std::uint32_t j = 0; j < dim; ++j) index.vectors.push_back(r.f32());
  }
  r.expect_end();
  return index;
}

inline EmbeddingIndex load_index(const std::filesystem::path& path) {
  return decode_index(binio::Reader::from_file(path, "index"));
}

}  // namespace umr
