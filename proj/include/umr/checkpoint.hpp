#pragma once

// Checkpoint file layout (all integers and floats little-endian):
//
//   "PUMACKPT"  8 bytes
//   version     u8 (= 1)
//   config      6 x u32: vocab_size, d_model, n_heads, n_layers, max_seq, k
//   tensors     u32 count, then per tensor: u32 rank, rank x u32 dims, f64 data
//               order: tok_emb, pos_emb, then per layer ln1_gain, ln1_bias, wq, wk,
//               wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2
//   optimizer   u8 present; if 1: u64 step, f64 lr, beta1, beta2, eps, then the
//               first moments and the second moments in tensor order (f64 data only)
//   metadata    u32 length, UTF-8 bytes (the training config text)

#include <filesystem>
#include <optional>
#include <string>

#include "umr/binio.hpp"
#include "umr/encoder.hpp"
#include "umr/trainer.hpp"

namespace umr {

inline constexpr std::string_view kCheckpointMagic = "PUMACKPT";
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  Encoder encoder;
  std::optional<AdamState> optimizer;
  std::string metadata;
};

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  binio::Writer w;
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u8(kCheckpointVersion);
  const auto& c = ck.encoder.config();
  for (auto v : {c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.max_seq, c.k}) w.u32(v);
  const auto params = ck.encoder.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& t : params) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double x : t.data()) w.f64(x);
  }
  w.u8(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const auto& o = *ck.optimizer;
    if (o.m.size() != params.size() || o.v.size() != params.size()) {
      throw DimensionError("checkpoint: optimizer moments do not match the parameter list");
    }
    w.u64(o.step);
    w.f64(o.lr);
    w.f64(o.beta1);
    w.f64(o.beta2);
    w.f64(o.eps);
    for (const auto* moments : {&o.m, &o.v}) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        if ((*moments)[i].shape() != params[i].shape()) throw DimensionError("checkpoint: moment shape mismatch");
        for (double x : (*moments)[i].data()) w.f64(x);
      }
    }
  }
  w.u32(static_cast<std::uint32_t>(ck.metadata.size()));
  w.bytes(ck.metadata.data(), ck.metadata.size());
  return w.buffer();
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  binio::Writer w;
  const auto bytes = encode_checkpoint(ck);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline Checkpoint decode_checkpoint(binio::Reader r) {
  r.expect_magic(kCheckpointMagic);
  const auto version_at = r.offset();
  const auto version = r.u8();
  if (version != kCheckpointVersion) throw VersionError(version, kCheckpointVersion, version_at);
  EncoderConfig cfg;
  cfg.vocab_size = r.u32();
  cfg.d_model = r.u32();
  cfg.n_heads = r.u32();
  cfg.n_layers = r.u32();
  cfg.max_seq = r.u32();
  cfg.k = r.u32();
  try {
    cfg.validate();
  } catch (const ConfigurationError& e) {
    r.fail(std::string("invalid encoder config: ") + e.what());
  }
  const auto expected = 2 + static_cast<std::size_t>(cfg.n_layers) * LayerWeights::kCount;
  const auto count = r.u32();
  if (count != expected) r.fail("tensor count " + std::to_string(count) + ", expected " + std::to_string(expected));
  std::vector<Tensor> params;
  params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rank = r.u32();
    if (rank > 2) r.fail("tensor " + std::to_string(i) + " has rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) r.fail("tensor " + std::to_string(i) + " has a zero extent");
      n *= d;
    }
    if (r.remaining() / sizeof(double) < n) r.fail("truncated tensor " + std::to_string(i));
    std::vector<double> data(n);
    r.bytes(data.data(), n * sizeof(double));
    params.emplace_back(std::move(shape), std::move(data));
  }
  Checkpoint ck;
  const auto params_end = r.offset();
  try {
    std::vector<LayerWeights> layers(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      for (std::size_t j = 0; j < LayerWeights::kCount; ++j) layers[l].t[j] = params[2 + l * LayerWeights::kCount + j];
    ck.encoder = Encoder(cfg, params[0], params[1], std::move(layers));
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: inconsistent tensors: ") + e.what(), params_end);
  }
  const auto present = r.u8();
  if (present > 1) r.fail("bad optimizer flag");
  if (present) {
    AdamState o;
    o.step = r.u64();
    o.lr = r.f64();
    o.beta1 = r.f64();
    o.beta2 = r.f64();
    o.eps = r.f64();
    for (auto* moments : {&o.m, &o.v}) {
      for (const auto& p : params) {
        std::vector<double> data(p.size());
        r.bytes(data.data(), data.size() * sizeof(double));
        moments->emplace_back(p.shape(), std::move(data));
      }
    }
    ck.optimizer = std::move(o);
  }
  const auto len = r.u32();
  if (r.remaining() < len) r.fail("truncated metadata");
  ck.metadata.resize(len);
  r.bytes(ck.metadata.data(), len);
  r.expect_end();
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::Reader::from_file(path, "checkpoint"));
}

/// Content hash of the serialised checkpoint.
inline std::string checkpoint_id(const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  return fnv1a_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace umr
