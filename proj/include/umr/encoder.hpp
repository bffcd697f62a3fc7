#pragma once

// Layer-stacked pre-norm transformer used as the retrieval encoder.
//
// The embedding of a prompt is the hidden state at its trailing [RET] token,
// read after any prefix of the layer stack. Pruning keeps the first k layers
// verbatim, so reading layer k of the full model and of the pruned model is
// the same computation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "umr/autograd.hpp"
#include "umr/rng.hpp"
#include "umr/vocab.hpp"

namespace umr {

struct EncoderConfig {
  std::uint32_t vocab_size = 5600;
  std::uint32_t d_model = 32;
  std::uint32_t n_heads = 2;
  std::uint32_t n_layers = 8;
  std::uint32_t max_seq = 40;
  /// Default extraction depth.
  std::uint32_t k = 8;

  std::uint32_t ffn_width() const { return 4 * d_model; }

  void validate() const {
    if (vocab_size <= tok::kReservedEnd) throw ConfigurationError("vocab_size must exceed the reserved id range");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigurationError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                               std::to_string(n_heads) + ")");
    }
    if (n_layers == 0 || max_seq == 0) throw ConfigurationError("n_layers and max_seq must be positive");
    if (k < 1 || k > n_layers) {
      throw ConfigurationError("k=" + std::to_string(k) + " outside [1, " + std::to_string(n_layers) + "]");
    }
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// Per-layer weights, in the fixed serialisation order.
struct LayerWeights {
  static constexpr std::size_t kCount = 12;
  static constexpr std::array<const char*, kCount> kNames = {"ln1_gain", "ln1_bias", "wq",       "wk",
                                                             "wv",       "wo",       "ln2_gain", "ln2_bias",
                                                             "w1",       "b1",       "w2",       "b2"};
  std::array<Tensor, kCount> t;

  const Tensor& ln1_gain() const { return t[0]; }
  const Tensor& ln1_bias() const { return t[1]; }
  const Tensor& wq() const { return t[2]; }
  const Tensor& wk() const { return t[3]; }
  const Tensor& wv() const { return t[4]; }
  const Tensor& wo() const { return t[5]; }
  const Tensor& ln2_gain() const { return t[6]; }
  const Tensor& ln2_bias() const { return t[7]; }
  const Tensor& w1() const { return t[8]; }
  const Tensor& b1() const { return t[9]; }
  const Tensor& w2() const { return t[10]; }
  const Tensor& b2() const { return t[11]; }
};

enum class Side : std::uint8_t { query, candidate };

struct TokenSequence {
  std::vector<std::uint32_t> ids;
  std::size_t ret_position = 0;
};

struct Embedding {
  std::vector<double> vector;
  std::size_t source_layer = 0;
};

/// Token id ranges of the content vocabularies.
struct VocabLayout {
  std::uint32_t text_begin = 100, text_end = 356;
  std::uint32_t image_begin = 5000, image_end = 5512;

  bool is_image(std::uint32_t id) const { return id >= image_begin && id < image_end; }
  bool is_text(std::uint32_t id) const { return id >= text_begin && id < text_end; }
};

/// [INSTR] [MOD] content... [SEP] [SUM] [RET]. Image-vocab tokens are moved ahead of
/// text tokens (stable) when both are present. Candidates get the no-op instruction.
inline TokenSequence assemble_prompt(Task task, Modality modality, std::span<const std::uint32_t> content, Side side,
                                     std::size_t max_seq, const VocabLayout& layout = {}) {
  const auto len = content.size() + kPromptOverhead;
  if (len > max_seq) {
    throw LengthError("prompt of " + std::to_string(len) + " tokens exceeds max_seq " + std::to_string(max_seq));
  }
  TokenSequence seq;
  seq.ids.reserve(len);
  seq.ids.push_back(side == Side::query ? tok::instruction(task) : tok::kCandidateInstr);
  seq.ids.push_back(tok::modality_marker(modality));
  const auto body = seq.ids.size();
  seq.ids.insert(seq.ids.end(), content.begin(), content.end());
  if (modality == Modality::image_text) {
    std::stable_partition(seq.ids.begin() + static_cast<std::ptrdiff_t>(body), seq.ids.end(),
                          [&](std::uint32_t id) { return layout.is_image(id); });
  }
  seq.ids.push_back(tok::kSep);
  seq.ids.push_back(tok::summary_marker(modality));
  seq.ids.push_back(tok::kRet);
  seq.ret_position = seq.ids.size() - 1;
  return seq;
}

class Encoder {
 public:
  Encoder() = default;

  Encoder(EncoderConfig config, Tensor tok_emb, Tensor pos_emb, std::vector<LayerWeights> layers)
      : config_(config), tok_emb_(std::move(tok_emb)), pos_emb_(std::move(pos_emb)), layers_(std::move(layers)) {
    config_.validate();
    if (layers_.size() != config_.n_layers) throw ConfigurationError("layer count does not match config.n_layers");
    check_shapes();
  }

  /// Random initialisation: embeddings N(0,1)/N(0,0.1), projections N(0,1/fan_in), unit LN gains.
  static Encoder init(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(mix64(seed, 0xe1c0de));
    const std::size_t d = config.d_model, f = config.ffn_width();
    auto normal = [&](Shape s, double std) {
      std::vector<double> v(numel(s));
      for (auto& x : v) x = rng.normal() * std;
      return Tensor(std::move(s), std::move(v));
    };
    Tensor tok = normal({config.vocab_size, d}, 1.0);
    Tensor pos = normal({config.max_seq, d}, 0.1);
    std::vector<LayerWeights> layers(config.n_layers);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sf = 1.0 / std::sqrt(static_cast<double>(f));
    for (auto& l : layers) {
      l.t[0] = Tensor::filled({d}, 1.0);
      l.t[1] = Tensor::zeros({d});
      l.t[2] = normal({d, d}, sd);
      l.t[3] = normal({d, d}, sd);
      l.t[4] = normal({d, d}, sd);
      l.t[5] = normal({d, d}, sd);
      l.t[6] = Tensor::filled({d}, 1.0);
      l.t[7] = Tensor::zeros({d});
      l.t[8] = normal({d, f}, sd);
      l.t[9] = Tensor::zeros({f});
      l.t[10] = normal({f, d}, sf);
      l.t[11] = Tensor::zeros({d});
    }
    return Encoder(config, std::move(tok), std::move(pos), std::move(layers));
  }

  const EncoderConfig& config() const noexcept { return config_; }
  const Tensor& token_embedding() const noexcept { return tok_emb_; }
  const Tensor& position_embedding() const noexcept { return pos_emb_; }
  const std::vector<LayerWeights>& layers() const noexcept { return layers_; }

  /// All weights in serialisation order: token table, position table, then each
  /// layer's 12 tensors in LayerWeights::kNames order.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out{tok_emb_, pos_emb_};
    for (const auto& l : layers_) out.insert(out.end(), l.t.begin(), l.t.end());
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out{"tok_emb", "pos_emb"};
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (const char* n : LayerWeights::kNames) out.push_back("layer" + std::to_string(i) + "." + n);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.size();
    return n;
  }

  /// Same architecture with new weights (shapes must match).
  Encoder with_parameters(const std::vector<Tensor>& params) const {
    if (params.size() != 2 + LayerWeights::kCount * layers_.size()) {
      throw DimensionError("with_parameters: expected " + std::to_string(2 + LayerWeights::kCount * layers_.size()) +
                           " tensors, got " + std::to_string(params.size()));
    }
    std::vector<LayerWeights> layers(layers_.size());
    for (std::size_t i = 0; i < layers.size(); ++i)
      for (std::size_t j = 0; j < LayerWeights::kCount; ++j) layers[i].t[j] = params[2 + i * LayerWeights::kCount + j];
    return Encoder(config_, params[0], params[1], std::move(layers));
  }

  bool identical(const Encoder& other) const {
    if (!(config_ == other.config_)) return false;
    const auto a = parameters(), b = other.parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!a[i].identical(b[i])) return false;
    return true;
  }

 private:
  void check_shapes() const {
    const std::size_t d = config_.d_model, f = config_.ffn_width();
    auto expect = [](const Tensor& t, const Shape& s, const std::string& what) {
      if (t.shape() != s) throw DimensionError(what + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(s));
    };
    expect(tok_emb_, {config_.vocab_size, d}, "tok_emb");
    expect(pos_emb_, {config_.max_seq, d}, "pos_emb");
    const std::array<Shape, LayerWeights::kCount> shapes = {Shape{d}, Shape{d}, Shape{d, d}, Shape{d, d},
                                                            Shape{d, d}, Shape{d, d}, Shape{d}, Shape{d},
                                                            Shape{d, f}, Shape{f}, Shape{f, d}, Shape{d}};
    for (const auto& l : layers_)
      for (std::size_t j = 0; j < LayerWeights::kCount; ++j) expect(l.t[j], shapes[j], LayerWeights::kNames[j]);
  }

  EncoderConfig config_;
  Tensor tok_emb_, pos_emb_;
  std::vector<LayerWeights> layers_;
};

/// Keeps the first k layers; embedding tables and layer weights are copied unchanged.
inline Encoder prune(const Encoder& encoder, std::uint32_t k) {
  const auto& cfg = encoder.config();
  if (k < 1 || k > cfg.n_layers) {
    throw ContractError("prune: k=" + std::to_string(k) + " outside [1, " + std::to_string(cfg.n_layers) + "]");
  }
  EncoderConfig pc = cfg;
  pc.n_layers = k;
  pc.k = std::min(cfg.k, k);
  std::vector<LayerWeights> layers(encoder.layers().begin(), encoder.layers().begin() + k);
  return Encoder(pc, encoder.token_embedding(), encoder.position_embedding(), std::move(layers));
}

/// Encoder weights bound as leaves of a Graph.
struct BoundEncoder {
  const EncoderConfig* config = nullptr;
  Var tok_emb, pos_emb;
  std::vector<std::array<Var, LayerWeights::kCount>> layers;
  /// Leaves in serialisation order (matches Encoder::parameters()).
  std::vector<Var> params;
};

inline BoundEncoder bind(Graph& g, const Encoder& encoder, bool trainable) {
  BoundEncoder b;
  b.config = &encoder.config();
  b.tok_emb = g.leaf(encoder.token_embedding(), trainable);
  b.pos_emb = g.leaf(encoder.position_embedding(), trainable);
  b.params = {b.tok_emb, b.pos_emb};
  for (const auto& l : encoder.layers()) {
    std::array<Var, LayerWeights::kCount> lv;
    for (std::size_t j = 0; j < LayerWeights::kCount; ++j) {
      lv[j] = g.leaf(l.t[j], trainable);
      b.params.push_back(lv[j]);
    }
    b.layers.push_back(lv);
  }
  return b;
}

namespace detail {

inline Var self_attention(Var x, const std::array<Var, LayerWeights::kCount>& w, std::size_t n_heads) {
  const Var q = matmul(x, w[2]), k = matmul(x, w[3]), v = matmul(x, w[4]);
  const std::size_t d = x.value().cols();
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Var qh = n_heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    const Var kh = n_heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    const Var vh = n_heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    const Var attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(matmul(attn, vh));
  }
  const Var merged = n_heads == 1 ? heads.front() : concat_cols(heads);
  return matmul(merged, w[5]);
}

inline Var feed_forward(Var x, const std::array<Var, LayerWeights::kCount>& w) {
  const Var hidden = gelu(add_rowvec(matmul(x, w[8]), w[9]));
  return add_rowvec(matmul(hidden, w[10]), w[11]);
}

}  // namespace detail

inline constexpr double kLayerNormEps = 1e-5;

/// Hidden states after `upto` layers: h0 = tok + pos; h += Attn(LN(h)); h += FFN(LN(h)).
/// Attention is bidirectional and no final normalisation is applied.
inline Var forward(const BoundEncoder& enc, const TokenSequence& tokens, std::size_t upto) {
  const auto& cfg = *enc.config;
  if (upto < 1 || upto > enc.layers.size()) {
    throw ContractError("forward: upto=" + std::to_string(upto) + " outside [1, " + std::to_string(enc.layers.size()) + "]");
  }
  const auto len = tokens.ids.size();
  if (len == 0 || len > cfg.max_seq) {
    throw LengthError("sequence of " + std::to_string(len) + " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  std::vector<std::size_t> ids(tokens.ids.begin(), tokens.ids.end());
  std::vector<std::size_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = i;
  Var h = add(gather_rows(enc.tok_emb, std::move(ids)), gather_rows(enc.pos_emb, std::move(positions)));
  for (std::size_t l = 0; l < upto; ++l) {
    const auto& w = enc.layers[l];
    h = add(h, detail::self_attention(layer_norm_rows(h, w[0], w[1], kLayerNormEps), w, cfg.n_heads));
    h = add(h, detail::feed_forward(layer_norm_rows(h, w[6], w[7], kLayerNormEps), w));
  }
  return h;
}

/// The [RET] row of a hidden-state matrix, as a 1 x d matrix.
inline Var extract_ret(Var hidden, const TokenSequence& tokens) {
  if (hidden.value().rows() != tokens.ids.size()) throw DimensionError("extract_ret: hidden length does not match tokens");
  return slice_rows(hidden, tokens.ret_position, tokens.ret_position + 1);
}

/// Inference-only forward; no gradient bookkeeping is recorded.
inline Tensor forward(const Encoder& encoder, const TokenSequence& tokens, std::size_t upto) {
  Graph g;
  const auto b = bind(g, encoder, false);
  return forward(b, tokens, upto).value();
}

inline Embedding extract_ret_embedding(const Tensor& hidden, const TokenSequence& tokens, std::size_t source_layer) {
  if (hidden.rows() != tokens.ids.size()) throw DimensionError("extract_ret_embedding: hidden length does not match tokens");
  const auto row = hidden.row(tokens.ret_position);
  return Embedding{std::vector<double>(row.begin(), row.end()), source_layer};
}

/// Un-normalised [RET] embedding at depth `upto`.
inline Embedding embed(const Encoder& encoder, const TokenSequence& tokens, std::size_t upto) {
  return extract_ret_embedding(forward(encoder, tokens, upto), tokens, upto);
}

/// Analytic forward-pass FLOP count (multiply-add = 2 FLOPs).
///   per layer : 2*s*d*(3d + d)    Q/K/V/output projections
///             + 2*2*s^2*d         attention scores and weighted values
///             + 2*s*2*d*4d        two feed-forward matmuls
///   embedding : 2*s*d             token + position lookup-add
struct FlopsEstimate {
  double embedding = 0;
  double per_layer = 0;
  double layer_stack = 0;
  double total = 0;
};

inline FlopsEstimate estimate_flops(const EncoderConfig& config, std::uint32_t k, std::uint32_t seq_len) {
  if (seq_len > config.max_seq) {
    throw ContractError("estimate_flops: seq_len " + std::to_string(seq_len) + " exceeds max_seq " +
                        std::to_string(config.max_seq));
  }
  const double s = seq_len, d = config.d_model;
  FlopsEstimate e;
  e.per_layer = 2 * s * d * (3 * d + d) + 2 * 2 * s * s * d + 2 * s * 2 * d * 4 * d;
  e.layer_stack = e.per_layer * k;
  e.embedding = 2 * s * d;
  e.total = e.embedding + e.layer_stack;
  return e;
}

}  // namespace umr
