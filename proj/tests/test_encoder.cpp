#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "umr/encoder.hpp"
#include "umr/gradcheck.hpp"

using namespace umr;

namespace {

EncoderConfig small_config(std::uint32_t layers = 4, std::uint32_t d = 8, std::uint32_t heads = 2) {
  EncoderConfig c;
  c.vocab_size = 80;
  c.d_model = d;
  c.n_heads = heads;
  c.n_layers = layers;
  c.max_seq = 12;
  c.k = layers;
  return c;
}

TokenSequence random_tokens(Rng& rng, std::size_t len, std::uint32_t vocab) {
  TokenSequence t;
  for (std::size_t i = 0; i + 1 < len; ++i) t.ids.push_back(static_cast<std::uint32_t>(tok::kReservedEnd + rng.below(vocab - tok::kReservedEnd)));
  t.ids.push_back(tok::kRet);
  t.ret_position = len - 1;
  return t;
}

}  // namespace

TEST(Prompt, TextQueryLayout) {
  const std::vector<std::uint32_t> content{101, 102};
  const auto t = assemble_prompt(Task::t2i, Modality::text, content, Side::query, 40);
  const std::vector<std::uint32_t> expected{tok::instruction(Task::t2i), tok::kModText, 101, 102, tok::kSep,
                                            tok::kSumText, tok::kRet};
  EXPECT_EQ(t.ids, expected);
  EXPECT_EQ(t.ret_position, 6u);
}

TEST(Prompt, EmptyContent) {
  const auto t = assemble_prompt(Task::i2i, Modality::image, {}, Side::query, 40);
  EXPECT_EQ(t.ids.size(), 5u);
  EXPECT_EQ(t.ret_position, 4u);
  EXPECT_EQ(t.ids[4], tok::kRet);
}

TEST(Prompt, ImageTokensFirst) {
  const VocabLayout layout;
  const std::vector<std::uint32_t> content{101, 5001, 102, 5002, 5003};
  const auto t = assemble_prompt(Task::it2t, Modality::image_text, content, Side::query, 40, layout);
  std::size_t last_image = 0, first_text = t.ids.size();
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    if (layout.is_image(t.ids[i])) last_image = i;
    if (layout.is_text(t.ids[i])) first_text = std::min(first_text, i);
  }
  EXPECT_LT(last_image, first_text);
  EXPECT_EQ(t.ids[2], 5001u);
  EXPECT_EQ(t.ids[5], 101u);
}

TEST(Prompt, CandidateGetsNoOpInstruction) {
  const std::vector<std::uint32_t> content{101};
  EXPECT_EQ(assemble_prompt(Task::t2i, Modality::text, content, Side::candidate, 40).ids[0], tok::kCandidateInstr);
  EXPECT_EQ(assemble_prompt(Task::i2t, Modality::text, content, Side::candidate, 40).ids[0], tok::kCandidateInstr);
}

TEST(Prompt, Overflow) {
  const std::vector<std::uint32_t> content(10, 101);
  EXPECT_THROW(assemble_prompt(Task::t2t, Modality::text, content, Side::query, 14), LengthError);
  EXPECT_NO_THROW(assemble_prompt(Task::t2t, Modality::text, content, Side::query, 15));
}

TEST(EncoderConfig, Invariants) {
  auto c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigurationError);
  c = small_config();
  c.k = 5;
  EXPECT_THROW(c.validate(), ConfigurationError);
}

TEST(Forward, UptoRange) {
  const auto enc = Encoder::init(small_config(), 1);
  Rng rng(1);
  const auto t = random_tokens(rng, 6, 80);
  EXPECT_THROW(forward(enc, t, 0), ContractError);
  EXPECT_THROW(forward(enc, t, 5), ContractError);
  EXPECT_EQ(forward(enc, t, 4).rows(), 6u);
}

TEST(Forward, PrefixProperty) {
  const auto enc = Encoder::init(small_config(), 2);
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    const auto t = random_tokens(rng, 3 + rng.below(9), 80);
    for (std::uint32_t k : {1u, 2u, 4u}) EXPECT_TRUE(forward(enc, t, k).identical(forward(prune(enc, k), t, k)));
  }
}

TEST(Forward, Deterministic) {
  const auto a = Encoder::init(small_config(), 3), b = Encoder::init(small_config(), 3);
  EXPECT_TRUE(a.identical(b));
  Rng rng(3);
  const auto t = random_tokens(rng, 7, 80);
  EXPECT_TRUE(embed(a, t, 4).vector == embed(b, t, 4).vector);
}

// Scalar re-implementation of one pre-norm layer, one head, d_model = 2.
TEST(Forward, ScalarOracle) {
  auto cfg = small_config(1, 2, 1);
  const auto enc = Encoder::init(cfg, 4);
  Rng rng(4);
  const auto t = random_tokens(rng, 5, 80);
  const auto h = forward(enc, t, 1);

  const std::size_t n = t.ids.size();
  const auto& L = enc.layers()[0];
  std::vector<std::array<double, 2>> x(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int j = 0; j < 2; ++j)
      x[i][j] = enc.token_embedding().at(t.ids[i], j) + enc.position_embedding().at(i, j);
  auto ln = [](std::array<double, 2> v, const Tensor& g, const Tensor& b) {
    const double mu = (v[0] + v[1]) / 2;
    const double var = ((v[0] - mu) * (v[0] - mu) + (v[1] - mu) * (v[1] - mu)) / 2;
    std::array<double, 2> o{};
    for (int j = 0; j < 2; ++j) o[j] = (v[j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
    return o;
  };
  auto mv = [](std::array<double, 2> v, const Tensor& w) {
    return std::array<double, 2>{v[0] * w.at(0, 0) + v[1] * w.at(1, 0), v[0] * w.at(0, 1) + v[1] * w.at(1, 1)};
  };
  std::vector<std::array<double, 2>> q(n), k(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = ln(x[i], L.t[0], L.t[1]);
    q[i] = mv(a, L.t[2]);
    k[i] = mv(a, L.t[3]);
    v[i] = mv(a, L.t[4]);
  }
  std::vector<std::array<double, 2>> x1(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n);
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / std::sqrt(2.0);
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (auto& e : s) z += (e = std::exp(e - mx));
    std::array<double, 2> o{0, 0};
    for (std::size_t j = 0; j < n; ++j)
      for (int c = 0; c < 2; ++c) o[c] += s[j] / z * v[j][c];
    const auto proj = mv(o, L.t[5]);
    for (int c = 0; c < 2; ++c) x1[i][c] = x[i][c] + proj[c];
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = ln(x1[i], L.t[6], L.t[7]);
    std::vector<double> hid(8);
    for (int f = 0; f < 8; ++f) {
      const double u = a[0] * L.t[8].at(0, f) + a[1] * L.t[8].at(1, f) + L.t[9][f];
      hid[f] = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
    }
    for (int c = 0; c < 2; ++c) {
      double o = L.t[11][c];
      for (int f = 0; f < 8; ++f) o += hid[f] * L.t[10].at(f, c);
      EXPECT_LT(std::abs(h.at(i, c) - (x1[i][c] + o)), 1e-10);
    }
  }
}

TEST(Extract, LastRowAndWidth) {
  const auto enc = Encoder::init(small_config(), 5);
  Rng rng(5);
  const auto t = random_tokens(rng, 6, 80);
  const auto h = forward(enc, t, 3);
  const auto e = extract_ret_embedding(h, t, 3);
  EXPECT_EQ(e.vector.size(), 8u);
  EXPECT_EQ(e.source_layer, 3u);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(e.vector[j], h.at(5, j));
}

TEST(Extract, ContextChangesEmbedding) {
  const auto enc = Encoder::init(small_config(), 6);
  const std::vector<std::uint32_t> a{70, 71, 72}, b{70, 75, 72};
  const auto ta = assemble_prompt(Task::t2t, Modality::text, a, Side::query, 12);
  const auto tb = assemble_prompt(Task::t2t, Modality::text, b, Side::query, 12);
  EXPECT_NE(embed(enc, ta, 4).vector, embed(enc, tb, 4).vector);
}

TEST(Prune, ParameterCountAndComposition) {
  auto cfg = small_config(8);
  const auto enc = Encoder::init(cfg, 7);
  const auto p3 = prune(enc, 3);
  std::size_t emb = enc.token_embedding().size() + enc.position_embedding().size();
  std::size_t per_layer = 0;
  for (const auto& t : enc.layers()[0].t) per_layer += t.size();
  EXPECT_EQ(p3.parameter_count(), emb + 3 * per_layer);
  EXPECT_EQ(p3.config().n_layers, 3u);
  EXPECT_TRUE(prune(prune(enc, 5), 3).identical(p3));
  EXPECT_TRUE(prune(enc, 8).identical(enc));
  EXPECT_THROW(prune(enc, 0), ContractError);
  EXPECT_THROW(prune(enc, 9), ContractError);
}

TEST(Encoder, GradientCheckEndToEnd) {
  auto cfg = small_config(2, 4, 2);
  cfg.vocab_size = 70;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto enc = Encoder::init(cfg, seed);
    Rng rng(seed + 100);
    const auto t = random_tokens(rng, 5, 70);
    const auto w = umr::testing::random_matrix(rng, 5, 4);
    const auto params = enc.parameters();
    const auto res = check_gradients(
        [&](Graph& g, const std::vector<Var>& x) {
          BoundEncoder b;
          b.config = &enc.config();
          b.tok_emb = x[0];
          b.pos_emb = x[1];
          b.params = x;
          for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            std::array<Var, LayerWeights::kCount> lv;
            for (std::size_t j = 0; j < LayerWeights::kCount; ++j) lv[j] = x[2 + l * LayerWeights::kCount + j];
            b.layers.push_back(lv);
          }
          return sum(mul(forward(b, t, 2), g.constant(w)));
        },
        params);
    EXPECT_LT(res.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Flops, LinearInK) {
  EncoderConfig c;
  c.n_layers = 28;
  c.k = 12;
  c.max_seq = 256;
  const auto e0 = estimate_flops(c, 0, 256);
  EXPECT_EQ(e0.total, e0.embedding);
  EXPECT_EQ(e0.layer_stack, 0.0);
  const auto e6 = estimate_flops(c, 6, 256), e12 = estimate_flops(c, 12, 256), e28 = estimate_flops(c, 28, 256);
  EXPECT_EQ(e12.layer_stack, 2 * e6.layer_stack);
  EXPECT_NEAR(e12.layer_stack / e28.layer_stack, 12.0 / 28.0, 1e-12);
  for (std::uint32_t k = 1; k <= 28; ++k) EXPECT_GT(estimate_flops(c, k, 256).total, estimate_flops(c, k - 1, 256).total);
  EXPECT_THROW(estimate_flops(c, 12, 257), ContractError);
}

TEST(Flops, FormulaByHand) {
  EncoderConfig c;
  c.d_model = 4;
  c.max_seq = 10;
  const auto e = estimate_flops(c, 1, 3);
  // 2*3*4*16 + 4*9*4 + 2*3*2*4*16
  EXPECT_EQ(e.per_layer, 384.0 + 144.0 + 768.0);
  EXPECT_EQ(e.embedding, 24.0);
}
