#include <gtest/gtest.h>

#include "test_util.hpp"
#include "umr/eval.hpp"

using namespace umr;
using namespace umr::testing;

TEST(Recall, Examples) {
  std::map<std::uint32_t, std::uint32_t> gold{{0, 10}, {1, 11}};
  std::map<std::uint32_t, std::vector<std::uint32_t>> first{{0, {10, 3}}, {1, {11, 4}}};
  EXPECT_EQ(recall_at_k(first, gold, 1), 1.0);
  std::map<std::uint32_t, std::vector<std::uint32_t>> never{{0, {1, 2}}, {1, {3, 4}}};
  EXPECT_EQ(recall_at_k(never, gold, 5), 0.0);
  std::map<std::uint32_t, std::vector<std::uint32_t>> missing{{0, {10}}};
  EXPECT_EQ(recall_at_k(missing, gold, 5), 0.5);
}

TEST(Recall, HandFixture) {
  // Ten queries with the gold at ranks 1, 2, 3, 6, 7, 11, 4, absent, 5, 9.
  const std::vector<int> ranks{1, 2, 3, 6, 7, 11, 4, 0, 5, 9};
  std::map<std::uint32_t, std::uint32_t> gold;
  std::map<std::uint32_t, std::vector<std::uint32_t>> results;
  for (std::uint32_t q = 0; q < 10; ++q) {
    gold[q] = 1000 + q;
    std::vector<std::uint32_t> list(12);
    for (std::uint32_t i = 0; i < 12; ++i) list[i] = 2000 + i;
    if (ranks[q] > 0) list[static_cast<std::size_t>(ranks[q] - 1)] = 1000 + q;
    results[q] = list;
  }
  EXPECT_EQ(recall_at_k(results, gold, 5), 0.5);
  double prev = 0.0;
  for (std::size_t k = 1; k <= 12; ++k) {
    const double r = recall_at_k(results, gold, k);
    EXPECT_GE(r, prev);
    prev = r;
  }
}

TEST(Separation, Constructed) {
  EmbeddingIndex idx;
  idx.dim = 2;
  idx.add(0, Modality::text, 0, std::vector<double>{1, 0});
  idx.add(1, Modality::text, 0, std::vector<double>{1, 0});
  idx.add(2, Modality::image, 0, std::vector<double>{0, 1});
  idx.add(3, Modality::image, 0, std::vector<double>{0, 1});
  const auto s = modality_separation(idx);
  EXPECT_DOUBLE_EQ(s.intra, 1.0);
  EXPECT_DOUBLE_EQ(s.inter, 0.0);
  EXPECT_DOUBLE_EQ(s.gap, 1.0);
  EmbeddingIndex same;
  same.dim = 2;
  for (std::uint32_t i = 0; i < 6; ++i) same.add(i, static_cast<Modality>(i % 3), 0, std::vector<double>{0.6, 0.8});
  EXPECT_NEAR(modality_separation(same).gap, 0.0, 1e-12);
}

TEST(Separation, MatchesPairwiseLoop) {
  Rng rng(1);
  EmbeddingIndex idx;
  idx.dim = 5;
  for (std::uint32_t i = 0; i < 30; ++i) {
    std::vector<double> v(5);
    for (auto& x : v) x = rng.normal();
    idx.add(i, static_cast<Modality>(rng.below(3)), 0, l2_normalized(v));
  }
  double intra = 0, inter = 0;
  std::size_t ni = 0, ne = 0;
  for (std::size_t a = 0; a < idx.size(); ++a) {
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (a == b) continue;
      double d = 0;
      for (std::size_t j = 0; j < 5; ++j) d += static_cast<double>(idx.vector(a)[j]) * idx.vector(b)[j];
      if (idx.modalities[a] == idx.modalities[b]) intra += d, ++ni;
      else inter += d, ++ne;
    }
  }
  const auto s = modality_separation(idx);
  EXPECT_NEAR(s.intra, intra / ni, 1e-12);
  EXPECT_NEAR(s.inter, inter / ne, 1e-12);
}

TEST(Separation, NeedsTwoModalities) {
  EmbeddingIndex idx;
  idx.dim = 2;
  idx.add(0, Modality::text, 0, std::vector<double>{1, 0});
  idx.add(1, Modality::text, 0, std::vector<double>{0, 1});
  EXPECT_THROW(modality_separation(idx), ContractError);
  idx.add(2, Modality::image, 0, std::vector<double>{0, 1});
  EXPECT_THROW(modality_separation(idx), ContractError);
}

TEST(Pca, SeparatesAlongFirstAxis) {
  EmbeddingIndex idx;
  idx.dim = 3;
  Rng rng(2);
  for (std::uint32_t i = 0; i < 20; ++i) {
    const double side = i < 10 ? 1.0 : -1.0;
    idx.add(i, i < 10 ? Modality::text : Modality::image, 0,
            std::vector<double>{side * 5 + 0.1 * rng.normal(), 0.1 * rng.normal(), 0.01 * rng.normal()});
  }
  const auto pts = pca_2d(idx);
  ASSERT_EQ(pts.size(), 20u);
  for (const auto& p : pts) EXPECT_GT(std::abs(p.x), 3.0);
  EXPECT_EQ(pca_csv(pts).substr(0, 15), "id,modality,x,y");
}

TEST(Evaluate, ScopeDominanceMonotoneAndRepeatable) {
  const auto spec = tiny_spec(3);
  const auto corpus = generate_corpus(spec);
  const auto enc = Encoder::init(tiny_encoder_config(spec), 4);
  EvalSettings s;
  s.scopes = {PoolScope::local, PoolScope::global};
  s.ks = {1, 5, 10};
  const auto r = evaluate(enc, corpus, s, "ck", "cfg");
  const auto r2 = evaluate(enc, corpus, s, "ck", "cfg");
  EXPECT_EQ(r.to_csv(), r2.to_csv());
  EXPECT_EQ(r.rows.size(), spec.tasks.size() * 2 * 3);
  for (auto t : spec.tasks) {
    double prev = 0.0;
    for (std::uint32_t k : {1u, 5u, 10u}) {
      EXPECT_GE(r.recall(t, PoolScope::local, k), r.recall(t, PoolScope::global, k));
      EXPECT_GE(r.recall(t, PoolScope::local, k), prev);
      prev = r.recall(t, PoolScope::local, k);
    }
  }
  const auto csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,dataset,scope,k,recall,checkpoint,config_hash");
}

TEST(Evaluate, PerDatasetK) {
  const auto spec = tiny_spec(3);
  const auto corpus = generate_corpus(spec);
  const auto enc = Encoder::init(tiny_encoder_config(spec), 4);
  EvalSettings s;
  s.k_override["synth_i2i"] = 10;
  const auto r = evaluate(enc, corpus, s);
  for (const auto& row : r.rows) EXPECT_EQ(row.k, row.dataset == "synth_i2i" ? 10u : 5u);
}

TEST(Evaluate, IncompatibleCheckpoint) {
  const auto spec = tiny_spec(3);
  const auto corpus = generate_corpus(spec);
  auto cfg = tiny_encoder_config(spec);
  cfg.vocab_size = 400;
  EXPECT_THROW(evaluate(Encoder::init(cfg, 1), corpus, EvalSettings{}), ConfigurationError);
}
