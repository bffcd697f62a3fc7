#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "test_util.hpp"
#include "umr/gradcheck.hpp"
#include "umr/losses.hpp"

using namespace umr;
using umr::testing::random_matrix;
using umr::testing::random_similarity;

namespace {

double value_of(const std::function<Var(Graph&)>& f) {
  Graph g;
  return f(g).value().item();
}

// Cross-entropy of S[i][j] / T[i][j] against the diagonal, in plain loops.
double scalar_ce(const Tensor& s, const std::vector<std::vector<double>>& t) {
  const auto n = s.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(s.at(i, j) / t[i][j]);
    total += -(s.at(i, i) / t[i][i] - std::log(z));
  }
  return total / static_cast<double>(n);
}

std::vector<Modality> random_tags(Rng& rng, std::size_t n) {
  std::vector<Modality> tags(n);
  for (auto& t : tags) t = static_cast<Modality>(rng.below(3));
  return tags;
}

}  // namespace

TEST(CosineMatrix, Examples) {
  const auto eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const auto s = [&] {
    Graph g;
    return cosine_similarity_matrix(g.constant(eye), g.constant(eye)).value();
  }();
  EXPECT_TRUE(s.identical(eye));
  const auto neg = [&] {
    Graph g;
    return cosine_similarity_matrix(g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})),
                                    g.constant(Tensor::matrix(2, 2, {-1, -2, -3, -4})))
        .value();
  }();
  EXPECT_NEAR(neg.at(0, 0), -1.0, 1e-15);
  EXPECT_NEAR(neg.at(1, 1), -1.0, 1e-15);
}

TEST(CosineMatrix, ScalarOracle) {
  Rng rng(1);
  const auto q = random_matrix(rng, 3, 4), c = random_matrix(rng, 3, 4);
  Graph g;
  const auto s = cosine_similarity_matrix(g.constant(q), g.constant(c)).value();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0, nq = 0, nc = 0;
      for (std::size_t l = 0; l < 4; ++l) {
        dot += q.at(i, l) * c.at(j, l);
        nq += q.at(i, l) * q.at(i, l);
        nc += c.at(j, l) * c.at(j, l);
      }
      EXPECT_LT(std::abs(s.at(i, j) - dot / std::sqrt(nq * nc)), 1e-12);
    }
  }
}

TEST(CosineMatrix, ZeroRowNoNan) {
  Graph g;
  const auto s = cosine_similarity_matrix(g.constant(Tensor::matrix(2, 2, {0, 0, 1, 0})),
                                          g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1})))
                     .value();
  for (double v : s.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(s.at(0, 0), 0.0);
}

TEST(InfoNce, Examples) {
  EXPECT_EQ(value_of([](Graph& g) { return infonce(g.constant(Tensor::matrix(1, 1, {0.3})), 0.05); }), 0.0);
  EXPECT_NEAR(value_of([](Graph& g) { return infonce(g.constant(Tensor::filled({4, 4}, 0.2)), 0.1); }), std::log(4.0),
              1e-12);
  EXPECT_NEAR(value_of([](Graph& g) { return infonce(g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1})), 1.0); }),
              std::log(1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(std::log(1.0 + std::exp(-1.0)), 0.3133, 1e-4);
}

TEST(InfoNce, BadTemperature) {
  Graph g;
  EXPECT_THROW(infonce(g.constant(Tensor::filled({2, 2}, 0.0)), 0.0), ContractError);
  EXPECT_THROW(infonce(g.constant(Tensor::filled({2, 2}, 0.0)), -1.0), ContractError);
}

TEST(Partition, Examples) {
  const auto all = modality_partition({Modality::text, Modality::text, Modality::text});
  for (auto v : all.same) EXPECT_TRUE(v);
  const auto two = modality_partition({Modality::text, Modality::image});
  EXPECT_TRUE(two(0, 0));
  EXPECT_FALSE(two(0, 1));
  EXPECT_FALSE(two(1, 0));
  EXPECT_TRUE(two(1, 1));
  Rng rng(3);
  const auto m = modality_partition(random_tags(rng, 12));
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 12; ++j) EXPECT_EQ(m(i, j), m(j, i));
}

TEST(MacLoss, WorkedExample) {
  const auto s = Tensor::matrix(2, 2, {0.9, 0.1, 0.2, 0.8});
  const std::vector<Modality> tags{Modality::text, Modality::image};
  const double got = value_of([&](Graph& g) { return mac_loss(g.constant(s), tags, 0.5, 1.0, MacMode::mac); });
  const double oracle = scalar_ce(s, {{0.5, 1.0}, {1.0, 0.5}});
  EXPECT_NEAR(got, oracle, 1e-14);
  EXPECT_NEAR(got, (std::log(1 + std::exp(-1.7)) + std::log(1 + std::exp(-1.4))) / 2, 1e-14);
}

TEST(MacLoss, ModesAgainstScalarOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 2 + rng.below(8);
    const auto s = random_similarity(rng, n);
    const auto tags = random_tags(rng, n);
    for (auto mode : {MacMode::mac, MacMode::reverse, MacMode::off}) {
      std::vector<std::vector<double>> t(n, std::vector<double>(n));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const bool same = tags[i] == tags[j];
          t[i][j] = mode == MacMode::off ? 0.07 : ((same == (mode == MacMode::mac)) ? 0.03 : 0.07);
        }
      }
      const double got = value_of([&](Graph& g) { return mac_loss(g.constant(s), tags, 0.03, 0.07, mode); });
      EXPECT_NEAR(got, scalar_ce(s, t), 1e-11);
    }
  }
}

TEST(MacLoss, DegeneratesToInfoNce) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 1 + rng.below(16);
    const auto s = random_similarity(rng, n);
    const auto tags = random_tags(rng, n);
    const double tau = 0.02 + rng.uniform();
    const double base = value_of([&](Graph& g) { return infonce(g.constant(s), tau); });
    for (auto mode : {MacMode::mac, MacMode::reverse, MacMode::off})
      EXPECT_LT(std::abs(value_of([&](Graph& g) { return mac_loss(g.constant(s), tags, tau, tau, mode); }) - base), 1e-12);
    const std::vector<Modality> same(n, Modality::image);
    EXPECT_LT(std::abs(value_of([&](Graph& g) { return mac_loss(g.constant(s), same, tau, 0.5, MacMode::mac); }) - base),
              1e-12);
  }
}

TEST(MacLoss, ReverseIsSwappedMac) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 1 + rng.below(10);
    const auto s = random_similarity(rng, n);
    const auto tags = random_tags(rng, n);
    const double a = 0.01 + rng.uniform(), b = 0.01 + rng.uniform();
    EXPECT_EQ(value_of([&](Graph& g) { return mac_loss(g.constant(s), tags, a, b, MacMode::reverse); }),
              value_of([&](Graph& g) { return mac_loss(g.constant(s), tags, b, a, MacMode::mac); }));
  }
}

TEST(MacLoss, PermutationEquivariant) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 2 + rng.below(10);
    const auto s = random_similarity(rng, n);
    const auto tags = random_tags(rng, n);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<double> ps(n * n);
    std::vector<Modality> pt(n);
    for (std::size_t i = 0; i < n; ++i) {
      pt[i] = tags[perm[i]];
      for (std::size_t j = 0; j < n; ++j) ps[i * n + j] = s.at(perm[i], perm[j]);
    }
    const double a = value_of([&](Graph& g) { return mac_loss(g.constant(s), tags, 0.04, 0.05, MacMode::mac); });
    const double b =
        value_of([&](Graph& g) { return mac_loss(g.constant(Tensor::matrix(n, n, ps)), pt, 0.04, 0.05, MacMode::mac); });
    EXPECT_LT(std::abs(a - b), 1e-12);
  }
}

TEST(MacLoss, NonNegativeAndErrors) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 1 + rng.below(10);
    const auto s = random_similarity(rng, n);
    EXPECT_GE(value_of([&](Graph& g) { return mac_loss(g.constant(s), random_tags(rng, n), 0.03, 0.05, MacMode::mac); }),
              0.0);
  }
  Graph g;
  const auto s = g.constant(Tensor::filled({2, 2}, 0.0));
  EXPECT_THROW(mac_loss(s, {Modality::text, Modality::text}, 0.0, 1.0, MacMode::mac), ContractError);
  EXPECT_THROW(mac_loss(s, {Modality::text}, 0.5, 1.0, MacMode::mac), DimensionError);
}

TEST(SelfDistill, Examples) {
  const auto mse = value_of([](Graph& g) {
    return self_distill(g.constant(Tensor::matrix(1, 2, {1, 0})), g.constant(Tensor::matrix(1, 2, {0, 0})),
                        g.constant(Tensor::matrix(1, 2, {0, 1})), g.constant(Tensor::matrix(1, 2, {0, 0})), {});
  });
  EXPECT_EQ(mse, 2.0);
  Rng rng(9);
  const auto q = random_matrix(rng, 4, 6), c = random_matrix(rng, 4, 6);
  for (auto v : {DistillVariant::mse, DistillVariant::cosine, DistillVariant::kl}) {
    const DistillOptions opts{v, 0.05, false};
    const double same = value_of([&](Graph& g) {
      return self_distill(g.constant(q), g.constant(q), g.constant(c), g.constant(c), opts);
    });
    EXPECT_NEAR(same, 0.0, 1e-12) << to_string(v);
  }
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_matrix(rng, 4, 6), b = random_matrix(rng, 4, 6);
    EXPECT_GE(value_of([&](Graph& g) {
                return self_distill(g.constant(q), g.constant(a), g.constant(c), g.constant(b), {DistillVariant::kl});
              }),
              0.0);
  }
}

TEST(SelfDistill, MseScalarOracle) {
  Rng rng(10);
  const auto tq = random_matrix(rng, 3, 5), sq = random_matrix(rng, 3, 5), tc = random_matrix(rng, 3, 5),
             sc = random_matrix(rng, 3, 5);
  double ref = 0.0;
  for (std::size_t i = 0; i < tq.size(); ++i) ref += (tq[i] - sq[i]) * (tq[i] - sq[i]) + (tc[i] - sc[i]) * (tc[i] - sc[i]);
  ref /= 3.0;
  EXPECT_NEAR(value_of([&](Graph& g) {
                return self_distill(g.constant(tq), g.constant(sq), g.constant(tc), g.constant(sc), {});
              }),
              ref, 1e-12);
}

TEST(SelfDistill, ShapeMismatch) {
  Graph g;
  const auto a = g.constant(Tensor::zeros({2, 3})), b = g.constant(Tensor::zeros({3, 3}));
  EXPECT_THROW(self_distill(a, b, a, a, {}), DimensionError);
  EXPECT_THROW(self_distill(a, a, a, a, {DistillVariant::none}), ContractError);
}

TEST(PretrainingLoss, Examples) {
  auto eval = [](double a1, double a2) {
    return value_of([&](Graph& g) {
      return pretraining_loss(g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(2.0)), a1, a2);
    });
  };
  EXPECT_NEAR(eval(0.9, 0.1), 1.1, 1e-15);
  EXPECT_EQ(eval(1, 0), 1.0);
  EXPECT_EQ(eval(0, 1), 2.0);
}

// Backward vs central differences with respect to the embeddings.
class LossGradient : public ::testing::TestWithParam<int> {};

TEST_P(LossGradient, AllLosses) {
  Rng rng(static_cast<std::uint64_t>(GetParam()) + 1000);
  const std::size_t n = 5, d = 4;
  const auto q = random_matrix(rng, n, d), c = random_matrix(rng, n, d);
  const auto tq = random_matrix(rng, n, d), tc = random_matrix(rng, n, d);
  const auto tags = random_tags(rng, n);
  auto sim = [](const std::vector<Var>& x) { return cosine_similarity_matrix(x[0], x[1]); };
  std::vector<std::pair<std::string, GraphObjective>> cases = {
      {"infonce", [&](Graph&, const std::vector<Var>& x) { return infonce(sim(x), 0.1); }},
  };
  for (auto mode : {MacMode::mac, MacMode::reverse, MacMode::off}) {
    cases.emplace_back("mac_" + std::string(to_string(mode)), [&, mode](Graph&, const std::vector<Var>& x) {
      return mac_loss(sim(x), tags, 0.07, 0.1, mode);
    });
  }
  for (auto v : {DistillVariant::mse, DistillVariant::cosine, DistillVariant::kl}) {
    cases.emplace_back("distill_" + std::string(to_string(v)), [&, v](Graph& g, const std::vector<Var>& x) {
      return self_distill(g.constant(tq), x[0], g.constant(tc), x[1], {v, 0.1, false});
    });
  }
  cases.emplace_back("distill_mse_normalized", [&](Graph& g, const std::vector<Var>& x) {
    return self_distill(g.constant(tq), x[0], g.constant(tc), x[1], {DistillVariant::mse, 0.1, true});
  });
  cases.emplace_back("pretraining", [&](Graph& g, const std::vector<Var>& x) {
    return pretraining_loss(infonce(sim(x), 0.1), self_distill(g.constant(tq), x[0], g.constant(tc), x[1], {}), 0.9, 0.1);
  });
  for (const auto& [name, f] : cases) EXPECT_LT(check_gradients(f, {q, c}).max_rel_error, 1e-4) << name;
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGradient, ::testing::Range(0, 5));
