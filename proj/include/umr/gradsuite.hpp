#pragma once

#include <string>
#include <vector>

#include "umr/encoder.hpp"
#include "umr/gradcheck.hpp"
#include "umr/losses.hpp"
#include "umr/rng.hpp"

namespace umr {

struct GradSuiteEntry {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
};

namespace detail {

inline Tensor gaussian(Rng& rng, std::size_t m, std::size_t n) {
  std::vector<double> v(m * n);
  for (auto& x : v) x = rng.normal();
  return Tensor::matrix(m, n, std::move(v));
}

/// Binds leaf variables laid out as Encoder::parameters() to an encoder view.
inline BoundEncoder bind_leaves(const Encoder& enc, const std::vector<Var>& x) {
  BoundEncoder b;
  b.config = &enc.config();
  b.tok_emb = x[0];
  b.pos_emb = x[1];
  b.params = x;
  for (std::size_t l = 0; l < enc.config().n_layers; ++l) {
    std::array<Var, LayerWeights::kCount> lv;
    for (std::size_t j = 0; j < LayerWeights::kCount; ++j) lv[j] = x[2 + l * LayerWeights::kCount + j];
    b.layers.push_back(lv);
  }
  return b;
}

}  // namespace detail

/// Finite-difference check of every loss variant and a 2-layer d_model=4 encoder, per seed.
inline std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seeds = 5, double h = 1e-5) {
  std::vector<GradSuiteEntry> out;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    Rng rng(mix64(seed, 0x9cad));
    const std::size_t n = 6, d = 4;
    const auto q = detail::gaussian(rng, n, d), c = detail::gaussian(rng, n, d);
    const auto tq = detail::gaussian(rng, n, d), tc = detail::gaussian(rng, n, d);
    std::vector<Modality> tags(n);
    for (std::size_t i = 0; i < n; ++i) tags[i] = kModalities[i % 3];
    rng.shuffle(tags);
    auto sim = [](const std::vector<Var>& x) { return cosine_similarity_matrix(x[0], x[1]); };
    std::vector<std::pair<std::string, GraphObjective>> cases;
    cases.emplace_back("infonce", [&](Graph&, const std::vector<Var>& x) { return infonce(sim(x), 0.1); });
    for (auto mode : {MacMode::mac, MacMode::reverse, MacMode::off}) {
      cases.emplace_back("mac_loss/" + std::string(to_string(mode)), [&, mode](Graph&, const std::vector<Var>& x) {
        return mac_loss(sim(x), tags, 0.07, 0.1, mode);
      });
    }
    for (auto v : {DistillVariant::mse, DistillVariant::cosine, DistillVariant::kl}) {
      cases.emplace_back("self_distill/" + std::string(to_string(v)), [&, v](Graph& g, const std::vector<Var>& x) {
        return self_distill(g.constant(tq), x[0], g.constant(tc), x[1], {v, 0.1, false});
      });
    }
    cases.emplace_back("pretraining_loss", [&](Graph& g, const std::vector<Var>& x) {
      return pretraining_loss(infonce(sim(x), 0.1), self_distill(g.constant(tq), x[0], g.constant(tc), x[1], {}), 0.9,
                              0.1);
    });
    for (const auto& [name, f] : cases) out.push_back({name, seed, check_gradients(f, {q, c}, h).max_rel_error});

    EncoderConfig cfg;
    cfg.vocab_size = 70;
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.max_seq = 8;
    cfg.k = 2;
    const auto enc = Encoder::init(cfg, seed);
    TokenSequence t;
    for (int i = 0; i < 5; ++i) t.ids.push_back(static_cast<std::uint32_t>(rng.below(70)));
    t.ret_position = 4;
    const auto w = detail::gaussian(rng, 5, 4);
    const auto res = check_gradients(
        [&](Graph& g, const std::vector<Var>& x) {
          return sum(mul(forward(detail::bind_leaves(enc, x), t, 2), g.constant(w)));
        },
        enc.parameters(), h);
    out.push_back({"encoder_end_to_end", seed, res.max_rel_error});
  }
  return out;
}

}  // namespace umr
