#pragma once

#include <cmath>
#include <vector>

#include "umr/datagen.hpp"
#include "umr/encoder.hpp"
#include "umr/rng.hpp"
#include "umr/tensor.hpp"

namespace umr::testing {

inline Tensor random_matrix(Rng& rng, std::size_t m, std::size_t n, double scale = 1.0) {
  std::vector<double> v(m * n);
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::matrix(m, n, std::move(v));
}

inline Tensor random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::vector(std::move(v));
}

/// Similarity-like matrix with entries in [-1, 1].
inline Tensor random_similarity(Rng& rng, std::size_t n) {
  std::vector<double> v(n * n);
  for (auto& x : v) x = 2.0 * rng.uniform() - 1.0;
  return Tensor::matrix(n, n, std::move(v));
}

/// A corpus small enough for per-test training runs.
inline CorpusSpec tiny_spec(std::uint64_t seed = 0) {
  CorpusSpec s;
  s.n_concepts = 40;
  s.text_vocab = 32;
  s.image_vocab = 48;
  s.text_len = 4;
  s.image_len = 6;
  s.distractors = 1;
  s.test_fraction = 0.25;
  s.seed = seed;
  return s;
}

inline EncoderConfig tiny_encoder_config(const CorpusSpec& spec, std::uint32_t layers = 3) {
  EncoderConfig c;
  c.vocab_size = spec.min_vocab_size();
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = layers;
  c.max_seq = spec.max_prompt_len();
  c.k = layers;
  return c;
}

}  // namespace umr::testing
