#pragma once

// Contrastive and distillation objectives on graph variables.
//
// Similarity matrices are G x G with queries on rows and candidates on
// columns; row i's positive is column i. All contrastive losses are one
// directional (query -> candidate).

#include <cmath>
#include <string>
#include <vector>

#include "umr/autograd.hpp"
#include "umr/vocab.hpp"

namespace umr {

/// Cosine similarity of every query row against every candidate row.
inline Var cosine_similarity_matrix(Var queries, Var candidates, double eps = 1e-12) {
  const auto& q = queries.value();
  const auto& c = candidates.value();
  if (q.rank() != 2 || c.rank() != 2 || q.rows() != c.rows() || q.cols() != c.cols()) {
    throw DimensionError("cosine_similarity_matrix: " + shape_str(q.shape()) + " vs " + shape_str(c.shape()));
  }
  return matmul_nt(l2_normalize_rows(queries, eps), l2_normalize_rows(candidates, eps));
}

namespace detail {

inline std::vector<std::size_t> diagonal_targets(std::size_t n) {
  std::vector<std::size_t> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = i;
  return t;
}

inline void require_square(const char* op, const Tensor& s) {
  if (s.rank() != 2 || s.rows() != s.cols() || s.rows() == 0) {
    throw DimensionError(std::string(op) + ": expected a non-empty square matrix, got " + shape_str(s.shape()));
  }
}

/// Mean cross-entropy of row-wise scores against the diagonal.
inline Var diagonal_cross_entropy(Var scores) {
  const auto n = scores.value().rows();
  return scale(sum(pick(log_softmax_rows(scores), diagonal_targets(n))), -1.0 / static_cast<double>(n));
}

}  // namespace detail

/// -(1/G) sum_i log softmax(S_i / tau)_i
inline Var infonce(Var similarity, double tau) {
  if (!(tau > 0.0)) throw ContractError("infonce: temperature must be positive, got " + std::to_string(tau));
  detail::require_square("infonce", similarity.value());
  return detail::diagonal_cross_entropy(scale(similarity, 1.0 / tau));
}

/// out[i][j] = tags[i] == tags[j], as a flat row-major mask.
struct ModalityMask {
  std::size_t n = 0;
  std::vector<char> same;

  bool operator()(std::size_t i, std::size_t j) const { return same[i * n + j] != 0; }
};

inline ModalityMask modality_partition(const std::vector<Modality>& tags) {
  ModalityMask m{tags.size(), std::vector<char>(tags.size() * tags.size())};
  for (std::size_t i = 0; i < tags.size(); ++i)
    for (std::size_t j = 0; j < tags.size(); ++j) m.same[i * m.n + j] = tags[i] == tags[j];
  return m;
}

enum class MacMode : std::uint8_t { mac, reverse, off };

inline std::string_view to_string(MacMode m) {
  switch (m) {
    case MacMode::mac: return "mac";
    case MacMode::reverse: return "reverse";
    case MacMode::off: return "off";
  }
  return "?";
}

inline MacMode parse_mac_mode(std::string_view s) {
  if (s == "mac") return MacMode::mac;
  if (s == "reverse") return MacMode::reverse;
  if (s == "off") return MacMode::off;
  throw ConfigurationError("unknown MAC mode '" + std::string(s) + "' (expected mac, reverse or off)");
}

/// Per-pair temperatures. mac: tau_hard where the target modalities agree, tau_norm
/// elsewhere; reverse swaps the two; off is tau_norm everywhere. The diagonal is
/// always a same-modality pair.
inline Tensor pair_temperatures(const ModalityMask& mask, double tau_hard, double tau_norm, MacMode mode) {
  std::vector<double> t(mask.n * mask.n);
  for (std::size_t i = 0; i < mask.n; ++i) {
    for (std::size_t j = 0; j < mask.n; ++j) {
      const bool intra = mask(i, j);
      double v = tau_norm;
      if (mode == MacMode::mac) v = intra ? tau_hard : tau_norm;
      if (mode == MacMode::reverse) v = intra ? tau_norm : tau_hard;
      t[i * mask.n + j] = v;
    }
  }
  return Tensor::matrix(mask.n, mask.n, std::move(t));
}

/// Cross-entropy of S / T against the diagonal, T the per-pair temperature matrix.
inline Var mac_loss(Var similarity, const std::vector<Modality>& tags, double tau_hard, double tau_norm, MacMode mode) {
  if (!(tau_hard > 0.0) || !(tau_norm > 0.0)) {
    throw ContractError("mac_loss: temperatures must be positive, got " + std::to_string(tau_hard) + " and " +
                        std::to_string(tau_norm));
  }
  detail::require_square("mac_loss", similarity.value());
  if (tags.size() != similarity.value().rows()) {
    throw DimensionError("mac_loss: " + std::to_string(tags.size()) + " tags for a " +
                         shape_str(similarity.value().shape()) + " similarity matrix");
  }
  const Tensor temps = pair_temperatures(modality_partition(tags), tau_hard, tau_norm, mode);
  std::vector<double> inv(temps.size());
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 / temps[i];
  return detail::diagonal_cross_entropy(mul_const(similarity, Tensor(temps.shape(), std::move(inv))));
}

// ---- self-distillation -------------------------------------------------------

enum class DistillVariant : std::uint8_t { none, mse, cosine, kl };

inline std::string_view to_string(DistillVariant v) {
  switch (v) {
    case DistillVariant::none: return "none";
    case DistillVariant::mse: return "mse";
    case DistillVariant::cosine: return "cosine";
    case DistillVariant::kl: return "kl";
  }
  return "?";
}

inline DistillVariant parse_distill_variant(std::string_view s) {
  if (s == "none") return DistillVariant::none;
  if (s == "mse") return DistillVariant::mse;
  if (s == "cosine") return DistillVariant::cosine;
  if (s == "kl") return DistillVariant::kl;
  throw ConfigurationError("unknown distill variant '" + std::string(s) + "' (expected none, mse, cosine or kl)");
}

struct DistillOptions {
  DistillVariant variant = DistillVariant::mse;
  /// Temperature of the KL variant's similarity softmax.
  double tau = 0.05;
  /// L2-normalise both sides before the MSE. Off by default (raw hidden states).
  bool normalize_mse = false;
};

namespace detail {

inline Var row_sq_dist_sum(Var teacher, Var student) {
  const Var diff = sub(teacher, student);
  return sum(mul(diff, diff));
}

inline Var row_cosine_gap_sum(Var teacher, Var student) {
  const auto n = teacher.value().rows();
  const Var cos = sum_rows(mul(l2_normalize_rows(teacher), l2_normalize_rows(student)));
  return affine(sum(cos), -1.0, static_cast<double>(n));
}

/// Mean over rows of KL(softmax(T/tau) || softmax(S/tau)).
inline Var similarity_kl(Var teacher_sim, Var student_sim, double tau) {
  const auto n = teacher_sim.value().rows();
  const Var log_p = log_softmax_rows(scale(teacher_sim, 1.0 / tau));
  const Var log_q = log_softmax_rows(scale(student_sim, 1.0 / tau));
  std::vector<double> p(log_p.value().size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_p.value()[i]);
  const Tensor pt(log_p.value().shape(), std::move(p));
  return scale(sum(mul_const(sub(log_p, log_q), pt)), 1.0 / static_cast<double>(n));
}

}  // namespace detail

/// Feature distillation of student [RET] states toward teacher states, for both
/// the query and candidate side. Teacher inputs should be untracked constants.
///   mse    : mean_i ||tq_i - sq_i||^2 + ||tc_i - sc_i||^2
///   cosine : mean_i (1 - cos(tq_i, sq_i)) + (1 - cos(tc_i, sc_i))
///   kl     : KL between row-softmaxed teacher and student query x candidate cosine matrices
inline Var self_distill(Var teacher_q, Var student_q, Var teacher_c, Var student_c, const DistillOptions& opts) {
  const auto& tq = teacher_q.value();
  for (const Var v : {student_q, teacher_c, student_c}) {
    if (v.value().shape() != tq.shape() || tq.rank() != 2) {
      throw DimensionError("self_distill: " + shape_str(tq.shape()) + " vs " + shape_str(v.value().shape()));
    }
  }
  const auto n = static_cast<double>(tq.rows());
  switch (opts.variant) {
    case DistillVariant::mse: {
      Var a = teacher_q, b = student_q, c = teacher_c, d = student_c;
      if (opts.normalize_mse) {
        a = l2_normalize_rows(a);
        b = l2_normalize_rows(b);
        c = l2_normalize_rows(c);
        d = l2_normalize_rows(d);
      }
      return scale(add(detail::row_sq_dist_sum(a, b), detail::row_sq_dist_sum(c, d)), 1.0 / n);
    }
    case DistillVariant::cosine:
      return scale(add(detail::row_cosine_gap_sum(teacher_q, student_q), detail::row_cosine_gap_sum(teacher_c, student_c)),
                   1.0 / n);
    case DistillVariant::kl: {
      if (!(opts.tau > 0.0)) throw ContractError("self_distill: KL temperature must be positive");
      return detail::similarity_kl(cosine_similarity_matrix(teacher_q, teacher_c),
                                   cosine_similarity_matrix(student_q, student_c), opts.tau);
    }
    case DistillVariant::none: break;
  }
  throw ContractError("self_distill: variant 'none' has no loss");
}

/// alpha1 * contrastive + alpha2 * distill
inline Var pretraining_loss(Var contrastive, Var distill, double alpha1, double alpha2) {
  if (alpha1 < 0.0 || alpha2 < 0.0) throw ContractError("pretraining_loss: weights must be non-negative");
  return add(scale(contrastive, alpha1), scale(distill, alpha2));
}

}  // namespace umr
