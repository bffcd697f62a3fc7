#pragma once

// Recall@k evaluation, modality separation and PCA coordinates.

#include <Eigen/Dense>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "umr/checkpoint.hpp"
#include "umr/datagen.hpp"
#include "umr/index.hpp"

namespace umr {

/// Fraction of queries whose gold id is among their first k results. Queries with no
/// result list count as misses.
inline double recall_at_k(const std::map<std::uint32_t, std::vector<std::uint32_t>>& results,
                          const std::map<std::uint32_t, std::uint32_t>& gold, std::size_t k) {
  if (gold.empty()) throw ContractError("recall_at_k: no queries");
  std::size_t hits = 0;
  for (const auto& [qid, g] : gold) {
    const auto it = results.find(qid);
    if (it == results.end()) continue;
    const auto n = std::min(k, it->second.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (it->second[i] == g) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

struct EvalSettings {
  std::vector<PoolScope> scopes{PoolScope::local};
  std::vector<std::uint32_t> ks{5};
  /// Replaces `ks` for the named dataset.
  std::map<std::string, std::uint32_t> k_override;
  /// Extraction depth; the checkpoint's configured k when absent.
  std::optional<std::size_t> depth;
};

struct EvalRow {
  Task task = Task::t2t;
  std::string dataset;
  PoolScope scope = PoolScope::local;
  std::uint32_t k = 5;
  double recall = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string checkpoint;
  std::string config_hash;
  std::uint64_t corpus_seed = 0;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "task,dataset,scope,k,recall,checkpoint,config_hash\n";
    for (const auto& r : rows) {
      os << to_string(r.task) << ',' << r.dataset << ',' << to_string(r.scope) << ',' << r.k << ',' << r.recall << ','
         << checkpoint << ',' << config_hash << '\n';
    }
    return os.str();
  }

  /// Mean recall over the rows matching scope and k.
  double mean_recall(PoolScope scope, std::uint32_t k) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.scope == scope && r.k == k) s += r.recall, ++n;
    if (n == 0) throw LookupError("no report rows for scope " + std::string(to_string(scope)) + ", k=" + std::to_string(k));
    return s / static_cast<double>(n);
  }

  double recall(Task task, PoolScope scope, std::uint32_t k) const {
    for (const auto& r : rows)
      if (r.task == task && r.scope == scope && r.k == k) return r.recall;
    throw LookupError("no report row for " + std::string(to_string(task)));
  }
};

inline void check_compatible(const EncoderConfig& cfg, const CorpusSpec& spec) {
  if (spec.min_vocab_size() > cfg.vocab_size) {
    throw ConfigurationError("corpus needs a vocabulary of " + std::to_string(spec.min_vocab_size()) +
                             " ids but the checkpoint has " + std::to_string(cfg.vocab_size));
  }
  if (spec.max_prompt_len() > cfg.max_seq) {
    throw ConfigurationError("corpus prompts reach " + std::to_string(spec.max_prompt_len()) +
                             " tokens but the checkpoint max_seq is " + std::to_string(cfg.max_seq));
  }
}

/// Test-split evaluation. The index is built once; local scope filters it by dataset.
inline EvalReport evaluate(const Encoder& encoder, const Corpus& corpus, const EvalSettings& settings,
                           std::string checkpoint = {}, std::string config_hash = {}) {
  check_compatible(encoder.config(), corpus.spec);
  const auto depth = settings.depth.value_or(encoder.config().k);
  const auto layout = corpus.spec.layout();
  const auto index = build_index(encoder, corpus.candidates, depth, layout);

  EvalReport report{{}, std::move(checkpoint), std::move(config_hash), corpus.spec.seed};
  for (const auto task : corpus.spec.tasks) {
    const auto tag = dataset_tag(task);
    const auto ks = settings.k_override.count(tag) ? std::vector<std::uint32_t>{settings.k_override.at(tag)} : settings.ks;
    const auto max_k = *std::max_element(ks.begin(), ks.end());
    std::map<std::uint32_t, std::uint32_t> gold;
    std::vector<std::pair<std::uint32_t, std::vector<double>>> queries;
    for (const auto& s : corpus.test) {
      if (s.task != task) continue;
      gold[s.id] = s.gold;
      queries.emplace_back(s.id, embed_query(encoder, s, depth, layout));
    }
    if (gold.empty()) continue;
    for (const auto scope : settings.scopes) {
      std::map<std::uint32_t, std::vector<std::uint32_t>> results;
      const auto filter = scope == PoolScope::local ? std::optional<std::uint8_t>(dataset_code(tag)) : std::nullopt;
      for (const auto& [qid, q] : queries) {
        auto& ids = results[qid];
        for (const auto& h : search_topk(index, q, max_k, filter)) ids.push_back(h.id);
      }
      for (const auto k : ks) report.rows.push_back({task, tag, scope, k, recall_at_k(results, gold, k)});
    }
  }
  return report;
}

inline EvalReport evaluate(const Checkpoint& ck, const Corpus& corpus, const EvalSettings& settings) {
  return evaluate(ck.encoder, corpus, settings, checkpoint_id(ck), fnv1a_hex(ck.metadata));
}

struct Separation {
  double intra = 0.0;
  double inter = 0.0;
  double gap = 0.0;
};

/// Mean pairwise cosine within modality groups vs across groups, self-pairs excluded.
/// Pair sums come from per-group vector sums: sum_{i != j in g} v_i.v_j = |s_g|^2 - sum_i |v_i|^2.
inline Separation modality_separation(const EmbeddingIndex& index) {
  std::map<std::uint8_t, std::vector<double>> sums;
  std::map<std::uint8_t, double> self_dots;
  std::map<std::uint8_t, std::size_t> counts;
  std::vector<double> total(index.dim, 0.0);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const auto m = index.modalities[r];
    auto& s = sums[m];
    s.resize(index.dim, 0.0);
    double sd = 0.0;
    const auto v = index.vector(r);
    for (std::size_t j = 0; j < index.dim; ++j) {
      s[j] += v[j];
      total[j] += v[j];
      sd += static_cast<double>(v[j]) * v[j];
    }
    self_dots[m] += sd;
    ++counts[m];
  }
  if (counts.size() < 2) throw ContractError("modality_separation: needs at least two modalities");
  for (const auto& [m, n] : counts) {
    if (n < 2) throw ContractError("modality_separation: modality " + std::to_string(m) + " has fewer than two vectors");
  }
  const auto sq = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
  };
  double intra_sum = 0.0, group_sq = 0.0, intra_pairs = 0.0, n_sq = 0.0;
  for (const auto& [m, s] : sums) {
    const double n = static_cast<double>(counts[m]);
    const double gs = sq(s);
    intra_sum += gs - self_dots[m];
    group_sq += gs;
    intra_pairs += n * (n - 1.0);
    n_sq += n * n;
  }
  const double n = static_cast<double>(index.size());
  const double inter_sum = sq(total) - group_sq;
  const double inter_pairs = n * n - n_sq;
  Separation out;
  out.intra = intra_sum / intra_pairs;
  out.inter = inter_sum / inter_pairs;
  out.gap = out.intra - out.inter;
  return out;
}

struct PcaPoint {
  std::uint32_t id = 0;
  std::uint8_t modality = 0;
  double x = 0.0, y = 0.0;
};

/// Projection onto the top two principal components. Each axis is signed so that its
/// largest-magnitude loading is positive.
inline std::vector<PcaPoint> pca_2d(const EmbeddingIndex& index) {
  if (index.size() < 2 || index.dim < 2) throw ContractError("pca_2d: needs at least two vectors of width >= 2");
  const auto n = static_cast<Eigen::Index>(index.size()), d = static_cast<Eigen::Index>(index.dim);
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index j = 0; j < d; ++j) x(r, j) = index.vector(static_cast<std::size_t>(r))[static_cast<std::size_t>(j)];
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::MatrixXd axes(d, 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd a = eig.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    a.cwiseAbs().maxCoeff(&arg);
    if (a(arg) < 0) a = -a;
    axes.col(c) = a;
  }
  const Eigen::MatrixXd proj = x * axes;
  std::vector<PcaPoint> out;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = static_cast<std::size_t>(r);
    out.push_back({index.ids[i], index.modalities[i], proj(r, 0), proj(r, 1)});
  }
  return out;
}

inline std::string pca_csv(const std::vector<PcaPoint>& points) {
  std::ostringstream os;
  os.precision(10);
  os << "id,modality,x,y\n";
  for (const auto& p : points)
    os << p.id << ',' << to_string(static_cast<Modality>(p.modality)) << ',' << p.x << ',' << p.y << '\n';
  return os.str();
}

}  // namespace umr
