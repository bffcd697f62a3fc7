#pragma once

// Training pipeline with simulated data-parallel shards.
//
// One global batch of G = W * N query/candidate pairs is split into W
// contiguous shard slices. Each shard embeds its slice on its own graph, the
// embeddings are gathered in shard-id order so that every shard sees the full
// set of in-batch negatives, and each shard evaluates the global loss with
// only its own slice tracked. Summing the shard gradients in shard-id order
// gives the gradient of the global loss. Shards may run on threads; the two
// barriers (gather, all-reduce) make the result independent of scheduling.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "umr/autograd.hpp"
#include "umr/binio.hpp"
#include "umr/datagen.hpp"
#include "umr/encoder.hpp"
#include "umr/losses.hpp"
#include "umr/schedules.hpp"

namespace umr {

// ---- optimizer ----------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState for_params(const std::vector<Tensor>& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                              double eps = 1e-8) {
    AdamState s{lr, beta1, beta2, eps, 0, {}, {}};
    for (const auto& p : params) {
      s.m.push_back(Tensor::zeros(p.shape()));
      s.v.push_back(Tensor::zeros(p.shape()));
    }
    return s;
  }

  bool identical(const AdamState& o) const {
    if (lr != o.lr || beta1 != o.beta1 || beta2 != o.beta2 || eps != o.eps || step != o.step) return false;
    if (m.size() != o.m.size() || v.size() != o.v.size()) return false;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (!m[i].identical(o.m[i]) || !v[i].identical(o.v[i])) return false;
    return true;
  }
};

/// Bias-corrected Adam. Returns the new parameters; `state` advances by one step.
inline std::vector<Tensor> adam_update(const std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                                       AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    throw DimensionError("adam_update: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                         " grads, " + std::to_string(state.m.size()) + " moments");
  }
  const auto t = state.step + 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const auto& g = grads[i];
    if (p.shape() != g.shape() || p.shape() != state.m[i].shape()) {
      throw DimensionError("adam_update: parameter " + std::to_string(i) + " has shape " + shape_str(p.shape()) +
                           " but gradient " + shape_str(g.shape()));
    }
    std::vector<double> np(p.size()), nm(p.size()), nv(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) {
      nm[j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g[j];
      nv[j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = nm[j] / bc1;
      const double vhat = nv[j] / bc2;
      np[j] = p[j] - state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    out.emplace_back(p.shape(), std::move(np));
    state.m[i] = Tensor(p.shape(), std::move(nm));
    state.v[i] = Tensor(p.shape(), std::move(nv));
  }
  state.step = t;
  return out;
}

// ---- shard collectives -------------------------------------------------------

/// Concatenates per-shard row blocks in ascending shard id.
inline Tensor gather_shards(const std::vector<std::optional<Tensor>>& locals) {
  if (locals.empty()) throw AggregationError("gather_shards: no shards");
  std::vector<double> out;
  std::size_t rows = 0, width = 0;
  for (std::size_t r = 0; r < locals.size(); ++r) {
    if (!locals[r]) throw AggregationError("gather_shards: shard " + std::to_string(r) + " did not report");
    const auto& t = *locals[r];
    if (t.rank() != 2) throw AggregationError("gather_shards: shard " + std::to_string(r) + " sent a non-matrix");
    if (r == 0) width = t.cols();
    if (t.cols() != width) {
      throw AggregationError("gather_shards: shard " + std::to_string(r) + " has width " + std::to_string(t.cols()) +
                             ", expected " + std::to_string(width));
    }
    out.insert(out.end(), t.data().begin(), t.data().end());
    rows += t.rows();
  }
  return Tensor(Shape{rows, width}, std::move(out));
}

/// Contiguous row blocks of equal size; inverse of gather_shards.
inline std::vector<Tensor> split_shards(const Tensor& global, std::size_t shards) {
  if (shards == 0 || global.rows() % shards != 0) {
    throw AggregationError("split_shards: " + std::to_string(global.rows()) + " rows do not divide into " +
                           std::to_string(shards) + " shards");
  }
  const auto per = global.rows() / shards, w = global.cols();
  std::vector<Tensor> out;
  for (std::size_t r = 0; r < shards; ++r) {
    out.emplace_back(Shape{per, w}, std::vector<double>(global.data().begin() + static_cast<std::ptrdiff_t>(r * per * w),
                                                         global.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * per * w)));
  }
  return out;
}

using GradientMap = std::map<std::string, Tensor>;

/// Elementwise sum over shards in ascending shard id.
inline GradientMap all_reduce_grads(const std::vector<GradientMap>& shard_grads) {
  if (shard_grads.empty()) throw AggregationError("all_reduce_grads: no shards");
  const auto& first = shard_grads.front();
  std::map<std::string, std::vector<double>> acc;
  for (const auto& [k, t] : first) acc[k] = t.values();
  for (std::size_t r = 1; r < shard_grads.size(); ++r) {
    const auto& gm = shard_grads[r];
    if (gm.size() != first.size()) throw AggregationError("all_reduce_grads: shard " + std::to_string(r) + " key set differs");
    for (const auto& [k, t] : gm) {
      auto it = first.find(k);
      if (it == first.end()) {
        throw AggregationError("all_reduce_grads: shard " + std::to_string(r) + " has unexpected key '" + k + "'");
      }
      if (it->second.shape() != t.shape()) {
        throw AggregationError("all_reduce_grads: shard " + std::to_string(r) + " key '" + k + "' has shape " +
                               shape_str(t.shape()) + ", expected " + shape_str(it->second.shape()));
      }
      auto& a = acc[k];
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += t[i];
    }
  }
  GradientMap out;
  for (auto& [k, v] : acc) out.emplace(k, Tensor(first.at(k).shape(), std::move(v)));
  return out;
}

// ---- configuration -----------------------------------------------------------

struct TrainConfig {
  int stage = 1;
  std::uint32_t shards = 1;
  std::uint32_t per_shard_batch = 16;
  std::uint32_t epochs = 5;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  TemperatureSchedule temperature;
  AlphaSchedule alpha = AlphaSchedule::fixed();
  DistillOptions distill;
  /// Student depth for stage 1 (prune depth); ignored by other stages.
  std::uint32_t k = 3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  /// Run shard work on threads. Results are identical either way.
  bool parallel_shards = false;

  std::uint32_t global_batch() const { return shards * per_shard_batch; }

  void validate() const {
    if (stage < 0 || stage > 2) throw ConfigurationError("stage must be 0, 1 or 2");
    if (shards == 0 || per_shard_batch == 0) throw ConfigurationError("shards and per_shard_batch must be positive");
    if (!(lr > 0.0)) throw ConfigurationError("learning rate must be positive");
    temperature.validate();
  }

  /// Canonical key = value text; two configs train identically iff their texts match.
  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "stage = " << stage << "\nshards = " << shards << "\nper_shard_batch = " << per_shard_batch
       << "\nepochs = " << epochs << "\nlr = " << lr << "\nseed = " << seed << "\ntau0 = " << temperature.tau0
       << "\nlambda = " << temperature.lambda << "\nmac_mode = " << to_string(temperature.mode)
       << "\nalpha_mode = " << to_string(alpha.mode) << "\ndistill_variant = " << to_string(distill.variant)
       << "\ndistill_tau = " << distill.tau << "\nnormalize_mse = " << distill.normalize_mse << "\nk = " << k
       << "\nbeta1 = " << beta1 << "\nbeta2 = " << beta2 << "\nadam_eps = " << adam_eps << "\n";
    return os.str();
  }
};

// ---- batches -----------------------------------------------------------------

/// One query/candidate pair, already prompted.
struct TrainPair {
  std::uint32_t sample_id = 0;
  TokenSequence query;
  TokenSequence candidate;
  /// Modality of the target candidate (the MAC partition key).
  Modality target = Modality::text;
};

inline TrainPair make_pair(const Sample& s, const Corpus& corpus, std::size_t max_seq) {
  const auto& c = corpus.candidate(s.gold);
  const auto layout = corpus.spec.layout();
  return TrainPair{s.id, assemble_prompt(s.task, s.modality, s.tokens, Side::query, max_seq, layout),
                   assemble_prompt(s.task, c.modality, c.tokens, Side::candidate, max_seq, layout), c.modality};
}

/// Training pairs a stage consumes: text->text for stages 0 and 1, everything for stage 2.
inline std::vector<TrainPair> stage_pairs(int stage, const Corpus& corpus, std::size_t max_seq) {
  std::vector<TrainPair> out;
  for (const auto& s : corpus.train) {
    if (stage < 2 && s.task != Task::t2t) continue;
    out.push_back(make_pair(s, corpus, max_seq));
  }
  if (out.empty()) {
    throw ConfigurationError(stage < 2 ? "stage " + std::to_string(stage) + " needs text->text training pairs"
                                       : std::string("stage 2 needs training pairs"));
  }
  return out;
}

/// Frozen teacher [RET] states per training pair (query and candidate rows).
struct TeacherTargets {
  std::map<std::uint32_t, std::pair<std::vector<double>, std::vector<double>>> by_sample;

  static TeacherTargets compute(const Encoder& teacher, const std::vector<TrainPair>& pairs) {
    TeacherTargets t;
    const auto depth = teacher.config().n_layers;
    for (const auto& p : pairs) {
      t.by_sample[p.sample_id] = {embed(teacher, p.query, depth).vector, embed(teacher, p.candidate, depth).vector};
    }
    return t;
  }
};

struct LossBreakdown {
  double contrastive = 0.0;
  double distill = 0.0;
  double total = 0.0;
};

struct StepResult {
  std::vector<Tensor> params;
  GradientMap grads;
  LossBreakdown loss;
};

/// Number of self-distillation evaluations performed by train_step (instrumentation).
inline std::atomic<std::uint64_t>& distill_evaluations() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

namespace detail {

template <class F>
void for_each_shard(std::size_t shards, bool parallel, F&& f) {
  if (!parallel || shards == 1) {
    for (std::size_t r = 0; r < shards; ++r) f(r);
    return;
  }
  std::vector<std::exception_ptr> errors(shards);
  std::vector<std::thread> threads;
  for (std::size_t r = 0; r < shards; ++r) {
    threads.emplace_back([&, r] {
      try {
        f(r);
      } catch (...) {
        errors[r] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline Tensor rows_to_tensor(const std::vector<const std::vector<double>*>& rows) {
  const auto w = rows.front()->size();
  std::vector<double> data;
  data.reserve(rows.size() * w);
  for (const auto* r : rows) data.insert(data.end(), r->begin(), r->end());
  return Tensor(Shape{rows.size(), w}, std::move(data));
}

}  // namespace detail

/// One optimisation step over a global batch. `depth` is the extraction layer of the student.
inline StepResult compute_step(const Encoder& student, const TeacherTargets* teacher, const std::vector<TrainPair>& batch,
                               const TrainConfig& config, double progress, std::size_t depth) {
  config.validate();
  const std::size_t W = config.shards;
  if (batch.empty() || batch.size() % W != 0) {
    throw ConfigurationError("global batch of " + std::to_string(batch.size()) + " does not split into " +
                             std::to_string(W) + " shards");
  }
  const bool distilling = config.stage == 1 && config.distill.variant != DistillVariant::none;
  if (distilling && teacher == nullptr) throw ConfigurationError("stage 1 distillation requires teacher targets");
  const std::size_t N = batch.size() / W;

  struct Shard {
    std::unique_ptr<Graph> graph;
    BoundEncoder enc;
    Var q, c;
    GradientMap grads;
    LossBreakdown loss;
  };
  std::vector<Shard> shards(W);

  // Per-shard forward of the local slice.
  detail::for_each_shard(W, config.parallel_shards, [&](std::size_t r) {
    auto& s = shards[r];
    s.graph = std::make_unique<Graph>();
    s.enc = bind(*s.graph, student, true);
    std::vector<Var> qs, cs;
    for (std::size_t i = r * N; i < (r + 1) * N; ++i) {
      qs.push_back(extract_ret(forward(s.enc, batch[i].query, depth), batch[i].query));
      cs.push_back(extract_ret(forward(s.enc, batch[i].candidate, depth), batch[i].candidate));
    }
    s.q = concat_rows(qs);
    s.c = concat_rows(cs);
  });

  // Gather barrier.
  std::vector<std::optional<Tensor>> q_locals(W), c_locals(W);
  for (std::size_t r = 0; r < W; ++r) {
    q_locals[r] = shards[r].q.value();
    c_locals[r] = shards[r].c.value();
  }
  const Tensor q_global = gather_shards(q_locals);
  const Tensor c_global = gather_shards(c_locals);
  const auto q_split = split_shards(q_global, W);
  const auto c_split = split_shards(c_global, W);

  std::optional<Tensor> tq, tc;
  if (distilling) {
    std::vector<const std::vector<double>*> qrows, crows;
    for (const auto& p : batch) {
      const auto it = teacher->by_sample.find(p.sample_id);
      if (it == teacher->by_sample.end()) throw LookupError("no teacher target for sample " + std::to_string(p.sample_id));
      qrows.push_back(&it->second.first);
      crows.push_back(&it->second.second);
    }
    tq = detail::rows_to_tensor(qrows);
    tc = detail::rows_to_tensor(crows);
  }
  std::vector<Modality> tags;
  for (const auto& p : batch) tags.push_back(p.target);
  const double tau_norm = config.temperature.tau_norm();
  const double tau_hard = config.stage == 2 ? tau_hard_at(config.temperature, progress) : tau_norm;
  const auto alphas = alpha_at(config.alpha, progress);

  // Global loss on every shard with only the local slice tracked.
  detail::for_each_shard(W, config.parallel_shards, [&](std::size_t r) {
    auto& s = shards[r];
    Graph& g = *s.graph;
    std::vector<Var> qparts, cparts;
    for (std::size_t o = 0; o < W; ++o) {
      qparts.push_back(o == r ? s.q : g.constant(q_split[o]));
      cparts.push_back(o == r ? s.c : g.constant(c_split[o]));
    }
    const Var q = W == 1 ? s.q : concat_rows(qparts);
    const Var c = W == 1 ? s.c : concat_rows(cparts);
    const Var sim = cosine_similarity_matrix(q, c);
    Var total;
    if (config.stage == 2) {
      total = mac_loss(sim, tags, tau_hard, tau_norm, config.temperature.mode);
      s.loss.contrastive = total.value().item();
    } else {
      const Var contrastive = infonce(sim, tau_norm);
      s.loss.contrastive = contrastive.value().item();
      if (distilling) {
        const Var distill = self_distill(g.constant(*tq), q, g.constant(*tc), c, config.distill);
        s.loss.distill = distill.value().item();
        total = pretraining_loss(contrastive, distill, alphas.contrastive, alphas.distill);
      } else {
        total = contrastive;
      }
    }
    s.loss.total = total.value().item();
    g.backward(total);
    const auto names = student.parameter_names();
    for (std::size_t i = 0; i < names.size(); ++i) s.grads.emplace(names[i], g.grad(s.enc.params[i]));
    s.graph.reset();
  });
  if (distilling) distill_evaluations() += W;

  std::vector<GradientMap> shard_grads;
  for (auto& s : shards) shard_grads.push_back(std::move(s.grads));
  StepResult out;
  out.grads = all_reduce_grads(shard_grads);
  out.loss = shards.front().loss;
  return out;
}

/// compute_step followed by an Adam update of the student.
inline StepResult train_step(const Encoder& student, const TeacherTargets* teacher, const std::vector<TrainPair>& batch,
                             const TrainConfig& config, double progress, std::size_t depth, AdamState& optimizer) {
  auto res = compute_step(student, teacher, batch, config, progress, depth);
  const auto names = student.parameter_names();
  std::vector<Tensor> grads;
  grads.reserve(names.size());
  for (const auto& n : names) grads.push_back(res.grads.at(n));
  res.params = adam_update(student.parameters(), grads, optimizer);
  return res;
}

// ---- stages ------------------------------------------------------------------

struct EpochRecord {
  int stage = 0;
  std::uint32_t epoch = 0;
  LossBreakdown loss;
  double tau_hard = 0.0;
  AlphaPair alpha{1.0, 0.0};
};

struct StageResult {
  Encoder encoder;
  AdamState optimizer;
  std::vector<EpochRecord> curve;
};

inline std::string loss_curve_csv(const std::vector<EpochRecord>& curve) {
  std::ostringstream os;
  os.precision(10);
  os << "stage,epoch,contrastive,distill,total,tau_hard,alpha1,alpha2\n";
  for (const auto& r : curve) {
    os << r.stage << ',' << r.epoch << ',' << r.loss.contrastive << ',' << r.loss.distill << ',' << r.loss.total << ','
       << r.tau_hard << ',' << r.alpha.contrastive << ',' << r.alpha.distill << '\n';
  }
  return os.str();
}

/// Runs one training stage.
///   stage 0: `init` is trained at full depth with InfoNCE on text->text pairs.
///   stage 1: the student starts as prune(teacher, config.k) and is trained with
///            contrastive + distillation toward the frozen teacher's last layer.
///   stage 2: `init` is trained on all tasks with the MAC loss.
/// Batch order is a seeded shuffle per epoch; a trailing partial batch is dropped.
inline StageResult run_stage(const Corpus& corpus, const TrainConfig& config, const Encoder& init,
                             const Encoder* teacher = nullptr) {
  config.validate();
  Encoder student = init;
  std::optional<TeacherTargets> targets;
  if (config.stage == 1) {
    if (teacher == nullptr) throw ConfigurationError("stage 1 requires a teacher checkpoint");
    student = prune(*teacher, config.k);
  }
  const auto max_seq = student.config().max_seq;
  const auto pairs = stage_pairs(config.stage, corpus, max_seq);
  if (config.stage == 1 && config.distill.variant != DistillVariant::none) targets = TeacherTargets::compute(*teacher, pairs);
  const std::size_t depth = student.config().n_layers;

  StageResult result{student, AdamState::for_params(student.parameters(), config.lr, config.beta1, config.beta2,
                                                     config.adam_eps),
                     {}};
  const std::size_t G = config.global_batch();
  const std::size_t steps = pairs.size() / G;
  if (config.epochs > 0 && steps == 0) {
    throw ConfigurationError("global batch " + std::to_string(G) + " exceeds the " + std::to_string(pairs.size()) +
                             " available training pairs");
  }
  for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double progress = static_cast<double>(epoch) / static_cast<double>(config.epochs);
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix64(config.seed, static_cast<std::uint64_t>(config.stage), epoch));
    rng.shuffle(order);

    EpochRecord rec;
    rec.stage = config.stage;
    rec.epoch = epoch;
    rec.tau_hard = config.stage == 2 ? tau_hard_at(config.temperature, progress) : config.temperature.tau_norm();
    rec.alpha = config.stage == 1 && targets ? alpha_at(config.alpha, progress) : AlphaPair{1.0, 0.0};
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<TrainPair> batch;
      batch.reserve(G);
      for (std::size_t i = s * G; i < (s + 1) * G; ++i) batch.push_back(pairs[order[i]]);
      const auto step = train_step(result.encoder, targets ? &*targets : nullptr, batch, config, progress, depth,
                                   result.optimizer);
      result.encoder = result.encoder.with_parameters(step.params);
      rec.loss.contrastive += step.loss.contrastive / static_cast<double>(steps);
      rec.loss.distill += step.loss.distill / static_cast<double>(steps);
      rec.loss.total += step.loss.total / static_cast<double>(steps);
    }
    result.curve.push_back(rec);
  }
  return result;
}

}  // namespace umr
