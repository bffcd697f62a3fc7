// umr: command-line front end for corpus generation, training, indexing and evaluation.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "umr/umr.hpp"

namespace fs = std::filesystem;
using namespace umr;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Extends argv with `--key=value` for every config-file entry whose flag is absent from the command line.
std::vector<std::string> with_config_defaults(CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  CLI::App* sub = nullptr;
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (!sub) {
      for (auto* s : app.get_subcommands({}))
        if (s->get_name() == args[i]) sub = s;
    }
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (!sub || path.empty()) return args;
  const auto kv = read_key_values(path);
  std::set<std::string> allowed;
  for (const auto* opt : sub->get_options()) {
    const auto& names = opt->get_lnames();
    if (!names.empty() && names.front() != "config" && names.front() != "help") allowed.insert(names.front());
  }
  reject_unknown_keys(kv, allowed, path);
  for (const auto& [key, value] : kv) {
    const auto flag = "--" + key;
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
    if (!given) args.push_back(flag + "=" + value);
  }
  return args;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigurationError("cannot write " + path.string());
  out << text;
}

void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty() || out_path == "-") std::cout << text;
  else write_text(out_path, text);
}

std::string num(double x) {
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

// ---- shared option groups -----------------------------------------------------------------

struct ModelOptions {
  std::uint32_t d_model = 32, layers = 8, heads = 2;
  std::uint64_t init_seed = 0;

  void add(CLI::App& app) {
    app.add_option("--d-model", d_model, "hidden width of a freshly initialised encoder");
    app.add_option("--layers", layers, "layer count of a freshly initialised encoder");
    app.add_option("--heads", heads, "attention heads of a freshly initialised encoder");
    app.add_option("--init-seed", init_seed, "seed of a freshly initialised encoder");
  }

  Encoder fresh(const CorpusSpec& spec) const {
    EncoderConfig cfg;
    cfg.vocab_size = spec.min_vocab_size();
    cfg.max_seq = spec.max_prompt_len();
    cfg.d_model = d_model;
    cfg.n_heads = heads;
    cfg.n_layers = layers;
    cfg.k = layers;
    return Encoder::init(cfg, init_seed);
  }
};

struct TrainOptions {
  std::string data, out, init, teacher, curve;
  int stage = 0;
  std::uint32_t k = 3, shards = 1, per_shard_batch = 16, epochs = 5;
  double lambda = 0.2, tau0 = 0.05, lr = 1e-3, distill_tau = 0.05;
  std::string alpha_mode = "fixed", distill_variant = "mse", mac_mode = "mac";
  std::uint64_t seed = 0;
  bool parallel = false, normalize_mse = false;
  ModelOptions model;

  void add(CLI::App& app, bool with_out) {
    app.add_option("--data", data, "corpus directory")->required();
    if (with_out) app.add_option("--out", out, "output checkpoint")->required();
    app.add_option("--init", init, "starting checkpoint (stages 0 and 2); fresh encoder when absent");
    app.add_option("--teacher", teacher, "teacher checkpoint (stage 1)");
    app.add_option("--curve", curve, "loss-curve CSV output");
    app.add_option("--stage", stage, "training stage")->check(CLI::Range(0, 2));
    app.add_option("--k", k, "student depth for stage 1");
    app.add_option("--shards", shards, "simulated data-parallel shards");
    app.add_option("--per-shard-batch", per_shard_batch, "pairs per shard per step");
    app.add_option("--epochs", epochs, "training epochs");
    app.add_option("--lr", lr, "Adam learning rate");
    app.add_option("--lambda", lambda, "hard-temperature decay rate");
    app.add_option("--tau0", tau0, "base temperature");
    app.add_option("--mac-mode", mac_mode, "mac, reverse or off");
    app.add_option("--alpha-mode", alpha_mode, "fixed, dynamic or reverse");
    app.add_option("--distill-variant", distill_variant, "mse, cosine, kl or none");
    app.add_option("--distill-tau", distill_tau, "temperature of the kl variant");
    app.add_flag("--normalize-mse", normalize_mse, "L2-normalise states before the mse variant");
    app.add_option("--seed", seed, "batch-order seed");
    app.add_flag("--parallel", parallel, "run shards on threads");
    model.add(app);
  }

  TrainConfig config() const {
    TrainConfig c;
    c.stage = stage;
    c.k = k;
    c.shards = shards;
    c.per_shard_batch = per_shard_batch;
    c.epochs = epochs;
    c.lr = lr;
    c.seed = seed;
    c.temperature = {tau0, lambda, parse_mac_mode(mac_mode)};
    c.alpha = AlphaSchedule::of(parse_alpha_mode(alpha_mode));
    c.distill = {parse_distill_variant(distill_variant), distill_tau, normalize_mse};
    c.parallel_shards = parallel;
    return c;
  }
};

Checkpoint train_checkpoint(const Corpus& corpus, const TrainOptions& o, const TrainConfig& cfg) {
  std::optional<Checkpoint> teacher;
  std::string origin;
  Encoder init;
  if (cfg.stage == 1) {
    if (o.teacher.empty()) throw UsageError("train --stage 1 requires --teacher");
    teacher = load_checkpoint(o.teacher);
    init = teacher->encoder;
    origin = "teacher = " + checkpoint_id(*teacher) + "\n";
  } else if (!o.init.empty()) {
    const auto ck = load_checkpoint(o.init);
    init = ck.encoder;
    origin = "init = " + checkpoint_id(ck) + "\n";
  } else {
    init = o.model.fresh(corpus.spec);
    origin = "init = fresh:" + std::to_string(o.model.init_seed) + "\n";
  }
  check_compatible(init.config(), corpus.spec);
  const auto res = run_stage(corpus, cfg, init, teacher ? &teacher->encoder : nullptr);
  if (!o.curve.empty()) write_text(o.curve, loss_curve_csv(res.curve));
  for (const auto& r : res.curve) {
    std::cerr << "stage " << r.stage << " epoch " << r.epoch << " loss " << num(r.loss.total) << " tau_hard "
              << r.tau_hard << "\n";
  }
  return Checkpoint{res.encoder, res.optimizer, cfg.to_text() + origin + "[corpus]\n" + spec_to_text(corpus.spec)};
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(trim(item)));
    } catch (const std::logic_error&) {
      throw UsageError("bad number '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("empty value list");
  return out;
}

EvalSettings eval_settings(const std::vector<std::string>& scopes, const std::vector<std::uint32_t>& ks,
                           const std::vector<std::string>& overrides, int depth) {
  EvalSettings s;
  if (!scopes.empty()) {
    s.scopes.clear();
    for (const auto& sc : scopes) s.scopes.push_back(parse_scope(sc));
  }
  if (!ks.empty()) s.ks = ks;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw UsageError("--k-override expects dataset=k, got '" + o + "'");
    s.k_override[o.substr(0, eq)] = static_cast<std::uint32_t>(std::stoul(o.substr(eq + 1)));
  }
  if (depth > 0) s.depth = static_cast<std::size_t>(depth);
  return s;
}

const Sample& find_query(const Corpus& corpus, std::uint32_t id) {
  for (const auto* split : {&corpus.test, &corpus.train})
    for (const auto& s : *split)
      if (s.id == id) return s;
  throw LookupError("unknown query id " + std::to_string(id));
}

std::string vector_line(std::span<const double> v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  os << "\n";
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Progressive multimodal retrieval toolkit"};
  app.require_subcommand(1, 1);
  std::string config_path;
  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config_path, "key = value defaults file"); };

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  std::string gen_out;
  CorpusSpec gen_spec;
  std::string gen_tasks;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_spec.seed, "corpus seed");
  gen->add_option("--concepts", gen_spec.n_concepts, "number of concepts");
  gen->add_option("--tasks", gen_tasks, "comma-separated task list");
  gen->add_option("--text-vocab", gen_spec.text_vocab);
  gen->add_option("--image-vocab", gen_spec.image_vocab);
  gen->add_option("--text-len", gen_spec.text_len);
  gen->add_option("--image-len", gen_spec.image_len);
  gen->add_option("--noise", gen_spec.noise);
  gen->add_option("--distractors", gen_spec.distractors);
  gen->add_option("--test-fraction", gen_spec.test_fraction);
  add_config(gen);

  // train
  auto* train = app.add_subcommand("train", "run one training stage");
  TrainOptions topt;
  topt.add(*train, true);
  add_config(train);

  // prune
  auto* prn = app.add_subcommand("prune", "keep the first k layers of a checkpoint");
  std::string prune_in, prune_out;
  std::uint32_t prune_k = 0;
  prn->add_option("--in", prune_in)->required();
  prn->add_option("--out", prune_out)->required();
  prn->add_option("--k", prune_k)->required();
  add_config(prn);

  // embed
  auto* emb = app.add_subcommand("embed", "print the normalised embedding of a query or candidate");
  std::string emb_ckpt, emb_data;
  std::int64_t emb_query = -1, emb_cand = -1;
  int emb_depth = 0;
  emb->add_option("--ckpt", emb_ckpt)->required();
  emb->add_option("--data", emb_data)->required();
  emb->add_option("--query", emb_query, "query id");
  emb->add_option("--candidate", emb_cand, "candidate id");
  emb->add_option("--depth", emb_depth, "extraction depth (checkpoint k when 0)");
  add_config(emb);

  // index
  auto* idx = app.add_subcommand("index", "embed every candidate into an index file");
  std::string idx_ckpt, idx_data, idx_out;
  int idx_depth = 0;
  idx->add_option("--ckpt", idx_ckpt)->required();
  idx->add_option("--data", idx_data)->required();
  idx->add_option("--out", idx_out)->required();
  idx->add_option("--depth", idx_depth);
  add_config(idx);

  // search
  auto* srch = app.add_subcommand("search", "top-k candidates for one query");
  std::string s_ckpt, s_data, s_index, s_scope = "local";
  std::uint32_t s_query = 0, s_k = 5;
  int s_depth = 0;
  srch->add_option("--ckpt", s_ckpt)->required();
  srch->add_option("--data", s_data)->required();
  srch->add_option("--index", s_index, "index file (built in memory when absent)");
  srch->add_option("--query", s_query)->required();
  srch->add_option("--k", s_k);
  srch->add_option("--scope", s_scope)->check(CLI::IsMember({"local", "global"}));
  srch->add_option("--depth", s_depth);
  add_config(srch);

  // eval
  auto* ev = app.add_subcommand("eval", "Recall@k report over the test split");
  std::string ev_ckpt, ev_data, ev_out, ev_pca;
  std::vector<std::string> ev_scopes, ev_overrides;
  std::vector<std::uint32_t> ev_ks;
  int ev_depth = 0;
  bool ev_sep = false;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--scope", ev_scopes, "local and/or global (repeatable)")
      ->check(CLI::IsMember({"local", "global"}))
      ->delimiter(',');
  ev->add_option("--k", ev_ks, "recall cutoffs (repeatable)")->delimiter(',');
  ev->add_option("--k-override", ev_overrides, "dataset=k (repeatable)")->delimiter(',');
  ev->add_option("--depth", ev_depth);
  ev->add_option("--out", ev_out, "CSV output (stdout when absent)");
  ev->add_flag("--separation", ev_sep, "print the modality separation statistic");
  ev->add_option("--pca", ev_pca, "write 2-component PCA coordinates of the index");
  add_config(ev);

  // flops
  auto* fl = app.add_subcommand("flops", "analytic forward FLOPs at depth k");
  std::uint32_t f_layers = 28, f_k = 12, f_seq = 256, f_d = 32;
  fl->add_option("--layers", f_layers);
  fl->add_option("--k", f_k);
  fl->add_option("--seq", f_seq);
  fl->add_option("--d-model", f_d);
  add_config(fl);

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every differentiable path");
  std::uint64_t gc_seeds = 5;
  double gc_tol = 1e-4;
  gc->add_option("--seeds", gc_seeds);
  gc->add_option("--tolerance", gc_tol);
  add_config(gc);

  // sweep
  auto* sw = app.add_subcommand("sweep", "train and evaluate once per lambda value");
  TrainOptions sopt;
  sopt.stage = 2;
  std::string sw_lambdas = "0.2,0.5,0.7", sw_dir;
  sopt.add(*sw, false);
  sw->add_option("--lambdas", sw_lambdas, "comma-separated lambda values");
  sw->add_option("--out-dir", sw_dir)->required();
  add_config(sw);

  try {
    auto args = with_config_defaults(app, argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << " (see --help)\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen) {
      if (!gen_tasks.empty()) gen_spec.tasks = parse_task_list(gen_tasks);
      gen_spec.validate();
      const auto corpus = generate_corpus(gen_spec);
      save_corpus(corpus, gen_out);
      std::cout << "wrote " << corpus.train.size() << " train queries, " << corpus.test.size() << " test queries, "
                << corpus.candidates.size() << " candidates to " << gen_out << "\n";
    } else if (*train) {
      const auto corpus = load_corpus(topt.data);
      const auto ck = train_checkpoint(corpus, topt, topt.config());
      save_checkpoint(ck, topt.out);
      std::cout << "checkpoint " << checkpoint_id(ck) << " config " << fnv1a_hex(ck.metadata) << " -> " << topt.out
                << "\n";
    } else if (*prn) {
      const auto ck = load_checkpoint(prune_in);
      Checkpoint out{prune(ck.encoder, prune_k), std::nullopt,
                     ck.metadata + "pruned_from = " + checkpoint_id(ck) + "\npruned_k = " + std::to_string(prune_k) + "\n"};
      save_checkpoint(out, prune_out);
      std::cout << "checkpoint " << checkpoint_id(out) << " -> " << prune_out << "\n";
    } else if (*emb) {
      if ((emb_query < 0) == (emb_cand < 0)) throw UsageError("embed needs exactly one of --query or --candidate");
      const auto ck = load_checkpoint(emb_ckpt);
      const auto corpus = load_corpus(emb_data);
      check_compatible(ck.encoder.config(), corpus.spec);
      const std::size_t depth = emb_depth > 0 ? static_cast<std::size_t>(emb_depth) : ck.encoder.config().k;
      const auto layout = corpus.spec.layout();
      std::vector<double> v;
      if (emb_query >= 0) {
        v = embed_query(ck.encoder, find_query(corpus, static_cast<std::uint32_t>(emb_query)), depth, layout);
      } else {
        const auto& c = corpus.candidate(static_cast<std::uint32_t>(emb_cand));
        v = l2_normalized(embed(ck.encoder, candidate_prompt(c, ck.encoder.config(), layout), depth).vector);
      }
      std::cout << vector_line(v);
    } else if (*idx) {
      const auto ck = load_checkpoint(idx_ckpt);
      const auto corpus = load_corpus(idx_data);
      check_compatible(ck.encoder.config(), corpus.spec);
      const std::size_t depth = idx_depth > 0 ? static_cast<std::size_t>(idx_depth) : ck.encoder.config().k;
      const auto index = build_index(ck.encoder, corpus.candidates, depth, corpus.spec.layout());
      save_index(index, idx_out);
      std::cout << "indexed " << index.size() << " candidates (dim " << index.dim << ") -> " << idx_out << "\n";
    } else if (*srch) {
      const auto ck = load_checkpoint(s_ckpt);
      const auto corpus = load_corpus(s_data);
      check_compatible(ck.encoder.config(), corpus.spec);
      const std::size_t depth = s_depth > 0 ? static_cast<std::size_t>(s_depth) : ck.encoder.config().k;
      const auto index = s_index.empty() ? build_index(ck.encoder, corpus.candidates, depth, corpus.spec.layout())
                                         : load_index(s_index);
      const auto& q = find_query(corpus, s_query);
      const auto filter =
          parse_scope(s_scope) == PoolScope::local ? std::optional<std::uint8_t>(dataset_code(q.dataset)) : std::nullopt;
      std::cout << "rank,id,score,gold\n" << std::setprecision(10);
      const auto hits = search_topk(index, embed_query(ck.encoder, q, depth, corpus.spec.layout()), s_k, filter);
      for (std::size_t r = 0; r < hits.size(); ++r) {
        std::cout << r + 1 << ',' << hits[r].id << ',' << hits[r].score << ',' << (hits[r].id == q.gold) << '\n';
      }
    } else if (*ev) {
      const auto ck = load_checkpoint(ev_ckpt);
      const auto corpus = load_corpus(ev_data);
      const auto settings = eval_settings(ev_scopes, ev_ks, ev_overrides, ev_depth);
      const auto report = evaluate(ck, corpus, settings);
      emit(ev_out, report.to_csv());
      if (ev_sep || !ev_pca.empty()) {
        const auto depth = settings.depth.value_or(ck.encoder.config().k);
        const auto index = build_index(ck.encoder, corpus.candidates, depth, corpus.spec.layout());
        if (ev_sep) {
          const auto s = modality_separation(index);
          std::cerr << "separation intra " << num(s.intra) << " inter " << num(s.inter) << " gap " << num(s.gap) << "\n";
        }
        if (!ev_pca.empty()) write_text(ev_pca, pca_csv(pca_2d(index)));
      }
    } else if (*fl) {
      if (f_k > f_layers) throw UsageError("--k must not exceed --layers");
      EncoderConfig cfg;
      cfg.d_model = f_d;
      cfg.n_layers = f_layers;
      cfg.k = f_k;
      cfg.max_seq = f_seq;
      const auto part = estimate_flops(cfg, f_k, f_seq), full = estimate_flops(cfg, f_layers, f_seq);
      std::cout << std::setprecision(12) << "flops_total " << part.total << "\nflops_layer_stack " << part.layer_stack
                << "\nflops_full_total " << full.total << "\n"
                << std::fixed << std::setprecision(4) << "layer_ratio " << part.layer_stack / full.layer_stack
                << "\nend_to_end_ratio " << part.total / full.total << "\nreference_end_to_end_ratio 0.473\n";
    } else if (*gc) {
      bool ok = true;
      for (const auto& e : run_gradient_suite(gc_seeds)) {
        const bool pass = e.max_rel_error < gc_tol;
        ok = ok && pass;
        std::cout << (pass ? "ok   " : "FAIL ") << e.name << " seed " << e.seed << " max_rel_error "
                  << std::setprecision(3) << e.max_rel_error << "\n";
      }
      return ok ? 0 : 1;
    } else if (*sw) {
      const auto corpus = load_corpus(sopt.data);
      std::cout << "lambda,config_hash,checkpoint,mean_recall\n";
      for (const double lambda : parse_double_list(sw_lambdas)) {
        auto opts = sopt;
        opts.lambda = lambda;
        const auto cfg = opts.config();
        const auto ck = train_checkpoint(corpus, opts, cfg);
        const auto report = evaluate(ck, corpus, EvalSettings{});
        std::ostringstream name;
        name << "lambda_" << lambda;
        save_checkpoint(ck, fs::path(sw_dir) / (name.str() + ".ckpt"));
        write_text(fs::path(sw_dir) / (name.str() + ".csv"), report.to_csv());
        std::cout << lambda << ',' << report.config_hash << ',' << report.checkpoint << ','
                  << num(report.mean_recall(PoolScope::local, 5)) << "\n";
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
