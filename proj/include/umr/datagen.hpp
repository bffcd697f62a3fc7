#pragma once

// Deterministic synthetic multimodal retrieval corpus.
//
// Every concept owns a sequence of latent attributes. A modality renders the
// attributes into its own vocabulary range:
//   attribute j of concept c : a_j = mix64(c, j) mod text_vocab
//   text token j             : text_begin + a_j
//   image token r            : image_begin + mix64(a_{r mod n_t}, r / n_t, kImageSalt) mod image_vocab
//   image_text               : image rendering ++ text rendering
// Renderings of one concept in different modalities therefore share structure
// that a model can learn, while living in disjoint token ranges. Noise
// replaces each position independently, with probability p, by a uniform
// token of the same range.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umr/config.hpp"
#include "umr/encoder.hpp"
#include "umr/rng.hpp"
#include "umr/vocab.hpp"

namespace umr {

struct CorpusSpec {
  std::uint32_t n_concepts = 2000;
  std::vector<Task> tasks = {Task::t2i, Task::i2t, Task::t2t, Task::i2i, Task::it2i, Task::t2it};
  std::uint32_t text_vocab = 256;
  std::uint32_t image_vocab = 512;
  std::uint32_t text_len = 8;
  std::uint32_t image_len = 16;
  double noise = 0.1;
  std::uint32_t distractors = 2;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;

  static constexpr std::uint32_t kTextBegin = 100;
  static constexpr std::uint32_t kImageBegin = 5000;

  VocabLayout layout() const {
    return {kTextBegin, kTextBegin + text_vocab, kImageBegin, kImageBegin + image_vocab};
  }

  /// Smallest encoder vocabulary covering every id the corpus can emit.
  std::uint32_t min_vocab_size() const { return kImageBegin + image_vocab; }

  /// Longest prompt any task can produce.
  std::uint32_t max_prompt_len() const { return image_len + text_len + static_cast<std::uint32_t>(kPromptOverhead); }

  void validate() const {
    if (tasks.empty()) throw ConfigurationError("corpus spec: empty task set");
    if (n_concepts < 2) throw ConfigurationError("corpus spec: need at least two concepts");
    if (!(noise >= 0.0 && noise < 1.0)) throw ConfigurationError("corpus spec: noise must lie in [0, 1)");
    if (text_vocab == 0 || image_vocab == 0 || text_len == 0 || image_len == 0) {
      throw ConfigurationError("corpus spec: vocab sizes and render lengths must be positive");
    }
    if (kTextBegin + text_vocab > kImageBegin) throw ConfigurationError("corpus spec: text vocab overlaps image range");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigurationError("corpus spec: test_fraction must lie in (0, 1)");
    std::set<Task> seen(tasks.begin(), tasks.end());
    if (seen.size() != tasks.size()) throw ConfigurationError("corpus spec: duplicate task");
  }
};

inline std::string dataset_tag(Task t) { return "synth_" + std::string(to_string(t)); }

inline std::uint8_t dataset_code(const std::string& tag) {
  for (auto t : kTasks)
    if (dataset_tag(t) == tag) return static_cast<std::uint8_t>(t);
  throw LookupError("unknown dataset tag '" + tag + "'");
}

inline std::string dataset_name(std::uint8_t code) {
  if (code >= kTasks.size()) throw LookupError("unknown dataset code " + std::to_string(code));
  return dataset_tag(kTasks[code]);
}

struct Sample {
  std::uint32_t id = 0;
  Task task = Task::t2t;
  std::string dataset;
  Modality modality = Modality::text;
  std::vector<std::uint32_t> tokens;
  std::uint32_t gold = 0;
  std::uint32_t instr = 0;
};

struct Candidate {
  std::uint32_t id = 0;
  std::string dataset;
  Modality modality = Modality::text;
  std::vector<std::uint32_t> tokens;
  std::uint32_t concept_id = 0;
};

struct Corpus {
  CorpusSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> test;
  /// Indexed by candidate id.
  std::vector<Candidate> candidates;

  const Candidate& candidate(std::uint32_t id) const {
    if (id >= candidates.size()) throw LookupError("unknown candidate id " + std::to_string(id));
    return candidates[id];
  }

  std::map<std::uint32_t, std::uint32_t> gold_map() const {
    std::map<std::uint32_t, std::uint32_t> m;
    for (const auto* split : {&train, &test})
      for (const auto& s : *split) m[s.id] = s.gold;
    return m;
  }
};

inline constexpr std::uint64_t kImageSalt = 0x1a6e5a17;

/// Noise-free attribute sequence of a concept.
inline std::vector<std::uint32_t> concept_attributes(std::uint32_t concept_id, const CorpusSpec& spec) {
  std::vector<std::uint32_t> a(spec.text_len);
  for (std::uint32_t j = 0; j < spec.text_len; ++j) a[j] = static_cast<std::uint32_t>(mix64(concept_id, j) % spec.text_vocab);
  return a;
}

inline std::vector<std::uint32_t> render(std::uint32_t concept_id, Modality modality, double noise, Rng& rng,
                                         const CorpusSpec& spec) {
  const auto attrs = concept_attributes(concept_id, spec);
  const auto layout = spec.layout();
  std::vector<std::uint32_t> out;
  auto emit = [&](std::uint32_t base, std::uint32_t begin, std::uint32_t size) {
    const bool resample = noise > 0.0 && rng.uniform() < noise;
    out.push_back(resample ? begin + static_cast<std::uint32_t>(rng.below(size)) : base);
  };
  if (modality == Modality::image || modality == Modality::image_text) {
    for (std::uint32_t r = 0; r < spec.image_len; ++r) {
      const auto a = attrs[r % spec.text_len];
      const auto base = layout.image_begin + static_cast<std::uint32_t>(mix64(a, r / spec.text_len, kImageSalt) % spec.image_vocab);
      emit(base, layout.image_begin, spec.image_vocab);
    }
  }
  if (modality == Modality::text || modality == Modality::image_text) {
    for (std::uint32_t j = 0; j < spec.text_len; ++j) emit(layout.text_begin + attrs[j], layout.text_begin, spec.text_vocab);
  }
  return out;
}

/// Train/test queries for every (task, concept), one positive candidate each, plus
/// `distractors` candidates per (task, concept) drawn from concepts that have no
/// queries (ids n_concepts and up). Test concepts are a seeded random subset.
inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  Rng rng(mix64(spec.seed, 0xc0a9));

  std::vector<std::uint32_t> order(spec.n_concepts);
  for (std::uint32_t c = 0; c < spec.n_concepts; ++c) order[c] = c;
  rng.shuffle(order);
  const auto n_test = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::lround(spec.test_fraction * spec.n_concepts)));
  std::vector<char> is_test(spec.n_concepts, 0);
  for (std::uint32_t i = 0; i < n_test; ++i) is_test[order[i]] = 1;

  std::uint32_t next_query = 0;
  for (const auto task : spec.tasks) {
    const auto tag = dataset_tag(task);
    const auto qm = query_modality(task), cm = candidate_modality(task);
    for (std::uint32_t c = 0; c < spec.n_concepts; ++c) {
      Candidate pos{static_cast<std::uint32_t>(corpus.candidates.size()), tag, cm, render(c, cm, spec.noise, rng, spec), c};
      Sample q{next_query++, task, tag, qm, render(c, qm, spec.noise, rng, spec), pos.id, tok::instruction(task)};
      corpus.candidates.push_back(std::move(pos));
      for (std::uint32_t d = 0; d < spec.distractors; ++d) {
        const auto other = spec.n_concepts + c * spec.distractors + d;
        corpus.candidates.push_back(Candidate{static_cast<std::uint32_t>(corpus.candidates.size()), tag, cm,
                                              render(other, cm, spec.noise, rng, spec), other});
      }
      (is_test[c] ? corpus.test : corpus.train).push_back(std::move(q));
    }
  }
  return corpus;
}

enum class PoolScope : std::uint8_t { local, global };

inline std::string_view to_string(PoolScope s) { return s == PoolScope::local ? "local" : "global"; }

inline PoolScope parse_scope(std::string_view s) {
  if (s == "local") return PoolScope::local;
  if (s == "global") return PoolScope::global;
  throw ConfigurationError("unknown scope '" + std::string(s) + "' (expected local or global)");
}

/// Candidate ids visible to queries of `dataset` under `scope`.
inline std::vector<std::uint32_t> pool(const Corpus& corpus, const std::string& dataset, PoolScope scope) {
  const auto code = dataset_code(dataset);
  bool known = false;
  for (auto t : corpus.spec.tasks) known = known || static_cast<std::uint8_t>(t) == code;
  if (!known) throw LookupError("dataset '" + dataset + "' is not part of this corpus");
  std::vector<std::uint32_t> ids;
  for (const auto& c : corpus.candidates)
    if (scope == PoolScope::global || c.dataset == dataset) ids.push_back(c.id);
  return ids;
}

// ---- persistence ---------------------------------------------------------------

inline std::string spec_to_text(const CorpusSpec& spec) {
  std::ostringstream os;
  os.precision(17);
  os << "n_concepts = " << spec.n_concepts << "\n";
  os << "tasks = ";
  for (std::size_t i = 0; i < spec.tasks.size(); ++i) os << (i ? "," : "") << to_string(spec.tasks[i]);
  os << "\ntext_vocab = " << spec.text_vocab << "\nimage_vocab = " << spec.image_vocab << "\ntext_len = " << spec.text_len
     << "\nimage_len = " << spec.image_len << "\nnoise = " << spec.noise << "\ndistractors = " << spec.distractors
     << "\ntest_fraction = " << spec.test_fraction << "\nseed = " << spec.seed << "\n";
  return os.str();
}

inline std::vector<Task> parse_task_list(const std::string& s) {
  std::vector<Task> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(parse_task(item));
  }
  return out;
}

inline nlohmann::ordered_json to_json(const Sample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["task"] = to_string(s.task);
  j["dataset"] = s.dataset;
  j["modality"] = to_string(s.modality);
  j["tokens"] = s.tokens;
  j["gold"] = s.gold;
  j["instr"] = s.instr;
  return j;
}

inline nlohmann::ordered_json to_json(const Candidate& c) {
  nlohmann::ordered_json j;
  j["id"] = c.id;
  j["dataset"] = c.dataset;
  j["modality"] = to_string(c.modality);
  j["tokens"] = c.tokens;
  j["concept"] = c.concept_id;
  return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.id = j.at("id").get<std::uint32_t>();
  s.task = parse_task(j.at("task").get<std::string>());
  s.dataset = j.at("dataset").get<std::string>();
  s.modality = parse_modality(j.at("modality").get<std::string>());
  s.tokens = j.at("tokens").get<std::vector<std::uint32_t>>();
  s.gold = j.at("gold").get<std::uint32_t>();
  s.instr = j.at("instr").get<std::uint32_t>();
  return s;
}

inline Candidate candidate_from_json(const nlohmann::json& j) {
  Candidate c;
  c.id = j.at("id").get<std::uint32_t>();
  c.dataset = j.at("dataset").get<std::string>();
  c.modality = parse_modality(j.at("modality").get<std::string>());
  c.tokens = j.at("tokens").get<std::vector<std::uint32_t>>();
  c.concept_id = j.at("concept").get<std::uint32_t>();
  return c;
}

template <class T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& items) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& it : items) out << to_json(it).dump() << '\n';
}

template <class T, class F>
std::vector<T> read_jsonl(const std::filesystem::path& path, F&& parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline const char* kQueriesTrainFile = "queries_train.jsonl";
inline const char* kQueriesTestFile = "queries_test.jsonl";
inline const char* kCandidatesFile = "candidates.jsonl";
inline const char* kCorpusSpecFile = "corpus.cfg";


inline CorpusSpec spec_from_key_values(const KeyValues& kv, const std::string& origin) {
  reject_unknown_keys(kv, {"n_concepts", "tasks", "text_vocab", "image_vocab", "text_len", "image_len", "noise",
                           "distractors", "test_fraction", "seed"},
                      origin);
  CorpusSpec spec;
  for (const auto& [k, v] : kv) {
    try {
      if (k == "n_concepts") spec.n_concepts = static_cast<std::uint32_t>(std::stoul(v));
      else if (k == "tasks") spec.tasks = parse_task_list(v);
      else if (k == "text_vocab") spec.text_vocab = static_cast<std::uint32_t>(std::stoul(v));
      else if (k == "image_vocab") spec.image_vocab = static_cast<std::uint32_t>(std::stoul(v));
      else if (k == "text_len") spec.text_len = static_cast<std::uint32_t>(std::stoul(v));
      else if (k == "image_len") spec.image_len = static_cast<std::uint32_t>(std::stoul(v));
      else if (k == "noise") spec.noise = std::stod(v);
      else if (k == "distractors") spec.distractors = static_cast<std::uint32_t>(std::stoul(v));
      else if (k == "test_fraction") spec.test_fraction = std::stod(v);
      else if (k == "seed") spec.seed = std::stoull(v);
    } catch (const std::logic_error&) {
      throw ConfigurationError(origin + ": bad value '" + v + "' for " + k);
    }
  }
  spec.validate();
  return spec;
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / kCorpusSpecFile, std::ios::binary);
    out << spec_to_text(corpus.spec);
  }
  write_jsonl(dir / kQueriesTrainFile, corpus.train);
  write_jsonl(dir / kQueriesTestFile, corpus.test);
  write_jsonl(dir / kCandidatesFile, corpus.candidates);
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  corpus.spec = spec_from_key_values(read_key_values(dir / kCorpusSpecFile), (dir / kCorpusSpecFile).string());
  corpus.train = read_jsonl<Sample>(dir / kQueriesTrainFile, sample_from_json);
  corpus.test = read_jsonl<Sample>(dir / kQueriesTestFile, sample_from_json);
  corpus.candidates = read_jsonl<Candidate>(dir / kCandidatesFile, candidate_from_json);
  for (std::size_t i = 0; i < corpus.candidates.size(); ++i) {
    if (corpus.candidates[i].id != i) throw ConfigurationError("candidates.jsonl: ids must be dense and ordered");
  }
  for (const auto* split : {&corpus.train, &corpus.test})
    for (const auto& s : *split) (void)corpus.candidate(s.gold);
  return corpus;
}

}  // namespace umr
