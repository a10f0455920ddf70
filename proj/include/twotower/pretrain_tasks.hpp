#pragma once

// Positive (query, document) pair generation from the corpus: Inverse Cloze
// Task, Body First Selection, Wiki Link Prediction, plus masked-LM examples
// and the weighted task mixture.

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "twotower/common.hpp"
#include "twotower/corpus.hpp"
#include "twotower/vocab.hpp"

namespace twotower {

enum class Task { ICT, BFS, WLP, Finetune };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::ICT: return "ICT";
    case Task::BFS: return "BFS";
    case Task::WLP: return "WLP";
    case Task::Finetune: return "Finetune";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  const auto l = detail::ascii_lower(s);
  if (l == "ict") return Task::ICT;
  if (l == "bfs") return Task::BFS;
  if (l == "wlp") return Task::WLP;
  if (l == "finetune") return Task::Finetune;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

struct PairSource {
  ArticleId query_article = -1;
  PassageId query_passage = -1;
  std::int64_t query_sentence = -1;
  ArticleId doc_article = -1;
  PassageId doc_passage = -1;

  bool operator==(const PairSource&) const = default;
};

struct PretrainPair {
  TokenSeq query;  // [CLS] sentence
  TokenSeq doc;    // [CLS] title [SEP] body
  Task task = Task::ICT;
  PairSource source;

  bool operator==(const PretrainPair&) const = default;
};

/// Encoder input lengths for the two towers.
struct PairShape {
  std::size_t query_max_len = 16;
  std::size_t doc_max_len = 48;
};

class GenerationError : public Error {
 public:
  enum class Kind { NotEnoughSentences, NotEnoughPassages, NoInboundLink, EmptyLead };
  GenerationError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Title token ids for every article, indexed like CorpusStore::articles().
inline std::vector<std::vector<TokenId>> tokenize_titles(const CorpusStore& corpus,
                                                         const Vocabulary& vocab) {
  std::vector<std::vector<TokenId>> titles;
  titles.reserve(corpus.size());
  for (const auto& a : corpus.articles()) titles.push_back(tokenize(a.title, vocab).ids);
  return titles;
}

// ---------------------------------------------------------------------------
// ICT

/// Query is a uniformly drawn sentence; the document is the title plus the
/// passage with that sentence removed.
inline PretrainPair gen_ict(const Article& article, const Passage& passage,
                            std::span<const TokenId> title, Rng& rng,
                            const PairShape& shape) {
  const std::size_t n = passage.sentences.size();
  if (n < 2)
    throw GenerationError(GenerationError::Kind::NotEnoughSentences,
                          "ICT needs a passage with >= 2 sentences (passage " +
                              std::to_string(passage.id) + ")");
  const std::size_t i = rng.uniform_index(n);
  PretrainPair pair;
  pair.task = Task::ICT;
  pair.query = query_input(passage.sentences[i].token_ids, shape.query_max_len);
  pair.doc = pair_input(title, passage_tokens(passage, i), shape.doc_max_len);
  pair.source = {article.id, passage.id, static_cast<std::int64_t>(i), article.id, passage.id};
  return pair;
}

// ---------------------------------------------------------------------------
// BFS

namespace detail {

struct SentencePick {
  std::size_t passage;  // index within the lead section
  std::size_t sentence;
};

/// Uniform sentence over all lead-section sentences.
inline SentencePick pick_lead_sentence(const Article& article, Rng& rng) {
  std::size_t total = 0;
  if (!article.sections.empty())
    for (const auto& p : article.sections[0].passages) total += p.sentences.size();
  if (total == 0)
    throw GenerationError(GenerationError::Kind::EmptyLead,
                          "article " + std::to_string(article.id) + " has an empty lead section");
  std::size_t k = rng.uniform_index(total);
  const auto& lead = article.sections[0].passages;
  for (std::size_t p = 0; p < lead.size(); ++p) {
    if (k < lead[p].sentences.size()) return {p, k};
    k -= lead[p].sentences.size();
  }
  return {lead.size() - 1, lead.back().sentences.size() - 1};
}

inline bool has_lead(const Article& a) {
  if (a.sections.empty()) return false;
  for (const auto& p : a.sections[0].passages)
    if (!p.sentences.empty()) return true;
  return false;
}

inline std::size_t count_passages(const Article& a) {
  std::size_t n = 0;
  for (const auto& s : a.sections) n += s.passages.size();
  return n;
}

}  // namespace detail

/// Query is a lead-section sentence; the document is another passage of the
/// same article (the query's own passage is excluded).
inline PretrainPair gen_bfs(const Article& article, std::span<const TokenId> title,
                            Rng& rng, const PairShape& shape) {
  const auto pick = detail::pick_lead_sentence(article, rng);
  const Passage& qp = article.sections[0].passages[pick.passage];
  std::vector<const Passage*> docs;
  for (const auto& sec : article.sections)
    for (const auto& p : sec.passages)
      if (&p != &qp) docs.push_back(&p);
  if (docs.empty())
    throw GenerationError(GenerationError::Kind::NotEnoughPassages,
                          "BFS needs a second passage in article " + std::to_string(article.id));
  const Passage& dp = *docs[rng.uniform_index(docs.size())];
  PretrainPair pair;
  pair.task = Task::BFS;
  pair.query = query_input(qp.sentences[pick.sentence].token_ids, shape.query_max_len);
  pair.doc = pair_input(title, passage_tokens(dp), shape.doc_max_len);
  pair.source = {article.id, qp.id, static_cast<std::int64_t>(pick.sentence), article.id, dp.id};
  return pair;
}

// ---------------------------------------------------------------------------
// WLP

/// Query is a lead-section sentence of `target`; the document is a passage
/// of another article that links to it, titled with the linking article.
inline PretrainPair gen_wlp(const Article& target, const CorpusStore& corpus,
                            std::span<const std::vector<TokenId>> titles, Rng& rng,
                            const PairShape& shape) {
  const auto& inbound = corpus.inbound(target.id);
  if (inbound.empty())
    throw GenerationError(GenerationError::Kind::NoInboundLink,
                          "article " + std::to_string(target.id) + " has no inbound links");
  const auto pick = detail::pick_lead_sentence(target, rng);
  const Passage& qp = target.sections[0].passages[pick.passage];
  const PassageRef ref = inbound[rng.uniform_index(inbound.size())];
  const Article& linking = corpus.articles()[ref.article];
  const Passage& dp = corpus.passage(ref);
  PretrainPair pair;
  pair.task = Task::WLP;
  pair.query = query_input(qp.sentences[pick.sentence].token_ids, shape.query_max_len);
  pair.doc = pair_input(titles[ref.article], passage_tokens(dp), shape.doc_max_len);
  pair.source = {target.id, qp.id, static_cast<std::int64_t>(pick.sentence), linking.id, dp.id};
  return pair;
}

// ---------------------------------------------------------------------------
// MLM

struct MlmExample {
  TokenSeq input;
  std::vector<std::pair<std::size_t, TokenId>> labels;  // (position, original id)
};

struct MlmOptions {
  double mask_rate = 0.15;
  /// 80% MASK / 10% random / 10% unchanged; when false every pick becomes MASK.
  bool mixed_replacement = true;
};

/// Selects each non-special position with probability mask_rate. A draw with
/// no selection is retried once, after which empty labels are allowed.
inline MlmExample gen_mlm(const TokenSeq& tokens, Rng& rng, std::size_t vocab_size,
                          const MlmOptions& opt = {}) {
  if (tokens.empty()) throw ConfigError("gen_mlm: empty sequence");
  if (!(opt.mask_rate > 0.0 && opt.mask_rate <= 1.0))
    throw ConfigError("gen_mlm: mask_rate must be in (0, 1]");
  MlmExample ex;
  ex.input = tokens;
  std::vector<std::size_t> picked;
  for (int attempt = 0; attempt < 2 && picked.empty(); ++attempt) {
    for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
      if (is_special(tokens.ids[i])) continue;
      if (rng.bernoulli(opt.mask_rate)) picked.push_back(i);
    }
  }
  for (std::size_t pos : picked) {
    ex.labels.emplace_back(pos, tokens.ids[pos]);
    if (!opt.mixed_replacement) {
      ex.input.ids[pos] = kMask;
      continue;
    }
    const double u = rng.uniform();
    if (u < 0.8) {
      ex.input.ids[pos] = kMask;
    } else if (u < 0.9 && vocab_size > kNumSpecial) {
      ex.input.ids[pos] =
          static_cast<TokenId>(kNumSpecial + rng.uniform_index(vocab_size - kNumSpecial));
    }
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Mixture

/// Enabled tasks with positive weights normalized to sum 1.
class TaskMixture {
 public:
  TaskMixture() = default;
  explicit TaskMixture(std::map<Task, double> weights) {
    double total = 0;
    for (auto [t, w] : weights) {
      if (!(w > 0)) throw ConfigError(std::string("non-positive weight for ") + task_name(t));
      if (t == Task::Finetune) throw ConfigError("Finetune is not a pre-training task");
      total += w;
    }
    if (weights.empty()) throw ConfigError("empty task mixture");
    for (auto [t, w] : weights) {
      tasks_.push_back(t);
      weights_.push_back(w / total);
    }
  }

  static TaskMixture uniform(std::vector<Task> tasks) {
    std::map<Task, double> w;
    for (Task t : tasks) w[t] = 1.0;
    return TaskMixture(w);
  }

  /// Parses "ICT+BFS+WLP" (uniform) or "ICT:0.5,BFS:0.5".
  static TaskMixture parse(std::string_view spec) {
    std::map<Task, double> w;
    std::string cur;
    auto flush = [&] {
      if (cur.empty()) return;
      double weight = 1.0;
      auto colon = cur.find(':');
      std::string name = cur.substr(0, colon);
      if (colon != std::string::npos) weight = std::stod(cur.substr(colon + 1));
      w[parse_task(name)] = weight;
      cur.clear();
    };
    for (char c : spec) {
      if (c == '+' || c == ',') flush();
      else if (!detail::is_space(c)) cur += c;
    }
    flush();
    return TaskMixture(w);
  }

  const std::vector<Task>& tasks() const { return tasks_; }
  const std::vector<double>& weights() const { return weights_; }

  std::string label() const {
    std::string s;
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      if (i) s += '+';
      s += task_name(tasks_[i]);
    }
    return s;
  }

 private:
  std::vector<Task> tasks_;
  std::vector<double> weights_;
};

/// Endless seeded pair stream over a tokenized corpus. Each emission draws a
/// task by weight, then a source uniformly among that task's valid sources.
class PairSampler {
 public:
  static constexpr int kMaxRetries = 100;

  PairSampler(const CorpusStore& corpus, std::vector<std::vector<TokenId>> titles,
              TaskMixture mix, std::uint64_t seed, PairShape shape)
      : corpus_(corpus), titles_(std::move(titles)), mix_(std::move(mix)), rng_(seed),
        shape_(shape) {
    const auto& arts = corpus.articles();
    for (std::size_t a = 0; a < arts.size(); ++a) {
      const auto& art = arts[a];
      for (std::size_t s = 0; s < art.sections.size(); ++s)
        for (std::size_t p = 0; p < art.sections[s].passages.size(); ++p)
          if (art.sections[s].passages[p].sentences.size() >= 2) ict_.push_back({a, s, p});
      if (detail::has_lead(art)) {
        if (detail::count_passages(art) >= 2) bfs_.push_back(a);
        if (!corpus.inbound(art.id).empty()) wlp_.push_back(a);
      }
    }
    for (Task t : mix_.tasks()) {
      if (num_sources(t) == 0)
        throw ConfigError(std::string("task ") + task_name(t) +
                          " has no valid source in the corpus");
    }
  }

  std::size_t num_sources(Task t) const {
    switch (t) {
      case Task::ICT: return ict_.size();
      case Task::BFS: return bfs_.size();
      case Task::WLP: return wlp_.size();
      default: return 0;
    }
  }

  PretrainPair next() {
    for (int attempt = 0; attempt <= kMaxRetries; ++attempt) {
      const Task t = mix_.tasks()[rng_.categorical(mix_.weights())];
      try {
        return generate(t);
      } catch (const GenerationError&) {
        continue;
      }
    }
    throw Error("pair generation failed after " + std::to_string(kMaxRetries) + " retries");
  }

  std::vector<PretrainPair> take(std::size_t n) {
    std::vector<PretrainPair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(next());
    return out;
  }

  const TaskMixture& mixture() const { return mix_; }

 private:
  PretrainPair generate(Task t) {
    const auto& arts = corpus_.articles();
    switch (t) {
      case Task::ICT: {
        const auto& ref = ict_[rng_.uniform_index(ict_.size())];
        return gen_ict(arts[ref.article], corpus_.passage(ref), titles_[ref.article], rng_, shape_);
      }
      case Task::BFS: {
        const std::size_t a = bfs_[rng_.uniform_index(bfs_.size())];
        return gen_bfs(arts[a], titles_[a], rng_, shape_);
      }
      case Task::WLP: {
        const std::size_t a = wlp_[rng_.uniform_index(wlp_.size())];
        return gen_wlp(arts[a], corpus_, titles_, rng_, shape_);
      }
      default: throw ConfigError("not a pre-training task");
    }
  }

  const CorpusStore& corpus_;
  std::vector<std::vector<TokenId>> titles_;
  TaskMixture mix_;
  Rng rng_;
  PairShape shape_;
  std::vector<PassageRef> ict_;
  std::vector<std::size_t> bfs_;
  std::vector<std::size_t> wlp_;
};

inline std::vector<PretrainPair> sample_mixture(const CorpusStore& corpus,
                                                const Vocabulary& vocab,
                                                const TaskMixture& mix, std::size_t n,
                                                std::uint64_t seed, const PairShape& shape) {
  PairSampler sampler(corpus, tokenize_titles(corpus, vocab), mix, seed, shape);
  return sampler.take(n);
}

// ---------------------------------------------------------------------------
// Statistics and pair files

struct TaskStats {
  std::size_t pairs = 0;
  std::size_t query_tokens = 0;
  std::size_t doc_tokens = 0;

  std::optional<double> mean_query_tokens() const {
    if (pairs == 0) return std::nullopt;
    return static_cast<double>(query_tokens) / static_cast<double>(pairs);
  }
  std::optional<double> mean_doc_tokens() const {
    if (pairs == 0) return std::nullopt;
    return static_cast<double>(doc_tokens) / static_cast<double>(pairs);
  }
};

struct PairStats {
  std::map<Task, TaskStats> per_task;

  const TaskStats& get(Task t) const {
    static const TaskStats empty;
    auto it = per_task.find(t);
    return it == per_task.end() ? empty : it->second;
  }

  /// One record per task: #tokens, #pairs, avg. #query tokens, avg. #doc tokens.
  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (Task t : {Task::ICT, Task::BFS, Task::WLP, Task::Finetune}) {
      const auto& s = get(t);
      auto opt = [](std::optional<double> v) -> nlohmann::json {
        return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
      };
      j[task_name(t)] = {{"tokens", s.query_tokens + s.doc_tokens},
                         {"pairs", s.pairs},
                         {"avg_query_tokens", opt(s.mean_query_tokens())},
                         {"avg_doc_tokens", opt(s.mean_doc_tokens())}};
    }
    return j;
  }
};

inline std::size_t count_non_special(const TokenSeq& s) {
  std::size_t n = 0;
  for (TokenId id : s.ids) n += !is_special(id);
  return n;
}

/// Token counts exclude CLS/SEP.
inline PairStats pair_stats(std::span<const PretrainPair> pairs) {
  PairStats st;
  for (const auto& p : pairs) {
    auto& t = st.per_task[p.task];
    ++t.pairs;
    t.query_tokens += count_non_special(p.query);
    t.doc_tokens += count_non_special(p.doc);
  }
  return st;
}

inline std::string pair_to_jsonl(const PretrainPair& p) {
  nlohmann::json j = {{"task", task_name(p.task)},
                      {"q", p.query.ids},
                      {"d", p.doc.ids},
                      {"src", {p.source.query_article, p.source.doc_passage, p.source.query_sentence}}};
  return j.dump();
}

inline PretrainPair pair_from_jsonl(std::string_view line, std::size_t lineno = 0) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
    PretrainPair p;
    p.task = parse_task(j.at("task").get<std::string>());
    p.query.ids = j.at("q").get<std::vector<TokenId>>();
    p.doc.ids = j.at("d").get<std::vector<TokenId>>();
    const auto src = j.at("src").get<std::vector<std::int64_t>>();
    if (src.size() != 3) throw ParseError(lineno, "\"src\" must have 3 entries");
    p.source.query_article = src[0];
    p.source.doc_passage = src[1];
    p.source.query_sentence = src[2];
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(lineno, std::string("bad pair record: ") + e.what());
  }
}

}  // namespace twotower
