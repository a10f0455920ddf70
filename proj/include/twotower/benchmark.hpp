#pragma once

// ReQA-style benchmark: (question, answer, passage) entries become
// (question, gold sentence/passage candidate) examples over the candidate set
// of all sentences of every referenced passage.

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <set>

#include "json.hpp"
#include "twotower/common.hpp"
#include "twotower/corpus.hpp"
#include "twotower/encoder.hpp"
#include "twotower/model.hpp"
#include "twotower/retrieval.hpp"
#include "twotower/vocab.hpp"

namespace twotower {

struct QaEntry {
  std::string question;
  std::string answer;
  PassageId passage_id = 0;
  bool operator==(const QaEntry&) const = default;
};

inline std::vector<QaEntry> parse_qa(std::istream& in) {
  std::vector<QaEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("q") || !j.contains("a") || !j.contains("pid") ||
          !j["q"].is_string() || !j["a"].is_string() || !j["pid"].is_number_integer())
        throw ParseError(lineno, "QA record needs string q, string a and integer pid");
      out.push_back({j["q"].get<std::string>(), j["a"].get<std::string>(), j["pid"].get<PassageId>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return out;
}

inline std::vector<QaEntry> load_qa(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return parse_qa(in);
}

inline std::string qa_to_jsonl(const QaEntry& e) {
  return nlohmann::json{{"q", e.question}, {"a", e.answer}, {"pid", e.passage_id}}.dump() + "\n";
}

struct Candidate {
  CandidateId id = 0;
  PassageId passage_id = -1;  // -1 for external distractors
  std::size_t sentence_index = 0;
  std::string sentence_text;
  std::vector<TokenId> sentence_tokens;
  std::vector<TokenId> passage_tokens;
};

/// Doc-tower input: [CLS] sentence [SEP] passage.
inline TokenSeq candidate_input(const Candidate& c, std::size_t max_len) {
  return pair_input(c.sentence_tokens, c.passage_tokens, max_len);
}

/// Token surface shared by BM25: sentence followed by passage.
inline std::vector<TokenId> candidate_terms(const Candidate& c) {
  std::vector<TokenId> out = c.sentence_tokens;
  out.insert(out.end(), c.passage_tokens.begin(), c.passage_tokens.end());
  return out;
}

struct ReqaExample {
  std::string question;
  std::vector<TokenId> question_tokens;
  CandidateId gold = 0;
};

struct ReqaBenchmark {
  std::vector<Candidate> candidates;
  std::vector<ReqaExample> examples;
  std::size_t dropped = 0;              // entries whose answer matched no sentence
  std::size_t referenced_passages = 0;  // candidates [0, n) come from the QA file
  std::size_t distractor_collisions = 0;
};

/// Gold sentence = first sentence of the passage containing the answer
/// verbatim. The corpus must be tokenized.
inline ReqaBenchmark build_reqa(const std::vector<QaEntry>& entries, const CorpusStore& corpus,
                                const Vocabulary& vocab) {
  ReqaBenchmark bench;
  std::map<PassageId, CandidateId> first_candidate;
  for (const auto& e : entries) {
    auto ref = corpus.find_passage(e.passage_id);
    if (!ref) throw Error("QA entry references unknown passage " + std::to_string(e.passage_id));
    const Passage& p = corpus.passage(*ref);
    std::optional<std::size_t> gold;
    for (std::size_t i = 0; i < p.sentences.size() && !e.answer.empty(); ++i)
      if (p.sentences[i].text.find(e.answer) != std::string::npos) {
        gold = i;
        break;
      }
    if (!gold) {
      ++bench.dropped;
      continue;
    }
    auto [it, fresh] = first_candidate.emplace(p.id, static_cast<CandidateId>(bench.candidates.size()));
    if (fresh) {
      const auto ptoks = passage_tokens(p);
      for (std::size_t i = 0; i < p.sentences.size(); ++i)
        bench.candidates.push_back({static_cast<CandidateId>(bench.candidates.size()), p.id, i,
                                    p.sentences[i].text, p.sentences[i].token_ids, ptoks});
      ++bench.referenced_passages;
    }
    bench.examples.push_back(
        {e.question, tokenize(e.question, vocab).ids, it->second + static_cast<CandidateId>(*gold)});
  }
  return bench;
}

struct SplitRatio {
  int train = 80;
  int test = 20;

  std::string label() const { return std::to_string(train) + "/" + std::to_string(test); }
  auto operator<=>(const SplitRatio&) const = default;
};

inline SplitRatio parse_ratio(std::string_view s) {
  const auto slash = s.find('/');
  if (slash == std::string_view::npos) throw ConfigError("split ratio must look like 80/20");
  SplitRatio r{std::stoi(std::string(s.substr(0, slash))), std::stoi(std::string(s.substr(slash + 1)))};
  if (r.train <= 0 || r.test <= 0 || r.train + r.test != 100)
    throw ConfigError("split ratio " + std::string(s) + " must be two positive parts summing to 100");
  return r;
}

struct Split {
  SplitRatio ratio;
  std::vector<std::size_t> train, validation, test;  // indices into examples
};

/// Cold-start split over unique question strings: shuffled by seed, the first
/// train% form the training pool (its last 10% becomes validation), the rest
/// is test.
inline Split make_split(const std::vector<ReqaExample>& examples, SplitRatio ratio,
                        std::uint64_t seed) {
  if (ratio.train <= 0 || ratio.test <= 0 || ratio.train + ratio.test != 100)
    throw ConfigError("split ratio must be two positive parts summing to 100");
  std::vector<std::string> questions;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto [it, fresh] = groups.try_emplace(examples[i].question);
    if (fresh) questions.push_back(examples[i].question);
    it->second.push_back(i);
  }
  Rng rng(seed);
  rng.shuffle(questions);
  const std::size_t n = questions.size();
  const std::size_t pool = n * static_cast<std::size_t>(ratio.train) / 100;
  const auto nval = static_cast<std::size_t>(std::llround(static_cast<double>(pool) * 0.1));
  Split s;
  s.ratio = ratio;
  for (std::size_t q = 0; q < n; ++q) {
    auto& part = q < pool - nval ? s.train : (q < pool ? s.validation : s.test);
    for (auto i : groups[questions[q]]) part.push_back(i);
  }
  if (s.train.empty() || s.validation.empty() || s.test.empty())
    throw ConfigError("split " + ratio.label() + " of " + std::to_string(n) +
                      " questions leaves an empty part");
  return s;
}

struct ExternalCandidate {
  std::string sentence;
  std::string passage;
};

/// (sentence, passage) pairs from passages no QA entry references, shuffled.
inline std::vector<ExternalCandidate> distractor_pool(const CorpusStore& corpus,
                                                      const ReqaBenchmark& bench,
                                                      std::uint64_t seed) {
  std::set<PassageId> used;
  for (const auto& c : bench.candidates) used.insert(c.passage_id);
  std::vector<ExternalCandidate> out;
  for (const auto& art : corpus.articles())
    for (const auto& sec : art.sections)
      for (const auto& p : sec.passages) {
        if (used.count(p.id)) continue;
        std::string text;
        for (const auto& s : p.sentences) text += (text.empty() ? "" : " ") + s.text;
        for (const auto& s : p.sentences) out.push_back({s.text, text});
      }
  Rng rng(seed);
  rng.shuffle(out);
  return out;
}

/// Appends up to `limit` external candidates with fresh ids. Texts equal to an
/// existing gold candidate are kept and counted as collisions.
inline void augment_open_domain(ReqaBenchmark& bench, std::span<const ExternalCandidate> external,
                                std::size_t limit, const Vocabulary& vocab) {
  std::set<std::pair<std::string, std::string>> gold_texts;
  std::map<PassageId, std::string> passage_text;
  for (const auto& c : bench.candidates)
    if (c.passage_id >= 0) {
      auto& t = passage_text[c.passage_id];
      t += (t.empty() ? "" : " ") + c.sentence_text;
    }
  for (const auto& e : bench.examples) {
    const auto& c = bench.candidates[static_cast<std::size_t>(e.gold)];
    gold_texts.emplace(c.sentence_text, passage_text[c.passage_id]);
  }
  for (std::size_t i = 0; i < external.size() && i < limit; ++i) {
    const auto& x = external[i];
    if (gold_texts.count({x.sentence, x.passage})) ++bench.distractor_collisions;
    bench.candidates.push_back({static_cast<CandidateId>(bench.candidates.size()), -1, 0, x.sentence,
                                tokenize(x.sentence, vocab).ids, tokenize(x.passage, vocab).ids});
  }
}

inline std::string external_to_jsonl(const ExternalCandidate& x) {
  return nlohmann::json{{"sentence", x.sentence}, {"passage", x.passage}}.dump() + "\n";
}

inline std::vector<ExternalCandidate> parse_external(std::istream& in) {
  std::vector<ExternalCandidate> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("sentence").get<std::string>(), j.at("passage").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline const std::vector<std::size_t>& default_ks() {
  static const std::vector<std::size_t> ks = {1, 5, 10, 50, 100};
  return ks;
}

struct EvalReport {
  std::map<std::size_t, double> recall;  // k -> fraction in [0,1]
  std::size_t num_candidates = 0;
  std::size_t num_queries = 0;
  std::string config_fingerprint;

  nlohmann::json to_json() const {
    nlohmann::json r = nlohmann::json::object();
    for (const auto& [k, v] : recall) r["R@" + std::to_string(k)] = v;
    return {{"recall", r},
            {"num_candidates", num_candidates},
            {"num_queries", num_queries},
            {"config_fingerprint", config_fingerprint}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    for (const auto& [key, v] : j.at("recall").items()) {
      if (!key.starts_with("R@")) throw ConfigError("bad recall key '" + key + "'");
      r.recall[std::stoull(key.substr(2))] = v.get<double>();
    }
    r.num_candidates = j.at("num_candidates").get<std::size_t>();
    r.num_queries = j.at("num_queries").get<std::size_t>();
    r.config_fingerprint = j.value("config_fingerprint", "");
    return r;
  }
};

/// recall@k = fraction of queries whose gold id is within the first k items.
inline EvalReport evaluate(std::span<const RankedList> ranked, std::span<const CandidateId> gold,
                           std::span<const std::size_t> ks, std::size_t num_candidates = 0) {
  if (ranked.size() != gold.size())
    throw Error("evaluate: " + std::to_string(gold.size()) + " queries but " +
                std::to_string(ranked.size()) + " ranked lists");
  EvalReport rep;
  rep.num_queries = gold.size();
  rep.num_candidates = num_candidates;
  for (auto k : ks) rep.recall[k] = 0;
  if (gold.empty()) return rep;
  for (std::size_t q = 0; q < gold.size(); ++q) {
    const auto& items = ranked[q].items;
    std::optional<std::size_t> rank;
    for (std::size_t r = 0; r < items.size(); ++r)
      if (items[r].id == gold[q]) {
        rank = r;
        break;
      }
    if (!rank) continue;
    for (auto k : ks)
      if (*rank < k) rep.recall[k] += 1;
  }
  for (auto& [k, v] : rep.recall) v /= static_cast<double>(gold.size());
  return rep;
}

inline std::size_t max_k(std::span<const std::size_t> ks) {
  return ks.empty() ? 1 : *std::max_element(ks.begin(), ks.end());
}

inline std::vector<TokenSeq> candidate_inputs(const ReqaBenchmark& bench, std::size_t max_len,
                                              std::size_t first = 0,
                                              std::size_t last = SIZE_MAX) {
  last = std::min(last, bench.candidates.size());
  std::vector<TokenSeq> out;
  out.reserve(last - first);
  for (std::size_t i = first; i < last; ++i) out.push_back(candidate_input(bench.candidates[i], max_len));
  return out;
}

/// Dense rankings of the given examples against every candidate in `index`.
template <class T>
std::vector<RankedList> dense_rankings(const TwoTower<T>& model, const DenseIndex& index,
                                       const ReqaBenchmark& bench,
                                       std::span<const std::size_t> examples, std::size_t k,
                                       std::size_t threads = 1) {
  std::vector<TokenSeq> qs;
  qs.reserve(examples.size());
  for (auto i : examples)
    qs.push_back(query_input(bench.examples[i].question_tokens, model.query().max_len));
  const Matrix<T> Q = encode(model.query(), std::span<const TokenSeq>(qs), threads);
  std::vector<RankedList> out(examples.size());
  parallel_chunks(examples.size(), threads, [&](std::size_t b, std::size_t e, std::size_t) {
    std::vector<float> q(Q.cols);
    for (std::size_t i = b; i < e; ++i) {
      for (std::size_t c = 0; c < Q.cols; ++c) q[c] = static_cast<float>(Q(i, c));
      out[i] = dense_topk(index, q, k);
    }
  });
  return out;
}

inline std::vector<RankedList> bm25_rankings(const InvertedIndex& index, const ReqaBenchmark& bench,
                                             std::span<const std::size_t> examples, std::size_t k,
                                             const BM25Params& p = {}, std::size_t threads = 1) {
  std::vector<RankedList> out(examples.size());
  parallel_chunks(examples.size(), threads, [&](std::size_t b, std::size_t e, std::size_t) {
    for (std::size_t i = b; i < e; ++i)
      out[i] = bm25_topk(index, bench.examples[examples[i]].question_tokens, k, p);
  });
  return out;
}

inline std::vector<CandidateId> gold_ids(const ReqaBenchmark& bench,
                                         std::span<const std::size_t> examples) {
  std::vector<CandidateId> g;
  g.reserve(examples.size());
  for (auto i : examples) g.push_back(bench.examples[i].gold);
  return g;
}

inline InvertedIndex build_bm25_index(const ReqaBenchmark& bench, std::size_t last = SIZE_MAX) {
  last = std::min(last, bench.candidates.size());
  std::vector<std::vector<TokenId>> docs;
  docs.reserve(last);
  for (std::size_t i = 0; i < last; ++i) docs.push_back(candidate_terms(bench.candidates[i]));
  return build_inverted_index(docs);
}

}  // namespace twotower
