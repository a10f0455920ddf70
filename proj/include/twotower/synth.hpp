#pragma once

// Synthetic encyclopedia generator for desk-scale experiments.
//
// Every article describes one entity. An entity has a name (the title, used
// throughout its body) and a nickname that only occurs in its lead section
// and in passages of other articles that link to it. Facts are (entity,
// relation, object) triples; relations have several synonymous verbs. Each
// fact is stated once in the body and may be restated in the lead section
// with a different verb and with the nickname.
//
// Questions ask for a fact's object using the nickname and a random verb of
// the relation, so lexical matching against the body sentence mostly fails,
// while lead/body and cross-article co-occurrence carries the aliasing.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "twotower/common.hpp"

namespace twotower {

struct SynthConfig {
  std::size_t articles = 500;
  std::size_t categories = 10;
  std::size_t relations = 12;
  std::size_t verbs_per_relation = 3;
  std::size_t facts_per_article = 6;
  std::size_t entity_object_percent = 50;  // facts whose object is another entity
  std::size_t value_words = 400;
  std::size_t topic_words_per_category = 30;
  std::size_t body_sections = 3;
  std::size_t passages_per_section = 3;
  std::size_t lead_restated_facts = 3;
  std::size_t questions_per_article = 2;
  std::uint64_t seed = 2020;

  nlohmann::json to_json() const {
    return {{"articles", articles},
            {"categories", categories},
            {"relations", relations},
            {"verbs_per_relation", verbs_per_relation},
            {"facts_per_article", facts_per_article},
            {"entity_object_percent", entity_object_percent},
            {"value_words", value_words},
            {"topic_words_per_category", topic_words_per_category},
            {"body_sections", body_sections},
            {"passages_per_section", passages_per_section},
            {"lead_restated_facts", lead_restated_facts},
            {"questions_per_article", questions_per_article},
            {"seed", seed}};
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    SynthConfig c;
    auto get = [&](const char* k, auto& v) {
      if (j.contains(k)) v = j[k].get<std::decay_t<decltype(v)>>();
    };
    get("articles", c.articles);
    get("categories", c.categories);
    get("relations", c.relations);
    get("verbs_per_relation", c.verbs_per_relation);
    get("facts_per_article", c.facts_per_article);
    get("entity_object_percent", c.entity_object_percent);
    get("value_words", c.value_words);
    get("topic_words_per_category", c.topic_words_per_category);
    get("body_sections", c.body_sections);
    get("passages_per_section", c.passages_per_section);
    get("lead_restated_facts", c.lead_restated_facts);
    get("questions_per_article", c.questions_per_article);
    get("seed", c.seed);
    return c;
  }
};

struct SynthOutput {
  std::string corpus_jsonl;
  std::string qa_jsonl;
  std::size_t num_passages = 0;
  std::size_t num_questions = 0;
};

namespace detail {

class WordFactory {
 public:
  explicit WordFactory(Rng& rng) : rng_(rng) {
    for (const char* w : {"the", "a", "of", "in", "and", "is", "was", "to", "with", "by", "for",
                          "on", "its", "it", "this", "also", "called", "what", "which", "who",
                          "has", "many", "some", "near", "from", "known", "as", "an", "at"})
      used_.insert(w);
  }

  /// Fresh pseudo-word of 2-3 syllables, never a prefix or suffix of another
  /// generated word (keeps answer substrings unambiguous).
  std::string make() {
    static const char* cons = "bdfgklmnprstvz";
    static const char* vows = "aeiou";
    for (;;) {
      const std::size_t syl = 2 + rng_.uniform_index(2);
      std::string w;
      for (std::size_t s = 0; s < syl; ++s) {
        w += cons[rng_.uniform_index(14)];
        w += vows[rng_.uniform_index(5)];
      }
      if (rng_.bernoulli(0.5)) w += cons[rng_.uniform_index(14)];
      if (clashes(w)) continue;
      used_.insert(w);
      return w;
    }
  }

 private:
  bool clashes(const std::string& w) const {
    for (const auto& u : used_)
      if (u.find(w) != std::string::npos || w.find(u) != std::string::npos) return true;
    return false;
  }

  Rng& rng_;
  std::set<std::string> used_;
};

inline std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

}  // namespace detail

inline SynthOutput generate_synthetic(const SynthConfig& cfg) {
  using nlohmann::json;
  if (cfg.articles < 2 || cfg.relations < cfg.facts_per_article || cfg.verbs_per_relation < 1 ||
      cfg.categories < 1 || cfg.value_words < 1 || cfg.topic_words_per_category < 4)
    throw ConfigError("synthetic corpus: inconsistent configuration");
  Rng rng(derive_seed(cfg.seed, "synth"));
  detail::WordFactory words(rng);

  struct Category {
    std::vector<std::string> nouns;  // two synonymous category nouns
    std::vector<std::string> topics;
  };
  std::vector<Category> cats(cfg.categories);
  for (auto& c : cats) {
    c.nouns = {words.make(), words.make()};
    for (std::size_t i = 0; i < cfg.topic_words_per_category; ++i) c.topics.push_back(words.make());
  }
  std::vector<std::vector<std::string>> verbs(cfg.relations);
  for (auto& v : verbs)
    for (std::size_t i = 0; i < cfg.verbs_per_relation; ++i) v.push_back(words.make());
  std::vector<std::string> values;
  for (std::size_t i = 0; i < cfg.value_words; ++i) values.push_back(words.make());

  struct Fact {
    std::size_t relation;
    bool entity_object;
    std::size_t object;  // entity index or value index
  };
  struct Entity {
    std::string name, nick;
    std::size_t category;
    std::vector<std::string> topics;
    std::vector<Fact> facts;
  };
  const std::size_t n = cfg.articles;
  std::vector<Entity> ents(n);
  for (std::size_t e = 0; e < n; ++e) {
    auto& ent = ents[e];
    ent.name = words.make();
    ent.nick = words.make();
    ent.category = rng.uniform_index(cfg.categories);
    const auto& pool = cats[ent.category].topics;
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    for (std::size_t i = 0; i < 6 && i < idx.size(); ++i) ent.topics.push_back(pool[idx[i]]);
    std::vector<std::size_t> rels(cfg.relations);
    for (std::size_t i = 0; i < rels.size(); ++i) rels[i] = i;
    rng.shuffle(rels);
    for (std::size_t f = 0; f < cfg.facts_per_article; ++f) {
      Fact fact{rels[f], rng.uniform_index(100) < cfg.entity_object_percent, 0};
      if (fact.entity_object) {
        do {
          fact.object = rng.uniform_index(n);
        } while (fact.object == e);
      } else {
        fact.object = rng.uniform_index(values.size());
      }
      ent.facts.push_back(fact);
    }
  }

  auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    return v[rng.uniform_index(v.size())];
  };
  // Object surface form and the article it links to (if any).
  auto object_text = [&](const Fact& f) -> std::pair<std::string, std::int64_t> {
    if (!f.entity_object) return {values[f.object], -1};
    const auto& o = ents[f.object];
    return {rng.bernoulli(0.5) ? o.name : o.nick, static_cast<std::int64_t>(f.object)};
  };

  std::string corpus, qa;
  std::int64_t pid = 0;
  std::size_t num_q = 0;
  for (std::size_t e = 0; e < n; ++e) {
    const auto& ent = ents[e];
    const auto& cat = cats[ent.category];
    auto filler = [&](const std::string& subject) {
      const auto& t1 = ent.topics[rng.uniform_index(ent.topics.size())];
      std::string t2;
      do {
        t2 = ent.topics[rng.uniform_index(ent.topics.size())];
      } while (t2 == t1);
      switch (rng.uniform_index(4)) {
        case 0: return detail::capitalize(subject) + " has many " + t1 + " and " + t2 + ".";
        case 1: return detail::capitalize("the " + t1 + " of " + subject) + " is near the " + t2 + ".";
        case 2: return detail::capitalize(subject) + " is known for its " + t1 + " " + t2 + ".";
        default: return detail::capitalize("some " + t1) + " in " + subject + " was " + t2 + ".";
      }
    };
    auto fact_sentence = [&](const std::string& subject, const Fact& f,
                             std::vector<std::int64_t>& links) {
      auto [obj, link] = object_text(f);
      if (link >= 0) links.push_back(link);
      return std::make_pair(
          detail::capitalize(subject) + " " + pick(verbs[f.relation]) + " " + obj + ".", obj);
    };

    json sections = json::array();
    // Lead section: definition plus restated facts under name or nickname.
    {
      std::vector<std::string> sents;
      std::vector<std::int64_t> links;
      sents.push_back(detail::capitalize(ent.name) + ", also called " + ent.nick + ", is a " +
                      pick(cat.nouns) + ".");
      std::vector<std::size_t> order(ent.facts.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      for (std::size_t i = 0; i < cfg.lead_restated_facts && i < order.size(); ++i)
        sents.push_back(
            fact_sentence(rng.bernoulli(0.7) ? ent.nick : ent.name, ent.facts[order[i]], links).first);
      std::string text;
      for (const auto& s : sents) text += (text.empty() ? "" : " ") + s;
      sections.push_back({{"heading", ""},
                          {"passages", json::array({{{"id", pid++}, {"text", text}, {"links", links}}})}});
    }

    // Body: each fact stated once, spread across passages; fillers elsewhere.
    const std::size_t np = cfg.body_sections * cfg.passages_per_section;
    std::vector<std::vector<std::size_t>> fact_slots(np);
    {
      std::vector<std::size_t> slots(np);
      for (std::size_t i = 0; i < np; ++i) slots[i] = i;
      rng.shuffle(slots);
      for (std::size_t f = 0; f < ent.facts.size(); ++f) fact_slots[slots[f % np]].push_back(f);
    }
    struct Gold {
      std::int64_t passage;
      std::size_t fact;
      std::string answer;
      std::size_t sentence;
      std::vector<std::string> sentences;
    };
    std::vector<Gold> golds;
    for (std::size_t s = 0; s < cfg.body_sections; ++s) {
      json passages = json::array();
      for (std::size_t p = 0; p < cfg.passages_per_section; ++p) {
        const std::size_t slot = s * cfg.passages_per_section + p;
        const std::size_t len = 3 + rng.uniform_index(2);
        std::vector<std::string> sents;
        std::vector<std::int64_t> links;
        std::vector<std::pair<std::size_t, std::string>> fact_pos;  // (fact, answer)
        std::set<std::string> seen;
        for (std::size_t f : fact_slots[slot]) {
          auto [sent, ans] = fact_sentence(ent.name, ent.facts[f], links);
          fact_pos.emplace_back(f, ans);
          sents.push_back(sent);
          seen.insert(sent);
        }
        while (sents.size() < len) {
          auto sent = filler(ent.name);
          if (seen.insert(sent).second) sents.push_back(sent);
        }
        // Facts land at random positions among the fillers.
        std::vector<std::size_t> perm(sents.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        rng.shuffle(perm);
        std::vector<std::string> shuffled(sents.size());
        for (std::size_t i = 0; i < perm.size(); ++i) shuffled[perm[i]] = sents[i];
        for (std::size_t i = 0; i < fact_pos.size(); ++i)
          golds.push_back({pid, fact_pos[i].first, fact_pos[i].second, perm[i], shuffled});
        std::string text;
        for (const auto& t : shuffled) text += (text.empty() ? "" : " ") + t;
        passages.push_back({{"id", pid++}, {"text", text}, {"links", links}});
      }
      sections.push_back({{"heading", "section " + std::to_string(s + 1)}, {"passages", passages}});
    }
    json rec = {{"id", static_cast<std::int64_t>(e)}, {"title", detail::capitalize(ent.name)},
                {"sections", sections}};
    corpus += rec.dump() + "\n";

    // Questions about facts whose answer first occurs in the fact sentence.
    rng.shuffle(golds);
    std::size_t asked = 0;
    for (const auto& g : golds) {
      if (asked == cfg.questions_per_article) break;
      std::size_t first = g.sentences.size();
      for (std::size_t i = 0; i < g.sentences.size(); ++i)
        if (g.sentences[i].find(g.answer) != std::string::npos) {
          first = i;
          break;
        }
      if (first != g.sentence) continue;
      const auto& f = ent.facts[g.fact];
      const std::string q = "What " + pick(verbs[f.relation]) + " " + ent.nick + "?";
      qa += json{{"q", q}, {"a", g.answer}, {"pid", g.passage}}.dump() + "\n";
      ++asked;
      ++num_q;
    }
  }
  return {std::move(corpus), std::move(qa), static_cast<std::size_t>(pid), num_q};
}

}  // namespace twotower
