#pragma once

// Corpus model: articles made of sections, passages and sentences, with
// passage-level hyperlinks to other articles. Ingested from JSONL, one
// article per line:
//
//   {"id": 3, "title": "...", "sections": [
//       {"heading": "", "passages": [{"text": "...", "links": [7, 9]}]}]}
//
// Passages may carry an optional integer "id"; otherwise they are numbered by
// their ordinal position in the file, counting every passage record.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "twotower/common.hpp"

namespace twotower {

using ArticleId = std::int64_t;
using PassageId = std::int64_t;
using TokenId = std::int32_t;

struct Sentence {
  std::string text;
  std::vector<TokenId> token_ids;

  bool operator==(const Sentence&) const = default;
};

struct Passage {
  PassageId id = 0;
  std::vector<Sentence> sentences;
  std::vector<ArticleId> outgoing_links;

  bool operator==(const Passage&) const = default;
};

struct Section {
  std::string heading;
  std::vector<Passage> passages;

  bool operator==(const Section&) const = default;
};

struct Article {
  ArticleId id = 0;
  std::string title;
  std::vector<Section> sections;  // sections[0] is the lead section

  bool operator==(const Article&) const = default;
};

enum class LinkPolicy { Drop, Keep };

/// Location of a passage inside the store.
struct PassageRef {
  std::size_t article = 0;
  std::size_t section = 0;
  std::size_t passage = 0;

  bool operator==(const PassageRef&) const = default;
};

/// Immutable after ingestion; lookups are by article id or passage id.
class CorpusStore {
 public:
  CorpusStore() = default;
  explicit CorpusStore(std::vector<Article> articles)
      : articles_(std::move(articles)) {
    reindex();
  }

  const std::vector<Article>& articles() const { return articles_; }
  std::vector<Article>& mutable_articles() { return articles_; }
  std::size_t size() const { return articles_.size(); }
  bool empty() const { return articles_.empty(); }

  const Article* find_article(ArticleId id) const {
    auto it = article_index_.find(id);
    return it == article_index_.end() ? nullptr : &articles_[it->second];
  }
  std::optional<std::size_t> article_index(ArticleId id) const {
    auto it = article_index_.find(id);
    if (it == article_index_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<PassageRef> find_passage(PassageId id) const {
    auto it = passage_index_.find(id);
    if (it == passage_index_.end()) return std::nullopt;
    return it->second;
  }
  const Passage& passage(const PassageRef& ref) const {
    return articles_[ref.article].sections[ref.section].passages[ref.passage];
  }

  /// Every passage, in store order.
  std::vector<PassageRef> all_passages() const {
    std::vector<PassageRef> refs;
    for (std::size_t a = 0; a < articles_.size(); ++a)
      for (std::size_t s = 0; s < articles_[a].sections.size(); ++s)
        for (std::size_t p = 0; p < articles_[a].sections[s].passages.size();
             ++p)
          refs.push_back({a, s, p});
    return refs;
  }

  /// Passages (outside the target article) whose links point at `target`.
  const std::vector<PassageRef>& inbound(ArticleId target) const {
    static const std::vector<PassageRef> none;
    auto it = inbound_.find(target);
    return it == inbound_.end() ? none : it->second;
  }

  std::size_t num_links() const {
    std::size_t n = 0;
    for (const auto& a : articles_)
      for (const auto& s : a.sections)
        for (const auto& p : s.passages) n += p.outgoing_links.size();
    return n;
  }

  void reindex() {
    article_index_.clear();
    passage_index_.clear();
    inbound_.clear();
    for (std::size_t a = 0; a < articles_.size(); ++a) {
      const auto& art = articles_[a];
      if (!article_index_.emplace(art.id, a).second)
        throw Error("duplicate article id " + std::to_string(art.id));
      for (std::size_t s = 0; s < art.sections.size(); ++s) {
        for (std::size_t p = 0; p < art.sections[s].passages.size(); ++p) {
          const auto& pas = art.sections[s].passages[p];
          if (!passage_index_.emplace(pas.id, PassageRef{a, s, p}).second)
            throw Error("duplicate passage id " + std::to_string(pas.id));
        }
      }
    }
    for (std::size_t a = 0; a < articles_.size(); ++a) {
      const auto& art = articles_[a];
      for (std::size_t s = 0; s < art.sections.size(); ++s) {
        for (std::size_t p = 0; p < art.sections[s].passages.size(); ++p) {
          std::unordered_set<ArticleId> seen;
          for (ArticleId target : art.sections[s].passages[p].outgoing_links) {
            if (target == art.id || !seen.insert(target).second) continue;
            inbound_[target].push_back({a, s, p});
          }
        }
      }
    }
  }

  bool operator==(const CorpusStore& o) const { return articles_ == o.articles_; }

 private:
  std::vector<Article> articles_;
  std::unordered_map<ArticleId, std::size_t> article_index_;
  std::unordered_map<PassageId, PassageRef> passage_index_;
  std::unordered_map<ArticleId, std::vector<PassageRef>> inbound_;
};

// ---------------------------------------------------------------------------
// Sentence splitting

namespace detail {

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline bool is_abbreviation(std::string_view word) {
  static const char* const kAbbrev[] = {"dr.",   "mr.",  "mrs.", "ms.",
                                        "st.",   "vs.",  "etc.", "e.g.",
                                        "i.e.",  "fig.", "no."};
  const auto lower = ascii_lower(word);
  for (const char* a : kAbbrev)
    if (lower == a) return true;
  return false;
}

inline std::string_view trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

/// Rule-based splitter: a sentence ends at `.`, `!` or `?` followed by
/// whitespace that either contains a newline or precedes an uppercase letter,
/// unless the word ending there is a known abbreviation.
inline std::vector<Sentence> split_sentences(std::string_view text) {
  std::vector<Sentence> out;
  const auto body = detail::trim(text);
  const std::size_t n = body.size();
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < n) {
    const char c = body[i];
    if ((c == '.' || c == '!' || c == '?') && i + 1 < n &&
        detail::is_space(body[i + 1])) {
      std::size_t k = i + 1;
      bool newline = false;
      while (k < n && detail::is_space(body[k])) {
        newline |= body[k] == '\n';
        ++k;
      }
      const bool upper =
          k < n && std::isupper(static_cast<unsigned char>(body[k]));
      std::size_t w = i;
      while (w > start && !detail::is_space(body[w - 1])) --w;
      if ((newline || upper) && !detail::is_abbreviation(body.substr(w, i + 1 - w))) {
        out.push_back({std::string(body.substr(start, i + 1 - start)), {}});
        start = k;
        i = k;
        continue;
      }
    }
    ++i;
  }
  if (start < n) out.push_back({std::string(body.substr(start)), {}});
  return out;
}

// ---------------------------------------------------------------------------
// JSONL ingestion

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const char* key,
                                     std::size_t line) {
  if (!obj.is_object()) throw ParseError(line, "expected object");
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(line, std::string("missing \"") + key + "\"");
  return *it;
}

}  // namespace detail

/// Parses the JSONL corpus. Dangling links are dropped or kept per `policy`.
inline CorpusStore parse_corpus(std::istream& in,
                                LinkPolicy policy = LinkPolicy::Drop) {
  using nlohmann::json;
  std::vector<Article> articles;
  std::unordered_set<ArticleId> ids;
  std::unordered_set<PassageId> passage_ids;
  std::string line;
  std::size_t lineno = 0;
  PassageId ordinal = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
    }
    const auto& jid = detail::require(rec, "id", lineno);
    const auto& jtitle = detail::require(rec, "title", lineno);
    const auto& jsections = detail::require(rec, "sections", lineno);
    if (!jid.is_number_integer()) throw ParseError(lineno, "\"id\" must be an integer");
    if (!jtitle.is_string()) throw ParseError(lineno, "\"title\" must be a string");
    if (!jsections.is_array() || jsections.empty())
      throw ParseError(lineno, "\"sections\" must be a non-empty array");

    Article art;
    art.id = jid.get<ArticleId>();
    art.title = jtitle.get<std::string>();
    if (!ids.insert(art.id).second)
      throw ParseError(lineno, "duplicate article id " + std::to_string(art.id));

    for (const auto& jsec : jsections) {
      Section sec;
      const auto& jhead = detail::require(jsec, "heading", lineno);
      const auto& jpass = detail::require(jsec, "passages", lineno);
      if (!jhead.is_string()) throw ParseError(lineno, "\"heading\" must be a string");
      if (!jpass.is_array()) throw ParseError(lineno, "\"passages\" must be an array");
      sec.heading = jhead.get<std::string>();
      for (const auto& jp : jpass) {
        const auto& jtext = detail::require(jp, "text", lineno);
        if (!jtext.is_string()) throw ParseError(lineno, "\"text\" must be a string");
        Passage p;
        p.id = ordinal++;
        if (auto it = jp.find("id"); it != jp.end()) {
          if (!it->is_number_integer())
            throw ParseError(lineno, "passage \"id\" must be an integer");
          p.id = it->get<PassageId>();
        }
        if (!passage_ids.insert(p.id).second)
          throw ParseError(lineno, "duplicate passage id " + std::to_string(p.id));
        if (auto it = jp.find("links"); it != jp.end()) {
          if (!it->is_array()) throw ParseError(lineno, "\"links\" must be an array");
          for (const auto& l : *it) {
            if (!l.is_number_integer())
              throw ParseError(lineno, "link targets must be integers");
            p.outgoing_links.push_back(l.get<ArticleId>());
          }
        }
        p.sentences = split_sentences(jtext.get<std::string>());
        if (!p.sentences.empty()) sec.passages.push_back(std::move(p));
      }
      // The lead section is kept even when empty so index 0 stays the lead.
      if (!sec.passages.empty() || art.sections.empty())
        art.sections.push_back(std::move(sec));
    }
    articles.push_back(std::move(art));
  }

  if (policy == LinkPolicy::Drop) {
    for (auto& art : articles)
      for (auto& sec : art.sections)
        for (auto& p : sec.passages)
          std::erase_if(p.outgoing_links,
                        [&](ArticleId t) { return !ids.contains(t); });
  }
  return CorpusStore(std::move(articles));
}

inline CorpusStore load_corpus(const std::filesystem::path& path,
                               LinkPolicy policy = LinkPolicy::Drop) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus " + path.string());
  return parse_corpus(in, policy);
}

/// Canonical JSONL. Sentences are joined by newlines so re-splitting yields
/// the same sentences.
inline std::string serialize_corpus(const CorpusStore& store) {
  using nlohmann::json;
  std::string out;
  for (const auto& art : store.articles()) {
    json jsections = json::array();
    for (const auto& sec : art.sections) {
      json jpass = json::array();
      for (const auto& p : sec.passages) {
        std::string text;
        for (std::size_t i = 0; i < p.sentences.size(); ++i) {
          if (i) text += '\n';
          text += p.sentences[i].text;
        }
        jpass.push_back({{"id", p.id}, {"text", text}, {"links", p.outgoing_links}});
      }
      jsections.push_back({{"heading", sec.heading}, {"passages", jpass}});
    }
    json rec = {{"id", art.id}, {"title", art.title}, {"sections", jsections}};
    out += rec.dump();
    out += '\n';
  }
  return out;
}

}  // namespace twotower
