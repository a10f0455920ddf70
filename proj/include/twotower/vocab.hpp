#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "twotower/common.hpp"
#include "twotower/corpus.hpp"

namespace twotower {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr std::size_t kNumSpecial = 5;

inline bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(kNumSpecial); }

struct TokenSeq {
  std::vector<TokenId> ids;
  bool truncated = false;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSeq&) const = default;
};

/// Dense token ids. Specials occupy 0..4 as PAD, UNK, CLS, SEP, MASK;
/// continuation pieces carry a "##" prefix.
class Vocabulary {
 public:
  Vocabulary() {
    for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) add(s);
  }

  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i < kNumSpecial) {
        if (tokens[i] != id_to_token_[i])
          throw Error("vocabulary must start with the special tokens in order");
        continue;
      }
      add(tokens[i]);
    }
  }

  TokenId add(const std::string& token) {
    auto [it, inserted] =
        token_to_id_.emplace(token, static_cast<TokenId>(id_to_token_.size()));
    if (inserted) {
      id_to_token_.push_back(token);
      max_piece_ = std::max(max_piece_, token.size());
    }
    return it->second;
  }

  std::size_t size() const { return id_to_token_.size(); }
  bool contains(std::string_view t) const { return token_to_id_.contains(std::string(t)); }

  TokenId id(std::string_view t) const {
    auto it = token_to_id_.find(std::string(t));
    return it == token_to_id_.end() ? kUnk : it->second;
  }
  std::optional<TokenId> find(std::string_view t) const {
    auto it = token_to_id_.find(std::string(t));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }
  std::size_t max_piece_length() const { return max_piece_; }

  std::string to_text() const {
    std::string out;
    for (const auto& t : id_to_token_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  static Vocabulary from_text(std::string_view text) {
    auto lines = split_lines(text);
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return Vocabulary(lines);
  }

  bool operator==(const Vocabulary& o) const { return id_to_token_ == o.id_to_token_; }

 private:
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::size_t max_piece_ = 0;
};

// ---------------------------------------------------------------------------
// Normalization and pre-tokenization

inline bool is_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 128 && std::ispunct(u);
}

/// Lowercases ASCII and collapses whitespace runs to one space.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    if (detail::is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

/// Whitespace split of normalized text; ASCII punctuation forms its own word.
inline std::vector<std::string> pre_tokenize(std::string_view text) {
  std::vector<std::string> words;
  const auto norm = normalize_text(text);
  std::string cur;
  for (char c : norm) {
    if (c == ' ') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else if (is_punct(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
      words.emplace_back(1, c);
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

namespace detail {

/// Length in bytes of the UTF-8 code point starting at s[i].
inline std::size_t utf8_len(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  std::size_t n = 1;
  if (c >= 0xF0) n = 4;
  else if (c >= 0xE0) n = 3;
  else if (c >= 0xC0) n = 2;
  return std::min(n, s.size() - i);
}

}  // namespace detail

/// Greedy longest-match-first segmentation of one word. A word with no
/// complete segmentation becomes a single UNK.
inline void wordpiece(std::string_view word, const Vocabulary& vocab,
                      std::vector<TokenId>& out) {
  const std::size_t first = out.size();
  std::size_t start = 0;
  while (start < word.size()) {
    std::size_t end = std::min(word.size(), start + vocab.max_piece_length());
    std::optional<TokenId> match;
    std::size_t match_end = 0;
    while (end > start) {
      std::string piece = start > 0 ? "##" : "";
      piece.append(word.substr(start, end - start));
      if (auto id = vocab.find(piece)) {
        match = id;
        match_end = end;
        break;
      }
      // step back one code point
      std::size_t prev = start;
      while (prev < end) {
        std::size_t next = prev + detail::utf8_len(word, prev);
        if (next >= end) break;
        prev = next;
      }
      end = prev;
    }
    if (!match) {
      out.resize(first);
      out.push_back(kUnk);
      return;
    }
    out.push_back(*match);
    start = match_end;
  }
}

inline TokenSeq tokenize(std::string_view text, const Vocabulary& vocab,
                         std::size_t max_len = SIZE_MAX) {
  TokenSeq seq;
  for (const auto& w : pre_tokenize(text)) wordpiece(w, vocab, seq.ids);
  if (seq.ids.size() > max_len) {
    seq.ids.resize(max_len);
    seq.truncated = true;
  }
  return seq;
}

/// Induces a vocabulary: specials, every character piece seen (word-initial
/// and "##" continuation forms), then whole words, word prefixes and "##"
/// suffixes of length >= 2 ranked by corpus frequency (ties by string).
inline Vocabulary build_vocab(const CorpusStore& corpus, std::size_t max_size,
                              std::size_t min_freq = 1) {
  if (corpus.empty()) throw ConfigError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> word_freq;
  auto count_text = [&](std::string_view text) {
    for (auto& w : pre_tokenize(text)) ++word_freq[w];
  };
  for (const auto& art : corpus.articles()) {
    count_text(art.title);
    for (const auto& sec : art.sections)
      for (const auto& p : sec.passages)
        for (const auto& s : p.sentences) count_text(s.text);
  }

  std::map<std::string, std::size_t> chars;
  std::map<std::string, std::size_t> pieces;
  for (const auto& [w, f] : word_freq) {
    std::vector<std::size_t> cuts;  // code point boundaries
    for (std::size_t i = 0; i < w.size(); i += detail::utf8_len(w, i)) cuts.push_back(i);
    cuts.push_back(w.size());
    const std::size_t ncp = cuts.size() - 1;
    for (std::size_t c = 0; c < ncp; ++c) {
      std::string ch = w.substr(cuts[c], cuts[c + 1] - cuts[c]);
      chars[c == 0 ? ch : "##" + ch] += f;
    }
    // whole word and proper prefixes
    for (std::size_t len = 2; len <= ncp; ++len) pieces[w.substr(0, cuts[len])] += f;
    // proper suffixes as continuation pieces
    for (std::size_t from = 1; from + 2 <= ncp; ++from)
      pieces["##" + w.substr(cuts[from])] += f;
  }

  if (max_size < kNumSpecial + chars.size())
    throw ConfigError("build_vocab: max_size " + std::to_string(max_size) +
                      " cannot hold " + std::to_string(kNumSpecial) +
                      " specials and " + std::to_string(chars.size()) +
                      " character pieces");

  Vocabulary vocab;
  for (const auto& [c, f] : chars) vocab.add(c);

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [p, f] : pieces)
    if (f >= min_freq && !vocab.contains(p)) ranked.emplace_back(p, f);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  for (const auto& [p, f] : ranked) {
    if (vocab.size() >= max_size) break;
    vocab.add(p);
  }
  return vocab;
}

/// Fills Sentence::token_ids for every sentence in the store.
inline void tokenize_corpus(CorpusStore& corpus, const Vocabulary& vocab) {
  for (auto& art : corpus.mutable_articles())
    for (auto& sec : art.sections)
      for (auto& p : sec.passages)
        for (auto& s : p.sentences) s.token_ids = tokenize(s.text, vocab).ids;
}

// ---------------------------------------------------------------------------
// Encoder inputs

/// [CLS] text, truncated to max_len.
inline TokenSeq query_input(std::span<const TokenId> text, std::size_t max_len) {
  TokenSeq seq;
  seq.ids.push_back(kCls);
  const std::size_t room = max_len > 0 ? max_len - 1 : 0;
  const std::size_t take = std::min(room, text.size());
  seq.ids.insert(seq.ids.end(), text.begin(), text.begin() + static_cast<std::ptrdiff_t>(take));
  seq.truncated = take < text.size();
  return seq;
}

/// [CLS] first [SEP] second, truncated to max_len. The body is cut first; the
/// SEP is always kept.
inline TokenSeq pair_input(std::span<const TokenId> first,
                           std::span<const TokenId> second, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("pair_input: max_len must be >= 2");
  TokenSeq seq;
  const std::size_t room = max_len - 2;
  const std::size_t take_first = std::min(room, first.size());
  const std::size_t take_second = std::min(room - take_first, second.size());
  seq.ids.reserve(2 + take_first + take_second);
  seq.ids.push_back(kCls);
  seq.ids.insert(seq.ids.end(), first.begin(), first.begin() + static_cast<std::ptrdiff_t>(take_first));
  seq.ids.push_back(kSep);
  seq.ids.insert(seq.ids.end(), second.begin(), second.begin() + static_cast<std::ptrdiff_t>(take_second));
  seq.truncated = take_first < first.size() || take_second < second.size();
  return seq;
}

/// Concatenated token ids of a passage's sentences, optionally skipping one.
inline std::vector<TokenId> passage_tokens(const Passage& p,
                                           std::optional<std::size_t> skip = std::nullopt) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < p.sentences.size(); ++i) {
    if (skip && *skip == i) continue;
    out.insert(out.end(), p.sentences[i].token_ids.begin(), p.sentences[i].token_ids.end());
  }
  return out;
}

}  // namespace twotower
