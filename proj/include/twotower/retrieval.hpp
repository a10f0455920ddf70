#pragma once

// Exact dense top-k over precomputed document embeddings, and an Okapi BM25
// inverted index.
//
// Dense index file layout (little-endian):
//   8 bytes  magic "TTWRDIDX"
//   u64 N, u64 k, u64 encoder fingerprint
//   N*k f32 row-major embeddings
//   N i64 candidate ids

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "twotower/common.hpp"
#include "twotower/encoder.hpp"
#include "twotower/model.hpp"
#include "twotower/vocab.hpp"

namespace twotower {

using CandidateId = std::int64_t;

struct ScoredId {
  CandidateId id = 0;
  double score = 0;
  bool operator==(const ScoredId&) const = default;
};

/// Descending score, ascending id on ties.
inline bool ranks_before(const ScoredId& a, const ScoredId& b) {
  return a.score != b.score ? a.score > b.score : a.id < b.id;
}

struct RankedList {
  std::vector<ScoredId> items;
  bool truncated_k = false;  // requested k exceeded the candidate count

  std::size_t size() const { return items.size(); }
  bool operator==(const RankedList&) const = default;
};

/// Keeps the k best of `all` under ranks_before, sorted.
inline RankedList select_topk(std::vector<ScoredId> all, std::size_t k) {
  if (k == 0) throw ConfigError("top-k: k must be >= 1");
  RankedList out;
  out.truncated_k = k > all.size();
  const std::size_t n = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                    ranks_before);
  all.resize(n);
  out.items = std::move(all);
  return out;
}

// ---------------------------------------------------------------------------
// Dense

struct DenseIndex {
  std::size_t dim = 0;
  std::vector<CandidateId> ids;
  std::vector<float> rows;  // [N, dim]
  std::uint64_t fingerprint = 0;
  std::size_t truncated_inputs = 0;

  std::size_t size() const { return ids.size(); }
  std::span<const float> row(std::size_t i) const { return {rows.data() + i * dim, dim}; }
};

/// Embeds every candidate with the doc tower. Inputs longer than the tower's
/// max length are truncated and counted.
template <class T>
DenseIndex build_dense_index(const TwoTower<T>& model, std::vector<TokenSeq> candidates,
                             std::span<const CandidateId> ids = {}, std::size_t threads = 1) {
  if (candidates.empty()) throw ConfigError("build_dense_index: no candidates");
  if (!ids.empty() && ids.size() != candidates.size())
    throw ConfigError("build_dense_index: id table size mismatch");
  const auto& P = model.doc();
  DenseIndex idx;
  idx.dim = P.config.emb_dim;
  idx.fingerprint = fingerprint(model);
  for (auto& c : candidates)
    if (c.ids.size() > P.max_len) {
      c.ids.resize(P.max_len);
      c.truncated = true;
      ++idx.truncated_inputs;
    }
  const Matrix<T> emb = encode(P, std::span<const TokenSeq>(candidates), threads);
  idx.rows.resize(emb.data.size());
  std::transform(emb.data.begin(), emb.data.end(), idx.rows.begin(),
                 [](T v) { return static_cast<float>(v); });
  idx.ids.resize(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    idx.ids[i] = ids.empty() ? static_cast<CandidateId>(i) : ids[i];
  return idx;
}

inline double dense_score(std::span<const float> q, std::span<const float> row) {
  double s = 0;
  for (std::size_t c = 0; c < q.size(); ++c) s += static_cast<double>(q[c]) * static_cast<double>(row[c]);
  return s;
}

/// Exact maximum inner product search with a bounded heap.
inline RankedList dense_topk(const DenseIndex& index, std::span<const float> q, std::size_t k) {
  if (k == 0) throw ConfigError("dense_topk: k must be >= 1");
  if (q.size() != index.dim)
    throw Error("dense_topk: query dimension " + std::to_string(q.size()) + " vs index " +
                std::to_string(index.dim));
  const std::size_t n = index.size();
  const std::size_t keep = std::min(k, n);
  // Heap top is the worst kept item.
  std::vector<ScoredId> heap;
  heap.reserve(keep + 1);
  for (std::size_t i = 0; i < n; ++i) {
    ScoredId s{index.ids[i], dense_score(q, index.row(i))};
    if (heap.size() < keep) {
      heap.push_back(s);
      std::push_heap(heap.begin(), heap.end(), ranks_before);
    } else if (ranks_before(s, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), ranks_before);
      heap.back() = s;
      std::push_heap(heap.begin(), heap.end(), ranks_before);
    }
  }
  std::sort_heap(heap.begin(), heap.end(), ranks_before);
  RankedList out;
  out.items = std::move(heap);
  out.truncated_k = k > n;
  return out;
}

inline constexpr char kDenseIndexMagic[8] = {'T', 'T', 'W', 'R', 'D', 'I', 'D', 'X'};

inline std::string dense_index_bytes(const DenseIndex& idx) {
  std::string out(kDenseIndexMagic, 8);
  auto put = [&](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  const std::uint64_t hdr[3] = {idx.size(), idx.dim, idx.fingerprint};
  put(hdr, sizeof hdr);
  put(idx.rows.data(), idx.rows.size() * sizeof(float));
  put(idx.ids.data(), idx.ids.size() * sizeof(CandidateId));
  return out;
}

inline DenseIndex parse_dense_index(std::string_view bytes) {
  if (bytes.size() < 32 || bytes.substr(0, 8) != std::string_view(kDenseIndexMagic, 8))
    throw Error("not a dense index file");
  std::uint64_t hdr[3];
  std::memcpy(hdr, bytes.data() + 8, sizeof hdr);
  DenseIndex idx;
  idx.dim = hdr[1];
  idx.fingerprint = hdr[2];
  const std::size_t n = hdr[0];
  const std::size_t need = 32 + n * idx.dim * sizeof(float) + n * sizeof(CandidateId);
  if (bytes.size() != need) throw Error("dense index file has wrong size");
  idx.rows.resize(n * idx.dim);
  idx.ids.resize(n);
  std::memcpy(idx.rows.data(), bytes.data() + 32, idx.rows.size() * sizeof(float));
  std::memcpy(idx.ids.data(), bytes.data() + 32 + idx.rows.size() * sizeof(float),
              n * sizeof(CandidateId));
  return idx;
}

inline void save_dense_index(const DenseIndex& idx, const std::filesystem::path& path) {
  write_file_atomic(path, dense_index_bytes(idx));
}

inline DenseIndex load_dense_index(const std::filesystem::path& path) {
  return parse_dense_index(read_file(path));
}

// ---------------------------------------------------------------------------
// BM25

struct BM25Params {
  double k1 = 1.2;
  double b = 0.75;

  void validate() const {
    if (!(k1 >= 0)) throw ConfigError("bm25 k1 must be >= 0");
    if (!(b >= 0 && b <= 1)) throw ConfigError("bm25 b must be in [0,1]");
  }
};

struct Posting {
  std::size_t doc = 0;  // row in the index
  std::uint32_t tf = 0;
};

/// Postings over non-special token ids. Candidate ids are positional unless
/// an id table is given.
struct InvertedIndex {
  std::map<TokenId, std::vector<Posting>> postings;
  std::vector<std::size_t> doc_lengths;
  std::vector<CandidateId> ids;
  double avg_doc_length = 0;

  std::size_t size() const { return doc_lengths.size(); }
  std::size_t df(TokenId t) const {
    auto it = postings.find(t);
    return it == postings.end() ? 0 : it->second.size();
  }
};

inline InvertedIndex build_inverted_index(std::span<const std::vector<TokenId>> docs,
                                          std::span<const CandidateId> ids = {}) {
  if (!ids.empty() && ids.size() != docs.size())
    throw ConfigError("build_inverted_index: id table size mismatch");
  InvertedIndex idx;
  idx.doc_lengths.resize(docs.size());
  idx.ids.resize(docs.size());
  double total = 0;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    idx.ids[d] = ids.empty() ? static_cast<CandidateId>(d) : ids[d];
    std::map<TokenId, std::uint32_t> tf;
    for (TokenId t : docs[d])
      if (!is_special(t)) ++tf[t];
    std::size_t len = 0;
    for (const auto& [t, c] : tf) {
      idx.postings[t].push_back({d, c});
      len += c;
    }
    idx.doc_lengths[d] = len;
    total += static_cast<double>(len);
  }
  idx.avg_doc_length = docs.empty() ? 0.0 : total / static_cast<double>(docs.size());
  return idx;
}

inline double bm25_idf(std::size_t n, std::size_t df) {
  return std::log(1.0 + (static_cast<double>(n) - static_cast<double>(df) + 0.5) /
                            (static_cast<double>(df) + 0.5));
}

inline double bm25_term(double idf, double tf, double len, double avg_len, const BM25Params& p) {
  const double norm = avg_len > 0 ? len / avg_len : 0.0;
  return idf * tf * (p.k1 + 1) / (tf + p.k1 * (1 - p.b + p.b * norm));
}

inline std::vector<TokenId> unique_terms(std::span<const TokenId> query) {
  std::set<TokenId> s;
  for (TokenId t : query)
    if (!is_special(t)) s.insert(t);
  return {s.begin(), s.end()};
}

/// BM25 of one indexed document (by row) against the deduplicated query.
inline double bm25_score(std::span<const TokenId> query, std::size_t row, const InvertedIndex& idx,
                         const BM25Params& p = {}) {
  if (row >= idx.size()) throw Error("bm25_score: document row out of range");
  double s = 0;
  for (TokenId t : unique_terms(query)) {
    auto it = idx.postings.find(t);
    if (it == idx.postings.end()) continue;
    const auto& pl = it->second;
    auto pos = std::lower_bound(pl.begin(), pl.end(), row,
                                [](const Posting& a, std::size_t r) { return a.doc < r; });
    if (pos == pl.end() || pos->doc != row) continue;
    s += bm25_term(bm25_idf(idx.size(), pl.size()), pos->tf,
                   static_cast<double>(idx.doc_lengths[row]), idx.avg_doc_length, p);
  }
  return s;
}

/// Term-at-a-time accumulation over the query's postings. Documents without
/// any matching term score 0 and fill remaining slots by ascending id.
inline RankedList bm25_topk(const InvertedIndex& idx, std::span<const TokenId> query, std::size_t k,
                            const BM25Params& p = {}) {
  if (k == 0) throw ConfigError("bm25_topk: k must be >= 1");
  std::vector<double> acc(idx.size(), 0.0);
  std::vector<char> hit(idx.size(), 0);
  for (TokenId t : unique_terms(query)) {
    auto it = idx.postings.find(t);
    if (it == idx.postings.end()) continue;
    const double idf = bm25_idf(idx.size(), it->second.size());
    for (const auto& post : it->second) {
      acc[post.doc] += bm25_term(idf, post.tf, static_cast<double>(idx.doc_lengths[post.doc]),
                                 idx.avg_doc_length, p);
      hit[post.doc] = 1;
    }
  }
  std::vector<ScoredId> scored, rest;
  for (std::size_t d = 0; d < idx.size(); ++d)
    (hit[d] ? scored : rest).push_back({idx.ids[d], acc[d]});
  RankedList out = select_topk(std::move(scored), std::max<std::size_t>(k, 1));
  out.truncated_k = k > idx.size();
  if (out.items.size() < k) {
    std::sort(rest.begin(), rest.end(), ranks_before);
    for (const auto& r : rest) {
      if (out.items.size() == k) break;
      out.items.push_back(r);
    }
    std::stable_sort(out.items.begin(), out.items.end(), ranks_before);
  }
  return out;
}

}  // namespace twotower
