#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "twotower/retrieval.hpp"

using namespace twotower;

namespace {

DenseIndex make_index(std::vector<std::vector<float>> rows) {
  DenseIndex idx;
  idx.dim = rows.front().size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    idx.ids.push_back(static_cast<CandidateId>(i));
    idx.rows.insert(idx.rows.end(), rows[i].begin(), rows[i].end());
  }
  return idx;
}

DenseIndex random_index(std::size_t n, std::size_t dim, Rng& rng, bool quantize) {
  DenseIndex idx;
  idx.dim = dim;
  for (std::size_t i = 0; i < n; ++i) {
    idx.ids.push_back(static_cast<CandidateId>(i));
    for (std::size_t c = 0; c < dim; ++c)
      idx.rows.push_back(quantize ? static_cast<float>(rng.uniform_index(3)) : static_cast<float>(rng.normal()));
  }
  return idx;
}

/// Full sort of every candidate.
std::vector<ScoredId> brute_force(const DenseIndex& idx, const std::vector<float>& q, std::size_t k) {
  std::vector<ScoredId> all;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    double s = 0;
    for (std::size_t c = 0; c < idx.dim; ++c) s += double(q[c]) * double(idx.rows[i * idx.dim + c]);
    all.push_back({idx.ids[i], s});
  }
  std::sort(all.begin(), all.end(), [](const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

/// Okapi BM25 straight from term counts.
double bm25_oracle(const std::vector<std::vector<TokenId>>& docs, std::size_t d,
                   const std::vector<TokenId>& query, double k1, double b) {
  double avg = 0;
  for (const auto& x : docs) avg += double(x.size());
  avg /= double(docs.size());
  std::set<TokenId> terms(query.begin(), query.end());
  double s = 0;
  for (TokenId t : terms) {
    double df = 0;
    for (const auto& x : docs) df += std::count(x.begin(), x.end(), t) > 0;
    const double tf = double(std::count(docs[d].begin(), docs[d].end(), t));
    if (tf == 0) continue;
    const double N = double(docs.size());
    const double idf = std::log(1 + (N - df + 0.5) / (df + 0.5));
    s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * double(docs[d].size()) / avg));
  }
  return s;
}

std::vector<std::vector<TokenId>> random_docs(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::vector<TokenId>> docs(n);
  for (auto& d : docs) {
    const std::size_t len = 1 + rng.uniform_index(12);
    for (std::size_t i = 0; i < len; ++i)
      d.push_back(static_cast<TokenId>(kNumSpecial + rng.uniform_index(vocab)));
  }
  return docs;
}

}  // namespace

TEST(DenseTopk, WorkedExample) {
  const auto idx = make_index({{0, 1}, {2, 0}, {1, 0}});
  const std::vector<float> q = {1, 0};
  const auto r = dense_topk(idx, q, 2);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r.items[0], (ScoredId{1, 2.0}));
  EXPECT_EQ(r.items[1], (ScoredId{2, 1.0}));
  EXPECT_FALSE(r.truncated_k);
}

TEST(DenseTopk, ZeroQueryRanksByAscendingId) {
  const auto idx = make_index({{0, 1}, {2, 0}, {1, 0}, {5, 5}});
  const std::vector<float> q = {0, 0};
  const auto r = dense_topk(idx, q, 3);
  ASSERT_EQ(r.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.items[i].id, CandidateId(i));
    EXPECT_EQ(r.items[i].score, 0.0);
  }
}

TEST(DenseTopk, KLargerThanIndexReturnsEverythingAndFlags) {
  const auto idx = make_index({{1}, {3}});
  const std::vector<float> q = {1};
  const auto r = dense_topk(idx, q, 10);
  EXPECT_EQ(r.size(), 2u);
  EXPECT_TRUE(r.truncated_k);
  EXPECT_EQ(r.items[0].id, 1);
}

TEST(DenseTopk, RejectsBadInput) {
  const auto idx = make_index({{1, 2}});
  const std::vector<float> q = {1};
  EXPECT_THROW(dense_topk(idx, q, 1), Error);
  const std::vector<float> q2 = {1, 1};
  EXPECT_THROW(dense_topk(idx, q2, 0), ConfigError);
}

TEST(DenseTopk, MatchesBruteForceWithAndWithoutTies) {
  Rng rng(17);
  for (int inst = 0; inst < 40; ++inst) {
    const bool quantize = inst % 2 == 0;  // many exact ties
    const auto idx = random_index(300, 4, rng, quantize);
    std::vector<float> q(4);
    for (auto& v : q) v = quantize ? float(rng.uniform_index(3)) : float(rng.normal());
    for (std::size_t k : {1, 7, 50, 300}) EXPECT_EQ(dense_topk(idx, q, k).items, brute_force(idx, q, k));
  }
}

TEST(DenseTopk, PrefixMonotonicInK) {
  Rng rng(3);
  const auto idx = random_index(200, 6, rng, true);
  const std::vector<float> q = {1, 0, 2, 1, 0, 1};
  const auto big = dense_topk(idx, q, 100).items;
  for (std::size_t k = 1; k < 100; k += 9) {
    const auto small = dense_topk(idx, q, k).items;
    EXPECT_TRUE(std::equal(small.begin(), small.end(), big.begin()));
  }
}

TEST(DenseTopk, PositiveQueryScalingKeepsOrder) {
  Rng rng(5);
  const auto idx = random_index(150, 3, rng, false);
  const std::vector<float> q = {0.5f, -1.0f, 2.0f};
  std::vector<float> q4 = q;
  for (auto& v : q4) v *= 4;  // power of two keeps float scores exact
  const auto a = dense_topk(idx, q, 20).items, b = dense_topk(idx, q4, 20).items;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].id, b[i].id);
}

TEST(DenseIndex, BuildUsesDocTowerAndTruncates) {
  EncoderConfig c;
  c.arch = Arch::BowMlp;
  c.hidden_dim = 8;
  c.emb_dim = 4;
  c.vocab_size = 12;
  c.query_max_len = 4;
  c.doc_max_len = 5;
  const auto m = init_two_tower<float>(c, 2);
  std::vector<TokenSeq> cands(3);
  cands[0].ids = {kCls, 6, 7};
  cands[1].ids = {kCls, 8, 9, 10, 11, 6, 7};
  cands[2].ids = {kCls, 5};
  const std::vector<CandidateId> ids = {10, 20, 30};
  const auto idx = build_dense_index(m, cands, ids);
  EXPECT_EQ(idx.truncated_inputs, 1u);
  EXPECT_EQ(idx.ids, ids);
  EXPECT_EQ(idx.fingerprint, fingerprint(m));
  cands[1].ids.resize(5);
  const auto direct = encode(m.doc(), std::span<const TokenSeq>(cands));
  for (std::size_t i = 0; i < direct.data.size(); ++i) EXPECT_EQ(idx.rows[i], direct.data[i]);
}

TEST(DenseIndex, FileRoundTripAndCorruption) {
  Rng rng(1);
  auto idx = random_index(7, 3, rng, false);
  idx.ids = {9, 8, 7, 6, 5, 4, 3};
  idx.fingerprint = 0xabcdef;
  const auto path = std::filesystem::temp_directory_path() / "twotower_index_test.bin";
  save_dense_index(idx, path);
  const auto back = load_dense_index(path);
  EXPECT_EQ(back.dim, idx.dim);
  EXPECT_EQ(back.ids, idx.ids);
  EXPECT_EQ(back.rows, idx.rows);
  EXPECT_EQ(back.fingerprint, idx.fingerprint);
  std::filesystem::remove(path);
  auto bytes = dense_index_bytes(idx);
  EXPECT_THROW(parse_dense_index(bytes.substr(0, bytes.size() - 1)), Error);
  bytes[0] = 'X';
  EXPECT_THROW(parse_dense_index(bytes), Error);
}

TEST(BM25, TwoDocumentExampleIsLn2) {
  // d1 = "a b", d2 = "b b"; a = 5, b = 6
  const std::vector<std::vector<TokenId>> docs = {{5, 6}, {6, 6}};
  const auto idx = build_inverted_index(docs);
  const std::vector<TokenId> q = {5};
  EXPECT_NEAR(bm25_score(q, 0, idx), std::log(2.0), 1e-12);
  EXPECT_EQ(bm25_score(q, 1, idx), 0.0);
  const auto r = bm25_topk(idx, q, 2);
  EXPECT_EQ(r.items[0].id, 0);
  EXPECT_NEAR(r.items[0].score, std::log(2.0), 1e-12);
  EXPECT_EQ(r.items[1], (ScoredId{1, 0.0}));
}

TEST(BM25, RepeatedQueryTermsCountOnce) {
  const std::vector<std::vector<TokenId>> docs = {{5, 6}, {6, 6}, {7}};
  const auto idx = build_inverted_index(docs);
  const std::vector<TokenId> q1 = {5, 6}, q2 = {5, 5, 6, 6, 6};
  for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(bm25_score(q1, d, idx), bm25_score(q2, d, idx));
}

TEST(BM25, SpecialTokensAreIgnored) {
  const std::vector<std::vector<TokenId>> docs = {{kCls, 5, kSep, 6}, {6, 6}};
  const auto idx = build_inverted_index(docs);
  EXPECT_EQ(idx.doc_lengths[0], 2u);
  const std::vector<TokenId> q = {kCls, 5};
  EXPECT_NEAR(bm25_score(q, 0, idx), std::log(2.0), 1e-12);
}

TEST(BM25, MatchesBruteForceOracle) {
  Rng rng(23);
  for (int c = 0; c < 20; ++c) {
    const auto docs = random_docs(5 + rng.uniform_index(30), 8, rng);
    const auto idx = build_inverted_index(docs);
    std::vector<TokenId> q;
    for (std::size_t i = 0, n = 1 + rng.uniform_index(4); i < n; ++i)
      q.push_back(static_cast<TokenId>(kNumSpecial + rng.uniform_index(10)));
    BM25Params p;
    if (c % 3 == 1) p = {2.0, 0.3};
    if (c % 3 == 2) p = {0.5, 1.0};
    for (std::size_t d = 0; d < docs.size(); ++d) {
      const double want = bm25_oracle(docs, d, q, p.k1, p.b);
      EXPECT_NEAR(bm25_score(q, d, idx, p), want, 1e-12);
    }
    const auto r = bm25_topk(idx, q, docs.size(), p);
    for (const auto& it : r.items)
      EXPECT_NEAR(it.score, bm25_oracle(docs, std::size_t(it.id), q, p.k1, p.b), 1e-12);
  }
}

TEST(BM25, TopkMatchesSortedOracleAndIsMonotonic) {
  Rng rng(31);
  for (int c = 0; c < 20; ++c) {
    const auto docs = random_docs(60, 6, rng);
    const auto idx = build_inverted_index(docs);
    const std::vector<TokenId> q = {static_cast<TokenId>(kNumSpecial + rng.uniform_index(9)),
                                    static_cast<TokenId>(kNumSpecial + rng.uniform_index(9))};
    std::vector<ScoredId> all;
    for (std::size_t d = 0; d < docs.size(); ++d) all.push_back({CandidateId(d), bm25_score(q, d, idx)});
    std::sort(all.begin(), all.end(), ranks_before);
    for (std::size_t k : {1, 5, 20, 60}) {
      const auto got = bm25_topk(idx, q, k).items;
      ASSERT_EQ(got.size(), k);
      EXPECT_TRUE(std::equal(got.begin(), got.end(), all.begin()));
    }
  }
}

TEST(BM25, KBeyondCorpusFillsZeroScoresByAscendingId) {
  const std::vector<std::vector<TokenId>> docs = {{7}, {5}, {8}, {5, 5}};
  const std::vector<CandidateId> ids = {40, 10, 30, 20};
  const auto idx = build_inverted_index(docs, ids);
  const std::vector<TokenId> q = {5};
  const auto r = bm25_topk(idx, q, 10);
  EXPECT_TRUE(r.truncated_k);
  ASSERT_EQ(r.size(), 4u);
  EXPECT_GT(r.items[1].score, 0.0);
  EXPECT_EQ(r.items[2], (ScoredId{30, 0.0}));
  EXPECT_EQ(r.items[3], (ScoredId{40, 0.0}));
  const std::vector<TokenId> miss = {9};
  const auto none = bm25_topk(idx, miss, 2);
  EXPECT_EQ(none.items[0].id, 10);
  EXPECT_EQ(none.items[1].id, 20);
}

TEST(BM25, ScoresAreNonNegative) {
  Rng rng(41);
  const auto docs = random_docs(50, 4, rng);
  const auto idx = build_inverted_index(docs);
  for (TokenId t = kNumSpecial; t < TokenId(kNumSpecial + 4); ++t) {
    const std::vector<TokenId> q = {t};
    for (std::size_t d = 0; d < docs.size(); ++d) EXPECT_GE(bm25_score(q, d, idx), 0.0);
  }
  EXPECT_THROW((BM25Params{1.2, 1.5}.validate()), ConfigError);
  EXPECT_THROW(bm25_topk(idx, docs[0], 0), ConfigError);
}
