// Acceptance checks 1-9. One PASS/FAIL line per criterion; exit status 0 only
// when every selected criterion passes.

#include <CLI11.hpp>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <set>

#include "test_util.hpp"
#include "twotower/experiment.hpp"

namespace fs = std::filesystem;
using namespace twotower;
using json = nlohmann::json;

namespace {

// Tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr std::size_t kGradCoords = 200;
constexpr double kGradSeconds = 30;
constexpr double kSoftmaxTol = 1e-10;
constexpr std::size_t kSoftmaxInstances = 100;
constexpr std::size_t kOracleInstances = 100;
constexpr std::size_t kOracleCandidates = 1000;
constexpr double kOracleSeconds = 10;
constexpr double kBm25Tol = 1e-12;
constexpr std::size_t kBm25Cases = 20;
constexpr std::size_t kPairsPerTask = 10000;
constexpr double kSigmas = 3;
constexpr double kMinGap = 0.10;
constexpr double kGridSeconds = 30 * 60;
constexpr std::size_t kDistractors = 10000;
constexpr std::size_t kSeeds = 3;

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 2) {
  std::ostringstream s;
  s.precision(prec);
  s << std::fixed << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s.precision(2);
  s << std::scientific << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient check

EncoderConfig grad_config(Arch arch) {
  EncoderConfig c;
  c.arch = arch;
  c.num_layers = 2;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ff_dim = 16;
  c.emb_dim = 8;
  c.vocab_size = 40;
  c.query_max_len = 8;
  c.doc_max_len = 12;
  return c;
}

std::vector<TokenSeq> random_seqs(std::size_t n, std::size_t max_len, std::size_t vocab, Rng& rng) {
  std::vector<TokenSeq> out(n);
  for (auto& s : out) {
    s.ids.push_back(kCls);
    const std::size_t len = 2 + rng.uniform_index(max_len - 1);
    while (s.ids.size() < len) s.ids.push_back(static_cast<TokenId>(kNumSpecial + rng.uniform_index(vocab - kNumSpecial)));
  }
  return out;
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  std::string detail;
  bool ok = true;
  for (Arch arch : {Arch::Transformer, Arch::BowMlp}) {
    const auto cfg = grad_config(arch);
    auto m = init_two_tower<double>(cfg, 101);
    Rng rng(102);
    const auto qs = random_seqs(4, cfg.query_max_len, cfg.vocab_size, rng);
    const auto ds = random_seqs(4, cfg.doc_max_len, cfg.vocab_size, rng);
    auto loss = [&] {
      return in_batch_softmax_loss(encode(m.query(), std::span<const TokenSeq>(qs)),
                                   encode(m.doc(), std::span<const TokenSeq>(ds)))
          .loss;
    };
    const auto out = in_batch_softmax_loss(encode(m.query(), std::span<const TokenSeq>(qs)),
                                           encode(m.doc(), std::span<const TokenSeq>(ds)));
    const auto gq = backward(m.query(), std::span<const TokenSeq>(qs), out.grad_q);
    const auto gd = backward(m.doc(), std::span<const TokenSeq>(ds), out.grad_d);
    const auto rq = test_util::finite_difference_check(m.towers[0].values, gq, kGradCoords / 2, 103, loss);
    const auto rd = test_util::finite_difference_check(m.towers[1].values, gd, kGradCoords / 2, 104, loss);
    const double worst = std::max(rq.max_rel_error, rd.max_rel_error);
    ok = ok && worst < kGradRelTol;
    detail += std::string(arch_name(arch)) + " max rel " + sci(worst) + " over " + std::to_string(kGradCoords) +
              " coords; ";
  }
  const double dt = since(t0);
  ok = ok && dt < kGradSeconds;
  return {ok, detail + fmt(dt) + " s (limit " + fmt(kGradSeconds, 0) + " s)"};
}

// ---------------------------------------------------------------------------
// 2. Softmax equivalence

Outcome softmax_equivalence() {
  Rng rng(201);
  double worst = 0;
  for (std::size_t t = 0; t < kSoftmaxInstances; ++t) {
    Matrix<double> q(8, 16), d(8, 16);
    for (auto& v : q.data) v = rng.normal();
    for (auto& v : d.data) v = rng.normal();
    const auto out = in_batch_softmax_loss(q, d);
    for (std::size_t i = 0; i < 8; ++i)
      worst = std::max(worst, std::abs(out.row_loss[i] - full_softmax_loss<double>(q.row(i), d, i)));
  }
  return {worst <= kSoftmaxTol, std::to_string(kSoftmaxInstances) + " instances of 8x16, max row diff " +
                                    sci(worst) + " (tol " + sci(kSoftmaxTol) + ")"};
}

// ---------------------------------------------------------------------------
// 3. Top-k oracles

std::vector<ScoredId> sorted_oracle(std::vector<ScoredId> all, std::size_t k) {
  std::sort(all.begin(), all.end(), [](const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

Outcome topk_oracles() {
  const auto t0 = Clock::now();
  Rng rng(301);
  std::size_t dense_ok = 0, bm25_ok = 0;
  for (std::size_t t = 0; t < kOracleInstances; ++t) {
    const std::size_t dim = 4 + rng.uniform_index(13);
    const bool quantize = t % 2 == 1;
    DenseIndex idx;
    idx.dim = dim;
    for (std::size_t i = 0; i < kOracleCandidates; ++i) {
      idx.ids.push_back(static_cast<CandidateId>(i));
      for (std::size_t c = 0; c < dim; ++c)
        idx.rows.push_back(quantize ? static_cast<float>(rng.uniform_index(3)) : static_cast<float>(rng.normal()));
    }
    std::vector<float> q(dim);
    for (auto& v : q) v = quantize ? static_cast<float>(rng.uniform_index(3)) : static_cast<float>(rng.normal());
    const std::size_t k = 1 + rng.uniform_index(kOracleCandidates);
    std::vector<ScoredId> all;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double s = 0;
      for (std::size_t c = 0; c < dim; ++c) s += double(q[c]) * double(idx.rows[i * dim + c]);
      all.push_back({idx.ids[i], s});
    }
    dense_ok += dense_topk(idx, q, k).items == sorted_oracle(all, k);

    std::vector<std::vector<TokenId>> docs(kOracleCandidates);
    const std::size_t vocab = 20 + rng.uniform_index(200);
    for (auto& d : docs)
      for (std::size_t i = 0, n = 1 + rng.uniform_index(30); i < n; ++i)
        d.push_back(static_cast<TokenId>(kNumSpecial + rng.uniform_index(vocab)));
    const auto inv = build_inverted_index(docs);
    std::vector<TokenId> query;
    for (std::size_t i = 0, n = 1 + rng.uniform_index(6); i < n; ++i)
      query.push_back(static_cast<TokenId>(kNumSpecial + rng.uniform_index(vocab)));
    std::vector<ScoredId> bm;
    for (std::size_t d = 0; d < docs.size(); ++d) bm.push_back({CandidateId(d), bm25_score(query, d, inv)});
    bm25_ok += bm25_topk(inv, query, k).items == sorted_oracle(bm, k);
  }
  const double dt = since(t0);
  const bool ok = dense_ok == kOracleInstances && bm25_ok == kOracleInstances && dt < kOracleSeconds;
  return {ok, "dense " + std::to_string(dense_ok) + "/" + std::to_string(kOracleInstances) + ", bm25 " +
                  std::to_string(bm25_ok) + "/" + std::to_string(kOracleInstances) + " exact over " +
                  std::to_string(kOracleCandidates) + " candidates; " + fmt(dt) + " s (limit " +
                  fmt(kOracleSeconds, 0) + " s)"};
}

// ---------------------------------------------------------------------------
// 4. BM25 formula

double bm25_by_hand(const std::vector<std::vector<TokenId>>& docs, std::size_t d, const std::vector<TokenId>& query,
                    double k1, double b) {
  double avg = 0;
  for (const auto& x : docs) avg += double(x.size());
  avg /= double(docs.size());
  const std::set<TokenId> terms(query.begin(), query.end());
  double s = 0;
  for (TokenId t : terms) {
    double df = 0;
    for (const auto& x : docs) df += std::count(x.begin(), x.end(), t) > 0;
    const double tf = double(std::count(docs[d].begin(), docs[d].end(), t));
    if (tf == 0) continue;
    const double n = double(docs.size());
    s += std::log(1 + (n - df + 0.5) / (df + 0.5)) * tf * (k1 + 1) /
         (tf + k1 * (1 - b + b * double(docs[d].size()) / avg));
  }
  return s;
}

Outcome bm25_formula() {
  const std::vector<std::vector<TokenId>> two = {{5, 6}, {6, 6}};
  const std::vector<TokenId> qa = {5};
  const double hand = bm25_score(qa, 0, build_inverted_index(two));
  double worst = std::abs(hand - std::log(2.0));
  Rng rng(401);
  for (std::size_t c = 0; c < kBm25Cases; ++c) {
    std::vector<std::vector<TokenId>> docs(3 + rng.uniform_index(40));
    for (auto& d : docs)
      for (std::size_t i = 0, n = 1 + rng.uniform_index(15); i < n; ++i)
        d.push_back(static_cast<TokenId>(kNumSpecial + rng.uniform_index(10)));
    std::vector<TokenId> q;
    for (std::size_t i = 0, n = 1 + rng.uniform_index(5); i < n; ++i)
      q.push_back(static_cast<TokenId>(kNumSpecial + rng.uniform_index(12)));
    const BM25Params p{0.5 + 1.5 * rng.uniform(), rng.uniform()};
    const auto inv = build_inverted_index(docs);
    for (std::size_t d = 0; d < docs.size(); ++d)
      worst = std::max(worst, std::abs(bm25_score(q, d, inv, p) - bm25_by_hand(docs, d, q, p.k1, p.b)));
  }
  return {worst <= kBm25Tol, "ln 2 example " + fmt(hand, 12) + " plus " + std::to_string(kBm25Cases) +
                                 " brute-force cases, max diff " + sci(worst) + " (tol " + sci(kBm25Tol) + ")"};
}

// ---------------------------------------------------------------------------
// 5. Pair invariants

std::vector<TokenId> doc_body(const TokenSeq& doc) {
  auto sep = std::find(doc.ids.begin(), doc.ids.end(), kSep);
  return sep == doc.ids.end() ? std::vector<TokenId>{} : std::vector<TokenId>(sep + 1, doc.ids.end());
}

Outcome pair_invariants(const ExperimentConfig& cfg) {
  CorpusStore corpus = load_corpus(cfg.corpus);
  const auto vocab = build_vocab(corpus, cfg.vocab_size, cfg.vocab_min_freq);
  tokenize_corpus(corpus, vocab);
  const auto titles = tokenize_titles(corpus, vocab);
  const PairShape shape{cfg.transformer.query_max_len, cfg.transformer.doc_max_len};
  std::map<Task, std::size_t> bad;
  for (Task task : {Task::ICT, Task::BFS, Task::WLP}) {
    PairSampler sampler(corpus, titles, TaskMixture::uniform({task}), derive_seed(cfg.seed, task_name(task)), shape);
    for (const auto& p : sampler.take(kPairsPerTask)) {
      const auto qref = corpus.find_passage(p.source.query_passage);
      const auto dref = corpus.find_passage(p.source.doc_passage);
      bool ok = qref && dref && p.task == task;
      if (ok && task == Task::ICT) {
        const auto& passage = corpus.passage(*qref);
        const auto qi = static_cast<std::size_t>(p.source.query_sentence);
        std::vector<TokenId> rest;
        for (std::size_t i = 0; i < passage.sentences.size(); ++i)
          if (i != qi) rest.insert(rest.end(), passage.sentences[i].token_ids.begin(), passage.sentences[i].token_ids.end());
        const auto body = doc_body(p.doc);
        const auto& sentence = passage.sentences.at(qi).token_ids;
        ok = p.source.doc_passage == p.source.query_passage && body.size() <= rest.size() &&
             std::equal(body.begin(), body.end(), rest.begin()) &&
             (sentence.empty() ||
              std::search(body.begin(), body.end(), sentence.begin(), sentence.end()) == body.end() ||
              std::search(rest.begin(), rest.end(), sentence.begin(), sentence.end()) != rest.end());
      } else if (ok && task == Task::BFS) {
        ok = qref->section == 0 && p.source.doc_article == p.source.query_article &&
             p.source.doc_passage != p.source.query_passage;
      } else if (ok && task == Task::WLP) {
        const auto& links = corpus.passage(*dref).outgoing_links;
        const auto& inbound = corpus.inbound(p.source.query_article);
        ok = qref->section == 0 && p.source.doc_article != p.source.query_article &&
             std::find(links.begin(), links.end(), p.source.query_article) != links.end() &&
             std::find(inbound.begin(), inbound.end(), *dref) != inbound.end();
      }
      bad[task] += !ok;
    }
  }
  const std::size_t n = 3 * kPairsPerTask;
  const auto mix = sample_mixture(corpus, vocab, TaskMixture::parse("ICT+BFS+WLP"), n, derive_seed(cfg.seed, "mixture"), shape);
  std::map<Task, double> counts;
  for (const auto& p : mix) counts[p.task] += 1;
  const double expect = double(n) / 3, sigma = std::sqrt(double(n) * (1.0 / 3) * (2.0 / 3));
  double worst_z = 0;
  for (Task t : {Task::ICT, Task::BFS, Task::WLP}) worst_z = std::max(worst_z, std::abs(counts[t] - expect) / sigma);
  const bool ok = bad[Task::ICT] == 0 && bad[Task::BFS] == 0 && bad[Task::WLP] == 0 && worst_z <= kSigmas;
  return {ok, std::to_string(kPairsPerTask) + " pairs per task, violations ICT " + std::to_string(bad[Task::ICT]) +
                  " BFS " + std::to_string(bad[Task::BFS]) + " WLP " + std::to_string(bad[Task::WLP]) +
                  "; mixture of " + std::to_string(n) + " counts ICT " + fmt(counts[Task::ICT], 0) + " BFS " +
                  fmt(counts[Task::BFS], 0) + " WLP " + fmt(counts[Task::WLP], 0) + ", max |z| " + fmt(worst_z) +
                  " (limit " + fmt(kSigmas, 0) + ")"};
}

// ---------------------------------------------------------------------------
// 6-8. Toy grid

struct Grid {
  ExperimentResult result;
  double seconds = 0;
  std::map<std::pair<std::string, std::string>, double> mean_r10;
};

double mean_r10(const Grid& g, const std::string& enc, const std::string& task) {
  auto it = g.mean_r10.find({enc, task});
  if (it == g.mean_r10.end()) throw Error("grid has no cell " + enc + " / " + task);
  return it->second;
}

Grid run_grid(const ExperimentConfig& cfg) {
  Grid g;
  const auto t0 = Clock::now();
  g.result = run_experiment<float>(cfg, [&](const std::string& s) { std::cerr << fmt(since(t0), 1) << "s " << s << std::endl; });
  g.seconds = since(t0);
  for (const auto& row : aggregate(g.result.runs))
    if (row.ratio == cfg.ratios.front()) g.mean_r10[{row.encoder, row.task}] = row.recall.at(10);
  return g;
}

std::string pct(double f) { return percent(f); }

Outcome toy_ordering(const Grid& g) {
  const double none = mean_r10(g, "Transformer", kNoPretraining), mlm = mean_r10(g, "Transformer", kMlm),
               ict = mean_r10(g, "Transformer", "ICT+BFS+WLP");
  const bool ok = ict > mlm && mlm >= none && ict - none >= kMinGap && g.seconds < kGridSeconds;
  return {ok, "mean R@10 over " + std::to_string(kSeeds) + " seeds: ICT+BFS+WLP " + pct(ict) + ", MLM " + pct(mlm) +
                  ", None " + pct(none) + "; gap " + pct(ict - none) + " pts (min " + pct(kMinGap) + "); grid " +
                  fmt(g.seconds / 60, 1) + " min (limit " + fmt(kGridSeconds / 60, 0) + ")"};
}

Outcome encoder_gain(const Grid& g) {
  const double t_gain = mean_r10(g, "Transformer", "ICT+BFS+WLP") - mean_r10(g, "Transformer", kNoPretraining);
  const double b_gain = mean_r10(g, "BoW-MLP", "ICT+BFS+WLP") - mean_r10(g, "BoW-MLP", kNoPretraining);
  return {t_gain > b_gain, "R@10 gain from ICT+BFS+WLP: Transformer " + pct(t_gain) + " pts, BoW-MLP " +
                               pct(b_gain) + " pts"};
}

Outcome open_domain(const Grid& g) {
  const auto& res = g.result;
  const std::size_t added = res.num_candidates_augmented - res.num_candidates;
  std::size_t checked = 0, raised = 0;
  for (const auto& r : res.runs)
    for (const auto& [k, v] : r.test.recall) {
      ++checked;
      raised += r.test_augmented.recall.at(k) > v;
    }
  std::map<std::size_t, double> dense, bm25;
  for (const auto& r : res.runs) {
    if (r.encoder == "Transformer" && r.task == "ICT+BFS+WLP") dense[r.seed_index] = r.test_augmented.recall.at(100);
    if (r.encoder == "BM25") bm25[r.seed_index] = r.test_augmented.recall.at(100);
  }
  bool beats = dense.size() == kSeeds && bm25.size() == kSeeds;
  std::string per_seed;
  for (const auto& [s, v] : dense) {
    const double b = bm25.count(s) ? bm25.at(s) : 1.0;
    beats = beats && v > b;
    per_seed += " seed " + std::to_string(s) + " " + pct(v) + " vs " + pct(b) + ";";
  }
  const bool ok = added == kDistractors && raised == 0 && beats;
  return {ok, std::to_string(added) + " distractors, " + std::to_string(raised) + "/" + std::to_string(checked) +
                  " recall@k raised; augmented R@100 pretrained Transformer vs BM25:" + per_seed};
}

// ---------------------------------------------------------------------------
// 9. Determinism through the CLI

int sh(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_determinism(const ExperimentConfig& cfg, const fs::path& cli, const fs::path& work) {
  json j = cfg.to_json();
  j["num_seeds"] = 1;
  for (const char* k : {"pretrain", "mlm", "pretrain_bow"}) j[k]["steps"] = 300;
  for (const char* k : {"finetune", "finetune_bow"}) j[k]["steps"] = 100;
  fs::create_directories(work);
  const fs::path config = work / "determinism.json";
  write_file_atomic(config, j.dump(2));
  const auto t0 = Clock::now();
  std::vector<std::string> reports;
  for (const char* run : {"run1", "run2"}) {
    const std::string cmd = "'" + cli.string() + "' experiment --force --config '" + config.string() + "' --out-dir '" +
                            (work / run).string() + "' > /dev/null 2> '" + (work / run).string() + ".log'";
    if (const int code = sh(cmd); code != 0) return {false, std::string(run) + " exited " + std::to_string(code)};
    reports.push_back(read_file(work / run / "report.json") + read_file(work / run / "report.txt"));
  }
  const bool same = reports[0] == reports[1];
  return {same, std::string("two `experiment` runs (") + std::to_string(cfg.cells.size()) + " cells + BM25, 1 seed) " +
                    (same ? "byte-identical" : "differ") + " (" + std::to_string(reports[0].size()) + " bytes); " +
                    fmt(since(t0)) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string config_path = TWOTOWER_SOURCE_DIR "/configs/toy.json";
  std::string cli = TWOTOWER_CLI;
  std::string work = (fs::temp_directory_path() / "twotower_acceptance").string();
  app.add_option("--only", only, "Criteria to run (default all)")->delimiter(',');
  app.add_option("--config", config_path, "Toy experiment configuration");
  app.add_option("--cli", cli, "twotower executable");
  app.add_option("--work-dir", work, "Scratch directory");
  CLI11_PARSE(app, argc, argv);
  auto selected = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  ExperimentConfig cfg;
  try {
    cfg = ExperimentConfig::from_json(json::parse(read_file(config_path)), fs::path(config_path).parent_path());
  } catch (const std::exception& e) {
    std::cerr << "cannot load " << config_path << ": " << e.what() << "\n";
    return 2;
  }

  std::optional<Grid> grid;
  auto need_grid = [&]() -> const Grid& {
    if (!grid) grid = run_grid(cfg);
    return *grid;
  };
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient check", gradient_check},
      {"softmax equivalence", softmax_equivalence},
      {"top-k oracles", topk_oracles},
      {"BM25 formula", bm25_formula},
      {"pair invariants", [&] { return pair_invariants(cfg); }},
      {"toy ordering", [&] { return toy_ordering(need_grid()); }},
      {"encoder gain", [&] { return encoder_gain(need_grid()); }},
      {"open-domain", [&] { return open_domain(need_grid()); }},
      {"determinism", [&] { return cli_determinism(cfg, cli, work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
