#pragma once

// Experiment grid: encoder x pre-training task x split ratio x seed, each cell
// running pretrain -> finetune -> index -> retrieve -> evaluate, plus BM25
// rows, on both the plain candidate set and the distractor-augmented one.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <array>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "twotower/benchmark.hpp"
#include "twotower/corpus.hpp"
#include "twotower/model.hpp"
#include "twotower/pretrain_tasks.hpp"
#include "twotower/training.hpp"
#include "twotower/vocab.hpp"

namespace twotower {

inline constexpr const char* kNoPretraining = "None";
inline constexpr const char* kMlm = "MLM";

struct CellSpec {
  Arch encoder = Arch::Transformer;
  std::string pretrain = kNoPretraining;  // None, MLM, or a task mixture such as ICT+BFS+WLP
};

struct ExperimentConfig {
  std::filesystem::path corpus;
  std::filesystem::path qa;
  std::size_t vocab_size = 3000;
  std::size_t vocab_min_freq = 1;
  EncoderConfig transformer;
  EncoderConfig bow;
  TrainRunConfig pretrain;
  TrainRunConfig mlm;
  TrainRunConfig finetune;
  std::optional<TrainRunConfig> pretrain_bow;  // BoW-MLP overrides; fall back to the shared ones
  std::optional<TrainRunConfig> finetune_bow;
  std::vector<SplitRatio> ratios = {{80, 20}};
  std::vector<CellSpec> cells;
  std::size_t num_seeds = 3;
  std::uint64_t seed = 1;
  std::size_t distractors = 10000;
  bool bm25 = true;
  BM25Params bm25_params;
  std::vector<std::size_t> ks = default_ks();
  std::size_t threads = 1;

  ExperimentConfig() {
    bow.arch = Arch::BowMlp;
    cells = {{Arch::Transformer, kNoPretraining}, {Arch::Transformer, kMlm},
             {Arch::Transformer, "ICT+BFS+WLP"}};
  }

  EncoderConfig encoder_for(Arch a) const { return a == Arch::BowMlp ? bow : transformer; }
  const TrainRunConfig& pretrain_for(Arch a) const {
    return a == Arch::BowMlp && pretrain_bow ? *pretrain_bow : pretrain;
  }
  const TrainRunConfig& finetune_for(Arch a) const {
    return a == Arch::BowMlp && finetune_bow ? *finetune_bow : finetune;
  }

  /// Paths are resolved against `base` when relative.
  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
    ExperimentConfig c;
    auto path = [&](const char* k) {
      std::filesystem::path p = j.at(k).get<std::string>();
      return p.is_relative() && !base.empty() ? base / p : p;
    };
    c.corpus = path("corpus");
    c.qa = path("qa");
    if (j.contains("vocab_size")) c.vocab_size = j["vocab_size"].get<std::size_t>();
    if (j.contains("vocab_min_freq")) c.vocab_min_freq = j["vocab_min_freq"].get<std::size_t>();
    if (j.contains("transformer")) c.transformer = EncoderConfig::from_json(j["transformer"], c.transformer);
    if (j.contains("bow")) c.bow = EncoderConfig::from_json(j["bow"], c.bow);
    c.bow.arch = Arch::BowMlp;
    c.transformer.arch = Arch::Transformer;
    if (j.contains("pretrain")) c.pretrain = TrainRunConfig::from_json(j["pretrain"], c.pretrain);
    if (j.contains("mlm")) c.mlm = TrainRunConfig::from_json(j["mlm"], c.mlm);
    if (j.contains("finetune")) c.finetune = TrainRunConfig::from_json(j["finetune"], c.finetune);
    if (j.contains("pretrain_bow")) c.pretrain_bow = TrainRunConfig::from_json(j["pretrain_bow"], c.pretrain);
    if (j.contains("finetune_bow")) c.finetune_bow = TrainRunConfig::from_json(j["finetune_bow"], c.finetune);
    if (j.contains("ratios")) {
      c.ratios.clear();
      for (const auto& r : j["ratios"]) c.ratios.push_back(parse_ratio(r.get<std::string>()));
    }
    if (j.contains("cells")) {
      c.cells.clear();
      for (const auto& cell : j["cells"])
        c.cells.push_back({parse_arch(cell.at("encoder").get<std::string>()),
                           canonical_task(cell.at("pretrain").get<std::string>())});
    }
    if (j.contains("num_seeds")) c.num_seeds = j["num_seeds"].get<std::size_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("distractors")) c.distractors = j["distractors"].get<std::size_t>();
    if (j.contains("bm25")) c.bm25 = j["bm25"].get<bool>();
    if (j.contains("bm25_k1")) c.bm25_params.k1 = j["bm25_k1"].get<double>();
    if (j.contains("bm25_b")) c.bm25_params.b = j["bm25_b"].get<double>();
    if (j.contains("ks")) c.ks = j["ks"].get<std::vector<std::size_t>>();
    c.validate();
    return c;
  }

  static std::string canonical_task(const std::string& s) {
    if (s == "None" || s == "none" || s == "No Pretraining") return kNoPretraining;
    if (s == "MLM" || s == "mlm") return kMlm;
    return TaskMixture::parse(s).label();
  }

  void validate() const {
    if (num_seeds == 0) throw ConfigError("num_seeds must be >= 1");
    if (cells.empty() && !bm25) throw ConfigError("experiment has no cells");
    if (ratios.empty()) throw ConfigError("experiment needs at least one split ratio");
    if (ks.empty()) throw ConfigError("experiment needs at least one recall cut");
    for (const auto& c : cells)
      if (c.pretrain == kMlm && c.encoder != Arch::Transformer)
        throw ConfigError("MLM pre-training needs the Transformer encoder");
    bm25_params.validate();
    pretrain.validate();
    mlm.validate();
    finetune.validate();
    if (pretrain_bow) pretrain_bow->validate();
    if (finetune_bow) finetune_bow->validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json cj = nlohmann::json::array();
    for (const auto& c : cells) cj.push_back({{"encoder", arch_name(c.encoder)}, {"pretrain", c.pretrain}});
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : ratios) rj.push_back(r.label());
    return {{"corpus", corpus.generic_string()},
            {"qa", qa.generic_string()},
            {"vocab_size", vocab_size},
            {"vocab_min_freq", vocab_min_freq},
            {"transformer", transformer.to_json()},
            {"bow", bow.to_json()},
            {"pretrain", pretrain.to_json()},
            {"mlm", mlm.to_json()},
            {"finetune", finetune.to_json()},
            {"pretrain_bow", pretrain_for(Arch::BowMlp).to_json()},
            {"finetune_bow", finetune_for(Arch::BowMlp).to_json()},
            {"ratios", rj},
            {"cells", cj},
            {"num_seeds", num_seeds},
            {"seed", seed},
            {"distractors", distractors},
            {"bm25", bm25},
            {"bm25_k1", bm25_params.k1},
            {"bm25_b", bm25_params.b},
            {"ks", ks}};
  }
};

struct RunResult {
  SplitRatio ratio;
  std::string encoder;
  std::string task;
  std::size_t seed_index = 0;
  EvalReport test;
  EvalReport test_augmented;
  double val_recall = -1;
  std::size_t best_step = 0;

  std::string key() const { return ratio.label() + "|" + encoder + "|" + task; }
};

struct ExperimentResult {
  nlohmann::json config;
  std::size_t num_candidates = 0;
  std::size_t num_candidates_augmented = 0;
  std::size_t num_examples = 0;
  std::size_t dropped_entries = 0;
  std::size_t distractor_collisions = 0;
  std::vector<RunResult> runs;
};

using ProgressLog = std::function<void(const std::string&)>;

/// Loaded, tokenized inputs shared by every cell.
struct ExperimentData {
  CorpusStore corpus;
  Vocabulary vocab;
  ReqaBenchmark bench;      // plain candidate set
  ReqaBenchmark augmented;  // same candidates followed by distractors
};

inline ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  d.corpus = load_corpus(cfg.corpus);
  d.vocab = build_vocab(d.corpus, cfg.vocab_size, cfg.vocab_min_freq);
  tokenize_corpus(d.corpus, d.vocab);
  d.bench = build_reqa(load_qa(cfg.qa), d.corpus, d.vocab);
  if (d.bench.examples.empty()) throw Error("no usable QA entries");
  d.augmented = d.bench;
  const auto pool = distractor_pool(d.corpus, d.bench, derive_seed(cfg.seed, "distractors"));
  augment_open_domain(d.augmented, pool, cfg.distractors, d.vocab);
  return d;
}

namespace detail {

inline DenseIndex head_rows(const DenseIndex& idx, std::size_t n) {
  DenseIndex out;
  out.dim = idx.dim;
  out.fingerprint = idx.fingerprint;
  out.ids.assign(idx.ids.begin(), idx.ids.begin() + static_cast<std::ptrdiff_t>(n));
  out.rows.assign(idx.rows.begin(), idx.rows.begin() + static_cast<std::ptrdiff_t>(n * idx.dim));
  return out;
}

inline std::vector<TokenSeq> passage_sequences(const CorpusStore& corpus,
                                               const std::vector<std::vector<TokenId>>& titles,
                                               std::size_t max_len) {
  std::vector<TokenSeq> out;
  const auto& arts = corpus.articles();
  for (std::size_t a = 0; a < arts.size(); ++a)
    for (const auto& sec : arts[a].sections)
      for (const auto& p : sec.passages) out.push_back(pair_input(titles[a], passage_tokens(p), max_len));
  return out;
}

}  // namespace detail

namespace detail {

inline MetricsSink both(MetricsSink a, MetricsSink b) {
  if (!a) return b;
  if (!b) return a;
  return [a = std::move(a), b = std::move(b)](const StepMetrics& m) {
    a(m);
    b(m);
  };
}

}  // namespace detail

/// Sink that reports mean loss/accuracy over windows of `every` steps.
inline MetricsSink windowed_sink(const ProgressLog& log, std::string prefix, std::size_t every = 250) {
  if (!log) return {};
  auto acc = std::make_shared<std::array<double, 3>>();
  return [=](const StepMetrics& m) {
    (*acc)[0] += m.loss;
    (*acc)[1] += m.acc;
    (*acc)[2] += 1;
    if (m.step % every == 0) {
      std::ostringstream s;
      s << prefix << " step " << m.step << ": loss " << (*acc)[0] / (*acc)[2] << ", acc "
        << (*acc)[1] / (*acc)[2] << ", lr " << m.lr;
      log(s.str());
      *acc = {};
    }
  };
}

/// Pre-trains a freshly initialized two-tower model per the cell's task.
template <class T>
TwoTower<T> pretrained_model(const ExperimentConfig& cfg, const ExperimentData& data,
                             const CellSpec& cell, std::uint64_t run_seed, const ProgressLog& log = {},
                             const MetricsSink& sink = {}) {
  EncoderConfig ec = cfg.encoder_for(cell.encoder);
  ec.vocab_size = data.vocab.size();
  TwoTower<T> m = init_two_tower<T>(ec, derive_seed(run_seed, "init"));
  if (cell.pretrain == kNoPretraining) return m;
  const auto titles = tokenize_titles(data.corpus, data.vocab);
  if (cell.pretrain == kMlm) {
    TrainRunConfig tc = cfg.mlm;
    tc.seed = derive_seed(run_seed, "mlm");
    tc.threads = cfg.threads;
    Rng body_rng(derive_seed(run_seed, "mlm-init"));
    EncoderParams<T> body = init_params<T>(ec, ec.doc_max_len, body_rng);
    const auto seqs = detail::passage_sequences(data.corpus, titles, ec.doc_max_len);
    Rng pick(derive_seed(run_seed, "mlm-stream"));
    pretrain_mlm<T>(body, tc, [&] { return seqs[pick.uniform_index(seqs.size())]; }, {},
                    detail::both(windowed_sink(log, "  MLM"), sink));
    for (auto& tower : m.towers) transfer_body(body, tower);
    return m;
  }
  TrainRunConfig tc = cfg.pretrain_for(cell.encoder);
  tc.seed = derive_seed(run_seed, "pretrain");
  tc.threads = cfg.threads;
  PairSampler sampler(data.corpus, titles, TaskMixture::parse(cell.pretrain),
                      derive_seed(run_seed, "pairs"), {ec.query_max_len, ec.doc_max_len});
  pretrain<T>(m, tc, sampler_stream(sampler), detail::both(windowed_sink(log, "  " + cell.pretrain), sink));
  return m;
}

/// Fine-tunes on the split's training examples with validation recall@10
/// early stopping; `m` ends at its best validation checkpoint.
template <class T>
FinetuneResult finetune_on_split(TwoTower<T>& m, const ExperimentConfig& cfg, const ExperimentData& data,
                                 const Split& split, std::uint64_t run_seed, const MetricsSink& sink = {}) {
  const auto& bench = data.bench;
  const std::size_t qmax = m.query().max_len, dmax = m.doc().max_len;
  std::vector<TrainingPair> pairs;
  for (auto i : split.train) {
    const auto& ex = bench.examples[i];
    pairs.push_back({query_input(ex.question_tokens, qmax),
                     candidate_input(bench.candidates[static_cast<std::size_t>(ex.gold)], dmax), 0});
  }
  const auto inputs = candidate_inputs(bench, dmax);
  const auto val_gold = gold_ids(bench, split.validation);
  const std::vector<std::size_t> k10 = {10};
  Validator<T> validate = [&](const TwoTower<T>& model) {
    const DenseIndex idx = build_dense_index(model, inputs, {}, cfg.threads);
    const auto ranked = dense_rankings(model, idx, bench, split.validation, 10, cfg.threads);
    return evaluate(ranked, val_gold, k10).recall.at(10);
  };
  TrainRunConfig tc = cfg.finetune_for(m.config.arch);
  tc.seed = derive_seed(run_seed, "finetune");
  tc.threads = cfg.threads;
  return finetune<T>(m, tc, pairs, validate, sink);
}

/// Test-split recall over the plain and the augmented candidate sets. A
/// prebuilt index must cover the augmented set in order.
template <class T>
RunResult evaluate_on_split(const TwoTower<T>& m, const ExperimentConfig& cfg, const ExperimentData& data,
                            const Split& split, const DenseIndex* prebuilt = nullptr) {
  const auto& bench = data.bench;
  RunResult r;
  const std::size_t kmax = max_k(cfg.ks);
  const DenseIndex full = prebuilt ? *prebuilt
                                   : build_dense_index(m, candidate_inputs(data.augmented, m.doc().max_len),
                                                       {}, cfg.threads);
  if (full.size() != data.augmented.candidates.size())
    throw Error("index holds " + std::to_string(full.size()) + " candidates, expected " +
                std::to_string(data.augmented.candidates.size()));
  if (full.fingerprint != fingerprint(m)) throw Error("index was built with a different model");
  const DenseIndex plain = detail::head_rows(full, bench.candidates.size());
  const auto gold = gold_ids(bench, split.test);
  const std::string fp = hex64(fingerprint(m));
  r.test = evaluate(dense_rankings(m, plain, bench, split.test, kmax, cfg.threads), gold, cfg.ks,
                    plain.size());
  r.test.config_fingerprint = fp;
  r.test_augmented = evaluate(dense_rankings(m, full, data.augmented, split.test, kmax, cfg.threads),
                              gold, cfg.ks, full.size());
  r.test_augmented.config_fingerprint = fp;
  return r;
}

template <class T>
RunResult finetune_and_evaluate(TwoTower<T> m, const ExperimentConfig& cfg,
                                const ExperimentData& data, const Split& split,
                                std::uint64_t run_seed) {
  const FinetuneResult fr = finetune_on_split(m, cfg, data, split, run_seed);
  RunResult r = evaluate_on_split(m, cfg, data, split);
  r.val_recall = fr.best_metric;
  r.best_step = fr.best_step;
  return r;
}

/// BM25 test-split recall over both candidate sets.
inline RunResult bm25_on_split(const ExperimentConfig& cfg, const ExperimentData& data, const Split& split,
                               const InvertedIndex& plain, const InvertedIndex& full) {
  const std::size_t kmax = max_k(cfg.ks);
  const auto gold = gold_ids(data.bench, split.test);
  RunResult rr;
  rr.encoder = "BM25";
  rr.task = "-";
  rr.test = evaluate(bm25_rankings(plain, data.bench, split.test, kmax, cfg.bm25_params, cfg.threads), gold,
                     cfg.ks, plain.size());
  rr.test_augmented = evaluate(bm25_rankings(full, data.augmented, split.test, kmax, cfg.bm25_params, cfg.threads),
                               gold, cfg.ks, full.size());
  return rr;
}

template <class T = float>
ExperimentResult run_experiment(const ExperimentConfig& cfg, const ProgressLog& log = {}) {
  cfg.validate();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  ExperimentData data = load_experiment_data(cfg);
  ExperimentResult res;
  res.config = cfg.to_json();
  res.num_candidates = data.bench.candidates.size();
  res.num_candidates_augmented = data.augmented.candidates.size();
  res.num_examples = data.bench.examples.size();
  res.dropped_entries = data.bench.dropped;
  res.distractor_collisions = data.augmented.distractor_collisions;
  say("candidates " + std::to_string(res.num_candidates) + " (+" +
      std::to_string(res.num_candidates_augmented - res.num_candidates) + " distractors), examples " +
      std::to_string(res.num_examples) + ", vocab " + std::to_string(data.vocab.size()));

  std::optional<InvertedIndex> bm25_plain, bm25_full;
  if (cfg.bm25) {
    bm25_plain = build_bm25_index(data.bench);
    bm25_full = build_bm25_index(data.augmented);
  }
  const std::size_t kmax = max_k(cfg.ks);
  for (std::size_t s = 0; s < cfg.num_seeds; ++s) {
    const std::uint64_t run_seed = derive_seed(cfg.seed, "run", s);
    std::map<std::size_t, Split> splits;
    for (std::size_t r = 0; r < cfg.ratios.size(); ++r)
      splits.emplace(r, make_split(data.bench.examples, cfg.ratios[r],
                                   derive_seed(run_seed, "split", static_cast<std::uint64_t>(r))));
    for (const auto& cell : cfg.cells) {
      const std::string label = std::string(arch_name(cell.encoder)) + " " + cell.pretrain;
      TwoTower<T> base;
      try {
        const auto t0 = std::chrono::steady_clock::now();
        base = pretrained_model<T>(cfg, data, cell, run_seed, log);
        const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        say("seed " + std::to_string(s) + " " + label + ": pre-trained in " + std::to_string(dt) + " s");
      } catch (const std::exception& e) {
        throw Error("cell [" + label + ", seed " + std::to_string(s) + "] pre-training: " + e.what());
      }
      for (std::size_t r = 0; r < cfg.ratios.size(); ++r) {
        try {
          const auto t0 = std::chrono::steady_clock::now();
          RunResult rr = finetune_and_evaluate<T>(base, cfg, data, splits.at(r), run_seed);
          rr.ratio = cfg.ratios[r];
          rr.encoder = arch_name(cell.encoder);
          rr.task = cell.pretrain;
          rr.seed_index = s;
          const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          std::ostringstream msg;
          msg << "seed " << s << " " << label << " " << rr.ratio.label() << ": val R@10 "
              << rr.val_recall << " (step " << rr.best_step << "), test R@10 "
              << rr.test.recall.at(10) << ", augmented R@100 "
              << rr.test_augmented.recall.at(kmax) << " [" << dt << " s]";
          say(msg.str());
          res.runs.push_back(std::move(rr));
        } catch (const std::exception& e) {
          throw Error("cell [" + label + ", " + cfg.ratios[r].label() + ", seed " + std::to_string(s) +
                      "]: " + e.what());
        }
      }
    }
    if (cfg.bm25) {
      for (std::size_t r = 0; r < cfg.ratios.size(); ++r) {
        RunResult rr = bm25_on_split(cfg, data, splits.at(r), *bm25_plain, *bm25_full);
        rr.ratio = cfg.ratios[r];
        rr.seed_index = s;
        say("seed " + std::to_string(s) + " BM25 " + rr.ratio.label() + ": test R@10 " +
            std::to_string(rr.test.recall.at(10)));
        res.runs.push_back(std::move(rr));
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reporting

struct ReportRow {
  SplitRatio ratio;
  std::string encoder;
  std::string task;
  std::size_t seeds = 0;
  std::map<std::size_t, double> recall;            // mean over seeds, fraction
  std::map<std::size_t, double> recall_augmented;  // mean over seeds, fraction
};

/// Means over seeds, one row per (ratio, encoder, task), sorted by that key.
inline std::vector<ReportRow> aggregate(const std::vector<RunResult>& runs) {
  std::map<std::tuple<SplitRatio, std::string, std::string>, ReportRow> rows;
  for (const auto& r : runs) {
    auto& row = rows[{r.ratio, r.encoder, r.task}];
    row.ratio = r.ratio;
    row.encoder = r.encoder;
    row.task = r.task;
    ++row.seeds;
    for (const auto& [k, v] : r.test.recall) row.recall[k] += v;
    for (const auto& [k, v] : r.test_augmented.recall) row.recall_augmented[k] += v;
  }
  std::vector<ReportRow> out;
  for (auto& [key, row] : rows) {
    for (auto& [k, v] : row.recall) v /= static_cast<double>(row.seeds);
    for (auto& [k, v] : row.recall_augmented) v /= static_cast<double>(row.seeds);
    out.push_back(std::move(row));
  }
  return out;
}

inline std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

inline std::string render_table(const std::vector<ReportRow>& rows, bool augmented) {
  std::vector<std::size_t> ks;
  for (const auto& row : rows)
    for (const auto& [k, v] : (augmented ? row.recall_augmented : row.recall))
      if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
  std::sort(ks.begin(), ks.end());
  std::ostringstream out;
  out << std::left << std::setw(8) << "Split" << std::setw(14) << "Encoder" << std::setw(16) << "Pre-training";
  for (auto k : ks) out << std::right << std::setw(9) << ("R@" + std::to_string(k));
  out << "\n";
  for (const auto& row : rows) {
    const auto& rec = augmented ? row.recall_augmented : row.recall;
    out << std::left << std::setw(8) << row.ratio.label() << std::setw(14) << row.encoder << std::setw(16)
        << row.task;
    for (auto k : ks) {
      auto it = rec.find(k);
      out << std::right << std::setw(9) << (it == rec.end() ? std::string("-") : percent(it->second));
    }
    out << "\n";
  }
  return out.str();
}

struct RenderedReport {
  std::string text;
  nlohmann::json json;
};

inline nlohmann::json recall_percent_json(const std::map<std::size_t, double>& rec) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : rec) j["R@" + std::to_string(k)] = percent(v);
  return j;
}

inline RenderedReport render_report(const ExperimentResult& res) {
  if (res.runs.empty()) throw Error("render_report: no results");
  const auto rows = aggregate(res.runs);
  RenderedReport out;
  std::ostringstream text;
  text << "Recall@k (%) on the test split, mean over seeds; " << res.num_candidates << " candidates\n"
       << render_table(rows, false) << "\n"
       << "Open-domain: " << res.num_candidates_augmented << " candidates (with distractors)\n"
       << render_table(rows, true);
  out.text = text.str();

  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& row : rows)
    jrows.push_back({{"split", row.ratio.label()},
                     {"encoder", row.encoder},
                     {"pretrain", row.task},
                     {"seeds", row.seeds},
                     {"recall", recall_percent_json(row.recall)},
                     {"recall_augmented", recall_percent_json(row.recall_augmented)}});
  nlohmann::json jruns = nlohmann::json::array();
  for (const auto& r : res.runs)
    jruns.push_back({{"split", r.ratio.label()},
                     {"encoder", r.encoder},
                     {"pretrain", r.task},
                     {"seed_index", r.seed_index},
                     {"val_recall_at_10", r.val_recall},
                     {"best_step", r.best_step},
                     {"test", r.test.to_json()},
                     {"test_augmented", r.test_augmented.to_json()}});
  out.json = {{"config", res.config},
              {"num_candidates", res.num_candidates},
              {"num_candidates_augmented", res.num_candidates_augmented},
              {"num_examples", res.num_examples},
              {"dropped_entries", res.dropped_entries},
              {"distractor_collisions", res.distractor_collisions},
              {"rows", jrows},
              {"runs", jruns}};
  return out;
}

/// Reads back the JSON half of a rendered report.
inline ExperimentResult result_from_report_json(const nlohmann::json& j) {
  ExperimentResult res;
  res.config = j.value("config", nlohmann::json::object());
  res.num_candidates = j.at("num_candidates").get<std::size_t>();
  res.num_candidates_augmented = j.at("num_candidates_augmented").get<std::size_t>();
  res.num_examples = j.value("num_examples", std::size_t{0});
  res.dropped_entries = j.value("dropped_entries", std::size_t{0});
  res.distractor_collisions = j.value("distractor_collisions", std::size_t{0});
  for (const auto& jr : j.at("runs")) {
    RunResult r;
    r.ratio = parse_ratio(jr.at("split").get<std::string>());
    r.encoder = jr.at("encoder").get<std::string>();
    r.task = jr.at("pretrain").get<std::string>();
    r.seed_index = jr.at("seed_index").get<std::size_t>();
    r.val_recall = jr.value("val_recall_at_10", -1.0);
    r.best_step = jr.value("best_step", std::size_t{0});
    r.test = EvalReport::from_json(jr.at("test"));
    r.test_augmented = EvalReport::from_json(jr.at("test_augmented"));
    res.runs.push_back(std::move(r));
  }
  return res;
}

}  // namespace twotower
