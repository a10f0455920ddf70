#pragma once

// Training loops: in-batch sampled-softmax pre-training over a pair stream,
// masked-LM pre-training of the Transformer body, and fine-tuning with
// best-checkpoint selection on a validation metric.

#include <functional>
#include <optional>
#include <ostream>

#include "json.hpp"
#include "twotower/common.hpp"
#include "twotower/encoder.hpp"
#include "twotower/loss.hpp"
#include "twotower/model.hpp"
#include "twotower/optim.hpp"
#include "twotower/pretrain_tasks.hpp"

namespace twotower {

enum class Correction { None, LogFrequency };

inline const char* correction_name(Correction c) {
  return c == Correction::None ? "none" : "log-frequency";
}

inline Correction parse_correction(std::string_view s) {
  if (s == "none" || s == "None") return Correction::None;
  if (s == "log-frequency" || s == "LogFrequency") return Correction::LogFrequency;
  throw ConfigError("unknown correction mode '" + std::string(s) + "'");
}

struct TrainRunConfig {
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  std::uint64_t seed = 1;
  Correction correction = Correction::None;
  std::size_t eval_every = 50;
  std::size_t patience = 5;  // evaluations without improvement before stopping
  double lr_peak = 1e-3;
  double warmup_fraction = 0.1;
  std::size_t threads = 1;

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch size must be >= 2");
    if (eval_every == 0) throw ConfigError("eval cadence must be >= 1");
    if (!(lr_peak > 0)) throw ConfigError("lr_peak must be positive");
    if (warmup_fraction < 0 || warmup_fraction > 1) throw ConfigError("warmup_fraction must be in [0,1]");
  }

  AdamConfig adam() const {
    AdamConfig a;
    a.lr_peak = lr_peak;
    a.warmup_fraction = warmup_fraction;
    a.total_steps = steps;
    return a;
  }

  nlohmann::json to_json() const {
    return {{"batch_size", batch_size}, {"steps", steps},           {"seed", seed},
            {"correction", correction_name(correction)},             {"eval_every", eval_every},
            {"patience", patience},     {"lr_peak", lr_peak},       {"warmup_fraction", warmup_fraction}};
  }

  static TrainRunConfig from_json(const nlohmann::json& j) { return from_json(j, TrainRunConfig()); }

  static TrainRunConfig from_json(const nlohmann::json& j, TrainRunConfig c) {
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("steps")) c.steps = j["steps"].get<std::size_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("correction")) c.correction = parse_correction(j["correction"].get<std::string>());
    if (j.contains("eval_every")) c.eval_every = j["eval_every"].get<std::size_t>();
    if (j.contains("patience")) c.patience = j["patience"].get<std::size_t>();
    if (j.contains("lr_peak")) c.lr_peak = j["lr_peak"].get<double>();
    if (j.contains("warmup_fraction")) c.warmup_fraction = j["warmup_fraction"].get<double>();
    return c;
  }
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0;
  double acc = 0;
  double lr = 0;

  std::string to_jsonl() const {
    return nlohmann::json{{"step", step}, {"loss", loss}, {"acc", acc}, {"lr", lr}}.dump() + "\n";
  }
};

using MetricsSink = std::function<void(const StepMetrics&)>;

/// Writes every step as one JSON line.
inline MetricsSink jsonl_sink(std::ostream& out) {
  return [&out](const StepMetrics& m) { out << m.to_jsonl(); };
}

class TrainingError : public Error {
 public:
  TrainingError(std::size_t step, const std::string& what)
      : Error("training aborted at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// One Adam state per stored tower.
template <class T>
struct TwoTowerOptimizer {
  std::vector<OptimizerState<T>> states;

  TwoTowerOptimizer(const TwoTower<T>& m, const AdamConfig& c) {
    for (const auto& t : m.towers) states.emplace_back(c, t.values.size());
  }
};

namespace detail {

template <class T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

}  // namespace detail

/// Forward both towers, in-batch loss, backward, one Adam step per tower.
template <class T>
StepMetrics train_step(TwoTower<T>& m, TwoTowerOptimizer<T>& opt, std::span<const TokenSeq> queries,
                       std::span<const TokenSeq> docs,
                       std::optional<std::span<const double>> correction, std::size_t threads,
                       std::size_t step) {
  std::vector<SeqCache<T>> cq, cd;
  const Matrix<T> Q = forward_batch(m.query(), queries, cq, threads);
  const Matrix<T> D = forward_batch(m.doc(), docs, cd, threads);
  LossOutput<T> out;
  try {
    out = in_batch_softmax_loss(Q, D, correction);
  } catch (const Error& e) {
    throw TrainingError(step, e.what());
  }
  if (!std::isfinite(out.loss)) throw TrainingError(step, "non-finite loss");
  std::vector<T> gq = backward_batch(m.query(), cq, out.grad_q, threads);
  std::vector<T> gd = backward_batch(m.doc(), cd, out.grad_d, threads);
  if (!detail::all_finite(gq) || !detail::all_finite(gd))
    throw TrainingError(step, "non-finite gradient");
  double lr;
  if (m.shared()) {
    for (std::size_t i = 0; i < gq.size(); ++i) gq[i] += gd[i];
    lr = adam_step<T>(m.towers[0].values, gq, opt.states[0]);
  } else {
    lr = adam_step<T>(m.towers[0].values, gq, opt.states[0]);
    adam_step<T>(m.towers[1].values, gd, opt.states[1]);
  }
  return {step, out.loss, out.in_batch_accuracy, lr};
}

/// Source of positive pairs for the in-batch loop. `doc_key` identifies the
/// document for the log-frequency correction.
struct TrainingPair {
  TokenSeq query;
  TokenSeq doc;
  std::uint64_t doc_key = 0;
};

using PairStream = std::function<TrainingPair()>;

inline std::uint64_t sequence_key(const TokenSeq& s) {
  std::string bytes(reinterpret_cast<const char*>(s.ids.data()), s.ids.size() * sizeof(TokenId));
  return fnv1a64(bytes);
}

/// Adapts a PairSampler to a PairStream.
inline PairStream sampler_stream(PairSampler& sampler) {
  return [&sampler] {
    PretrainPair p = sampler.next();
    TrainingPair t{std::move(p.query), std::move(p.doc), 0};
    t.doc_key = sequence_key(t.doc);
    return t;
  };
}

/// In-batch sampled-softmax training for cfg.steps steps over `stream`.
template <class T>
void pretrain(TwoTower<T>& m, const TrainRunConfig& cfg, const PairStream& stream,
              const MetricsSink& sink = {}) {
  cfg.validate();
  if (cfg.steps == 0) return;
  TwoTowerOptimizer<T> opt(m, cfg.adam());
  FrequencyCounter freq;
  std::vector<TokenSeq> qs(cfg.batch_size), ds(cfg.batch_size);
  std::vector<std::uint64_t> keys(cfg.batch_size);
  std::vector<double> corr(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      TrainingPair p = stream();
      qs[i] = std::move(p.query);
      ds[i] = std::move(p.doc);
      keys[i] = p.doc_key;
    }
    std::optional<std::span<const double>> c;
    if (cfg.correction == Correction::LogFrequency) {
      for (auto k : keys) freq.observe(k);
      for (std::size_t i = 0; i < keys.size(); ++i) corr[i] = freq.log_frequency(keys[i]);
      c = std::span<const double>(corr);
    }
    StepMetrics sm = train_step(m, opt, qs, ds, c, cfg.threads, step);
    if (sink) sink(sm);
  }
}

// ---------------------------------------------------------------------------
// Masked-LM pre-training

/// Output head tied to the token embeddings: logits = hidden · E^T + bias.
template <class T>
struct MlmHead {
  std::vector<T> bias;
};

/// Masked-LM loss over every masked position of a batch; accumulates
/// gradients into G (encoder) and g_bias. Returns (mean loss, accuracy).
template <class T>
std::pair<double, double> mlm_batch(const EncoderParams<T>& P, const MlmHead<T>& head,
                                    std::span<const MlmExample> batch, std::vector<T>& G,
                                    std::vector<T>& g_bias, std::size_t threads) {
  const std::size_t h = P.config.hidden_dim, V = P.config.vocab_size;
  const std::size_t tok = P.layout.tok;
  std::size_t total_masked = 0;
  for (const auto& ex : batch) total_masked += ex.labels.size();
  if (total_masked == 0) return {0.0, 0.0};
  const T inv = T(1) / static_cast<T>(total_masked);

  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, batch.size()));
  struct Shard {
    std::vector<T> g, gb;
    double loss = 0;
    std::size_t correct = 0;
  };
  std::vector<Shard> shards(workers);
  parallel_chunks(batch.size(), workers, [&](std::size_t b, std::size_t e, std::size_t w) {
    auto& sh = shards[w];
    sh.g.assign(P.values.size(), T(0));
    sh.gb.assign(V, T(0));
    SeqCache<T> c;
    std::vector<double> logits(V);
    for (std::size_t n = b; n < e; ++n) {
      const auto& ex = batch[n];
      forward_sequence(P, ex.input.ids, c, true);
      std::vector<T> dh(c.rows * h, T(0));
      for (const auto& [r, label] : ex.labels) {
        if (r >= c.rows) continue;
        const T* hr = c.hidden.data() + r * h;
        double mx = -INFINITY;
        std::size_t arg = 0;
        for (std::size_t v = 0; v < V; ++v) {
          logits[v] = static_cast<double>(kernels::dot(hr, P.at(tok + v * h), h) + head.bias[v]);
          if (logits[v] > mx) {
            mx = logits[v];
            arg = v;
          }
        }
        double z = 0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(logits[v] - mx);
        const double logz = mx + std::log(z);
        const auto gold = static_cast<std::size_t>(label);
        sh.loss += logz - logits[gold];
        sh.correct += arg == gold;
        for (std::size_t v = 0; v < V; ++v) {
          const T g = static_cast<T>(std::exp(logits[v] - logz) - (v == gold ? 1.0 : 0.0)) * inv;
          sh.gb[v] += g;
          kernels::axpy(g, P.at(tok + v * h), dh.data() + r * h, h);
          kernels::axpy(g, hr, sh.g.data() + tok + v * h, h);
        }
      }
      backward_sequence<T>(P, c, {}, dh, sh.g);
    }
  });
  double loss = 0;
  std::size_t correct = 0;
  for (const auto& sh : shards) {
    if (sh.g.empty()) continue;
    for (std::size_t i = 0; i < G.size(); ++i) G[i] += sh.g[i];
    for (std::size_t i = 0; i < V; ++i) g_bias[i] += sh.gb[i];
    loss += sh.loss;
    correct += sh.correct;
  }
  return {loss / static_cast<double>(total_masked),
          static_cast<double>(correct) / static_cast<double>(total_masked)};
}

/// Trains a single Transformer encoder with the masked-LM objective over
/// sequences drawn from `stream`. Only the body receives gradient; the [CLS]
/// projection is untouched.
template <class T>
void pretrain_mlm(EncoderParams<T>& P, const TrainRunConfig& cfg,
                  const std::function<TokenSeq()>& stream, const MlmOptions& opt = {},
                  const MetricsSink& sink = {}) {
  cfg.validate();
  if (P.config.arch != Arch::Transformer) throw ConfigError("MLM pre-training needs a Transformer");
  if (cfg.steps == 0) return;
  MlmHead<T> head{std::vector<T>(P.config.vocab_size, T(0))};
  OptimizerState<T> st(cfg.adam(), P.values.size());
  OptimizerState<T> st_b(cfg.adam(), head.bias.size());
  Rng rng(derive_seed(cfg.seed, "mlm-mask"));
  std::vector<MlmExample> batch(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& ex : batch) ex = gen_mlm(stream(), rng, P.config.vocab_size, opt);
    std::vector<T> G(P.values.size(), T(0)), gb(head.bias.size(), T(0));
    auto [loss, acc] = mlm_batch<T>(P, head, batch, G, gb, cfg.threads);
    if (!std::isfinite(loss)) throw TrainingError(step, "non-finite loss");
    const double lr = adam_step<T>(P.values, G, st);
    adam_step<T>(head.bias, gb, st_b);
    if (sink) sink({step, loss, acc, lr});
  }
}

/// Copies every tensor except the [CLS] projection from `src` into `dst`,
/// taking the leading rows where row counts differ (position embeddings).
template <class T>
void transfer_body(const EncoderParams<T>& src, EncoderParams<T>& dst) {
  for (const auto& info : dst.layout.tensors) {
    if (info.name.starts_with("proj/")) continue;
    const auto* s = src.layout.find(info.name);
    if (!s) throw ConfigError("transfer_body: source lacks tensor " + info.name);
    const std::size_t n = std::min(s->count, info.count);
    std::copy_n(src.values.begin() + static_cast<std::ptrdiff_t>(s->offset), n,
                dst.values.begin() + static_cast<std::ptrdiff_t>(info.offset));
  }
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneResult {
  std::size_t best_step = 0;
  double best_metric = -1;
  std::size_t steps_run = 0;
  std::vector<std::pair<std::size_t, double>> evaluations;  // (step, metric)
};

/// Validation metric of a model (higher is better), e.g. recall@10.
template <class T>
using Validator = std::function<double(const TwoTower<T>&)>;

/// In-batch training over a fixed set of downstream pairs, reshuffled every
/// epoch. The model is evaluated before training (step 0) and every
/// cfg.eval_every steps; the best-scoring parameters are restored on return.
/// Training stops once `patience` consecutive evaluations fail to improve.
template <class T>
FinetuneResult finetune(TwoTower<T>& m, const TrainRunConfig& cfg,
                        const std::vector<TrainingPair>& pairs, const Validator<T>& validate,
                        const MetricsSink& sink = {}) {
  cfg.validate();
  if (pairs.empty()) throw ConfigError("finetune: empty training set");
  FinetuneResult res;
  TwoTower<T> best = m;
  res.best_metric = validate(m);
  res.evaluations.emplace_back(0, res.best_metric);

  const std::size_t B = std::min(cfg.batch_size, pairs.size());
  if (B < 2) throw ConfigError("finetune: need at least 2 training pairs");
  TwoTowerOptimizer<T> opt(m, cfg.adam());
  Rng rng(derive_seed(cfg.seed, "finetune-order"));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::size_t stale = 0;
  std::vector<TokenSeq> qs(B), ds(B);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (std::size_t i = 0; i < B; ++i) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const auto& p = pairs[order[cursor++]];
      qs[i] = p.query;
      ds[i] = p.doc;
    }
    StepMetrics sm = train_step<T>(m, opt, qs, ds, std::nullopt, cfg.threads, step);
    res.steps_run = step;
    if (sink) sink(sm);
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const double v = validate(m);
      res.evaluations.emplace_back(step, v);
      if (v > res.best_metric) {
        res.best_metric = v;
        res.best_step = step;
        best = m;
        stale = 0;
      } else if (++stale > cfg.patience) {
        break;
      }
    }
  }
  m = std::move(best);
  return res;
}

}  // namespace twotower
