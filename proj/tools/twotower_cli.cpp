#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <memory>

#include "json.hpp"
#include "twotower/experiment.hpp"
#include "twotower/synth.hpp"

namespace fs = std::filesystem;
namespace tt = twotower;
using json = nlohmann::json;

namespace {

constexpr const char* kEnvPrefix = "TWOTOWER_";

struct UsageError : tt::ConfigError {
  using tt::ConfigError::ConfigError;
};

enum class Kind { Path, Text, Int, Real, IntList, Flag };

struct Param {
  std::string flag;  // without dashes
  std::string key;   // json pointer; "@train" / "@tune" are resolved per run
  Kind kind = Kind::Text;
  std::string value;
  bool flag_value = false;
  CLI::Option* opt = nullptr;

  bool given() const { return opt && opt->count() > 0; }
};

std::string env_name(const std::string& flag) {
  std::string s = kEnvPrefix;
  for (char c : flag) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

json typed(const Param& p) {
  try {
    switch (p.kind) {
      case Kind::Path:
      case Kind::Text:
        return p.value;
      case Kind::Flag:
        return p.flag_value;
      case Kind::Int: {
        std::size_t used = 0;
        const auto v = std::stoull(p.value, &used);
        if (used != p.value.size()) break;
        return v;
      }
      case Kind::Real: {
        std::size_t used = 0;
        const double v = std::stod(p.value, &used);
        if (used != p.value.size()) break;
        return v;
      }
      case Kind::IntList: {
        json arr = json::array();
        std::stringstream ss(p.value);
        for (std::string item; std::getline(ss, item, ',');) {
          std::size_t used = 0;
          arr.push_back(std::stoull(item, &used));
          if (used != item.size()) throw std::invalid_argument(item);
        }
        if (arr.empty()) break;
        return arr;
      }
    }
  } catch (const std::logic_error&) {
  }
  throw UsageError("--" + p.flag + ": bad value '" + p.value + "'");
}

struct Record {
  std::string name;
  fs::path path;
};

/// State of one invocation: merged configuration plus the files it touched.
class Run {
 public:
  std::string command;
  json cfg = json::object();
  std::map<std::string, std::string> flag_of;  // json pointer -> flag
  std::vector<Record> inputs, outputs;
  bool force = false;

  bool has(const std::string& key) const { return cfg.contains(json::json_pointer(key)); }

  const json& need(const std::string& key) const {
    if (!has(key)) {
      auto it = flag_of.find(key);
      throw UsageError("missing required option " +
                       (it == flag_of.end() ? key : "--" + it->second));
    }
    return cfg.at(json::json_pointer(key));
  }

  template <class V>
  V get(const std::string& key, V fallback) const {
    if (!has(key)) return fallback;
    try {
      return cfg.at(json::json_pointer(key)).get<V>();
    } catch (const json::exception& e) {
      throw UsageError("config value " + key + ": " + e.what());
    }
  }

  fs::path input(const std::string& name, const std::string& key) {
    fs::path p = need(key).get<std::string>();
    if (!fs::exists(p)) throw tt::Error("input not found: " + p.string());
    inputs.push_back({name, p});
    return p;
  }

  std::optional<fs::path> optional_input(const std::string& name, const std::string& key) {
    if (!has(key)) return std::nullopt;
    return input(name, key);
  }

  fs::path output(const std::string& name, const fs::path& p) {
    if (fs::exists(p) && !force) throw tt::Error(p.string() + " exists (use --force to overwrite)");
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    outputs.push_back({name, p});
    return p;
  }

  fs::path output(const std::string& name, const char* key) {
    return output(name, fs::path(need(key).get<std::string>()));
  }

  std::size_t threads() const { return get<bool>("/deterministic", false) ? 1 : get<std::size_t>("/threads", 1); }
  std::uint64_t seed() const { return get<std::uint64_t>("/seed", 1); }
};

void progress(const std::string& s) { std::cerr << s << std::endl; }

void write_text(Run& r, const std::string& name, const fs::path& path, std::string_view bytes) {
  r.output(name, path);
  tt::write_file_atomic(path, bytes);
}

json file_record(const Record& rec) {
  json j = {{"name", rec.name}, {"path", rec.path.generic_string()}};
  if (fs::is_regular_file(rec.path)) {
    j["bytes"] = fs::file_size(rec.path);
    j["fnv1a64"] = tt::hex64(tt::fnv1a64(tt::read_file(rec.path)));
  }
  return j;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces

tt::ExperimentConfig pipeline_config(const Run& r) {
  json j = r.cfg;
  for (const char* k : {"corpus", "qa"})
    if (!j.contains(k)) j[k] = "";
  if (j.contains("split")) j["ratios"] = json::array({j["split"]});
  try {
    auto c = tt::ExperimentConfig::from_json(j);
    c.threads = r.threads();
    return c;
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad configuration: ") + e.what());
  }
}

std::uint64_t run_seed(const tt::ExperimentConfig& c) { return tt::derive_seed(c.seed, "run", 0); }

tt::Split split_of(const tt::ExperimentConfig& c, const tt::ExperimentData& d) {
  return tt::make_split(d.bench.examples, c.ratios.at(0), tt::derive_seed(run_seed(c), "split", 0));
}

/// Corpus, vocabulary (loaded or rebuilt) and optionally the QA benchmark with
/// its distractor-augmented twin.
tt::ExperimentData load_data(Run& r, const tt::ExperimentConfig& c, bool with_qa) {
  tt::ExperimentData d;
  d.corpus = tt::load_corpus(r.input("corpus", "/corpus"));
  if (auto vp = r.optional_input("vocab", "/vocab"))
    d.vocab = tt::Vocabulary::from_text(tt::read_file(*vp));
  else
    d.vocab = tt::build_vocab(d.corpus, c.vocab_size, c.vocab_min_freq);
  tt::tokenize_corpus(d.corpus, d.vocab);
  if (!with_qa) return d;
  d.bench = tt::build_reqa(tt::load_qa(r.input("qa", "/qa")), d.corpus, d.vocab);
  if (d.bench.examples.empty()) throw tt::Error("no usable QA entries");
  d.augmented = d.bench;
  const auto pool = tt::distractor_pool(d.corpus, d.bench, tt::derive_seed(c.seed, "distractors"));
  tt::augment_open_domain(d.augmented, pool, c.distractors, d.vocab);
  progress("candidates " + std::to_string(d.bench.candidates.size()) + " (+" +
      std::to_string(d.augmented.candidates.size() - d.bench.candidates.size()) + " distractors), examples " +
      std::to_string(d.bench.examples.size()));
  return d;
}

tt::TwoTower<float> load_model(Run& r, const tt::Vocabulary& vocab) {
  auto m = tt::load_checkpoint<float>(r.input("checkpoint", "/checkpoint"));
  if (m.config.vocab_size != vocab.size())
    throw tt::Error("checkpoint vocabulary size " + std::to_string(m.config.vocab_size) +
                    " does not match vocabulary size " + std::to_string(vocab.size()));
  return m;
}

tt::Arch encoder_arch(const Run& r) { return tt::parse_arch(r.get<std::string>("/encoder", "transformer")); }

std::string task_of(const Run& r) { return tt::ExperimentConfig::canonical_task(r.get<std::string>("/tasks", "ICT+BFS+WLP")); }

tt::ExperimentResult single_run_result(const tt::ExperimentConfig& c, const tt::ExperimentData& d, tt::RunResult rr) {
  tt::ExperimentResult res;
  res.config = c.to_json();
  res.num_candidates = d.bench.candidates.size();
  res.num_candidates_augmented = d.augmented.candidates.size();
  res.num_examples = d.bench.examples.size();
  res.dropped_entries = d.bench.dropped;
  res.distractor_collisions = d.augmented.distractor_collisions;
  rr.ratio = c.ratios.at(0);
  res.runs.push_back(std::move(rr));
  return res;
}

void emit_report(Run& r, const tt::ExperimentResult& res) {
  const auto rendered = tt::render_report(res);
  if (r.has("/out")) write_text(r, "report", r.need("/out").get<std::string>(), rendered.json.dump(2) + "\n");
  std::cout << rendered.text;
}

std::unique_ptr<std::ofstream> metrics_file(Run& r) {
  if (!r.has("/metrics")) return nullptr;
  auto path = r.output("metrics", "/metrics");
  auto out = std::make_unique<std::ofstream>(path);
  if (!*out) throw tt::Error("cannot write " + path.string());
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_synth(Run& r) {
  auto sc = tt::SynthConfig::from_json(r.get<json>("/synth", json::object()));
  if (r.has("/seed")) sc.seed = r.seed();
  const fs::path dir = r.need("/out_dir").get<std::string>();
  const auto out = tt::generate_synthetic(sc);
  write_text(r, "corpus", dir / "corpus.jsonl", out.corpus_jsonl);
  write_text(r, "qa", dir / "qa.jsonl", out.qa_jsonl);
  std::cout << json{{"articles", sc.articles}, {"passages", out.num_passages}, {"questions", out.num_questions}}.dump()
            << "\n";
}

void cmd_ingest(Run& r) {
  const auto policy_name = r.get<std::string>("/link_policy", "drop");
  if (policy_name != "drop" && policy_name != "keep") throw UsageError("--link-policy must be drop or keep");
  const auto policy = policy_name == "keep" ? tt::LinkPolicy::Keep : tt::LinkPolicy::Drop;
  const auto corpus = tt::load_corpus(r.input("corpus", "/corpus"), policy);
  std::size_t sections = 0, passages = 0, sentences = 0;
  for (const auto& a : corpus.articles())
    for (const auto& s : a.sections) {
      ++sections;
      for (const auto& p : s.passages) {
        ++passages;
        sentences += p.sentences.size();
      }
    }
  if (r.has("/out")) write_text(r, "corpus", r.need("/out").get<std::string>(), tt::serialize_corpus(corpus));
  std::cout << json{{"articles", corpus.size()}, {"sections", sections}, {"passages", passages},
                    {"sentences", sentences}, {"links", corpus.num_links()}}.dump()
            << "\n";
}

void cmd_vocab(Run& r) {
  const auto c = pipeline_config(r);
  const auto corpus = tt::load_corpus(r.input("corpus", "/corpus"));
  const auto out = r.output("vocab", "/out");
  const auto v = tt::build_vocab(corpus, c.vocab_size, c.vocab_min_freq);
  tt::write_file_atomic(out, v.to_text());
  std::cout << json{{"size", v.size()}}.dump() << "\n";
}

void cmd_gen_pairs(Run& r) {
  const auto c = pipeline_config(r);
  const auto d = load_data(r, c, false);
  const auto ec = c.encoder_for(encoder_arch(r));
  const auto mix = tt::TaskMixture::parse(r.get<std::string>("/tasks", "ICT+BFS+WLP"));
  const auto out = r.output("pairs", "/out");
  const auto pairs = tt::sample_mixture(d.corpus, d.vocab, mix, r.get<std::size_t>("/num_pairs", 10000),
                                        tt::derive_seed(c.seed, "pairs"), {ec.query_max_len, ec.doc_max_len});
  std::string text;
  for (const auto& p : pairs) text += tt::pair_to_jsonl(p) + "\n";
  tt::write_file_atomic(out, text);
  std::cout << tt::pair_stats(pairs).to_json().dump() << "\n";
}

void cmd_pretrain(Run& r) {
  const auto c = pipeline_config(r);
  const tt::CellSpec cell{encoder_arch(r), task_of(r)};
  const auto out = r.output("checkpoint", "/out");
  auto metrics = metrics_file(r);
  const auto d = load_data(r, c, false);
  const auto m = tt::pretrained_model<float>(c, d, cell, run_seed(c), progress,
                                             metrics ? tt::jsonl_sink(*metrics) : tt::MetricsSink{});
  tt::save_checkpoint(m, out);
  std::cout << json{{"encoder", tt::arch_name(cell.encoder)}, {"pretrain", cell.pretrain},
                    {"fingerprint", tt::hex64(tt::fingerprint(m))}}.dump()
            << "\n";
}

void cmd_finetune(Run& r) {
  const auto c = pipeline_config(r);
  const auto out = r.output("checkpoint", "/out");
  auto metrics = metrics_file(r);
  const auto d = load_data(r, c, true);
  tt::TwoTower<float> m;
  if (r.has("/checkpoint")) {
    m = load_model(r, d.vocab);
  } else {
    auto ec = c.encoder_for(encoder_arch(r));
    ec.vocab_size = d.vocab.size();
    m = tt::init_two_tower<float>(ec, tt::derive_seed(run_seed(c), "init"));
  }
  const auto fr = tt::finetune_on_split(m, c, d, split_of(c, d), run_seed(c),
                                        metrics ? tt::jsonl_sink(*metrics) : tt::MetricsSink{});
  tt::save_checkpoint(m, out);
  std::cout << json{{"best_step", fr.best_step}, {"val_recall_at_10", fr.best_metric}, {"steps_run", fr.steps_run},
                    {"fingerprint", tt::hex64(tt::fingerprint(m))}}.dump()
            << "\n";
}

void cmd_index(Run& r) {
  const auto c = pipeline_config(r);
  const auto out = r.output("index", "/out");
  const auto d = load_data(r, c, true);
  const auto m = load_model(r, d.vocab);
  const auto idx = tt::build_dense_index(m, tt::candidate_inputs(d.augmented, m.doc().max_len), {}, c.threads);
  tt::save_dense_index(idx, out);
  std::cout << json{{"candidates", idx.size()}, {"dim", idx.dim}, {"truncated_inputs", idx.truncated_inputs},
                    {"fingerprint", tt::hex64(idx.fingerprint)}}.dump()
            << "\n";
}

void cmd_eval(Run& r) {
  const auto c = pipeline_config(r);
  const auto d = load_data(r, c, true);
  const auto m = load_model(r, d.vocab);
  std::optional<tt::DenseIndex> idx;
  if (auto p = r.optional_input("index", "/index")) idx = tt::load_dense_index(*p);
  tt::RunResult rr = tt::evaluate_on_split(m, c, d, split_of(c, d), idx ? &*idx : nullptr);
  rr.encoder = tt::arch_name(m.config.arch);
  rr.task = r.get<std::string>("/label", "custom");
  emit_report(r, single_run_result(c, d, std::move(rr)));
}

void cmd_bm25_eval(Run& r) {
  const auto c = pipeline_config(r);
  const auto d = load_data(r, c, true);
  const auto plain = tt::build_bm25_index(d.bench), full = tt::build_bm25_index(d.augmented);
  emit_report(r, single_run_result(c, d, tt::bm25_on_split(c, d, split_of(c, d), plain, full)));
}

void cmd_experiment(Run& r) {
  const fs::path dir = r.need("/out_dir").get<std::string>();
  auto text_path = r.output("report_text", dir / "report.txt");
  auto json_path = r.output("report_json", dir / "report.json");
  r.optional_input("config", "/config");
  r.input("corpus", "/corpus");
  r.input("qa", "/qa");
  tt::ExperimentConfig c;
  try {
    c = tt::ExperimentConfig::from_json(r.cfg);
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad configuration: ") + e.what());
  }
  c.threads = r.threads();
  const auto res = tt::run_experiment<float>(c, progress);
  const auto rendered = tt::render_report(res);
  tt::write_file_atomic(text_path, rendered.text);
  tt::write_file_atomic(json_path, rendered.json.dump(2) + "\n");
  std::cout << rendered.text;
}

void cmd_report(Run& r, const std::vector<std::string>& files) {
  tt::ExperimentResult merged;
  for (std::size_t i = 0; i < files.size(); ++i) {
    r.inputs.push_back({"report", files[i]});
    json j;
    try {
      j = json::parse(tt::read_file(files[i]));
    } catch (const json::exception& e) {
      throw tt::Error(files[i] + ": " + e.what());
    }
    auto res = tt::result_from_report_json(j);
    if (i == 0) {
      merged = std::move(res);
      continue;
    }
    if (res.num_candidates != merged.num_candidates)
      throw tt::Error(files[i] + ": candidate count differs from " + files[0]);
    for (auto& run : res.runs) merged.runs.push_back(std::move(run));
  }
  const auto rendered = tt::render_report(merged);
  if (r.has("/out")) write_text(r, "report_text", r.need("/out").get<std::string>(), rendered.text);
  if (r.has("/json_out"))
    write_text(r, "report_json", r.need("/json_out").get<std::string>(), rendered.json.dump(2) + "\n");
  std::cout << rendered.text;
}

// ---------------------------------------------------------------------------
// Command table

struct Command {
  CLI::App* app = nullptr;
  std::vector<std::unique_ptr<Param>> params;
  std::string config_path;
  std::function<void(Run&)> body;

  Param& add(const std::string& flag, const std::string& key, Kind kind, const std::string& help) {
    auto p = std::make_unique<Param>();
    p->flag = flag;
    p->key = key;
    p->kind = kind;
    if (kind == Kind::Flag)
      p->opt = app->add_flag("--" + flag, p->flag_value, help);
    else
      p->opt = app->add_option("--" + flag, p->value, help);
    p->opt->envname(env_name(flag));
    params.push_back(std::move(p));
    return *params.back();
  }
};

/// Section that per-run training flags write to.
std::string section(const std::string& tag, const Run& r) {
  const bool bow = encoder_arch(r) == tt::Arch::BowMlp;
  if (tag == "@train") return task_of(r) == tt::kMlm ? "/mlm" : bow ? "/pretrain_bow" : "/pretrain";
  return bow ? "/finetune_bow" : "/finetune";
}

json read_config(const fs::path& path, const Command& cmd) {
  json j;
  try {
    j = json::parse(tt::read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path.string() + " must hold a JSON object");
  const fs::path base = path.parent_path();
  for (const auto& p : cmd.params) {
    if (p->kind != Kind::Path || p->key.starts_with("@")) continue;
    const json::json_pointer ptr(p->key);
    if (!j.contains(ptr) || !j[ptr].is_string()) continue;
    const fs::path v = j[ptr].get<std::string>();
    if (v.is_relative() && !base.empty()) j[ptr] = (base / v).generic_string();
  }
  return j;
}

Run resolve(const std::string& name, Command& cmd) {
  Run r;
  r.command = name;
  if (!cmd.config_path.empty()) {
    r.cfg = read_config(cmd.config_path, cmd);
    r.cfg["config"] = cmd.config_path;
  }
  for (const auto& p : cmd.params)
    if (!p->key.starts_with("@")) r.flag_of[p->key] = p->flag;
  for (const auto& p : cmd.params)
    if (p->given() && !p->key.starts_with("@")) r.cfg[json::json_pointer(p->key)] = typed(*p);
  for (const auto& p : cmd.params) {
    if (!p->key.starts_with("@")) continue;
    const auto slash = p->key.find('/');
    const std::string key = section(p->key.substr(0, slash), r) + p->key.substr(slash);
    r.flag_of[key] = p->flag;
    if (p->given()) r.cfg[json::json_pointer(key)] = typed(*p);
  }
  r.force = r.get<bool>("/force", false);
  return r;
}

void append_manifest(const Run& r, const fs::path& path, double seconds, int exit_code, const std::string& error) {
  json rec = {{"command", r.command},
              {"started", utc_now()},
              {"config", r.cfg},
              {"seed", r.seed()},
              {"threads", r.threads()},
              {"wall_seconds", seconds},
              {"exit_code", exit_code}};
  json ins = json::array(), outs = json::array();
  for (const auto& i : r.inputs) ins.push_back(file_record(i));
  for (const auto& o : r.outputs) outs.push_back(file_record(o));
  rec["inputs"] = ins;
  rec["outputs"] = outs;
  if (!error.empty()) rec["error"] = error;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  out << rec.dump() << "\n";
}

fs::path manifest_path(const Run& r) {
  if (r.has("/manifest")) return r.need("/manifest").get<std::string>();
  if (!r.outputs.empty()) return r.outputs.front().path.parent_path() / "manifest.jsonl";
  return {};
}

void add_common(Command& cmd) {
  cmd.app->add_option("--config", cmd.config_path, "JSON configuration; flags and environment override it")
      ->envname(env_name("config"));
  cmd.add("seed", "/seed", Kind::Int, "Master seed");
  cmd.add("threads", "/threads", Kind::Int, "Worker threads");
  cmd.add("deterministic", "/deterministic", Kind::Flag, "Single-threaded, bit-reproducible reductions");
  cmd.add("force", "/force", Kind::Flag, "Overwrite existing outputs");
  cmd.add("manifest", "/manifest", Kind::Path, "Run manifest (JSONL, appended)");
}

void add_data(Command& cmd, bool qa) {
  cmd.add("corpus", "/corpus", Kind::Path, "Corpus JSONL");
  if (qa) cmd.add("qa", "/qa", Kind::Path, "QA JSONL");
  cmd.add("vocab", "/vocab", Kind::Path, "Vocabulary file (rebuilt from the corpus when absent)");
  cmd.add("vocab-size", "/vocab_size", Kind::Int, "Vocabulary size when rebuilding");
}

void add_eval(Command& cmd) {
  cmd.add("split", "/split", Kind::Text, "Train/test ratio, e.g. 80/20");
  cmd.add("distractors", "/distractors", Kind::Int, "Open-domain distractor passages");
  cmd.add("ks", "/ks", Kind::IntList, "Recall cut-offs, comma separated");
  cmd.add("out", "/out", Kind::Path, "Report JSON");
}

void add_training(Command& cmd, const std::string& tag) {
  cmd.add("steps", tag + "/steps", Kind::Int, "Optimizer steps");
  cmd.add("batch-size", tag + "/batch_size", Kind::Int, "Batch size");
  cmd.add("lr", tag + "/lr_peak", Kind::Real, "Peak learning rate");
  cmd.add("warmup", tag + "/warmup_fraction", Kind::Real, "Warm-up fraction of the schedule");
  cmd.add("correction", tag + "/correction", Kind::Text, "none or log-frequency");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-tower retrieval: data preparation, pre-training, fine-tuning and evaluation"};
  app.require_subcommand(1);
  std::map<std::string, Command> commands;
  std::vector<std::string> report_files;

  auto make = [&](const std::string& name, const std::string& desc, std::function<void(Run&)> body) -> Command& {
    Command& c = commands[name];
    c.app = app.add_subcommand(name, desc);
    c.body = std::move(body);
    add_common(c);
    return c;
  };

  {
    auto& c = make("synth", "Generate a synthetic corpus and QA set", cmd_synth);
    c.add("out-dir", "/out_dir", Kind::Path, "Output directory");
    c.add("articles", "/synth/articles", Kind::Int, "Number of articles");
    c.add("questions-per-article", "/synth/questions_per_article", Kind::Int, "Questions per article");
  }
  {
    auto& c = make("ingest", "Parse and validate a corpus", cmd_ingest);
    c.add("corpus", "/corpus", Kind::Path, "Corpus JSONL");
    c.add("link-policy", "/link_policy", Kind::Text, "drop or keep dangling links");
    c.add("out", "/out", Kind::Path, "Normalized corpus JSONL");
  }
  {
    auto& c = make("vocab", "Build a WordPiece vocabulary", cmd_vocab);
    c.add("corpus", "/corpus", Kind::Path, "Corpus JSONL");
    c.add("vocab-size", "/vocab_size", Kind::Int, "Maximum vocabulary size");
    c.add("min-freq", "/vocab_min_freq", Kind::Int, "Minimum word frequency");
    c.add("out", "/out", Kind::Path, "Vocabulary file");
  }
  {
    auto& c = make("gen-pairs", "Sample pre-training pairs", cmd_gen_pairs);
    add_data(c, false);
    c.add("tasks", "/tasks", Kind::Text, "Task mixture, e.g. ICT+BFS+WLP or ICT:0.5,BFS:0.5");
    c.add("num-pairs", "/num_pairs", Kind::Int, "Number of pairs");
    c.add("encoder", "/encoder", Kind::Text, "transformer or bow (sets length limits)");
    c.add("out", "/out", Kind::Path, "Pairs JSONL");
  }
  {
    auto& c = make("pretrain", "Pre-train a two-tower model", cmd_pretrain);
    add_data(c, false);
    c.add("encoder", "/encoder", Kind::Text, "transformer or bow");
    c.add("tasks", "/tasks", Kind::Text, "None, MLM or a pair-task mixture");
    add_training(c, "@train");
    c.add("out", "/out", Kind::Path, "Checkpoint");
    c.add("metrics", "/metrics", Kind::Path, "Per-step metrics JSONL");
  }
  {
    auto& c = make("finetune", "Fine-tune on the QA training split", cmd_finetune);
    add_data(c, true);
    c.add("checkpoint", "/checkpoint", Kind::Path, "Starting checkpoint (fresh model when absent)");
    c.add("encoder", "/encoder", Kind::Text, "Encoder for a fresh model");
    c.add("split", "/split", Kind::Text, "Train/test ratio, e.g. 80/20");
    add_training(c, "@tune");
    c.add("eval-every", "@tune/eval_every", Kind::Int, "Validation cadence in steps");
    c.add("patience", "@tune/patience", Kind::Int, "Evaluations without improvement before stopping");
    c.add("out", "/out", Kind::Path, "Checkpoint");
    c.add("metrics", "/metrics", Kind::Path, "Per-step metrics JSONL");
  }
  {
    auto& c = make("index", "Embed every candidate into a dense index", cmd_index);
    add_data(c, true);
    c.add("checkpoint", "/checkpoint", Kind::Path, "Model checkpoint");
    c.add("distractors", "/distractors", Kind::Int, "Open-domain distractor passages");
    c.add("out", "/out", Kind::Path, "Index file");
  }
  {
    auto& c = make("eval", "Recall@k of a dense model on the test split", cmd_eval);
    add_data(c, true);
    c.add("checkpoint", "/checkpoint", Kind::Path, "Model checkpoint");
    c.add("index", "/index", Kind::Path, "Prebuilt index from `index`");
    c.add("label", "/label", Kind::Text, "Pre-training label shown in the report");
    add_eval(c);
  }
  {
    auto& c = make("bm25-eval", "Recall@k of BM25 on the test split", cmd_bm25_eval);
    add_data(c, true);
    c.add("bm25-k1", "/bm25_k1", Kind::Real, "BM25 k1");
    c.add("bm25-b", "/bm25_b", Kind::Real, "BM25 b");
    add_eval(c);
  }
  {
    auto& c = make("experiment", "Run a full experiment grid and write the report", cmd_experiment);
    c.add("corpus", "/corpus", Kind::Path, "Corpus JSONL");
    c.add("qa", "/qa", Kind::Path, "QA JSONL");
    c.add("num-seeds", "/num_seeds", Kind::Int, "Seeds per cell");
    c.add("distractors", "/distractors", Kind::Int, "Open-domain distractor passages");
    c.add("out-dir", "/out_dir", Kind::Path, "Output directory for report.txt and report.json");
  }
  {
    auto& c = make("report", "Aggregate report JSON files into a table", nullptr);
    c.app->add_option("files", report_files, "report.json files from eval, bm25-eval or experiment")->required();
    c.add("out", "/out", Kind::Path, "Table text file");
    c.add("json-out", "/json_out", Kind::Path, "Aggregated JSON");
    c.body = [&](Run& r) { cmd_report(r, report_files); };
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  std::string name;
  for (auto& [n, c] : commands)
    if (c.app->parsed()) name = n;
  Command& cmd = commands.at(name);
  Run run;
  const auto t0 = std::chrono::steady_clock::now();
  int code = 0;
  std::string error;
  try {
    run = resolve(name, cmd);
    cmd.body(run);
  } catch (const tt::ConfigError& e) {
    error = e.what();
    code = 1;
  } catch (const std::exception& e) {
    error = e.what();
    code = 2;
  }
  if (code != 0) std::cerr << "twotower " << name << ": error: " << error << "\n";
  if (!run.command.empty()) {
    const auto mp = manifest_path(run);
    if (!mp.empty()) {
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      try {
        append_manifest(run, mp, dt, code, error);
      } catch (const std::exception& e) {
        std::cerr << "twotower: cannot write manifest: " << e.what() << "\n";
        if (code == 0) code = 2;
      }
    }
  }
  return code;
}
