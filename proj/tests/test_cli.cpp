#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>

#include "twotower/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using twotower::read_file;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("twotower_cli_" + std::to_string(::getpid()) + "_" +
           ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  Result run(const std::string& args, const std::string& env = "") {
    const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = "cd '" + dir.string() + "' && " + env + " '" TWOTOWER_CLI "' " + args + " > '" +
                            out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_file(out);
    r.err = read_file(err);
    return r;
  }

  std::size_t lines(const fs::path& p) {
    const auto text = read_file(dir / p);
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
  }

  void write(const fs::path& p, const std::string& text) {
    fs::create_directories((dir / p).parent_path());
    twotower::write_file_atomic(dir / p, text);
  }

  fs::path dir;
};

const char* kTinyConfig = R"({
  "corpus": "data/corpus.jsonl", "qa": "data/qa.jsonl", "vocab_size": 600,
  "transformer": {"num_layers": 1, "hidden_dim": 8, "num_heads": 2, "ff_dim": 16, "emb_dim": 8,
                  "query_max_len": 12, "doc_max_len": 24},
  "bow": {"hidden_dim": 8, "emb_dim": 8, "query_max_len": 12, "doc_max_len": 24},
  "pretrain": {"batch_size": 8, "steps": 20}, "mlm": {"batch_size": 8, "steps": 20},
  "finetune": {"batch_size": 8, "steps": 20, "eval_every": 10, "patience": 1},
  "distractors": 100, "num_seeds": 1, "seed": 3,
  "cells": [{"encoder": "Transformer", "pretrain": "ICT+BFS+WLP"}]
})";

}  // namespace

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("eval --help").code, 0);
  EXPECT_EQ(run("--help").code, 0);
  const auto missing = run("eval --qa q.jsonl");
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("--corpus"), std::string::npos);
  EXPECT_EQ(run("eval --no-such-flag").code, 1);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("synth --out-dir d --articles many").code, 1);
}

TEST_F(Cli, RuntimeErrorsExitTwo) {
  EXPECT_EQ(run("ingest --corpus missing.jsonl").code, 2);
  write("bad.jsonl", "{\"id\":1}\n");
  const auto r = run("ingest --corpus bad.jsonl");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 1"), std::string::npos);
}

TEST_F(Cli, ExistingOutputNeedsForce) {
  ASSERT_EQ(run("synth --out-dir data --articles 12").code, 0);
  const auto again = run("synth --out-dir data --articles 12");
  EXPECT_EQ(again.code, 2);
  EXPECT_NE(again.err.find("--force"), std::string::npos);
  EXPECT_EQ(run("synth --out-dir data --articles 12 --force").code, 0);
}

TEST_F(Cli, PrecedenceFlagOverEnvOverConfig) {
  write("cfg/synth.json", R"({"out_dir": "out", "synth": {"articles": 20}})");
  ASSERT_EQ(run("synth --config cfg/synth.json").code, 0);
  EXPECT_EQ(lines("cfg/out/corpus.jsonl"), 20u);  // relative to the config file
  ASSERT_EQ(run("synth --config cfg/synth.json --force", "TWOTOWER_ARTICLES=15").code, 0);
  EXPECT_EQ(lines("cfg/out/corpus.jsonl"), 15u);
  ASSERT_EQ(run("synth --config cfg/synth.json --force --articles 11", "TWOTOWER_ARTICLES=15").code, 0);
  EXPECT_EQ(lines("cfg/out/corpus.jsonl"), 11u);
  ASSERT_EQ(run("synth --force", "TWOTOWER_OUT_DIR=envdir TWOTOWER_ARTICLES=13").code, 0);
  EXPECT_EQ(lines("envdir/corpus.jsonl"), 13u);
}

TEST_F(Cli, ManifestAppendsOneRecordPerRun) {
  ASSERT_EQ(run("synth --out-dir data --articles 12 --seed 5").code, 0);
  ASSERT_EQ(run("vocab --corpus data/corpus.jsonl --vocab-size 300 --out data/vocab.txt").code, 0);
  ASSERT_EQ(lines("data/manifest.jsonl"), 2u);
  const auto text = read_file(dir / "data/manifest.jsonl");
  const auto first = json::parse(text.substr(0, text.find('\n')));
  const auto second = json::parse(text.substr(text.find('\n') + 1));
  EXPECT_EQ(first.at("command"), "synth");
  EXPECT_EQ(first.at("seed"), 5);
  EXPECT_EQ(first.at("outputs").size(), 2u);
  EXPECT_EQ(second.at("command"), "vocab");
  EXPECT_EQ(second.at("config").at("vocab_size"), 300);
  ASSERT_EQ(second.at("inputs").size(), 1u);
  EXPECT_EQ(second.at("inputs")[0].at("fnv1a64"), first.at("outputs")[0].at("fnv1a64"));
  EXPECT_TRUE(second.contains("wall_seconds"));
}

TEST_F(Cli, IngestAndPairs) {
  ASSERT_EQ(run("synth --out-dir data --articles 30").code, 0);
  const auto ing = run("ingest --corpus data/corpus.jsonl");
  ASSERT_EQ(ing.code, 0);
  EXPECT_EQ(json::parse(ing.out).at("articles"), 30);
  const auto gp = run("gen-pairs --corpus data/corpus.jsonl --vocab-size 400 --num-pairs 300 --tasks ICT --out p.jsonl");
  ASSERT_EQ(gp.code, 0) << gp.err;
  EXPECT_EQ(json::parse(gp.out).at("ICT").at("pairs"), 300);
  EXPECT_EQ(lines("p.jsonl"), 300u);
}

TEST_F(Cli, ExperimentIsDeterministicAndMatchesStepwisePipeline) {
  ASSERT_EQ(run("synth --out-dir data --articles 40").code, 0);
  write("tiny.json", kTinyConfig);
  ASSERT_EQ(run("experiment --config tiny.json --out-dir a").code, 0);
  ASSERT_EQ(run("experiment --config tiny.json --out-dir b --threads 2 --deterministic").code, 0);
  EXPECT_EQ(read_file(dir / "a/report.json"), read_file(dir / "b/report.json"));
  EXPECT_EQ(read_file(dir / "a/report.txt"), read_file(dir / "b/report.txt"));

  ASSERT_EQ(run("pretrain --config tiny.json --out m.ckpt --metrics m.jsonl").code, 0);
  EXPECT_EQ(lines("m.jsonl"), 20u);
  ASSERT_EQ(run("finetune --config tiny.json --checkpoint m.ckpt --out ft.ckpt").code, 0);
  ASSERT_EQ(run("index --config tiny.json --checkpoint ft.ckpt --out ft.idx").code, 0);
  ASSERT_EQ(run("eval --config tiny.json --checkpoint ft.ckpt --index ft.idx --label ICT+BFS+WLP --out e.json").code, 0);
  ASSERT_EQ(run("bm25-eval --config tiny.json --out bm25.json").code, 0);

  const auto exp = json::parse(read_file(dir / "a/report.json"));
  const auto dense = json::parse(read_file(dir / "e.json"));
  const auto bm25 = json::parse(read_file(dir / "bm25.json"));
  ASSERT_EQ(exp.at("runs").size(), 2u);
  EXPECT_EQ(dense.at("runs")[0].at("test"), exp.at("runs")[0].at("test"));
  EXPECT_EQ(dense.at("runs")[0].at("test_augmented"), exp.at("runs")[0].at("test_augmented"));
  EXPECT_EQ(bm25.at("runs")[0].at("test"), exp.at("runs")[1].at("test"));

  const auto merged = run("report e.json bm25.json");
  ASSERT_EQ(merged.code, 0);
  EXPECT_EQ(merged.out, read_file(dir / "a/report.txt"));
  const auto again = run("report a/report.json --out r.txt");
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(read_file(dir / "r.txt"), read_file(dir / "a/report.txt"));
}

TEST_F(Cli, CheckpointVocabularyMismatchIsRuntimeError) {
  ASSERT_EQ(run("synth --out-dir data --articles 40").code, 0);
  write("tiny.json", kTinyConfig);
  ASSERT_EQ(run("pretrain --config tiny.json --tasks None --out m.ckpt").code, 0);
  EXPECT_EQ(run("eval --config tiny.json --checkpoint m.ckpt --vocab-size 500").code, 2);
  EXPECT_EQ(run("eval --config tiny.json --checkpoint m.ckpt --split 80-20").code, 1);
}

TEST(ReportJson, RoundTrip) {
  twotower::ExperimentResult res;
  res.config = {{"seed", 1}};
  res.num_candidates = 10;
  res.num_candidates_augmented = 15;
  res.num_examples = 7;
  twotower::RunResult r;
  r.ratio = {50, 50};
  r.encoder = "Transformer";
  r.task = "ICT";
  r.seed_index = 2;
  r.val_recall = 0.25;
  r.best_step = 40;
  r.test.recall = {{1, 0.125}, {10, 0.5}};
  r.test.num_candidates = 10;
  r.test.num_queries = 8;
  r.test_augmented = r.test;
  r.test_augmented.num_candidates = 15;
  res.runs = {r};
  const auto j = twotower::render_report(res).json;
  const auto back = twotower::result_from_report_json(j);
  EXPECT_EQ(twotower::render_report(back).json, j);
}
