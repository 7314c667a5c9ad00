#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusionformer/checkpoint.hpp"
#include "fusionformer/decoding.hpp"

using namespace fusionformer;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;
};

// Runs the CLI binary with output captured; CLI_BIN_PATH is injected by the
// build so the test always exercises the freshly built tool.
RunResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out_file = dir / "cmd_output.txt";
  const std::string cmd = std::string(CLI_BIN_PATH) + " " + args + " > " + out_file.string() +
                          " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out_file);
  std::string line;
  while (std::getline(in, line)) r.output += line + "\n";
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("ff_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }

  std::string p(const char* name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

int count_lines(const fs::path& path) {
  std::ifstream in(path);
  int n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST_F(CliTest, SynthWritesCorpusAndVocab) {
  RunResult r = run_cli("synth --seed 1 --samples 12 --out " + p("corpus.jsonl") +
                            " --vocab-out " + p("vocab.txt"),
                        dir_);
  EXPECT_EQ(r.exit_code, 0) << r.output;
  EXPECT_EQ(count_lines(p("corpus.jsonl")), 12);
  EXPECT_GT(count_lines(p("vocab.txt")), 10);
}

TEST_F(CliTest, MissingCorpusGivesUsageExitNamingPath) {
  RunResult r = run_cli("train --corpus " + p("does_not_exist.jsonl"), dir_);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("does_not_exist.jsonl"), std::string::npos) << r.output;
}

TEST_F(CliTest, UnknownSubcommandGivesUsageExit) {
  RunResult r = run_cli("frobnicate", dir_);
  EXPECT_EQ(r.exit_code, 2);
}

TEST_F(CliTest, InvalidConfigValueGivesUsageExit) {
  run_cli("synth --seed 1 --samples 4 --out " + p("c.jsonl"), dir_);
  RunResult r = run_cli("train --corpus " + p("c.jsonl") + " --dropout 1.5", dir_);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("dropout"), std::string::npos) << r.output;
}

TEST_F(CliTest, TrainGenerateEvaluateInspectPipeline) {
  ASSERT_EQ(run_cli("synth --seed 3 --samples 16 --out " + p("corpus.jsonl") + " --vocab-out " +
                        p("vocab.txt"),
                    dir_)
                .exit_code,
            0);

  const std::string train_args =
      "train --corpus " + p("corpus.jsonl") + " --vocab " + p("vocab.txt") +
      " --checkpoint-out " + p("model.ckpt") + " --loss-log-out " + p("loss.csv") +
      " --fusion-method sw --epochs 2 --batch-size 4 --d-model 16 --n-heads 4 "
      "--warmup-proportion 0.1 --dropout 0 --seed 9";
  RunResult train1 = run_cli(train_args, dir_);
  ASSERT_EQ(train1.exit_code, 0) << train1.output;
  EXPECT_TRUE(fs::exists(p("model.ckpt")));
  EXPECT_TRUE(fs::exists(p("loss.csv")));

  // determinism: the same seed reproduces the loss log byte for byte
  const std::string log1 = read_file(p("loss.csv"));
  fs::rename(p("loss.csv"), p("loss_first.csv"));
  RunResult train2 = run_cli(train_args, dir_);
  ASSERT_EQ(train2.exit_code, 0) << train2.output;
  EXPECT_EQ(read_file(p("loss.csv")), log1);

  // generation: one record per input sample
  RunResult gen = run_cli("generate --checkpoint " + p("model.ckpt") + " --corpus " +
                              p("corpus.jsonl") + " --out " + p("replies.jsonl") +
                              " --beam-size 3 --max-len 12",
                          dir_);
  ASSERT_EQ(gen.exit_code, 0) << gen.output;
  EXPECT_EQ(count_lines(p("replies.jsonl")), 16);
  {
    std::ifstream in(p("replies.jsonl"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      EXPECT_TRUE(j.contains("persona"));
      EXPECT_TRUE(j.contains("history"));
      EXPECT_TRUE(j.contains("reply"));
      EXPECT_TRUE(j.contains("score"));
      EXPECT_LE(j["score"].get<double>(), 0.0);
    }
  }

  // beam size 1 equals an in-process greedy decode on the same checkpoint
  RunResult gen1 = run_cli("generate --checkpoint " + p("model.ckpt") + " --corpus " +
                               p("corpus.jsonl") + " --out " + p("replies_beam1.jsonl") +
                               " --beam-size 1 --max-len 12",
                           dir_);
  ASSERT_EQ(gen1.exit_code, 0) << gen1.output;
  {
    Checkpoint ck = load_checkpoint(p("model.ckpt"));
    auto corpus = load_corpus(p("corpus.jsonl"));
    std::ifstream in(p("replies_beam1.jsonl"));
    std::string line;
    size_t idx = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      BatchItem item = build_sample(corpus[idx], ck.vocab);
      DecodeConfig dc;
      dc.max_len = 12;
      Hypothesis g = greedy_decode(ck.model, item.persona, item.history, dc);
      EXPECT_EQ(j["reply"].get<std::string>(), ck.vocab.detokenize(g.tokens)) << "sample " << idx;
      ++idx;
    }
    EXPECT_EQ(idx, corpus.size());
  }

  // evaluation: identical corpora score BLEU 100 and the report schema holds
  RunResult eval = run_cli("evaluate --refs " + p("corpus.jsonl") + " --hyps " +
                               p("corpus.jsonl") + " --out " + p("report.json"),
                           dir_);
  ASSERT_EQ(eval.exit_code, 0) << eval.output;
  nlohmann::json report = nlohmann::json::parse(read_file(p("report.json")));
  EXPECT_EQ(report.size(), 5u);
  EXPECT_NEAR(report["bleu_pct"].get<double>(), 100.0, 1e-9);
  EXPECT_TRUE(fs::exists(p("report.csv")));

  // scoring generated output against references exercises the real path
  RunResult eval2 = run_cli("evaluate --refs " + p("corpus.jsonl") + " --hyps " +
                                p("replies.jsonl") + " --out " + p("report2.json"),
                            dir_);
  ASSERT_EQ(eval2.exit_code, 0) << eval2.output;

  // fusion-weight inspection on the trained sw checkpoint
  RunResult ins = run_cli("inspect-weights --checkpoint " + p("model.ckpt") + " --out " +
                              p("weights.csv"),
                          dir_);
  ASSERT_EQ(ins.exit_code, 0) << ins.output;
  const std::string weights = read_file(p("weights.csv"));
  EXPECT_EQ(weights.find("layer,w_current,w_persona,w_history\n"), 0u);
  EXPECT_EQ(count_lines(p("weights.csv")), 3);  // header + 2 layers
}

TEST_F(CliTest, EvaluateCountMismatchFails) {
  run_cli("synth --seed 5 --samples 6 --out " + p("a.jsonl"), dir_);
  run_cli("synth --seed 5 --samples 4 --out " + p("b.jsonl"), dir_);
  RunResult r = run_cli("evaluate --refs " + p("a.jsonl") + " --hyps " + p("b.jsonl") + " --out " +
                            p("r.json"),
                        dir_);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("mismatch"), std::string::npos) << r.output;
}

TEST_F(CliTest, EvaluateAcceptsPlainTextFiles) {
  atomic_write_file(p("refs.txt"), "the cat sat on the mat\nhello world how are you\n");
  atomic_write_file(p("hyps.txt"), "the cat sat on the mat\nhello world how are you\n");
  RunResult r = run_cli("evaluate --refs " + p("refs.txt") + " --hyps " + p("hyps.txt") +
                            " --out " + p("r.json"),
                        dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  nlohmann::json report = nlohmann::json::parse(read_file(p("r.json")));
  EXPECT_NEAR(report["bleu_pct"].get<double>(), 100.0, 1e-9);
}

TEST_F(CliTest, InspectWeightsOnFreshSwModelIsUniform) {
  auto corpus = synth_corpus(2, 3, 200);
  Vocab vocab = Vocab::from_corpus(corpus);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.vocab_size = vocab.size();
  cfg.fusion_method = FusionMethod::kSw;
  save_checkpoint(p("fresh.ckpt"), Model::init(cfg, 0), vocab);

  RunResult r = run_cli("inspect-weights --checkpoint " + p("fresh.ckpt") + " --out " +
                            p("w.csv"),
                        dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  std::ifstream in(p("w.csv"));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double layer, wc, wp, wh;
    ASSERT_EQ(std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &layer, &wc, &wp, &wh), 4);
    EXPECT_NEAR(wc, 1.0 / 3, 1e-9);
    EXPECT_NEAR(wp, 1.0 / 3, 1e-9);
    EXPECT_NEAR(wh, 1.0 / 3, 1e-9);
    EXPECT_NEAR(wc + wp + wh, 1.0, 1e-9);
  }
}

TEST_F(CliTest, InspectWeightsRejectsNonWeightingCheckpoint) {
  auto corpus = synth_corpus(2, 3, 200);
  Vocab vocab = Vocab::from_corpus(corpus);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.fusion_method = FusionMethod::kAvg;
  save_checkpoint(p("avg.ckpt"), Model::init(cfg, 0), vocab);
  RunResult r = run_cli("inspect-weights --checkpoint " + p("avg.ckpt") + " --out " + p("w.csv"),
                        dir_);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("sw"), std::string::npos) << r.output;
}

TEST_F(CliTest, GenerateMemorizedReplyVerbatim) {
  // one-sample corpus; gamma-only training memorizes the reply
  auto corpus = synth_corpus(31, 1, 200);
  save_corpus(p("one.jsonl"), corpus);
  RunResult train = run_cli(
      "train --corpus " + p("one.jsonl") + " --checkpoint-out " + p("one.ckpt") +
          " --loss-log-out " + p("one_loss.csv") +
          " --fusion-method avg --epochs 200 --batch-size 1 --d-model 32 --n-heads 4 "
          "--alpha 0 --beta 0 --gamma 1 --lr 3e-3 --warmup-proportion 0.05 --dropout 0 --seed 2",
      dir_);
  ASSERT_EQ(train.exit_code, 0) << train.output;
  RunResult gen = run_cli("generate --checkpoint " + p("one.ckpt") + " --corpus " +
                              p("one.jsonl") + " --out " + p("one_reply.jsonl") +
                              " --beam-size 3 --max-len 16",
                          dir_);
  ASSERT_EQ(gen.exit_code, 0) << gen.output;
  std::ifstream in(p("one_reply.jsonl"));
  std::string line;
  std::getline(in, line);
  nlohmann::json j = nlohmann::json::parse(line);
  EXPECT_EQ(j["reply"].get<std::string>(), corpus[0].reply);
}

TEST_F(CliTest, ConfigFileWithFlagOverrides) {
  run_cli("synth --seed 8 --samples 6 --out " + p("c.jsonl"), dir_);
  nlohmann::json cfg{{"epochs", 1},
                     {"batch_size", 2},
                     {"d_model", 16},
                     {"n_heads", 4},
                     {"dropout", 0.0},
                     {"warmup_proportion", 0.2},
                     {"fusion_method", "dw"},
                     {"corpus_path", p("c.jsonl")},
                     {"checkpoint_path", p("cfg.ckpt")},
                     {"loss_log_path", p("cfg_loss.csv")}};
  atomic_write_file(p("config.json"), cfg.dump());
  RunResult r = run_cli("train --config " + p("config.json") + " --epochs 2", dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  Checkpoint ck = load_checkpoint(p("cfg.ckpt"));
  EXPECT_EQ(ck.model.cfg.fusion_method, FusionMethod::kDw);
  // the flag override doubled the epochs: 6 samples / batch 2 = 3 steps/epoch
  const std::string log = read_file(p("cfg_loss.csv"));
  EXPECT_NE(log.find("\n2,"), std::string::npos);  // a second-epoch row exists
}
