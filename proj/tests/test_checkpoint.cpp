#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fusionformer/checkpoint.hpp"
#include "fusionformer/decoding.hpp"

using namespace fusionformer;
namespace fs = std::filesystem;

namespace {

struct TempFile {
  fs::path path;
  explicit TempFile(const char* name) : path(fs::temp_directory_path() / name) {}
  ~TempFile() {
    std::error_code ec;
    fs::remove(path, ec);
  }
};

Checkpoint round_trip(const Model& model, const Vocab& vocab, const fs::path& path) {
  save_checkpoint(path, model, vocab);
  return load_checkpoint(path);
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwiseExact) {
  auto corpus = synth_corpus(3, 4, 200);
  Vocab vocab = Vocab::from_corpus(corpus);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.vocab_size = vocab.size();
  cfg.fusion_method = FusionMethod::kLinear;
  Model model = Model::init(cfg, 42);

  TempFile f("ff_ckpt_roundtrip.ckpt");
  Checkpoint ck = round_trip(model, vocab, f.path);

  EXPECT_EQ(ck.model.cfg.n_layers, cfg.n_layers);
  EXPECT_EQ(ck.model.cfg.d_model, cfg.d_model);
  EXPECT_EQ(ck.model.cfg.fusion_method, FusionMethod::kLinear);
  EXPECT_EQ(ck.vocab.tokens(), vocab.tokens());

  auto orig = model.named_params();
  auto loaded = ck.model.named_params();
  ASSERT_EQ(orig.size(), loaded.size());
  for (size_t i = 0; i < orig.size(); ++i) {
    EXPECT_EQ(orig[i].name, loaded[i].name);
    EXPECT_EQ(orig[i].tensor.data(), loaded[i].tensor.data()) << orig[i].name;
    EXPECT_EQ(orig[i].is_fusion, loaded[i].is_fusion);
  }
}

TEST(Checkpoint, SavedFileStartsWithMagic) {
  auto corpus = synth_corpus(5, 2, 200);
  Vocab vocab = Vocab::from_corpus(corpus);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  Model model = Model::init(cfg, 1);
  TempFile f("ff_ckpt_magic.ckpt");
  save_checkpoint(f.path, model, vocab);
  std::ifstream in(f.path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "FFCKPT01");
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  auto corpus = synth_corpus(7, 2, 200);
  Vocab vocab = Vocab::from_corpus(corpus);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  Model model = Model::init(cfg, 2);
  TempFile f("ff_ckpt_trunc.ckpt");
  save_checkpoint(f.path, model, vocab);
  const std::string full = read_file(f.path);
  atomic_write_file(f.path, full.substr(0, full.size() / 2));
  EXPECT_THROW(load_checkpoint(f.path), IoError);
}

TEST(Checkpoint, GarbageFileIsRejected) {
  TempFile f("ff_ckpt_garbage.ckpt");
  atomic_write_file(f.path, "this is not a checkpoint");
  EXPECT_THROW(load_checkpoint(f.path), IoError);
  EXPECT_THROW(load_checkpoint(fs::temp_directory_path() / "ff_ckpt_missing.ckpt"), IoError);
}

TEST(Checkpoint, DecodesStandaloneAfterReload) {
  auto corpus = synth_corpus(9, 3, 200);
  Vocab vocab = Vocab::from_corpus(corpus);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.vocab_size = vocab.size();
  cfg.fusion_method = FusionMethod::kSw;
  Model model = Model::init(cfg, 3);

  TempFile f("ff_ckpt_decode.ckpt");
  Checkpoint ck = round_trip(model, vocab, f.path);

  BatchItem item = build_sample(corpus[0], vocab);
  DecodeConfig dc;
  dc.max_len = 6;
  Hypothesis a = beam_search(model, item.persona, item.history, dc);
  BatchItem item2 = build_sample(corpus[0], ck.vocab);
  Hypothesis b = beam_search(ck.model, item2.persona, item2.history, dc);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_DOUBLE_EQ(a.log_prob, b.log_prob);
}
