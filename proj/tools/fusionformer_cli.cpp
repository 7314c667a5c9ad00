// Command-line front end: synthetic corpus generation, training, reply
// generation, metric evaluation, and fusion-weight inspection.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fusionformer/fusionformer.hpp"

namespace ff = fusionformer;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " path is required");
  if (!fs::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

// Plain text: one sentence per line. JSONL: one object per line carrying a
// "reply" field (corpus records and generation output both qualify).
std::vector<std::string> load_reply_lines(const std::string& path) {
  std::istringstream in(ff::read_file(path));
  std::vector<std::string> out;
  std::string line;
  bool jsonl = false, first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      jsonl = line.front() == '{';
      first = false;
    }
    if (!jsonl) {
      out.push_back(line);
      continue;
    }
    nlohmann::json j = nlohmann::json::parse(line);
    out.push_back(j.at("reply").get<std::string>());
  }
  return out;
}

struct TrainCliArgs {
  std::string config_path;
  ff::RunConfig cfg;
  // CLI-provided overrides; only set values are applied over the file.
  std::optional<std::string> corpus, vocab, checkpoint_out, loss_log_out, fusion_method;
  std::optional<int> epochs, batch_size, n_layers, d_model, n_heads, max_history, max_positions;
  std::optional<double> lr, warmup, fusion_lr_mult, dropout, alpha, beta, gamma;
  std::optional<uint64_t> seed;
};

ff::RunConfig resolve_train_config(const TrainCliArgs& a) {
  ff::RunConfig cfg;
  if (!a.config_path.empty()) {
    require_file(a.config_path, "config");
    try {
      cfg = ff::run_config_from_json(nlohmann::json::parse(ff::read_file(a.config_path)));
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config " + a.config_path + ": " + e.what());
    }
  }
  auto set = [](auto& dst, const auto& src) {
    if (src.has_value()) dst = *src;
  };
  set(cfg.corpus_path, a.corpus);
  set(cfg.vocab_path, a.vocab);
  set(cfg.checkpoint_path, a.checkpoint_out);
  set(cfg.loss_log_path, a.loss_log_out);
  set(cfg.epochs, a.epochs);
  set(cfg.batch_size, a.batch_size);
  set(cfg.model.n_layers, a.n_layers);
  set(cfg.model.d_model, a.d_model);
  set(cfg.model.n_heads, a.n_heads);
  set(cfg.max_history, a.max_history);
  set(cfg.model.max_positions, a.max_positions);
  set(cfg.lr, a.lr);
  set(cfg.warmup_proportion, a.warmup);
  set(cfg.fusion_lr_multiplier, a.fusion_lr_mult);
  set(cfg.model.dropout, a.dropout);
  set(cfg.model.alpha, a.alpha);
  set(cfg.model.beta, a.beta);
  set(cfg.model.gamma, a.gamma);
  set(cfg.seed, a.seed);
  if (a.fusion_method.has_value()) cfg.model.fusion_method = ff::parse_fusion_method(*a.fusion_method);
  if (cfg.checkpoint_path.empty()) cfg.checkpoint_path = "model.ckpt";
  if (cfg.loss_log_path.empty()) cfg.loss_log_path = "loss_log.csv";
  return cfg;
}

int cmd_synth(uint64_t seed, int samples, int vocab_size, const std::string& out,
              const std::string& vocab_out) {
  auto corpus = ff::synth_corpus(seed, samples, vocab_size);
  ff::save_corpus(out, corpus);
  std::printf("wrote %zu samples to %s\n", corpus.size(), out.c_str());
  if (!vocab_out.empty()) {
    ff::Vocab vocab = ff::Vocab::from_corpus(corpus);
    vocab.save(vocab_out);
    std::printf("wrote vocabulary of %d tokens (incl. 4 reserved) to %s\n", vocab.size(),
                vocab_out.c_str());
  }
  return kExitOk;
}

int cmd_train(const TrainCliArgs& args) {
  ff::RunConfig cfg = resolve_train_config(args);
  require_file(cfg.corpus_path, "corpus");
  {
    // vocab_size is filled from the vocabulary below; range-check the rest
    // before any real work starts
    ff::RunConfig pre = cfg;
    pre.model.vocab_size = 1;
    pre.validate();
  }

  auto corpus = ff::load_corpus(cfg.corpus_path);
  if (corpus.empty()) throw UsageError("corpus is empty: " + cfg.corpus_path);
  ff::Vocab vocab;
  if (!cfg.vocab_path.empty()) {
    require_file(cfg.vocab_path, "vocab");
    vocab = ff::Vocab::load(cfg.vocab_path);
  } else {
    vocab = ff::Vocab::from_corpus(corpus);
  }
  cfg.model.vocab_size = vocab.size();
  cfg.validate();

  ff::BuildOptions opts{cfg.max_history, cfg.model.max_positions};
  std::vector<ff::BatchItem> items;
  items.reserve(corpus.size());
  for (const auto& s : corpus) items.push_back(ff::build_sample(s, vocab, opts));

  ff::Model model = ff::Model::init(cfg.model, cfg.seed);
  ff::TrainResult result = ff::train_model(model, items, cfg);

  for (int epoch = 1, i = 0; epoch <= cfg.epochs; ++epoch) {
    double total = 0, persona = 0, history = 0, pred = 0;
    int count = 0;
    for (; i < static_cast<int>(result.log.size()) && result.log[static_cast<size_t>(i)].epoch == epoch; ++i, ++count) {
      const auto& r = result.log[static_cast<size_t>(i)];
      total += r.loss_total;
      persona += r.loss_persona;
      history += r.loss_history;
      pred += r.loss_pred;
    }
    if (count)
      std::printf("epoch %d: loss=%.6f persona=%.6f history=%.6f pred=%.6f\n", epoch,
                  total / count, persona / count, history / count, pred / count);
  }

  ff::atomic_write_file(cfg.loss_log_path, ff::loss_log_csv(result.log));
  ff::save_checkpoint(cfg.checkpoint_path, model, vocab);
  std::printf("wrote checkpoint to %s and loss log to %s\n", cfg.checkpoint_path.c_str(),
              cfg.loss_log_path.c_str());
  return kExitOk;
}

int cmd_generate(const std::string& checkpoint_path, const std::string& corpus_path,
                 const std::string& out_path, int beam_size, int max_len, double penalty,
                 int max_history) {
  ff::Checkpoint ck = ff::load_checkpoint(checkpoint_path);
  auto corpus = ff::load_corpus(corpus_path);
  if (corpus.empty()) throw UsageError("corpus is empty: " + corpus_path);

  ff::BuildOptions opts{max_history, ck.model.cfg.max_positions};
  std::vector<ff::BatchItem> items;
  items.reserve(corpus.size());
  for (const auto& s : corpus) items.push_back(ff::build_sample(s, ck.vocab, opts));

  ff::DecodeConfig dc;
  dc.beam_size = beam_size;
  dc.max_len = max_len;
  dc.penalty_exponent = penalty;

  const int n = static_cast<int>(items.size());
  std::vector<ff::Hypothesis> hyps(static_cast<size_t>(n));
  ff::parallel_for(n, [&](int i) {
    const ff::BatchItem& item = items[static_cast<size_t>(i)];
    hyps[static_cast<size_t>(i)] =
        beam_size == 1 ? ff::greedy_decode(ck.model, item.persona, item.history, dc)
                       : ff::beam_search(ck.model, item.persona, item.history, dc);
  });

  std::string out;
  for (int i = 0; i < n; ++i) {
    const ff::Hypothesis& h = hyps[static_cast<size_t>(i)];
    nlohmann::json j{{"persona", corpus[static_cast<size_t>(i)].persona},
                     {"history", corpus[static_cast<size_t>(i)].history},
                     {"reply", ck.vocab.detokenize(h.tokens)},
                     {"score", ff::length_penalized_score(
                                   h.log_prob, static_cast<int>(h.tokens.size()), penalty)}};
    out += j.dump();
    out += '\n';
  }
  ff::atomic_write_file(out_path, out);
  std::printf("wrote %d replies to %s\n", n, out_path.c_str());
  return kExitOk;
}

int cmd_evaluate(const std::string& refs_path, const std::string& hyps_path,
                 const std::string& out_path) {
  auto ref_lines = load_reply_lines(refs_path);
  auto hyp_lines = load_reply_lines(hyps_path);
  if (ref_lines.empty()) throw UsageError("no references in " + refs_path);
  if (ref_lines.size() != hyp_lines.size())
    throw UsageError("count mismatch: " + std::to_string(ref_lines.size()) + " references vs " +
                     std::to_string(hyp_lines.size()) + " hypotheses");

  auto refs = ff::metrics::tokenize_corpus(ref_lines);
  auto hyps = ff::metrics::tokenize_corpus(hyp_lines);
  ff::metrics::EvalReport report = ff::metrics::evaluate_corpus(refs, hyps);

  fs::path json_path(out_path);
  fs::path csv_path(out_path);
  csv_path.replace_extension(".csv");
  if (csv_path == json_path) csv_path += ".csv";
  ff::atomic_write_file(json_path, ff::metrics::to_json(report).dump(2) + "\n");
  ff::atomic_write_file(csv_path, ff::metrics::to_csv(report));

  std::printf("bleu_pct=%.4f nist4=%.4f entropy4=%.4f distinct2_pct=%.4f avg_len=%.4f\n",
              report.bleu_pct, report.nist4, report.entropy4, report.distinct2_pct,
              report.avg_len);
  std::printf("notes: BLEU uses epsilon smoothing (1e-9) on zero precisions; "
              "entropy uses natural log; tokenization is lowercased whitespace\n");
  std::printf("wrote %s and %s\n", json_path.c_str(), csv_path.c_str());
  return kExitOk;
}

int cmd_inspect_weights(const std::string& checkpoint_path, const std::string& out_path) {
  ff::Checkpoint ck = ff::load_checkpoint(checkpoint_path);
  std::vector<ff::FusionWeightRow> rows;
  try {
    rows = ff::fusion_weight_rows(ck.model);
  } catch (const ff::ContractError& e) {
    throw UsageError(e.what());
  }
  ff::atomic_write_file(out_path, ff::fusion_weights_csv(rows));
  for (const auto& r : rows)
    std::printf("layer %d: current=%.4f persona=%.4f history=%.4f\n", r.layer, r.w_current,
                r.w_persona, r.w_history);
  std::printf("wrote %s\n", out_path.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-source dialogue transformer: train, generate, evaluate"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic persona-dialogue corpus");
  uint64_t synth_seed = 0;
  int synth_samples = 200, synth_vocab = 200;
  std::string synth_out, synth_vocab_out;
  synth->add_option("--seed", synth_seed, "rng seed");
  synth->add_option("--samples", synth_samples, "number of samples");
  synth->add_option("--vocab-size", synth_vocab, "vocabulary budget");
  synth->add_option("--out", synth_out, "output corpus JSONL")->required();
  synth->add_option("--vocab-out", synth_vocab_out, "output vocabulary file");

  // train
  auto* train = app.add_subcommand("train", "train a model on a corpus");
  TrainCliArgs ta;
  train->add_option("--config", ta.config_path, "JSON config; flags override file values");
  train->add_option("--corpus", ta.corpus, "corpus JSONL");
  train->add_option("--vocab", ta.vocab, "vocabulary file (derived from corpus when absent)");
  train->add_option("--checkpoint-out", ta.checkpoint_out, "output checkpoint path");
  train->add_option("--loss-log-out", ta.loss_log_out, "output loss CSV path");
  train->add_option("--fusion-method", ta.fusion_method, "avg|max|min|sw|dw|linear|att");
  train->add_option("--epochs", ta.epochs);
  train->add_option("--batch-size", ta.batch_size);
  train->add_option("--n-layers", ta.n_layers);
  train->add_option("--d-model", ta.d_model);
  train->add_option("--n-heads", ta.n_heads);
  train->add_option("--max-history", ta.max_history);
  train->add_option("--max-positions", ta.max_positions);
  train->add_option("--lr", ta.lr);
  train->add_option("--warmup-proportion", ta.warmup);
  train->add_option("--fusion-lr-multiplier", ta.fusion_lr_mult);
  train->add_option("--dropout", ta.dropout);
  train->add_option("--alpha", ta.alpha);
  train->add_option("--beta", ta.beta);
  train->add_option("--gamma", ta.gamma);
  train->add_option("--seed", ta.seed);

  // generate
  auto* gen = app.add_subcommand("generate", "decode replies for a corpus");
  std::string gen_ckpt, gen_corpus, gen_out;
  int gen_beam = 3, gen_max_len = 24, gen_max_history = 7;
  double gen_penalty = 0.6;
  gen->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
  gen->add_option("--corpus", gen_corpus, "input corpus JSONL")->required();
  gen->add_option("--out", gen_out, "output replies JSONL")->required();
  gen->add_option("--beam-size", gen_beam);
  gen->add_option("--max-len", gen_max_len);
  gen->add_option("--length-penalty", gen_penalty, "length penalty exponent");
  gen->add_option("--max-history", gen_max_history);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "score hypotheses against references");
  std::string eval_refs, eval_hyps, eval_out;
  eval->add_option("--refs", eval_refs, "references (JSONL with 'reply' or plain text)")
      ->required();
  eval->add_option("--hyps", eval_hyps, "hypotheses (JSONL with 'reply' or plain text)")
      ->required();
  eval->add_option("--out", eval_out, "output report JSON (CSV written alongside)")->required();

  // inspect-weights
  auto* inspect = app.add_subcommand("inspect-weights", "export per-layer fusion weights");
  std::string ins_ckpt, ins_out;
  inspect->add_option("--checkpoint", ins_ckpt, "model checkpoint")->required();
  inspect->add_option("--out", ins_out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_seed, synth_samples, synth_vocab, synth_out,
                                          synth_vocab_out);
    if (train->parsed()) return cmd_train(ta);
    if (gen->parsed())
      return cmd_generate(gen_ckpt, gen_corpus, gen_out, gen_beam, gen_max_len, gen_penalty,
                          gen_max_history);
    if (eval->parsed()) return cmd_evaluate(eval_refs, eval_hyps, eval_out);
    if (inspect->parsed()) return cmd_inspect_weights(ins_ckpt, ins_out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const ff::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
