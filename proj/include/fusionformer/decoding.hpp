#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fusionformer/errors.hpp"
#include "fusionformer/model.hpp"

namespace fusionformer {

// Partial decoded sequence. `tokens` holds generated ids (BOS excluded,
// EOS included once emitted); log_prob is the sum of token log-probs.
struct Hypothesis {
  std::vector<int> tokens;
  double log_prob = 0.0;
  bool finished = false;
};

// GNMT-style penalty lp(L) = ((5 + L) / 6)^exponent; exponent 0 disables it.
inline double length_penalty(int length, double exponent) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, exponent);
}

inline double length_penalized_score(double log_prob, int length, double exponent) {
  if (length < 1) throw ContractError("length_penalized_score: length must be >= 1");
  return log_prob / length_penalty(length, exponent);
}

struct DecodeConfig {
  int beam_size = 3;
  int max_len = 24;
  double penalty_exponent = 0.6;
  int vocab_size = 0;
  int bos_id = Vocab::kBos;
  int eos_id = Vocab::kEos;

  void validate() const {
    if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  }
};

namespace detail {

// Orders candidates by log-prob descending, ties by lexicographically
// smallest token sequence. A strict total order keeps top-k sets nested
// across beam sizes and makes every decode deterministic.
inline bool better_candidate(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

}  // namespace detail

// Generic beam search over a step scorer. `next_log_probs(prefix)` returns
// the log-probability of each vocabulary id following the generated prefix
// (BOS handling belongs to the scorer). Finished hypotheses are retired;
// the result is the retired hypothesis with the highest length-penalized
// score, ties broken by smallest token sequence.
template <class StepFn>
Hypothesis beam_search_core(StepFn&& next_log_probs, const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;

  for (int step = 1; step <= cfg.max_len && !live.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    candidates.reserve(live.size() * static_cast<size_t>(cfg.vocab_size));
    for (const Hypothesis& hyp : live) {
      const std::vector<double> lp = next_log_probs(hyp.tokens);
      for (int tok = 0; tok < cfg.vocab_size; ++tok) {
        Hypothesis next;
        next.tokens = hyp.tokens;
        next.tokens.push_back(tok);
        next.log_prob = hyp.log_prob + lp[static_cast<size_t>(tok)];
        candidates.push_back(std::move(next));
      }
    }
    const size_t keep = std::min<size_t>(candidates.size(), static_cast<size_t>(cfg.beam_size));
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(keep),
                      candidates.end(), detail::better_candidate);
    candidates.resize(keep);
    live.clear();
    for (Hypothesis& c : candidates) {
      if (c.tokens.back() == cfg.eos_id || static_cast<int>(c.tokens.size()) == cfg.max_len) {
        c.finished = true;
        finished.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
  }

  const Hypothesis* best = nullptr;
  double best_score = 0.0;
  for (const Hypothesis& h : finished) {
    const double s =
        length_penalized_score(h.log_prob, static_cast<int>(h.tokens.size()), cfg.penalty_exponent);
    if (best == nullptr || s > best_score || (s == best_score && h.tokens < best->tokens)) {
      best = &h;
      best_score = s;
    }
  }
  if (best == nullptr) throw ContractError("beam_search: no hypothesis finished");
  return *best;
}

// Greedy argmax decode; ties pick the smallest id. Equivalent to beam size 1.
template <class StepFn>
Hypothesis greedy_core(StepFn&& next_log_probs, const DecodeConfig& cfg) {
  cfg.validate();
  Hypothesis hyp;
  for (int step = 1; step <= cfg.max_len; ++step) {
    const std::vector<double> lp = next_log_probs(hyp.tokens);
    int best = 0;
    for (int tok = 1; tok < cfg.vocab_size; ++tok)
      if (lp[static_cast<size_t>(tok)] > lp[static_cast<size_t>(best)]) best = tok;
    hyp.tokens.push_back(best);
    hyp.log_prob += lp[static_cast<size_t>(best)];
    if (best == cfg.eos_id) break;
  }
  hyp.finished = true;
  return hyp;
}

// Scores reply continuations of a frozen model conditioned on one sample's
// encoded persona and history. Pure; shareable across threads.
class ReplyScorer {
 public:
  ReplyScorer(const Model& model, const SourceSeq& persona, const SourceSeq& history, int bos_id)
      : model_(&model), bos_id_(bos_id) {
    NoGradGuard ng;
    hp_ = model.encode_source(persona, SourceTag::kPersona);
    hh_ = model.encode_source(history, SourceTag::kHistory);
  }

  std::vector<double> operator()(const std::vector<int>& generated) const {
    NoGradGuard ng;
    SourceSeq reply;
    reply.tokens.reserve(generated.size() + 1);
    reply.tokens.push_back(bos_id_);
    reply.tokens.insert(reply.tokens.end(), generated.begin(), generated.end());
    const int n = static_cast<int>(reply.tokens.size());
    reply.positions.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) reply.positions[static_cast<size_t>(i)] = i;
    reply.types.assign(static_cast<size_t>(n), kTypeReply);

    Tensor h = model_->decode(reply, hp_, hh_);
    Tensor logits = model_->predict_logits(h);
    const int v = logits.cols();
    std::vector<double> lp(static_cast<size_t>(v));
    const double* row = logits.data().data() + static_cast<size_t>(n - 1) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double logz = std::log(z) + mx;
    for (int j = 0; j < v; ++j) lp[static_cast<size_t>(j)] = row[j] - logz;
    return lp;
  }

 private:
  const Model* model_;
  int bos_id_;
  EncodedState hp_, hh_;
};

inline Hypothesis beam_search(const Model& model, const SourceSeq& persona,
                              const SourceSeq& history, DecodeConfig cfg) {
  cfg.vocab_size = model.cfg.vocab_size;
  ReplyScorer scorer(model, persona, history, cfg.bos_id);
  return beam_search_core(scorer, cfg);
}

inline Hypothesis greedy_decode(const Model& model, const SourceSeq& persona,
                                const SourceSeq& history, DecodeConfig cfg) {
  cfg.vocab_size = model.cfg.vocab_size;
  cfg.beam_size = 1;
  ReplyScorer scorer(model, persona, history, cfg.bos_id);
  return greedy_core(scorer, cfg);
}

}  // namespace fusionformer
