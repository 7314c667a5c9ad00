#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusionformer/errors.hpp"
#include "fusionformer/util.hpp"

namespace fusionformer {
namespace metrics {

using Sentence = std::vector<std::string>;

// Metric-side tokenization: lowercase whitespace split, no vocabulary.
inline Sentence metric_tokenize(const std::string& text) { return split_ws(to_lower(text)); }

inline std::vector<Sentence> tokenize_corpus(const std::vector<std::string>& lines) {
  std::vector<Sentence> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(metric_tokenize(l));
  return out;
}

namespace detail {

inline std::string ngram_key(const Sentence& s, size_t start, size_t n) {
  std::string key = s[start];
  for (size_t i = 1; i < n; ++i) {
    key += '\x1f';
    key += s[start + i];
  }
  return key;
}

inline std::map<std::string, long> ngram_counts(const Sentence& s, size_t n) {
  std::map<std::string, long> counts;
  if (s.size() >= n)
    for (size_t i = 0; i + n <= s.size(); ++i) ++counts[ngram_key(s, i, n)];
  return counts;
}

inline void check_aligned(const std::vector<Sentence>& refs, const std::vector<Sentence>& hyps,
                          const char* metric) {
  if (refs.empty()) throw ContractError(std::string(metric) + ": empty corpus");
  if (refs.size() != hyps.size())
    throw ContractError(std::string(metric) + ": " + std::to_string(refs.size()) +
                        " references vs " + std::to_string(hyps.size()) + " hypotheses");
}

}  // namespace detail

// Smoothing floor applied to any zero modified precision so tiny corpora do
// not collapse the geometric mean to -inf.
inline constexpr double kBleuEpsilon = 1e-9;

struct BleuBreakdown {
  std::array<long, 4> matched{};  // clipped n-gram matches, n = 1..4
  std::array<long, 4> total{};    // hypothesis n-gram counts
  long hyp_len = 0;
  long ref_len = 0;
  double brevity_penalty = 0.0;
  double bleu_pct = 0.0;
};

// Corpus BLEU-4: geometric mean of modified 1..4-gram precisions times the
// brevity penalty, scaled to a percentage.
inline BleuBreakdown bleu_breakdown(const std::vector<Sentence>& refs,
                                    const std::vector<Sentence>& hyps) {
  detail::check_aligned(refs, hyps, "bleu");
  BleuBreakdown b;
  for (size_t i = 0; i < refs.size(); ++i) {
    b.hyp_len += static_cast<long>(hyps[i].size());
    b.ref_len += static_cast<long>(refs[i].size());
    for (size_t n = 1; n <= 4; ++n) {
      const auto hyp_counts = detail::ngram_counts(hyps[i], n);
      const auto ref_counts = detail::ngram_counts(refs[i], n);
      for (const auto& [g, c] : hyp_counts) {
        b.total[n - 1] += c;
        auto it = ref_counts.find(g);
        if (it != ref_counts.end()) b.matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (b.hyp_len == 0) return b;  // no output tokens at all
  double log_prec_sum = 0.0;
  for (size_t n = 0; n < 4; ++n) {
    const double p = (b.total[n] > 0 && b.matched[n] > 0)
                         ? static_cast<double>(b.matched[n]) / static_cast<double>(b.total[n])
                         : kBleuEpsilon;
    log_prec_sum += std::log(p);
  }
  b.brevity_penalty =
      b.hyp_len >= b.ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(b.ref_len) / static_cast<double>(b.hyp_len));
  b.bleu_pct = 100.0 * b.brevity_penalty * std::exp(log_prec_sum / 4.0);
  return b;
}

inline double bleu(const std::vector<Sentence>& refs, const std::vector<Sentence>& hyps) {
  return bleu_breakdown(refs, hyps).bleu_pct;
}

// NIST-4: information-weighted n-gram precision with the NIST brevity
// penalty. Information weights come from the reference corpus statistics:
// Info(w1..wn) = log2(count(w1..w_{n-1}) / count(w1..wn)), the prefix count
// for unigrams being the total reference word count.
inline double nist4(const std::vector<Sentence>& refs, const std::vector<Sentence>& hyps) {
  detail::check_aligned(refs, hyps, "nist4");
  constexpr int kMaxN = 4;

  std::array<std::map<std::string, long>, kMaxN> ref_grams;
  long ref_words = 0;
  for (const Sentence& r : refs) {
    ref_words += static_cast<long>(r.size());
    for (int n = 1; n <= kMaxN; ++n)
      for (const auto& [g, c] : detail::ngram_counts(r, static_cast<size_t>(n)))
        ref_grams[static_cast<size_t>(n - 1)][g] += c;
  }

  auto info = [&](const std::string& g, int n) -> double {
    const long full = ref_grams[static_cast<size_t>(n - 1)].at(g);
    long prefix;
    if (n == 1) {
      prefix = ref_words;
    } else {
      const size_t cut = g.rfind('\x1f');
      prefix = ref_grams[static_cast<size_t>(n - 2)].at(g.substr(0, cut));
    }
    return std::log2(static_cast<double>(prefix) / static_cast<double>(full));
  };

  std::array<double, kMaxN> numer{};
  std::array<long, kMaxN> denom{};
  long hyp_len = 0;
  for (size_t i = 0; i < refs.size(); ++i) {
    hyp_len += static_cast<long>(hyps[i].size());
    for (int n = 1; n <= kMaxN; ++n) {
      const auto hyp_counts = detail::ngram_counts(hyps[i], static_cast<size_t>(n));
      const auto ref_counts = detail::ngram_counts(refs[i], static_cast<size_t>(n));
      for (const auto& [g, c] : hyp_counts) {
        denom[static_cast<size_t>(n - 1)] += c;
        auto it = ref_counts.find(g);
        if (it != ref_counts.end())
          numer[static_cast<size_t>(n - 1)] += info(g, n) * static_cast<double>(std::min(c, it->second));
      }
    }
  }

  double score = 0.0;
  for (int n = 0; n < kMaxN; ++n)
    if (denom[static_cast<size_t>(n)] > 0)
      score += numer[static_cast<size_t>(n)] / static_cast<double>(denom[static_cast<size_t>(n)]);

  if (hyp_len == 0 || ref_words == 0) return 0.0;
  const double beta = -std::log(2.0) / (std::log(1.5) * std::log(1.5));
  const double ratio = std::min(1.0, static_cast<double>(hyp_len) / static_cast<double>(ref_words));
  const double bp = std::exp(beta * std::log(ratio) * std::log(ratio));
  return score * bp;
}

// 100 * unique n-grams / total n-grams over the whole corpus.
inline double distinct_n(const std::vector<Sentence>& corpus, int n) {
  std::map<std::string, long> counts;
  long total = 0;
  for (const Sentence& s : corpus)
    for (const auto& [g, c] : detail::ngram_counts(s, static_cast<size_t>(n))) {
      counts[g] += c;
      total += c;
    }
  if (total == 0)
    throw ContractError("distinct_n: no " + std::to_string(n) +
                        "-grams (all sentences shorter than n)");
  return 100.0 * static_cast<double>(counts.size()) / static_cast<double>(total);
}

// Shannon entropy (natural log) of the empirical n-gram distribution.
inline double entropy_n(const std::vector<Sentence>& corpus, int n) {
  std::map<std::string, long> counts;
  long total = 0;
  for (const Sentence& s : corpus)
    for (const auto& [g, c] : detail::ngram_counts(s, static_cast<size_t>(n))) {
      counts[g] += c;
      total += c;
    }
  if (total == 0)
    throw ContractError("entropy_n: no " + std::to_string(n) +
                        "-grams (all sentences shorter than n)");
  double h = 0.0;
  for (const auto& [g, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

inline double avg_len(const std::vector<Sentence>& hyps) {
  if (hyps.empty()) throw ContractError("avg_len: empty corpus");
  long total = 0;
  for (const Sentence& s : hyps) total += static_cast<long>(s.size());
  return static_cast<double>(total) / static_cast<double>(hyps.size());
}

struct EvalReport {
  double bleu_pct = 0.0;
  double nist4 = 0.0;
  double entropy4 = 0.0;
  double distinct2_pct = 0.0;
  double avg_len = 0.0;
};

inline EvalReport evaluate_corpus(const std::vector<Sentence>& refs,
                                  const std::vector<Sentence>& hyps) {
  EvalReport r;
  r.bleu_pct = bleu(refs, hyps);
  r.nist4 = metrics::nist4(refs, hyps);
  r.entropy4 = entropy_n(hyps, 4);
  r.distinct2_pct = distinct_n(hyps, 2);
  r.avg_len = metrics::avg_len(hyps);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  return nlohmann::json{{"bleu_pct", r.bleu_pct},
                        {"nist4", r.nist4},
                        {"entropy4", r.entropy4},
                        {"distinct2_pct", r.distinct2_pct},
                        {"avg_len", r.avg_len}};
}

// One-row CSV matching the results-table column order.
inline std::string to_csv(const EvalReport& r) {
  return "bleu_pct,nist4,entropy4,distinct2_pct,avg_len\n" + fmt_double(r.bleu_pct) + "," +
         fmt_double(r.nist4) + "," + fmt_double(r.entropy4) + "," + fmt_double(r.distinct2_pct) +
         "," + fmt_double(r.avg_len) + "\n";
}

}  // namespace metrics
}  // namespace fusionformer
