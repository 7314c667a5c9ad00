#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusionformer/errors.hpp"
#include "fusionformer/util.hpp"

namespace fusionformer {

// One corpus record: a persona description (1..5 sentences), a dialogue
// history with alternating speakers (parity of the utterance index gives the
// speaker), and the gold reply.
struct DialogueSample {
  std::vector<std::string> persona;
  std::vector<std::string> history;
  std::string reply;
};

// Closed whitespace vocabulary with fixed reserved ids.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kReserved = 4;

  Vocab() = default;

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    for (const std::string& t : tokens) {
      std::string low = to_lower(t);
      if (v.ids_.count(low)) throw VocabularyError("duplicate vocabulary token '" + low + "'");
      v.ids_[low] = kReserved + static_cast<int>(v.tokens_.size());
      v.tokens_.push_back(low);
    }
    return v;
  }

  static Vocab from_corpus(const std::vector<DialogueSample>& corpus) {
    std::set<std::string> unique;
    auto add = [&unique](const std::string& text) {
      for (const std::string& t : split_ws(to_lower(text))) unique.insert(t);
    };
    for (const DialogueSample& s : corpus) {
      for (const auto& p : s.persona) add(p);
      for (const auto& h : s.history) add(h);
      add(s.reply);
    }
    return from_tokens({unique.begin(), unique.end()});
  }

  // One token per line; line number = id - reserved count.
  static Vocab load(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) tokens.push_back(line);
    }
    return from_tokens(tokens);
  }

  void save(const std::filesystem::path& path) const {
    std::string out;
    for (const std::string& t : tokens_) {
      out += t;
      out += '\n';
    }
    atomic_write_file(path, out);
  }

  int size() const { return kReserved + static_cast<int>(tokens_.size()); }

  int id_of(const std::string& token) const {
    auto it = ids_.find(to_lower(token));
    if (it == ids_.end())
      throw VocabularyError("unknown token '" + token + "' (closed vocabulary of size " +
                            std::to_string(size()) + ")");
    return it->second;
  }

  const std::string& token_of(int id) const {
    static const std::vector<std::string> reserved = {"<pad>", "<bos>", "<eos>", "<sep>"};
    if (id >= 0 && id < kReserved) return reserved[static_cast<size_t>(id)];
    const int idx = id - kReserved;
    if (idx < 0 || idx >= static_cast<int>(tokens_.size()))
      throw VocabularyError("id " + std::to_string(id) + " out of range for vocabulary of size " +
                            std::to_string(size()));
    return tokens_[static_cast<size_t>(idx)];
  }

  // Lowercase whitespace tokenization against the closed vocabulary.
  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> out;
    for (const std::string& t : split_ws(to_lower(text))) out.push_back(id_of(t));
    return out;
  }

  // Inverse of tokenize up to normalization; reserved ids are dropped.
  std::string detokenize(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int id : ids) {
      if (id < kReserved) continue;
      words.push_back(token_of(id));
    }
    return join(words, " ");
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::map<std::string, int> ids_;
  std::vector<std::string> tokens_;
};

// Token type ids used by the embedding layer.
enum TokenType : int {
  kTypePersona = 0,
  kTypeSpeakerA = 1,
  kTypeSpeakerB = 2,
  kTypeReply = 3,
};

// One tokenized input source: ids, per-source positions restarting at 0,
// token types, and left-shifted next-token targets (last position padded).
struct SourceSeq {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<int> types;
  std::vector<int> targets;

  int length() const { return static_cast<int>(tokens.size()); }
};

// A fully prepared training/inference item.
struct BatchItem {
  SourceSeq persona;
  SourceSeq history;
  SourceSeq reply;
};

struct BuildOptions {
  int max_history = 7;     // keep only the latest utterances
  int max_positions = 256; // per-source hard length limit
};

namespace detail {

inline void finish_source(SourceSeq& s) {
  const int n = s.length();
  s.positions.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) s.positions[static_cast<size_t>(i)] = i;
  s.targets.assign(s.tokens.begin() + 1, s.tokens.end());
  s.targets.push_back(0 /* pad */);
}

}  // namespace detail

// Tokenizes one sample. Persona sentences are joined with separators (all
// type 0); only the latest `max_history` utterances are kept, with speaker
// types 1/2 from the parity of the original utterance index; the reply is
// wrapped in BOS...EOS with type 3. Positions restart at 0 per source.
inline BatchItem build_sample(const DialogueSample& sample, const Vocab& vocab,
                              const BuildOptions& opts = {}) {
  if (sample.persona.empty() || sample.persona.size() > 5)
    throw ContractError("persona must have 1..5 sentences, got " +
                        std::to_string(sample.persona.size()));
  if (sample.history.empty()) throw ContractError("history must be non-empty");
  if (sample.reply.empty()) throw ContractError("reply must be non-empty");

  BatchItem item;

  for (size_t i = 0; i < sample.persona.size(); ++i) {
    if (i) item.persona.tokens.push_back(Vocab::kSep);
    for (int id : vocab.tokenize(sample.persona[i])) item.persona.tokens.push_back(id);
  }
  item.persona.types.assign(item.persona.tokens.size(), kTypePersona);

  const int n_hist = static_cast<int>(sample.history.size());
  const int first = std::max(0, n_hist - opts.max_history);
  for (int i = first; i < n_hist; ++i) {
    const int type = (i % 2 == 0) ? kTypeSpeakerA : kTypeSpeakerB;
    if (i > first) {
      // separator carries the type of the utterance it introduces
      item.history.tokens.push_back(Vocab::kSep);
      item.history.types.push_back(type);
    }
    for (int id : vocab.tokenize(sample.history[static_cast<size_t>(i)])) {
      item.history.tokens.push_back(id);
      item.history.types.push_back(type);
    }
  }

  item.reply.tokens.push_back(Vocab::kBos);
  for (int id : vocab.tokenize(sample.reply)) item.reply.tokens.push_back(id);
  item.reply.tokens.push_back(Vocab::kEos);
  item.reply.types.assign(item.reply.tokens.size(), kTypeReply);

  struct Named {
    const char* name;
    SourceSeq* seq;
  };
  for (auto [name, seq] : {Named{"persona", &item.persona}, Named{"history", &item.history},
                           Named{"reply", &item.reply}}) {
    if (seq->length() == 0) throw ContractError(std::string(name) + " tokenized to empty");
    if (seq->length() > opts.max_positions)
      throw LengthError(std::string(name) + " length " + std::to_string(seq->length()) +
                        " exceeds max_positions " + std::to_string(opts.max_positions));
    detail::finish_source(*seq);
  }
  return item;
}

// --------------------------------------------------------------------------
// Corpus JSONL I/O. One object per line:
//   {"persona": [...], "history": [...], "reply": "..."}

inline std::vector<DialogueSample> load_corpus(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<DialogueSample> corpus;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corpus " + path.string() + " line " + std::to_string(line_no) + ": " +
                    e.what());
    }
    DialogueSample s;
    try {
      s.persona = j.at("persona").get<std::vector<std::string>>();
      s.history = j.at("history").get<std::vector<std::string>>();
      s.reply = j.at("reply").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corpus " + path.string() + " line " + std::to_string(line_no) +
                    ": bad record: " + e.what());
    }
    corpus.push_back(std::move(s));
  }
  return corpus;
}

inline std::string corpus_to_jsonl(const std::vector<DialogueSample>& corpus) {
  std::string out;
  for (const DialogueSample& s : corpus) {
    nlohmann::json j{{"persona", s.persona}, {"history", s.history}, {"reply", s.reply}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void save_corpus(const std::filesystem::path& path,
                        const std::vector<DialogueSample>& corpus) {
  atomic_write_file(path, corpus_to_jsonl(corpus));
}

// --------------------------------------------------------------------------
// Synthetic persona-dialogue generator.
//
// Every sample follows one template: the persona states favorite-<attribute>
// facts, the final history utterance asks about one of those attributes, and
// the gold reply restates the matching fact. The replier has already echoed
// the questioned fact earlier in the history (as PersonaChat speakers tend
// to), so the reply is recoverable from the history window as well as from
// the persona. The reply is a pure function of (persona fact, last
// utterance), which the tests invert.

namespace synth {

struct Template {
  std::vector<std::string> attrs;
  std::vector<std::vector<std::string>> values;  // per attribute, disjoint
  std::vector<std::string> cities, nouns, jobs;
  std::vector<std::string> fillers_a, fillers_b;

  static Template with_budget(int vocab_size);

  std::string fact(const std::string& attr, const std::string& value) const {
    return "my favorite " + attr + " is " + value + " .";
  }
  std::string question(const std::string& attr) const {
    return "what is your favorite " + attr + " ?";
  }

  std::vector<std::string> all_tokens() const {
    std::set<std::string> u;
    auto add = [&u](const std::string& text) {
      for (const std::string& t : split_ws(text)) u.insert(t);
    };
    for (const auto& a : attrs) {
      add(fact(a, "x"));
      add(question(a));
    }
    u.erase("x");
    for (const auto& vs : values)
      for (const auto& v : vs) u.insert(v);
    for (const auto& c : cities) add("i live in " + c + " .");
    for (const auto& n : nouns) add("i have a " + n + " .");
    for (const auto& jb : jobs) add("i work as a " + jb + " .");
    for (const auto& f : fillers_a) add(f);
    for (const auto& f : fillers_b) add(f);
    return {u.begin(), u.end()};
  }
};

inline Template Template::with_budget(int vocab_size) {
  Template t;
  t.attrs = {"color", "animal", "food", "sport", "drink"};
  t.values = {
      {"red", "blue", "green", "yellow", "purple", "orange", "pink", "white"},
      {"cat", "dog", "bird", "horse", "fish", "lion", "tiger", "bear"},
      {"pizza", "pasta", "salad", "soup", "bread", "cheese", "rice", "cake"},
      {"soccer", "tennis", "golf", "hockey", "running", "swimming", "chess", "boxing"},
      {"coffee", "tea", "juice", "milk", "soda", "water", "lemonade", "cocoa"},
  };
  t.cities = {"paris", "london", "tokyo", "sydney", "cairo", "oslo"};
  t.nouns = {"car", "bike", "piano", "garden", "robot", "lamp"};
  t.jobs = {"teacher", "doctor", "artist", "farmer", "pilot", "clerk"};
  t.fillers_a = {"hello there friend",          "hi how are you today",
                 "tell me something about yourself", "the weather is lovely today",
                 "do you enjoy the weekend",    "that sounds really nice"};
  t.fillers_b = {"i am doing fine thanks", "i had a busy day at work",
                 "that sounds really nice", "i am glad to chat with you"};

  // Trim the content word lists until the closed vocabulary fits the budget.
  auto vocab_count = [&t] { return static_cast<int>(t.all_tokens().size()) + Vocab::kReserved; };
  int per_attr = 8, per_misc = 6;
  while (vocab_count() > vocab_size && (per_attr > 2 || per_misc > 2)) {
    if (per_attr > 2) {
      --per_attr;
      for (auto& vs : t.values) vs.resize(static_cast<size_t>(per_attr));
    } else {
      --per_misc;
      t.cities.resize(static_cast<size_t>(per_misc));
      t.nouns.resize(static_cast<size_t>(per_misc));
      t.jobs.resize(static_cast<size_t>(per_misc));
    }
  }
  if (vocab_count() > vocab_size)
    throw ConfigError("synth_corpus: vocab_size " + std::to_string(vocab_size) +
                      " too small; need at least " + std::to_string(vocab_count()));
  return t;
}

}  // namespace synth

// Deterministic synthetic corpus; same seed yields identical output.
inline std::vector<DialogueSample> synth_corpus(uint64_t seed, int n_samples, int vocab_size) {
  if (n_samples < 1) throw ContractError("synth_corpus: n_samples must be >= 1");
  const synth::Template tpl = synth::Template::with_budget(vocab_size);
  Rng rng(seed);
  auto pick = [&rng](const std::vector<std::string>& v) -> const std::string& {
    return v[std::uniform_int_distribution<size_t>(0, v.size() - 1)(rng)];
  };

  std::vector<DialogueSample> corpus;
  corpus.reserve(static_cast<size_t>(n_samples));
  for (int s = 0; s < n_samples; ++s) {
    DialogueSample sample;

    // Two facts with distinct attributes; the question targets one of them.
    const size_t a0 = std::uniform_int_distribution<size_t>(0, tpl.attrs.size() - 1)(rng);
    size_t a1 = std::uniform_int_distribution<size_t>(0, tpl.attrs.size() - 2)(rng);
    if (a1 >= a0) ++a1;
    const std::string v0 = pick(tpl.values[a0]);
    const std::string v1 = pick(tpl.values[a1]);
    const bool ask_first = std::uniform_int_distribution<int>(0, 1)(rng) == 0;
    const size_t aq = ask_first ? a0 : a1;
    const std::string& vq = ask_first ? v0 : v1;

    sample.persona.push_back(tpl.fact(tpl.attrs[a0], v0));
    sample.persona.push_back(tpl.fact(tpl.attrs[a1], v1));
    const int n_extra = std::uniform_int_distribution<int>(0, 3)(rng);
    for (int e = 0; e < n_extra; ++e) {
      switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
        case 0: sample.persona.push_back("i live in " + pick(tpl.cities) + " ."); break;
        case 1: sample.persona.push_back("i have a " + pick(tpl.nouns) + " ."); break;
        default: sample.persona.push_back("i work as a " + pick(tpl.jobs) + " ."); break;
      }
    }

    // Odd history length so the final utterance is the asker's. The echo of
    // the questioned fact sits at index n-2 (replier side), the other fact
    // at n-4 when it fits; both stay inside the 7-utterance window.
    const int n_hist = 3 + 2 * std::uniform_int_distribution<int>(0, 4)(rng);
    sample.history.resize(static_cast<size_t>(n_hist));
    sample.history[static_cast<size_t>(n_hist - 1)] = tpl.question(tpl.attrs[aq]);
    sample.history[static_cast<size_t>(n_hist - 2)] = tpl.fact(tpl.attrs[aq], vq);
    if (n_hist >= 5)
      sample.history[static_cast<size_t>(n_hist - 4)] =
          tpl.fact(tpl.attrs[ask_first ? a1 : a0], ask_first ? v1 : v0);
    for (int i = 0; i < n_hist; ++i) {
      auto& slot = sample.history[static_cast<size_t>(i)];
      if (!slot.empty()) continue;
      slot = (i % 2 == 0) ? pick(tpl.fillers_a) : pick(tpl.fillers_b);
    }

    sample.reply = tpl.fact(tpl.attrs[aq], vq);
    corpus.push_back(std::move(sample));
  }
  return corpus;
}

}  // namespace fusionformer
