#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hran/error.hpp"
#include "hran/rng.hpp"
#include "hran/types.hpp"

namespace hran {

// Structural UTF-8 check: correct continuation bytes, no overlongs, no
// surrogates, nothing above U+10FFFF.
inline bool utf8_valid(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t need;
    std::uint32_t cp;
    if (c < 0x80) {
      i += 1;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      need = 1;
      cp = c & 0x1Fu;
    } else if ((c & 0xF0) == 0xE0) {
      need = 2;
      cp = c & 0x0Fu;
    } else if ((c & 0xF8) == 0xF0) {
      need = 3;
      cp = c & 0x07u;
    } else {
      return false;
    }
    if (i + need >= s.size()) return false;
    for (std::size_t k = 1; k <= need; ++k) {
      const unsigned char cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3Fu);
    }
    if (need == 1 && cp < 0x80) return false;
    if (need == 2 && cp < 0x800) return false;
    if (need == 3 && cp < 0x10000) return false;
    if (cp >= 0xD800 && cp <= 0xDFFF) return false;
    if (cp > 0x10FFFF) return false;
    i += need + 1;
  }
  return true;
}

struct Conversation {
  std::vector<std::vector<std::string>> turns;
};

// A training example: m >= 2 context utterances plus the response (the
// conversation's last turn).
struct Example {
  std::vector<std::vector<std::string>> context;
  std::vector<std::string> response;
};

// Raw corpus format: one conversation per line, TAB between turns, single
// spaces between tokens. Blank lines, empty tokens, and empty turns are
// skipped rather than rejected.
inline std::vector<Conversation> load_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_raw: cannot open " + path);
  std::vector<Conversation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!utf8_valid(line)) {
      throw FormatError("load_raw: " + path + ":" + std::to_string(line_no) +
                        ": invalid UTF-8");
    }
    Conversation conv;
    std::size_t turn_start = 0;
    while (turn_start <= line.size()) {
      std::size_t tab = line.find('\t', turn_start);
      const std::string_view turn(line.data() + turn_start,
                                  (tab == std::string::npos ? line.size() : tab) - turn_start);
      std::vector<std::string> tokens;
      std::size_t tok_start = 0;
      while (tok_start <= turn.size()) {
        std::size_t sp = turn.find(' ', tok_start);
        const std::string_view tok =
            turn.substr(tok_start, (sp == std::string_view::npos ? turn.size() : sp) - tok_start);
        if (!tok.empty()) tokens.emplace_back(tok);
        if (sp == std::string_view::npos) break;
        tok_start = sp + 1;
      }
      if (!tokens.empty()) conv.turns.push_back(std::move(tokens));
      if (tab == std::string::npos) break;
      turn_start = tab + 1;
    }
    if (!conv.turns.empty()) out.push_back(std::move(conv));
  }
  return out;
}

struct FilterRules {
  int min_turns = 3;
  int max_utterance_length = 50;
  int max_response_count = 50;  // responses occurring more often are dropped
};

struct FilterTally {
  std::size_t kept = 0;
  std::size_t too_few_turns = 0;
  std::size_t overlong_utterance = 0;
  std::size_t frequent_response = 0;

  std::size_t total() const {
    return kept + too_few_turns + overlong_utterance + frequent_response;
  }
};

struct FilterResult {
  std::vector<Example> examples;
  FilterTally tally;
};

// Applies the corpus cleaning rules. Response frequencies are counted over the
// raw input before any rule fires, so the three rules commute; a conversation
// hit by several rules is tallied under the first in the order min-turns,
// overlong-utterance, frequent-response.
inline FilterResult filter_conversations(const std::vector<Conversation>& convs,
                                         const FilterRules& rules = {}) {
  if (rules.min_turns < 3) {
    throw ParameterError("filter_conversations: min_turns must be >= 3 so every example keeps "
                         "at least two context turns, got " + std::to_string(rules.min_turns));
  }
  if (rules.max_utterance_length < 1 || rules.max_response_count < 1) {
    throw ParameterError("filter_conversations: thresholds must be positive");
  }

  std::unordered_map<std::string, std::size_t> response_count;
  auto joined = [](const std::vector<std::string>& toks) {
    std::string key;
    for (const auto& t : toks) {
      key += t;
      key += '\x1f';  // unit separator, cannot appear inside a token
    }
    return key;
  };
  for (const auto& c : convs) {
    if (c.turns.empty()) continue;
    ++response_count[joined(c.turns.back())];
  }

  FilterResult res;
  for (const auto& c : convs) {
    if (static_cast<int>(c.turns.size()) < rules.min_turns) {
      ++res.tally.too_few_turns;
      continue;
    }
    bool overlong = false;
    for (const auto& turn : c.turns) {
      if (static_cast<int>(turn.size()) > rules.max_utterance_length) {
        overlong = true;
        break;
      }
    }
    if (overlong) {
      ++res.tally.overlong_utterance;
      continue;
    }
    if (response_count[joined(c.turns.back())] >
        static_cast<std::size_t>(rules.max_response_count)) {
      ++res.tally.frequent_response;
      continue;
    }
    Example ex;
    ex.context.assign(c.turns.begin(), c.turns.end() - 1);
    ex.response = c.turns.back();
    res.examples.push_back(std::move(ex));
    ++res.tally.kept;
  }
  return res;
}

// Token-to-id mapping with the four reserved entries at ids 0..3. Ids equal
// file line numbers; lookups of unknown tokens fall back to the unknown id.
class Vocab {
 public:
  static const std::array<std::string, 4>& reserved() {
    static const std::array<std::string, 4> r{"<pad>", "<unk>", "<bos>", "<eos>"};
    return r;
  }

  Vocab() {
    for (const auto& t : reserved()) push(t);
  }

  // Appends a non-reserved token. Duplicates are format errors.
  void add(const std::string& token) {
    if (token.empty()) throw VocabError("vocab: empty token");
    if (index_.count(token)) throw VocabError("vocab: duplicate token '" + token + "'");
    push(token);
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  int id_or_unk(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) {
      throw VocabError("vocab: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(size()) + ")");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("vocab: cannot write " + path);
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) throw FormatError("vocab: write failed for " + path);
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("vocab: cannot open " + path);
    Vocab v;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!utf8_valid(line)) {
        throw FormatError("vocab: " + path + ":" + std::to_string(line_no) + ": invalid UTF-8");
      }
      if (line_no <= 4) {
        if (line != reserved()[line_no - 1]) {
          throw FormatError("vocab: " + path + ":" + std::to_string(line_no) +
                            ": expected reserved token '" + reserved()[line_no - 1] +
                            "', found '" + line + "'");
        }
        continue;
      }
      if (line.empty()) {
        throw FormatError("vocab: " + path + ":" + std::to_string(line_no) + ": empty token");
      }
      if (v.contains(line)) {
        throw FormatError("vocab: " + path + ":" + std::to_string(line_no) +
                          ": duplicate token '" + line + "'");
      }
      v.push(line);
    }
    if (line_no < 4) {
      throw FormatError("vocab: " + path + ": missing reserved header lines");
    }
    return v;
  }

 private:
  void push(const std::string& token) {
    index_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

enum class VocabSide { context, response };

struct VocabBuild {
  Vocab vocab;
  double coverage = 0.0;  // kept occurrences / total occurrences on the side
};

// Counts tokens on one side only and keeps the `size` most frequent, ties
// going to the lexicographically smaller token. Tokens spelled like a reserved
// entry are never added again; they count against coverage.
inline VocabBuild build_vocab(const std::vector<Example>& examples, VocabSide side, int size) {
  if (size < 1) throw ParameterError("build_vocab: size must be >= 1, got " + std::to_string(size));
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  auto tally = [&](const std::vector<std::string>& toks) {
    for (const auto& t : toks) {
      ++counts[t];
      ++total;
    }
  };
  for (const auto& ex : examples) {
    if (side == VocabSide::context) {
      for (const auto& u : ex.context) tally(u);
    } else {
      tally(ex.response);
    }
  }
  if (total == 0) throw ContractError("build_vocab: no tokens on the requested side");

  std::vector<std::pair<std::string, std::size_t>> ranked;
  ranked.reserve(counts.size());
  const auto& res = Vocab::reserved();
  for (auto& kv : counts) {
    if (std::find(res.begin(), res.end(), kv.first) != res.end()) continue;
    ranked.emplace_back(kv.first, kv.second);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (static_cast<std::size_t>(size) < ranked.size()) ranked.resize(static_cast<std::size_t>(size));

  VocabBuild out;
  std::size_t kept = 0;
  for (const auto& kv : ranked) {
    out.vocab.add(kv.first);
    kept += kv.second;
  }
  out.coverage = static_cast<double>(kept) / static_cast<double>(total);
  return out;
}

// One example encoded without padding; the response gains the end token.
inline EncodedExample encode_example(const Example& ex, const Vocab& context_vocab,
                                     const Vocab& response_vocab) {
  if (ex.context.size() < 2) {
    throw ContractError("encode_example: context must hold at least 2 utterances, got " +
                        std::to_string(ex.context.size()));
  }
  std::vector<std::vector<int>> utts;
  utts.reserve(ex.context.size());
  for (const auto& u : ex.context) {
    if (u.empty()) throw ContractError("encode_example: empty context utterance");
    std::vector<int> ids;
    ids.reserve(u.size());
    for (const auto& t : u) ids.push_back(context_vocab.id_or_unk(t));
    utts.push_back(std::move(ids));
  }
  if (ex.response.empty()) throw ContractError("encode_example: empty response");
  std::vector<int> rids;
  rids.reserve(ex.response.size() + 1);
  for (const auto& t : ex.response) rids.push_back(response_vocab.id_or_unk(t));
  rids.push_back(kEosId);
  return EncodedExample{ContextInput::dense(std::move(utts)),
                        ResponseInput::dense(std::move(rids))};
}

// Fixed-shape padded batch. Widths are the maxima of this batch, not global.
struct Batch {
  std::vector<std::vector<std::vector<int>>> context_ids;   // [B][M][T]
  std::vector<std::vector<std::vector<bool>>> word_mask;    // [B][M][T]
  std::vector<std::vector<bool>> utterance_mask;            // [B][M]
  std::vector<std::vector<int>> response_ids;               // [B][R], EOS included
  std::vector<std::vector<bool>> response_mask;             // [B][R]

  std::size_t size() const { return context_ids.size(); }

  ContextInput context_for(std::size_t b) const {
    return ContextInput{context_ids[b], word_mask[b], utterance_mask[b]};
  }
  ResponseInput response_for(std::size_t b) const {
    return ResponseInput{response_ids[b], response_mask[b]};
  }

  // Real response positions (end tokens included): the unit count perplexity
  // normalizes by.
  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& row : response_mask) {
      for (bool m : row) n += m ? 1 : 0;
    }
    return n;
  }
};

inline Batch encode_batch(const std::vector<Example>& examples, const Vocab& context_vocab,
                          const Vocab& response_vocab) {
  if (examples.empty()) throw ContractError("encode_batch: empty example list");
  std::vector<EncodedExample> encoded;
  encoded.reserve(examples.size());
  std::size_t m_max = 0, t_max = 0, r_max = 0;
  for (const auto& ex : examples) {
    encoded.push_back(encode_example(ex, context_vocab, response_vocab));
    const auto& e = encoded.back();
    m_max = std::max(m_max, e.context.utterances.size());
    for (const auto& u : e.context.utterances) t_max = std::max(t_max, u.size());
    r_max = std::max(r_max, e.response.ids.size());
  }

  Batch batch;
  for (const auto& e : encoded) {
    std::vector<std::vector<int>> ids(m_max, std::vector<int>(t_max, kPadId));
    std::vector<std::vector<bool>> wmask(m_max, std::vector<bool>(t_max, false));
    std::vector<bool> umask(m_max, false);
    for (std::size_t i = 0; i < e.context.utterances.size(); ++i) {
      umask[i] = true;
      for (std::size_t j = 0; j < e.context.utterances[i].size(); ++j) {
        ids[i][j] = e.context.utterances[i][j];
        wmask[i][j] = true;
      }
    }
    std::vector<int> rids(r_max, kPadId);
    std::vector<bool> rmask(r_max, false);
    for (std::size_t t = 0; t < e.response.ids.size(); ++t) {
      rids[t] = e.response.ids[t];
      rmask[t] = true;
    }
    batch.context_ids.push_back(std::move(ids));
    batch.word_mask.push_back(std::move(wmask));
    batch.utterance_mask.push_back(std::move(umask));
    batch.response_ids.push_back(std::move(rids));
    batch.response_mask.push_back(std::move(rmask));
  }
  return batch;
}

inline std::vector<std::string> decode_tokens(const Vocab& vocab, const std::vector<int>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(vocab.token(id));
  return out;
}

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  std::vector<Example> train, validation, test;
};

// Shuffles a copy and cuts it at the cumulative-fraction boundaries. When the
// fractions sum to 1 the three parts partition the input.
inline DatasetSplit split_dataset(const std::vector<Example>& examples, Rng& rng,
                                  const SplitFractions& fractions = {}) {
  const double f1 = fractions.train, f2 = fractions.validation, f3 = fractions.test;
  if (!(f1 > 0.0) || !(f2 > 0.0) || !(f3 > 0.0)) {
    throw ParameterError("split_dataset: fractions must be positive");
  }
  const double sum = f1 + f2 + f3;
  if (sum > 1.0 + 1e-12) throw ParameterError("split_dataset: fractions sum above 1");

  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  const auto n = static_cast<double>(examples.size());
  auto boundary = [&](double cum) {
    if (cum >= 1.0 - 1e-12) return examples.size();
    return static_cast<std::size_t>(cum * n);
  };
  const std::size_t b1 = boundary(f1);
  const std::size_t b2 = boundary(f1 + f2);
  const std::size_t b3 = boundary(sum);

  DatasetSplit split;
  for (std::size_t i = 0; i < b1; ++i) split.train.push_back(examples[order[i]]);
  for (std::size_t i = b1; i < b2; ++i) split.validation.push_back(examples[order[i]]);
  for (std::size_t i = b2; i < b3; ++i) split.test.push_back(examples[order[i]]);
  return split;
}

// Processed-example files are JSON Lines:
// {"context": [["tok", ...], ...], "response": ["tok", ...]}
inline void write_examples(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("write_examples: cannot write " + path);
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["context"] = ex.context;
    j["response"] = ex.response;
    out << j.dump() << '\n';
  }
  if (!out) throw FormatError("write_examples: write failed for " + path);
}

inline std::vector<Example> read_examples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("read_examples: cannot open " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("read_examples: " + path + ":" + std::to_string(line_no) + ": " +
                        e.what());
    }
    if (!j.is_object() || !j.contains("context") || !j.contains("response")) {
      throw FormatError("read_examples: " + path + ":" + std::to_string(line_no) +
                        ": expected an object with 'context' and 'response'");
    }
    Example ex;
    try {
      ex.context = j["context"].get<std::vector<std::vector<std::string>>>();
      ex.response = j["response"].get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("read_examples: " + path + ":" + std::to_string(line_no) + ": " +
                        e.what());
    }
    if (ex.context.size() < 2) {
      throw FormatError("read_examples: " + path + ":" + std::to_string(line_no) +
                        ": context must hold at least 2 utterances");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace hran
