#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "hran/error.hpp"
#include "hran/model.hpp"
#include "hran/types.hpp"

namespace hran {

// The decoders are generic over a step model:
//   int vocab_size() const;
//   int eos_id() const;
//   int start_token() const;
//   State start();
//   StepResult<State> step(const State&, int prev_token);
// States must be cheap to copy. log_probs must be a proper log-distribution
// except for entries forced to -inf by token suppression.
template <typename State>
struct StepResult {
  State state;
  std::vector<double> log_probs;
  AttentionStep attention;  // left empty by models without attention
};

struct DecodeOptions {
  int beam_width = 10;
  int nbest = 1;
  int max_length = 50;
  bool allow_unk = false;
  bool length_normalize = false;  // divide by length in the final ranking only
};

// One decoded response. ids never include the end token; log_prob does include
// the end step's contribution when the sequence stopped on it.
struct DecodedSequence {
  std::vector<int> ids;
  double log_prob = 0.0;
};

struct GreedyResult {
  std::vector<int> ids;
  double log_prob = 0.0;
  AttentionTrace trace;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Forces the given ids out of contention by setting their log-probs to -inf.
inline void suppress_tokens(std::vector<double>& log_probs, const std::vector<int>& banned) {
  for (int b : banned) {
    if (b < 0 || b >= static_cast<int>(log_probs.size())) {
      throw VocabError("suppress_tokens: id " + std::to_string(b) +
                       " outside vocabulary of size " + std::to_string(log_probs.size()));
    }
    log_probs[static_cast<std::size_t>(b)] = kNegInf;
  }
}

// Picks the argmax token at every step; ties go to the smallest id. Stops on the
// end token (not emitted) or after max_length tokens. Attention is recorded for
// every step taken, including the stopping one.
template <typename M>
GreedyResult greedy_decode(M& model, int max_length) {
  if (max_length < 1) {
    throw ParameterError("greedy_decode: max_length must be >= 1, got " +
                         std::to_string(max_length));
  }
  GreedyResult out;
  auto state = model.start();
  int prev = model.start_token();
  for (int t = 0; t < max_length; ++t) {
    auto step = model.step(state, prev);
    if (static_cast<int>(step.log_probs.size()) != model.vocab_size()) {
      throw ContractError("greedy_decode: step returned " +
                          std::to_string(step.log_probs.size()) + " log-probs for vocab of " +
                          std::to_string(model.vocab_size()));
    }
    int best = -1;
    double best_lp = kNegInf;
    for (int v = 0; v < model.vocab_size(); ++v) {
      const double lp = step.log_probs[static_cast<std::size_t>(v)];
      if (lp > best_lp) {
        best_lp = lp;
        best = v;
      }
    }
    if (best < 0) throw ContractError("greedy_decode: every token is suppressed");
    if (!step.attention.utterance_weights.empty() || !step.attention.word_weights.empty()) {
      out.trace.steps.push_back(std::move(step.attention));
    }
    out.log_prob += best_lp;
    if (best == model.eos_id()) break;
    out.ids.push_back(best);
    state = std::move(step.state);
    prev = best;
  }
  return out;
}

namespace detail {

// Ranking order shared by the beam and its tests: higher log-prob first, ties by
// lexicographically smaller token ids (end token included while it is present).
inline bool sequence_before(double lp_a, const std::vector<int>& ids_a, double lp_b,
                            const std::vector<int>& ids_b) {
  if (lp_a != lp_b) return lp_a > lp_b;
  return ids_a < ids_b;
}

}  // namespace detail

// Breadth-limited best-first search. Every live hypothesis is expanded by the
// full vocabulary each step; the top `beam_width` candidates by cumulative
// log-prob survive. A hypothesis ending in the end token or reaching max_length
// is finished: it retires to a pool and stops competing. Returns the best
// `nbest` finished hypotheses (or, if nothing ever finished because suppression
// starved the beam, the hypotheses that were alive when it starved), sorted by
// the ranking order. With length_normalize the final ranking key is
// log_prob / length; stored log_prob stays the raw sum.
template <typename M>
std::vector<DecodedSequence> beam_search(M& model, const DecodeOptions& opt) {
  if (opt.beam_width < 1) {
    throw ParameterError("beam_search: beam_width must be >= 1, got " +
                         std::to_string(opt.beam_width));
  }
  if (opt.nbest < 1 || opt.nbest > opt.beam_width) {
    throw ParameterError("beam_search: nbest must be in [1, beam_width], got " +
                         std::to_string(opt.nbest));
  }
  if (opt.max_length < 1) {
    throw ParameterError("beam_search: max_length must be >= 1, got " +
                         std::to_string(opt.max_length));
  }

  struct Hyp {
    std::vector<int> ids;  // all live hypotheses at step t hold exactly t ids
    double lp = 0.0;
    typename M::State state;
  };

  std::vector<Hyp> live;
  live.push_back(Hyp{{}, 0.0, model.start()});
  std::vector<Hyp> pool;      // finished
  std::vector<Hyp> stranded;  // alive when expansion became impossible

  for (int t = 0; t < opt.max_length && !live.empty(); ++t) {
    std::vector<typename M::State> next_states;
    next_states.reserve(live.size());
    struct Cand {
      std::size_t parent;
      int tok;
      double lp;
    };
    std::vector<Cand> cands;
    for (std::size_t p = 0; p < live.size(); ++p) {
      const int prev = live[p].ids.empty() ? model.start_token() : live[p].ids.back();
      auto step = model.step(live[p].state, prev);
      if (static_cast<int>(step.log_probs.size()) != model.vocab_size()) {
        throw ContractError("beam_search: step returned " +
                            std::to_string(step.log_probs.size()) + " log-probs for vocab of " +
                            std::to_string(model.vocab_size()));
      }
      next_states.push_back(std::move(step.state));
      for (int v = 0; v < model.vocab_size(); ++v) {
        const double lp = step.log_probs[static_cast<std::size_t>(v)];
        if (lp == kNegInf) continue;
        cands.push_back(Cand{p, v, live[p].lp + lp});
      }
    }
    if (cands.empty()) {
      stranded = std::move(live);
      live.clear();
      break;
    }

    // Candidate sequences at one step all have equal length, so the tie order is
    // a plain elementwise comparison of parent prefix plus new token.
    auto cand_before = [&](const Cand& a, const Cand& b) {
      if (a.lp != b.lp) return a.lp > b.lp;
      const auto& ia = live[a.parent].ids;
      const auto& ib = live[b.parent].ids;
      for (std::size_t k = 0; k < ia.size(); ++k) {
        if (ia[k] != ib[k]) return ia[k] < ib[k];
      }
      return a.tok < b.tok;
    };
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(opt.beam_width),
                                                   cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep),
                      cands.end(), cand_before);
    cands.resize(keep);

    std::vector<Hyp> next;
    for (const auto& c : cands) {
      Hyp h;
      h.ids = live[c.parent].ids;
      h.ids.push_back(c.tok);
      h.lp = c.lp;
      h.state = next_states[c.parent];
      const bool finished =
          c.tok == model.eos_id() || static_cast<int>(h.ids.size()) == opt.max_length;
      (finished ? pool : next).push_back(std::move(h));
    }
    live = std::move(next);
  }

  std::vector<Hyp>& results = pool.empty() ? stranded : pool;
  auto rank_before = [&](const Hyp& a, const Hyp& b) {
    if (opt.length_normalize) {
      const double na = a.ids.empty() ? a.lp : a.lp / static_cast<double>(a.ids.size());
      const double nb = b.ids.empty() ? b.lp : b.lp / static_cast<double>(b.ids.size());
      if (na != nb) return na > nb;
      return a.ids < b.ids;
    }
    return detail::sequence_before(a.lp, a.ids, b.lp, b.ids);
  };
  std::sort(results.begin(), results.end(), rank_before);
  if (results.empty()) results.push_back(Hyp{{}, 0.0, model.start()});

  std::vector<DecodedSequence> out;
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(opt.nbest),
                                              results.size());
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    DecodedSequence seq;
    seq.log_prob = results[i].lp;
    seq.ids = std::move(results[i].ids);
    if (!seq.ids.empty() && seq.ids.back() == model.eos_id()) seq.ids.pop_back();
    out.push_back(std::move(seq));
  }
  return out;
}

// Step adapter for the dialogue model. Owns one tape shared by every hypothesis;
// the context is encoded once. Reserved control tokens are suppressed in every
// step's output (padding and begin always, unknown unless allowed), so decoded
// responses never contain them.
template <typename T = double>
class HranStepper {
 public:
  struct State {
    Var<T> s;
  };

  HranStepper(ModelParams<T>& params, const ModelConfig& cfg, const ContextInput& ctx,
              bool allow_unk = false)
      : params_(params), cfg_(cfg) {
    banned_ = {kPadId, kBosId};
    if (!allow_unk) banned_.push_back(kUnkId);
    enc_ = encode_words(tape_, params_, cfg_, ctx);
  }

  int vocab_size() const { return cfg_.response_vocab_size; }
  int eos_id() const { return kEosId; }
  int start_token() const { return kBosId; }

  State start() { return State{tape_.zeros(Shape{cfg_.decoder_hidden})}; }

  StepResult<State> step(const State& st, int prev_token) {
    auto att = attend_step(tape_, params_, cfg_, enc_, st.s);
    auto dec = decode_step(tape_, params_, cfg_, prev_token, st.s, att.context_vector);
    std::vector<double> lp(static_cast<std::size_t>(cfg_.response_vocab_size));
    for (std::size_t v = 0; v < lp.size(); ++v) lp[v] = static_cast<double>(dec.log_probs.value()[v]);
    suppress_tokens(lp, banned_);
    return StepResult<State>{State{dec.state}, std::move(lp), std::move(att.attention)};
  }

 private:
  ModelParams<T>& params_;
  const ModelConfig& cfg_;
  std::vector<int> banned_;
  Tape<T> tape_;
  EncodedContext<T> enc_;
};

template <typename T>
GreedyResult hran_greedy(ModelParams<T>& params, const ModelConfig& cfg, const ContextInput& ctx,
                         const DecodeOptions& opt = {}) {
  HranStepper<T> stepper(params, cfg, ctx, opt.allow_unk);
  return greedy_decode(stepper, opt.max_length);
}

template <typename T>
std::vector<DecodedSequence> hran_beam(ModelParams<T>& params, const ModelConfig& cfg,
                                       const ContextInput& ctx, const DecodeOptions& opt = {}) {
  HranStepper<T> stepper(params, cfg, ctx, opt.allow_unk);
  return beam_search(stepper, opt);
}

}  // namespace hran
