#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hran/autodiff.hpp"
#include "hran/error.hpp"
#include "hran/layers.hpp"
#include "hran/types.hpp"

namespace hran {

// Which attention pathway is disabled, if any. "no_ud_att" drops the utterance
// recurrence input from the word scorer; "no_word_att" replaces word attention
// with a uniform average; "no_utt_att" replaces utterance attention with a
// uniform average.
enum class Ablation { full, no_ud_att, no_word_att, no_utt_att };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_ud_att: return "no-ud-att";
    case Ablation::no_word_att: return "no-word-att";
    case Ablation::no_utt_att: return "no-utt-att";
  }
  return "full";
}

inline Ablation ablation_from_string(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "no-ud-att") return Ablation::no_ud_att;
  if (s == "no-word-att") return Ablation::no_word_att;
  if (s == "no-utt-att") return Ablation::no_utt_att;
  throw ParameterError("unknown ablation mode: " + s);
}

enum class Precision { f64, f32 };

inline std::string to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

inline Precision precision_from_string(const std::string& s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  throw ParameterError("unknown precision: " + s);
}

struct ModelConfig {
  int word_hidden = 32;
  int utt_hidden = 32;
  int decoder_hidden = 32;
  int embed_dim = 16;
  int attn_dim = 0;  // 0: use decoder_hidden
  int context_vocab_size = 0;   // both sizes include the four reserved ids
  int response_vocab_size = 0;
  Ablation ablation = Ablation::full;
  int max_decode_length = 50;
  Precision precision = Precision::f64;
  std::uint64_t seed = 1;
  bool use_biases = false;
  double init_gaussian = 0.01;      // N(0, 0.01) by default
  bool init_is_variance = true;     // when false, init_gaussian is the std deviation

  int attention_dim() const { return attn_dim > 0 ? attn_dim : decoder_hidden; }
  double init_sigma() const {
    return init_is_variance ? std::sqrt(init_gaussian) : init_gaussian;
  }

  void validate() const {
    if (word_hidden <= 0 || utt_hidden <= 0 || decoder_hidden <= 0 || embed_dim <= 0 ||
        attn_dim < 0 || max_decode_length <= 0) {
      throw ParameterError("model config: sizes must be positive");
    }
    if (context_vocab_size < 5 || response_vocab_size < 5) {
      throw ParameterError("model config: vocab sizes must cover the four reserved ids "
                           "plus at least one token");
    }
    if (!(init_gaussian > 0.0)) throw ParameterError("model config: init_gaussian must be positive");
  }
};

// All trainable state. The parameter set is a pure function of the config: ablation
// variants that never use a scorer do not allocate it.
template <typename T = double>
struct ModelParams {
  Embedding<T> context_embedding, response_embedding;
  GruParams<T> word_fwd, word_bwd;   // word level, both directions
  GruParams<T> utterance;            // utterance level, runs backward over r_i
  std::optional<MlpScorerParams<T>> word_scorer;  // absent under no-word-att
  std::optional<MlpScorerParams<T>> utt_scorer;   // absent under no-utt-att
  GruParams<T> decoder;
  Parameter<T> output_projection;    // [response_vocab x (decoder_hidden + embed_dim)]
  std::optional<Parameter<T>> output_bias;
  Parameter<T> h0_fwd, h0_bwd;       // learned initial word-level states
  Parameter<T> utt_init;             // learned l_{m+1}

  static ModelParams init(const ModelConfig& cfg) {
    cfg.validate();
    InitSpec is;
    is.seed = cfg.seed;
    is.sigma = cfg.init_sigma();
    is.biases = cfg.use_biases;
    ModelParams p;
    p.context_embedding = Embedding<T>::init("context_embedding", cfg.context_vocab_size,
                                             cfg.embed_dim, is);
    p.response_embedding = Embedding<T>::init("response_embedding", cfg.response_vocab_size,
                                              cfg.embed_dim, is);
    p.word_fwd = GruParams<T>::init("word_fwd", cfg.word_hidden, cfg.embed_dim, is);
    p.word_bwd = GruParams<T>::init("word_bwd", cfg.word_hidden, cfg.embed_dim, is);
    p.utterance = GruParams<T>::init("utterance", cfg.utt_hidden, 2 * cfg.word_hidden, is);
    const int attn = cfg.attention_dim();
    if (cfg.ablation != Ablation::no_word_att) {
      std::vector<int> dims;
      if (cfg.ablation == Ablation::no_ud_att) {
        dims = {cfg.decoder_hidden, 2 * cfg.word_hidden};
      } else {
        dims = {cfg.decoder_hidden, cfg.utt_hidden, 2 * cfg.word_hidden};
      }
      p.word_scorer = MlpScorerParams<T>::init("word_scorer", attn, dims, is);
    }
    if (cfg.ablation != Ablation::no_utt_att) {
      p.utt_scorer = MlpScorerParams<T>::init("utt_scorer", attn,
                                              {cfg.decoder_hidden, cfg.utt_hidden}, is);
    }
    p.decoder = GruParams<T>::init("decoder", cfg.decoder_hidden,
                                   cfg.embed_dim + cfg.utt_hidden, is);
    p.output_projection = make_param<T>("output_projection",
                                        {cfg.response_vocab_size,
                                         cfg.decoder_hidden + cfg.embed_dim}, is);
    if (cfg.use_biases) {
      p.output_bias = make_param<T>("output_bias", {cfg.response_vocab_size}, is);
    }
    p.h0_fwd = make_param<T>("h0_fwd", {cfg.word_hidden}, is);
    p.h0_bwd = make_param<T>("h0_bwd", {cfg.word_hidden}, is);
    p.utt_init = make_param<T>("utt_init", {cfg.utt_hidden}, is);
    return p;
  }

  // Canonical enumeration order; checkpoints, the optimizer, and gradient handling
  // all key off this.
  template <typename F>
  void for_each_parameter(F f) {
    f(context_embedding.table);
    f(response_embedding.table);
    word_fwd.for_each(f);
    word_bwd.for_each(f);
    utterance.for_each(f);
    if (word_scorer) word_scorer->for_each(f);
    if (utt_scorer) utt_scorer->for_each(f);
    decoder.for_each(f);
    f(output_projection);
    if (output_bias) f(*output_bias);
    f(h0_fwd);
    f(h0_bwd);
    f(utt_init);
  }
  template <typename F>
  void for_each_parameter(F f) const {
    const_cast<ModelParams*>(this)->for_each_parameter(
        [&](Parameter<T>& p) { f(static_cast<const Parameter<T>&>(p)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const Parameter<T>& p) { n += p.numel(); });
    return n;
  }

  void zero_grads() {
    for_each_parameter([](Parameter<T>& p) { p.zero_grad(); });
  }
};

// Word-level encodings of one context: per real utterance, the bidirectional
// hidden sequence plus its word mask. Bound to the tape that produced it.
template <typename T = double>
struct EncodedContext {
  std::vector<std::vector<Var<T>>> hidden;   // [m][T_i], each Var is [2*word_hidden]
  std::vector<std::vector<bool>> word_mask;  // [m][T_i]
  int num_utterances = 0;
};

template <typename T>
struct AttendResult {
  Var<T> context_vector;            // c_t, [utt_hidden]
  std::vector<Var<T>> utt_states;   // l_{i,t} for each real utterance, [utt_hidden]
  std::vector<Var<T>> word_reads;   // r_{i,t}, attended word summaries, [2*word_hidden]
  AttentionStep attention;
};

template <typename T>
struct DecodeStepResult {
  Var<T> state;        // s_t, [decoder_hidden]
  Var<T> log_probs;    // [response_vocab], log-softmax over the full vocabulary
};

// Runs the word-level bidirectional encoder over every real utterance.
template <typename T>
EncodedContext<T> encode_words(Tape<T>& tape, ModelParams<T>& params,
                               [[maybe_unused]] const ModelConfig& cfg, const ContextInput& ctx) {
  if (ctx.utterances.size() != ctx.word_mask.size() ||
      ctx.utterances.size() != ctx.utterance_mask.size()) {
    throw ContractError("encode_words: context arrays disagree in length");
  }
  EncodedContext<T> enc;
  auto h0f = tape.leaf(params.h0_fwd);
  auto h0b = tape.leaf(params.h0_bwd);
  for (std::size_t i = 0; i < ctx.utterances.size(); ++i) {
    if (!ctx.utterance_mask[i]) continue;
    enc.hidden.push_back(bigru_encode(tape, params.word_fwd, params.word_bwd,
                                      params.context_embedding, ctx.utterances[i],
                                      ctx.word_mask[i], h0f, h0b));
    enc.word_mask.push_back(ctx.word_mask[i]);
  }
  enc.num_utterances = static_cast<int>(enc.hidden.size());
  if (enc.num_utterances < 2) {
    throw ContractError("encode_words: context too short, need at least 2 utterances, got " +
                        std::to_string(enc.num_utterances));
  }
  return enc;
}

// One attention pass for decoder step t, given s_{t-1}. Sweeps utterances from
// last to first: word attention for utterance i conditions on l_{i+1}, then the
// utterance-level recurrence folds the attended read r_i into l_i. Utterance
// attention over the l_i yields the step's context vector.
template <typename T>
AttendResult<T> attend_step(Tape<T>& tape, ModelParams<T>& params, const ModelConfig& cfg,
                            const EncodedContext<T>& enc, Var<T> s_prev) {
  const int m = enc.num_utterances;
  AttendResult<T> res;
  res.utt_states.resize(static_cast<std::size_t>(m));
  res.word_reads.resize(static_cast<std::size_t>(m));
  res.attention.word_weights.resize(static_cast<std::size_t>(m));

  Var<T> l_next = tape.leaf(params.utt_init);
  for (int i = m - 1; i >= 0; --i) {
    const auto& hs = enc.hidden[static_cast<std::size_t>(i)];
    const auto& mask = enc.word_mask[static_cast<std::size_t>(i)];
    std::vector<std::size_t> live;
    for (std::size_t j = 0; j < hs.size(); ++j) {
      if (mask[j]) live.push_back(j);
    }
    std::vector<Var<T>> live_h;
    live_h.reserve(live.size());
    for (auto j : live) live_h.push_back(hs[j]);

    Var<T> alpha;
    if (cfg.ablation == Ablation::no_word_att) {
      Tensor<T> uniform(Shape{static_cast<int>(live.size())});
      uniform.fill(T(1) / static_cast<T>(live.size()));
      alpha = tape.constant(std::move(uniform));
    } else {
      std::vector<Var<T>> scores;
      scores.reserve(live.size());
      for (auto& h : live_h) {
        if (cfg.ablation == Ablation::no_ud_att) {
          scores.push_back(mlp_score(tape, *params.word_scorer, {s_prev, h}));
        } else {
          scores.push_back(mlp_score(tape, *params.word_scorer, {s_prev, l_next, h}));
        }
      }
      alpha = masked_softmax(stack_scalars(scores), std::vector<bool>(live.size(), true));
    }
    auto r = weighted_sum(alpha, live_h);
    auto l = gru_step(tape, params.utterance, r, l_next);
    res.utt_states[static_cast<std::size_t>(i)] = l;
    res.word_reads[static_cast<std::size_t>(i)] = r;
    l_next = l;

    std::vector<double>& rec = res.attention.word_weights[static_cast<std::size_t>(i)];
    rec.assign(hs.size(), 0.0);
    for (std::size_t k = 0; k < live.size(); ++k) {
      rec[live[k]] = static_cast<double>(alpha.value()[k]);
    }
  }

  Var<T> beta;
  if (cfg.ablation == Ablation::no_utt_att) {
    Tensor<T> uniform(Shape{m});
    uniform.fill(T(1) / static_cast<T>(m));
    beta = tape.constant(std::move(uniform));
  } else {
    std::vector<Var<T>> scores;
    scores.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      scores.push_back(mlp_score(tape, *params.utt_scorer,
                                 {s_prev, res.utt_states[static_cast<std::size_t>(i)]}));
    }
    beta = masked_softmax(stack_scalars(scores), std::vector<bool>(static_cast<std::size_t>(m), true));
  }
  res.context_vector = weighted_sum(beta, res.utt_states);
  res.attention.utterance_weights.resize(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    res.attention.utterance_weights[static_cast<std::size_t>(i)] =
        static_cast<double>(beta.value()[static_cast<std::size_t>(i)]);
  }
  return res;
}

// One decoder step: state update from the previous token and the attended context,
// then log-probabilities over the full response vocabulary.
template <typename T>
DecodeStepResult<T> decode_step(Tape<T>& tape, ModelParams<T>& params,
                                [[maybe_unused]] const ModelConfig& cfg, int y_prev, Var<T> s_prev,
                                Var<T> context_vector) {
  auto e = embed_lookup(tape, params.response_embedding, y_prev);
  auto s = gru_step(tape, params.decoder, concat(e, context_vector), s_prev);
  auto logits = matmul(tape.leaf(params.output_projection), concat(s, e));
  if (params.output_bias) logits = add(logits, tape.leaf(*params.output_bias));
  return {s, log_softmax(logits)};
}

// Teacher-forced negative log-likelihood of one response given its context.
// The decoder starts from a zero state and the begin token; attention is
// recomputed at every step from s_{t-1}.
template <typename T>
Var<T> forward_nll(Tape<T>& tape, ModelParams<T>& params, const ModelConfig& cfg,
                   const ContextInput& ctx, const ResponseInput& resp,
                   AttentionTrace* trace = nullptr) {
  if (resp.ids.size() != resp.mask.size()) {
    throw ContractError("forward_nll: response ids and mask disagree in length");
  }
  std::vector<int> gold;
  for (std::size_t t = 0; t < resp.ids.size(); ++t) {
    if (resp.mask[t]) gold.push_back(resp.ids[t]);
  }
  if (gold.empty()) throw ContractError("forward_nll: empty response");

  auto enc = encode_words(tape, params, cfg, ctx);
  Var<T> s = tape.zeros(Shape{cfg.decoder_hidden});
  int y_prev = kBosId;
  Var<T> loss;
  for (std::size_t t = 0; t < gold.size(); ++t) {
    auto att = attend_step(tape, params, cfg, enc, s);
    if (trace) trace->steps.push_back(att.attention);
    auto dec = decode_step(tape, params, cfg, y_prev, s, att.context_vector);
    auto step_nll = neg(pick(dec.log_probs, gold[t]));
    loss = t == 0 ? step_nll : add(loss, step_nll);
    s = dec.state;
    y_prev = gold[t];
  }
  return loss;
}

// Convenience bundle of config plus parameters.
template <typename T = double>
struct Model {
  ModelConfig config;
  ModelParams<T> params;

  static Model init(const ModelConfig& cfg) { return Model{cfg, ModelParams<T>::init(cfg)}; }

  double example_nll(const EncodedExample& ex, AttentionTrace* trace = nullptr) {
    Tape<T> tape;
    auto loss = forward_nll(tape, params, config, ex.context, ex.response, trace);
    return static_cast<double>(loss.value()[0]);
  }
};

}  // namespace hran
