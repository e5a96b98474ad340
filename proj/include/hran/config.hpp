#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "hran/decoding.hpp"
#include "hran/error.hpp"
#include "hran/model.hpp"
#include "hran/rng.hpp"

namespace hran {

// Epoch, validation, and split run lengths of the optimization loop.
struct TrainSchedule {
  int batch_size = 128;
  double initial_lr = 1.0;
  bool halve_on_val_increase = true;
  double early_stop_threshold = 2.0;  // required perplexity improvement
  int early_stop_patience = 5;
  bool early_stop_consecutive = false;  // compare against the previous epoch, not the best
  int max_epochs = 20;
  bool clip_enabled = true;
  double clip_norm = 5.0;

  void validate() const {
    if (batch_size < 1) throw ParameterError("schedule: batch_size must be >= 1");
    if (!(initial_lr > 0.0)) throw ParameterError("schedule: initial_lr must be positive");
    if (!(early_stop_threshold > 0.0)) {
      throw ParameterError("schedule: early_stop_threshold must be positive");
    }
    if (early_stop_patience < 1) throw ParameterError("schedule: patience must be >= 1");
    if (max_epochs < 1) throw ParameterError("schedule: max_epochs must be >= 1");
    if (clip_enabled && !(clip_norm > 0.0)) {
      throw ParameterError("schedule: clip_norm must be positive");
    }
  }
};

namespace detail {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"word_hidden", c.word_hidden},
                     {"utt_hidden", c.utt_hidden},
                     {"decoder_hidden", c.decoder_hidden},
                     {"embed_dim", c.embed_dim},
                     {"attn_dim", c.attn_dim},
                     {"context_vocab_size", c.context_vocab_size},
                     {"response_vocab_size", c.response_vocab_size},
                     {"ablation", to_string(c.ablation)},
                     {"max_decode_length", c.max_decode_length},
                     {"precision", to_string(c.precision)},
                     {"seed", c.seed},
                     {"use_biases", c.use_biases},
                     {"init_gaussian", c.init_gaussian},
                     {"init_is_variance", c.init_is_variance}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  detail::read_key(j, "word_hidden", c.word_hidden);
  detail::read_key(j, "utt_hidden", c.utt_hidden);
  detail::read_key(j, "decoder_hidden", c.decoder_hidden);
  detail::read_key(j, "embed_dim", c.embed_dim);
  detail::read_key(j, "attn_dim", c.attn_dim);
  detail::read_key(j, "context_vocab_size", c.context_vocab_size);
  detail::read_key(j, "response_vocab_size", c.response_vocab_size);
  if (j.contains("ablation")) c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
  detail::read_key(j, "max_decode_length", c.max_decode_length);
  if (j.contains("precision")) {
    c.precision = precision_from_string(j.at("precision").get<std::string>());
  }
  detail::read_key(j, "seed", c.seed);
  detail::read_key(j, "use_biases", c.use_biases);
  detail::read_key(j, "init_gaussian", c.init_gaussian);
  detail::read_key(j, "init_is_variance", c.init_is_variance);
}

inline void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"batch_size", s.batch_size},
                     {"initial_lr", s.initial_lr},
                     {"halve_on_val_increase", s.halve_on_val_increase},
                     {"early_stop_threshold", s.early_stop_threshold},
                     {"early_stop_patience", s.early_stop_patience},
                     {"early_stop_consecutive", s.early_stop_consecutive},
                     {"max_epochs", s.max_epochs},
                     {"clip_enabled", s.clip_enabled},
                     {"clip_norm", s.clip_norm}};
}

inline void from_json(const nlohmann::json& j, TrainSchedule& s) {
  s = TrainSchedule{};
  detail::read_key(j, "batch_size", s.batch_size);
  detail::read_key(j, "initial_lr", s.initial_lr);
  detail::read_key(j, "halve_on_val_increase", s.halve_on_val_increase);
  detail::read_key(j, "early_stop_threshold", s.early_stop_threshold);
  detail::read_key(j, "early_stop_patience", s.early_stop_patience);
  detail::read_key(j, "early_stop_consecutive", s.early_stop_consecutive);
  detail::read_key(j, "max_epochs", s.max_epochs);
  detail::read_key(j, "clip_enabled", s.clip_enabled);
  detail::read_key(j, "clip_norm", s.clip_norm);
}

inline void to_json(nlohmann::json& j, const DecodeOptions& d) {
  j = nlohmann::json{{"beam_width", d.beam_width},
                     {"nbest", d.nbest},
                     {"max_length", d.max_length},
                     {"allow_unk", d.allow_unk},
                     {"length_normalize", d.length_normalize}};
}

inline void from_json(const nlohmann::json& j, DecodeOptions& d) {
  d = DecodeOptions{};
  detail::read_key(j, "beam_width", d.beam_width);
  detail::read_key(j, "nbest", d.nbest);
  detail::read_key(j, "max_length", d.max_length);
  detail::read_key(j, "allow_unk", d.allow_unk);
  detail::read_key(j, "length_normalize", d.length_normalize);
}

// Everything one run needs: data and artifact paths plus the three option
// blocks. Serialized into every artifact the run produces.
struct RunConfig {
  std::string train_path;
  std::string validation_path;
  std::string test_path;
  std::string context_vocab_path;
  std::string response_vocab_path;
  std::string checkpoint_path;       // latest state, resume target
  std::string best_checkpoint_path;  // best validation perplexity
  std::string report_path;           // JSON lines, one per epoch
  ModelConfig model;
  TrainSchedule schedule;
  DecodeOptions decode;
};

inline void to_json(nlohmann::json& j, const RunConfig& r) {
  j = nlohmann::json{{"train_path", r.train_path},
                     {"validation_path", r.validation_path},
                     {"test_path", r.test_path},
                     {"context_vocab_path", r.context_vocab_path},
                     {"response_vocab_path", r.response_vocab_path},
                     {"checkpoint_path", r.checkpoint_path},
                     {"best_checkpoint_path", r.best_checkpoint_path},
                     {"report_path", r.report_path},
                     {"model", r.model},
                     {"schedule", r.schedule},
                     {"decode", r.decode}};
}

inline void from_json(const nlohmann::json& j, RunConfig& r) {
  r = RunConfig{};
  detail::read_key(j, "train_path", r.train_path);
  detail::read_key(j, "validation_path", r.validation_path);
  detail::read_key(j, "test_path", r.test_path);
  detail::read_key(j, "context_vocab_path", r.context_vocab_path);
  detail::read_key(j, "response_vocab_path", r.response_vocab_path);
  detail::read_key(j, "checkpoint_path", r.checkpoint_path);
  detail::read_key(j, "best_checkpoint_path", r.best_checkpoint_path);
  detail::read_key(j, "report_path", r.report_path);
  if (j.contains("model")) r.model = j.at("model").get<ModelConfig>();
  if (j.contains("schedule")) r.schedule = j.at("schedule").get<TrainSchedule>();
  if (j.contains("decode")) r.decode = j.at("decode").get<DecodeOptions>();
}

// Stable 64-bit fingerprint of any serializable configuration: FNV-1a over the
// canonical (sorted-key) JSON dump, rendered as 16 hex digits.
template <typename C>
std::string config_fingerprint(const C& config) {
  nlohmann::json j = config;
  const std::uint64_t h = fnv1a64(j.dump());
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 0; i < 16; ++i) out[static_cast<std::size_t>(15 - i)] = hex[(h >> (4 * i)) & 0xF];
  return out;
}

}  // namespace hran
