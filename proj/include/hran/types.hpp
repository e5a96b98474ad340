#pragma once

#include <vector>

namespace hran {

// Reserved vocabulary ids, fixed for both the context and response sides.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;

// One dialogue context as the model consumes it: token ids per utterance plus
// masks (true = real token / real utterance). Padded entries are never read.
struct ContextInput {
  std::vector<std::vector<int>> utterances;
  std::vector<std::vector<bool>> word_mask;
  std::vector<bool> utterance_mask;

  static ContextInput dense(std::vector<std::vector<int>> utts) {
    ContextInput c;
    c.word_mask.reserve(utts.size());
    for (const auto& u : utts) c.word_mask.emplace_back(u.size(), true);
    c.utterance_mask.assign(utts.size(), true);
    c.utterances = std::move(utts);
    return c;
  }
};

// Gold response ids, end-of-sequence id included; mask flags real positions.
struct ResponseInput {
  std::vector<int> ids;
  std::vector<bool> mask;

  static ResponseInput dense(std::vector<int> ids) {
    ResponseInput r;
    r.mask.assign(ids.size(), true);
    r.ids = std::move(ids);
    return r;
  }
};

struct EncodedExample {
  ContextInput context;
  ResponseInput response;
};

// Attention weights recorded while generating one response step: one utterance
// weight per utterance and one word-weight row per utterance (padding stays 0).
struct AttentionStep {
  std::vector<double> utterance_weights;
  std::vector<std::vector<double>> word_weights;
};

struct AttentionTrace {
  std::vector<AttentionStep> steps;

  // Per-utterance mean weight over all recorded steps.
  std::vector<double> mean_utterance_weights() const {
    std::vector<double> out;
    if (steps.empty()) return out;
    out.assign(steps[0].utterance_weights.size(), 0.0);
    for (const auto& s : steps) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += s.utterance_weights[i];
    }
    for (auto& v : out) v /= static_cast<double>(steps.size());
    return out;
  }

  // Per-position mean word weight over all recorded steps.
  std::vector<std::vector<double>> mean_word_weights() const {
    std::vector<std::vector<double>> out;
    if (steps.empty()) return out;
    out.resize(steps[0].word_weights.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i].assign(steps[0].word_weights[i].size(), 0.0);
    }
    for (const auto& s : steps) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t j = 0; j < out[i].size(); ++j) out[i][j] += s.word_weights[i][j];
      }
    }
    for (auto& row : out) {
      for (auto& v : row) v /= static_cast<double>(steps.size());
    }
    return out;
  }
};

}  // namespace hran
