#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "hran/error.hpp"
#include "hran/types.hpp"

namespace hran {

inline double perplexity_from(double total_nll, std::size_t denominator) {
  if (denominator == 0) throw ContractError("perplexity: empty normalization constant");
  return std::exp(total_nll / static_cast<double>(denominator));
}

// Corpus-level perplexity summary. The headline figure always satisfies
// perplexity == exp(sum(example_nll) / denominator) with the sum taken in
// example order, so it can be recomputed from the report bitwise.
struct EvalReport {
  double perplexity = 0.0;
  std::size_t token_count = 0;           // response tokens scored, end tokens included
  std::size_t example_count = 0;
  std::vector<double> example_nll;       // teacher-forced NLL per example
  bool per_example_normalization = false;
  std::string fingerprint;               // configuration fingerprint of the scorer

  double total_nll() const {
    double s = 0.0;
    for (double v : example_nll) s += v;
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["perplexity"] = perplexity;
    j["token_count"] = token_count;
    j["example_count"] = example_count;
    j["example_nll"] = example_nll;
    j["normalization"] = per_example_normalization ? "examples" : "tokens";
    j["fingerprint"] = fingerprint;
    return j;
  }
};

inline std::size_t scored_token_count(const ResponseInput& resp) {
  std::size_t n = 0;
  for (bool m : resp.mask) n += m ? 1 : 0;
  return n;
}

// Teacher-forced corpus perplexity of any scorer exposing
// double example_nll(const EncodedExample&). By default the normalization
// constant is the total scored token count; the flag switches to per-example
// normalization.
template <typename Scorer>
EvalReport perplexity(Scorer& scorer, const std::vector<EncodedExample>& examples,
                      std::string fingerprint = "", bool normalize_by_examples = false) {
  if (examples.empty()) throw ContractError("perplexity: empty example list");
  EvalReport report;
  report.fingerprint = std::move(fingerprint);
  report.per_example_normalization = normalize_by_examples;
  report.example_count = examples.size();
  report.example_nll.reserve(examples.size());
  double total = 0.0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    double nll;
    try {
      nll = scorer.example_nll(examples[i]);
    } catch (const ContractError& e) {
      throw ContractError("perplexity: example " + std::to_string(i) + ": " + e.what());
    }
    if (!std::isfinite(nll)) {
      throw NumericError("perplexity: example " + std::to_string(i) +
                         " produced a non-finite NLL");
    }
    report.example_nll.push_back(nll);
    total += nll;
    report.token_count += scored_token_count(examples[i].response);
  }
  report.perplexity = perplexity_from(
      total, normalize_by_examples ? report.example_count : report.token_count);
  return report;
}

// Add-one-smoothed unigram distribution over response tokens (end tokens
// included). A calibration floor: any model that uses its context should beat
// this on a context-dependent corpus.
class UnigramBaseline {
 public:
  UnigramBaseline(const std::vector<EncodedExample>& train, int vocab_size)
      : vocab_size_(vocab_size) {
    if (train.empty()) throw ContractError("unigram baseline: empty training set");
    if (vocab_size < 5) throw ParameterError("unigram baseline: vocab size below reserved ids");
    counts_.assign(static_cast<std::size_t>(vocab_size), 0);
    for (const auto& ex : train) {
      const auto& r = ex.response;
      for (std::size_t t = 0; t < r.ids.size(); ++t) {
        if (!r.mask[t]) continue;
        if (r.ids[t] < 0 || r.ids[t] >= vocab_size) {
          throw VocabError("unigram baseline: response id " + std::to_string(r.ids[t]) +
                           " outside vocabulary of size " + std::to_string(vocab_size));
        }
        ++counts_[static_cast<std::size_t>(r.ids[t])];
        ++total_;
      }
    }
  }

  int vocab_size() const { return vocab_size_; }

  double log_prob(int id) const {
    if (id < 0 || id >= vocab_size_) {
      throw VocabError("unigram baseline: id " + std::to_string(id) + " out of range");
    }
    const double num = static_cast<double>(counts_[static_cast<std::size_t>(id)]) + 1.0;
    const double den = static_cast<double>(total_) + static_cast<double>(vocab_size_);
    return std::log(num / den);
  }

  double example_nll(const EncodedExample& ex) const {
    double nll = 0.0;
    bool any = false;
    for (std::size_t t = 0; t < ex.response.ids.size(); ++t) {
      if (!ex.response.mask[t]) continue;
      nll -= log_prob(ex.response.ids[t]);
      any = true;
    }
    if (!any) throw ContractError("unigram baseline: empty response");
    return nll;
  }

 private:
  int vocab_size_;
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
};

}  // namespace hran
