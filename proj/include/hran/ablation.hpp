#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "hran/evaluation.hpp"
#include "hran/training.hpp"

namespace hran {

struct AblationRow {
  Ablation ablation = Ablation::full;
  double best_val_ppl = 0.0;
  int best_epoch = 0;
  std::size_t parameter_count = 0;
  std::string error;  // nonempty when this variant failed; the suite continues
};

struct AblationTable {
  std::vector<AblationRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row{{"ablation", to_string(r.ablation)},
                         {"parameter_count", r.parameter_count}};
      if (r.error.empty()) {
        row["best_val_ppl"] = r.best_val_ppl;
        row["best_epoch"] = r.best_epoch;
      } else {
        row["error"] = r.error;
      }
      rows_json.push_back(std::move(row));
    }
    return nlohmann::json{{"rows", rows_json}};
  }
};

// Trains all four attention variants from the same seed and data and reports
// their best validation perplexities side by side. A variant's failure is
// recorded in its row without stopping the others.
template <typename T = double>
AblationTable run_ablation_suite(const ModelConfig& base,
                                 const std::vector<EncodedExample>& train,
                                 const std::vector<EncodedExample>& validation,
                                 const TrainSchedule& schedule) {
  AblationTable table;
  for (Ablation ab : {Ablation::full, Ablation::no_ud_att, Ablation::no_word_att,
                      Ablation::no_utt_att}) {
    ModelConfig cfg = base;
    cfg.ablation = ab;
    AblationRow row;
    row.ablation = ab;
    try {
      auto model = Model<T>::init(cfg);
      row.parameter_count = model.params.parameter_count();
      auto result = fit(model, train, validation, schedule);
      row.best_val_ppl = result.final_state.best_ppl;
      row.best_epoch = result.final_state.best_epoch;
    } catch (const Error& e) {
      row.error = e.what();
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace hran
