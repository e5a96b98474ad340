#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hran/checkpoint.hpp"
#include "hran/config.hpp"
#include "hran/evaluation.hpp"
#include "hran/model.hpp"
#include "hran/rng.hpp"

namespace hran {

// Per-parameter squared-gradient and squared-update running averages, aligned
// with the canonical parameter enumeration.
template <typename T = double>
struct AdaDeltaState {
  double rho = 0.95;
  double epsilon = 1e-6;
  double lr = 1.0;
  std::vector<std::string> names;
  std::vector<Tensor<T>> g2, dx2;

  static AdaDeltaState init(ModelParams<T>& params, double lr = 1.0) {
    AdaDeltaState s;
    s.lr = lr;
    params.for_each_parameter([&](Parameter<T>& p) {
      s.names.push_back(p.name);
      s.g2.push_back(Tensor<T>::zeros(p.value.shape()));
      s.dx2.push_back(Tensor<T>::zeros(p.value.shape()));
    });
    return s;
  }
};

// One optimizer step over p.grad. Accumulator update order matters: the
// squared-gradient average advances before the step is sized, the squared-update
// average after.
template <typename T>
void adadelta_update(AdaDeltaState<T>& state, ModelParams<T>& params) {
  const T rho = static_cast<T>(state.rho);
  const T eps = static_cast<T>(state.epsilon);
  const T lr = static_cast<T>(state.lr);
  std::size_t k = 0;
  params.for_each_parameter([&](Parameter<T>& p) {
    if (k >= state.names.size() || state.names[k] != p.name ||
        state.g2[k].shape() != p.value.shape()) {
      throw ContractError("adadelta: optimizer state misaligned at parameter " + p.name);
    }
    T* g2 = state.g2[k].data();
    T* dx2 = state.dx2[k].data();
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const T g = p.grad[i];
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("adadelta: non-finite gradient in " + p.name);
      }
      g2[i] = rho * g2[i] + (T(1) - rho) * g * g;
      const T dx = -lr * std::sqrt(dx2[i] + eps) / std::sqrt(g2[i] + eps) * g;
      dx2[i] = rho * dx2[i] + (T(1) - rho) * dx * dx;
      p.value[i] += dx;
    }
    ++k;
  });
  if (k != state.names.size()) {
    throw ContractError("adadelta: optimizer state holds more tensors than the model");
  }
}

// Scales all gradients so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_gradients(ModelParams<T>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ParameterError("clip_gradients: max_norm must be positive");
  double sq = 0.0;
  params.for_each_parameter([&](Parameter<T>& p) {
    for (std::size_t i = 0; i < p.grad.numel(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      if (!std::isfinite(g)) throw NumericError("clip_gradients: non-finite gradient in " + p.name);
      sq += g * g;
    }
  });
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    params.for_each_parameter([&](Parameter<T>& p) {
      for (std::size_t i = 0; i < p.grad.numel(); ++i) p.grad[i] *= scale;
    });
  }
  return norm;
}

// Mutable schedule-following state, serialized into checkpoints so an
// interrupted run resumes exactly.
struct FitState {
  double lr = 1.0;
  double prev_ppl = std::numeric_limits<double>::infinity();
  double best_ppl = std::numeric_limits<double>::infinity();
  int stall = 0;        // epochs since the last sufficient improvement
  int epochs_seen = 0;
  int best_epoch = 0;
};

// Infinities mark "no epoch observed yet"; JSON carries them as null.
inline void to_json(nlohmann::json& j, const FitState& s) {
  auto enc = [](double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  j = nlohmann::json{{"lr", s.lr},          {"prev_ppl", enc(s.prev_ppl)},
                     {"best_ppl", enc(s.best_ppl)}, {"stall", s.stall},
                     {"epochs_seen", s.epochs_seen}, {"best_epoch", s.best_epoch}};
}

inline void from_json(const nlohmann::json& j, FitState& s) {
  s = FitState{};
  auto dec = [&](const char* key, double& out) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    out = v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>();
  };
  detail::read_key(j, "lr", s.lr);
  dec("prev_ppl", s.prev_ppl);
  dec("best_ppl", s.best_ppl);
  detail::read_key(j, "stall", s.stall);
  detail::read_key(j, "epochs_seen", s.epochs_seen);
  detail::read_key(j, "best_epoch", s.best_epoch);
}

// Applies the validation-driven schedule, one observation per epoch: the
// learning rate halves whenever validation perplexity rises above the previous
// epoch's, and training stops once the improvement over the reference (best so
// far by default, previous epoch in consecutive mode) has stayed below the
// threshold for `patience` epochs in a row.
class ScheduleTracker {
 public:
  struct Decision {
    bool halve_lr = false;
    bool stop = false;
    bool improved_best = false;
  };

  explicit ScheduleTracker(const TrainSchedule& schedule) : sched_(schedule) {
    sched_.validate();
    state_.lr = schedule.initial_lr;
  }

  ScheduleTracker(const TrainSchedule& schedule, FitState resumed) : sched_(schedule) {
    sched_.validate();
    state_ = resumed;
  }

  Decision observe(double val_ppl) {
    if (!std::isfinite(val_ppl) || val_ppl <= 0.0) {
      throw NumericError("schedule: validation perplexity must be positive and finite");
    }
    Decision d;
    if (state_.epochs_seen > 0 && val_ppl > state_.prev_ppl && sched_.halve_on_val_increase) {
      state_.lr *= 0.5;
      d.halve_lr = true;
    }
    const double reference =
        sched_.early_stop_consecutive ? state_.prev_ppl : state_.best_ppl;
    if (reference - val_ppl < sched_.early_stop_threshold) {
      ++state_.stall;
    } else {
      state_.stall = 0;
    }
    if (val_ppl < state_.best_ppl) {
      state_.best_ppl = val_ppl;
      state_.best_epoch = state_.epochs_seen + 1;
      d.improved_best = true;
    }
    state_.prev_ppl = val_ppl;
    ++state_.epochs_seen;
    d.stop = state_.stall >= sched_.early_stop_patience;
    return d;
  }

  double lr() const { return state_.lr; }
  const FitState& state() const { return state_; }

 private:
  TrainSchedule sched_;
  FitState state_;
};

using TrainingBatch = std::vector<EncodedExample>;

// Fixed-content batches: contiguous chunks in dataset order. Only the order
// the batches are visited in changes between epochs.
inline std::vector<TrainingBatch> make_batches(const std::vector<EncodedExample>& data,
                                               int batch_size) {
  if (batch_size < 1) throw ParameterError("make_batches: batch_size must be >= 1");
  if (data.empty()) throw ContractError("make_batches: empty dataset");
  std::vector<TrainingBatch> batches;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(data.begin() + static_cast<std::ptrdiff_t>(start),
                         data.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// One pass over all batches in rng-shuffled order. Per batch: losses summed
// over examples on one tape, gradients divided by the batch's scored token
// count, optional global-norm clip, one optimizer step. Returns the epoch's
// token-averaged training loss.
template <typename T>
double train_epoch(Model<T>& model, AdaDeltaState<T>& opt,
                   const std::vector<TrainingBatch>& batches, Rng& rng,
                   const TrainSchedule& sched) {
  if (batches.empty()) throw ContractError("train_epoch: no batches");
  std::vector<std::size_t> order(batches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  double total_loss = 0.0;
  std::size_t total_tokens = 0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t bi = order[pos];
    try {
      const TrainingBatch& batch = batches[bi];
      if (batch.empty()) throw ContractError("empty batch");
      Tape<T> tape;
      Var<T> loss;
      std::size_t tokens = 0;
      for (std::size_t e = 0; e < batch.size(); ++e) {
        auto l = forward_nll(tape, model.params, model.config, batch[e].context,
                             batch[e].response);
        loss = e == 0 ? l : add(loss, l);
        tokens += scored_token_count(batch[e].response);
      }
      model.params.zero_grads();
      tape.backward(loss);
      tape.harvest_parameter_grads();
      const T inv = T(1) / static_cast<T>(tokens);
      model.params.for_each_parameter([&](Parameter<T>& p) {
        for (std::size_t i = 0; i < p.grad.numel(); ++i) p.grad[i] *= inv;
      });
      if (sched.clip_enabled) clip_gradients(model.params, sched.clip_norm);
      adadelta_update(opt, model.params);

      const double batch_loss = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(batch_loss)) throw NumericError("non-finite batch loss");
      total_loss += batch_loss;
      total_tokens += tokens;
    } catch (const NumericError& e) {
      throw NumericError("train_epoch: batch " + std::to_string(bi) + ": " + e.what());
    }
  }
  return total_loss / static_cast<double>(total_tokens);
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;  // per token
  double val_ppl = 0.0;
  double lr = 0.0;  // rate used during this epoch
  int stall = 0;
  bool lr_halved = false;
  bool new_best = false;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},   {"train_loss", r.train_loss},
                     {"val_ppl", r.val_ppl}, {"lr", r.lr},
                     {"stall", r.stall},   {"lr_halved", r.lr_halved},
                     {"new_best", r.new_best}};
}

struct FitOptions {
  std::string checkpoint_path;       // latest epoch, the resume target
  std::string best_checkpoint_path;  // lowest validation perplexity
  std::string report_path;           // JSON lines, one per epoch, no timestamps
  nlohmann::json extra;              // carried into checkpoints verbatim
};

struct FitResult {
  std::vector<EpochRecord> epochs;
  std::string stop_reason;  // "early_stop" or "max_epochs"
  FitState final_state;
};

// Bundles everything needed to continue a run where it stopped.
template <typename T = double>
struct ResumePoint {
  AdaDeltaState<T> opt;
  FitState fit;
  int epoch = 0;  // completed epochs
};

namespace detail {
// Stream offset for per-epoch batch shuffling, fixed so a resumed run draws
// the identical permutation for every epoch.
inline const std::uint64_t kEpochShuffleStream = fnv1a64("epoch-shuffle");
}  // namespace detail

template <typename T>
Checkpoint<T> make_checkpoint(const Model<T>& model, const AdaDeltaState<T>& opt,
                              const TrainSchedule& schedule, const FitState& fit_state,
                              int epoch, const nlohmann::json& extra) {
  Checkpoint<T> ck;
  ck.config = model.config;
  ck.schedule = schedule;
  ck.epoch = epoch;
  ck.fit_state = fit_state;
  ck.extra = extra.is_null() ? nlohmann::json::object() : extra;
  model.params.for_each_parameter(
      [&](const Parameter<T>& p) { ck.tensors.emplace_back(p.name, p.value); });
  for (std::size_t k = 0; k < opt.names.size(); ++k) {
    ck.tensors.emplace_back("adadelta.g2." + opt.names[k], opt.g2[k]);
  }
  for (std::size_t k = 0; k < opt.names.size(); ++k) {
    ck.tensors.emplace_back("adadelta.dx2." + opt.names[k], opt.dx2[k]);
  }
  return ck;
}

// Loads parameters and optimizer state back into a live model. The model's
// configuration must match the checkpoint's exactly.
template <typename T>
ResumePoint<T> restore_checkpoint(Model<T>& model, const Checkpoint<T>& ck) {
  const std::string want = config_fingerprint(model.config);
  const std::string have = config_fingerprint(ck.config);
  if (want != have) {
    throw CompatibilityError("checkpoint: configuration fingerprint " + have +
                             " does not match the run's " + want);
  }
  apply_parameters(model.params, ck);
  ResumePoint<T> rp;
  rp.opt = AdaDeltaState<T>::init(model.params);
  for (std::size_t k = 0; k < rp.opt.names.size(); ++k) {
    const Tensor<T>* g2 = ck.find("adadelta.g2." + rp.opt.names[k]);
    const Tensor<T>* dx2 = ck.find("adadelta.dx2." + rp.opt.names[k]);
    if (!g2 || !dx2) {
      throw CompatibilityError("checkpoint: optimizer state missing for " + rp.opt.names[k]);
    }
    if (g2->shape() != rp.opt.g2[k].shape() || dx2->shape() != rp.opt.dx2[k].shape()) {
      throw CompatibilityError("checkpoint: optimizer state shape mismatch for " +
                               rp.opt.names[k]);
    }
    rp.opt.g2[k] = *g2;
    rp.opt.dx2[k] = *dx2;
  }
  if (!ck.fit_state.is_null()) rp.fit = ck.fit_state.template get<FitState>();
  rp.opt.lr = rp.fit.lr;
  rp.epoch = ck.epoch;
  return rp;
}

// The full optimization loop: epochs of train_epoch, validation perplexity
// after each, learning-rate halving and early stopping per the schedule,
// freshest and best checkpoints written when paths are configured. Pass a
// ResumePoint to continue a previous run; epochs already completed are not
// repeated and the report file is appended to.
template <typename T>
FitResult fit(Model<T>& model, const std::vector<EncodedExample>& train,
              const std::vector<EncodedExample>& validation, const TrainSchedule& schedule,
              const FitOptions& options = {}, const ResumePoint<T>* resume = nullptr) {
  schedule.validate();
  if (train.empty()) throw ContractError("fit: empty training set");
  if (validation.empty()) throw ContractError("fit: empty validation set");

  const auto batches = make_batches(train, schedule.batch_size);
  AdaDeltaState<T> opt =
      resume ? resume->opt : AdaDeltaState<T>::init(model.params, schedule.initial_lr);
  ScheduleTracker tracker =
      resume ? ScheduleTracker(schedule, resume->fit) : ScheduleTracker(schedule);
  const int start_epoch = (resume ? resume->epoch : 0) + 1;

  std::ofstream report;
  if (!options.report_path.empty()) {
    report.open(options.report_path,
                resume ? (std::ios::binary | std::ios::app) : (std::ios::binary | std::ios::trunc));
    if (!report) throw FormatError("fit: cannot write report to " + options.report_path);
  }

  const std::string fingerprint = config_fingerprint(model.config);
  FitResult result;
  result.stop_reason = "max_epochs";
  for (int epoch = start_epoch; epoch <= schedule.max_epochs; ++epoch) {
    Rng shuffle_rng(model.config.seed,
                    detail::kEpochShuffleStream + static_cast<std::uint64_t>(epoch));
    opt.lr = tracker.lr();
    const double lr_used = opt.lr;
    const double train_loss = train_epoch(model, opt, batches, shuffle_rng, schedule);
    auto val = perplexity(model, validation, fingerprint);
    const auto decision = tracker.observe(val.perplexity);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_loss;
    rec.val_ppl = val.perplexity;
    rec.lr = lr_used;
    rec.stall = tracker.state().stall;
    rec.lr_halved = decision.halve_lr;
    rec.new_best = decision.improved_best;
    result.epochs.push_back(rec);
    if (report.is_open()) {
      nlohmann::json line = rec;
      line["fingerprint"] = fingerprint;
      line["clip_enabled"] = schedule.clip_enabled;
      line["clip_norm"] = schedule.clip_norm;
      report << line.dump() << '\n';
      report.flush();
    }

    if (decision.improved_best && !options.best_checkpoint_path.empty()) {
      save_checkpoint(options.best_checkpoint_path,
                      make_checkpoint(model, opt, schedule, tracker.state(), epoch,
                                      options.extra));
    }
    if (!options.checkpoint_path.empty()) {
      save_checkpoint(options.checkpoint_path,
                      make_checkpoint(model, opt, schedule, tracker.state(), epoch,
                                      options.extra));
    }
    if (decision.stop) {
      result.stop_reason = "early_stop";
      break;
    }
  }
  result.final_state = tracker.state();
  return result;
}

}  // namespace hran
