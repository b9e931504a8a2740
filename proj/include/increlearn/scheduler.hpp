#pragma once

#include <cstddef>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/model.hpp"
#include "increlearn/model_store.hpp"
#include "increlearn/trainer.hpp"

namespace increlearn {

/// A random-effect component of the GLMix model and the features it sees.
struct RandomEffectSpec {
  std::string entity_type;
  std::vector<std::size_t> feature_subset;
  bool restrict_features = false;
};

enum class RoundKind { cold, incremental };

inline std::string to_string(RoundKind k) { return k == RoundKind::cold ? "cold" : "incremental"; }

struct ScheduleConfig {
  std::size_t cold_period = 16;  // T: one cold round per T rounds
  std::size_t cold_window = 0;   // l: phases a cold round trains on; 0 means T
  double lambda_f = 1.0;
  HessianMode hessian_mode = HessianMode::diag;
  bool reset_counter_on_failure = true;
  bool incremental_fixed_effect = false;  // fixed effect frozen between cold rounds by default
  std::size_t sweeps = 2;
  TrainerConfig trainer;
  std::vector<RandomEffectSpec> random_effects;
  std::optional<std::filesystem::path> store;
  // Called before training with the round index and branch; throwing fails the round.
  std::function<void(std::size_t, RoundKind)> before_training;

  std::size_t window() const noexcept { return cold_window == 0 ? cold_period : cold_window; }

  void validate() const {
    if (cold_period < 1) throw ValidationError("cold period T must be >= 1");
    if (window() < 1) throw ValidationError("cold window must be >= 1");
    if (sweeps < 1) throw ValidationError("sweeps must be >= 1");
    if (!(lambda_f >= 0.0 && lambda_f <= trainer.max_forgetting_factor)) {
      throw ValidationError("forgetting factor outside [0, " + std::to_string(trainer.max_forgetting_factor) + "]");
    }
  }
};

struct StreamState {
  std::size_t t = 0;        // index of the next phase to consume
  std::size_t counter = 0;  // incremental rounds since the last cold round, in [0, T)
  GlmixModel model;
  GlmixPriors priors;
  std::deque<PhaseDataset> history;  // last l phases, oldest first

  friend bool operator==(const StreamState&, const StreamState&) = default;
};

struct TrainedRoundReport {
  std::size_t t = 0;
  RoundKind kind = RoundKind::cold;
  bool ok = true;
  std::string error;
  std::size_t counter_before = 0;
  std::size_t counter_after = 0;
  std::size_t train_examples = 0;
  std::size_t entity_failures = 0;
  double train_nll = 0.0;
  RoundTiming timing;

  friend bool operator==(const TrainedRoundReport&, const TrainedRoundReport&) = default;
};

namespace detail {

inline BcdSchedule round_schedule(RoundKind kind, const ScheduleConfig& cfg) {
  BcdSchedule s;
  s.sweeps = cfg.sweeps;
  const ComponentPlan cold{ComponentPlan::Kind::cold, 1.0, cfg.hessian_mode};
  const ComponentPlan inc{ComponentPlan::Kind::incremental, cfg.lambda_f, cfg.hessian_mode};
  if (kind == RoundKind::cold) {
    s.fixed = cold;
  } else {
    s.fixed = cfg.incremental_fixed_effect ? inc : ComponentPlan{ComponentPlan::Kind::frozen};
  }
  for (const auto& re : cfg.random_effects) {
    s.random_effects.push_back({re.entity_type, kind == RoundKind::cold ? cold : inc, re.feature_subset,
                                re.restrict_features});
  }
  return s;
}

inline RoundSnapshot snapshot_of(const StreamState& s, std::size_t t, const ScheduleConfig& cfg,
                                 std::size_t feature_dim) {
  return {t, s.counter, cfg.lambda_f, cfg.hessian_mode, feature_dim, s.model, s.priors};
}

}  // namespace detail

/// One round of the stream: a cold round over the buffered window when the
/// counter is 0, an incremental round on d_t otherwise.
///
/// On failure the model, priors and history are left as they were, the
/// counter is reset to 0 when the policy says so, and t still advances.
/// With a store configured the previous round is loaded from it before
/// training and the resulting state is saved as round t.
inline std::pair<StreamState, TrainedRoundReport> step(const StreamState& state, const PhaseDataset& d_t,
                                                       const ScheduleConfig& cfg) {
  cfg.validate();
  if (d_t.phase_index != state.t) {
    throw ValidationError("step: expected phase " + std::to_string(state.t) + ", got " +
                          std::to_string(d_t.phase_index));
  }
  TrainedRoundReport report;
  report.t = state.t;
  report.kind = state.counter == 0 ? RoundKind::cold : RoundKind::incremental;
  report.counter_before = state.counter;

  StreamState next = state;
  next.history.push_back(d_t);
  while (next.history.size() > cfg.window()) next.history.pop_front();

  try {
    if (cfg.store && state.t > 0) {
      const auto t0 = detail::Clock::now();
      RoundSnapshot snap = load_round(*cfg.store, state.t - 1);
      next.model = std::move(snap.model);
      next.priors = std::move(snap.priors);
      report.timing.load_seconds = detail::seconds_since(t0);
    }
    if (cfg.before_training) cfg.before_training(state.t, report.kind);

    TrainerConfig trainer = cfg.trainer;
    trainer.hessian_mode = cfg.hessian_mode;
    BcdResult result;
    if (report.kind == RoundKind::cold) {
      std::vector<PhaseDataset> window(next.history.begin(), next.history.end());
      PhaseDataset merged = merge_phases(window);
      report.train_examples = merged.size();
      GlmixModel start{zero_model(merged.feature_dim, trainer.l2_base), {}};
      result = block_coordinate_descent(merged, start, {}, detail::round_schedule(RoundKind::cold, cfg), trainer);
    } else {
      report.train_examples = d_t.size();
      result = block_coordinate_descent(d_t, next.model, next.priors,
                                        detail::round_schedule(RoundKind::incremental, cfg), trainer);
    }
    next.model = std::move(result.model);
    next.priors = std::move(result.priors);
    report.entity_failures = result.failures.size();
    report.train_nll = result.sweep_nll.empty() ? 0.0 : result.sweep_nll.back();
    report.timing.fit_seconds = result.fit_seconds;
    next.counter = (state.counter + 1) % cfg.cold_period;
  } catch (const StoreError&) {
    throw;
  } catch (const Error& e) {
    const auto load = report.timing.load_seconds;
    next = state;
    if (cfg.reset_counter_on_failure) next.counter = 0;
    report.ok = false;
    report.error = e.what();
    report.timing = {};
    report.timing.load_seconds = load;
  }
  next.t = state.t + 1;
  report.counter_after = next.counter;

  if (cfg.store) {
    const auto t0 = detail::Clock::now();
    save_round(*cfg.store, detail::snapshot_of(next, state.t, cfg, next.model.fixed.dim()));
    report.timing.save_seconds = detail::seconds_since(t0);
  }
  return {std::move(next), std::move(report)};
}

using RoundSink = std::function<void(const TrainedRoundReport&)>;

/// Folds `step` over `stream`, whose phases must continue from `initial.t`.
inline StreamState run_stream(const std::vector<PhaseDataset>& stream, const ScheduleConfig& cfg,
                              const RoundSink& sink = {}, StreamState initial = {}) {
  StreamState state = std::move(initial);
  for (const auto& phase : stream) {
    auto [next, report] = step(state, phase, cfg);
    state = std::move(next);
    if (sink) sink(report);
  }
  return state;
}

/// Rebuilds the state after the latest stored round. The history buffer is
/// refilled from `stream` with the l phases ending at that round.
inline StreamState resume_from_store(const std::filesystem::path& store, const std::vector<PhaseDataset>& stream,
                                     const ScheduleConfig& cfg) {
  StreamState state;
  auto latest = latest_round(store);
  if (!latest) return state;
  RoundSnapshot snap = load_round(store, *latest);
  state.t = snap.t + 1;
  state.counter = snap.counter;
  state.model = std::move(snap.model);
  state.priors = std::move(snap.priors);
  if (stream.size() < state.t) throw ValidationError("resume: stream shorter than the stored round");
  const std::size_t first = state.t > cfg.window() ? state.t - cfg.window() : 0;
  for (std::size_t k = first; k < state.t; ++k) state.history.push_back(stream[k]);
  return state;
}

}  // namespace increlearn
