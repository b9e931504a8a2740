#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "increlearn/auc.hpp"
#include "increlearn/errors.hpp"
#include "increlearn/model.hpp"
#include "increlearn/model_store.hpp"
#include "increlearn/scheduler.hpp"
#include "increlearn/trainer.hpp"

namespace increlearn {

// Strategies compared by the benchmark:
//   cold        cold start on every phase seen so far (or the last cold_window)
//   warm        random effects warm-started on the newest phase, fixed effect frozen
//   incre_<h>   random effects updated incrementally with precision <h>, fixed effect frozen
inline const std::vector<std::string>& all_strategies() {
  static const std::vector<std::string> k{"cold", "warm", "incre_diag", "incre_full", "incre_dfp", "incre_adam"};
  return k;
}

struct BenchmarkConfig {
  TrainerConfig trainer;
  double lambda_f = 1.0;
  std::size_t sweeps = 2;
  std::size_t cold_window = 0;  // 0: all phases so far
  std::vector<RandomEffectSpec> random_effects;
  std::optional<std::filesystem::path> store;  // per-strategy subdirectories when set
};

struct BenchmarkRow {
  std::size_t phase = 0;  // evaluation phase; the model was trained through phase - 1
  std::string strategy;
  double test_auc = 0.0;
  RoundTiming timing;
  bool ok = true;
  std::string error;
};

struct BenchmarkReport {
  std::vector<std::string> strategies;
  std::vector<BenchmarkRow> rows;

  std::vector<const BenchmarkRow*> rows_of(const std::string& strategy) const {
    std::vector<const BenchmarkRow*> out;
    for (const auto& r : rows)
      if (r.strategy == strategy) out.push_back(&r);
    return out;
  }

  /// Mean test AUC over the rounds that succeeded.
  double mean_auc(const std::string& strategy) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto* r : rows_of(strategy)) {
      if (!r->ok) continue;
      s += r->test_auc;
      ++n;
    }
    if (n == 0) throw PreconditionError("no successful rounds for strategy " + strategy);
    return s / static_cast<double>(n);
  }

  double total_fit_seconds(const std::string& strategy) const {
    double s = 0.0;
    for (const auto* r : rows_of(strategy)) s += r->timing.fit_seconds;
    return s;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "phase,strategy,test_auc,fit_seconds,load_seconds,save_seconds,status\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f,%.6f,%.6f,%s\n", r.phase, r.strategy.c_str(), r.test_auc,
                    r.timing.fit_seconds, r.timing.load_seconds, r.timing.save_seconds, r.ok ? "ok" : "failed");
      os << buf;
    }
    return os.str();
  }

  std::string to_markdown() const {
    std::ostringstream os;
    char buf[64];
    os << "| phase |";
    for (const auto& s : strategies) os << ' ' << s << " |";
    os << "\n|---|";
    for (std::size_t k = 0; k < strategies.size(); ++k) os << "---|";
    os << '\n';
    std::map<std::size_t, std::map<std::string, const BenchmarkRow*>> grid;
    for (const auto& r : rows) grid[r.phase][r.strategy] = &r;
    for (const auto& [phase, cells] : grid) {
      os << "| " << phase << " |";
      for (const auto& s : strategies) {
        auto it = cells.find(s);
        if (it == cells.end() || !it->second->ok) {
          os << " failed |";
        } else {
          std::snprintf(buf, sizeof buf, " %.4f |", it->second->test_auc);
          os << buf;
        }
      }
      os << '\n';
    }
    os << "| mean |";
    for (const auto& s : strategies) {
      bool any = false;
      for (const auto* r : rows_of(s)) any = any || r->ok;
      if (any) {
        std::snprintf(buf, sizeof buf, " %.4f |", mean_auc(s));
        os << buf;
      } else {
        os << " - |";
      }
    }
    os << "\n\n| strategy | fit s | load s | save s |\n|---|---|---|---|\n";
    for (const auto& s : strategies) {
      RoundTiming total;
      for (const auto* r : rows_of(s)) {
        total.fit_seconds += r->timing.fit_seconds;
        total.load_seconds += r->timing.load_seconds;
        total.save_seconds += r->timing.save_seconds;
      }
      char line[160];
      std::snprintf(line, sizeof line, "| %s | %.3f | %.3f | %.3f |\n", s.c_str(), total.fit_seconds,
                    total.load_seconds, total.save_seconds);
      os << line;
    }
    return os.str();
  }
};

namespace detail {

inline HessianMode strategy_mode(const std::string& s) {
  if (s == "incre_diag" || s == "cold" || s == "warm") return HessianMode::diag;
  if (s == "incre_full") return HessianMode::full;
  if (s == "incre_dfp") return HessianMode::dfp;
  if (s == "incre_adam") return HessianMode::adam;
  throw ValidationError("unknown strategy '" + s + "'");
}

inline BcdSchedule benchmark_schedule(ComponentPlan fixed, ComponentPlan random, const BenchmarkConfig& cfg) {
  BcdSchedule s;
  s.sweeps = cfg.sweeps;
  s.fixed = fixed;
  for (const auto& re : cfg.random_effects) {
    s.random_effects.push_back({re.entity_type, random, re.feature_subset, re.restrict_features});
  }
  return s;
}

struct StrategyState {
  GlmixModel model;
  GlmixPriors priors;
};

}  // namespace detail

/// Trains every strategy through the stream and scores each on the phase after
/// the one it just consumed. All strategies start from one cold start on
/// phase 0; rows cover evaluation phases 2..n-1.
inline BenchmarkReport run_benchmark(const std::vector<PhaseDataset>& stream, const std::vector<std::string>& strategies,
                                     const BenchmarkConfig& cfg) {
  if (stream.size() < 3) throw PreconditionError("benchmark needs at least 3 phases");
  if (strategies.empty()) throw ValidationError("benchmark needs at least one strategy");
  for (std::size_t t = 0; t < stream.size(); ++t) {
    if (stream[t].phase_index != t) throw ValidationError("benchmark phases must be contiguous from 0");
    if (stream[t].feature_dim != stream[0].feature_dim) throw ShapeError("benchmark phases differ in dim");
  }
  if (!(cfg.lambda_f >= 0.0 && cfg.lambda_f <= cfg.trainer.max_forgetting_factor)) {
    throw ValidationError("forgetting factor outside the allowed range");
  }
  for (const auto& s : strategies) (void)detail::strategy_mode(s);

  BenchmarkReport report;
  report.strategies = strategies;

  // Shared start: the weights of a cold fit do not depend on the precision
  // mode, so one fit per mode yields the same model with mode-specific priors.
  std::map<HessianMode, detail::StrategyState> starts;
  const GlmixModel zero{zero_model(stream[0].feature_dim, cfg.trainer.l2_base), {}};
  for (const auto& s : strategies) {
    const HessianMode mode = detail::strategy_mode(s);
    if (starts.count(mode)) continue;
    TrainerConfig tc = cfg.trainer;
    tc.hessian_mode = mode;
    const ComponentPlan cold{ComponentPlan::Kind::cold, 1.0, mode};
    BcdResult r = block_coordinate_descent(stream[0], zero, {}, detail::benchmark_schedule(cold, cold, cfg), tc);
    starts[mode] = {std::move(r.model), std::move(r.priors)};
  }

  for (const auto& s : strategies) {
    const HessianMode mode = detail::strategy_mode(s);
    detail::StrategyState state = starts.at(mode);
    TrainerConfig tc = cfg.trainer;
    tc.hessian_mode = mode;
    std::optional<std::filesystem::path> store;
    if (cfg.store) {
      store = *cfg.store / s;
      save_round(*store, {0, 0, cfg.lambda_f, mode, stream[0].feature_dim, state.model, state.priors});
    }
    for (std::size_t t = 1; t + 1 < stream.size(); ++t) {
      BenchmarkRow row;
      row.phase = t + 1;
      row.strategy = s;
      try {
        if (store) {
          const auto t0 = detail::Clock::now();
          RoundSnapshot snap = load_round(*store, t - 1);
          state.model = std::move(snap.model);
          state.priors = std::move(snap.priors);
          row.timing.load_seconds = detail::seconds_since(t0);
        }
        BcdResult r;
        if (s == "cold") {
          const std::size_t first = cfg.cold_window == 0 || t + 1 <= cfg.cold_window ? 0 : t + 1 - cfg.cold_window;
          std::vector<PhaseDataset> window(stream.begin() + static_cast<std::ptrdiff_t>(first),
                                           stream.begin() + static_cast<std::ptrdiff_t>(t + 1));
          const ComponentPlan cold{ComponentPlan::Kind::cold, 1.0, mode};
          r = block_coordinate_descent(merge_phases(window), zero, {}, detail::benchmark_schedule(cold, cold, cfg),
                                       tc);
        } else {
          const ComponentPlan frozen{ComponentPlan::Kind::frozen};
          const ComponentPlan random = s == "warm" ? ComponentPlan{ComponentPlan::Kind::warm, 1.0, mode}
                                                   : ComponentPlan{ComponentPlan::Kind::incremental, cfg.lambda_f, mode};
          r = block_coordinate_descent(stream[t], state.model, state.priors,
                                       detail::benchmark_schedule(frozen, random, cfg), tc);
        }
        state.model = std::move(r.model);
        state.priors = std::move(r.priors);
        row.timing.fit_seconds = r.fit_seconds;
        row.test_auc = glmix_auc(state.model, stream[t + 1]);
      } catch (const StoreError&) {
        throw;
      } catch (const Error& e) {
        row.ok = false;
        row.error = e.what();
      }
      if (store) {
        const auto t0 = detail::Clock::now();
        save_round(*store, {t, 0, cfg.lambda_f, mode, stream[0].feature_dim, state.model, state.priors});
        row.timing.save_seconds = detail::seconds_since(t0);
      }
      report.rows.push_back(std::move(row));
    }
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const BenchmarkRow& a, const BenchmarkRow& b) { return a.phase < b.phase; });
  return report;
}

struct ForgettingFactorSearch {
  std::vector<double> grid;
  std::vector<double> mean_auc;
  double best = 1.0;
};

/// Scores each forgetting factor by the mean next-phase AUC of incremental
/// training with `mode`; ties go to the larger factor.
inline ForgettingFactorSearch tune_forgetting_factor(const std::vector<PhaseDataset>& stream,
                                                     const std::vector<double>& grid, const BenchmarkConfig& cfg,
                                                     HessianMode mode = HessianMode::diag) {
  if (grid.empty()) throw ValidationError("forgetting-factor grid is empty");
  const std::string strategy = "incre_" + to_string(mode);
  ForgettingFactorSearch out;
  out.grid = grid;
  double best_auc = -1.0;
  for (double lf : grid) {
    BenchmarkConfig local = cfg;
    local.lambda_f = lf;
    local.store.reset();
    const double m = run_benchmark(stream, {strategy}, local).mean_auc(strategy);
    out.mean_auc.push_back(m);
    if (m > best_auc || (m == best_auc && lf > out.best)) {
      best_auc = m;
      out.best = lf;
    }
  }
  return out;
}

}  // namespace increlearn
