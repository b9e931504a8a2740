#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "increlearn/scheduler.hpp"
#include "test_support.hpp"

using namespace increlearn;
namespace fs = std::filesystem;
namespace ts = testing_support;

namespace {

class TempDir {
 public:
  TempDir() {
    static std::size_t counter = 0;
    path_ = fs::temp_directory_path() /
            ("increlearn_sched_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<PhaseDataset> make_stream(std::size_t n_phases, std::uint64_t seed = 13) {
  std::mt19937_64 rng(seed);
  std::vector<PhaseDataset> out;
  for (std::size_t t = 0; t < n_phases; ++t) out.push_back(ts::random_dataset(rng, 120, 8, 3, 5, 0.0, t));
  return out;
}

ScheduleConfig make_config(std::size_t period, HessianMode mode = HessianMode::diag) {
  ScheduleConfig c;
  c.cold_period = period;
  c.hessian_mode = mode;
  c.lambda_f = 0.9;
  c.random_effects.push_back({"member", {0, 1, 2, 3}, true});
  return c;
}

std::vector<TrainedRoundReport> run(const std::vector<PhaseDataset>& stream, const ScheduleConfig& cfg,
                                    StreamState* final_state = nullptr) {
  std::vector<TrainedRoundReport> reports;
  StreamState s = run_stream(stream, cfg, [&](const TrainedRoundReport& r) { reports.push_back(r); });
  if (final_state) *final_state = std::move(s);
  return reports;
}

std::vector<RoundKind> kinds(const std::vector<TrainedRoundReport>& reports) {
  std::vector<RoundKind> out;
  for (const auto& r : reports) out.push_back(r.kind);
  return out;
}

constexpr RoundKind C = RoundKind::cold;
constexpr RoundKind I = RoundKind::incremental;

}  // namespace

TEST(Scheduler, PeriodThreeBranchSequence) {
  const auto reports = run(make_stream(6), make_config(3));
  EXPECT_EQ(kinds(reports), (std::vector<RoundKind>{C, I, I, C, I, I}));
  for (std::size_t t = 0; t < reports.size(); ++t) {
    EXPECT_TRUE(reports[t].ok);
    EXPECT_EQ(reports[t].t, t);
    EXPECT_EQ(reports[t].counter_before, t % 3);
    EXPECT_EQ(reports[t].counter_after, (t + 1) % 3);
  }
  std::size_t colds = 0;
  for (auto k : kinds(reports)) colds += k == C;
  EXPECT_EQ(colds, 2u);
}

TEST(Scheduler, PeriodOneIsAlwaysCold) {
  const auto reports = run(make_stream(4), make_config(1));
  EXPECT_EQ(kinds(reports), (std::vector<RoundKind>{C, C, C, C}));
}

TEST(Scheduler, InjectedFailureForcesNextRoundCold) {
  auto cfg = make_config(3);
  cfg.before_training = [](std::size_t t, RoundKind) {
    if (t == 4) throw NumericalError("injected");
  };
  const auto reports = run(make_stream(7), cfg);
  EXPECT_EQ(kinds(reports), (std::vector<RoundKind>{C, I, I, C, I, C, I}));
  EXPECT_FALSE(reports[4].ok);
  EXPECT_EQ(reports[4].error, "injected");
  EXPECT_EQ(reports[4].counter_after, 0u);
  for (std::size_t t = 0; t < reports.size(); ++t)
    if (t != 4) EXPECT_TRUE(reports[t].ok);
}

TEST(Scheduler, FailureWithoutResetKeepsCounter) {
  auto cfg = make_config(3);
  cfg.reset_counter_on_failure = false;
  cfg.before_training = [](std::size_t t, RoundKind) {
    if (t == 4) throw NumericalError("injected");
  };
  const auto reports = run(make_stream(7), cfg);
  EXPECT_EQ(kinds(reports), (std::vector<RoundKind>{C, I, I, C, I, I, I}));
  EXPECT_EQ(reports[4].counter_after, 1u);
}

TEST(Scheduler, FailedRoundRollsBackModelPriorsAndBuffer) {
  const auto stream = make_stream(3);
  auto cfg = make_config(3);
  StreamState before;
  run(std::vector<PhaseDataset>(stream.begin(), stream.begin() + 2), cfg, &before);
  ASSERT_EQ(before.t, 2u);
  cfg.before_training = [](std::size_t, RoundKind) { throw ValidationError("boom"); };
  auto [after, report] = step(before, stream[2], cfg);
  EXPECT_FALSE(report.ok);
  EXPECT_EQ(after.model, before.model);
  EXPECT_EQ(after.priors, before.priors);
  EXPECT_EQ(after.history, before.history);
  EXPECT_EQ(after.t, 3u);
  EXPECT_EQ(after.counter, 0u);
}

TEST(Scheduler, RealTrainingFailureIsContained) {
  // A first incremental round with no model to update fails on the dim check.
  const auto stream = make_stream(2);
  StreamState s;
  s.counter = 1;
  auto [next, report] = step(s, stream[0], make_config(3));
  EXPECT_FALSE(report.ok);
  EXPECT_EQ(report.kind, I);
  EXPECT_EQ(next.model, s.model);
  EXPECT_EQ(next.counter, 0u);
  auto [after, r2] = step(next, stream[1], make_config(3));
  EXPECT_TRUE(r2.ok);
  EXPECT_EQ(r2.kind, C);
}

TEST(Scheduler, HistoryBufferNeverExceedsWindow) {
  const auto stream = make_stream(7);
  auto cfg = make_config(4);
  cfg.cold_window = 2;
  StreamState s;
  for (const auto& phase : stream) {
    auto [next, report] = step(s, phase, cfg);
    EXPECT_LE(next.history.size(), 2u);
    EXPECT_EQ(next.history.back().phase_index, phase.phase_index);
    if (report.kind == C) {
      EXPECT_EQ(report.train_examples, next.history.size() * phase.size());
    } else {
      EXPECT_EQ(report.train_examples, phase.size());
    }
    s = std::move(next);
  }
}

TEST(Scheduler, DefaultWindowIsThePeriod) {
  auto cfg = make_config(5);
  EXPECT_EQ(cfg.window(), 5u);
  const StreamState s = run_stream(make_stream(7), cfg);
  EXPECT_EQ(s.history.size(), 5u);
}

TEST(Scheduler, EmptyStreamReturnsInitialState) {
  StreamState initial = run_stream(make_stream(2), make_config(3));
  const StreamState copy = initial;
  std::size_t calls = 0;
  const StreamState out = run_stream({}, make_config(3), [&](const TrainedRoundReport&) { ++calls; }, initial);
  EXPECT_EQ(out, copy);
  EXPECT_EQ(calls, 0u);
}

TEST(Scheduler, RejectsOutOfOrderPhases) {
  auto stream = make_stream(3);
  std::swap(stream[1], stream[2]);
  EXPECT_THROW(run_stream(stream, make_config(3)), ValidationError);
  auto cfg = make_config(0);
  EXPECT_THROW(run_stream(make_stream(1), cfg), ValidationError);
}

TEST(Scheduler, DeterministicReruns) {
  const auto stream = make_stream(6);
  for (HessianMode mode : {HessianMode::diag, HessianMode::dfp, HessianMode::adam}) {
    StreamState a, b;
    const auto ra = run(stream, make_config(3, mode), &a);
    const auto rb = run(stream, make_config(3, mode), &b);
    EXPECT_EQ(a, b) << to_string(mode);
    ASSERT_EQ(ra.size(), rb.size());
    for (std::size_t t = 0; t < ra.size(); ++t) {
      EXPECT_EQ(ra[t].kind, rb[t].kind);
      EXPECT_EQ(ra[t].train_nll, rb[t].train_nll);
    }
  }
}

TEST(Scheduler, PersistenceRoundTripIsBitIdentical) {
  const auto stream = make_stream(6);
  for (HessianMode mode : {HessianMode::full, HessianMode::diag, HessianMode::dfp, HessianMode::adam}) {
    StreamState plain;
    run(stream, make_config(3, mode), &plain);

    TempDir store;
    auto cfg = make_config(3, mode);
    cfg.store = store.path();
    StreamState stored;
    const auto reports = run(stream, cfg, &stored);
    EXPECT_EQ(stored, plain) << to_string(mode);
    for (const auto& r : reports) {
      EXPECT_GT(r.timing.save_seconds, 0.0);
      if (r.t > 0) EXPECT_GT(r.timing.load_seconds, 0.0);
    }
    EXPECT_EQ(latest_round(store.path()), 5u);
  }
}

TEST(Scheduler, ResumeFromStoreMidStreamMatchesUninterruptedRun) {
  const auto stream = make_stream(7);
  auto cfg = make_config(3, HessianMode::dfp);
  StreamState uninterrupted;
  run(stream, cfg, &uninterrupted);

  TempDir store;
  cfg.store = store.path();
  run_stream(std::vector<PhaseDataset>(stream.begin(), stream.begin() + 4), cfg);
  StreamState resumed = resume_from_store(store.path(), stream, cfg);
  EXPECT_EQ(resumed.t, 4u);
  EXPECT_EQ(resumed.counter, 1u);
  const StreamState finished =
      run_stream(std::vector<PhaseDataset>(stream.begin() + 4, stream.end()), cfg, {}, std::move(resumed));
  EXPECT_EQ(finished, uninterrupted);
}

TEST(Scheduler, ResumeFromEmptyStoreStartsFresh) {
  TempDir store;
  EXPECT_EQ(resume_from_store(store.path(), make_stream(2), make_config(3)), StreamState{});
}

TEST(Scheduler, IncrementalRoundsLeaveFixedEffectFrozenByDefault) {
  const auto stream = make_stream(3);
  StreamState s;
  std::vector<StreamState> states;
  for (const auto& phase : stream) {
    s = step(s, phase, make_config(3)).first;
    states.push_back(s);
  }
  EXPECT_EQ(states[1].model.fixed, states[0].model.fixed);
  EXPECT_NE(states[1].model.random_effects, states[0].model.random_effects);

  auto cfg = make_config(3);
  cfg.incremental_fixed_effect = true;
  const StreamState moved = step(states[0], stream[1], cfg).first;
  EXPECT_NE(moved.model.fixed, states[0].model.fixed);
}
