#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "increlearn/auc.hpp"
#include "increlearn/benchmark.hpp"
#include "increlearn/dataset_io.hpp"
#include "increlearn/drift.hpp"
#include "increlearn/errors.hpp"
#include "increlearn/model_store.hpp"
#include "increlearn/scheduler.hpp"
#include "increlearn/trainer.hpp"

namespace fs = std::filesystem;
using namespace increlearn;

namespace {

enum ExitCode { kOk = 0, kValidation = 2, kNumerical = 3, kStore = 4 };

struct Options {
  std::string data;
  std::string store;
  std::string hessian = "diag";
  double forgetting_factor = 1.0;
  std::size_t dfp_memory = 3;
  std::size_t cold_period = 16;
  std::size_t cold_window = 0;
  double l2 = 1.0;
  std::size_t max_iter = 100;
  std::uint64_t seed = 2024;
  std::string report = "md";
  std::optional<std::size_t> phase;
  std::size_t entity_features = 0;  // 0: random effects see every feature
  std::size_t threads = 1;

  DriftGenConfig gen;
  std::vector<std::string> strategies = all_strategies();
  std::vector<double> tune_grid;

  TrainerConfig trainer() const {
    TrainerConfig c;
    c.l2_base = l2;
    c.dfp_memory = dfp_memory;
    c.optimizer.max_iterations = max_iter;
    c.hessian_mode = parse_hessian_mode(hessian);
    c.threads = threads;
    return c;
  }
};

void add_shared(CLI::App* cmd, Options& o) {
  cmd->add_option("--data", o.data, "Directory of phase_<t>.tsv files");
  cmd->add_option("--store", o.store, "Model store directory");
  cmd->add_option("--hessian", o.hessian, "Precision approximation")
      ->check(CLI::IsMember({"full", "diag", "dfp", "adam"}));
  cmd->add_option("--forgetting-factor", o.forgetting_factor, "Forgetting factor lambda_f")->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--dfp-memory", o.dfp_memory, "DFP memory size m")->check(CLI::PositiveNumber);
  cmd->add_option("--cold-period", o.cold_period, "Rounds per cold start T")->check(CLI::PositiveNumber);
  cmd->add_option("--cold-window", o.cold_window, "Phases a cold start trains on (0: T)");
  cmd->add_option("--l2", o.l2, "Cold-start L2 weight lambda_0")->check(CLI::NonNegativeNumber);
  cmd->add_option("--max-iter", o.max_iter, "L-BFGS iteration cap")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", o.seed, "Random seed");
  cmd->add_option("--report", o.report, "Report format")->check(CLI::IsMember({"csv", "md", "both"}));
  cmd->add_option("--phase", o.phase, "Phase index (default: last)");
  cmd->add_option("--entity-features", o.entity_features, "Random effects see features [0, k) (0: all)");
  cmd->add_option("--threads", o.threads, "Worker threads for per-entity training")->check(CLI::PositiveNumber);
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ValidationError(std::string(flag) + " is required");
}

std::vector<RandomEffectSpec> random_effect_specs(const std::vector<PhaseDataset>& phases, const Options& o) {
  std::set<std::string> types;
  for (const auto& p : phases)
    for (const auto& ex : p.examples)
      for (const auto& [type, id] : ex.entity_ids) types.insert(type);
  std::vector<RandomEffectSpec> out;
  for (const auto& type : types) {
    RandomEffectSpec spec{type, {}, o.entity_features > 0};
    for (std::size_t j = 0; j < o.entity_features; ++j) spec.feature_subset.push_back(j);
    out.push_back(std::move(spec));
  }
  return out;
}

BcdSchedule schedule_for(const std::vector<RandomEffectSpec>& specs, ComponentPlan fixed, ComponentPlan random) {
  BcdSchedule s;
  s.fixed = fixed;
  for (const auto& r : specs) s.random_effects.push_back({r.entity_type, random, r.feature_subset, r.restrict_features});
  return s;
}

std::size_t selected_phase(const std::vector<PhaseDataset>& phases, const Options& o) {
  if (phases.empty()) throw ValidationError("no phase files in " + o.data);
  const std::size_t t = o.phase.value_or(phases.size() - 1);
  if (t >= phases.size()) throw ValidationError("phase " + std::to_string(t) + " not in " + o.data);
  return t;
}

void print_round(const TrainedRoundReport& r, bool csv) {
  char buf[256];
  if (csv) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%s,%zu,%zu,%.6f,%.6f,%.6f,%s\n", r.t, to_string(r.kind).c_str(),
                  r.ok ? "ok" : "failed", r.counter_after, r.train_examples, r.timing.fit_seconds,
                  r.timing.load_seconds, r.timing.save_seconds, r.error.c_str());
  } else {
    std::snprintf(buf, sizeof buf, "| %zu | %s | %s | %zu | %zu | %.3f | %.3f | %.3f |\n", r.t,
                  to_string(r.kind).c_str(), r.ok ? "ok" : ("failed: " + r.error).c_str(), r.counter_after,
                  r.train_examples, r.timing.fit_seconds, r.timing.load_seconds, r.timing.save_seconds);
  }
  std::cout << buf;
}

int generate_data(const Options& o) {
  require(o.data, "--data");
  DriftGenConfig g = o.gen;
  g.seed = o.seed;
  const DriftStream s = generate_drift_stream(g);
  write_phases(o.data, s.phases);
  std::cout << "wrote " << s.phases.size() << " phases to " << o.data << '\n';
  return kOk;
}

int train_cold(const Options& o) {
  require(o.data, "--data");
  require(o.store, "--store");
  const auto phases = load_phases(o.data);
  const std::size_t t = selected_phase(phases, o);
  const std::size_t window = o.cold_window == 0 ? o.cold_period : o.cold_window;
  const std::size_t first = t + 1 > window ? t + 1 - window : 0;
  const PhaseDataset merged =
      merge_phases(std::vector<PhaseDataset>(phases.begin() + static_cast<std::ptrdiff_t>(first),
                                             phases.begin() + static_cast<std::ptrdiff_t>(t + 1)));
  const TrainerConfig tc = o.trainer();
  const ComponentPlan cold{ComponentPlan::Kind::cold, 1.0, tc.hessian_mode};
  const GlmixModel start{zero_model(merged.feature_dim, tc.l2_base), {}};
  const BcdResult r = block_coordinate_descent(merged, start, {}, schedule_for(random_effect_specs(phases, o), cold, cold), tc);
  save_round(o.store, {t, 1 % o.cold_period, 1.0, tc.hessian_mode, merged.feature_dim, r.model, r.priors});
  std::printf("cold round %zu: phases %zu..%zu, %zu examples, fit %.3fs, train NLL %.6f\n", t, first, t,
              merged.size(), r.fit_seconds, r.sweep_nll.back());
  for (const auto& f : r.failures) std::printf("entity %s:%s failed: %s\n", f.entity_type.c_str(), f.entity_id.c_str(), f.message.c_str());
  return kOk;
}

int train_incre(const Options& o) {
  require(o.data, "--data");
  require(o.store, "--store");
  const auto phases = load_phases(o.data);
  const std::size_t t = selected_phase(phases, o);
  if (t == 0) throw ValidationError("an incremental round needs a previous round (phase >= 1)");
  const RoundSnapshot prev = load_round(o.store, t - 1);
  TrainerConfig tc = o.trainer();
  const ComponentPlan frozen{ComponentPlan::Kind::frozen};
  const ComponentPlan inc{ComponentPlan::Kind::incremental, o.forgetting_factor, tc.hessian_mode};
  const BcdResult r = block_coordinate_descent(phases[t], prev.model, prev.priors,
                                               schedule_for(random_effect_specs(phases, o), frozen, inc), tc);
  save_round(o.store, {t, (prev.counter + 1) % o.cold_period, o.forgetting_factor, tc.hessian_mode,
                       phases[t].feature_dim, r.model, r.priors});
  std::printf("incremental round %zu: %zu examples, lambda_f %.4g, fit %.3fs, train NLL %.6f\n", t, phases[t].size(),
              o.forgetting_factor, r.fit_seconds, r.sweep_nll.back());
  for (const auto& f : r.failures) std::printf("entity %s:%s failed: %s\n", f.entity_type.c_str(), f.entity_id.c_str(), f.message.c_str());
  return kOk;
}

int evaluate(const Options& o, std::optional<std::size_t> round) {
  require(o.data, "--data");
  require(o.store, "--store");
  const auto phases = load_phases(o.data);
  const std::size_t t = selected_phase(phases, o);
  const auto r = round ? round : latest_round(o.store);
  if (!r) throw StoreError("store " + o.store + " holds no rounds");
  const RoundSnapshot snap = load_round(o.store, *r);
  std::printf("round %zu on phase %zu: AUC %.6f over %zu examples\n", *r, t, glmix_auc(snap.model, phases[t]),
              phases[t].size());
  return kOk;
}

int simulate_stream(const Options& o) {
  require(o.data, "--data");
  const auto phases = load_phases(o.data);
  ScheduleConfig cfg;
  cfg.cold_period = o.cold_period;
  cfg.cold_window = o.cold_window;
  cfg.lambda_f = o.forgetting_factor;
  cfg.hessian_mode = parse_hessian_mode(o.hessian);
  cfg.trainer = o.trainer();
  cfg.random_effects = random_effect_specs(phases, o);
  if (!o.store.empty()) cfg.store = o.store;
  StreamState initial;
  if (cfg.store) initial = resume_from_store(*cfg.store, phases, cfg);
  const std::vector<PhaseDataset> rest(phases.begin() + static_cast<std::ptrdiff_t>(std::min(initial.t, phases.size())),
                                       phases.end());
  const bool csv = o.report == "csv";
  if (csv) {
    std::cout << "t,branch,status,counter,train_examples,fit_seconds,load_seconds,save_seconds,error\n";
  } else {
    std::cout << "| t | branch | status | counter | examples | fit s | load s | save s |\n|---|---|---|---|---|---|---|---|\n";
  }
  run_stream(rest, cfg, [&](const TrainedRoundReport& r) { print_round(r, csv); }, std::move(initial));
  return kOk;
}

int benchmark(const Options& o) {
  std::vector<PhaseDataset> phases;
  std::vector<RandomEffectSpec> specs;
  if (o.data.empty()) {
    DriftGenConfig g = o.gen;
    g.seed = o.seed;
    phases = generate_drift_stream(g).phases;
    specs.push_back({g.entity_type, entity_feature_subset(g), true});
  } else {
    phases = load_phases(o.data);
    specs = random_effect_specs(phases, o);
  }
  BenchmarkConfig cfg;
  cfg.trainer = o.trainer();
  cfg.lambda_f = o.forgetting_factor;
  cfg.cold_window = o.cold_window;
  cfg.random_effects = specs;
  if (!o.store.empty()) cfg.store = o.store;
  const BenchmarkReport report = run_benchmark(phases, o.strategies, cfg);
  if (o.report == "csv" || o.report == "both") std::cout << report.to_csv();
  if (o.report == "both") std::cout << '\n';
  if (o.report == "md" || o.report == "both") std::cout << report.to_markdown();
  if (!o.tune_grid.empty()) {
    const auto search = tune_forgetting_factor(phases, o.tune_grid, cfg, parse_hessian_mode(o.hessian));
    std::cout << "\n| lambda_f | mean AUC |\n|---|---|\n";
    for (std::size_t k = 0; k < search.grid.size(); ++k) {
      std::printf("| %.4g | %.6f |\n", search.grid[k], search.mean_auc[k]);
    }
    std::printf("selected lambda_f = %.4g\n", search.best);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental training of logistic GLM and GLMix models"};
  app.require_subcommand(1);
  Options o;
  std::optional<std::size_t> round;

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic drifting GLMix stream");
  auto* cold = app.add_subcommand("train-cold", "Cold-start training on the window ending at --phase");
  auto* incre = app.add_subcommand("train-incre", "Incremental update from the stored previous round");
  auto* eval = app.add_subcommand("evaluate", "AUC of a stored round on a phase");
  auto* sim = app.add_subcommand("simulate-stream", "Run the cold/incremental scheduler over a stream");
  auto* bench = app.add_subcommand("benchmark", "Compare cold, warm and incremental strategies");
  for (auto* cmd : {gen, cold, incre, eval, sim, bench}) add_shared(cmd, o);
  for (auto* cmd : {gen, bench}) {
    cmd->add_option("--entities", o.gen.n_entities, "Number of entities")->check(CLI::PositiveNumber);
    cmd->add_option("--dim", o.gen.feature_dim, "Feature dimension")->check(CLI::PositiveNumber);
    cmd->add_option("--examples", o.gen.examples_per_phase, "Examples per phase")->check(CLI::PositiveNumber);
    cmd->add_option("--phases", o.gen.n_phases, "Number of phases")->check(CLI::PositiveNumber);
    cmd->add_option("--drift", o.gen.drift_rate, "Per-phase random-walk scale of entity weights")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--skew", o.gen.activity_skew, "Zipf exponent of entity activity")->check(CLI::NonNegativeNumber);
  }
  eval->add_option("--round", round, "Stored round to evaluate (default: latest)");
  bench->add_option("--strategies", o.strategies, "Subset of cold,warm,incre_diag,incre_full,incre_dfp,incre_adam")
      ->delimiter(',');
  bench->add_option("--tune", o.tune_grid, "Forgetting-factor grid to search, e.g. 0.8,0.9,0.95,1.0")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*gen) return generate_data(o);
    if (*cold) return train_cold(o);
    if (*incre) return train_incre(o);
    if (*eval) return evaluate(o, round);
    if (*sim) return simulate_stream(o);
    if (*bench) return benchmark(o);
  } catch (const StoreError& e) {
    std::cerr << "store error: " << e.what() << '\n';
    return kStore;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "store error: " << e.what() << '\n';
    return kStore;
  }
  return kOk;
}
