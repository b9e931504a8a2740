#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <exception>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/hessian.hpp"
#include "increlearn/linalg.hpp"
#include "increlearn/loss.hpp"
#include "increlearn/model.hpp"
#include "increlearn/optimizer.hpp"

namespace increlearn {

struct TrainerConfig {
  double l2_base = 1.0;  // lambda_0
  OptimizerConfig optimizer;
  std::size_t dfp_memory = 3;
  std::size_t full_hessian_budget = kDefaultFullHessianBudget;
  double max_forgetting_factor = 1.0;
  // Precision built after cold and warm rounds.
  HessianMode hessian_mode = HessianMode::diag;
  std::size_t threads = 1;
};

struct ColdStart {};

struct WarmStart {
  GlmModel previous;
};

struct IncrementalUpdate {
  PriorDistribution prior;
  double lambda_f = 1.0;
  HessianMode hessian_mode = HessianMode::diag;
};

using TrainMode = std::variant<ColdStart, WarmStart, IncrementalUpdate>;

struct RoundTiming {
  double load_seconds = 0.0;
  double fit_seconds = 0.0;
  double save_seconds = 0.0;

  RoundTiming& operator+=(const RoundTiming& o) {
    load_seconds += o.load_seconds;
    fit_seconds += o.fit_seconds;
    save_seconds += o.save_seconds;
    return *this;
  }
};

struct TrainedComponent {
  GlmModel model;
  PriorDistribution next_prior;
  RoundTiming timing;
  OptimizationResult fit;
  bool empty_data = false;  // incremental round without examples: prior carried forward
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

inline HessianRepr add_to_diagonal(HessianRepr h, double c) {
  if (c == 0.0) return h;
  if (auto* f = std::get_if<FullHessian>(&h)) {
    for (std::size_t i = 0; i < f->dim; ++i) f->at(i, i) += c;
  } else if (auto* d = std::get_if<DiagonalHessian>(&h)) {
    for (double& v : d->values) v += c;
  }
  return h;
}

inline DiagonalHessian diagonal_of(const FullHessian& f) {
  DiagonalHessian d{Vector(f.dim)};
  for (std::size_t i = 0; i < f.dim; ++i) d.values[i] = f.at(i, i);
  return d;
}

// Prior precision brought into the variant the next chaining step accumulates into.
inline HessianRepr as_variant_for(const HessianRepr& prior, HessianMode mode) {
  if (mode == HessianMode::full) {
    if (const auto* d = std::get_if<DiagonalHessian>(&prior)) return to_full(*d);
    if (std::holds_alternative<FullHessian>(prior)) return prior;
  } else if (mode == HessianMode::diag) {
    if (const auto* f = std::get_if<FullHessian>(&prior)) return diagonal_of(*f);
    if (std::holds_alternative<DiagonalHessian>(prior)) return prior;
  }
  throw TypeError("cannot chain a " + std::string(std::holds_alternative<DfpMemory>(prior) ? "dfp" : "adam") +
                  " prior into a " + to_string(mode) + " precision");
}

// Precision carried forward by a round that saw no examples:
// lambda_f * H plus the forgotten share of the base ridge when representable.
inline HessianRepr decay_precision(const HessianRepr& h, double lambda_f, double base_l2) {
  const double ridge = forgotten_ridge_weight(lambda_f, base_l2);
  if (std::holds_alternative<FullHessian>(h) || std::holds_alternative<DiagonalHessian>(h)) {
    return add_to_diagonal(scale_precision(h, lambda_f), ridge);
  }
  if (lambda_f == 0.0) return DiagonalHessian{Vector(precision_dim(h), ridge)};
  return scale_precision(h, lambda_f);
}

struct ObjectiveSetup {
  const PriorDistribution* prior;
  double lambda_f;
  double ridge;
  Vector start;
  HessianMode mode;
};

}  // namespace detail

/// Fits one GLM component under `mode` and builds the prior for the next round.
///
/// Cold and warm rounds minimize loss + (l2_base/2)|w|^2 (from 0 and from the
/// previous weights); incremental rounds minimize the incremental objective
/// starting at the prior mean. `start` overrides the initial point only.
/// Next precision: full/diag chain lambda_f * H_prev + H(D_t; w*) (plus the
/// forgotten share of the base ridge), dfp records the trailing trajectory,
/// adam stores N * v-hat.
template <DataLoss Loss>
TrainedComponent fit_component(const Loss& loss, const TrainMode& mode, const TrainerConfig& config,
                               const std::optional<Vector>& start = std::nullopt) {
  const auto t0 = detail::Clock::now();
  const std::size_t p = loss.dim();
  const PriorDistribution base = cold_prior(p, config.l2_base);

  detail::ObjectiveSetup setup{&base, 1.0, 0.0, Vector(p, 0.0), config.hessian_mode};
  bool incremental = false;
  if (const auto* warm = std::get_if<WarmStart>(&mode)) {
    if (warm->previous.dim() != p) throw ShapeError("warm start: previous model dim mismatch");
    setup.start = warm->previous.weights.to_dense();
  } else if (const auto* inc = std::get_if<IncrementalUpdate>(&mode)) {
    incremental = true;
    if (!(inc->lambda_f >= 0.0 && inc->lambda_f <= config.max_forgetting_factor)) {
      throw ValidationError("forgetting factor " + std::to_string(inc->lambda_f) + " outside [0, " +
                            std::to_string(config.max_forgetting_factor) + "]");
    }
    if (inc->prior.dim() != p || precision_dim(inc->prior.precision) != p) {
      throw ShapeError("incremental prior dim mismatch");
    }
    setup = {&inc->prior, inc->lambda_f, forgotten_ridge_weight(inc->lambda_f, config.l2_base),
             inc->prior.mean, inc->hessian_mode};
  }
  if (setup.mode == HessianMode::full && p > config.full_hessian_budget) {
    throw CapacityError("full Hessian mode exceeds dimension budget");
  }

  TrainedComponent out;
  if (loss.size() == 0) {
    if (!incremental) throw ValidationError("cold/warm training needs a non-empty dataset");
    const auto& inc = std::get<IncrementalUpdate>(mode);
    out.model = {SparseVector::from_dense(inc.prior.mean), config.l2_base};
    out.next_prior = {out.model.weights.to_dense(),
                      detail::decay_precision(inc.prior.precision, inc.lambda_f, config.l2_base)};
    out.fit.w_star = inc.prior.mean;
    out.fit.converged = true;
    out.fit.stop_reason = StopReason::gradient_tolerance;
    out.empty_data = true;
    out.timing.fit_seconds = detail::seconds_since(t0);
    return out;
  }

  const PriorDistribution& prior = *setup.prior;
  const double lambda = setup.lambda_f;
  const double ridge = setup.ridge;
  auto full_objective = [&](std::span<const double> w) {
    ObjectiveEvaluation e = loss.evaluate(w) + prior_penalty(w, prior, lambda);
    if (ridge > 0.0) e = e + ridge_penalty(w, ridge);
    return e;
  };
  const double n = static_cast<double>(loss.size());
  // Per-example (average) scale, as Adam expects.
  auto batch_objective = [&](std::span<const double> w, std::span<const std::size_t> batch) {
    ObjectiveEvaluation e = loss.evaluate(w, batch);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    e.value *= inv_b;
    for (double& g : e.gradient) g *= inv_b;
    ObjectiveEvaluation reg = prior_penalty(w, prior, lambda);
    if (ridge > 0.0) reg = reg + ridge_penalty(w, ridge);
    e.value += reg.value / n;
    axpy(1.0 / n, reg.gradient, e.gradient);
    return e;
  };
  auto adam_config_for = [&](const OptimizerConfig& base_cfg) {
    OptimizerConfig c = base_cfg;
    c.adam.batch_size = std::min(c.adam.batch_size, loss.size());
    return c;
  };

  Vector w0 = start ? *start : setup.start;
  require_same_size(w0.size(), p, "fit_component start");

  std::optional<Vector> second_moment;
  if (incremental && setup.mode == HessianMode::adam) {
    AdamResult ar = adam_minimize(batch_objective, std::move(w0), loss.size(), adam_config_for(config.optimizer));
    out.fit = std::move(ar.result);
    second_moment = std::move(ar.second_moment);
  } else {
    OptimizerConfig oc = config.optimizer;
    oc.trajectory_points = std::max(oc.trajectory_points, config.dfp_memory + 1);
    out.fit = lbfgs_minimize(full_objective, std::move(w0), oc);
  }

  out.model = {SparseVector::from_dense(out.fit.w_star), config.l2_base};
  Vector mean = out.model.weights.to_dense();

  HessianRepr next;
  switch (setup.mode) {
    case HessianMode::full: {
      HessianRepr data_h = detail::add_to_diagonal(loss.hessian_full(mean, config.full_hessian_budget), ridge);
      next = accumulate_precision(detail::as_variant_for(prior.precision, HessianMode::full), data_h, lambda);
      break;
    }
    case HessianMode::diag: {
      HessianRepr data_h = detail::add_to_diagonal(loss.hessian_diag(mean), ridge);
      next = accumulate_precision(detail::as_variant_for(prior.precision, HessianMode::diag), data_h, lambda);
      break;
    }
    case HessianMode::dfp: {
      try {
        next = dfp_record(out.fit.trajectory, config.dfp_memory);
      } catch (const PreconditionError&) {
        next = DiagonalHessian{Vector(p, config.l2_base)};
      }
      break;
    }
    case HessianMode::adam: {
      if (!second_moment) {
        // Moment pass at the fitted weights: Adam with a zero learning rate.
        OptimizerConfig oc = adam_config_for(config.optimizer);
        oc.adam.learning_rate = 0.0;
        second_moment = adam_minimize(batch_objective, mean, loss.size(), oc).second_moment;
      }
      // N v_hat stands in for the data Hessian diagonal and chains like it.
      Vector sum(p, 0.0);
      for (std::size_t j = 0; j < p; ++j) sum[j] = n * (*second_moment)[j] + ridge;
      if (incremental) {
        if (const auto* prev = std::get_if<AdamMoment>(&prior.precision); prev && prev->dim() == p) {
          for (std::size_t j = 0; j < p; ++j) sum[j] += lambda * prev->scale * prev->second_moment[j];
        }
      }
      const double scale = std::max(n, 1.0);
      for (double& v : sum) v /= scale;
      next = AdamMoment{std::move(sum), scale};
      break;
    }
  }
  out.next_prior = {std::move(mean), std::move(next)};
  out.timing.fit_seconds = detail::seconds_since(t0);
  return out;
}

/// Trains one logistic GLM on `data` under `mode`.
inline TrainedComponent train_glm(const PhaseDataset& data, const TrainMode& mode, const TrainerConfig& config,
                                  const std::optional<Vector>& start = std::nullopt) {
  data.validate();
  return fit_component(LogisticLoss(data), mode, config, start);
}

// ---------------------------------------------------------------------------
// Random effects

struct RandomEffectMode {
  enum class Kind { cold, warm, incremental };
  Kind kind = Kind::cold;
  double lambda_f = 1.0;
  HessianMode hessian_mode = HessianMode::diag;
};

struct EntityFailure {
  std::string entity_type;
  std::string entity_id;
  std::string message;
};

struct RandomEffectResult {
  std::map<std::string, TrainedComponent> entities;
  std::vector<EntityFailure> failures;
};

using EntityPriors = std::map<std::string, PriorDistribution>;

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const std::size_t workers = std::min(threads, n);
  pool.reserve(workers);
  for (std::size_t k = 0; k < workers; ++k) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Trains one GLM per entity of `entity_type` on its own examples, with
/// `offsets[i]` (the score of every other component) as example i's offset.
///
/// Entities with a prior but no examples are carried forward by incremental
/// rounds (precision decayed) and by warm rounds (unchanged); cold rounds drop
/// them. New entities start from the zero-mean l2_base prior. A failing entity
/// is reported in `failures` and keeps its prior when it has one.
/// `feature_subset`, when given, lists the feature indices this component sees.
inline RandomEffectResult train_random_effects(const PhaseDataset& data, const std::string& entity_type,
                                               std::span<const double> offsets, const EntityPriors& priors,
                                               const RandomEffectMode& mode, const TrainerConfig& config,
                                               const std::vector<std::size_t>* feature_subset = nullptr,
                                               const EntityModels* start_from = nullptr) {
  require_same_size(offsets.size(), data.size(), "train_random_effects offsets");
  const bool restrict_features = feature_subset != nullptr;
  std::vector<std::size_t> subset;
  if (feature_subset) subset = *feature_subset;
  std::sort(subset.begin(), subset.end());

  std::map<std::string, PhaseDataset> partitions;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data.examples[i];
    auto it = ex.entity_ids.find(entity_type);
    if (it == ex.entity_ids.end()) {
      throw ValidationError("example " + std::to_string(i) + " has no '" + entity_type + "' id");
    }
    auto& part = partitions[it->second];
    part.phase_index = data.phase_index;
    part.feature_dim = data.feature_dim;
    LabeledExample local{restrict_features ? ex.features.restricted_to(subset) : ex.features, ex.label, {},
                         offsets[i]};
    part.examples.push_back(std::move(local));
  }

  std::vector<std::string> ids;
  for (const auto& [id, part] : partitions) ids.push_back(id);
  if (mode.kind != RandomEffectMode::Kind::cold) {
    for (const auto& [id, prior] : priors) {
      if (!partitions.contains(id)) ids.push_back(id);
    }
  }

  std::vector<std::optional<TrainedComponent>> trained(ids.size());
  std::vector<std::string> errors(ids.size());
  static const PhaseDataset kEmpty{};
  detail::parallel_for(ids.size(), config.threads, [&](std::size_t k) {
    const std::string& id = ids[k];
    auto part_it = partitions.find(id);
    auto prior_it = priors.find(id);
    const PriorDistribution* prior = prior_it == priors.end() ? nullptr : &prior_it->second;
    try {
      if (part_it == partitions.end()) {
        if (mode.kind == RandomEffectMode::Kind::warm) {
          TrainedComponent keep;
          keep.model = {SparseVector::from_dense(prior->mean), config.l2_base};
          keep.next_prior = *prior;
          keep.empty_data = true;
          trained[k] = std::move(keep);
        } else {
          PhaseDataset empty{data.phase_index, data.feature_dim, {}};
          trained[k] = train_glm(empty, IncrementalUpdate{*prior, mode.lambda_f, mode.hessian_mode}, config);
        }
        return;
      }
      const PhaseDataset& part = part_it->second;
      TrainMode tm = ColdStart{};
      if (mode.kind == RandomEffectMode::Kind::warm && prior) {
        tm = WarmStart{{SparseVector::from_dense(prior->mean), config.l2_base}};
      } else if (mode.kind == RandomEffectMode::Kind::incremental) {
        tm = IncrementalUpdate{prior ? *prior : cold_prior(data.feature_dim, config.l2_base), mode.lambda_f,
                               mode.hessian_mode};
      }
      std::optional<Vector> start;
      if (start_from) {
        if (auto it = start_from->find(id); it != start_from->end()) start = it->second.weights.to_dense();
      }
      TrainerConfig local = config;
      if (mode.kind != RandomEffectMode::Kind::incremental) local.hessian_mode = mode.hessian_mode;
      trained[k] = train_glm(part, tm, local, start);
    } catch (const std::exception& e) {
      errors[k] = e.what();
    }
  });

  RandomEffectResult out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (trained[k]) {
      out.entities.emplace(ids[k], std::move(*trained[k]));
      continue;
    }
    out.failures.push_back({entity_type, ids[k], errors[k]});
    if (auto it = priors.find(ids[k]); it != priors.end() && mode.kind != RandomEffectMode::Kind::cold) {
      TrainedComponent keep;
      keep.model = {SparseVector::from_dense(it->second.mean), config.l2_base};
      keep.next_prior = it->second;
      out.entities.emplace(ids[k], std::move(keep));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Block coordinate descent over the GLMix components

struct ComponentPlan {
  enum class Kind { frozen, cold, warm, incremental };
  Kind kind = Kind::cold;
  double lambda_f = 1.0;
  HessianMode hessian_mode = HessianMode::diag;
};

struct RandomEffectPlan {
  std::string entity_type;
  ComponentPlan plan;
  std::vector<std::size_t> feature_subset;  // indices the component sees
  bool restrict_features = false;
};

struct BcdSchedule {
  ComponentPlan fixed;
  std::vector<RandomEffectPlan> random_effects;
  std::size_t sweeps = 2;
};

struct GlmixPriors {
  std::optional<PriorDistribution> fixed;
  std::map<std::string, EntityPriors> random;

  friend bool operator==(const GlmixPriors&, const GlmixPriors&) = default;
};

struct BcdResult {
  GlmixModel model;
  GlmixPriors priors;
  std::vector<double> sweep_nll;        // total data NLL after each sweep
  std::vector<double> sweep_objective;  // data NLL plus every trained component's penalty
  std::vector<EntityFailure> failures;
  double fit_seconds = 0.0;
};

/// Sum over examples of the logistic loss of the full GLMix score.
inline double glmix_nll(const GlmixModel& model, const PhaseDataset& data) {
  double s = 0.0;
  for (const auto& ex : data.examples) {
    const double z = glmix_score(model, ex);
    s += ex.label == 1 ? softplus(-z) : softplus(z);
  }
  return s;
}

namespace detail {

// Penalty term of one component's round objective; 0 for frozen components.
inline double component_penalty(const GlmModel& model, const ComponentPlan& plan, const PriorDistribution* prior,
                                double l2_base) {
  if (plan.kind == ComponentPlan::Kind::frozen) return 0.0;
  const Vector w = model.weights.to_dense();
  if (plan.kind != ComponentPlan::Kind::incremental || !prior) return ridge_penalty(w, l2_base).value;
  if (prior->dim() != w.size()) return 0.0;  // failed entity, kept as is
  return prior_penalty(w, *prior, plan.lambda_f).value +
         ridge_penalty(w, forgotten_ridge_weight(plan.lambda_f, l2_base)).value;
}

inline RandomEffectMode::Kind to_random_kind(ComponentPlan::Kind k) {
  switch (k) {
    case ComponentPlan::Kind::warm: return RandomEffectMode::Kind::warm;
    case ComponentPlan::Kind::incremental: return RandomEffectMode::Kind::incremental;
    default: return RandomEffectMode::Kind::cold;
  }
}

}  // namespace detail

/// Alternates over the components: the fixed effect first, then each random
/// effect type, every one retrained with the other components' scores as
/// offsets. The objectives of a round are fixed by the incoming model and
/// priors; later sweeps only restart from the current weights.
inline BcdResult block_coordinate_descent(const PhaseDataset& data, const GlmixModel& model,
                                          const GlmixPriors& priors, const BcdSchedule& schedule,
                                          const TrainerConfig& config) {
  const auto t0 = detail::Clock::now();
  data.validate();
  if (schedule.sweeps == 0) throw ValidationError("block_coordinate_descent: sweeps must be >= 1");
  if (model.fixed.dim() != data.feature_dim) throw ShapeError("fixed model dim != data dim");

  BcdResult out{model, priors, {}, {}, {}, 0.0};
  auto round_objective = [&](const GlmixModel& m) {
    double total = glmix_nll(m, data);
    total += detail::component_penalty(m.fixed, schedule.fixed, priors.fixed ? &*priors.fixed : nullptr,
                                       config.l2_base);
    for (const auto& re : schedule.random_effects) {
      auto models = m.random_effects.find(re.entity_type);
      if (models == m.random_effects.end()) continue;
      auto type_priors = priors.random.find(re.entity_type);
      for (const auto& [id, gm] : models->second) {
        const PriorDistribution* pr = nullptr;
        if (type_priors != priors.random.end()) {
          if (auto it = type_priors->second.find(id); it != type_priors->second.end()) pr = &it->second;
        }
        total += detail::component_penalty(gm, re.plan, pr, config.l2_base);
      }
    }
    return total;
  };
  for (std::size_t sweep = 0; sweep < schedule.sweeps; ++sweep) {
    if (schedule.fixed.kind != ComponentPlan::Kind::frozen) {
      PhaseDataset shifted = data;
      for (auto& ex : shifted.examples) {
        const double fixed_part = glm_score(out.model.fixed, ex.features);
        ex.offset = glmix_score(out.model, ex) - fixed_part;
      }
      TrainMode tm = ColdStart{};
      TrainerConfig local = config;
      switch (schedule.fixed.kind) {
        case ComponentPlan::Kind::warm:
          tm = WarmStart{model.fixed};
          local.hessian_mode = schedule.fixed.hessian_mode;
          break;
        case ComponentPlan::Kind::incremental:
          tm = IncrementalUpdate{priors.fixed ? *priors.fixed : cold_prior(data.feature_dim, config.l2_base),
                                 schedule.fixed.lambda_f, schedule.fixed.hessian_mode};
          break;
        default:
          local.hessian_mode = schedule.fixed.hessian_mode;
          break;
      }
      std::optional<Vector> start;
      if (sweep > 0) start = out.model.fixed.weights.to_dense();
      TrainedComponent tc = train_glm(shifted, tm, local, start);
      out.model.fixed = std::move(tc.model);
      out.priors.fixed = std::move(tc.next_prior);
    }

    for (const auto& re : schedule.random_effects) {
      if (re.plan.kind == ComponentPlan::Kind::frozen) continue;
      std::vector<double> offsets(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& ex = data.examples[i];
        offsets[i] = glmix_score(out.model, ex) - random_effect_score(out.model, re.entity_type, ex);
      }
      static const EntityPriors kNone{};
      auto prior_it = priors.random.find(re.entity_type);
      const EntityPriors& round_priors = prior_it == priors.random.end() ? kNone : prior_it->second;
      const EntityModels* start_from = nullptr;
      if (sweep > 0) {
        if (auto it = out.model.random_effects.find(re.entity_type); it != out.model.random_effects.end()) {
          start_from = &it->second;
        }
      }
      // Warm rounds start from the weights the round began with.
      EntityPriors warm_priors;
      const EntityPriors* effective = &round_priors;
      if (re.plan.kind == ComponentPlan::Kind::warm) {
        if (auto it = model.random_effects.find(re.entity_type); it != model.random_effects.end()) {
          for (const auto& [id, m] : it->second) {
            PriorDistribution pd = round_priors.contains(id) ? round_priors.at(id)
                                                             : cold_prior(data.feature_dim, config.l2_base);
            pd.mean = m.weights.to_dense();
            warm_priors.emplace(id, std::move(pd));
          }
        }
        effective = &warm_priors;
      }
      RandomEffectMode rm{detail::to_random_kind(re.plan.kind), re.plan.lambda_f, re.plan.hessian_mode};
      RandomEffectResult rr = train_random_effects(data, re.entity_type, offsets, *effective, rm, config,
                                                   re.restrict_features ? &re.feature_subset : nullptr,
                                                   start_from);
      EntityModels models;
      EntityPriors next_priors;
      for (auto& [id, tc] : rr.entities) {
        models.emplace(id, std::move(tc.model));
        next_priors.emplace(id, std::move(tc.next_prior));
      }
      out.model.random_effects[re.entity_type] = std::move(models);
      out.priors.random[re.entity_type] = std::move(next_priors);
      if (sweep + 1 == schedule.sweeps) {
        out.failures.insert(out.failures.end(), rr.failures.begin(), rr.failures.end());
      }
    }
    out.sweep_nll.push_back(glmix_nll(out.model, data));
    out.sweep_objective.push_back(round_objective(out.model));
  }
  out.fit_seconds = detail::seconds_since(t0);
  return out;
}

}  // namespace increlearn
