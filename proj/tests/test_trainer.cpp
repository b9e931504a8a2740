#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "increlearn/trainer.hpp"
#include "test_support.hpp"

using namespace increlearn;
namespace ts = testing_support;

namespace {

TrainerConfig tight_config() {
  TrainerConfig c;
  c.optimizer.gradient_tolerance = 1e-12;
  c.optimizer.max_iterations = 500;
  c.optimizer.objective_tolerance = 0.0;
  return c;
}

Eigen::MatrixXd dense(const FullHessian& f) {
  Eigen::MatrixXd m(f.dim, f.dim);
  for (std::size_t i = 0; i < f.dim; ++i)
    for (std::size_t j = 0; j < f.dim; ++j) m(i, j) = f.at(i, j);
  return m;
}

double distance(const Vector& a, const Vector& b) { return norm2(subtract(a, b)); }

// Fixed-effect feature space for GLMix tests: member entities, offsets zero.
PhaseDataset glmix_data(std::mt19937_64& rng, std::size_t n, std::size_t dim, std::size_t entities) {
  return ts::random_dataset(rng, n, dim, 3, entities);
}

}  // namespace

TEST(TrainGlm, ColdStartMinimizesRidgeRegularizedLoss) {
  std::mt19937_64 rng(41);
  auto d = ts::random_dataset(rng, 80, 6, 3);
  auto tc = train_glm(d, ColdStart{}, tight_config());
  auto g = (logistic_nll(tc.fit.w_star, d) + ridge_penalty(tc.fit.w_star, 1.0)).gradient;
  EXPECT_LT(norm2(g), 1e-8);
  EXPECT_EQ(tc.next_prior.mean, tc.model.weights.to_dense());
  EXPECT_GE(tc.timing.fit_seconds, 0.0);
  EXPECT_EQ(tc.timing.load_seconds, 0.0);
  // Diagonal precision: diag(H(D; w*)) + l2_base.
  auto expect = logistic_hessian_diag(tc.next_prior.mean, d).values;
  const auto& got = std::get<DiagonalHessian>(tc.next_prior.precision).values;
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(got[j], expect[j] + 1.0, 1e-12);
}

TEST(TrainGlm, Errors) {
  std::mt19937_64 rng(42);
  auto d = ts::random_dataset(rng, 10, 4, 2);
  TrainerConfig cfg;
  PhaseDataset empty{0, 4, {}};
  EXPECT_THROW(train_glm(empty, ColdStart{}, cfg), ValidationError);
  EXPECT_THROW(train_glm(d, WarmStart{zero_model(5, 1.0)}, cfg), ShapeError);
  EXPECT_THROW(train_glm(d, IncrementalUpdate{cold_prior(3, 1.0), 1.0, HessianMode::diag}, cfg), ShapeError);
  EXPECT_THROW(train_glm(d, IncrementalUpdate{cold_prior(4, 1.0), 1.5, HessianMode::diag}, cfg), ValidationError);
  EXPECT_THROW(train_glm(d, IncrementalUpdate{cold_prior(4, 1.0), -0.1, HessianMode::diag}, cfg), ValidationError);
  cfg.full_hessian_budget = 3;
  EXPECT_THROW(train_glm(d, IncrementalUpdate{cold_prior(4, 1.0), 1.0, HessianMode::full}, cfg), CapacityError);
  TrainerConfig dfp_cfg;
  EXPECT_THROW(train_glm(d, IncrementalUpdate{{Vector(4, 0.0), DfpMemory{3, {}}}, 1.0, HessianMode::dfp}, dfp_cfg),
               ValidationError);
}

TEST(TrainGlm, ZeroForgettingMatchesWarmStart) {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 10; ++trial) {
    auto d0 = ts::random_dataset(rng, 60, 8, 3);
    auto d1 = ts::random_dataset(rng, 60, 8, 3);
    auto cfg = tight_config();
    auto first = train_glm(d0, ColdStart{}, cfg);
    auto warm = train_glm(d1, WarmStart{first.model}, cfg);
    for (HessianMode mode : {HessianMode::diag, HessianMode::full, HessianMode::dfp}) {
      TrainerConfig mc = cfg;
      mc.hessian_mode = mode;
      auto prior = train_glm(d0, ColdStart{}, mc).next_prior;
      auto inc = train_glm(d1, IncrementalUpdate{prior, 0.0, mode}, cfg);
      EXPECT_LE(distance(inc.fit.w_star, warm.fit.w_star), 1e-6) << to_string(mode);
    }
  }
}

TEST(TrainGlm, QuadraticSequentialEqualsBatch) {
  std::mt19937_64 rng(44);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t dim = 5;
    const std::size_t phases = 2 + trial % 3;
    auto cfg = tight_config();
    cfg.hessian_mode = HessianMode::full;
    Eigen::MatrixXd a_sum = cfg.l2_base * Eigen::MatrixXd::Identity(dim, dim);
    Eigen::VectorXd b_sum = Eigen::VectorXd::Zero(dim);
    std::optional<PriorDistribution> prior;
    Vector w;
    for (std::size_t t = 0; t < phases; ++t) {
      Eigen::MatrixXd a = ts::random_spd(rng, dim, 0.1);
      Eigen::VectorXd b = ts::to_eigen(ts::random_vector(rng, dim));
      a_sum += a;
      b_sum += b;
      QuadraticLoss loss({ts::to_full_hessian(a), ts::from_eigen(b)});
      TrainMode mode = prior ? TrainMode{IncrementalUpdate{*prior, 1.0, HessianMode::full}} : TrainMode{ColdStart{}};
      auto tc = fit_component(loss, mode, cfg);
      prior = tc.next_prior;
      w = tc.fit.w_star;
      // Chained precision is the exact cumulative Hessian.
      EXPECT_LT((dense(std::get<FullHessian>(tc.next_prior.precision)) - a_sum).norm(), 1e-10);
    }
    Eigen::VectorXd batch = a_sum.ldlt().solve(b_sum);
    EXPECT_LT((ts::to_eigen(w) - batch).norm(), 1e-8) << "phases " << phases;
  }
}

TEST(TrainGlm, UntouchedFeatureKeepsPriorMean) {
  std::mt19937_64 rng(45);
  auto d = ts::random_dataset(rng, 40, 6, 3);
  for (auto& ex : d.examples) {
    std::vector<SparseEntry> keep;
    for (const auto& e : ex.features.entries())
      if (e.index != 2) keep.push_back(e);
    ex.features = SparseVector::from_entries(6, keep);
  }
  PriorDistribution prior{ts::random_vector(rng, 6), DiagonalHessian{Vector(6, 2.0)}};
  for (double base : {0.0, 1.0}) {
    TrainerConfig cfg;
    cfg.l2_base = base;
    auto tc = train_glm(d, IncrementalUpdate{prior, 1.0, HessianMode::diag}, cfg);
    EXPECT_EQ(tc.fit.w_star[2], prior.mean[2]);
  }
  // With forgetting, the untouched weight is the minimizer of the separable
  // penalty lambda_f * h (w - m)^2 + (1 - lambda_f) base w^2.
  TrainerConfig cfg;
  auto tc = train_glm(d, IncrementalUpdate{prior, 0.8, HessianMode::diag}, cfg);
  EXPECT_NEAR(tc.fit.w_star[2], 0.8 * 2.0 * prior.mean[2] / (0.8 * 2.0 + 0.2 * 1.0), 1e-6);
}

TEST(TrainGlm, StrongerForgettingFactorPullsTowardPrior) {
  std::mt19937_64 rng(46);
  for (int trial = 0; trial < 10; ++trial) {
    auto d = ts::random_dataset(rng, 50, 6, 3);
    PriorDistribution prior{ts::random_vector(rng, 6),
                            ts::to_full_hessian(ts::random_spd(rng, 6, 0.3))};
    TrainerConfig cfg = tight_config();
    cfg.max_forgetting_factor = 1000.0;
    double prev = INFINITY;
    for (double lf : {1.0, 10.0, 1000.0}) {
      auto tc = train_glm(d, IncrementalUpdate{prior, lf, HessianMode::full}, cfg);
      const double dist = distance(tc.fit.w_star, prior.mean);
      EXPECT_LT(dist, prev) << "lambda_f " << lf;
      prev = dist;
    }
    EXPECT_LT(prev, 0.05);
  }
}

TEST(TrainGlm, EmptyIncrementalCarriesPriorForward) {
  PhaseDataset empty{3, 3, {}};
  PriorDistribution prior{Vector{0.5, -1.0, 2.0}, DiagonalHessian{{4.0, 2.0, 1.0}}};
  TrainerConfig cfg;
  cfg.l2_base = 0.0;
  auto tc = train_glm(empty, IncrementalUpdate{prior, 0.9, HessianMode::diag}, cfg);
  EXPECT_TRUE(tc.empty_data);
  EXPECT_EQ(tc.model.weights.to_dense(), prior.mean);
  EXPECT_EQ(tc.next_prior.mean, prior.mean);
  const auto& h = std::get<DiagonalHessian>(tc.next_prior.precision).values;
  EXPECT_NEAR(h[0], 3.6, 1e-15);
  EXPECT_NEAR(h[1], 1.8, 1e-15);
  EXPECT_NEAR(h[2], 0.9, 1e-15);
  // The forgotten share returns to the base ridge when one is configured.
  cfg.l2_base = 1.0;
  auto with_base = train_glm(empty, IncrementalUpdate{prior, 0.9, HessianMode::diag}, cfg);
  EXPECT_NEAR(std::get<DiagonalHessian>(with_base.next_prior.precision).values[2], 1.0, 1e-15);
}

TEST(TrainGlm, EveryHessianModeProducesItsPrecision) {
  std::mt19937_64 rng(47);
  auto d0 = ts::random_dataset(rng, 80, 7, 3);
  auto d1 = ts::random_dataset(rng, 80, 7, 3);
  for (HessianMode mode : {HessianMode::full, HessianMode::diag, HessianMode::dfp, HessianMode::adam}) {
    TrainerConfig cfg;
    cfg.hessian_mode = mode;
    auto cold = train_glm(d0, ColdStart{}, cfg);
    auto inc = train_glm(d1, IncrementalUpdate{cold.next_prior, 0.95, mode}, cfg);
    ASSERT_EQ(inc.next_prior.dim(), 7u);
    EXPECT_TRUE(all_finite(inc.fit.w_star));
    switch (mode) {
      case HessianMode::full: EXPECT_TRUE(std::holds_alternative<FullHessian>(inc.next_prior.precision)); break;
      case HessianMode::diag: EXPECT_TRUE(std::holds_alternative<DiagonalHessian>(inc.next_prior.precision)); break;
      case HessianMode::dfp: {
        const auto& mem = std::get<DfpMemory>(inc.next_prior.precision);
        EXPECT_GE(mem.pairs.size(), 1u);
        EXPECT_LE(mem.pairs.size(), 3u);
        break;
      }
      case HessianMode::adam: {
        const auto& am = std::get<AdamMoment>(inc.next_prior.precision);
        EXPECT_EQ(am.scale, 80.0);
        for (double v : am.second_moment) EXPECT_GE(v, 0.0);
        break;
      }
    }
    // A further round accepts the produced prior.
    EXPECT_NO_THROW(train_glm(d0, IncrementalUpdate{inc.next_prior, 0.95, mode}, cfg));
  }
}

TEST(TrainGlm, AdamPrecisionChainsLikeTheDiagonal) {
  std::mt19937_64 rng(46);
  auto d0 = ts::random_dataset(rng, 60, 5, 3);
  auto d1 = ts::random_dataset(rng, 40, 5, 3);
  TrainerConfig cfg;
  cfg.hessian_mode = HessianMode::adam;
  auto cold = train_glm(d0, ColdStart{}, cfg);
  const auto& prev = std::get<AdamMoment>(cold.next_prior.precision);
  EXPECT_EQ(prev.scale, 60.0);
  for (double lambda_f : {1.0, 0.6}) {
    auto inc = train_glm(d1, IncrementalUpdate{cold.next_prior, lambda_f, HessianMode::adam}, cfg);
    const auto& next = std::get<AdamMoment>(inc.next_prior.precision);
    EXPECT_EQ(next.scale, 40.0);
    // scale * v_next = lambda_f * scale_prev * v_prev + N v_hat + ridge, every term >= 0.
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_GE(next.scale * next.second_moment[j],
                lambda_f * prev.scale * prev.second_moment[j] + (1.0 - lambda_f) * cfg.l2_base - 1e-12);
    }
  }
}

TEST(TrainGlm, Deterministic) {
  std::mt19937_64 rng(48);
  auto d = ts::random_dataset(rng, 100, 9, 4, 0, 0.3);
  TrainerConfig cfg;
  cfg.hessian_mode = HessianMode::adam;
  auto a = train_glm(d, ColdStart{}, cfg);
  auto b = train_glm(d, ColdStart{}, cfg);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.next_prior, b.next_prior);
  auto ia = train_glm(d, IncrementalUpdate{a.next_prior, 0.9, HessianMode::adam}, cfg);
  auto ib = train_glm(d, IncrementalUpdate{a.next_prior, 0.9, HessianMode::adam}, cfg);
  EXPECT_EQ(ia.model, ib.model);
  EXPECT_EQ(ia.next_prior, ib.next_prior);
}

TEST(RandomEffects, SingleEntityEqualsTrainGlm) {
  std::mt19937_64 rng(49);
  auto d = ts::random_dataset(rng, 60, 5, 3, 1);
  Vector offsets(d.size());
  for (double& o : offsets) o = std::normal_distribution<double>(0.0, 0.5)(rng);
  TrainerConfig cfg;
  auto re = train_random_effects(d, "member", offsets, {}, {}, cfg);
  ASSERT_EQ(re.entities.size(), 1u);
  PhaseDataset shifted = d;
  for (std::size_t i = 0; i < d.size(); ++i) {
    shifted.examples[i].offset = offsets[i];
    shifted.examples[i].entity_ids.clear();
  }
  auto direct = train_glm(shifted, ColdStart{}, cfg);
  EXPECT_EQ(re.entities.at("m0").model, direct.model);
  EXPECT_EQ(re.entities.at("m0").next_prior, direct.next_prior);
}

TEST(RandomEffects, AbsentEntityHandling) {
  std::mt19937_64 rng(50);
  auto d = ts::random_dataset(rng, 30, 4, 2, 2);
  Vector offsets(d.size(), 0.0);
  EntityPriors priors;
  priors["ghost"] = {Vector{1.0, 2.0, 3.0, 4.0}, DiagonalHessian{Vector(4, 2.0)}};
  TrainerConfig cfg;

  auto inc = train_random_effects(d, "member", offsets, priors,
                                  {RandomEffectMode::Kind::incremental, 0.5, HessianMode::diag}, cfg);
  ASSERT_TRUE(inc.entities.contains("ghost"));
  EXPECT_EQ(inc.entities.at("ghost").model.weights.to_dense(), priors["ghost"].mean);
  EXPECT_TRUE(inc.entities.at("ghost").empty_data);
  // 0.5 * 2 + 0.5 * l2_base
  EXPECT_EQ(std::get<DiagonalHessian>(inc.entities.at("ghost").next_prior.precision).values, Vector(4, 1.5));
  EXPECT_TRUE(inc.entities.contains("m0"));
  EXPECT_TRUE(inc.entities.contains("m1"));

  auto warm = train_random_effects(d, "member", offsets, priors, {RandomEffectMode::Kind::warm}, cfg);
  EXPECT_EQ(warm.entities.at("ghost").next_prior, priors["ghost"]);

  auto cold = train_random_effects(d, "member", offsets, priors, {RandomEffectMode::Kind::cold}, cfg);
  EXPECT_FALSE(cold.entities.contains("ghost"));
}

TEST(RandomEffects, ProcessingOrderDoesNotMatter) {
  std::mt19937_64 rng(51);
  auto d = ts::random_dataset(rng, 120, 6, 3, 7);
  Vector offsets(d.size());
  for (double& o : offsets) o = std::normal_distribution<double>(0.0, 0.3)(rng);
  TrainerConfig cfg;
  auto base = train_random_effects(d, "member", offsets, {}, {}, cfg);

  cfg.threads = 4;
  auto threaded = train_random_effects(d, "member", offsets, {}, {}, cfg);
  ASSERT_EQ(base.entities.size(), threaded.entities.size());
  for (const auto& [id, tc] : base.entities) EXPECT_EQ(tc.model, threaded.entities.at(id).model);

  // Interleave entities differently while keeping each entity's own order.
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return d.examples[a].entity_ids.at("member") > d.examples[b].entity_ids.at("member");
  });
  PhaseDataset permuted{0, d.feature_dim, {}};
  Vector permuted_offsets;
  for (std::size_t i : order) {
    permuted.examples.push_back(d.examples[i]);
    permuted_offsets.push_back(offsets[i]);
  }
  cfg.threads = 1;
  auto other = train_random_effects(permuted, "member", permuted_offsets, {}, {}, cfg);
  for (const auto& [id, tc] : base.entities) EXPECT_EQ(tc.model, other.entities.at(id).model);
}

TEST(RandomEffects, FailuresAreIsolated) {
  std::mt19937_64 rng(52);
  auto d = ts::random_dataset(rng, 40, 4, 2, 2);
  Vector offsets(d.size(), 0.0);
  EntityPriors priors;
  priors["m0"] = {Vector(3, 0.0), DiagonalHessian{Vector(3, 1.0)}};  // wrong dimension
  TrainerConfig cfg;
  auto re = train_random_effects(d, "member", offsets, priors,
                                 {RandomEffectMode::Kind::incremental, 1.0, HessianMode::diag}, cfg);
  ASSERT_EQ(re.failures.size(), 1u);
  EXPECT_EQ(re.failures[0].entity_id, "m0");
  EXPECT_EQ(re.entities.at("m0").next_prior, priors["m0"]);
  EXPECT_TRUE(re.entities.contains("m1"));
  EXPECT_FALSE(re.entities.at("m1").empty_data);
}

TEST(RandomEffects, MissingEntityIdIsRejected) {
  std::mt19937_64 rng(53);
  auto d = ts::random_dataset(rng, 10, 4, 2, 2);
  d.examples[3].entity_ids.clear();
  EXPECT_THROW(train_random_effects(d, "member", Vector(10, 0.0), {}, {}, TrainerConfig{}), ValidationError);
  EXPECT_THROW(train_random_effects(d, "member", Vector(9, 0.0), {}, {}, TrainerConfig{}), ShapeError);
}

TEST(Bcd, FixedOnlyEqualsTrainGlm) {
  std::mt19937_64 rng(54);
  auto d = ts::random_dataset(rng, 80, 6, 3);
  TrainerConfig cfg;
  BcdSchedule sched;
  sched.sweeps = 1;
  auto r = block_coordinate_descent(d, GlmixModel{zero_model(6, 1.0), {}}, {}, sched, cfg);
  auto direct = train_glm(d, ColdStart{}, cfg);
  EXPECT_EQ(r.model.fixed, direct.model);
  EXPECT_EQ(*r.priors.fixed, direct.next_prior);
  ASSERT_EQ(r.sweep_nll.size(), 1u);
  EXPECT_NEAR(r.sweep_nll[0], logistic_nll(direct.fit.w_star, d).value, 1e-9);
}

TEST(Bcd, TotalObjectiveDoesNotIncreaseAcrossSweeps) {
  std::mt19937_64 rng(55);
  for (int trial = 0; trial < 10; ++trial) {
    auto d = glmix_data(rng, 150, 6, 8);
    TrainerConfig cfg;
    BcdSchedule sched;
    sched.sweeps = 4;
    sched.random_effects.push_back({"member", {ComponentPlan::Kind::cold}, {}, false});
    auto r = block_coordinate_descent(d, GlmixModel{zero_model(6, 1.0), {}}, {}, sched, cfg);
    ASSERT_EQ(r.sweep_objective.size(), 4u);
    for (std::size_t k = 1; k < r.sweep_objective.size(); ++k) {
      EXPECT_LE(r.sweep_objective[k], r.sweep_objective[k - 1] + 1e-8);
      EXPECT_LE(r.sweep_nll[k], r.sweep_objective[k]);
    }
    EXPECT_TRUE(r.failures.empty());

    // Incremental random effects with a chained prior.
    auto d1 = glmix_data(rng, 150, 6, 8);
    BcdSchedule inc = sched;
    inc.fixed = {ComponentPlan::Kind::incremental, 0.9, HessianMode::diag};
    inc.random_effects[0].plan = {ComponentPlan::Kind::incremental, 0.9, HessianMode::diag};
    auto r1 = block_coordinate_descent(d1, r.model, r.priors, inc, cfg);
    for (std::size_t k = 1; k < r1.sweep_objective.size(); ++k) {
      EXPECT_LE(r1.sweep_objective[k], r1.sweep_objective[k - 1] + 1e-8);
    }
  }
}

TEST(Bcd, ZeroRandomFeaturesLeaveFixedEffectAlone) {
  std::mt19937_64 rng(56);
  auto d = glmix_data(rng, 100, 5, 4);
  TrainerConfig cfg;
  BcdSchedule sched;
  sched.random_effects.push_back({"member", {ComponentPlan::Kind::cold}, {}, true});
  auto r = block_coordinate_descent(d, GlmixModel{zero_model(5, 1.0), {}}, {}, sched, cfg);
  for (const auto& [id, m] : r.model.random_effects.at("member")) EXPECT_EQ(m.weights.nnz(), 0u) << id;
  auto plain = train_glm(d, ColdStart{}, cfg);
  EXPECT_LT(distance(r.model.fixed.weights.to_dense(), plain.fit.w_star), 1e-6);
}

TEST(Bcd, FrozenComponentsAreUntouched) {
  std::mt19937_64 rng(57);
  auto d = glmix_data(rng, 100, 5, 4);
  TrainerConfig cfg;
  BcdSchedule cold;
  cold.random_effects.push_back({"member", {ComponentPlan::Kind::cold}, {}, false});
  auto first = block_coordinate_descent(d, GlmixModel{zero_model(5, 1.0), {}}, {}, cold, cfg);

  auto d1 = glmix_data(rng, 100, 5, 4);
  BcdSchedule inc;
  inc.fixed.kind = ComponentPlan::Kind::frozen;
  inc.random_effects.push_back({"member", {ComponentPlan::Kind::incremental, 0.9, HessianMode::diag}, {}, false});
  auto second = block_coordinate_descent(d1, first.model, first.priors, inc, cfg);
  EXPECT_EQ(second.model.fixed, first.model.fixed);
  EXPECT_EQ(second.priors.fixed, first.priors.fixed);
  EXPECT_NE(second.model.random_effects.at("member"), first.model.random_effects.at("member"));
}
