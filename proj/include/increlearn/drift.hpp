#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/linalg.hpp"
#include "increlearn/model.hpp"

namespace increlearn {

/// Synthetic GLMix stream. Each example has an intercept (index 0), a few
/// features from the entity block [1, entity_features) and the rest from
/// [entity_features, feature_dim), all N(0,1). The true logit is
/// x.w_fixed + x.w_entity; w_entity lives on the entity block and takes a
/// Gaussian random-walk step of scale drift_rate at every phase after the first.
struct DriftGenConfig {
  std::uint64_t seed = 2024;
  std::size_t n_entities = 200;
  std::size_t feature_dim = 50;
  std::size_t examples_per_phase = 16000;
  std::size_t n_phases = 5;
  double drift_rate = 0.02;
  double activity_skew = 0.0;  // Zipf exponent of entity activity; 0 is uniform
  std::size_t features_per_example = 10;
  std::size_t entity_features = 10;
  double fixed_scale = 0.5;
  double entity_scale = 1.0;
  std::string entity_type = "member";

  void validate() const {
    if (n_entities == 0 || feature_dim < 2 || examples_per_phase == 0 || n_phases == 0) {
      throw ValidationError("drift config: sizes must be positive (feature_dim >= 2)");
    }
    if (!(drift_rate >= 0.0) || !(activity_skew >= 0.0) || !(fixed_scale >= 0.0) || !(entity_scale >= 0.0)) {
      throw ValidationError("drift config: scales must be >= 0");
    }
    if (entity_features < 1 || entity_features > feature_dim) {
      throw ValidationError("drift config: entity_features must lie in [1, feature_dim]");
    }
    if (features_per_example + 1 > feature_dim) {
      throw ValidationError("drift config: features_per_example must be < feature_dim");
    }
  }
};

struct DriftTruth {
  Vector fixed_weights;
  std::vector<std::map<std::string, Vector>> entity_weights;  // per phase
  std::vector<std::vector<double>> probabilities;              // per phase, per example
};

struct DriftStream {
  std::vector<PhaseDataset> phases;
  DriftTruth truth;
};

/// Features [0, entity_features) that the per-entity components should see.
inline std::vector<std::size_t> entity_feature_subset(const DriftGenConfig& cfg) {
  std::vector<std::size_t> out(cfg.entity_features);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = j;
  return out;
}

inline std::string entity_name(std::size_t k) { return "m" + std::to_string(k); }

inline DriftStream generate_drift_stream(const DriftGenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  DriftStream out;
  const std::size_t p = cfg.feature_dim;
  const std::size_t block = cfg.entity_features;
  out.truth.fixed_weights.assign(p, 0.0);
  const double fixed_sd = cfg.fixed_scale / std::sqrt(static_cast<double>(cfg.features_per_example + 1));
  for (double& w : out.truth.fixed_weights) w = fixed_sd * normal(rng);

  const double entity_sd = cfg.entity_scale / std::sqrt(static_cast<double>(block));
  std::vector<Vector> entity(cfg.n_entities, Vector(p, 0.0));
  for (auto& w : entity)
    for (std::size_t j = 0; j < block; ++j) w[j] = entity_sd * normal(rng);

  std::vector<double> activity(cfg.n_entities);
  for (std::size_t k = 0; k < cfg.n_entities; ++k) {
    activity[k] = 1.0 / std::pow(static_cast<double>(k + 1), cfg.activity_skew);
  }
  std::discrete_distribution<std::size_t> pick_entity(activity.begin(), activity.end());

  // Split of the non-intercept features between the two blocks.
  const std::size_t in_block = std::min(block - 1, cfg.features_per_example / 2);
  const std::size_t out_block = std::min(p - block, cfg.features_per_example - in_block);
  std::vector<std::size_t> block_pool(block - 1), rest_pool(p - block);
  for (std::size_t j = 0; j < block_pool.size(); ++j) block_pool[j] = j + 1;
  for (std::size_t j = 0; j < rest_pool.size(); ++j) rest_pool[j] = j + block;
  auto sample_into = [&](std::vector<std::size_t>& pool, std::size_t count, std::vector<SparseEntry>& entries) {
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t r = k + static_cast<std::size_t>(rng() % (pool.size() - k));
      std::swap(pool[k], pool[r]);
      entries.push_back({pool[k], normal(rng)});
    }
  };

  for (std::size_t t = 0; t < cfg.n_phases; ++t) {
    if (t > 0) {
      for (auto& w : entity)
        for (std::size_t j = 0; j < block; ++j) w[j] += cfg.drift_rate * normal(rng);
    }
    std::map<std::string, Vector> snapshot;
    for (std::size_t k = 0; k < cfg.n_entities; ++k) snapshot.emplace(entity_name(k), entity[k]);
    out.truth.entity_weights.push_back(std::move(snapshot));

    PhaseDataset phase{t, p, {}};
    std::vector<double> probs;
    phase.examples.reserve(cfg.examples_per_phase);
    for (std::size_t i = 0; i < cfg.examples_per_phase; ++i) {
      const std::size_t k = pick_entity(rng);
      std::vector<SparseEntry> entries{{0, 1.0}};
      sample_into(block_pool, in_block, entries);
      sample_into(rest_pool, out_block, entries);
      LabeledExample ex;
      ex.features = SparseVector::from_entries(p, std::move(entries));
      ex.entity_ids.emplace(cfg.entity_type, entity_name(k));
      const double z = ex.features.dot(out.truth.fixed_weights) + ex.features.dot(entity[k]);
      const double prob = sigmoid(z);
      ex.label = uniform(rng) < prob ? 1 : 0;
      probs.push_back(prob);
      phase.examples.push_back(std::move(ex));
    }
    out.phases.push_back(std::move(phase));
    out.truth.probabilities.push_back(std::move(probs));
  }
  return out;
}

}  // namespace increlearn
