#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/sparse_vector.hpp"

namespace increlearn {

/// Logistic function, evaluated on the branch that cannot overflow.
inline double sigmoid(double z) {
  if (!std::isfinite(z)) throw ValidationError("sigmoid: non-finite logit");
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

struct LabeledExample {
  SparseVector features;
  int label = 0;
  std::map<std::string, std::string> entity_ids;  // entity type -> entity id
  double offset = 0.0;

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

struct PhaseDataset {
  std::size_t phase_index = 0;
  std::size_t feature_dim = 0;
  std::vector<LabeledExample> examples;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }

  // Throws unless every example has a binary label, a finite offset and
  // features of dimension feature_dim.
  void validate() const {
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& ex = examples[i];
      if (ex.label != 0 && ex.label != 1) {
        throw ValidationError("example " + std::to_string(i) + ": label must be 0 or 1");
      }
      if (!std::isfinite(ex.offset)) {
        throw ValidationError("example " + std::to_string(i) + ": non-finite offset");
      }
      if (ex.features.dim() != feature_dim) {
        throw ShapeError("example " + std::to_string(i) + ": feature dim " +
                         std::to_string(ex.features.dim()) + " != dataset dim " +
                         std::to_string(feature_dim));
      }
    }
  }

  friend bool operator==(const PhaseDataset&, const PhaseDataset&) = default;
};

/// Concatenates phases into one training set; phase_index is taken from the last one.
inline PhaseDataset merge_phases(const std::vector<PhaseDataset>& phases) {
  PhaseDataset out;
  if (phases.empty()) return out;
  out.feature_dim = phases.front().feature_dim;
  out.phase_index = phases.back().phase_index;
  for (const auto& p : phases) {
    if (p.feature_dim != out.feature_dim) throw ShapeError("merge_phases: feature dims differ");
    out.examples.insert(out.examples.end(), p.examples.begin(), p.examples.end());
  }
  return out;
}

struct GlmModel {
  SparseVector weights;
  double l2_base = 0.0;  // zero-mean prior precision used at cold start

  std::size_t dim() const noexcept { return weights.dim(); }

  friend bool operator==(const GlmModel&, const GlmModel&) = default;
};

inline GlmModel zero_model(std::size_t dim, double l2_base) { return {SparseVector(dim), l2_base}; }

/// w^T x + offset
inline double glm_score(const GlmModel& model, const SparseVector& features, double offset = 0.0) {
  if (model.dim() != features.dim()) {
    throw ShapeError("glm_score: model dim " + std::to_string(model.dim()) + " != feature dim " +
                     std::to_string(features.dim()));
  }
  return model.weights.dot(features) + offset;
}

using EntityModels = std::map<std::string, GlmModel>;

/// One fixed-effects GLM plus, per entity type, one GLM per entity id.
struct GlmixModel {
  GlmModel fixed;
  std::map<std::string, EntityModels> random_effects;

  friend bool operator==(const GlmixModel&, const GlmixModel&) = default;
};

/// Score contributed by the `entity_type` component; an unknown entity id
/// (or an example without that type) contributes 0.
inline double random_effect_score(const GlmixModel& model, const std::string& entity_type,
                                  const LabeledExample& example) {
  auto type_it = model.random_effects.find(entity_type);
  if (type_it == model.random_effects.end()) return 0.0;
  auto id_it = example.entity_ids.find(entity_type);
  if (id_it == example.entity_ids.end()) return 0.0;
  auto model_it = type_it->second.find(id_it->second);
  if (model_it == type_it->second.end()) return 0.0;
  return glm_score(model_it->second, example.features);
}

/// Sum of the fixed score, every matched random-effect score and the example offset.
inline double glmix_score(const GlmixModel& model, const LabeledExample& example) {
  double s = glm_score(model.fixed, example.features, example.offset);
  for (const auto& [type, entities] : model.random_effects) {
    (void)entities;
    s += random_effect_score(model, type, example);
  }
  return s;
}

}  // namespace increlearn
