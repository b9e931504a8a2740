#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <variant>

#include "increlearn/errors.hpp"
#include "increlearn/hessian.hpp"
#include "increlearn/linalg.hpp"
#include "increlearn/model.hpp"

namespace increlearn {

// Objectives are minimized: negative log-likelihood plus the quadratic
// penalty that anchors the weights to the previous posterior. Losses are
// summed over examples, never averaged, so precisions add across rounds.

struct ObjectiveEvaluation {
  double value = 0.0;
  Vector gradient;
};

inline ObjectiveEvaluation operator+(ObjectiveEvaluation a, const ObjectiveEvaluation& b) {
  require_same_size(a.gradient.size(), b.gradient.size(), "ObjectiveEvaluation +");
  a.value += b.value;
  for (std::size_t i = 0; i < a.gradient.size(); ++i) a.gradient[i] += b.gradient[i];
  return a;
}

/// Negative log-likelihood of the logistic model over `data`, restricted to
/// the examples listed in `subset` when it is non-empty. Offsets enter the logit.
inline ObjectiveEvaluation logistic_nll(std::span<const double> w, const PhaseDataset& data,
                                        std::span<const std::size_t> subset = {}) {
  detail::check_logistic_inputs(w, data);
  ObjectiveEvaluation out{0.0, Vector(w.size(), 0.0)};
  auto accumulate = [&](const LabeledExample& ex) {
    if (ex.label != 0 && ex.label != 1) throw ValidationError("logistic_nll: label must be 0 or 1");
    const double z = ex.features.dot(w) + ex.offset;
    // y log(1+e^-z) + (1-y) log(1+e^z)
    out.value += ex.label == 1 ? softplus(-z) : softplus(z);
    const double r = sigmoid(z) - ex.label;
    for (const auto& e : ex.features.entries()) out.gradient[e.index] += r * e.value;
  };
  if (subset.empty()) {
    for (const auto& ex : data.examples) accumulate(ex);
  } else {
    for (std::size_t i : subset) accumulate(data.examples.at(i));
  }
  return out;
}

/// (lambda_f / 2) (w - mean)^T H (w - mean) and its gradient.
inline ObjectiveEvaluation prior_penalty(std::span<const double> w, const PriorDistribution& prior,
                                         double lambda_f, HvpCounter* counter = nullptr) {
  require_same_size(prior.dim(), w.size(), "prior_penalty");
  if (const auto* mem = std::get_if<DfpMemory>(&prior.precision); mem && mem->pairs.empty()) {
    throw PreconditionError("prior_penalty: DFP prior with empty memory");
  }
  require_same_size(precision_dim(prior.precision), w.size(), "prior_penalty(precision)");
  if (!(lambda_f >= 0.0)) throw ValidationError("prior_penalty: lambda_f must be >= 0");
  ObjectiveEvaluation out{0.0, Vector(w.size(), 0.0)};
  if (lambda_f == 0.0) return out;
  const Vector diff = subtract(w, prior.mean);
  Vector hd = hvp(prior.precision, diff, counter);
  out.value = 0.5 * lambda_f * dot(diff, hd);
  for (std::size_t i = 0; i < hd.size(); ++i) out.gradient[i] = lambda_f * hd[i];
  return out;
}

/// (c / 2) ||w||^2
inline ObjectiveEvaluation ridge_penalty(std::span<const double> w, double c) {
  ObjectiveEvaluation out{0.0, Vector(w.size(), 0.0)};
  if (c == 0.0) return out;
  out.value = 0.5 * c * dot(w, w);
  for (std::size_t i = 0; i < w.size(); ++i) out.gradient[i] = c * w[i];
  return out;
}

/// Weight of the zero-mean base ridge that replaces the forgotten share of
/// the prior: max(0, 1 - lambda_f) * base_l2.
inline double forgotten_ridge_weight(double lambda_f, double base_l2) {
  return std::max(0.0, 1.0 - lambda_f) * base_l2;
}

/// Negative log-posterior of one incremental round:
///   NLL(D_t) + (lambda_f/2)(w - w_prev)^T H (w - w_prev) + (max(0, 1-lambda_f) base_l2 / 2)||w||^2.
/// The last term forgets toward the cold-start prior rather than toward a flat
/// one; with base_l2 == 0 the objective is the plain likelihood plus penalty.
inline ObjectiveEvaluation incremental_objective(std::span<const double> w, const PhaseDataset& data,
                                                 const PriorDistribution& prior, double lambda_f,
                                                 double base_l2 = 0.0,
                                                 HvpCounter* counter = nullptr) {
  ObjectiveEvaluation out = logistic_nll(w, data) + prior_penalty(w, prior, lambda_f, counter);
  const double ridge = forgotten_ridge_weight(lambda_f, base_l2);
  if (ridge > 0.0) out = out + ridge_penalty(w, ridge);
  return out;
}

/// 1/2 w^T A w - b^T w with A given as a Full or Diagonal representation.
struct QuadraticLossSpec {
  HessianRepr matrix;
  Vector linear;

  std::size_t dim() const noexcept { return linear.size(); }
};

inline ObjectiveEvaluation quadratic_oracle_loss(std::span<const double> w, const QuadraticLossSpec& spec) {
  require_same_size(spec.dim(), w.size(), "quadratic_oracle_loss");
  require_same_size(precision_dim(spec.matrix), w.size(), "quadratic_oracle_loss(matrix)");
  Vector aw = hvp(spec.matrix, w);
  ObjectiveEvaluation out{0.5 * dot(w, aw) - dot(spec.linear, w), subtract(aw, spec.linear)};
  return out;
}

// Data-loss adaptors used by the generic trainer. Each exposes the objective,
// its exact Hessian (full and diagonal) and per-example batching.

class LogisticLoss {
 public:
  explicit LogisticLoss(const PhaseDataset& data) : data_(&data) {}

  std::size_t dim() const noexcept { return data_->feature_dim; }
  std::size_t size() const noexcept { return data_->size(); }
  const PhaseDataset& data() const noexcept { return *data_; }

  ObjectiveEvaluation evaluate(std::span<const double> w) const { return logistic_nll(w, *data_); }
  ObjectiveEvaluation evaluate(std::span<const double> w, std::span<const std::size_t> batch) const {
    return logistic_nll(w, *data_, batch);
  }
  FullHessian hessian_full(std::span<const double> w, std::size_t budget) const {
    return logistic_hessian_full(w, *data_, budget);
  }
  DiagonalHessian hessian_diag(std::span<const double> w) const { return logistic_hessian_diag(w, *data_); }

 private:
  const PhaseDataset* data_;
};

class QuadraticLoss {
 public:
  explicit QuadraticLoss(QuadraticLossSpec spec) : spec_(std::move(spec)) {}

  std::size_t dim() const noexcept { return spec_.dim(); }
  // Treated as a single "example" for batching purposes.
  std::size_t size() const noexcept { return 1; }
  const QuadraticLossSpec& spec() const noexcept { return spec_; }

  ObjectiveEvaluation evaluate(std::span<const double> w) const { return quadratic_oracle_loss(w, spec_); }
  ObjectiveEvaluation evaluate(std::span<const double> w, std::span<const std::size_t>) const {
    return evaluate(w);
  }
  FullHessian hessian_full(std::span<const double>, std::size_t budget) const {
    if (dim() > budget) throw CapacityError("quadratic loss exceeds full Hessian budget");
    if (const auto* d = std::get_if<DiagonalHessian>(&spec_.matrix)) return to_full(*d);
    return std::get<FullHessian>(spec_.matrix);
  }
  DiagonalHessian hessian_diag(std::span<const double>) const {
    if (const auto* d = std::get_if<DiagonalHessian>(&spec_.matrix)) return *d;
    const auto& f = std::get<FullHessian>(spec_.matrix);
    DiagonalHessian out{Vector(f.dim)};
    for (std::size_t i = 0; i < f.dim; ++i) out.values[i] = f.at(i, i);
    return out;
  }

 private:
  QuadraticLossSpec spec_;
};

template <class L>
concept DataLoss = requires(const L& loss, std::span<const double> w, std::span<const std::size_t> batch) {
  { loss.dim() } -> std::convertible_to<std::size_t>;
  { loss.size() } -> std::convertible_to<std::size_t>;
  { loss.evaluate(w) } -> std::same_as<ObjectiveEvaluation>;
  { loss.evaluate(w, batch) } -> std::same_as<ObjectiveEvaluation>;
  { loss.hessian_full(w, std::size_t{}) } -> std::same_as<FullHessian>;
  { loss.hessian_diag(w) } -> std::same_as<DiagonalHessian>;
};

}  // namespace increlearn
