#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/linalg.hpp"
#include "increlearn/model.hpp"

namespace increlearn {

// Representations of the prior precision (posterior Hessian of the past).

/// Dense symmetric p x p matrix, row-major.
struct FullHessian {
  std::size_t dim = 0;
  Vector data;

  FullHessian() = default;
  explicit FullHessian(std::size_t p) : dim(p), data(p * p, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return data[r * dim + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * dim + c]; }

  static FullHessian identity(std::size_t p, double scale = 1.0) {
    FullHessian h(p);
    for (std::size_t i = 0; i < p; ++i) h.at(i, i) = scale;
    return h;
  }

  friend bool operator==(const FullHessian&, const FullHessian&) = default;
};

struct DiagonalHessian {
  Vector values;

  std::size_t dim() const noexcept { return values.size(); }
  friend bool operator==(const DiagonalHessian&, const DiagonalHessian&) = default;
};

struct DfpPair {
  Vector step;           // x_i - x_{i-1}
  Vector grad_change;    // g(x_i) - g(x_{i-1})
  double rho = 0.0;      // 1 / (step . grad_change)

  friend bool operator==(const DfpPair&, const DfpPair&) = default;
};

/// Last m curvature pairs of an optimization trajectory, oldest first.
struct DfpMemory {
  std::size_t capacity = 3;
  std::vector<DfpPair> pairs;

  std::size_t dim() const noexcept { return pairs.empty() ? 0 : pairs.front().step.size(); }
  friend bool operator==(const DfpMemory&, const DfpMemory&) = default;
};

/// Bias-corrected Adam second moment used as a diagonal curvature proxy.
/// The operator it represents is scale * diag(second_moment).
struct AdamMoment {
  Vector second_moment;
  double scale = 1.0;

  std::size_t dim() const noexcept { return second_moment.size(); }
  friend bool operator==(const AdamMoment&, const AdamMoment&) = default;
};

using HessianRepr = std::variant<FullHessian, DiagonalHessian, DfpMemory, AdamMoment>;

enum class HessianMode { full, diag, dfp, adam };

inline std::string to_string(HessianMode m) {
  switch (m) {
    case HessianMode::full: return "full";
    case HessianMode::diag: return "diag";
    case HessianMode::dfp: return "dfp";
    case HessianMode::adam: return "adam";
  }
  return "?";
}

inline HessianMode parse_hessian_mode(const std::string& s) {
  if (s == "full") return HessianMode::full;
  if (s == "diag") return HessianMode::diag;
  if (s == "dfp") return HessianMode::dfp;
  if (s == "adam") return HessianMode::adam;
  throw ValidationError("unknown hessian mode '" + s + "'");
}

inline std::size_t precision_dim(const HessianRepr& h) {
  return std::visit(
      [](const auto& r) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(r)>, FullHessian>) {
          return r.dim;
        } else {
          return r.dim();
        }
      },
      h);
}

/// Posterior of the previous round: mean weights plus precision.
struct PriorDistribution {
  Vector mean;
  HessianRepr precision;

  std::size_t dim() const noexcept { return mean.size(); }

  friend bool operator==(const PriorDistribution&, const PriorDistribution&) = default;
};

/// Zero mean, precision l2_base * I: the prior every cold start uses.
inline PriorDistribution cold_prior(std::size_t dim, double l2_base) {
  return {Vector(dim, 0.0), DiagonalHessian{Vector(dim, l2_base)}};
}

inline constexpr std::size_t kDefaultFullHessianBudget = 4096;
inline constexpr double kCurvatureEps = 1e-10;

/// Counts the multiply-adds performed by Hessian-vector products.
struct HvpCounter {
  std::size_t multiply_adds = 0;
};

namespace detail {

inline void check_logistic_inputs(std::span<const double> w, const PhaseDataset& data) {
  if (w.size() != data.feature_dim) {
    throw ShapeError("weights dim " + std::to_string(w.size()) + " != data dim " +
                     std::to_string(data.feature_dim));
  }
}

inline double example_prob(std::span<const double> w, const LabeledExample& ex) {
  return sigmoid(ex.features.dot(w) + ex.offset);
}

}  // namespace detail

/// H = sum_i p_i (1 - p_i) x_i x_i^T, p_i = sigmoid(w^T x_i + o_i).
inline FullHessian logistic_hessian_full(std::span<const double> w, const PhaseDataset& data,
                                         std::size_t dim_budget = kDefaultFullHessianBudget) {
  detail::check_logistic_inputs(w, data);
  if (data.feature_dim > dim_budget) {
    throw CapacityError("full Hessian of dim " + std::to_string(data.feature_dim) +
                        " exceeds budget " + std::to_string(dim_budget));
  }
  FullHessian h(data.feature_dim);
  for (const auto& ex : data.examples) {
    const double p = detail::example_prob(w, ex);
    const double c = p * (1.0 - p);
    const auto entries = ex.features.entries();
    for (const auto& a : entries) {
      for (const auto& b : entries) h.at(a.index, b.index) += c * a.value * b.value;
    }
  }
  return h;
}

/// Diagonal of logistic_hessian_full, computed in O(nnz).
inline DiagonalHessian logistic_hessian_diag(std::span<const double> w, const PhaseDataset& data) {
  detail::check_logistic_inputs(w, data);
  DiagonalHessian h{Vector(data.feature_dim, 0.0)};
  for (const auto& ex : data.examples) {
    const double p = detail::example_prob(w, ex);
    const double c = p * (1.0 - p);
    for (const auto& a : ex.features.entries()) h.values[a.index] += c * a.value * a.value;
  }
  return h;
}

inline FullHessian to_full(const DiagonalHessian& d) {
  FullHessian h(d.dim());
  for (std::size_t i = 0; i < d.dim(); ++i) h.at(i, i) = d.values[i];
  return h;
}

/// lambda_f * prior + data_h for matching Full or Diagonal variants.
inline HessianRepr accumulate_precision(const HessianRepr& prior, const HessianRepr& data_h,
                                        double lambda_f) {
  if (!(lambda_f >= 0.0)) throw ValidationError("accumulate_precision: lambda_f must be >= 0");
  if (precision_dim(prior) != precision_dim(data_h)) {
    throw ShapeError("accumulate_precision: dimension mismatch");
  }
  if (const auto* pf = std::get_if<FullHessian>(&prior)) {
    if (const auto* df = std::get_if<FullHessian>(&data_h)) {
      FullHessian out = *df;
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += lambda_f * pf->data[i];
      return out;
    }
  }
  if (const auto* pd = std::get_if<DiagonalHessian>(&prior)) {
    if (const auto* dd = std::get_if<DiagonalHessian>(&data_h)) {
      DiagonalHessian out = *dd;
      for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += lambda_f * pd->values[i];
      return out;
    }
  }
  throw TypeError("accumulate_precision: only Full+Full or Diagonal+Diagonal can be accumulated");
}

/// c * H for every variant. A DFP memory scales exactly by scaling each
/// gradient difference (rho shrinks accordingly); c == 0 yields a zero diagonal.
inline HessianRepr scale_precision(const HessianRepr& h, double c) {
  if (!(c >= 0.0)) throw ValidationError("scale_precision: factor must be >= 0");
  if (c == 0.0) return DiagonalHessian{Vector(precision_dim(h), 0.0)};
  return std::visit(
      [c](const auto& r) -> HessianRepr {
        using T = std::decay_t<decltype(r)>;
        T out = r;
        if constexpr (std::is_same_v<T, FullHessian>) {
          for (double& v : out.data) v *= c;
        } else if constexpr (std::is_same_v<T, DiagonalHessian>) {
          for (double& v : out.values) v *= c;
        } else if constexpr (std::is_same_v<T, DfpMemory>) {
          for (auto& p : out.pairs) {
            for (double& v : p.grad_change) v *= c;
            p.rho /= c;
          }
        } else {
          out.scale *= c;
        }
        return out;
      },
      h);
}

/// Point of an optimization trajectory: iterate and objective gradient there.
struct TrajectoryPoint {
  Vector x;
  Vector g;

  friend bool operator==(const TrajectoryPoint&, const TrajectoryPoint&) = default;
};

/// Builds the DFP memory from the newest `capacity` consecutive trajectory
/// steps whose curvature step . grad_change exceeds curvature_eps.
inline DfpMemory dfp_record(std::span<const TrajectoryPoint> trajectory, std::size_t capacity,
                            double curvature_eps = kCurvatureEps) {
  if (capacity < 1 || capacity > 10) throw ValidationError("dfp_record: memory size must be in [1, 10]");
  if (trajectory.size() < 2) throw PreconditionError("dfp_record: trajectory needs at least 2 points");
  DfpMemory mem;
  mem.capacity = capacity;
  for (std::size_t k = 1; k < trajectory.size(); ++k) {
    Vector s = subtract(trajectory[k].x, trajectory[k - 1].x);
    Vector y = subtract(trajectory[k].g, trajectory[k - 1].g);
    const double sy = dot(s, y);
    if (!(sy > curvature_eps)) continue;
    mem.pairs.push_back({std::move(s), std::move(y), 1.0 / sy});
  }
  if (mem.pairs.empty()) throw PreconditionError("dfp_record: no pair passes the curvature filter");
  if (mem.pairs.size() > capacity) {
    mem.pairs.erase(mem.pairs.begin(), mem.pairs.end() - static_cast<std::ptrdiff_t>(capacity));
  }
  return mem;
}

/// DFP Hessian-vector product: the L-BFGS two-loop recursion with the roles of
/// the step and the gradient difference exchanged.
inline Vector dfp_hvp(const DfpMemory& mem, std::span<const double> d, HvpCounter* counter = nullptr) {
  if (mem.pairs.empty()) throw PreconditionError("dfp_hvp: empty memory");
  require_same_size(mem.dim(), d.size(), "dfp_hvp");
  const std::size_t m = mem.pairs.size();
  const std::size_t p = d.size();
  Vector r(d.begin(), d.end());
  std::vector<double> alpha(m);
  for (std::size_t k = m; k-- > 0;) {
    const auto& pr = mem.pairs[k];
    alpha[k] = pr.rho * dot(pr.grad_change, r);
    axpy(-alpha[k], pr.step, r);
  }
  const auto& newest = mem.pairs.back();
  const double gamma = dot(newest.step, newest.grad_change) / dot(newest.step, newest.step);
  for (double& v : r) v *= gamma;
  for (std::size_t k = 0; k < m; ++k) {
    const auto& pr = mem.pairs[k];
    const double beta = pr.rho * dot(pr.step, r);
    axpy(alpha[k] - beta, pr.grad_change, r);
  }
  if (counter) counter->multiply_adds += 4 * m * p + 2 * p + p;
  return r;
}

/// v <- beta2 * v + (1 - beta2) * g^2, elementwise.
inline Vector adam_second_moment_update(std::span<const double> v, std::span<const double> g,
                                        double beta2) {
  require_same_size(v.size(), g.size(), "adam_second_moment_update");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ValidationError("beta2 must lie in (0, 1)");
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
  return out;
}

/// v / (1 - beta2^step)
inline Vector adam_bias_corrected(std::span<const double> v, double beta2, std::size_t step) {
  if (step < 1) throw ValidationError("adam step must be >= 1");
  const double correction = 1.0 - std::pow(beta2, static_cast<double>(step));
  return scaled(v, 1.0 / correction);
}

/// Hessian-vector product dispatched on the representation.
inline Vector hvp(const HessianRepr& h, std::span<const double> v, HvpCounter* counter = nullptr) {
  return std::visit(
      [&](const auto& r) -> Vector {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, FullHessian>) {
          require_same_size(r.dim, v.size(), "hvp(full)");
          Vector out(r.dim, 0.0);
          for (std::size_t i = 0; i < r.dim; ++i) {
            const double* row = r.data.data() + i * r.dim;
            double s = 0.0;
            for (std::size_t j = 0; j < r.dim; ++j) s += row[j] * v[j];
            out[i] = s;
          }
          if (counter) counter->multiply_adds += r.dim * r.dim;
          return out;
        } else if constexpr (std::is_same_v<T, DiagonalHessian>) {
          require_same_size(r.dim(), v.size(), "hvp(diag)");
          Vector out(v.size());
          for (std::size_t i = 0; i < v.size(); ++i) out[i] = r.values[i] * v[i];
          if (counter) counter->multiply_adds += v.size();
          return out;
        } else if constexpr (std::is_same_v<T, DfpMemory>) {
          return dfp_hvp(r, v, counter);
        } else {
          require_same_size(r.dim(), v.size(), "hvp(adam)");
          Vector out(v.size());
          for (std::size_t i = 0; i < v.size(); ++i) out[i] = r.scale * r.second_moment[i] * v[i];
          if (counter) counter->multiply_adds += v.size();
          return out;
        }
      },
      h);
}

}  // namespace increlearn
