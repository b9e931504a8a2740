#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/hessian.hpp"
#include "increlearn/linalg.hpp"
#include "increlearn/loss.hpp"

namespace increlearn {

struct AdamConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 1;
  std::size_t epochs = 20;
  std::uint64_t shuffle_seed = 7;
};

struct OptimizerConfig {
  std::size_t max_iterations = 100;
  double gradient_tolerance = 1e-6;   // relative to max(1, |g0|)
  std::size_t lbfgs_memory = 10;
  double armijo_c1 = 1e-4;
  double backtrack_shrink = 0.5;
  std::size_t max_line_search_trials = 40;
  // Stop when the relative objective decrease stays below this for
  // `stall_iterations` consecutive iterations; 0 disables the check.
  double objective_tolerance = 1e-10;
  std::size_t stall_iterations = 3;
  // Number of trailing iterates kept for DFP recording (memory size + 1).
  std::size_t trajectory_points = 4;
  AdamConfig adam;
};

enum class StopReason { gradient_tolerance, objective_stalled, max_iterations, line_search_failed, epochs_done };

inline std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::gradient_tolerance: return "gradient_tolerance";
    case StopReason::objective_stalled: return "objective_stalled";
    case StopReason::max_iterations: return "max_iterations";
    case StopReason::line_search_failed: return "line_search_failed";
    case StopReason::epochs_done: return "epochs_done";
  }
  return "?";
}

struct OptimizationResult {
  Vector w_star;
  std::vector<TrajectoryPoint> trajectory;  // trailing iterates, oldest first
  double final_value = 0.0;
  double final_gradient_norm = 0.0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  bool converged = false;  // gradient criterion met
  StopReason stop_reason = StopReason::max_iterations;

  friend bool operator==(const OptimizationResult&, const OptimizationResult&) = default;
};

namespace detail {

inline void require_finite(const ObjectiveEvaluation& e, std::span<const double> x, const char* who) {
  if (!std::isfinite(e.value) || !all_finite(e.gradient)) {
    std::ostringstream os;
    os << who << ": non-finite objective at iterate with |x|_inf=" << norm_inf(x)
       << " value=" << e.value;
    throw NumericalError(os.str());
  }
}

struct CurvaturePair {
  Vector s;
  Vector y;
  double rho;
};

// Two-loop recursion: returns -H g for the inverse-Hessian approximation H.
inline Vector lbfgs_direction(const std::deque<CurvaturePair>& memory, std::span<const double> g) {
  Vector q(g.begin(), g.end());
  std::vector<double> alpha(memory.size());
  for (std::size_t k = memory.size(); k-- > 0;) {
    alpha[k] = memory[k].rho * dot(memory[k].s, q);
    axpy(-alpha[k], memory[k].y, q);
  }
  if (!memory.empty()) {
    const auto& last = memory.back();
    const double gamma = dot(last.s, last.y) / dot(last.y, last.y);
    for (double& v : q) v *= gamma;
  }
  for (std::size_t k = 0; k < memory.size(); ++k) {
    const double beta = memory[k].rho * dot(memory[k].y, q);
    axpy(alpha[k] - beta, memory[k].s, q);
  }
  for (double& v : q) v = -v;
  return q;
}

}  // namespace detail

/// Limited-memory BFGS with Armijo backtracking.
///
/// Each line search first tries the initial step, then refines it once with
/// the secant of the directional derivative when that lowers the objective
/// (which makes the search exact on quadratics). Only points satisfying the
/// Armijo condition are ever accepted, so the objective is monotone.
template <class Objective>
OptimizationResult lbfgs_minimize(Objective&& objective, Vector w0, const OptimizerConfig& config) {
  if (config.gradient_tolerance <= 0.0 || config.gradient_tolerance >= 1.0) {
    throw ValidationError("gradient_tolerance must lie in (0, 1)");
  }
  if (config.lbfgs_memory == 0 || config.trajectory_points == 0) {
    throw ValidationError("lbfgs_memory and trajectory_points must be positive");
  }
  OptimizationResult res;
  Vector x = std::move(w0);
  ObjectiveEvaluation cur = objective(std::span<const double>(x));
  res.evaluations = 1;
  detail::require_finite(cur, x, "lbfgs_minimize");

  const double tol = config.gradient_tolerance * std::max(1.0, norm2(cur.gradient));
  auto push_point = [&](const Vector& px, const Vector& pg) {
    res.trajectory.push_back({px, pg});
    if (res.trajectory.size() > config.trajectory_points) res.trajectory.erase(res.trajectory.begin());
  };
  push_point(x, cur.gradient);

  std::deque<detail::CurvaturePair> memory;
  std::size_t stalled = 0;
  res.stop_reason = StopReason::max_iterations;

  if (norm2(cur.gradient) <= tol) {
    res.converged = true;
    res.stop_reason = StopReason::gradient_tolerance;
  } else {
    for (std::size_t it = 0; it < config.max_iterations; ++it) {
      Vector d = detail::lbfgs_direction(memory, cur.gradient);
      double slope = dot(cur.gradient, d);
      if (!(slope < 0.0)) {
        memory.clear();
        d = scaled(cur.gradient, -1.0);
        slope = -dot(cur.gradient, cur.gradient);
      }
      double step = memory.empty() ? 1.0 / std::max(1.0, norm2(cur.gradient)) : 1.0;

      bool accepted = false;
      Vector next_x;
      ObjectiveEvaluation next;
      for (std::size_t trial = 0; trial < config.max_line_search_trials; ++trial) {
        Vector tx = x;
        axpy(step, d, tx);
        ObjectiveEvaluation te = objective(std::span<const double>(tx));
        ++res.evaluations;
        if (!std::isfinite(te.value) || !all_finite(te.gradient)) {
          step *= config.backtrack_shrink;
          continue;
        }
        const double tslope = dot(te.gradient, d);
        if (te.value <= cur.value + config.armijo_c1 * step * slope) {
          accepted = true;
          next_x = std::move(tx);
          next = std::move(te);
          // Secant refinement along d.
          if (tslope != 0.0 && tslope > slope) {
            const double refined = step * slope / (slope - tslope);
            if (refined > 0.0 && std::isfinite(refined) && refined != step) {
              Vector rx = x;
              axpy(refined, d, rx);
              ObjectiveEvaluation re = objective(std::span<const double>(rx));
              ++res.evaluations;
              if (std::isfinite(re.value) && all_finite(re.gradient) && re.value <= next.value &&
                  re.value <= cur.value + config.armijo_c1 * refined * slope) {
                next_x = std::move(rx);
                next = std::move(re);
              }
            }
          }
          break;
        }
        if (tslope > slope) {
          const double secant = step * slope / (slope - tslope);
          step = std::clamp(secant, 0.1 * step, config.backtrack_shrink * step);
        } else {
          step *= config.backtrack_shrink;
        }
      }
      if (!accepted) {
        res.stop_reason = StopReason::line_search_failed;
        break;
      }

      Vector s = subtract(next_x, x);
      Vector y = subtract(next.gradient, cur.gradient);
      const double sy = dot(s, y);
      if (sy > kCurvatureEps * std::max(1.0, dot(y, y))) {
        memory.push_back({std::move(s), std::move(y), 1.0 / sy});
        if (memory.size() > config.lbfgs_memory) memory.pop_front();
      }
      const double previous_value = cur.value;
      x = std::move(next_x);
      cur = std::move(next);
      ++res.iterations;
      push_point(x, cur.gradient);

      if (norm2(cur.gradient) <= tol) {
        res.converged = true;
        res.stop_reason = StopReason::gradient_tolerance;
        break;
      }
      if (config.objective_tolerance > 0.0) {
        const double rel = (previous_value - cur.value) / std::max(1.0, std::abs(cur.value));
        stalled = rel < config.objective_tolerance ? stalled + 1 : 0;
        if (stalled >= config.stall_iterations) {
          res.stop_reason = StopReason::objective_stalled;
          break;
        }
      }
    }
  }
  res.final_value = cur.value;
  res.final_gradient_norm = norm2(cur.gradient);
  res.w_star = std::move(x);
  return res;
}

struct AdamResult {
  OptimizationResult result;
  Vector second_moment;  // bias-corrected v-hat after the last step

  friend bool operator==(const AdamResult&, const AdamResult&) = default;
};

/// Mini-batch Adam. `objective(w, batch)` evaluates the objective on the
/// examples indexed by `batch`; an epoch visits all `n_examples` once in an
/// order shuffled by the seeded generator.
template <class BatchObjective>
AdamResult adam_minimize(BatchObjective&& objective, Vector w0, std::size_t n_examples,
                         const OptimizerConfig& config) {
  const AdamConfig& ac = config.adam;
  if (n_examples == 0) throw ValidationError("adam_minimize: no examples");
  if (ac.batch_size == 0 || ac.batch_size > n_examples) {
    throw ValidationError("adam_minimize: batch_size must lie in [1, n_examples]");
  }
  if (!(ac.beta1 >= 0.0 && ac.beta1 < 1.0) || !(ac.beta2 > 0.0 && ac.beta2 < 1.0) ||
      !(ac.learning_rate >= 0.0) || !(ac.epsilon > 0.0)) {
    throw ValidationError("adam_minimize: invalid hyper-parameters");
  }
  const std::size_t p = w0.size();
  Vector w = std::move(w0);
  Vector m(p, 0.0), v(p, 0.0);
  std::vector<std::size_t> order(n_examples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(ac.shuffle_seed);

  AdamResult out;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < ac.epochs; ++epoch) {
    for (std::size_t i = n_examples; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t start = 0; start < n_examples; start += ac.batch_size) {
      const std::size_t stop = std::min(n_examples, start + ac.batch_size);
      std::span<const std::size_t> batch(order.data() + start, stop - start);
      ObjectiveEvaluation e = objective(std::span<const double>(w), batch);
      ++out.result.evaluations;
      detail::require_finite(e, w, "adam_minimize");
      ++step;
      for (std::size_t j = 0; j < p; ++j) m[j] = ac.beta1 * m[j] + (1.0 - ac.beta1) * e.gradient[j];
      v = adam_second_moment_update(v, e.gradient, ac.beta2);
      const double c1 = 1.0 - std::pow(ac.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(ac.beta2, static_cast<double>(step));
      for (std::size_t j = 0; j < p; ++j) {
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        w[j] -= ac.learning_rate * mhat / (std::sqrt(vhat) + ac.epsilon);
      }
      if (!all_finite(w)) throw NumericalError("adam_minimize: non-finite update at step " + std::to_string(step));
    }
  }
  std::vector<std::size_t> all(n_examples);
  std::iota(all.begin(), all.end(), std::size_t{0});
  ObjectiveEvaluation final_eval = objective(std::span<const double>(w), std::span<const std::size_t>(all));
  ++out.result.evaluations;
  detail::require_finite(final_eval, w, "adam_minimize");

  out.second_moment = step > 0 ? adam_bias_corrected(v, ac.beta2, step) : Vector(p, 0.0);
  out.result.iterations = step;
  out.result.final_value = final_eval.value;
  out.result.final_gradient_norm = norm2(final_eval.gradient);
  out.result.converged = out.result.final_gradient_norm <= config.gradient_tolerance;
  out.result.stop_reason = StopReason::epochs_done;
  out.result.trajectory.push_back({w, final_eval.gradient});
  out.result.w_star = std::move(w);
  return out;
}

/// Overload taking the dataset whose examples the batches index.
template <class BatchObjective>
AdamResult adam_minimize(BatchObjective&& objective, Vector w0, const PhaseDataset& data,
                         const OptimizerConfig& config) {
  return adam_minimize(std::forward<BatchObjective>(objective), std::move(w0), data.size(), config);
}

}  // namespace increlearn
