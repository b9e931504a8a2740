#pragma once

// Shared generators and independent oracles for the test suites. Nothing in
// here calls into the code paths it is used to check.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "increlearn/hessian.hpp"
#include "increlearn/model.hpp"
#include "increlearn/sparse_vector.hpp"

namespace testing_support {

using increlearn::LabeledExample;
using increlearn::PhaseDataset;
using increlearn::SparseEntry;
using increlearn::SparseVector;
using increlearn::Vector;

inline Vector random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Vector v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

inline SparseVector random_sparse(std::mt19937_64& rng, std::size_t dim, std::size_t nnz, double scale = 1.0) {
  std::uniform_int_distribution<std::size_t> pick(0, dim - 1);
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<SparseEntry> e;
  for (std::size_t k = 0; k < nnz; ++k) e.push_back({pick(rng), nd(rng)});
  return SparseVector::from_entries(dim, std::move(e));
}

/// Random labeled dataset; labels drawn from a random logistic model so the
/// data are not separable. Each example gets entity "member:m<k>" when
/// n_entities > 0.
inline PhaseDataset random_dataset(std::mt19937_64& rng, std::size_t n, std::size_t dim, std::size_t nnz,
                                   std::size_t n_entities = 0, double offset_scale = 0.0,
                                   std::size_t phase = 0) {
  PhaseDataset d;
  d.phase_index = phase;
  d.feature_dim = dim;
  Vector truth = random_vector(rng, dim, 0.7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> off(0.0, offset_scale > 0 ? offset_scale : 1.0);
  std::uniform_int_distribution<std::size_t> ent(0, n_entities > 0 ? n_entities - 1 : 0);
  for (std::size_t i = 0; i < n; ++i) {
    LabeledExample ex;
    ex.features = random_sparse(rng, dim, nnz);
    ex.offset = offset_scale > 0 ? off(rng) : 0.0;
    const double z = ex.features.dot(truth) + ex.offset;
    ex.label = u(rng) < 1.0 / (1.0 + std::exp(-z)) ? 1 : 0;
    if (n_entities > 0) ex.entity_ids["member"] = "m" + std::to_string(ent(rng));
    d.examples.push_back(std::move(ex));
  }
  return d;
}

/// Central finite differences of a scalar function.
inline Vector finite_difference_gradient(const std::function<double(const Vector&)>& f, const Vector& w,
                                         double h = 1e-6) {
  Vector g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    Vector a = w, b = w;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, |b|_inf)
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, scale = 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

inline Eigen::VectorXd to_eigen(std::span<const double> v) {
  Eigen::VectorXd out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

inline Vector from_eigen(const Eigen::VectorXd& v) { return Vector(v.data(), v.data() + v.size()); }

inline Eigen::MatrixXd random_spd(std::mt19937_64& rng, std::size_t n, double ridge = 0.5) {
  Eigen::MatrixXd m(n, n);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = nd(rng);
  Eigen::MatrixXd a = m.transpose() * m / static_cast<double>(n);
  a += ridge * Eigen::MatrixXd::Identity(n, n);
  return a;
}

inline increlearn::FullHessian to_full_hessian(const Eigen::MatrixXd& a) {
  increlearn::FullHessian h(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) h.at(i, j) = a(i, j);
  return h;
}

/// Dense DFP recursion: B0 = (s_k.y_k / s_k.s_k) I, then for each pair
/// oldest to newest B <- (I - rho y s^T) B (I - rho s y^T) + rho y y^T.
inline Eigen::MatrixXd dense_dfp_matrix(const increlearn::DfpMemory& mem) {
  const auto n = static_cast<Eigen::Index>(mem.dim());
  const auto& last = mem.pairs.back();
  const Eigen::VectorXd sl = to_eigen(last.step), yl = to_eigen(last.grad_change);
  Eigen::MatrixXd b = (sl.dot(yl) / sl.dot(sl)) * Eigen::MatrixXd::Identity(n, n);
  for (const auto& pr : mem.pairs) {
    const Eigen::VectorXd s = to_eigen(pr.step), y = to_eigen(pr.grad_change);
    const double rho = 1.0 / s.dot(y);
    const Eigen::MatrixXd left = Eigen::MatrixXd::Identity(n, n) - rho * y * s.transpose();
    b = left * b * left.transpose() + rho * y * y.transpose();
  }
  return b;
}

/// Pairwise AUC: positives beating negatives count 1, ties 1/2.
inline double brute_force_auc(std::span<const double> scores, std::span<const int> labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

}  // namespace testing_support
