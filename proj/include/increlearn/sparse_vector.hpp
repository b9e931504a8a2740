#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/linalg.hpp"

namespace increlearn {

struct SparseEntry {
  std::size_t index = 0;
  double value = 0.0;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

/// Indexed real-valued vector in canonical form: indices strictly increasing,
/// all below dim(), no stored zeros.
///
/// Features, model weights and sparse gradients share this type. Optimizers
/// materialize it densely through to_dense() and convert back with from_dense().
class SparseVector {
 public:
  SparseVector() = default;
  explicit SparseVector(std::size_t dim) : dim_(dim) {}

  /// Canonicalizes arbitrary (index, value) pairs: sorts, sums duplicate
  /// indices and drops zeros. Throws ShapeError for an index >= dim.
  static SparseVector from_entries(std::size_t dim, std::vector<SparseEntry> entries) {
    for (const auto& e : entries) {
      if (e.index >= dim) {
        throw ShapeError("sparse index " + std::to_string(e.index) + " out of range for dim " +
                         std::to_string(dim));
      }
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const SparseEntry& a, const SparseEntry& b) { return a.index < b.index; });
    SparseVector out(dim);
    out.entries_.reserve(entries.size());
    for (const auto& e : entries) {
      if (!out.entries_.empty() && out.entries_.back().index == e.index) {
        out.entries_.back().value += e.value;
      } else {
        out.entries_.push_back(e);
      }
    }
    std::erase_if(out.entries_, [](const SparseEntry& e) { return e.value == 0.0; });
    return out;
  }

  static SparseVector from_dense(std::span<const double> dense) {
    SparseVector out(dense.size());
    for (std::size_t i = 0; i < dense.size(); ++i) {
      if (dense[i] != 0.0) out.entries_.push_back({i, dense[i]});
    }
    return out;
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t nnz() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::span<const SparseEntry> entries() const noexcept { return entries_; }

  double operator[](std::size_t index) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), index,
                               [](const SparseEntry& e, std::size_t i) { return e.index < i; });
    return (it != entries_.end() && it->index == index) ? it->value : 0.0;
  }

  Vector to_dense() const {
    Vector out(dim_, 0.0);
    for (const auto& e : entries_) out[e.index] = e.value;
    return out;
  }

  double dot(std::span<const double> dense) const {
    require_same_size(dim_, dense.size(), "SparseVector::dot");
    double s = 0.0;
    for (const auto& e : entries_) s += e.value * dense[e.index];
    return s;
  }

  double dot(const SparseVector& other) const {
    require_same_size(dim_, other.dim_, "SparseVector::dot");
    double s = 0.0;
    auto a = entries_.begin();
    auto b = other.entries_.begin();
    while (a != entries_.end() && b != other.entries_.end()) {
      if (a->index < b->index) {
        ++a;
      } else if (b->index < a->index) {
        ++b;
      } else {
        s += a->value * b->value;
        ++a;
        ++b;
      }
    }
    return s;
  }

  SparseVector scaled(double c) const {
    std::vector<SparseEntry> e(entries_.begin(), entries_.end());
    for (auto& x : e) x.value *= c;
    return from_entries(dim_, std::move(e));
  }

  /// Keeps only entries whose index is listed in `keep` (sorted ascending).
  SparseVector restricted_to(std::span<const std::size_t> keep) const {
    SparseVector out(dim_);
    for (const auto& e : entries_) {
      if (std::binary_search(keep.begin(), keep.end(), e.index)) out.entries_.push_back(e);
    }
    return out;
  }

  friend bool operator==(const SparseVector&, const SparseVector&) = default;

 private:
  std::size_t dim_ = 0;
  std::vector<SparseEntry> entries_;
};

}  // namespace increlearn
