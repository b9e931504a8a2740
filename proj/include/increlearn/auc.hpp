#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/linalg.hpp"
#include "increlearn/model.hpp"

namespace increlearn {

/// Area under the ROC curve via the Mann-Whitney rank statistic, ties
/// counted one half. Ranks are kept doubled so the statistic is an exact
/// integer until the final division.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  require_same_size(scores.size(), labels.size(), "auc");
  std::uint64_t positives = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("auc: labels must be 0 or 1");
    if (std::isnan(scores[i])) throw ValidationError("auc: NaN score");
    positives += static_cast<std::uint64_t>(labels[i]);
  }
  const std::uint64_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw UndefinedMetricError("auc: needs both positive and negative labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum over positives of twice their (average) 1-based rank.
  std::uint64_t doubled_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const std::uint64_t doubled_rank = (i + 1) + (j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) doubled_rank_sum += doubled_rank;
    }
    i = j + 1;
  }
  // 2 * (U) = doubled_rank_sum - P (P + 1)
  const std::uint64_t twice_u = doubled_rank_sum - positives * (positives + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * positives * negatives);
}

/// AUC of the GLMix logits of `model` on `data`.
inline double glmix_auc(const GlmixModel& model, const PhaseDataset& data) {
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(data.size());
  labels.reserve(data.size());
  for (const auto& ex : data.examples) {
    scores.push_back(glmix_score(model, ex));
    labels.push_back(ex.label);
  }
  return auc(scores, labels);
}

}  // namespace increlearn
