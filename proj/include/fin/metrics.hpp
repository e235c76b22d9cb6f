#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "fin/errors.hpp"

namespace fin {

/// Rank-based (Mann-Whitney) AUC; tied scores share their average rank, which
/// counts every positive/negative tie as half a correctly ordered pair.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw dimension_error("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t positives = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw metric_error("auc: labels must be 0 or 1");
    positives += static_cast<std::size_t>(l);
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) throw metric_error("auc undefined: need both positive and negative labels");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double positive_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // ranks i+1 .. j share their mean
    const double mean_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) positive_rank_sum += mean_rank;
    i = j;
  }
  const double np = static_cast<double>(positives);
  const double nn = static_cast<double>(negatives);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return auc(std::span<const double>(scores), std::span<const int>(labels));
}

}  // namespace fin
