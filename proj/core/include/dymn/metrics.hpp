#pragma once

// Evaluation metrics for multi-hot labels.

#include <algorithm>
#include <numeric>
#include <vector>

#include "dymn/tensor.hpp"

namespace dymn {

// Fraction of samples whose top-scoring class is a positive label.
inline double accuracy(const Tensor& scores, const Tensor& labels) {
  check_shape(scores.shape == labels.shape && scores.rank() == 2, "accuracy: B x C expected");
  const int B = scores.dim(0), C = scores.dim(1);
  int hits = 0;
  for (int b = 0; b < B; ++b) {
    int arg = 0;
    for (int c = 1; c < C; ++c)
      if (scores.at2(b, c) > scores.at2(b, arg)) arg = c;
    if (labels.at2(b, arg) > 0.5f) ++hits;
  }
  return static_cast<double>(hits) / B;
}

// Class-mean average precision; classes without positives are skipped.
inline double mean_average_precision(const Tensor& scores, const Tensor& labels) {
  check_shape(scores.shape == labels.shape && scores.rank() == 2, "mAP: B x C expected");
  const int B = scores.dim(0), C = scores.dim(1);
  double ap_sum = 0;
  int valid = 0;
  std::vector<int> order(static_cast<std::size_t>(B));
  for (int c = 0; c < C; ++c) {
    int positives = 0;
    for (int b = 0; b < B; ++b)
      if (labels.at2(b, c) > 0.5f) ++positives;
    if (positives == 0) continue;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
      return scores.at2(i, c) > scores.at2(j, c);
    });
    double ap = 0;
    int tp = 0;
    for (int k = 0; k < B; ++k) {
      if (labels.at2(order[static_cast<std::size_t>(k)], c) > 0.5f) {
        ++tp;
        ap += static_cast<double>(tp) / (k + 1);
      }
    }
    ap_sum += ap / positives;
    ++valid;
  }
  return valid == 0 ? 0.0 : ap_sum / valid;
}

}  // namespace dymn
