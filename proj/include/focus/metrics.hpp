#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "focus/imaging.hpp"
#include "focus/tensor.hpp"

namespace focus::metrics {

/// Mann-Whitney statistic: the fraction of (fake, real) pairs ranked in the
/// right order, ties counted half. Computed from average ranks, so runtime is
/// O(n log n) rather than quadratic in the pair count.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw InputError("auc score/label count mismatch");
  std::size_t n_fake = 0, n_real = 0;
  for (int lb : labels) {
    if (lb != 0 && lb != 1) throw InputError("auc labels must be 0 or 1");
    (lb == 1 ? n_fake : n_real)++;
  }
  if (n_fake == 0 || n_real == 0)
    throw InputError("auc needs both classes present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // average ranks over tie groups, 1-based
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }

  double fake_rank_sum = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k)
    if (labels[k] == 1) fake_rank_sum += rank[k];
  const double nf = static_cast<double>(n_fake), nr = static_cast<double>(n_real);
  return (fake_rank_sum - nf * (nf + 1.0) / 2.0) / (nf * nr);
}

struct MapMetrics {
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  bool degenerate = false;  // some denominator was empty
};

/// Binarize a predicted map against a binary ground-truth mask and count
/// overlaps. The map is resized to the mask's resolution first.
inline MapMetrics map_metrics(const Tensor& map, const Tensor& gt_mask, double threshold) {
  if (map.ndim() != 2 || gt_mask.ndim() != 2) throw InputError("map_metrics expects rank-2 maps");
  Tensor resized = map;
  if (map.dim(0) != gt_mask.dim(0) || map.dim(1) != gt_mask.dim(1))
    resized = imaging::resize_bilinear(map, gt_mask.dim(0), gt_mask.dim(1));

  std::int64_t inter = 0, pred = 0, truth = 0;
  for (std::int64_t i = 0; i < resized.numel(); ++i) {
    const bool p = resized[i] >= threshold;
    const bool g = gt_mask[i] >= 0.5;
    inter += p && g;
    pred += p;
    truth += g;
  }
  const std::int64_t uni = pred + truth - inter;

  MapMetrics m;
  m.degenerate = pred == 0 || truth == 0 || uni == 0;
  m.iou = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
  m.precision = pred == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(pred);
  m.recall = truth == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(truth);
  return m;
}

/// Metrics at thresholds 0.1 through 0.9 in steps of 0.1.
inline std::vector<std::pair<double, MapMetrics>> threshold_sweep(const Tensor& map,
                                                                  const Tensor& gt_mask) {
  std::vector<std::pair<double, MapMetrics>> out;
  for (int k = 1; k <= 9; ++k) {
    const double t = k / 10.0;
    out.emplace_back(t, map_metrics(map, gt_mask, t));
  }
  return out;
}

/// Min-max normalization to [0,1]; constant maps collapse to zero.
inline Tensor minmax_normalize(const Tensor& map) {
  const double lo = map.min(), hi = map.max();
  Tensor out(map.shape());
  if (hi - lo < 1e-12) return out;
  for (std::int64_t i = 0; i < map.numel(); ++i) out[i] = (map[i] - lo) / (hi - lo);
  return out;
}

}  // namespace focus::metrics
