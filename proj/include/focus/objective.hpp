#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "focus/autodiff.hpp"
#include "focus/tensor.hpp"

namespace focus::objective {

struct LossBreakdown {
  double loss_loc = 0.0;
  double loss_fus = 0.0;
  double total = 0.0;
  double alpha = 0.0;
};

constexpr double kProbFloor = 1e-12;

namespace detail {

inline double neg_log_prob(double p, bool* clamped) {
  if (p < kProbFloor) {
    if (clamped) *clamped = true;
    p = kProbFloor;
  }
  return -std::log(p);
}

inline void check_batch(const Tensor& probs, const std::vector<int>& labels, const char* what) {
  if (probs.ndim() != 2 || probs.cols() != 2)
    throw InputError(std::string(what) + " expects a batch x 2 probability matrix");
  if (static_cast<std::size_t>(probs.rows()) != labels.size())
    throw InputError(std::string(what) + " label count does not match batch");
  for (int lb : labels)
    if (lb != 0 && lb != 1) throw InputError(std::string(what) + " labels must be 0 or 1");
}

}  // namespace detail

/// Cross-entropy summed over the two modalities, averaged over the batch.
/// `clamped`, when given, is set if any true-class probability hit the floor.
inline double loss_loc(const Tensor& y_rgb, const Tensor& y_sobel, const std::vector<int>& labels,
                       bool* clamped = nullptr) {
  detail::check_batch(y_rgb, labels, "loss_loc");
  detail::check_batch(y_sobel, labels, "loss_loc");
  if (y_rgb.rows() != y_sobel.rows()) throw InputError("loss_loc modality batches disagree");
  double acc = 0.0;
  for (int i = 0; i < y_rgb.rows(); ++i) {
    acc += detail::neg_log_prob(y_rgb.at(i, labels[static_cast<std::size_t>(i)]), clamped);
    acc += detail::neg_log_prob(y_sobel.at(i, labels[static_cast<std::size_t>(i)]), clamped);
  }
  return acc / y_rgb.rows();
}

/// Cross-entropy of the fused prediction, averaged over the batch.
inline double loss_fus(const Tensor& y_fus, const std::vector<int>& labels,
                       bool* clamped = nullptr) {
  detail::check_batch(y_fus, labels, "loss_fus");
  double acc = 0.0;
  for (int i = 0; i < y_fus.rows(); ++i)
    acc += detail::neg_log_prob(y_fus.at(i, labels[static_cast<std::size_t>(i)]), clamped);
  return acc / y_fus.rows();
}

inline LossBreakdown total_loss(double loc, double fus, double alpha) {
  if (alpha <= 0.0) throw ConfigError("loss weight alpha must be positive");
  return LossBreakdown{loc, fus, loc + alpha * fus, alpha};
}

/// Tape-side single-sample cross-entropy term, -log(probs[0, label]).
inline ad::Node* ce_term(ad::Node* probs, int label) {
  if (probs->rows() != 1 || probs->cols() != 2)
    throw InputError("ce_term expects a 1 x 2 probability row");
  if (label != 0 && label != 1) throw InputError("ce_term label must be 0 or 1");
  return ad::scale(ad::log_clamped(ad::pick(probs, 0, label), kProbFloor), -1.0);
}

/// Central-difference validation of analytic gradients. `coords` selects the
/// parameter coordinates to probe (all of them when empty). Returns the
/// maximum relative error |analytic - numeric| / max(1e-8, |a| + |n|).
inline double grad_check(const std::function<double(const std::vector<double>&)>& f,
                         std::vector<double> params, const std::vector<double>& analytic,
                         double eps, std::vector<std::size_t> coords = {}) {
  if (params.size() != analytic.size())
    throw InputError("grad_check analytic gradient size mismatch");
  if (coords.empty()) {
    coords.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) coords[i] = i;
  }
  double worst = 0.0;
  for (std::size_t i : coords) {
    if (i >= params.size()) throw InputError("grad_check coordinate out of range");
    const double saved = params[i];
    params[i] = saved + eps;
    const double fp = f(params);
    params[i] = saved - eps;
    const double fm = f(params);
    params[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("non-finite objective at coordinate " + std::to_string(i));
    const double num = (fp - fm) / (2.0 * eps);
    const double ana = analytic[i];
    if (!std::isfinite(ana))
      throw NumericError("non-finite analytic gradient at coordinate " + std::to_string(i));
    // central differences carry cancellation noise around 1e-11 at these
    // scales; differences below 1e-9 are agreement, not error
    if (std::fabs(ana - num) < 1e-9) continue;
    const double rel = std::fabs(ana - num) / std::max(1e-8, std::fabs(ana) + std::fabs(num));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace focus::objective
