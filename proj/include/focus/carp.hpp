#pragma once

#include "focus/autodiff.hpp"
#include "focus/nn.hpp"
#include "focus/tensor.hpp"

namespace focus::carp {

/// Parameter nodes of the 1x1 projection onto the two class channel banks.
struct CarpRef {
  ad::Node* proj_w = nullptr;  // D x 2d
  ad::Node* proj_b = nullptr;  // 2d
  int d = 0;
};

/// Per-position class banks: rows are grid positions, the first d columns
/// are the class-0 bank, the last d the class-1 bank.
struct ProjectedBanks {
  ad::Node* f = nullptr;  // (h*w) x 2d
  int h = 0;
  int w = 0;
  int d = 0;
};

/// Pointwise projection of the token grid to 2d channels. A 1x1 convolution
/// over the h x w map is exactly a per-token linear layer.
inline ProjectedBanks grid_project(const nn::TokenGrid& grid, const CarpRef& head) {
  ad::Node* tokens = nn::image_tokens(grid);
  if (head.d < 1) throw ConfigError("carp channel count must be >= 1");
  if (tokens->cols() != head.proj_w->rows() || head.proj_w->cols() != 2 * head.d)
    throw ConfigError("carp projection does not match token dimension");
  ad::Node* f = ad::add_rowvec(ad::matmul(tokens, head.proj_w), head.proj_b);
  return ProjectedBanks{f, grid.h, grid.w, head.d};
}

/// Spatial max per channel, then mean over each class's d maxima, then
/// softmax: the image-level localization probabilities.
inline ad::Node* pool_scores(const ProjectedBanks& banks) {
  ad::Node* maxima = ad::colwise_max(banks.f);  // 1 x 2d
  ad::Node* s0 = ad::mean_cols_range(maxima, 0, banks.d);
  ad::Node* s1 = ad::mean_cols_range(maxima, banks.d, 2 * banks.d);
  return ad::row_softmax(ad::concat_cols(s0, s1));  // 1 x 2
}

/// Class-attentive map: sigmoid of the score-weighted sum of per-class
/// channel means, one value per grid position (column vector of h*w rows).
inline ad::Node* car_map(const ProjectedBanks& banks, ad::Node* y_loc) {
  ad::Node* m0 = ad::mean_cols_range(banks.f, 0, banks.d);
  ad::Node* m1 = ad::mean_cols_range(banks.f, banks.d, 2 * banks.d);
  ad::Node* y0 = ad::pick(y_loc, 0, 0);
  ad::Node* y1 = ad::pick(y_loc, 0, 1);
  return ad::sigmoid(ad::add(ad::scale_by(m0, y0), ad::scale_by(m1, y1)));
}

/// Diagnostic map built from the fake-class bank alone.
inline ad::Node* fake_only_map(const ProjectedBanks& banks, ad::Node* y_loc) {
  ad::Node* m1 = ad::mean_cols_range(banks.f, banks.d, 2 * banks.d);
  ad::Node* y1 = ad::pick(y_loc, 0, 1);
  return ad::sigmoid(ad::scale_by(m1, y1));
}

}  // namespace focus::carp
