#pragma once

#include <vector>

#include "focus/autodiff.hpp"
#include "focus/nn.hpp"
#include "focus/rng.hpp"
#include "focus/tensor.hpp"

namespace focus::fusion {

/// One per-token scorer: linear(D -> D), GELU, linear(D -> 1).
struct ScoreMlpRef {
  ad::Node* w1 = nullptr;
  ad::Node* b1 = nullptr;
  ad::Node* w2 = nullptr;
  ad::Node* b2 = nullptr;
};

struct ScorePredictorsRef {
  ScoreMlpRef rgb;
  ScoreMlpRef sobel;
};

/// One encoder block over the fused tokens plus a linear classifier.
struct FusionHeadRef {
  nn::BlockRef block;
  ad::Node* cls_w = nullptr;  // D x 2
  ad::Node* cls_b = nullptr;  // 2
  int heads = 1;
};

/// How the complementary mask is produced.
///   kTraining:  Gumbel noise, hard one-hot forward, straight-through grads.
///   kInference: no noise, deterministic argmax, constant mask.
///   kSoft:      Gumbel noise but the soft probabilities are used directly;
///               a smooth surrogate for finite-difference validation.
enum class MaskMode { kTraining, kInference, kSoft };

namespace detail {

inline ad::Node* score_mlp(ad::Node* tokens, const ScoreMlpRef& mlp) {
  ad::Node* hidden = ad::gelu(ad::add_rowvec(ad::matmul(tokens, mlp.w1), mlp.b1));
  return ad::add_rowvec(ad::matmul(hidden, mlp.w2), mlp.b2);  // N x 1
}

}  // namespace detail

/// Per-token modality probabilities: each stream scored by its own MLP, the
/// two scores concatenated and row-softmaxed.
inline ad::Node* predict_scores(ad::Node* z_rgb, ad::Node* z_sobel,
                                const ScorePredictorsRef& sp) {
  if (z_rgb->rows() != z_sobel->rows() || z_rgb->cols() != z_sobel->cols())
    throw InputError("token streams disagree in shape");
  ad::Node* s_rgb = detail::score_mlp(z_rgb, sp.rgb);
  ad::Node* s_sobel = detail::score_mlp(z_sobel, sp.sobel);
  return ad::row_softmax(ad::concat_cols(s_rgb, s_sobel));  // N x 2
}

/// Row argmax as exact one-hot values; ties select column 0.
inline Tensor hard_rows(const Tensor& soft) {
  const int r = soft.rows(), c = soft.cols();
  Tensor hard({r, c});
  for (int i = 0; i < r; ++i) {
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (soft.at(i, j) > soft.at(i, best)) best = j;
    hard.at(i, best) = 1.0;
  }
  return hard;
}

/// Differentiable discrete selection. Training draws one Gumbel(0,1) variate
/// per entry from `rng`, so a caller seeding the stream per (step, sample)
/// gets reproducible masks.
inline ad::Node* gumbel_hard_mask(ad::Node* logits, double tau, Rng& rng, MaskMode mode) {
  if (tau <= 0.0) throw ConfigError("gumbel temperature must be positive");
  if (mode == MaskMode::kInference) {
    return logits->tape->constant(hard_rows(logits->value));
  }
  Tensor noise(logits->value.shape());
  for (std::int64_t i = 0; i < noise.numel(); ++i) noise[i] = rng.gumbel();
  ad::Node* noisy = ad::add(logits, logits->tape->constant(std::move(noise)));
  ad::Node* y_soft = ad::row_softmax(ad::scale(noisy, 1.0 / tau));
  if (mode == MaskMode::kSoft) return y_soft;
  return ad::straight_through(y_soft, hard_rows(y_soft->value));
}

/// z_fus[i] = m[i,0] * z_rgb[i] + m[i,1] * z_sobel[i].
inline ad::Node* substitute(ad::Node* z_rgb, ad::Node* z_sobel, ad::Node* mask) {
  if (mask->rows() != z_rgb->rows() || mask->cols() != 2)
    throw InputError("mask shape does not match token streams");
  ad::Node* m0 = ad::slice_cols(mask, 0, 1);
  ad::Node* m1 = ad::slice_cols(mask, 1, 2);
  return ad::add(ad::scale_rows(z_rgb, m0), ad::scale_rows(z_sobel, m1));
}

/// a_fus = M (x) a_rgb + (1 - M) (x) a_sobel, with M the RGB column of the
/// mask viewed as a column vector over grid positions.
inline ad::Node* fuse_maps(ad::Node* a_rgb, ad::Node* a_sobel, ad::Node* mask) {
  if (a_rgb->rows() != a_sobel->rows() || a_rgb->rows() != mask->rows())
    throw InputError("map and mask sizes disagree");
  ad::Node* m = ad::slice_cols(mask, 0, 1);
  ad::Node* ones = mask->tape->constant(Tensor::full(m->value.shape(), 1.0));
  return ad::add(ad::hadamard(m, a_rgb), ad::hadamard(ad::sub(ones, m), a_sobel));
}

/// One encoder block over the fused tokens, token mean, linear head, softmax.
inline ad::Node* fusion_classify(const nn::TokenGrid& z_fus, const FusionHeadRef& head) {
  nn::EncoderRef enc;
  enc.blocks = {head.block};
  enc.heads = head.heads;
  nn::TokenGrid out = nn::encoder_forward(z_fus, enc);
  ad::Node* pooled = ad::mean_rows(out.tokens);  // 1 x D
  ad::Node* logits = ad::add_rowvec(ad::matmul(pooled, head.cls_w), head.cls_b);
  return ad::row_softmax(logits);  // 1 x 2
}

}  // namespace focus::fusion
