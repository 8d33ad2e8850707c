#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "focus/autodiff.hpp"
#include "focus/rng.hpp"
#include "focus/tensor.hpp"

namespace focus::nn {

/// Tokens on the tape plus the spatial grid they reshape to. When a class
/// token is present it occupies row 0 and the grid covers rows 1..h*w.
struct TokenGrid {
  ad::Node* tokens = nullptr;
  int h = 0;
  int w = 0;
  bool class_token = false;

  int n_image_tokens() const { return h * w; }
};

/// Per-block parameter nodes for one encoder block.
struct BlockRef {
  ad::Node* qkv_w;
  ad::Node* qkv_b;
  ad::Node* proj_w;
  ad::Node* proj_b;
  ad::Node* ln1_g;
  ad::Node* ln1_b;
  ad::Node* ln2_g;
  ad::Node* ln2_b;
  ad::Node* mlp1_w;
  ad::Node* mlp1_b;
  ad::Node* mlp2_w;
  ad::Node* mlp2_b;
};

/// Parameter nodes for one branch encoder. pos_enc is a fixed table, not a
/// parameter, and is shared verbatim between branches.
struct EncoderRef {
  ad::Node* embed_w = nullptr;   // (P*P*3) x D
  ad::Node* embed_b = nullptr;   // D
  ad::Node* class_token = nullptr;  // 1 x D, optional
  Tensor pos_enc;                // (h*w) x D
  std::vector<BlockRef> blocks;
  int heads = 1;
};

/// 2-D sinusoidal table: the first D/2 channels encode the row index, the
/// last D/2 the column index, each as interleaved sin/cos with the usual
/// 10000^(-2k/half) frequency progression.
inline Tensor fixed_pos_encoding(int h, int w, int d) {
  if (d % 4 != 0) throw ConfigError("embedding dimension must be divisible by 4");
  const int half = d / 2;
  const int pairs = half / 2;
  Tensor out({h * w, d});
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const int p = r * w + c;
      for (int k = 0; k < pairs; ++k) {
        const double freq = std::pow(10000.0, -2.0 * k / half);
        out.at(p, 2 * k) = std::sin(r * freq);
        out.at(p, 2 * k + 1) = std::cos(r * freq);
        out.at(p, half + 2 * k) = std::sin(c * freq);
        out.at(p, half + 2 * k + 1) = std::cos(c * freq);
      }
    }
  return out;
}

/// Rows are flattened P x P x 3 patches in row-major scan order.
inline Tensor patch_matrix(const Tensor& image, int patch) {
  if (image.ndim() != 3 || image.dim(2) != 3) throw InputError("patch_matrix expects HxWx3");
  const int h = image.dim(0), w = image.dim(1);
  if (h % patch != 0 || w % patch != 0)
    throw ConfigError("image size must be divisible by patch size");
  const int gh = h / patch, gw = w / patch;
  const int plen = patch * patch * 3;
  Tensor out({gh * gw, plen});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const int row = gy * gw + gx;
      int k = 0;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          for (int c = 0; c < 3; ++c)
            out.at(row, k++) = image.at3(gy * patch + py, gx * patch + px, c);
    }
  return out;
}

namespace detail {

inline ad::Node* prepend_row(ad::Node* row, ad::Node* mat) {
  return ad::transpose(ad::concat_cols(ad::transpose(row), ad::transpose(mat)));
}

inline ad::Node* drop_first_row(ad::Node* mat) {
  return ad::transpose(ad::slice_cols(ad::transpose(mat), 1, mat->rows()));
}

}  // namespace detail

/// Split into non-overlapping patches, project, add positional encodings.
inline TokenGrid patchify_embed(ad::Tape& tape, const Tensor& image, const EncoderRef& enc,
                                int patch) {
  Tensor patches = patch_matrix(image, patch);
  const int gh = image.dim(0) / patch, gw = image.dim(1) / patch;
  if (enc.pos_enc.rows() != gh * gw || enc.pos_enc.cols() != enc.embed_w->cols())
    throw ConfigError("positional table does not match token grid");
  ad::Node* tokens = ad::add_rowvec(ad::matmul(tape.constant(std::move(patches)), enc.embed_w),
                                    enc.embed_b);
  tokens = ad::add(tokens, tape.constant(enc.pos_enc));
  TokenGrid grid{tokens, gh, gw, false};
  if (enc.class_token) {
    grid.tokens = detail::prepend_row(enc.class_token, tokens);
    grid.class_token = true;
  }
  return grid;
}

/// Pre-norm encoder stack: z' = MHSA(LN(z)) + z; z = MLP(LN(z')) + z'.
inline TokenGrid encoder_forward(TokenGrid grid, const EncoderRef& enc) {
  ad::Node* z = grid.tokens;
  const int d = z->cols();
  if (d % enc.heads != 0) throw ConfigError("head count must divide embedding dimension");
  const int dh = d / enc.heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  int block_index = 0;
  for (const BlockRef& b : enc.blocks) {
    ad::Node* x = ad::add_rowvec(ad::mul_rowvec(ad::layer_norm_rows(z), b.ln1_g), b.ln1_b);
    ad::Node* qkv = ad::add_rowvec(ad::matmul(x, b.qkv_w), b.qkv_b);
    ad::Node* heads_out = nullptr;
    for (int h = 0; h < enc.heads; ++h) {
      ad::Node* q = ad::slice_cols(qkv, h * dh, (h + 1) * dh);
      ad::Node* k = ad::slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
      ad::Node* v = ad::slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
      ad::Node* attn = ad::row_softmax(ad::scale(ad::matmul(q, ad::transpose(k)), attn_scale));
      ad::Node* o = ad::matmul(attn, v);
      heads_out = heads_out ? ad::concat_cols(heads_out, o) : o;
    }
    ad::Node* attn_out = ad::add_rowvec(ad::matmul(heads_out, b.proj_w), b.proj_b);
    ad::Node* z1 = ad::add(attn_out, z);

    ad::Node* y = ad::add_rowvec(ad::mul_rowvec(ad::layer_norm_rows(z1), b.ln2_g), b.ln2_b);
    ad::Node* hmid = ad::gelu(ad::add_rowvec(ad::matmul(y, b.mlp1_w), b.mlp1_b));
    ad::Node* mlp_out = ad::add_rowvec(ad::matmul(hmid, b.mlp2_w), b.mlp2_b);
    z = ad::add(mlp_out, z1);

    if (!z->value.all_finite())
      throw NumericError("non-finite value in encoder block " + std::to_string(block_index));
    ++block_index;
  }
  return TokenGrid{z, grid.h, grid.w, grid.class_token};
}

/// The h*w image tokens, with any class token stripped.
inline ad::Node* image_tokens(const TokenGrid& grid) {
  return grid.class_token ? detail::drop_first_row(grid.tokens) : grid.tokens;
}

inline Tensor trunc_normal_init(std::vector<int> shape, Rng& rng, double stddev = 0.02) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.truncated_normal(stddev);
  return t;
}

}  // namespace focus::nn
