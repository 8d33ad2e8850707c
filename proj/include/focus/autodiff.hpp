#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "focus/tensor.hpp"

namespace focus::ad {

class Tape;

/// One value in the computation graph. Gradients accumulate into `grad`
/// during the reverse sweep; `backward` routes this node's gradient to its
/// parents and is empty for leaves and for nodes nothing differentiable
/// feeds into.
struct Node {
  Tensor value;
  Tensor grad;
  bool needs_grad = false;
  std::function<void()> backward;
  Tape* tape = nullptr;
  std::size_t idx = 0;

  int rows() const { return value.rows(); }
  int cols() const { return value.cols(); }
};

/// Owns the nodes of one forward pass in creation order, which is already a
/// topological order, so the reverse sweep is a simple backward walk.
class Tape {
 public:
  Node* leaf(Tensor v, bool needs_grad) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(v);
    n.grad = Tensor(n.value.shape());
    n.needs_grad = needs_grad;
    n.tape = this;
    n.idx = nodes_.size() - 1;
    return &n;
  }

  Node* constant(Tensor v) { return leaf(std::move(v), false); }

  Node* make(Tensor v, bool needs_grad, std::function<void()> backward) {
    Node* n = leaf(std::move(v), needs_grad);
    if (needs_grad) n->backward = std::move(backward);
    return n;
  }

  /// Reverse sweep from a scalar root.
  void backward(Node* root) {
    if (root->value.numel() != 1) throw NumericError("backward root must be scalar");
    for (auto& n : nodes_) n.grad.fill(0.0);
    root->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->backward && it->idx <= root->idx) it->backward();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
};

namespace detail {

inline void accumulate(Tensor& dst, const Tensor& src) {
  for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

inline bool any_grad(const Node* a, const Node* b = nullptr) {
  return a->needs_grad || (b && b->needs_grad);
}

}  // namespace detail

inline Node* matmul(Node* a, Node* b) {
  Tensor out = focus::matmul(a->value, b->value);
  const bool ng = detail::any_grad(a, b);
  Node* n = a->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [a, b, n] {
      if (a->needs_grad) detail::accumulate(a->grad, focus::matmul(n->grad, transposed(b->value)));
      if (b->needs_grad) detail::accumulate(b->grad, focus::matmul(transposed(a->value), n->grad));
    };
  return n;
}

inline Node* add(Node* a, Node* b) {
  if (!same_shape(a->value, b->value)) throw NumericError("add shape mismatch");
  Tensor out = a->value;
  detail::accumulate(out, b->value);
  const bool ng = detail::any_grad(a, b);
  Node* n = a->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [a, b, n] {
      if (a->needs_grad) detail::accumulate(a->grad, n->grad);
      if (b->needs_grad) detail::accumulate(b->grad, n->grad);
    };
  return n;
}

inline Node* sub(Node* a, Node* b) {
  if (!same_shape(a->value, b->value)) throw NumericError("sub shape mismatch");
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  const bool ng = detail::any_grad(a, b);
  Node* n = a->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [a, b, n] {
      if (a->needs_grad) detail::accumulate(a->grad, n->grad);
      if (b->needs_grad)
        for (std::int64_t i = 0; i < b->grad.numel(); ++i) b->grad[i] -= n->grad[i];
    };
  return n;
}

inline Node* hadamard(Node* a, Node* b) {
  if (!same_shape(a->value, b->value)) throw NumericError("hadamard shape mismatch");
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  const bool ng = detail::any_grad(a, b);
  Node* n = a->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [a, b, n] {
      if (a->needs_grad)
        for (std::int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += n->grad[i] * b->value[i];
      if (b->needs_grad)
        for (std::int64_t i = 0; i < b->grad.numel(); ++i) b->grad[i] += n->grad[i] * a->value[i];
    };
  return n;
}

inline Node* scale(Node* a, double k) {
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= k;
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, k] {
      for (std::int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += k * n->grad[i];
    };
  return n;
}

/// x * s where s is a one-element node.
inline Node* scale_by(Node* x, Node* s) {
  if (s->value.numel() != 1) throw NumericError("scale_by expects scalar node");
  const double k = s->value[0];
  Tensor out = x->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= k;
  const bool ng = detail::any_grad(x, s);
  Node* n = x->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [x, s, n, k] {
      if (x->needs_grad)
        for (std::int64_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += k * n->grad[i];
      if (s->needs_grad) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < x->value.numel(); ++i) acc += n->grad[i] * x->value[i];
        s->grad[0] += acc;
      }
    };
  return n;
}

/// mat + v broadcast over rows; v has mat.cols() elements.
inline Node* add_rowvec(Node* mat, Node* v) {
  const int r = mat->rows(), c = mat->cols();
  if (v->value.numel() != c) throw NumericError("add_rowvec length mismatch");
  Tensor out = mat->value;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::int64_t>(i) * c + j] += v->value[j];
  const bool ng = detail::any_grad(mat, v);
  Node* n = mat->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [mat, v, n, r, c] {
      if (mat->needs_grad) detail::accumulate(mat->grad, n->grad);
      if (v->needs_grad)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) v->grad[j] += n->grad[static_cast<std::int64_t>(i) * c + j];
    };
  return n;
}

/// mat * v broadcast over rows.
inline Node* mul_rowvec(Node* mat, Node* v) {
  const int r = mat->rows(), c = mat->cols();
  if (v->value.numel() != c) throw NumericError("mul_rowvec length mismatch");
  Tensor out = mat->value;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::int64_t>(i) * c + j] *= v->value[j];
  const bool ng = detail::any_grad(mat, v);
  Node* n = mat->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [mat, v, n, r, c] {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          const std::int64_t k = static_cast<std::int64_t>(i) * c + j;
          if (mat->needs_grad) mat->grad[k] += n->grad[k] * v->value[j];
          if (v->needs_grad) v->grad[j] += n->grad[k] * mat->value[k];
        }
    };
  return n;
}

/// Row i of mat scaled by s[i]; s has mat.rows() elements.
inline Node* scale_rows(Node* mat, Node* s) {
  const int r = mat->rows(), c = mat->cols();
  if (s->value.numel() != r) throw NumericError("scale_rows length mismatch");
  Tensor out = mat->value;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::int64_t>(i) * c + j] *= s->value[i];
  const bool ng = detail::any_grad(mat, s);
  Node* n = mat->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [mat, s, n, r, c] {
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) {
          const std::int64_t k = static_cast<std::int64_t>(i) * c + j;
          if (mat->needs_grad) mat->grad[k] += n->grad[k] * s->value[i];
          acc += n->grad[k] * mat->value[k];
        }
        if (s->needs_grad) s->grad[i] += acc;
      }
    };
  return n;
}

inline Node* transpose(Node* a) {
  Node* n = a->tape->make(transposed(a->value), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n] { detail::accumulate(a->grad, transposed(n->grad)); };
  return n;
}

inline Node* reshape(Node* a, const std::vector<int>& shape) {
  Tensor out = a->value.reshaped(shape);
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n] {
      for (std::int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += n->grad[i];
    };
  return n;
}

inline Node* slice_cols(Node* a, int c0, int c1) {
  const int r = a->rows(), c = a->cols();
  if (c0 < 0 || c1 > c || c0 >= c1) throw NumericError("slice_cols bad range");
  Tensor out({r, c1 - c0});
  for (int i = 0; i < r; ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = a->value[static_cast<std::int64_t>(i) * c + j];
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, r, c, c0, c1] {
      for (int i = 0; i < r; ++i)
        for (int j = c0; j < c1; ++j)
          a->grad[static_cast<std::int64_t>(i) * c + j] += n->grad.at(i, j - c0);
    };
  return n;
}

inline Node* concat_cols(Node* a, Node* b) {
  const int r = a->rows(), ca = a->cols(), cb = b->cols();
  if (b->rows() != r) throw NumericError("concat_cols row mismatch");
  Tensor out({r, ca + cb});
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < ca; ++j) out.at(i, j) = a->value[static_cast<std::int64_t>(i) * ca + j];
    for (int j = 0; j < cb; ++j) out.at(i, ca + j) = b->value[static_cast<std::int64_t>(i) * cb + j];
  }
  const bool ng = detail::any_grad(a, b);
  Node* n = a->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [a, b, n, r, ca, cb] {
      for (int i = 0; i < r; ++i) {
        if (a->needs_grad)
          for (int j = 0; j < ca; ++j)
            a->grad[static_cast<std::int64_t>(i) * ca + j] += n->grad.at(i, j);
        if (b->needs_grad)
          for (int j = 0; j < cb; ++j)
            b->grad[static_cast<std::int64_t>(i) * cb + j] += n->grad.at(i, ca + j);
      }
    };
  return n;
}

/// Numerically stable softmax along each row.
inline Node* row_softmax(Node* a) {
  const int r = a->rows(), c = a->cols();
  Tensor out({r, c});
  for (int i = 0; i < r; ++i) {
    double mx = -1e300;
    for (int j = 0; j < c; ++j) mx = std::max(mx, a->value.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      out.at(i, j) = std::exp(a->value.at(i, j) - mx);
      sum += out.at(i, j);
    }
    for (int j = 0; j < c; ++j) out.at(i, j) /= sum;
  }
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, r, c] {
      for (int i = 0; i < r; ++i) {
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += n->grad.at(i, j) * n->value.at(i, j);
        for (int j = 0; j < c; ++j)
          a->grad.at(i, j) += n->value.at(i, j) * (n->grad.at(i, j) - dot);
      }
    };
  return n;
}

/// Per-row normalization to zero mean, unit variance (no affine part).
/// The small eps keeps the normalized variance within 1e-6 of one for
/// inputs of ordinary scale.
inline Node* layer_norm_rows(Node* a, double eps = 1e-8) {
  const int r = a->rows(), c = a->cols();
  Tensor out({r, c});
  std::vector<double> inv_sd(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += a->value.at(i, j);
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = a->value.at(i, j) - mu;
      var += d * d;
    }
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sd[static_cast<std::size_t>(i)] = inv;
    for (int j = 0; j < c; ++j) out.at(i, j) = (a->value.at(i, j) - mu) * inv;
  }
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, r, c, inv_sd = std::move(inv_sd)] {
      for (int i = 0; i < r; ++i) {
        double gmean = 0.0, gnorm = 0.0;
        for (int j = 0; j < c; ++j) {
          gmean += n->grad.at(i, j);
          gnorm += n->grad.at(i, j) * n->value.at(i, j);
        }
        gmean /= c;
        gnorm /= c;
        for (int j = 0; j < c; ++j)
          a->grad.at(i, j) +=
              inv_sd[static_cast<std::size_t>(i)] *
              (n->grad.at(i, j) - gmean - n->value.at(i, j) * gnorm);
      }
    };
  return n;
}

/// Exact GELU, x/2 * (1 + erf(x/sqrt(2))).
inline Node* gelu(Node* a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double x = out[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n] {
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::int64_t i = 0; i < a->grad.numel(); ++i) {
        const double x = a->value[i];
        const double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                         x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        a->grad[i] += n->grad[i] * d;
      }
    };
  return n;
}

inline Node* sigmoid(Node* a) {
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double x = out[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n] {
      for (std::int64_t i = 0; i < a->grad.numel(); ++i) {
        const double y = n->value[i];
        a->grad[i] += n->grad[i] * y * (1.0 - y);
      }
    };
  return n;
}

/// log(max(x, floor)); gradient is zero where the clamp is active.
inline Node* log_clamped(Node* a, double floor = 1e-12) {
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(std::max(out[i], floor));
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, floor] {
      for (std::int64_t i = 0; i < a->grad.numel(); ++i)
        if (a->value[i] > floor) a->grad[i] += n->grad[i] / a->value[i];
    };
  return n;
}

inline Node* sum_all(Node* a) {
  Node* n = a->tape->make(Tensor::scalar(a->value.sum()), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n] {
      for (std::int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += n->grad[0];
    };
  return n;
}

inline Node* mean_all(Node* a) {
  const double inv = 1.0 / static_cast<double>(a->value.numel());
  Node* n = a->tape->make(Tensor::scalar(a->value.sum() * inv), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, inv] {
      for (std::int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += n->grad[0] * inv;
    };
  return n;
}

/// Column means: N x D -> 1 x D.
inline Node* mean_rows(Node* a) {
  const int r = a->rows(), c = a->cols();
  Tensor out({1, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[j] += a->value.at(i, j);
  for (int j = 0; j < c; ++j) out[j] /= r;
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, r, c] {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) a->grad.at(i, j) += n->grad[j] / r;
    };
  return n;
}

/// Mean over the column range [c0, c1): N x C -> N x 1.
inline Node* mean_cols_range(Node* a, int c0, int c1) {
  const int r = a->rows(), c = a->cols();
  if (c0 < 0 || c1 > c || c0 >= c1) throw NumericError("mean_cols_range bad range");
  const double inv = 1.0 / (c1 - c0);
  Tensor out({r, 1});
  for (int i = 0; i < r; ++i) {
    double acc = 0.0;
    for (int j = c0; j < c1; ++j) acc += a->value.at(i, j);
    out[i] = acc * inv;
  }
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, r, c0, c1, inv] {
      for (int i = 0; i < r; ++i)
        for (int j = c0; j < c1; ++j) a->grad.at(i, j) += n->grad[i] * inv;
    };
  return n;
}

/// Column-wise max: N x C -> 1 x C; ties resolve to the lowest row index.
inline Node* colwise_max(Node* a) {
  const int r = a->rows(), c = a->cols();
  Tensor out({1, c});
  std::vector<int> arg(static_cast<std::size_t>(c), 0);
  for (int j = 0; j < c; ++j) {
    double best = a->value.at(0, j);
    int bi = 0;
    for (int i = 1; i < r; ++i)
      if (a->value.at(i, j) > best) {
        best = a->value.at(i, j);
        bi = i;
      }
    out[j] = best;
    arg[static_cast<std::size_t>(j)] = bi;
  }
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, c, arg = std::move(arg)] {
      for (int j = 0; j < c; ++j) a->grad.at(arg[static_cast<std::size_t>(j)], j) += n->grad[j];
    };
  return n;
}

/// Extract one element as a 1x1 node.
inline Node* pick(Node* a, int i, int j) {
  Node* n = a->tape->make(Tensor::scalar(a->value.at(i, j)), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, i, j] { a->grad.at(i, j) += n->grad[0]; };
  return n;
}

/// 2-D convolution on an HWC tensor with an KhKwCiCo kernel, zero padding.
inline Node* conv2d(Node* in, Node* w, int stride, int pad) {
  if (in->value.ndim() != 3 || w->value.ndim() != 4) throw NumericError("conv2d rank mismatch");
  const int h = in->value.dim(0), wd = in->value.dim(1), ci = in->value.dim(2);
  const int kh = w->value.dim(0), kw = w->value.dim(1), co = w->value.dim(3);
  if (w->value.dim(2) != ci) throw NumericError("conv2d channel mismatch");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw NumericError("conv2d output empty");

  auto widx = [kw, ci, co](int ky, int kx, int c_in, int c_out) {
    return ((static_cast<std::int64_t>(ky) * kw + kx) * ci + c_in) * co + c_out;
  };
  Tensor out({oh, ow, co});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= wd) continue;
          for (int c_in = 0; c_in < ci; ++c_in) {
            const double v = in->value.at3(iy, ix, c_in);
            if (v == 0.0) continue;
            for (int c_out = 0; c_out < co; ++c_out)
              out.at3(oy, ox, c_out) += v * w->value[widx(ky, kx, c_in, c_out)];
          }
        }
      }
  const bool ng = detail::any_grad(in, w);
  Node* n = in->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [in, w, n, stride, pad, h, wd, ci, kh, kw, co, widx] {
      const int oh2 = n->value.dim(0), ow2 = n->value.dim(1);
      for (int oy = 0; oy < oh2; ++oy)
        for (int ox = 0; ox < ow2; ++ox)
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= wd) continue;
              for (int c_in = 0; c_in < ci; ++c_in)
                for (int c_out = 0; c_out < co; ++c_out) {
                  const double g = n->grad.at3(oy, ox, c_out);
                  if (in->needs_grad)
                    in->grad.at3(iy, ix, c_in) += g * w->value[widx(ky, kx, c_in, c_out)];
                  if (w->needs_grad)
                    w->grad[widx(ky, kx, c_in, c_out)] += g * in->value.at3(iy, ix, c_in);
                }
            }
          }
    };
  return n;
}

/// x + b broadcast along the channel (last) axis of an HWC tensor.
inline Node* add_chanvec(Node* x, Node* b) {
  if (x->value.ndim() != 3) throw NumericError("add_chanvec expects rank-3");
  const int c = x->value.dim(2);
  if (b->value.numel() != c) throw NumericError("add_chanvec length mismatch");
  Tensor out = x->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i % c];
  const bool ng = detail::any_grad(x, b);
  Node* n = x->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [x, b, n, c] {
      if (x->needs_grad) detail::accumulate(x->grad, n->grad);
      if (b->needs_grad)
        for (std::int64_t i = 0; i < n->grad.numel(); ++i) b->grad[i % c] += n->grad[i];
    };
  return n;
}

inline Node* mul_chanvec(Node* x, Node* g) {
  if (x->value.ndim() != 3) throw NumericError("mul_chanvec expects rank-3");
  const int c = x->value.dim(2);
  if (g->value.numel() != c) throw NumericError("mul_chanvec length mismatch");
  Tensor out = x->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= g->value[i % c];
  const bool ng = detail::any_grad(x, g);
  Node* n = x->tape->make(std::move(out), ng, nullptr);
  if (ng)
    n->backward = [x, g, n, c] {
      for (std::int64_t i = 0; i < n->grad.numel(); ++i) {
        if (x->needs_grad) x->grad[i] += n->grad[i] * g->value[i % c];
        if (g->needs_grad) g->grad[i % c] += n->grad[i] * x->value[i];
      }
    };
  return n;
}

/// Whole-tensor normalization to zero mean, unit variance; the single-group
/// case of group normalization (per sample, no affine part).
inline Node* norm_all(Node* a, double eps = 1e-5) {
  const std::int64_t m = a->value.numel();
  double mu = 0.0;
  for (std::int64_t i = 0; i < m; ++i) mu += a->value[i];
  mu /= static_cast<double>(m);
  double var = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    const double d = a->value[i] - mu;
    var += d * d;
  }
  var /= static_cast<double>(m);
  const double inv = 1.0 / std::sqrt(var + eps);
  Tensor out = a->value;
  for (std::int64_t i = 0; i < m; ++i) out[i] = (out[i] - mu) * inv;
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, m, inv] {
      double gmean = 0.0, gnorm = 0.0;
      for (std::int64_t i = 0; i < m; ++i) {
        gmean += n->grad[i];
        gnorm += n->grad[i] * n->value[i];
      }
      gmean /= static_cast<double>(m);
      gnorm /= static_cast<double>(m);
      for (std::int64_t i = 0; i < m; ++i)
        a->grad[i] += inv * (n->grad[i] - gmean - n->value[i] * gnorm);
    };
  return n;
}

/// Corner-aligned bilinear resize of an HWC tensor.
inline Node* upsample_bilinear(Node* a, int oh, int ow) {
  if (a->value.ndim() != 3) throw NumericError("upsample_bilinear expects rank-3");
  const int h = a->value.dim(0), w = a->value.dim(1), c = a->value.dim(2);
  auto src_coord = [](int i, int out_n, int in_n) {
    if (out_n == 1) return (in_n - 1) / 2.0;
    return static_cast<double>(i) * (in_n - 1) / (out_n - 1);
  };
  struct Wt {
    int y0, y1, x0, x1;
    double w00, w01, w10, w11;
  };
  std::vector<Wt> wts(static_cast<std::size_t>(oh) * ow);
  for (int i = 0; i < oh; ++i) {
    const double fy = src_coord(i, oh, h);
    const int y0 = std::min(static_cast<int>(fy), h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (int j = 0; j < ow; ++j) {
      const double fx = src_coord(j, ow, w);
      const int x0 = std::min(static_cast<int>(fx), w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      wts[static_cast<std::size_t>(i) * ow + j] = {
          y0, y1, x0, x1, (1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx};
    }
  }
  Tensor out({oh, ow, c});
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      const Wt& t = wts[static_cast<std::size_t>(i) * ow + j];
      for (int k = 0; k < c; ++k)
        out.at3(i, j, k) = t.w00 * a->value.at3(t.y0, t.x0, k) + t.w01 * a->value.at3(t.y0, t.x1, k) +
                           t.w10 * a->value.at3(t.y1, t.x0, k) + t.w11 * a->value.at3(t.y1, t.x1, k);
    }
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, oh, ow, c, wts = std::move(wts)] {
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const Wt& t = wts[static_cast<std::size_t>(i) * ow + j];
          for (int k = 0; k < c; ++k) {
            const double g = n->grad.at3(i, j, k);
            a->grad.at3(t.y0, t.x0, k) += t.w00 * g;
            a->grad.at3(t.y0, t.x1, k) += t.w01 * g;
            a->grad.at3(t.y1, t.x0, k) += t.w10 * g;
            a->grad.at3(t.y1, t.x1, k) += t.w11 * g;
          }
        }
    };
  return n;
}

/// HWC -> 1 x C spatial mean.
inline Node* global_avg_pool(Node* a) {
  if (a->value.ndim() != 3) throw NumericError("global_avg_pool expects rank-3");
  const int h = a->value.dim(0), w = a->value.dim(1), c = a->value.dim(2);
  const double inv = 1.0 / (static_cast<double>(h) * w);
  Tensor out({1, c});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < c; ++k) out[k] += a->value.at3(i, j, k);
  for (int k = 0; k < c; ++k) out[k] *= inv;
  Node* n = a->tape->make(std::move(out), a->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [a, n, h, w, c, inv] {
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          for (int k = 0; k < c; ++k) a->grad.at3(i, j, k) += n->grad[k] * inv;
    };
  return n;
}

/// Forward takes the given hard values; backward hands the incoming gradient
/// to `soft` unchanged (straight-through estimator).
inline Node* straight_through(Node* soft, Tensor hard) {
  if (!same_shape(soft->value, hard)) throw NumericError("straight_through shape mismatch");
  Node* n = soft->tape->make(std::move(hard), soft->needs_grad, nullptr);
  if (n->needs_grad)
    n->backward = [soft, n] { detail::accumulate(soft->grad, n->grad); };
  return n;
}

/// Mean binary cross-entropy against a constant target, computed from logits
/// in the usual overflow-safe form.
inline Node* bce_with_logits(Node* logits, const Tensor& target) {
  if (!same_shape(logits->value, target)) throw NumericError("bce_with_logits shape mismatch");
  const std::int64_t m = logits->value.numel();
  double acc = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    const double z = logits->value[i], t = target[i];
    acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
  }
  Node* n = logits->tape->make(Tensor::scalar(acc / static_cast<double>(m)), logits->needs_grad,
                               nullptr);
  if (n->needs_grad)
    n->backward = [logits, n, target, m] {
      for (std::int64_t i = 0; i < m; ++i) {
        const double z = logits->value[i];
        const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        logits->grad[i] += n->grad[0] * (s - target[i]) / static_cast<double>(m);
      }
    };
  return n;
}

}  // namespace focus::ad
