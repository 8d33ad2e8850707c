#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "focus/rng.hpp"
#include "focus/tensor.hpp"

namespace focus::imaging {

/// An RGB image in [0,1] with a binary class label. Fake synthetic samples
/// carry the ground-truth mask of the spliced region (1 = manipulated).
struct ImageSample {
  std::string id;
  Tensor pixels;  // H x W x 3
  int label = 0;  // 0 real, 1 fake
  Tensor gt_mask; // H x W, empty for real samples

  bool has_mask() const { return !gt_mask.empty(); }
  int height() const { return pixels.dim(0); }
  int width() const { return pixels.dim(1); }
};

/// Parameters of the paired-forgery generator.
struct SyntheticSpec {
  int image_size = 32;
  double patch_area_frac = 0.08;   // spliced area as a fraction of the image
  double global_noise_sigma = 0.05;
  double blend_width = 2.0;        // feathering band across the splice boundary
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 16) throw ConfigError("image_size must be >= 16");
    if (patch_area_frac < 0.05 || patch_area_frac > 0.5)
      throw ConfigError("patch_area_frac must be in [0.05, 0.5]");
    if (global_noise_sigma < 0.0 || global_noise_sigma > 0.2)
      throw ConfigError("global_noise_sigma must be in [0, 0.2]");
    if (blend_width < 0.0) throw ConfigError("blend_width must be >= 0");
  }
};

namespace detail {

/// Single-octave value noise in [-1,1]: a (cells+1)^2 lattice of uniform
/// values, smoothstep-interpolated to pixel resolution.
inline Tensor value_noise(int size, int cells, Rng& rng) {
  const int n = cells + 1;
  std::vector<double> lattice(static_cast<std::size_t>(n) * n);
  for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  Tensor out({size, size});
  for (int y = 0; y < size; ++y) {
    const double fy = static_cast<double>(y) * cells / size;
    const int iy = std::min(static_cast<int>(fy), cells - 1);
    double ty = fy - iy;
    ty = ty * ty * (3.0 - 2.0 * ty);
    for (int x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) * cells / size;
      const int ix = std::min(static_cast<int>(fx), cells - 1);
      double tx = fx - ix;
      tx = tx * tx * (3.0 - 2.0 * tx);
      const double v00 = lattice[static_cast<std::size_t>(iy) * n + ix];
      const double v01 = lattice[static_cast<std::size_t>(iy) * n + ix + 1];
      const double v10 = lattice[static_cast<std::size_t>(iy + 1) * n + ix];
      const double v11 = lattice[static_cast<std::size_t>(iy + 1) * n + ix + 1];
      out.at(y, x) = (v00 * (1 - tx) + v01 * tx) * (1 - ty) + (v10 * (1 - tx) + v11 * tx) * ty;
    }
  }
  return out;
}

inline Tensor octave_noise(int size, int base_cells, int octaves, Rng& rng) {
  Tensor acc({size, size});
  double amp = 1.0, norm = 0.0;
  for (int o = 0; o < octaves; ++o) {
    const int cells = std::min(base_cells << o, size);
    Tensor layer = value_noise(size, cells, rng);
    for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += amp * layer[i];
    norm += amp;
    amp *= 0.5;
  }
  for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] /= norm;
  return acc;
}

struct TexturePalette {
  double mid[3];
  double span;
  int base_cells;
};

/// Procedural texture: a shared structure field plus mild per-channel chroma
/// and pixel-level grain. Chroma and grain are kept small so the channel
/// balance of real images stays tight; the splice signature lives in the
/// channel balance, not in luminance detail.
inline Tensor texture(int size, const TexturePalette& pal, Rng& rng) {
  Rng struct_rng = rng.child(1);
  Tensor structure = octave_noise(size, pal.base_cells, 3, struct_rng);
  Tensor chroma[3];
  for (int c = 0; c < 3; ++c) {
    Rng chroma_rng = rng.child(2 + static_cast<std::uint64_t>(c));
    chroma[c] = octave_noise(size, 2, 2, chroma_rng);
  }
  Rng grain_rng = rng.child(9);
  constexpr double kGrain = 0.02;
  constexpr double kChroma = 0.03;
  Tensor img({size, size, 3});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = pal.mid[c] + pal.span * structure.at(y, x) + kChroma * chroma[c].at(y, x) +
                   grain_rng.uniform(-kGrain, kGrain);
        img.at3(y, x, c) = std::clamp(v, 0.05, 0.95);
      }
  return img;
}

struct SpliceShape {
  bool ellipse;
  double cx, cy;   // center in pixel-center coordinates
  double half_w, half_h;

  /// Positive inside the shape, negative outside; approximately the distance
  /// to the boundary in pixels.
  double inside_distance(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    if (!ellipse)
      return std::min(half_w - std::fabs(dx), half_h - std::fabs(dy));
    const double rho = std::sqrt((dx / half_w) * (dx / half_w) + (dy / half_h) * (dy / half_h));
    return (1.0 - rho) * std::min(half_w, half_h);
  }
};

inline SpliceShape pick_shape(const SyntheticSpec& spec, Rng& rng) {
  const int size = spec.image_size;
  const double area = spec.patch_area_frac * size * size;
  SpliceShape s{};
  s.ellipse = rng.uniform01() < 0.5;
  const double aspect = rng.uniform(0.6, 1.6667);
  constexpr double pi = std::numbers::pi;
  double w, h;
  if (s.ellipse) {
    w = 2.0 * std::sqrt(area * aspect / pi);
    h = 4.0 * area / (pi * w);
  } else {
    w = std::sqrt(area * aspect);
    h = area / w;
  }
  const double max_side = size - 2.0;
  if (w > max_side) {
    w = max_side;
    h = s.ellipse ? 4.0 * area / (pi * w) : area / w;
  }
  if (h > max_side) {
    h = max_side;
    w = s.ellipse ? 4.0 * area / (pi * h) : area / h;
  }
  s.half_w = w / 2.0;
  s.half_h = h / 2.0;
  s.cx = rng.uniform(s.half_w + 1.0, size - 1.0 - s.half_w);
  s.cy = rng.uniform(s.half_h + 1.0, size - 1.0 - s.half_h);
  return s;
}

}  // namespace detail

/// Deterministic paired sample: a procedurally textured real image and a
/// fake built from it by splicing a re-tinted donor region into one place,
/// feathering the boundary, and adding global noise to every fake pixel.
/// The donor keeps the real structure but applies a luminance-balanced
/// channel shift drawn from its own stream: the shift cancels in the channel
/// mean, so per-pixel differences stay at the additive-noise scale, while the
/// channel balance inside the splice sits far outside the near-gray range of
/// the real textures. Comparison maps that threshold raw differences mark
/// the global noise instead of the splice.
inline std::pair<ImageSample, ImageSample> synth_pair(const SyntheticSpec& spec, int index) {
  spec.validate();
  const int size = spec.image_size;
  Rng sample_rng = Rng(spec.seed).child(static_cast<std::uint64_t>(index));

  Rng pal_rng = sample_rng.child(11);
  detail::TexturePalette real_pal{};
  const double gray = pal_rng.uniform(0.35, 0.65);
  for (double& m : real_pal.mid) m = gray + pal_rng.uniform(-0.025, 0.025);
  real_pal.span = pal_rng.uniform(0.16, 0.24);
  real_pal.base_cells = 3;

  Rng real_rng = sample_rng.child(12);
  Tensor real_px = detail::texture(size, real_pal, real_rng);

  // Per-capture sensor noise on the real, shared across channels like the
  // fake-side noise, with a level that straddles the fake-side sigma. The
  // fake is built from the noisy real, so fake-minus-real differences stay
  // pure splice-plus-noise, but absolute noise energy no longer separates
  // the classes and training pressure stays on the splice signature.
  if (spec.global_noise_sigma > 0.0) {
    Rng capture_rng = sample_rng.child(16);
    const double sigma_r =
        std::min(spec.global_noise_sigma * std::exp(capture_rng.normal(0.0, 0.35)), 0.15);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double n = capture_rng.normal(0.0, sigma_r);
        for (int c = 0; c < 3; ++c)
          real_px.at3(y, x, c) = std::clamp(real_px.at3(y, x, c) + n, 0.0, 1.0);
      }
  }

  Rng donor_rng = sample_rng.child(13);
  const int hot = static_cast<int>(donor_rng.below(3));
  const double s = (donor_rng.uniform01() < 0.5 ? -1.0 : 1.0) * donor_rng.uniform(0.10, 0.12);
  double shift[3];
  for (int c = 0; c < 3; ++c) shift[c] = (c == hot) ? s : -0.5 * s;
  Tensor donor_px({size, size, 3});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        donor_px.at3(y, x, c) = std::clamp(real_px.at3(y, x, c) + shift[c], 0.02, 0.98);

  Rng geo_rng = sample_rng.child(14);
  const detail::SpliceShape shape = detail::pick_shape(spec, geo_rng);

  Tensor fake_px = real_px;
  Tensor mask({size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double sd = shape.inside_distance(x + 0.5, y + 0.5);
      double w;
      if (spec.blend_width > 0.0)
        w = std::clamp(0.5 + sd / spec.blend_width, 0.0, 1.0);
      else
        w = sd >= 0.0 ? 1.0 : 0.0;
      mask.at(y, x) = sd >= 0.0 ? 1.0 : 0.0;
      if (w > 0.0)
        for (int c = 0; c < 3; ++c)
          fake_px.at3(y, x, c) = (1.0 - w) * real_px.at3(y, x, c) + w * donor_px.at3(y, x, c);
    }

  // One draw per pixel, shared across channels: codec-style luminance noise.
  Rng noise_rng = sample_rng.child(15);
  if (spec.global_noise_sigma > 0.0) {
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double n = noise_rng.normal(0.0, spec.global_noise_sigma);
        for (int c = 0; c < 3; ++c)
          fake_px.at3(y, x, c) = std::clamp(fake_px.at3(y, x, c) + n, 0.0, 1.0);
      }
  }

  char idbuf[32];
  std::snprintf(idbuf, sizeof(idbuf), "%06d", index);
  ImageSample real{std::string(idbuf) + "_real", std::move(real_px), 0, Tensor{}};
  ImageSample fake{std::string(idbuf) + "_fake", std::move(fake_px), 1, std::move(mask)};
  return {std::move(real), std::move(fake)};
}

/// Sobel gradient magnitude per channel, replicate-padded, scaled by the
/// maximum attainable response (4*sqrt(2) for inputs in [0,1]).
inline Tensor sobel_map(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(2) != 3) throw InputError("sobel_map expects HxWx3");
  const int h = image.dim(0), w = image.dim(1);
  const double norm = 4.0 * std::sqrt(2.0);
  Tensor out({h, w, 3});
  auto px = [&](int y, int x, int c) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return image.at3(y, x, c);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double gx = (px(y - 1, x + 1, c) - px(y - 1, x - 1, c)) +
                          2.0 * (px(y, x + 1, c) - px(y, x - 1, c)) +
                          (px(y + 1, x + 1, c) - px(y + 1, x - 1, c));
        const double gy = (px(y + 1, x - 1, c) - px(y - 1, x - 1, c)) +
                          2.0 * (px(y + 1, x, c) - px(y - 1, x, c)) +
                          (px(y + 1, x + 1, c) - px(y - 1, x + 1, c));
        out.at3(y, x, c) = std::sqrt(gx * gx + gy * gy) / norm;
      }
  return out;
}

/// Per-pixel mean over channels of |fake - real|. With a threshold, values
/// below it are zeroed and values at or above it are kept as-is.
inline Tensor pixel_diff_map(const Tensor& real, const Tensor& fake,
                             std::optional<double> threshold = std::nullopt) {
  if (!same_shape(real, fake)) throw InputError("pixel_diff_map shape mismatch");
  if (real.ndim() != 3 || real.dim(2) != 3) throw InputError("pixel_diff_map expects HxWx3");
  const int h = real.dim(0), w = real.dim(1);
  Tensor out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) d += std::fabs(fake.at3(y, x, c) - real.at3(y, x, c));
      d /= 3.0;
      if (threshold && d < *threshold) d = 0.0;
      out.at(y, x) = d;
    }
  return out;
}

inline Tensor luminance(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(2) != 3) throw InputError("luminance expects HxWx3");
  const int h = image.dim(0), w = image.dim(1);
  Tensor out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.at(y, x) =
          0.299 * image.at3(y, x, 0) + 0.587 * image.at3(y, x, 1) + 0.114 * image.at3(y, x, 2);
  return out;
}

namespace detail {

inline std::vector<double> gaussian_window(int radius, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Separable filtering with replicate borders; equivalent to clamping window
/// indices at the edges.
inline Tensor gauss_filter(const Tensor& in, const std::vector<double>& k) {
  const int h = in.dim(0), w = in.dim(1);
  const int r = static_cast<int>(k.size() / 2);
  Tensor tmp({h, w}), out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i)
        acc += k[static_cast<std::size_t>(i + r)] * in.at(y, std::clamp(x + i, 0, w - 1));
      tmp.at(y, x) = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i)
        acc += k[static_cast<std::size_t>(i + r)] * tmp.at(std::clamp(y + i, 0, h - 1), x);
      out.at(y, x) = acc;
    }
  return out;
}

}  // namespace detail

/// Windowed SSIM on luminance (11x11 Gaussian, sigma 1.5, C1=0.01^2,
/// C2=0.03^2), mapped to a manipulation map as clip((1 - ssim) / 2, 0, 1)
/// so untouched regions score 0.
inline Tensor ssim_map(const Tensor& real, const Tensor& fake) {
  if (!same_shape(real, fake)) throw InputError("ssim_map shape mismatch");
  if (real.dim(0) < 11 || real.dim(1) < 11)
    throw InputError("ssim_map requires images at least 11x11");
  const Tensor x = luminance(real);
  const Tensor y = luminance(fake);
  const int h = x.dim(0), w = x.dim(1);
  Tensor xx({h, w}), yy({h, w}), xy({h, w});
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto k = detail::gaussian_window(5, 1.5);
  const Tensor mu_x = detail::gauss_filter(x, k);
  const Tensor mu_y = detail::gauss_filter(y, k);
  const Tensor e_xx = detail::gauss_filter(xx, k);
  const Tensor e_yy = detail::gauss_filter(yy, k);
  const Tensor e_xy = detail::gauss_filter(xy, k);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Tensor out({h, w});
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double mx = mu_x[i], my = mu_y[i];
    const double vx = e_xx[i] - mx * mx;
    const double vy = e_yy[i] - my * my;
    const double cxy = e_xy[i] - mx * my;
    const double ssim = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
                        ((mx * mx + my * my + c1) * (vx + vy + c2));
    out[i] = std::clamp((1.0 - ssim) / 2.0, 0.0, 1.0);
  }
  return out;
}

/// Corner-aligned bilinear resampling of a rank-2 map.
inline Tensor resize_bilinear(const Tensor& map, int out_h, int out_w) {
  if (map.ndim() != 2) throw InputError("resize_bilinear expects rank-2 map");
  if (out_h < 1 || out_w < 1) throw InputError("resize_bilinear output must be at least 1x1");
  const int h = map.dim(0), w = map.dim(1);
  Tensor out({out_h, out_w});
  auto src_coord = [](int i, int out_n, int in_n) {
    if (out_n == 1) return (in_n - 1) / 2.0;
    return static_cast<double>(i) * (in_n - 1) / (out_n - 1);
  };
  for (int i = 0; i < out_h; ++i) {
    const double fy = src_coord(i, out_h, h);
    const int y0 = std::min(static_cast<int>(fy), h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (int j = 0; j < out_w; ++j) {
      const double fx = src_coord(j, out_w, w);
      const int x0 = std::min(static_cast<int>(fx), w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      out.at(i, j) = (map.at(y0, x0) * (1 - tx) + map.at(y0, x1) * tx) * (1 - ty) +
                     (map.at(y1, x0) * (1 - tx) + map.at(y1, x1) * tx) * ty;
    }
  }
  return out;
}

}  // namespace focus::imaging
