#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "focus/tensor.hpp"

namespace focus {

namespace detail {

inline int next_pnm_int(std::istream& in) {
  // Skips whitespace and '#' comments between header fields.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF) throw IoError("truncated PNM header");
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

}  // namespace detail

/// Writes bytes to a temporary sibling and renames into place, so readers
/// never observe a partially written file.
inline void atomic_write_file(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("rename failed: " + target.string() + ": " + ec.message());
}

inline std::uint8_t quantize_u8(double v) {
  double q = std::lround(255.0 * v);
  if (q < 0) q = 0;
  if (q > 255) q = 255;
  return static_cast<std::uint8_t>(q);
}

/// H x W x 3 image in [0,1] -> binary PPM (P6, 8-bit), values round(255*v).
inline void write_ppm(const std::string& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(2) != 3) throw InputError("write_ppm expects HxWx3");
  const int h = image.dim(0), w = image.dim(1);
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  bytes.reserve(bytes.size() + static_cast<std::size_t>(h) * w * 3);
  for (std::int64_t i = 0; i < image.numel(); ++i)
    bytes.push_back(static_cast<char>(quantize_u8(image[i])));
  atomic_write_file(path, bytes);
}

inline Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw IoError("not a P6 PPM: " + path);
  const int w = detail::next_pnm_int(in);
  const int h = detail::next_pnm_int(in);
  const int maxval = detail::next_pnm_int(in);
  if (maxval != 255) throw IoError("unsupported PPM maxval in " + path);
  std::vector<char> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError("truncated PPM: " + path);
  Tensor image({h, w, 3});
  for (std::size_t i = 0; i < raw.size(); ++i)
    image[static_cast<std::int64_t>(i)] = static_cast<std::uint8_t>(raw[i]) / 255.0;
  return image;
}

/// h x w map in [0,1] -> binary PGM (P5, 8-bit).
inline void write_pgm(const std::string& path, const Tensor& map) {
  if (map.ndim() != 2) throw InputError("write_pgm expects rank-2 map");
  const int h = map.dim(0), w = map.dim(1);
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::int64_t i = 0; i < map.numel(); ++i)
    bytes.push_back(static_cast<char>(quantize_u8(map[i])));
  atomic_write_file(path, bytes);
}

inline Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5') throw IoError("not a P5 PGM: " + path);
  const int w = detail::next_pnm_int(in);
  const int h = detail::next_pnm_int(in);
  const int maxval = detail::next_pnm_int(in);
  if (maxval != 255) throw IoError("unsupported PGM maxval in " + path);
  std::vector<char> raw(static_cast<std::size_t>(w) * h);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError("truncated PGM: " + path);
  Tensor map({h, w});
  for (std::size_t i = 0; i < raw.size(); ++i)
    map[static_cast<std::int64_t>(i)] = static_cast<std::uint8_t>(raw[i]) / 255.0;
  return map;
}

}  // namespace focus
