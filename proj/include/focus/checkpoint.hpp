#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "focus/model.hpp"
#include "focus/rng.hpp"
#include "focus/tensor.hpp"

namespace focus::checkpoint {

constexpr char kMagic[6] = {'F', 'O', 'C', 'U', 'S', '1'};

struct Checkpoint {
  model::TrainConfig config;
  std::int64_t iteration = 0;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  /// A model carrying these weights. Names and shapes must match what the
  /// stored config constructs, which guards against corrupted files.
  model::FocusModel restore() const {
    model::FocusModel m(config);
    if (names.size() != m.params().count())
      throw InputError("checkpoint parameter count does not match its config");
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] != m.params().names()[i])
        throw InputError("checkpoint parameter order mismatch at " + names[i]);
      Tensor& dst = m.params().at(names[i]);
      if (!same_shape(dst, tensors[i]))
        throw InputError("checkpoint parameter shape mismatch at " + names[i]);
      dst = tensors[i];
    }
    return m;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t v = 0;
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path) : b_(bytes), path_(path) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(uint_n(4)); }
  std::uint64_t u64() { return uint_n(8); }

  double f64() {
    const std::uint64_t v = uint_n(8);
    double d = 0.0;
    std::memcpy(&d, &v, 8);
    return d;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  std::uint64_t uint_n(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  void need(std::size_t n) {
    if (pos_ + n > b_.size()) throw InputError("truncated checkpoint: " + path_);
  }

  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace detail

/// Serialized layout: magic, JSON header (config + iteration), parameter
/// manifest (name, shape, element offset), then all values as 64-bit
/// little-endian floats in manifest order.
inline std::string encode(const model::TrainConfig& config, const model::ParamStore& params,
                          std::int64_t iteration) {
  std::string out(kMagic, sizeof kMagic);
  nlohmann::json header{{"config", config}, {"iteration", iteration}};
  const std::string hj = header.dump();
  detail::put_u64(out, hj.size());
  out += hj;

  detail::put_u64(out, params.count());
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.count(); ++i) {
    const Tensor& t = params.value(i);
    const std::string& name = params.names()[i];
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (int k = 0; k < t.ndim(); ++k) detail::put_u32(out, static_cast<std::uint32_t>(t.dim(k)));
    detail::put_u64(out, offset);
    offset += static_cast<std::uint64_t>(t.numel());
  }
  for (std::size_t i = 0; i < params.count(); ++i) {
    const Tensor& t = params.value(i);
    for (std::int64_t k = 0; k < t.numel(); ++k) detail::put_f64(out, t[k]);
  }
  return out;
}

inline Checkpoint decode(const std::string& bytes, const std::string& origin) {
  detail::Reader r(bytes, origin);
  if (r.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic))
    throw InputError("not a checkpoint file: " + origin);

  const std::uint64_t hlen = r.u64();
  nlohmann::json header = nlohmann::json::parse(r.bytes(hlen), nullptr, false);
  if (header.is_discarded() || !header.contains("config"))
    throw InputError("corrupt checkpoint header: " + origin);

  Checkpoint ck;
  ck.config = header.at("config").get<model::TrainConfig>();
  ck.iteration = header.value("iteration", std::int64_t{0});

  const std::uint64_t count = r.u64();
  std::vector<std::vector<int>> shapes;
  std::uint64_t expect_offset = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t nlen = r.u32();
    ck.names.push_back(r.bytes(nlen));
    const std::uint32_t ndim = r.u32();
    if (ndim > 4) throw InputError("corrupt checkpoint manifest: " + origin);
    std::vector<int> shape;
    for (std::uint32_t k = 0; k < ndim; ++k) shape.push_back(static_cast<int>(r.u32()));
    const std::uint64_t offset = r.u64();
    if (offset != expect_offset) throw InputError("corrupt checkpoint offsets: " + origin);
    expect_offset += static_cast<std::uint64_t>(Tensor::numel_of(shape));
    shapes.push_back(std::move(shape));
  }
  for (auto& shape : shapes) {
    Tensor t(shape);
    for (std::int64_t k = 0; k < t.numel(); ++k) t[k] = r.f64();
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw InputError("trailing bytes in checkpoint: " + origin);
  return ck;
}

inline void save(const std::filesystem::path& path, const model::TrainConfig& config,
                 const model::ParamStore& params, std::int64_t iteration) {
  detail::atomic_write(path, encode(config, params, iteration));
}

inline Checkpoint load(const std::filesystem::path& path) {
  return decode(detail::read_file(path), path.string());
}

/// Content hash of the serialized file, as fixed-width hex for sidecars.
inline std::string file_hash(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  const std::uint64_t h = fnv1a64(bytes.data(), bytes.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace focus::checkpoint
