#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "focus/image_io.hpp"
#include "focus/imaging.hpp"
#include "focus/tensor.hpp"

namespace focus::data {

/// One row of index.json. Real samples leave fake_file and mask_file empty;
/// fake samples point back at their paired real image via real_file.
struct IndexEntry {
  std::string id;
  int label = 0;
  std::string real_file;
  std::string fake_file;
  std::string mask_file;
};

inline void to_json(nlohmann::json& j, const IndexEntry& e) {
  j = nlohmann::json{{"id", e.id},
                     {"label", e.label},
                     {"real_file", e.real_file},
                     {"fake_file", e.fake_file},
                     {"mask_file", e.mask_file}};
}

inline void from_json(const nlohmann::json& j, IndexEntry& e) {
  j.at("id").get_to(e.id);
  j.at("label").get_to(e.label);
  j.at("real_file").get_to(e.real_file);
  j.at("fake_file").get_to(e.fake_file);
  j.at("mask_file").get_to(e.mask_file);
}

inline std::vector<std::uint8_t> quantize_image(const Tensor& t) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) out[static_cast<std::size_t>(i)] = quantize_u8(t[i]);
  return out;
}

/// In-memory dataset. Pixels are kept as the 8-bit values that PPM/PGM files
/// store, so samples are identical whether the set was built in memory or
/// round-tripped through disk.
struct Dataset {
  std::vector<IndexEntry> entries;
  int height = 0;
  int width = 0;
  std::vector<std::vector<std::uint8_t>> images;  // H*W*3 per entry
  std::vector<std::vector<std::uint8_t>> masks;   // H*W per fake entry, else empty

  std::size_t size() const { return entries.size(); }

  imaging::ImageSample sample(std::size_t i) const {
    if (i >= entries.size()) throw InputError("dataset sample index out of range");
    const IndexEntry& e = entries[i];
    imaging::ImageSample s;
    s.id = e.id;
    s.label = e.label;
    s.pixels = Tensor({height, width, 3});
    const auto& img = images[i];
    for (std::int64_t k = 0; k < s.pixels.numel(); ++k)
      s.pixels[k] = img[static_cast<std::size_t>(k)] / 255.0;
    if (!masks[i].empty()) {
      s.gt_mask = Tensor({height, width});
      for (std::int64_t k = 0; k < s.gt_mask.numel(); ++k)
        s.gt_mask[k] = masks[i][static_cast<std::size_t>(k)] >= 128 ? 1.0 : 0.0;
    }
    return s;
  }

  /// For a fake entry, the index of its paired real entry; -1 if absent.
  int pair_partner(std::size_t i) const {
    const IndexEntry& e = entries[i];
    if (e.label != 1 || e.real_file.empty()) return -1;
    auto it = index_by_file_.find(e.real_file);
    return it == index_by_file_.end() ? -1 : it->second;
  }

  void rebuild_lookup() {
    index_by_file_.clear();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const IndexEntry& e = entries[i];
      const std::string& f = e.label == 1 ? e.fake_file : e.real_file;
      if (!f.empty()) index_by_file_[f] = static_cast<int>(i);
    }
  }

 private:
  std::unordered_map<std::string, int> index_by_file_;
};

namespace detail {

struct PairFiles {
  std::string real_file, fake_file, mask_file;
};

inline PairFiles pair_files(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  const std::string stem(buf);
  return {stem + "_real.ppm", stem + "_fake.ppm", stem + "_mask.pgm"};
}

inline std::pair<IndexEntry, IndexEntry> pair_entries(const imaging::ImageSample& real,
                                                      const imaging::ImageSample& fake,
                                                      const PairFiles& f) {
  IndexEntry re{real.id, 0, f.real_file, "", ""};
  IndexEntry fe{fake.id, 1, f.real_file, f.fake_file, f.mask_file};
  return {std::move(re), std::move(fe)};
}

}  // namespace detail

inline Dataset make_synthetic_dataset(const imaging::SyntheticSpec& spec, int count) {
  if (count < 1) throw ConfigError("dataset pair count must be >= 1");
  Dataset ds;
  ds.height = ds.width = spec.image_size;
  ds.entries.reserve(static_cast<std::size_t>(count) * 2);
  ds.images.reserve(static_cast<std::size_t>(count) * 2);
  ds.masks.reserve(static_cast<std::size_t>(count) * 2);
  for (int i = 0; i < count; ++i) {
    auto [real, fake] = imaging::synth_pair(spec, i);
    auto [re, fe] = detail::pair_entries(real, fake, detail::pair_files(i));
    ds.entries.push_back(std::move(re));
    ds.images.push_back(quantize_image(real.pixels));
    ds.masks.emplace_back();
    ds.entries.push_back(std::move(fe));
    ds.images.push_back(quantize_image(fake.pixels));
    ds.masks.push_back(quantize_image(fake.gt_mask));
  }
  ds.rebuild_lookup();
  return ds;
}

/// Generates `count` pairs into `dir`: PPM images, PGM masks, and index.json.
inline void write_dataset(const std::filesystem::path& dir, const imaging::SyntheticSpec& spec,
                          int count) {
  if (count < 1) throw ConfigError("dataset pair count must be >= 1");
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (int i = 0; i < count; ++i) {
    auto [real, fake] = imaging::synth_pair(spec, i);
    const auto f = detail::pair_files(i);
    write_ppm(dir / f.real_file, real.pixels);
    write_ppm(dir / f.fake_file, fake.pixels);
    write_pgm(dir / f.mask_file, fake.gt_mask);
    auto [re, fe] = detail::pair_entries(real, fake, f);
    index.push_back(re);
    index.push_back(fe);
  }
  atomic_write_file(dir / "index.json", index.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  std::ifstream in(index_path);
  if (!in) throw IoError("cannot open " + index_path.string());
  nlohmann::json index;
  try {
    in >> index;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed " + index_path.string() + ": " + e.what());
  }
  if (!index.is_array()) throw InputError(index_path.string() + " must be a JSON array");

  Dataset ds;
  for (const auto& j : index) {
    IndexEntry e;
    try {
      e = j.get<IndexEntry>();
    } catch (const nlohmann::json::exception& ex) {
      throw InputError("bad index entry in " + index_path.string() + ": " + ex.what());
    }
    const std::string& file = e.label == 1 ? e.fake_file : e.real_file;
    if (file.empty()) throw InputError("index entry " + e.id + " has no image file");
    Tensor px = read_ppm(dir / file);
    if (ds.entries.empty()) {
      ds.height = px.dim(0);
      ds.width = px.dim(1);
    } else if (px.dim(0) != ds.height || px.dim(1) != ds.width) {
      throw InputError("inconsistent image dimensions in dataset: " + e.id);
    }
    ds.images.push_back(quantize_image(px));
    if (e.label == 1 && !e.mask_file.empty()) {
      Tensor m = read_pgm(dir / e.mask_file);
      if (m.dim(0) != ds.height || m.dim(1) != ds.width)
        throw InputError("mask dimensions do not match image: " + e.id);
      ds.masks.push_back(quantize_image(m));
    } else {
      ds.masks.emplace_back();
    }
    ds.entries.push_back(std::move(e));
  }
  ds.rebuild_lookup();
  return ds;
}

}  // namespace focus::data
