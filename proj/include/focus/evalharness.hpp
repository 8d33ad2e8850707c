#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "focus/autodiff.hpp"
#include "focus/dataset.hpp"
#include "focus/image_io.hpp"
#include "focus/imaging.hpp"
#include "focus/metrics.hpp"
#include "focus/model.hpp"
#include "focus/objective.hpp"
#include "focus/rng.hpp"
#include "focus/tensor.hpp"
#include "focus/trainer.hpp"

namespace focus::evalharness {

struct EvalConfig {
  int image_size = 32;
  int dense_side = 0;  // 0 means image_size
  double learning_rate = 1e-3;
  double bce_weight = 0.1;
  int batch_size = 8;
  int iterations = 400;
  std::uint64_t seed = 0;

  int side() const { return dense_side > 0 ? dense_side : image_size; }

  void validate() const {
    if (image_size < 16) throw ConfigError("image_size must be >= 16");
    if (dense_side < 0) throw ConfigError("dense_side must be >= 0");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (bce_weight < 0.0) throw ConfigError("bce_weight must be >= 0");
    if (batch_size < 2 || batch_size % 2 != 0)
      throw ConfigError("batch_size must be even and >= 2");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},   {"dense_side", c.dense_side},
                     {"learning_rate", c.learning_rate}, {"bce_weight", c.bce_weight},
                     {"batch_size", c.batch_size},   {"iterations", c.iterations},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  static const std::vector<std::string> known = {"image_size", "dense_side",  "learning_rate",
                                                 "bce_weight", "batch_size", "iterations",
                                                 "seed"};
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const auto& k : known) ok = ok || k == item.key();
    if (!ok) throw ConfigError("unknown eval config field: " + item.key());
  }
  c.image_size = j.value("image_size", c.image_size);
  c.dense_side = j.value("dense_side", c.dense_side);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.bce_weight = j.value("bce_weight", c.bce_weight);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.iterations = j.value("iterations", c.iterations);
  c.seed = j.value("seed", c.seed);
}

inline std::string config_hash(const EvalConfig& c) {
  const std::string dump = nlohmann::json(c).dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(dump.data(), dump.size())));
  return std::string(buf);
}

struct EvalRefs {
  std::vector<ad::Node*> leaves;
  std::unordered_map<std::string, ad::Node*> by_name;
};

struct EvalForward {
  ad::Node* probs = nullptr;         // 1 x 2
  ad::Node* dense_logits = nullptr;  // side x side x 1
  ad::Node* dense_map = nullptr;     // sigmoid of the logits
  ad::Node* ce = nullptr;
  ad::Node* bce = nullptr;       // null without a supervision target
  ad::Node* total = nullptr;     // ce + bce_weight * bce
};

/// Small multi-task conv net: four stride-2 conv-norm-GELU stages (widths
/// 16/32/64/64), a global-average-pool classifier, and a dense head decoding
/// the stage-3 features back to a full-resolution sigmoid map.
class EvalModel {
 public:
  explicit EvalModel(const EvalConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng = Rng(cfg.seed).child(0xe7a1);
    add_stage("stage1", 3, 16, rng);
    add_stage("stage2", 16, 32, rng);
    add_stage("stage3", 32, 64, rng);
    add_stage("stage4", 64, 64, rng);
    params_.add("cls.w", nn::trunc_normal_init({64, 2}, rng));
    params_.add("cls.b", Tensor({1, 2}));
    add_stage("dec1", 64, 32, rng);
    add_stage("dec2", 32, 16, rng);
    add_stage("dec3", 16, 8, rng);
    params_.add("out.w", conv_init(1, 1, 8, 1, rng));
    params_.add("out.b", Tensor({1}));
  }

  const EvalConfig& config() const { return cfg_; }
  model::ParamStore& params() { return params_; }
  const model::ParamStore& params() const { return params_; }

  EvalRefs instantiate(ad::Tape& tape, bool needs_grad) const {
    EvalRefs refs;
    refs.leaves.reserve(params_.count());
    for (std::size_t i = 0; i < params_.count(); ++i) {
      ad::Node* n = tape.leaf(params_.value(i), needs_grad);
      refs.leaves.push_back(n);
      refs.by_name[params_.names()[i]] = n;
    }
    return refs;
  }

  /// `supervision`, when given, is a map in [0,1] at any grid size; it is
  /// resized to the dense head's output before the pixelwise loss.
  EvalForward forward(ad::Tape& tape, const EvalRefs& refs, const Tensor& image, int label,
                      const Tensor* supervision) const {
    if (image.ndim() != 3 || image.dim(0) != cfg_.image_size ||
        image.dim(1) != cfg_.image_size || image.dim(2) != 3)
      throw InputError("image does not match configured eval size");
    if (label != 0 && label != 1) throw InputError("label must be 0 or 1");

    ad::Node* x = tape.leaf(image, false);
    ad::Node* s1 = stage(refs, "stage1", x, 2);
    ad::Node* s2 = stage(refs, "stage2", s1, 2);
    ad::Node* s3 = stage(refs, "stage3", s2, 2);
    ad::Node* s4 = stage(refs, "stage4", s3, 2);

    ad::Node* pooled = ad::global_avg_pool(s4);
    ad::Node* logits =
        ad::add_rowvec(ad::matmul(pooled, refs.by_name.at("cls.w")), refs.by_name.at("cls.b"));
    EvalForward out;
    out.probs = ad::row_softmax(logits);

    ad::Node* d = s3;
    for (const char* name : {"dec1", "dec2", "dec3"}) {
      d = ad::upsample_bilinear(d, d->value.dim(0) * 2, d->value.dim(1) * 2);
      d = stage(refs, name, d, 1);
    }
    const int side = cfg_.side();
    if (d->value.dim(0) != side || d->value.dim(1) != side)
      d = ad::upsample_bilinear(d, side, side);
    ad::Node* dense = ad::conv2d(d, refs.by_name.at("out.w"), 1, 0);
    out.dense_logits = ad::add_chanvec(dense, refs.by_name.at("out.b"));
    out.dense_map = ad::sigmoid(out.dense_logits);

    out.ce = objective::ce_term(out.probs, label);
    if (supervision) {
      Tensor target = *supervision;
      if (target.ndim() != 2) throw InputError("supervision map must be rank-2");
      if (target.dim(0) != side || target.dim(1) != side)
        target = imaging::resize_bilinear(target, side, side);
      out.bce = ad::bce_with_logits(out.dense_logits, target.reshaped({side, side, 1}));
      out.total = ad::add(out.ce, ad::scale(out.bce, cfg_.bce_weight));
    } else {
      out.total = out.ce;
    }
    return out;
  }

 private:
  static Tensor conv_init(int kh, int kw, int cin, int cout, Rng& rng) {
    const double std = std::sqrt(1.0 / (static_cast<double>(kh) * kw * cin));
    return nn::trunc_normal_init({kh, kw, cin, cout}, rng, std);
  }

  void add_stage(const std::string& name, int cin, int cout, Rng& rng) {
    params_.add(name + ".w", conv_init(3, 3, cin, cout, rng));
    Tensor g({cout});
    g.fill(1.0);
    params_.add(name + ".g", std::move(g));
    params_.add(name + ".b", Tensor({cout}));
  }

  ad::Node* stage(const EvalRefs& refs, const std::string& name, ad::Node* x,
                  int stride) const {
    ad::Node* y = ad::conv2d(x, refs.by_name.at(name + ".w"), stride, 1);
    y = ad::norm_all(y);
    y = ad::mul_chanvec(y, refs.by_name.at(name + ".g"));
    y = ad::add_chanvec(y, refs.by_name.at(name + ".b"));
    return ad::gelu(y);
  }

  EvalConfig cfg_;
  model::ParamStore params_;
};

/// Where the dense head's training targets come from. Real samples always
/// supervise toward zero; the variants differ on fakes.
class MapSource {
 public:
  static MapSource zero() { return MapSource(Kind::kZero, "zero"); }
  static MapSource ground_truth() { return MapSource(Kind::kGt, "gt"); }
  static MapSource directory(std::filesystem::path dir) {
    MapSource s(Kind::kDir, dir.string());
    s.dir_ = std::move(dir);
    return s;
  }
  static MapSource records(std::vector<trainer::MapRecord> recs, std::string name) {
    MapSource s(Kind::kRecords, std::move(name));
    s.records_ = std::move(recs);
    return s;
  }

  const std::string& name() const { return name_; }

  Tensor map_for(const data::Dataset& ds, std::size_t i) const {
    const data::IndexEntry& e = ds.entries[i];
    switch (kind_) {
      case Kind::kZero:
        return Tensor({ds.height, ds.width});
      case Kind::kGt: {
        if (e.label == 0) return Tensor({ds.height, ds.width});
        imaging::ImageSample s = ds.sample(i);
        if (s.gt_mask.numel() == 0)
          throw InputError("missing ground-truth mask for sample " + e.id);
        return s.gt_mask;
      }
      case Kind::kDir: {
        const std::filesystem::path p = dir_ / (e.id + ".pgm");
        if (!std::filesystem::exists(p))
          throw InputError("missing supervision map for sample " + e.id);
        return read_pgm(p);
      }
      case Kind::kRecords: {
        for (const trainer::MapRecord& r : records_)
          if (r.id == e.id) return r.map;
        throw InputError("missing supervision map for sample " + e.id);
      }
    }
    throw InputError("unreachable map source kind");
  }

 private:
  enum class Kind { kZero, kGt, kDir, kRecords };
  MapSource(Kind k, std::string name) : kind_(k), name_(std::move(name)) {}

  Kind kind_;
  std::string name_;
  std::filesystem::path dir_;
  std::vector<trainer::MapRecord> records_;
};

struct EvalReport {
  double accuracy = 0.0;
  double auc = 0.0;
  double map_iou = 0.0;
  double map_precision = 0.0;
  double map_recall = 0.0;
  double mean_dense = 0.0;  // mean dense-head output over test samples
  std::vector<std::pair<double, metrics::MapMetrics>> sweep;
  std::string supervision_source;
  std::uint64_t seed = 0;
  std::string config_hash;
  int train_samples = 0;
  int test_samples = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& [th, m] : r.sweep)
    sweep.push_back({{"threshold", th},
                     {"iou", m.iou},
                     {"precision", m.precision},
                     {"recall", m.recall}});
  j = nlohmann::json{{"accuracy", r.accuracy},
                     {"auc", r.auc},
                     {"map_iou", r.map_iou},
                     {"map_precision", r.map_precision},
                     {"map_recall", r.map_recall},
                     {"mean_dense", r.mean_dense},
                     {"sweep", sweep},
                     {"supervision_source", r.supervision_source},
                     {"seed", r.seed},
                     {"config_hash", r.config_hash},
                     {"train_samples", r.train_samples},
                     {"test_samples", r.test_samples}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("accuracy").get_to(r.accuracy);
  j.at("auc").get_to(r.auc);
  j.at("map_iou").get_to(r.map_iou);
  j.at("map_precision").get_to(r.map_precision);
  j.at("map_recall").get_to(r.map_recall);
  j.at("mean_dense").get_to(r.mean_dense);
  j.at("supervision_source").get_to(r.supervision_source);
  j.at("seed").get_to(r.seed);
  j.at("config_hash").get_to(r.config_hash);
  j.at("train_samples").get_to(r.train_samples);
  j.at("test_samples").get_to(r.test_samples);
  r.sweep.clear();
  for (const auto& row : j.at("sweep")) {
    metrics::MapMetrics m;
    m.iou = row.at("iou").get<double>();
    m.precision = row.at("precision").get<double>();
    m.recall = row.at("recall").get<double>();
    r.sweep.emplace_back(row.at("threshold").get<double>(), m);
  }
}

struct EvalResult {
  EvalModel model;
  std::vector<double> losses;  // mean batch loss per step
  EvalReport report;
};

namespace detail {

/// Pair-coherent 80/20 split: an entry is held out when the hash of its pair
/// key lands in the last fifth, so a fake never trains while its source real
/// image is tested.
inline bool held_out(const data::IndexEntry& e) {
  const std::string& key = e.real_file.empty() ? e.id : e.real_file;
  return fnv1a64(key.data(), key.size()) % 5 == 4;
}

}  // namespace detail

inline EvalResult train_eval_model(const EvalConfig& cfg, const data::Dataset& ds,
                                   const MapSource& source,
                                   std::ostream* log_stream = nullptr) {
  cfg.validate();
  if (ds.entries.empty()) throw InputError("dataset is empty");
  if (ds.height != cfg.image_size || ds.width != cfg.image_size)
    throw InputError("dataset image size does not match eval config");

  std::vector<int> train_real, train_fake, test_idx;
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    if (detail::held_out(ds.entries[i]))
      test_idx.push_back(static_cast<int>(i));
    else
      (ds.entries[i].label == 1 ? train_fake : train_real).push_back(static_cast<int>(i));
  }
  if (train_real.empty() || train_fake.empty())
    throw InputError("training split needs both real and fake samples");
  if (test_idx.empty()) throw InputError("held-out split is empty");

  // supervision targets resolved once, at the dense head's output size
  const int side = cfg.side();
  std::vector<Tensor> targets(ds.size());
  auto target_of = [&](int idx) -> const Tensor& {
    Tensor& t = targets[static_cast<std::size_t>(idx)];
    if (t.numel() == 0) {
      Tensor m = source.map_for(ds, static_cast<std::size_t>(idx));
      if (m.ndim() != 2) throw InputError("supervision map must be rank-2");
      if (m.min() < 0.0 || m.max() > 1.0)
        throw InputError("supervision map out of [0,1] for sample " +
                         ds.entries[static_cast<std::size_t>(idx)].id);
      t = (m.dim(0) == side && m.dim(1) == side) ? std::move(m)
                                                 : imaging::resize_bilinear(m, side, side);
    }
    return t;
  };

  EvalModel m(cfg);
  std::vector<double> theta = m.params().flatten();
  std::vector<double> grad(theta.size(), 0.0);
  trainer::Adam opt(theta.size());
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(cfg.iterations));

  const Rng root(cfg.seed);
  const int half = cfg.batch_size / 2;
  for (std::int64_t t = 0; t < cfg.iterations; ++t) {
    Rng batch_rng = root.child(0xeba7).child(static_cast<std::uint64_t>(t));
    std::vector<int> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int i = 0; i < half; ++i)
      batch.push_back(train_real[batch_rng.below(train_real.size())]);
    for (int i = 0; i < half; ++i)
      batch.push_back(train_fake[batch_rng.below(train_fake.size())]);

    std::fill(grad.begin(), grad.end(), 0.0);
    double loss_acc = 0.0;
    for (int idx : batch) {
      const imaging::ImageSample sample = ds.sample(static_cast<std::size_t>(idx));
      ad::Tape tape;
      EvalRefs refs = m.instantiate(tape, true);
      EvalForward out = m.forward(tape, refs, sample.pixels, sample.label, &target_of(idx));
      tape.backward(out.total);
      std::size_t off = 0;
      for (ad::Node* leaf : refs.leaves) {
        const std::int64_t n = leaf->grad.numel();
        for (std::int64_t k = 0; k < n; ++k)
          grad[off + static_cast<std::size_t>(k)] += leaf->grad[k];
        off += static_cast<std::size_t>(n);
      }
      loss_acc += out.total->value[0];
    }
    for (double& g : grad) g /= static_cast<double>(cfg.batch_size);
    loss_acc /= static_cast<double>(cfg.batch_size);
    if (!std::isfinite(loss_acc))
      throw NumericError("non-finite eval loss at step " + std::to_string(t));

    opt.step(theta, grad, cfg.learning_rate);
    m.params().unflatten(theta);
    losses.push_back(loss_acc);
    if (log_stream) {
      nlohmann::json line{{"step", t}, {"loss", loss_acc}};
      *log_stream << line.dump() << '\n';
    }
  }

  // held-out evaluation
  std::vector<double> scores;
  std::vector<int> labels;
  double dense_sum = 0.0;
  std::int64_t dense_n = 0;
  double iou = 0.0, prec = 0.0, rec = 0.0;
  std::vector<metrics::MapMetrics> sweep_acc(9);
  int fakes_with_gt = 0;
  int correct = 0;
  for (int idx : test_idx) {
    const imaging::ImageSample sample = ds.sample(static_cast<std::size_t>(idx));
    ad::Tape tape;
    EvalRefs refs = m.instantiate(tape, false);
    EvalForward out = m.forward(tape, refs, sample.pixels, sample.label, nullptr);
    const double p_fake = out.probs->value.at(0, 1);
    scores.push_back(p_fake);
    labels.push_back(sample.label);
    if ((p_fake >= 0.5 ? 1 : 0) == sample.label) ++correct;

    const Tensor& dm = out.dense_map->value;
    for (std::int64_t k = 0; k < dm.numel(); ++k) dense_sum += dm[k];
    dense_n += dm.numel();

    if (sample.label == 1 && sample.gt_mask.numel() > 0) {
      Tensor flat = dm.reshaped({side, side});
      metrics::MapMetrics mm = metrics::map_metrics(flat, sample.gt_mask, 0.5);
      iou += mm.iou;
      prec += mm.precision;
      rec += mm.recall;
      auto sw = metrics::threshold_sweep(flat, sample.gt_mask);
      for (std::size_t k = 0; k < sw.size(); ++k) {
        sweep_acc[k].iou += sw[k].second.iou;
        sweep_acc[k].precision += sw[k].second.precision;
        sweep_acc[k].recall += sw[k].second.recall;
      }
      ++fakes_with_gt;
    }
  }

  EvalReport rep;
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(test_idx.size());
  rep.auc = metrics::auc(scores, labels);
  if (fakes_with_gt > 0) {
    rep.map_iou = iou / fakes_with_gt;
    rep.map_precision = prec / fakes_with_gt;
    rep.map_recall = rec / fakes_with_gt;
    for (std::size_t k = 0; k < sweep_acc.size(); ++k) {
      metrics::MapMetrics mean;
      mean.iou = sweep_acc[k].iou / fakes_with_gt;
      mean.precision = sweep_acc[k].precision / fakes_with_gt;
      mean.recall = sweep_acc[k].recall / fakes_with_gt;
      rep.sweep.emplace_back(0.1 * static_cast<double>(k + 1), mean);
    }
  }
  rep.mean_dense = dense_n > 0 ? dense_sum / static_cast<double>(dense_n) : 0.0;
  rep.supervision_source = source.name();
  rep.seed = cfg.seed;
  rep.config_hash = config_hash(cfg);
  rep.train_samples = static_cast<int>(train_real.size() + train_fake.size());
  rep.test_samples = static_cast<int>(test_idx.size());
  return EvalResult{std::move(m), std::move(losses), std::move(rep)};
}

/// One row per report, aligned for reading side by side.
inline std::string report_table(const std::vector<EvalReport>& reports) {
  std::string out =
      "source        acc     auc     iou     prec    recall  mean_dense\n";
  char buf[160];
  for (const EvalReport& r : reports) {
    std::snprintf(buf, sizeof buf, "%-12s  %.4f  %.4f  %.4f  %.4f  %.4f  %.4f\n",
                  r.supervision_source.c_str(), r.accuracy, r.auc, r.map_iou, r.map_precision,
                  r.map_recall, r.mean_dense);
    out += buf;
  }
  return out;
}

}  // namespace focus::evalharness
