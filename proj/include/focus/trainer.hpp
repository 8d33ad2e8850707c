#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <mutex>
#include <numbers>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "focus/autodiff.hpp"
#include "focus/dataset.hpp"
#include "focus/image_io.hpp"
#include "focus/metrics.hpp"
#include "focus/model.hpp"
#include "focus/objective.hpp"
#include "focus/rng.hpp"
#include "focus/tensor.hpp"

namespace focus::trainer {

/// Cosine decay from the base rate to zero across the run; t is 0-based.
inline double cosine_lr(double base, std::int64_t t, std::int64_t iterations) {
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) /
                                      static_cast<double>(iterations)));
}

struct StepLog {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_loc = 0.0;
  double loss_fus = 0.0;
  double total = 0.0;
};

inline void to_json(nlohmann::json& j, const StepLog& s) {
  j = nlohmann::json{{"step", s.step},
                     {"lr", s.lr},
                     {"loss_loc", s.loss_loc},
                     {"loss_fus", s.loss_fus},
                     {"total", s.total}};
}

/// Adam over a flat parameter vector (beta1 0.9, beta2 0.999, eps 1e-8).
class Adam {
 public:
  explicit Adam(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& theta, const std::vector<double>& grad, double lr) {
    if (theta.size() != m_.size() || grad.size() != m_.size())
      throw InputError("optimizer state does not match parameter count");
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grad[i];
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grad[i] * grad[i];
      theta[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + kEps);
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<double> m_;
  std::vector<double> v_;
  std::int64_t t_ = 0;
};

struct TrainResult {
  model::FocusModel model;
  std::vector<StepLog> logs;
};

namespace detail {

// derivation constants for per-purpose child streams
constexpr std::uint64_t kBatchStream = 0xba7c;
constexpr std::uint64_t kGumbelStream = 0x6b17;

inline void check_dataset(const model::TrainConfig& cfg, const data::Dataset& data) {
  if (data.entries.empty()) throw InputError("dataset is empty");
  if (data.height != cfg.image_size || data.width != cfg.image_size)
    throw InputError("dataset image size " + std::to_string(data.height) +
                     " does not match configured size " + std::to_string(cfg.image_size));
}

inline int worker_threads() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* cap = std::getenv("FOCUS_THREADS")) {
    const int c = std::atoi(cap);
    if (c >= 1 && c < n) n = c;
  }
  return n;
}

/// Runs fn(i) for i in [0, count) on a small worker pool. Results must be
/// written to per-index slots; the work itself carries no ordering, so any
/// order-dependent reduction belongs to the caller.
template <typename Fn>
inline void parallel_for(int count, const Fn& fn) {
  const int threads = std::min(worker_threads(), count);
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < count && !failed.load(); i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          failed.store(true);
        }
      }
    });
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

/// Optimizes the combined objective with Adam under cosine decay. Batches are
/// balanced half real, half fake, drawn with replacement. One JSON line per
/// step goes to `log_stream` when given.
inline TrainResult train(const model::TrainConfig& cfg, const data::Dataset& data,
                         std::ostream* log_stream = nullptr) {
  cfg.validate();
  detail::check_dataset(cfg, data);

  std::vector<int> reals, fakes;
  for (std::size_t i = 0; i < data.entries.size(); ++i)
    (data.entries[i].label == 1 ? fakes : reals).push_back(static_cast<int>(i));
  if (reals.empty() || fakes.empty())
    throw InputError("training needs both real and fake samples");

  model::FocusModel m(cfg);
  std::vector<double> theta = m.params().flatten();
  std::vector<double> grad(theta.size(), 0.0);
  Adam opt(theta.size());
  std::vector<StepLog> logs;
  logs.reserve(static_cast<std::size_t>(cfg.iterations));

  const Rng root(cfg.seed);
  const int half = cfg.batch_size / 2;

  // one gradient buffer per batch slot: samples run on worker threads, but
  // the reduction below walks slots in batch order, so trajectories do not
  // depend on the thread count
  std::vector<std::vector<double>> sample_grads(
      static_cast<std::size_t>(cfg.batch_size), std::vector<double>(theta.size(), 0.0));

  for (std::int64_t t = 0; t < cfg.iterations; ++t) {
    Rng batch_rng = root.child(detail::kBatchStream).child(static_cast<std::uint64_t>(t));
    std::vector<int> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int i = 0; i < half; ++i)
      batch.push_back(reals[batch_rng.below(reals.size())]);
    for (int i = 0; i < half; ++i)
      batch.push_back(fakes[batch_rng.below(fakes.size())]);

    Tensor y_rgb({cfg.batch_size, 2}), y_sobel({cfg.batch_size, 2}), y_fus({cfg.batch_size, 2});
    std::vector<int> labels(static_cast<std::size_t>(cfg.batch_size));

    const Rng step_noise = root.child(detail::kGumbelStream).child(static_cast<std::uint64_t>(t));
    detail::parallel_for(cfg.batch_size, [&](int bi) {
      const imaging::ImageSample sample =
          data.sample(static_cast<std::size_t>(batch[static_cast<std::size_t>(bi)]));
      ad::Tape tape;
      model::TapeRefs refs = m.instantiate(tape, true);
      Rng gumbel = step_noise.child(static_cast<std::uint64_t>(bi));
      model::Forward out =
          m.forward(tape, refs, sample.pixels, sample.label, &gumbel, fusion::MaskMode::kTraining);
      tape.backward(out.sample_loss);

      std::vector<double>& slot = sample_grads[static_cast<std::size_t>(bi)];
      std::size_t off = 0;
      for (ad::Node* leaf : refs.leaves) {
        const std::int64_t n = leaf->grad.numel();
        for (std::int64_t k = 0; k < n; ++k) slot[off + static_cast<std::size_t>(k)] = leaf->grad[k];
        off += static_cast<std::size_t>(n);
      }
      for (int c = 0; c < 2; ++c) {
        y_rgb.at(bi, c) = out.y_loc_rgb->value.at(0, c);
        y_sobel.at(bi, c) = out.y_loc_sobel->value.at(0, c);
        y_fus.at(bi, c) = out.y_fus->value.at(0, c);
      }
      labels[static_cast<std::size_t>(bi)] = sample.label;
    });

    std::fill(grad.begin(), grad.end(), 0.0);
    for (int bi = 0; bi < cfg.batch_size; ++bi) {
      const std::vector<double>& slot = sample_grads[static_cast<std::size_t>(bi)];
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += slot[k];
    }
    for (double& g : grad) g /= static_cast<double>(cfg.batch_size);

    const double l_loc = objective::loss_loc(y_rgb, y_sobel, labels);
    const double l_fus = objective::loss_fus(y_fus, labels);
    const objective::LossBreakdown br = objective::total_loss(l_loc, l_fus, cfg.alpha);
    if (!std::isfinite(br.total))
      throw NumericError("non-finite loss at step " + std::to_string(t) +
                         " (loc=" + std::to_string(l_loc) + ", fus=" + std::to_string(l_fus) + ")");

    const double lr = cosine_lr(cfg.learning_rate, t, cfg.iterations);
    opt.step(theta, grad, lr);
    m.params().unflatten(theta);

    logs.push_back(StepLog{t, lr, l_loc, l_fus, br.total});
    if (log_stream) {
      nlohmann::json line = logs.back();
      *log_stream << line.dump() << '\n';
    }
  }
  return TrainResult{std::move(m), std::move(logs)};
}

/// One generated manipulation map at token-grid resolution.
struct MapRecord {
  std::string id;
  int label = 0;
  Tensor map;              // grid_h x grid_w, values in [0,1]
  bool normalized = false; // min-max rescaled per image
};

namespace detail {

inline Tensor to_grid(const Tensor& column, int h, int w) {
  return column.reshaped({h, w});
}

}  // namespace detail

/// Deterministic inference maps for a whole dataset. Supervision mode
/// (fake_only = false) emits min-max normalized fused maps for fakes and
/// all-zero maps for reals. Diagnostic mode (fake_only = true) emits raw
/// maps for both: the fused map for fakes, the fake-class-only map for
/// reals.
inline std::vector<MapRecord> generate_maps(const model::FocusModel& m,
                                            const data::Dataset& data, bool fake_only) {
  detail::check_dataset(m.config(), data);
  const int side = m.config().grid_side();

  std::vector<MapRecord> out(data.entries.size());
  detail::parallel_for(static_cast<int>(data.entries.size()), [&](int idx) {
    const std::size_t i = static_cast<std::size_t>(idx);
    const imaging::ImageSample sample = data.sample(i);
    MapRecord& rec = out[i];
    rec.id = data.entries[i].id;
    rec.label = sample.label;

    if (sample.label == 0 && !fake_only) {
      rec.map = Tensor({side, side});  // the supervision convention for reals
      return;
    }

    ad::Tape tape;
    model::TapeRefs refs = m.instantiate(tape, false);
    model::Forward fwd =
        m.forward(tape, refs, sample.pixels, sample.label, nullptr, fusion::MaskMode::kInference);
    ad::Node* col = sample.label == 1 ? fwd.a_fus : fwd.a_fake_only;
    rec.map = detail::to_grid(col->value, side, side);
    if (!fake_only) {
      rec.map = metrics::minmax_normalize(rec.map);
      rec.normalized = true;
    }
  });
  return out;
}

/// Sidecar metadata accompanying every exported map.
struct MapSidecar {
  std::string id;
  int label = 0;
  std::string generator;        // "focus" | "ssim" | "pixdiff" | "pixdiff@0.1"
  std::string checkpoint_hash;  // empty for comparison methods
  bool normalized = false;
};

/// Writes an 8-bit PGM (values round(255*v)) plus a JSON sidecar next to it,
/// both atomically.
inline void export_map(const Tensor& map, const std::filesystem::path& pgm_path,
                       const MapSidecar& info) {
  if (map.ndim() != 2) throw InputError("export_map expects a rank-2 map");
  if (map.min() < 0.0 || map.max() > 1.0)
    throw InputError("map values must lie in [0,1] for export: " + info.id);
  write_pgm(pgm_path.string(), map);

  nlohmann::json j{{"id", info.id},
                   {"label", info.label},
                   {"grid_h", map.dim(0)},
                   {"grid_w", map.dim(1)},
                   {"generator", info.generator},
                   {"checkpoint_hash", info.checkpoint_hash},
                   {"normalized", info.normalized}};
  std::filesystem::path sidecar = pgm_path;
  sidecar.replace_extension(".json");
  atomic_write_file(sidecar.string(), j.dump(2) + "\n");
}

}  // namespace focus::trainer
