#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "focus/checkpoint.hpp"
#include "focus/dataset.hpp"
#include "focus/evalharness.hpp"
#include "focus/imaging.hpp"
#include "focus/metrics.hpp"
#include "focus/model.hpp"
#include "focus/objective.hpp"
#include "focus/trainer.hpp"

namespace focus::cli {

namespace detail {

inline nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

inline void echo_config(std::ostream& out, const std::string& command,
                        const nlohmann::json& config) {
  out << nlohmann::json{{"command", command}, {"config", config}}.dump() << '\n';
}

/// FOCUS_THREADS caps synthesis workers; unset or invalid falls back to the
/// hardware count.
inline int synth_threads() {
  unsigned n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("FOCUS_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1 && static_cast<unsigned long>(cap) < n) n = static_cast<unsigned>(cap);
  }
  return static_cast<int>(n);
}

inline int cmd_synth(const std::filesystem::path& out_dir, int count,
                     const imaging::SyntheticSpec& spec, std::ostream& out) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::pair<imaging::ImageSample, imaging::ImageSample>> pairs(
      static_cast<std::size_t>(count));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1))
      pairs[static_cast<std::size_t>(i)] = imaging::synth_pair(spec, i);
  };
  const int threads = std::min(synth_threads(), count);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  nlohmann::json index = nlohmann::json::array();
  for (int i = 0; i < count; ++i) {
    const auto& [real, fake] = pairs[static_cast<std::size_t>(i)];
    const auto files = data::detail::pair_files(i);
    write_ppm(out_dir / files.real_file, real.pixels);
    write_ppm(out_dir / files.fake_file, fake.pixels);
    write_pgm(out_dir / files.mask_file, fake.gt_mask);
    auto [re, fe] = data::detail::pair_entries(real, fake, files);
    index.push_back(re);
    index.push_back(fe);
  }
  atomic_write_file((out_dir / "index.json").string(), index.dump(2) + "\n");
  echo_config(out, "synth",
              {{"out", out_dir.string()},
               {"count", count},
               {"image_size", spec.image_size},
               {"patch_area_frac", spec.patch_area_frac},
               {"global_noise_sigma", spec.global_noise_sigma},
               {"blend_width", spec.blend_width},
               {"seed", spec.seed},
               {"threads", threads}});
  return 0;
}

inline int cmd_train(const std::filesystem::path& config_path,
                     const std::filesystem::path& data_dir,
                     const std::filesystem::path& out_dir, const std::string& log_path,
                     std::int64_t seed_override, std::ostream& out) {
  model::TrainConfig cfg = load_json(config_path).get<model::TrainConfig>();
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  data::Dataset ds = data::load_dataset(data_dir);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path log_file =
      log_path.empty() ? out_dir / "train_log.jsonl" : std::filesystem::path(log_path);
  std::ofstream log(log_file);
  if (!log) throw IoError("cannot open " + log_file.string());

  echo_config(out, "train", nlohmann::json(cfg));
  trainer::TrainResult res = trainer::train(cfg, ds, &log);
  const std::filesystem::path ck_path = out_dir / "checkpoint.bin";
  checkpoint::save(ck_path, cfg, res.model.params(), cfg.iterations);
  out << nlohmann::json{{"checkpoint", ck_path.string()},
                        {"checkpoint_hash", checkpoint::file_hash(ck_path)},
                        {"final_loss", res.logs.back().total},
                        {"log", log_file.string()}}
             .dump()
      << '\n';
  return 0;
}

inline int cmd_maps(const std::filesystem::path& ck_path, const std::filesystem::path& data_dir,
                    const std::filesystem::path& out_dir, bool fake_only, std::ostream& out) {
  checkpoint::Checkpoint ck = checkpoint::load(ck_path);
  model::FocusModel m = ck.restore();
  data::Dataset ds = data::load_dataset(data_dir);
  std::filesystem::create_directories(out_dir);

  const std::string hash = checkpoint::file_hash(ck_path);
  std::vector<trainer::MapRecord> records = trainer::generate_maps(m, ds, fake_only);
  for (const trainer::MapRecord& r : records) {
    trainer::MapSidecar info{r.id, r.label, "focus", hash, r.normalized};
    trainer::export_map(r.map, out_dir / (r.id + ".pgm"), info);
  }
  echo_config(out, "maps",
              {{"checkpoint", ck_path.string()},
               {"checkpoint_hash", hash},
               {"data", data_dir.string()},
               {"out", out_dir.string()},
               {"fake_only", fake_only},
               {"count", records.size()},
               {"model_config", nlohmann::json(ck.config)}});
  return 0;
}

inline int cmd_baseline(const std::string& method, const std::filesystem::path& data_dir,
                        const std::filesystem::path& out_dir, std::ostream& out) {
  data::Dataset ds = data::load_dataset(data_dir);
  std::filesystem::create_directories(out_dir);
  int written = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const data::IndexEntry& e = ds.entries[i];
    Tensor map;
    if (e.label == 0) {
      map = Tensor({ds.height, ds.width});  // comparing a real with itself
    } else {
      const int partner = ds.pair_partner(i);
      if (partner < 0) throw InputError("no source real for fake sample " + e.id);
      const Tensor real = ds.sample(static_cast<std::size_t>(partner)).pixels;
      const Tensor fake = ds.sample(i).pixels;
      if (method == "ssim")
        map = imaging::ssim_map(real, fake);
      else if (method == "pixdiff")
        map = imaging::pixel_diff_map(real, fake);
      else
        map = imaging::pixel_diff_map(real, fake, 0.1);
    }
    trainer::MapSidecar info{e.id, e.label, method, "", false};
    trainer::export_map(map, out_dir / (e.id + ".pgm"), info);
    ++written;
  }
  echo_config(out, "baseline",
              {{"method", method},
               {"data", data_dir.string()},
               {"out", out_dir.string()},
               {"count", written}});
  return 0;
}

inline int cmd_eval(const std::filesystem::path& data_dir, const std::string& config_path,
                    const std::string& maps_dir, const std::string& source_name,
                    std::int64_t seed_override, const std::string& out_path,
                    std::ostream& out) {
  evalharness::EvalConfig cfg;
  if (!config_path.empty()) cfg = load_json(config_path).get<evalharness::EvalConfig>();
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);

  evalharness::MapSource source = evalharness::MapSource::zero();
  if (!maps_dir.empty())
    source = evalharness::MapSource::directory(maps_dir);
  else if (source_name == "gt")
    source = evalharness::MapSource::ground_truth();
  else if (source_name != "zero")
    throw InputError("unknown supervision source: " + source_name);

  data::Dataset ds = data::load_dataset(data_dir);
  echo_config(out, "eval", nlohmann::json(cfg));
  evalharness::EvalResult res = evalharness::train_eval_model(cfg, ds, source);
  const std::string report = nlohmann::json(res.report).dump(2) + "\n";
  if (out_path.empty()) {
    out << report;
  } else {
    atomic_write_file(out_path, report);
    out << nlohmann::json{{"report", out_path},
                          {"accuracy", res.report.accuracy},
                          {"auc", res.report.auc}}
               .dump()
        << '\n';
  }
  return 0;
}

/// Finite-difference check of the training objective plus a map probe, with
/// soft masks and frozen selection noise so the surrogate is smooth.
inline int cmd_gradcheck(const std::filesystem::path& config_path, int samples,
                         std::uint64_t noise_seed, std::ostream& out) {
  model::TrainConfig cfg = load_json(config_path).get<model::TrainConfig>();
  echo_config(out, "gradcheck", nlohmann::json(cfg));

  model::FocusModel m(cfg);
  imaging::SyntheticSpec spec;
  spec.image_size = cfg.image_size;
  spec.seed = 31;
  auto [real, fake] = imaging::synth_pair(spec, 0);

  auto objective_value = [&](bool with_grad, std::vector<double>* grads) {
    ad::Tape tape;
    model::TapeRefs refs = m.instantiate(tape, with_grad);
    Rng gumbel(noise_seed);
    model::Forward fw =
        m.forward(tape, refs, fake.pixels, 1, &gumbel, fusion::MaskMode::kSoft);
    ad::Node* root = ad::add(fw.sample_loss, ad::mean_all(fw.a_fus));
    if (with_grad) {
      tape.backward(root);
      grads->clear();
      for (ad::Node* leaf : refs.leaves)
        for (std::int64_t i = 0; i < leaf->grad.numel(); ++i) grads->push_back(leaf->grad[i]);
    }
    return root->value[0];
  };

  std::vector<double> analytic;
  objective_value(true, &analytic);
  const std::vector<double> theta = m.params().flatten();

  std::vector<std::size_t> coords;
  Rng pick(17);
  while (coords.size() < static_cast<std::size_t>(samples))
    coords.push_back(static_cast<std::size_t>(pick.uniform01() * theta.size()));

  auto f = [&](const std::vector<double>& flat) {
    m.params().unflatten(flat);
    return objective_value(false, nullptr);
  };
  const double err = objective::grad_check(f, theta, analytic, 1e-5, coords);
  const bool pass = err < 1e-4;
  out << nlohmann::json{{"max_relative_error", err},
                        {"sampled", coords.size()},
                        {"parameters", theta.size()},
                        {"pass", pass}}
             .dump()
      << '\n';
  return pass ? 0 : 1;
}

inline int cmd_report(const std::vector<std::string>& files, std::ostream& out) {
  std::vector<evalharness::EvalReport> reports;
  reports.reserve(files.size());
  for (const std::string& f : files)
    reports.push_back(load_json(f).get<evalharness::EvalReport>());
  out << evalharness::report_table(reports);
  return 0;
}

}  // namespace detail

/// Entry point shared by the binary and the tests. Streams default to the
/// process streams; tests pass their own to capture output.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"FoCus manipulation-map toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a paired synthetic forgery dataset");
  std::string synth_out;
  int synth_count = 100;
  imaging::SyntheticSpec spec;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--count", synth_count, "Number of real/fake pairs")
      ->capture_default_str();
  synth->add_option("--size", spec.image_size, "Image side in pixels")->capture_default_str();
  synth->add_option("--area", spec.patch_area_frac, "Spliced area fraction")
      ->capture_default_str();
  synth->add_option("--sigma", spec.global_noise_sigma, "Global noise sigma on fakes")
      ->capture_default_str();
  synth->add_option("--blend", spec.blend_width, "Feather band width in pixels")
      ->capture_default_str();
  synth->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train FoCus on a dataset directory");
  std::string train_config, train_data, train_out, train_log;
  std::int64_t train_seed = -1;
  train->add_option("--config", train_config, "TrainConfig JSON path")->required();
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Output directory for the checkpoint")->required();
  train->add_option("--log", train_log, "Step log path (default: <out>/train_log.jsonl)");
  train->add_option("--seed", train_seed, "Override the config seed");

  // maps
  auto* maps = app.add_subcommand("maps", "Export manipulation maps from a checkpoint");
  std::string maps_ck, maps_data, maps_out;
  bool fake_only = false;
  maps->add_option("--checkpoint", maps_ck, "Checkpoint path")->required();
  maps->add_option("--data", maps_data, "Dataset directory")->required();
  maps->add_option("--out", maps_out, "Output directory for PGM maps")->required();
  maps->add_flag("--fake-only", fake_only,
                 "Raw fake-channel maps for every sample, no normalization");

  // baseline
  auto* baseline = app.add_subcommand("baseline", "Export comparison-based maps");
  std::string bl_method, bl_data, bl_out;
  baseline->add_option("--method", bl_method, "ssim, pixdiff, or pixdiff@0.1")
      ->required()
      ->check(CLI::IsMember({"ssim", "pixdiff", "pixdiff@0.1"}));
  baseline->add_option("--data", bl_data, "Dataset directory")->required();
  baseline->add_option("--out", bl_out, "Output directory for PGM maps")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Train the supervision-value evaluation model");
  std::string eval_data, eval_config, eval_maps, eval_source = "zero", eval_out;
  std::int64_t eval_seed = -1;
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--config", eval_config, "EvalConfig JSON path (defaults when absent)");
  auto* maps_opt = eval->add_option("--maps", eval_maps, "Directory of supervision maps");
  eval->add_option("--source", eval_source, "zero or gt supervision")
      ->capture_default_str()
      ->check(CLI::IsMember({"zero", "gt"}))
      ->excludes(maps_opt);
  eval->add_option("--seed", eval_seed, "Override the config seed");
  eval->add_option("--out", eval_out, "Report JSON path (stdout when absent)");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference objective check");
  std::string gc_config;
  int gc_samples = 220;
  std::uint64_t gc_seed = 42;
  gradcheck->add_option("--config", gc_config, "TrainConfig JSON path")->required();
  gradcheck->add_option("--samples", gc_samples, "Sampled parameter coordinates")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--seed", gc_seed, "Frozen selection-noise seed")
      ->capture_default_str();

  // report
  auto* report = app.add_subcommand("report", "Merge eval reports into one table");
  std::vector<std::string> report_files;
  report->add_option("files", report_files, "EvalReport JSON files")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "focus: " << e.what() << '\n' << app.help();
    return 2;
  }

  try {
    if (synth->parsed()) return detail::cmd_synth(synth_out, synth_count, spec, out);
    if (train->parsed())
      return detail::cmd_train(train_config, train_data, train_out, train_log, train_seed, out);
    if (maps->parsed()) return detail::cmd_maps(maps_ck, maps_data, maps_out, fake_only, out);
    if (baseline->parsed()) return detail::cmd_baseline(bl_method, bl_data, bl_out, out);
    if (eval->parsed())
      return detail::cmd_eval(eval_data, eval_config, eval_maps, eval_source, eval_seed,
                              eval_out, out);
    if (gradcheck->parsed()) return detail::cmd_gradcheck(gc_config, gc_samples, gc_seed, out);
    if (report->parsed()) return detail::cmd_report(report_files, out);
  } catch (const std::exception& e) {
    err << "focus: " << e.what() << '\n';
    return 1;
  }
  err << "focus: no subcommand given\n" << app.help();
  return 2;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace focus::cli
