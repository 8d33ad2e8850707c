#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "focus/checkpoint.hpp"
#include "focus/dataset.hpp"
#include "focus/model.hpp"
#include "focus/trainer.hpp"

using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using focus::Tensor;
using namespace focus;

namespace {

model::TrainConfig tiny_config() {
  model::TrainConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.embed_dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.carp_channels = 2;
  cfg.batch_size = 2;
  cfg.iterations = 1;
  cfg.learning_rate = 1e-3;
  cfg.seed = 3;
  return cfg;
}

data::Dataset tiny_dataset(int pairs = 4, std::uint64_t seed = 11) {
  imaging::SyntheticSpec spec;
  spec.image_size = 16;
  spec.seed = seed;
  return data::make_synthetic_dataset(spec, pairs);
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(trainer::cosine_lr(2e-3, 0, 100) == Approx(2e-3).margin(1e-9));
  CHECK(trainer::cosine_lr(2e-3, 100, 100) == Approx(0.0).margin(1e-9));
  CHECK(trainer::cosine_lr(2e-3, 50, 100) == Approx(1e-3).margin(1e-9));
  // quarter point: 0.5*base*(1 + cos(pi/4))
  const double expect = 0.5 * 2e-3 * (1.0 + std::sqrt(0.5));
  CHECK(trainer::cosine_lr(2e-3, 25, 100) == Approx(expect).margin(1e-9));
  // monotone decreasing across the run
  double prev = trainer::cosine_lr(1.0, 0, 10);
  for (int t = 1; t <= 10; ++t) {
    const double cur = trainer::cosine_lr(1.0, t, 10);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("adam first step matches the hand-computed update") {
  std::vector<double> theta{1.0, -2.0};
  const std::vector<double> g{0.5, -1.0};
  trainer::Adam opt(2);
  opt.step(theta, g, 0.1);

  // m_hat = g, v_hat = g^2 after bias correction at t=1
  const double e0 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
  const double e1 = -2.0 + 0.1 * 1.0 / (1.0 + 1e-8);
  CHECK(theta[0] == Approx(e0).margin(1e-15));
  CHECK(theta[1] == Approx(e1).margin(1e-15));
  CHECK(opt.steps() == 1);
}

TEST_CASE("adam second step applies bias-corrected moments") {
  std::vector<double> theta{0.0};
  trainer::Adam opt(1);
  opt.step(theta, {0.5}, 0.1);
  opt.step(theta, {0.25}, 0.1);

  const double m1 = 0.1 * 0.5;
  const double v1 = 0.001 * 0.25;
  const double t1 = -0.1 * (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
  const double m2 = 0.9 * m1 + 0.1 * 0.25;
  const double v2 = 0.999 * v1 + 0.001 * 0.0625;
  const double c1 = 1.0 - 0.9 * 0.9;
  const double c2 = 1.0 - 0.999 * 0.999;
  const double expect = t1 - 0.1 * (m2 / c1) / (std::sqrt(v2 / c2) + 1e-8);
  CHECK(theta[0] == Approx(expect).margin(1e-15));
}

TEST_CASE("adam rejects mismatched sizes") {
  trainer::Adam opt(3);
  std::vector<double> theta{1.0, 2.0};
  CHECK_THROWS_AS(opt.step(theta, {0.1, 0.2}, 0.1), focus::InputError);
}

TEST_CASE("step log serializes every field") {
  trainer::StepLog s{7, 5e-4, 1.25, 0.5, 1.3};
  nlohmann::json j = s;
  CHECK(j.at("step") == 7);
  CHECK(j.at("lr") == Approx(5e-4));
  CHECK(j.at("loss_loc") == Approx(1.25));
  CHECK(j.at("loss_fus") == Approx(0.5));
  CHECK(j.at("total") == Approx(1.3));
  CHECK(j.size() == 5);
}

TEST_CASE("training rejects bad datasets") {
  model::TrainConfig cfg = tiny_config();
  data::Dataset empty;
  CHECK_THROWS_AS(trainer::train(cfg, empty), focus::InputError);

  imaging::SyntheticSpec spec;
  spec.image_size = 24;
  spec.seed = 1;
  data::Dataset wrong = data::make_synthetic_dataset(spec, 2);
  CHECK_THROWS_AS(trainer::train(cfg, wrong), focus::InputError);

  data::Dataset ds = tiny_dataset(2);
  data::Dataset reals_only;
  reals_only.height = reals_only.width = 16;
  for (std::size_t i = 0; i < ds.size(); i += 2) {
    reals_only.entries.push_back(ds.entries[i]);
    reals_only.images.push_back(ds.images[i]);
    reals_only.masks.emplace_back();
  }
  reals_only.rebuild_lookup();
  CHECK_THROWS_WITH(trainer::train(cfg, reals_only), ContainsSubstring("both real and fake"));
}

TEST_CASE("one iteration moves every-layer parameters and logs one line") {
  model::TrainConfig cfg = tiny_config();
  data::Dataset ds = tiny_dataset();

  const std::vector<double> before = model::FocusModel(cfg).params().flatten();
  std::ostringstream log;
  trainer::TrainResult res = trainer::train(cfg, ds, &log);
  const std::vector<double> after = res.model.params().flatten();

  REQUIRE(after.size() == before.size());
  double delta = 0.0;
  for (std::size_t i = 0; i < after.size(); ++i) delta += std::fabs(after[i] - before[i]);
  CHECK(delta > 0.0);

  REQUIRE(res.logs.size() == 1);
  CHECK(res.logs[0].step == 0);
  CHECK(res.logs[0].lr == Approx(cfg.learning_rate).margin(1e-12));
  CHECK(std::isfinite(res.logs[0].total));
  CHECK(res.logs[0].total ==
        Approx(res.logs[0].loss_loc + cfg.alpha * res.logs[0].loss_fus).margin(1e-12));

  std::string line;
  int lines = 0;
  std::istringstream in(log.str());
  while (std::getline(in, line)) {
    ++lines;
    nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("lr"));
    CHECK(j.contains("loss_loc"));
    CHECK(j.contains("loss_fus"));
    CHECK(j.contains("total"));
  }
  CHECK(lines == 1);
}

TEST_CASE("same seed gives identical trajectories, different seed diverges") {
  model::TrainConfig cfg = tiny_config();
  cfg.iterations = 4;
  data::Dataset ds = tiny_dataset();

  trainer::TrainResult a = trainer::train(cfg, ds);
  trainer::TrainResult b = trainer::train(cfg, ds);
  REQUIRE(a.logs.size() == b.logs.size());
  for (std::size_t t = 0; t < a.logs.size(); ++t) {
    CHECK(a.logs[t].total == b.logs[t].total);
    CHECK(a.logs[t].loss_loc == b.logs[t].loss_loc);
    CHECK(a.logs[t].loss_fus == b.logs[t].loss_fus);
    CHECK(a.logs[t].lr == b.logs[t].lr);
  }
  CHECK(a.model.params().flatten() == b.model.params().flatten());

  model::TrainConfig other = cfg;
  other.seed = 17;
  trainer::TrainResult c = trainer::train(other, ds);
  bool any_diff = false;
  for (std::size_t t = 0; t < a.logs.size() && !any_diff; ++t)
    any_diff = a.logs[t].total != c.logs[t].total;
  CHECK(any_diff);
}

TEST_CASE("schedule in the logs follows the cosine curve") {
  model::TrainConfig cfg = tiny_config();
  cfg.iterations = 5;
  data::Dataset ds = tiny_dataset(2);
  trainer::TrainResult res = trainer::train(cfg, ds);
  REQUIRE(res.logs.size() == 5);
  for (std::size_t t = 0; t < res.logs.size(); ++t) {
    CHECK(res.logs[t].lr ==
          Approx(trainer::cosine_lr(cfg.learning_rate, static_cast<std::int64_t>(t), 5))
              .margin(1e-15));
  }
}

TEST_CASE("short run reduces the training loss") {
  model::TrainConfig cfg = tiny_config();
  cfg.iterations = 80;
  cfg.batch_size = 4;
  cfg.learning_rate = 3e-3;
  data::Dataset ds = tiny_dataset(8);

  trainer::TrainResult res = trainer::train(cfg, ds);
  double head = 0.0, tail = 0.0;
  for (int t = 0; t < 10; ++t) head += res.logs[static_cast<std::size_t>(t)].total;
  for (int t = 70; t < 80; ++t) tail += res.logs[static_cast<std::size_t>(t)].total;
  CHECK(tail < head);
}

TEST_CASE("exploding parameters abort with a numeric error") {
  model::TrainConfig cfg = tiny_config();
  cfg.iterations = 3;
  // the first update moves parameters to ~1e200, so products overflow on the
  // next forward pass instead of training silently on garbage
  cfg.learning_rate = 1e200;
  data::Dataset ds = tiny_dataset(2);
  CHECK_THROWS_AS(trainer::train(cfg, ds), focus::NumericError);
}

TEST_CASE("supervision maps zero out reals and normalize fakes") {
  model::TrainConfig cfg = tiny_config();
  data::Dataset ds = tiny_dataset(3);
  model::FocusModel m(cfg);

  std::vector<trainer::MapRecord> maps = trainer::generate_maps(m, ds, false);
  REQUIRE(maps.size() == 6);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const trainer::MapRecord& r = maps[i];
    CHECK(r.id == ds.entries[i].id);
    CHECK(r.label == ds.entries[i].label);
    REQUIRE(r.map.ndim() == 2);
    CHECK(r.map.dim(0) == cfg.grid_side());
    CHECK(r.map.dim(1) == cfg.grid_side());
    if (r.label == 0) {
      CHECK_FALSE(r.normalized);
      for (std::int64_t k = 0; k < r.map.numel(); ++k) CHECK(r.map[k] == 0.0);
    } else {
      CHECK(r.normalized);
      CHECK(r.map.min() == Approx(0.0).margin(1e-12));
      CHECK(r.map.max() == Approx(1.0).margin(1e-12));
    }
  }
}

TEST_CASE("fake-only maps stay raw for both labels") {
  model::TrainConfig cfg = tiny_config();
  data::Dataset ds = tiny_dataset(3);
  model::FocusModel m(cfg);

  std::vector<trainer::MapRecord> maps = trainer::generate_maps(m, ds, true);
  REQUIRE(maps.size() == 6);
  for (const trainer::MapRecord& r : maps) {
    CHECK_FALSE(r.normalized);
    CHECK(r.map.min() > 0.0);
    CHECK(r.map.max() < 1.0);
  }
  // fakes carry the fused map in both modes; raw values sit strictly inside
  // (0,1) so the normalized variant must differ
  std::vector<trainer::MapRecord> sup = trainer::generate_maps(m, ds, false);
  bool saw_fake = false;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].label != 1) continue;
    saw_fake = true;
    CHECK_FALSE(maps[i].map.vec() == sup[i].map.vec());
  }
  CHECK(saw_fake);
}

TEST_CASE("map generation is deterministic") {
  model::TrainConfig cfg = tiny_config();
  data::Dataset ds = tiny_dataset(2);
  model::FocusModel m(cfg);
  std::vector<trainer::MapRecord> a = trainer::generate_maps(m, ds, true);
  std::vector<trainer::MapRecord> b = trainer::generate_maps(m, ds, true);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].map.vec() == b[i].map.vec());
}

TEST_CASE("exported maps round-trip through pgm plus sidecar") {
  const auto dir = std::filesystem::temp_directory_path() / "focus_map_export";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  Tensor map({2, 2});
  map[0] = 0.0;
  map[1] = 0.5;
  map[2] = 0.25;
  map[3] = 1.0;
  trainer::MapSidecar info{"000001_fake", 1, "focus", "00deadbeef001717", true};
  trainer::export_map(map, dir / "000001_fake.pgm", info);

  Tensor back = focus::read_pgm(dir / "000001_fake.pgm");
  REQUIRE(back.numel() == 4);
  CHECK(back[0] == 0.0);
  CHECK(back[1] == Approx(128.0 / 255.0).margin(1e-12));
  CHECK(back[2] == Approx(64.0 / 255.0).margin(1e-12));
  CHECK(back[3] == 1.0);

  std::ifstream side(dir / "000001_fake.json");
  REQUIRE(side.good());
  nlohmann::json j;
  side >> j;
  CHECK(j.at("id") == "000001_fake");
  CHECK(j.at("label") == 1);
  CHECK(j.at("grid_h") == 2);
  CHECK(j.at("grid_w") == 2);
  CHECK(j.at("generator") == "focus");
  CHECK(j.at("checkpoint_hash") == "00deadbeef001717");
  CHECK(j.at("normalized") == true);

  Tensor bad({2, 2});
  bad.fill(1.5);
  CHECK_THROWS_AS(trainer::export_map(bad, dir / "x.pgm", info), focus::InputError);
  Tensor cube({2, 2, 2});
  CHECK_THROWS_AS(trainer::export_map(cube, dir / "y.pgm", info), focus::InputError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoints restore bit-identical models") {
  const auto dir = std::filesystem::temp_directory_path() / "focus_ckpt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  model::TrainConfig cfg = tiny_config();
  data::Dataset ds = tiny_dataset(2);
  trainer::TrainResult res = trainer::train(cfg, ds);
  checkpoint::save(dir / "m.ckpt", cfg, res.model.params(), cfg.iterations);

  checkpoint::Checkpoint ck = checkpoint::load(dir / "m.ckpt");
  CHECK(ck.iteration == cfg.iterations);
  CHECK(nlohmann::json(ck.config) == nlohmann::json(cfg));

  model::FocusModel back = ck.restore();
  CHECK(back.params().flatten() == res.model.params().flatten());

  const imaging::ImageSample sample = ds.sample(1);
  auto run = [&](const model::FocusModel& m) {
    ad::Tape tape;
    model::TapeRefs refs = m.instantiate(tape, false);
    model::Forward f =
        m.forward(tape, refs, sample.pixels, sample.label, nullptr, fusion::MaskMode::kInference);
    std::vector<double> out = f.a_fus->value.vec();
    out.push_back(f.y_fus->value.at(0, 0));
    out.push_back(f.y_fus->value.at(0, 1));
    return out;
  };
  CHECK(run(back) == run(res.model));
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint hash is stable and content-sensitive") {
  const auto dir = std::filesystem::temp_directory_path() / "focus_ckpt_hash";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  model::TrainConfig cfg = tiny_config();
  model::FocusModel m(cfg);
  checkpoint::save(dir / "a.ckpt", cfg, m.params(), 5);
  checkpoint::save(dir / "b.ckpt", cfg, m.params(), 5);
  checkpoint::save(dir / "c.ckpt", cfg, m.params(), 6);

  const std::string ha = checkpoint::file_hash(dir / "a.ckpt");
  CHECK(ha.size() == 16);
  CHECK(ha.find_first_not_of("0123456789abcdef") == std::string::npos);
  CHECK(ha == checkpoint::file_hash(dir / "b.ckpt"));
  CHECK(ha != checkpoint::file_hash(dir / "c.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupted checkpoints are rejected") {
  const auto dir = std::filesystem::temp_directory_path() / "focus_ckpt_bad";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  model::TrainConfig cfg = tiny_config();
  model::FocusModel m(cfg);
  const std::string good = checkpoint::encode(cfg, m.params(), 1);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(checkpoint::decode(bad_magic, "mem"), focus::InputError);

  CHECK_THROWS_AS(checkpoint::decode(good.substr(0, good.size() / 2), "mem"), focus::InputError);
  CHECK_THROWS_WITH(checkpoint::decode(good + "zz", "mem"), ContainsSubstring("trailing"));

  checkpoint::Checkpoint ck = checkpoint::decode(good, "mem");
  ck.names.pop_back();
  ck.tensors.pop_back();
  CHECK_THROWS_AS(ck.restore(), focus::InputError);

  CHECK_THROWS_AS(checkpoint::load(dir / "missing.ckpt"), focus::IoError);
  std::filesystem::remove_all(dir);
}
