#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <sstream>

#include "focus/evalharness.hpp"

using namespace focus;
using evalharness::EvalConfig;
using evalharness::EvalModel;
using evalharness::MapSource;
using Catch::Matchers::ContainsSubstring;

namespace {

EvalConfig small_config() {
  EvalConfig cfg;
  cfg.image_size = 16;
  cfg.batch_size = 4;
  cfg.iterations = 10;
  cfg.learning_rate = 1e-3;
  cfg.seed = 5;
  return cfg;
}

data::Dataset small_dataset(int pairs, std::uint64_t seed = 21) {
  imaging::SyntheticSpec spec;
  spec.image_size = 16;
  spec.patch_area_frac = 0.2;
  spec.seed = seed;
  return data::make_synthetic_dataset(spec, pairs);
}

}  // namespace

TEST_CASE("eval config validates and round-trips through json") {
  EvalConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.side() == 16);
  cfg.dense_side = 8;
  CHECK(cfg.side() == 8);

  nlohmann::json j = cfg;
  EvalConfig back = j.get<EvalConfig>();
  CHECK(back.image_size == cfg.image_size);
  CHECK(back.dense_side == cfg.dense_side);
  CHECK(back.learning_rate == cfg.learning_rate);
  CHECK(back.seed == cfg.seed);

  nlohmann::json bad = j;
  bad["patch_size"] = 4;
  CHECK_THROWS_MATCHES(bad.get<EvalConfig>(), ConfigError,
                       Catch::Matchers::MessageMatches(ContainsSubstring("patch_size")));

  EvalConfig broken = cfg;
  broken.batch_size = 3;
  CHECK_THROWS_AS(broken.validate(), ConfigError);
  broken = cfg;
  broken.learning_rate = 0.0;
  CHECK_THROWS_AS(broken.validate(), ConfigError);
  broken = cfg;
  broken.image_size = 8;
  CHECK_THROWS_AS(broken.validate(), ConfigError);

  const std::string h1 = evalharness::config_hash(cfg);
  CHECK(h1.size() == 16);
  EvalConfig other = cfg;
  other.seed = 6;
  CHECK(evalharness::config_hash(other) != h1);
}

TEST_CASE("eval model forward has the right shapes and ranges") {
  EvalConfig cfg = small_config();
  EvalModel m(cfg);
  data::Dataset ds = small_dataset(2);
  imaging::ImageSample s = ds.sample(1);
  REQUIRE(s.label == 1);

  ad::Tape tape;
  auto refs = m.instantiate(tape, false);
  auto out = m.forward(tape, refs, s.pixels, s.label, nullptr);

  REQUIRE(out.probs->value.ndim() == 2);
  CHECK(out.probs->value.dim(0) == 1);
  CHECK(out.probs->value.dim(1) == 2);
  const double sum = out.probs->value.at(0, 0) + out.probs->value.at(0, 1);
  CHECK(std::fabs(sum - 1.0) < 1e-12);

  REQUIRE(out.dense_map->value.ndim() == 3);
  CHECK(out.dense_map->value.dim(0) == 16);
  CHECK(out.dense_map->value.dim(1) == 16);
  CHECK(out.dense_map->value.dim(2) == 1);
  CHECK(out.dense_map->value.min() > 0.0);
  CHECK(out.dense_map->value.max() < 1.0);

  CHECK(out.bce == nullptr);
  CHECK(out.total == out.ce);

  Tensor target = s.gt_mask;
  auto sup = m.forward(tape, refs, s.pixels, s.label, &target);
  REQUIRE(sup.bce != nullptr);
  CHECK(std::fabs(sup.total->value[0] -
                  (sup.ce->value[0] + cfg.bce_weight * sup.bce->value[0])) < 1e-12);

  CHECK_THROWS_AS(m.forward(tape, refs, Tensor({8, 8, 3}), 0, nullptr), InputError);
  CHECK_THROWS_AS(m.forward(tape, refs, s.pixels, 2, nullptr), InputError);
}

TEST_CASE("held-out split is pair coherent") {
  data::Dataset ds = small_dataset(40);
  std::set<std::string> train_pairs, test_pairs;
  for (const auto& e : ds.entries) {
    const std::string key = e.real_file.empty() ? e.id : e.real_file;
    (evalharness::detail::held_out(e) ? test_pairs : train_pairs).insert(key);
  }
  CHECK_FALSE(train_pairs.empty());
  CHECK_FALSE(test_pairs.empty());
  for (const std::string& k : test_pairs) CHECK(train_pairs.count(k) == 0);
}

TEST_CASE("map sources resolve per entry") {
  data::Dataset ds = small_dataset(3);

  MapSource zero = MapSource::zero();
  Tensor z = zero.map_for(ds, 0);
  CHECK(z.dim(0) == 16);
  CHECK(z.max() == 0.0);

  MapSource gt = MapSource::ground_truth();
  CHECK(gt.map_for(ds, 0).max() == 0.0);  // real sample supervises toward zero
  Tensor fake_map = gt.map_for(ds, 1);
  CHECK(fake_map.max() == 1.0);
  CHECK(fake_map.min() == 0.0);

  std::vector<trainer::MapRecord> recs;
  recs.push_back({ds.entries[0].id, 0, Tensor({4, 4}), false});
  MapSource from_recs = MapSource::records(recs, "focus");
  CHECK(from_recs.name() == "focus");
  CHECK(from_recs.map_for(ds, 0).dim(0) == 4);
  CHECK_THROWS_MATCHES(from_recs.map_for(ds, 1), InputError,
                       Catch::Matchers::MessageMatches(ContainsSubstring(ds.entries[1].id)));

  MapSource dir = MapSource::directory("/nonexistent/dir");
  CHECK_THROWS_MATCHES(dir.map_for(ds, 0), InputError,
                       Catch::Matchers::MessageMatches(ContainsSubstring(ds.entries[0].id)));
}

TEST_CASE("eval training is deterministic and fills the report") {
  EvalConfig cfg = small_config();
  data::Dataset ds = small_dataset(25);

  std::ostringstream log;
  auto r1 = evalharness::train_eval_model(cfg, ds, MapSource::ground_truth(), &log);
  auto r2 = evalharness::train_eval_model(cfg, ds, MapSource::ground_truth());

  REQUIRE(r1.losses.size() == 10);
  CHECK(r1.losses == r2.losses);
  CHECK(r1.model.params().flatten() == r2.model.params().flatten());
  CHECK(r1.report.accuracy == r2.report.accuracy);
  CHECK(r1.report.auc == r2.report.auc);

  EvalConfig other = cfg;
  other.seed = 99;
  auto r3 = evalharness::train_eval_model(other, ds, MapSource::ground_truth());
  CHECK(r3.losses != r1.losses);

  const auto& rep = r1.report;
  CHECK(rep.supervision_source == "gt");
  CHECK(rep.seed == 5);
  CHECK(rep.config_hash == evalharness::config_hash(cfg));
  CHECK(rep.train_samples + rep.test_samples == 50);
  CHECK(rep.test_samples > 0);
  CHECK(rep.accuracy >= 0.0);
  CHECK(rep.accuracy <= 1.0);
  CHECK(rep.auc >= 0.0);
  CHECK(rep.auc <= 1.0);
  CHECK(rep.mean_dense > 0.0);
  CHECK(rep.mean_dense < 1.0);
  REQUIRE(rep.sweep.size() == 9);
  CHECK(rep.sweep.front().first == Catch::Approx(0.1));
  CHECK(rep.sweep.back().first == Catch::Approx(0.9));

  // one json line per step
  int lines = 0;
  std::istringstream in(log.str());
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("loss"));
    ++lines;
  }
  CHECK(lines == 10);

  nlohmann::json jr = rep;
  for (const char* key : {"accuracy", "auc", "map_iou", "map_precision", "map_recall",
                          "mean_dense", "sweep", "supervision_source", "seed", "config_hash",
                          "train_samples", "test_samples"})
    CHECK(jr.contains(key));
}

TEST_CASE("zero supervision drives the dense head toward zero") {
  EvalConfig cfg = small_config();
  cfg.iterations = 120;
  cfg.learning_rate = 3e-3;
  data::Dataset ds = small_dataset(25);
  auto res = evalharness::train_eval_model(cfg, ds, MapSource::zero());
  CHECK(res.report.mean_dense < 0.2);
  CHECK(res.report.supervision_source == "zero");
}

TEST_CASE("eval training rejects bad inputs") {
  EvalConfig cfg = small_config();
  data::Dataset empty;
  CHECK_THROWS_AS(evalharness::train_eval_model(cfg, empty, MapSource::zero()), InputError);

  data::Dataset ds = small_dataset(10);
  EvalConfig wrong = cfg;
  wrong.image_size = 32;
  CHECK_THROWS_MATCHES(
      evalharness::train_eval_model(wrong, ds, MapSource::zero()), InputError,
      Catch::Matchers::MessageMatches(ContainsSubstring("size")));
}

TEST_CASE("report table lines up sources") {
  evalharness::EvalReport a;
  a.supervision_source = "zero";
  a.accuracy = 0.75;
  evalharness::EvalReport b;
  b.supervision_source = "gt";
  b.accuracy = 0.9375;
  const std::string table = evalharness::report_table({a, b});
  CHECK_THAT(table, ContainsSubstring("source"));
  CHECK_THAT(table, ContainsSubstring("zero"));
  CHECK_THAT(table, ContainsSubstring("gt"));
  CHECK_THAT(table, ContainsSubstring("0.9375"));
}
