#include <catch_amalgamated.hpp>

#include "bboxdp/expertdata.hpp"

using namespace bxl;

namespace {
const sim::ClassRegistry& reg() {
  static const auto r = sim::ClassRegistry::standard();
  return r;
}
}  // namespace

TEST_CASE("expert command at the waypoint is jitter only") {
  sim::Scene s = sim::spawn_scene(reg(), 0, sim::TaskKind::press, 2, {}, 4);
  auto& t = s.objects[static_cast<std::size_t>(s.target)];
  s.agent.x = t.x;
  s.agent.y = t.y;
  Rng rng(1);
  const data::ExpertConfig ec;
  for (int i = 0; i < 50; ++i) {
    const auto a = data::expert_action(s, s.task, s.target, rng, ec);
    CHECK(std::abs(a.dx) <= ec.jitter_clip);
    CHECK(std::abs(a.dy) <= ec.jitter_clip);
  }
}

TEST_CASE("expert moves toward a target on its right") {
  sim::Scene s = sim::spawn_scene(reg(), 0, sim::TaskKind::dispose, 2, {}, 4);
  auto& t = s.objects[static_cast<std::size_t>(s.target)];
  s.agent.x = std::max(0.5, t.x - 20.0);
  s.agent.y = t.y;
  Rng rng(2);
  double sum = 0;
  for (int i = 0; i < 100; ++i) sum += data::expert_action(s, s.task, s.target, rng).dx;
  CHECK(sum / 100 > 0.5);
}

TEST_CASE("expert census on dispose") {
  int ok = 0;
  for (int i = 0; i < 500; ++i) {
    Rng pick(derive_seed({77, static_cast<std::uint64_t>(i)}));
    const int c = pick.uniform_int(0, 31);
    const int d = (c + 1 + pick.uniform_int(0, 30)) % 32;
    try {
      ok += data::record_episode(reg(), i % 4, sim::TaskKind::dispose, c, {d}, static_cast<std::uint64_t>(i)).success;
    } catch (const sim::CrowdedError&) {
    }
  }
  CHECK(ok >= 490);
}

TEST_CASE("collected demonstrations") {
  const auto a = data::collect_demo(reg(), 1, sim::TaskKind::dispose, 5, {9, 12}, 31);
  const auto b = data::collect_demo(reg(), 1, sim::TaskKind::dispose, 5, {9, 12}, 31);
  CHECK(a.success);
  CHECK(a.stages.all());
  CHECK(a.actions.size() + 1 == a.frames.size());
  CHECK(a.bboxes.size() == a.frames.size());
  const auto s0 = sim::spawn_scene(reg(), 1, sim::TaskKind::dispose, 5, {9, 12}, a.seed);
  const auto& t = s0.objects[static_cast<std::size_t>(s0.target)];
  CHECK(a.bboxes[0].contains(static_cast<int>(t.x), static_cast<int>(t.y)));
  CHECK(annot::min_bbox(sim::ground_truth_mask(s0, s0.target)) == a.bboxes[0]);
  CHECK(a.actions.size() == b.actions.size());
  for (std::size_t i = 0; i < a.actions.size(); ++i) {
    CHECK(a.actions[i].dx == b.actions[i].dx);
    CHECK(a.actions[i].g == b.actions[i].g);
  }
  for (std::size_t i = 0; i < a.frames.size(); ++i) CHECK(a.frames[i].raster == b.frames[i].raster);
}

TEST_CASE("collection failure names the configuration") {
  data::ExpertConfig ec;
  ec.gain = 0.0;  // never moves, so every attempt hits the cap
  sim::SimConfig sc;
  sc.episode_cap = 10;
  try {
    data::collect_demo(reg(), 2, sim::TaskKind::dispose, 7, {}, 5, ec, sc);
    FAIL("expected a collection error");
  } catch (const data::CollectionError& e) {
    const std::string m = e.what();
    CHECK(m.find("env 2") != std::string::npos);
    CHECK(m.find("class 7") != std::string::npos);
  }
}

TEST_CASE("dataset layout arithmetic") {
  data::DatasetSpec spec;
  spec.env_count = 2;
  spec.class_count = 8;
  spec.demos_per_class = 30;
  spec.master_seed = 7;
  const auto ds = data::build_dataset(reg(), spec);
  CHECK(ds.demos.size() == 240);
  std::map<std::pair<int, int>, int> per;
  for (const auto& d : ds.demos) per[{d.target_class, d.env_id}] += 1;
  for (const auto& [k, n] : per) CHECK(n == 15);
  for (const auto& [c, n] : ds.manifest.per_class) CHECK(n == 30);
  int total = 0;
  for (const auto& [e, n] : ds.manifest.per_env) total += n;
  CHECK(total == static_cast<int>(ds.manifest.records.size()));
  for (const auto& d : ds.demos) {
    CHECK(d.distractors.size() >= 1);
    CHECK(d.distractors.size() <= 3);
    for (int x : d.distractors) CHECK(x != d.target_class);
  }

  // the full layout counts to 1600 without building it
  data::DatasetSpec big;
  CHECK(big.env_count == 4);
  CHECK(big.class_count == 16);
  CHECK(big.class_count * big.demos_per_class == 1600);
}

TEST_CASE("dataset spec validation") {
  data::DatasetSpec spec;
  spec.class_count = 0;
  CHECK_THROWS_AS(spec.validate(reg()), ConfigError);
  spec.class_count = 40;
  CHECK_THROWS_AS(spec.validate(reg()), ConfigError);
  spec.class_count = 4;
  spec.demos_per_class = 0;
  CHECK_THROWS_AS(spec.validate(reg()), ConfigError);
}

TEST_CASE("per-(class, env) counts differ by at most one") {
  data::DatasetSpec spec;
  spec.env_count = 3;
  spec.class_count = 2;
  spec.demos_per_class = 7;
  const auto ds = data::build_dataset(reg(), spec);
  std::map<int, std::map<int, int>> per;
  for (const auto& d : ds.demos) per[d.target_class][d.env_id] += 1;
  for (const auto& [c, m] : per) {
    int lo = 1 << 30, hi = 0;
    for (const auto& [e, n] : m) lo = std::min(lo, n), hi = std::max(hi, n);
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("every demonstration replays") {
  data::DatasetSpec spec;
  spec.env_count = 3;
  spec.class_count = 6;
  spec.demos_per_class = 4;
  for (const auto& d : data::build_dataset(reg(), spec).demos) {
    const auto s = data::replay(reg(), d);
    CHECK(sim::stage_status(s, d.task, s.target) == d.stages);
  }
}
