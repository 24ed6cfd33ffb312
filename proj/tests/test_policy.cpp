#include <catch_amalgamated.hpp>

#include "bboxdp/evalstat.hpp"

using namespace bxl;
using Catch::Approx;

namespace {
const sim::ClassRegistry& reg() {
  static const auto r = sim::ClassRegistry::standard();
  return r;
}

policy::PolicyConfig small_config() {
  policy::PolicyConfig c;
  c.net.width = 64;
  c.net.blocks = 2;
  return c;
}
}  // namespace

TEST_CASE("noise schedule") {
  const auto s = policy::make_schedule(50, 1e-4, 0.02);
  CHECK(s.alpha_bar(1) == Approx(0.9999).epsilon(1e-12));
  CHECK(s.alpha_bar(0) == 1.0);
  for (int k = 1; k <= 50; ++k) CHECK(s.alpha_bar(k) < s.alpha_bar(k - 1));
  const auto one = policy::make_schedule(1, 0.05, 0.3);
  CHECK(one.alpha_bar(1) == Approx(0.95));
  CHECK_THROWS_AS(policy::make_schedule(0, 1e-4, 0.02), ConfigError);
  CHECK_THROWS_AS(policy::make_schedule(10, 0.2, 0.1), ConfigError);
  CHECK_THROWS_AS(policy::make_schedule(10, 0.0, 0.1), ConfigError);
  CHECK_THROWS_AS(policy::make_schedule(10, 0.1, 1.0), ConfigError);
}

TEST_CASE("forward noise identities") {
  const auto s = policy::make_schedule(50, 2e-3, 0.4);
  const std::vector<double> a0{0.3, -0.7, 0.1}, eps{1.0, -2.0, 0.5}, zero(3, 0.0);
  CHECK(policy::forward_noise(a0, 0, eps, s) == a0);
  const auto z = policy::forward_noise(zero, 17, eps, s);
  for (std::size_t i = 0; i < 3; ++i) CHECK(z[i] == Approx(std::sqrt(1 - s.alpha_bar(17)) * eps[i]));
  CHECK_THROWS_AS(policy::forward_noise(a0, 51, eps, s), ContractError);
  CHECK_THROWS_AS(policy::forward_noise(a0, -1, eps, s), ContractError);
}

TEST_CASE("observation encoding") {
  const auto sc = sim::spawn_scene(reg(), 0, sim::TaskKind::dispose, 3, {4}, 1);
  const auto r = sim::render(sc);
  const std::array<double, 3> pp{10, 20, 1};
  const auto full = policy::encode_obs(r, annot::BBox{0, 0, 64, 64}, pp, policy::CondMode::bbox);
  REQUIRE(full.size() == policy::cond_dim(policy::CondMode::bbox, {}));
  for (int i = 0; i < policy::kInstructionFeatures; ++i) CHECK(full[policy::kRawFeatures + i] == Approx(1.0));

  const auto a = policy::encode_obs(r, annot::BBox{3, 3, 20, 20}, pp, policy::CondMode::bbox);
  const auto b = policy::encode_obs(r, annot::BBox{30, 40, 50, 60}, pp, policy::CondMode::bbox);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool instr = i >= policy::kRawFeatures && i < policy::kRawFeatures + policy::kInstructionFeatures;
    if (!instr) CHECK(a[i] == b[i]);
  }
  CHECK(a != b);

  const auto t = policy::encode_obs(r, policy::ClassInstruction{7}, pp, policy::CondMode::text);
  int nz = 0;
  for (int i = 0; i < 32; ++i) nz += t[policy::kRawFeatures + i] != 0.0;
  CHECK(nz == 1);

  const auto k = policy::encode_obs(r, annot::PixelPoint{12, 30}, pp, policy::CondMode::keypoint);
  CHECK(k.size() == full.size());

  CHECK_THROWS_AS(policy::encode_obs(r, annot::BBox{0, 0, 4, 4}, pp, policy::CondMode::text), ContractError);
  CHECK_THROWS_AS(policy::encode_obs(r, policy::ClassInstruction{1}, pp, policy::CondMode::bbox), ContractError);
  const auto miss = policy::encode_obs(r, policy::NoInstruction{}, pp, policy::CondMode::bbox);
  for (int i = 0; i < policy::kInstructionFeatures; ++i) CHECK(miss[policy::kRawFeatures + i] == 0.0);
}

TEST_CASE("ddim timesteps") {
  const auto ks = policy::ddim_timesteps(50, 10);
  CHECK(ks.front() == 50);
  CHECK(ks.back() == 0);
  CHECK(ks.size() == 11);
  CHECK(policy::ddim_timesteps(50, 50).size() == 51);
}

TEST_CASE("training step sanity") {
  auto cfg = small_config();
  SECTION("initial loss is near one") {
    auto p = policy::Policy::create(policy::CondMode::bbox, cfg, 3);
    Rng rng(9);
    std::vector<policy::TrainingPair> pairs(64);
    for (auto& tp : pairs) {
      tp.cond.resize(static_cast<std::size_t>(p.net.cond_dim));
      for (auto& v : tp.cond) v = rng.normal();
      tp.chunk.resize(static_cast<std::size_t>(p.chunk_dim()));
      for (auto& v : tp.chunk) v = rng.uniform(-1, 1);
    }
    std::vector<const policy::TrainingPair*> batch;
    for (const auto& tp : pairs) batch.push_back(&tp);
    ad::AdamState st;
    st.config.lr = 0.0;
    double mean = 0;
    for (int i = 0; i < 10; ++i) mean += policy::train_step(p, batch, rng, st) / 10;
    CHECK(mean == Approx(1.0).margin(0.2));
  }
  SECTION("a single repeated sample is overfit") {
    cfg.denoise_steps = 2;  // few noise levels so one sample can be memorised per level
    cfg.sample_steps = 2;
    auto p = policy::Policy::create(policy::CondMode::bbox, cfg, 3);
    Rng rng(9);
    policy::TrainingPair tp;
    tp.cond.assign(static_cast<std::size_t>(p.net.cond_dim), 0.5);
    tp.chunk.assign(static_cast<std::size_t>(p.chunk_dim()), 0.25);
    const std::vector<const policy::TrainingPair*> batch(1, &tp);
    ad::AdamState st;
    st.config.lr = 1e-3;
    Rng fixed(1);
    double last = 1e9;
    for (int i = 0; i < 500; ++i) {
      // identical noise draw every step: the batch really is one repeated sample
      Rng r = fixed;
      last = policy::train_step(p, batch, r, st);
    }
    CHECK(last < 0.01);
  }
  SECTION("identical seeds give identical losses") {
    auto run = [&] {
      auto p = policy::Policy::create(policy::CondMode::bbox, cfg, 3);
      policy::TrainingPair tp;
      tp.cond.assign(static_cast<std::size_t>(p.net.cond_dim), 0.1);
      tp.chunk.assign(static_cast<std::size_t>(p.chunk_dim()), -0.3);
      const std::vector<const policy::TrainingPair*> batch(4, &tp);
      Rng rng(4);
      ad::AdamState st;
      std::vector<double> l;
      for (int i = 0; i < 20; ++i) l.push_back(policy::train_step(p, batch, rng, st));
      return l;
    };
    CHECK(run() == run());
  }
}

TEST_CASE("sampler on an untrained net") {
  const auto p = policy::Policy::create(policy::CondMode::bbox, small_config(), 8);
  std::vector<double> c1(static_cast<std::size_t>(p.net.cond_dim), 0.0), c2 = c1;
  c2[5] = 3.0;
  c2[200] = -2.0;
  const auto a = policy::ddim_sample_normalized(p, c1, 10, 42);
  CHECK(a == policy::ddim_sample_normalized(p, c1, 10, 42));
  // the untrained sampler saturates at the clip bounds, so look at the noise prediction
  const std::vector<double> x(static_cast<std::size_t>(p.chunk_dim()), 0.1);
  CHECK(p.net.predict(x, p.standardize(c1), 10) != p.net.predict(x, p.standardize(c2), 10));
  CHECK_THROWS_AS(policy::ddim_sample_normalized(p, c1, 0, 1), ContractError);
  CHECK_THROWS_AS(policy::ddim_sample_normalized(p, c1, 51, 1), ContractError);
}

TEST_CASE("policy training on a small dataset") {
  data::DatasetSpec spec;
  spec.env_count = 3;
  spec.class_count = 8;
  spec.demos_per_class = 30;
  spec.master_seed = 2;
  const auto ds = data::build_dataset(reg(), spec);
  std::vector<const data::Demonstration*> demos;
  for (const auto& d : ds.demos) demos.push_back(&d);
  auto cfg = policy::PolicyConfig{};
  cfg.max_steps = 6000;
  policy::TrainReport rep;
  const auto pol = policy::train_policy(demos, policy::CondMode::bbox, cfg, 1, &rep);
  REQUIRE(rep.losses.size() == 6000);
  double head = 0, tail = 0;
  for (int i = 0; i < 100; ++i) head += rep.losses[static_cast<std::size_t>(i)], tail += rep.losses[rep.losses.size() - 1 - static_cast<std::size_t>(i)];
  CHECK(tail < head);

  SECTION("sample_steps = K and 10 agree to 0.1 per dimension on average") {
    double diff = 0;
    int n = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      const auto& d = ds.demos[i * 11];
      const auto cond = policy::encode_obs(d.frames[0].raster, d.bboxes[0], d.frames[0].proprio, pol.mode, cfg.encoder);
      const auto a = policy::ddim_sample_normalized(pol, cond, 10, i);
      const auto b = policy::ddim_sample_normalized(pol, cond, cfg.denoise_steps, i);
      for (std::size_t j = 0; j < a.size(); ++j) diff += std::abs(a[j] - b[j]), ++n;
    }
    CHECK(diff / n <= 0.1);
  }
  SECTION("oracle-box rollouts approach seen targets") {
    const auto trials = eval::make_trials(spec.class_ids(), 0, sim::TaskKind::dispose, 5, 99);
    eval::ScoreParams sp;
    sp.t_min = data::completion_percentile(ds.demos);
    const auto r = eval::evaluate(pol, eval::InstructionSource::oracle(), reg(), trials, sp);
    int approach = 0;
    for (const auto& x : r.results) approach += x.stages.flags[0];
    CHECK(approach >= 0.7 * static_cast<double>(r.results.size()));
  }
}

TEST_CASE("non-finite training reports the last finite loss") {
  data::DatasetSpec spec;
  spec.env_count = 1;
  spec.class_count = 1;
  spec.demos_per_class = 2;
  const auto ds = data::build_dataset(reg(), spec);
  std::vector<const data::Demonstration*> demos;
  for (const auto& d : ds.demos) demos.push_back(&d);
  auto cfg = small_config();
  cfg.max_steps = 200;
  cfg.lr = 1e150;
  try {
    policy::train_policy(demos, policy::CondMode::bbox, cfg, 1);
    FAIL("expected divergence");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("last finite loss") != std::string::npos);
  }
}
