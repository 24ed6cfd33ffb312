#include <catch_amalgamated.hpp>

#include <boost/math/distributions/students_t.hpp>

#include "bboxdp/evalstat.hpp"

using namespace bxl;
using Catch::Approx;

namespace {
sim::StageVector stages(std::initializer_list<bool> f) {
  sim::StageVector v;
  v.count = static_cast<int>(f.size());
  int i = 0;
  for (bool b : f) v.flags[static_cast<std::size_t>(i++)] = b;
  return v;
}
}  // namespace

TEST_CASE("score hand cases") {
  eval::ScoreParams p;
  p.t_min = 20;
  p.t_max = 200;
  CHECK(std::abs(eval::score(stages({1, 1, 1}), 10, p) - 1.0) <= 1e-12);
  CHECK(std::abs(eval::score(stages({0, 0, 0}), 250, p) - 0.0) <= 1e-12);
  CHECK(std::abs(eval::score(stages({1, 1, 0}), 20, p) - (0.8 * 2.0 / 3.0 + 0.2)) <= 1e-12);
  CHECK(eval::time_term(110, p) == Approx(0.5));
}

TEST_CASE("score parameter validation") {
  eval::ScoreParams p;
  p.t_min = 50;
  p.t_max = 50;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.t_max = 200;
  p.eta = 0.9;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("success rate") {
  auto res = [](std::initializer_list<bool> done) {
    std::vector<eval::RolloutResult> v;
    for (bool d : done) {
      eval::RolloutResult r;
      r.stages = stages({d, d, d});
      v.push_back(r);
    }
    return v;
  };
  CHECK(eval::success_rate(res({1, 1})) == 1.0);
  CHECK(eval::success_rate(res({0, 0, 0})) == 0.0);
  CHECK(eval::success_rate(res({1, 0, 1, 1})) == 0.75);
}

TEST_CASE("welch t-test against closed form and Boost") {
  const std::vector<double> a{1, 2, 3}, b{2, 3, 4};
  const auto w = eval::welch_t(a, b);
  // both variances 1, n = 3: t = -1 / sqrt(2/3), df = (2/3)^2 / (2 (1/3)^2 / 2)
  CHECK(w.t == Approx(-1.0 / std::sqrt(2.0 / 3.0)).epsilon(1e-12));
  CHECK(std::abs(w.t - (-1.2247)) <= 1e-4);
  CHECK(std::abs(w.df - 4.0) <= 1e-9);
  const boost::math::students_t dist(w.df);
  const double p_boost = 2.0 * boost::math::cdf(dist, -std::abs(w.t));
  CHECK(w.p == Approx(p_boost).epsilon(1e-10));
  CHECK(std::abs(w.p - 0.2878) <= 1e-3);

  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> x(5 + rep), y(8);
    for (auto& v : x) v = rng.normal();
    for (auto& v : y) v = 2.0 * rng.normal() + 0.5;
    const auto r = eval::welch_t(x, y);
    const boost::math::students_t d(r.df);
    CHECK(r.p == Approx(2.0 * boost::math::cdf(d, -std::abs(r.t))).epsilon(1e-9));
  }
}

TEST_CASE("welch edge cases") {
  const std::vector<double> a{0.2, 0.4, 0.9};
  const auto same = eval::welch_t(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == Approx(1.0));
  CHECK(eval::welch_t({1, 1}, {1, 1}).p == 1.0);
  CHECK_THROWS_AS(eval::welch_t({1, 1}, {2, 2}), eval::StatisticsError);
  CHECK_THROWS_AS(eval::welch_t({1}, {2, 3}), eval::StatisticsError);
}

TEST_CASE("incomplete beta") {
  CHECK(eval::inc_beta(2, 3, 0.0) == 0.0);
  CHECK(eval::inc_beta(2, 3, 1.0) == 1.0);
  // I_x(1, 1) = x and I_x(a, 1) = x^a
  CHECK(eval::inc_beta(1, 1, 0.3) == Approx(0.3));
  CHECK(eval::inc_beta(2.5, 1, 0.4) == Approx(std::pow(0.4, 2.5)));
}

TEST_CASE("trial lists are canonical") {
  const std::vector<int> cls{16, 17, 18, 19};
  const auto a = eval::make_trials(cls, 3, sim::TaskKind::dispose, 5, 11);
  const auto b = eval::make_trials(cls, 3, sim::TaskKind::dispose, 5, 11);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].layout_seed == b[i].layout_seed);
    CHECK(a[i].distractors == b[i].distractors);
    CHECK(!a[i].distractors.empty());
    for (int d : a[i].distractors) CHECK(d != a[i].target_class);
  }
}

TEST_CASE("rollouts of an untrained policy") {
  const auto reg = sim::ClassRegistry::standard();
  policy::PolicyConfig cfg;
  cfg.net.width = 32;
  cfg.net.blocks = 1;
  const auto pol = policy::Policy::create(policy::CondMode::bbox, cfg, 1);
  const auto trials = eval::make_trials({0, 1}, 0, sim::TaskKind::dispose, 2, 5);
  eval::ScoreParams sp;
  sp.t_min = 20;
  const auto r1 = eval::rollout(pol, eval::InstructionSource::oracle(), reg, trials[0], sp);
  const auto r2 = eval::rollout(pol, eval::InstructionSource::oracle(), reg, trials[0], sp);
  CHECK(r1.stages == r2.stages);
  CHECK(r1.t == r2.t);
  CHECK(r1.score == r2.score);
  if (!r1.stages.all()) CHECK(r1.t == 200);
  if (r1.stages.completed() == 0) CHECK(r1.score == 0.0);

  const auto serial = eval::evaluate(pol, eval::InstructionSource::oracle(), reg, trials, sp, 1);
  const auto threaded = eval::evaluate(pol, eval::InstructionSource::oracle(), reg, trials, sp, 3);
  CHECK(serial.scores() == threaded.scores());
  CHECK(serial.trial_count == 4);
}

TEST_CASE("detector misses fall back to an empty instruction") {
  const auto reg = sim::ClassRegistry::standard();
  annot::Detector det;
  det.shape_scale.fill(1.0);
  det.threshold = 2.0;  // above any similarity: never fires
  annot::Prototype proto;
  proto.class_id = 0;
  det.prototypes.push_back(proto);
  policy::PolicyConfig cfg;
  cfg.net.width = 32;
  cfg.net.blocks = 1;
  const auto pol = policy::Policy::create(policy::CondMode::bbox, cfg, 1);
  const auto trials = eval::make_trials({0, 1}, 0, sim::TaskKind::dispose, 1, 5);
  eval::ScoreParams sp;
  sp.t_min = 20;
  const auto r = eval::rollout(pol, eval::InstructionSource::from(det), reg, trials[0], sp);
  CHECK(r.misses == r.replans);
  CHECK(r.misses > 0);
}
