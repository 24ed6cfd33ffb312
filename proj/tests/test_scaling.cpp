#include <catch_amalgamated.hpp>

#include "bboxdp/scaling.hpp"

using namespace bxl;
using Catch::Approx;

namespace {
data::DatasetManifest synthetic_manifest(int classes, int envs, int per_pair) {
  data::DatasetManifest m;
  m.spec.class_count = classes;
  m.spec.env_count = envs;
  m.spec.demos_per_class = envs * per_pair;
  int id = 0;
  for (int c = 0; c < classes; ++c)
    for (int k = 0; k < envs * per_pair; ++k) {
      data::RecordEntry e;
      e.id = id++;
      e.class_id = c;
      e.env_id = k % envs;
      e.k = k;
      m.records.push_back(e);
      m.per_class[c] += 1;
      m.per_env[e.env_id] += 1;
    }
  return m;
}

scale::CellResult result(int m, int n, int j, double s) {
  scale::CellResult r;
  r.cell.m = m;
  r.cell.n_exp = n;
  r.cell.j = j;
  r.mean_score = s;
  return r;
}
}  // namespace

TEST_CASE("grid enumeration counts") {
  const auto full = scale::enumerate_cells(scale::full_grid(), synthetic_manifest(16, 4, 25));
  CHECK(full.size() == 76);
  const auto desk = scale::enumerate_cells(scale::desk_grid(), synthetic_manifest(8, 3, 8));
  CHECK(desk.size() == 30);
  const auto again = scale::enumerate_cells(scale::desk_grid(), synthetic_manifest(8, 3, 8));
  CHECK(desk == again);
}

TEST_CASE("cell subsets") {
  const auto man = synthetic_manifest(8, 3, 8);
  const auto cells = scale::enumerate_cells(scale::desk_grid(), man);
  for (const auto& c : cells) {
    CHECK(static_cast<int>(c.classes.size()) == (1 << c.m));
    CHECK(std::is_sorted(c.demo_ids.begin(), c.demo_ids.end()));
    // every (class, env) pair contributes ceil(2^n * 8) records
    const int per = static_cast<int>(std::ceil(std::ldexp(8.0, c.n_exp)));
    CHECK(c.total_demos() == per * 3 * static_cast<int>(c.classes.size()));
  }
  // demo subsets are nested along n for the same (m, j)
  for (const auto& a : cells)
    for (const auto& b : cells)
      if (a.m == b.m && a.j == b.j && a.n_exp < b.n_exp) {
        CHECK(a.classes == b.classes);
        CHECK(std::includes(b.demo_ids.begin(), b.demo_ids.end(), a.demo_ids.begin(), a.demo_ids.end()));
      }
  const auto reg = sim::ClassRegistry::standard();
  for (const auto& c : scale::enumerate_cells(scale::desk_grid(), man, &reg)) {
    CHECK(c.diversity > 0);
    CHECK(c.diversity <= 1);
  }
}

TEST_CASE("grid validation") {
  auto g = scale::desk_grid();
  g.unseen_classes.push_back(3);
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = scale::desk_grid();
  CHECK_THROWS_AS(g.validate({0, 1, 2, 3}), ConfigError);
  g.m_values = {4};
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = scale::desk_grid();
  g.n_values = {1};
  CHECK_THROWS_AS(g.validate(), ConfigError);
}

TEST_CASE("aggregation") {
  const auto one = scale::aggregate({result(0, 0, 1, 0.3)});
  REQUIRE(one.size() == 1);
  CHECK(one[0].mean == 0.3);
  CHECK(one[0].std == 0.0);
  const auto two = scale::aggregate({result(1, 0, 1, 0.4), result(1, 0, 2, 0.6)});
  CHECK(two[0].mean == Approx(0.5));
  std::vector<scale::CellResult> rs{result(0, 0, 1, 0.1), result(0, 0, 2, 0.7), result(0, 0, 3, 0.31),
                                    result(1, 0, 1, 0.2), result(1, -1, 1, 0.9)};
  const auto base = scale::aggregate(rs);
  std::reverse(rs.begin(), rs.end());
  const auto perm = scale::aggregate(rs);
  REQUIRE(base.size() == perm.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(base[i].mean == perm[i].mean);
    CHECK(base[i].std == perm[i].std);
  }
  CHECK_THROWS_AS(scale::aggregate(rs, {{3, 0}}), scale::AggregationError);
  auto failed = result(2, 0, 1, 0.0);
  failed.error = "boom";
  CHECK(scale::aggregate({failed, result(2, 0, 2, 0.5)})[0].reps == 1);
}

TEST_CASE("power-law fit") {
  std::vector<std::pair<double, double>> pts;
  for (double x : {1.0, 2.0, 4.0, 8.0}) pts.emplace_back(x, 0.5 * std::pow(x, -0.3));
  const auto f = scale::fit_powerlaw(pts);
  CHECK(std::abs(f.alpha + 0.3) <= 1e-9);
  CHECK(std::abs(f.beta - 0.5) <= 1e-9);
  CHECK(std::abs(std::abs(f.r) - 1.0) <= 1e-12);

  auto doubled = pts;
  for (auto& p : doubled) p.second *= 2;
  const auto g = scale::fit_powerlaw(doubled);
  CHECK(g.beta == Approx(2 * f.beta));
  CHECK(g.alpha == Approx(f.alpha));
  CHECK(g.r == Approx(f.r));

  CHECK_THROWS_AS(scale::fit_powerlaw({{1, 0.4}, {2, 0.4}, {4, 0.4}}), scale::FitError);
  CHECK_THROWS_AS(scale::fit_powerlaw({{1, 0.4}}), scale::FitError);
  auto with_zero = pts;
  with_zero.emplace_back(16.0, 0.0);
  const auto h = scale::fit_powerlaw(with_zero);
  CHECK(h.points == 4);
  CHECK(h.warnings.size() == 1);
}

TEST_CASE("trend check") {
  auto row = [](int m, double mean, double sd) {
    scale::AggregateRow r;
    r.m = m;
    r.mean = mean;
    r.std = sd;
    return r;
  };
  CHECK(scale::trend_non_decreasing({row(0, 0.1, 0), row(1, 0.2, 0), row(2, 0.3, 0)}, 0));
  CHECK(scale::trend_non_decreasing({row(0, 0.1, 0.05), row(1, 0.3, 0.05), row(2, 0.28, 0.05), row(3, 0.4, 0)}, 0));
  std::string why;
  CHECK_FALSE(scale::trend_non_decreasing({row(0, 0.3, 0.01), row(1, 0.1, 0.01)}, 0, &why));
  CHECK(!why.empty());
  CHECK_FALSE(scale::trend_non_decreasing(
      {row(0, 0.3, 0.1), row(1, 0.25, 0.1), row(2, 0.4, 0.1), row(3, 0.35, 0.1)}, 0));
}

TEST_CASE("cells run end to end and reproduce") {
  const auto reg = sim::ClassRegistry::standard();
  data::DatasetSpec spec;
  spec.env_count = 3;
  spec.class_count = 8;
  spec.demos_per_class = 3;
  spec.master_seed = 4;
  const auto ds = data::build_dataset(reg, spec);
  auto g = scale::desk_grid();
  g.m_values = {0, 1};
  g.n_values = {0};
  g.reps = 1;
  g.trials_per_object = 1;
  policy::PolicyConfig pc;
  pc.max_steps = 10;
  pc.net.width = 32;
  const auto cells = scale::enumerate_cells(g, ds.manifest, &reg);
  const auto sp = scale::dataset_score_params(ds);
  const auto a = scale::run_grid(cells, ds, reg, g, pc, sp, 1);
  const auto b = scale::run_grid(cells, ds, reg, g, pc, sp, 2);
  REQUIRE(a.size() == cells.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].ok());
    CHECK(a[i].trials == static_cast<int>(g.unseen_classes.size()) * g.trials_per_object);
    CHECK(a[i].mean_score == b[i].mean_score);
    CHECK(a[i].trial_scores == b[i].trial_scores);
  }
  // a cell referring to a missing record fails alone
  auto broken = cells;
  broken[0].demo_ids.push_back(100000);
  const auto c = scale::run_grid(broken, ds, reg, g, pc, sp, 1);
  CHECK_FALSE(c[0].ok());
  CHECK(c[0].error.find(broken[0].key()) != std::string::npos);
  CHECK(c[1].ok());
}
