#pragma once

// (m, n)_j grid over class-subset size 2^m and demo fraction 2^n: cell
// enumeration, per-cell train + unseen evaluation, aggregation, and the
// log-log power-law fit of the optimality gap.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "bboxdp/common.hpp"
#include "bboxdp/evalstat.hpp"
#include "bboxdp/expertdata.hpp"
#include "bboxdp/policy.hpp"
#include "bboxdp/worldsim.hpp"

namespace bxl::scale {

class AggregationError : public Error { using Error::Error; };
class FitError : public Error { using Error::Error; };

struct GridSpec {
  sim::TaskKind task = sim::TaskKind::dispose;
  std::vector<int> pool;      // training classes, P = pool.size()
  std::vector<int> m_values;  // 2^m classes per cell
  std::vector<int> n_values;  // demo fraction 2^n, n <= 0
  int reps = 5;               // J for every m with 2^m < P
  int min_total_demos = 0;    // cells with total <= this are dropped
  std::vector<int> unseen_classes;
  int unseen_env = 3;
  int trials_per_object = 5;
  std::uint64_t master_seed = 0;

  int reps_for(int m) const { return (1 << m) == static_cast<int>(pool.size()) ? 1 : reps; }

  void validate(const std::vector<int>& train_envs = {}) const {
    if (pool.empty()) throw ConfigError("grid: empty class pool");
    if (m_values.empty() || n_values.empty()) throw ConfigError("grid: need m and n values");
    for (int m : m_values)
      if (m < 0 || (1 << m) > static_cast<int>(pool.size()))
        throw ConfigError("grid: 2^" + std::to_string(m) + " exceeds pool size " + std::to_string(pool.size()));
    for (int n : n_values)
      if (n > 0) throw ConfigError("grid: demo exponent n must be <= 0");
    if (reps < 1 || trials_per_object < 1) throw ConfigError("grid: reps and trials must be >= 1");
    for (int c : unseen_classes)
      if (std::find(pool.begin(), pool.end(), c) != pool.end())
        throw ConfigError("grid: unseen class " + std::to_string(c) + " is in the training pool");
    if (std::find(train_envs.begin(), train_envs.end(), unseen_env) != train_envs.end())
      throw ConfigError("grid: unseen env " + std::to_string(unseen_env) + " is a training env");
  }
};

inline std::vector<int> iota_vec(int lo, int hi) {
  std::vector<int> v;
  for (int i = lo; i <= hi; ++i) v.push_back(i);
  return v;
}

/// m in 0..4 over a pool of 16, n in 0..-5, J = 5, more than 50 demos.
inline GridSpec full_grid() {
  GridSpec g;
  g.pool = iota_vec(0, 15);
  g.m_values = iota_vec(0, 4);
  g.n_values = {0, -1, -2, -3, -4, -5};
  g.reps = 5;
  g.min_total_demos = 50;
  g.unseen_classes = iota_vec(16, 31);
  g.unseen_env = 4;
  g.trials_per_object = 5;
  return g;
}

/// m in 0..3 over a pool of 8, n in 0..-2, J = 3, no threshold.
inline GridSpec desk_grid() {
  GridSpec g;
  g.pool = iota_vec(0, 7);
  g.m_values = iota_vec(0, 3);
  g.n_values = {0, -1, -2};
  g.reps = 3;
  g.min_total_demos = 0;
  g.unseen_classes = iota_vec(16, 23);
  g.unseen_env = 3;
  g.trials_per_object = 5;
  return g;
}

struct Cell {
  int m = 0, n_exp = 0, j = 1;
  std::vector<int> classes;   // sorted
  std::vector<int> demo_ids;  // record ids, ascending
  std::uint64_t seed = 0;
  double diversity = 0;       // distinct shape kinds / subset size

  int total_demos() const { return static_cast<int>(demo_ids.size()); }
  std::string key() const {
    return "m" + std::to_string(m) + "_n" + std::to_string(n_exp) + "_j" + std::to_string(j);
  }
  bool operator==(const Cell&) const = default;
};

inline std::uint64_t s64(int v) { return static_cast<std::uint64_t>(static_cast<std::int64_t>(v)); }

/// Distinct shape kinds divided by subset size.
inline double shape_diversity(const sim::ClassRegistry& reg, const std::vector<int>& classes) {
  if (classes.empty()) return 0.0;
  std::set<int> kinds;
  for (int c : classes) kinds.insert(static_cast<int>(reg.at(c).shape));
  return static_cast<double>(kinds.size()) / static_cast<double>(classes.size());
}

/// Class subsets depend on (m, j) only and demo subsets are nested prefixes
/// of one shuffle per (m, j, class, env), so cells along n are comparable.
inline std::vector<Cell> enumerate_cells(const GridSpec& g, const data::DatasetManifest& man,
                                         const sim::ClassRegistry* reg = nullptr) {
  g.validate();
  std::map<std::pair<int, int>, std::vector<int>> by_ce;  // (class, env) -> record ids
  for (const auto& r : man.records) by_ce[{r.class_id, r.env_id}].push_back(r.id);
  for (int c : g.pool) {
    bool any = false;
    for (const auto& [ce, ids] : by_ce) any = any || ce.first == c;
    if (!any) throw ConfigError("grid: pool class " + std::to_string(c) + " has no demonstrations");
  }

  std::vector<Cell> cells;
  for (int m : g.m_values)
    for (int j = 1; j <= g.reps_for(m); ++j) {
      Rng crng(derive_seed({g.master_seed, 0xC1A55ULL, s64(m), s64(j)}));
      std::vector<int> pool = g.pool;
      const int want = 1 << m;
      for (int i = 0; i < want; ++i) {
        const int pick = crng.uniform_int(i, static_cast<int>(pool.size()) - 1);
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick)]);
      }
      std::vector<int> classes(pool.begin(), pool.begin() + want);
      std::sort(classes.begin(), classes.end());

      std::map<std::pair<int, int>, std::vector<int>> shuffled;
      for (int c : classes)
        for (const auto& [ce, ids] : by_ce) {
          if (ce.first != c) continue;
          std::vector<int> v = ids;
          Rng drng(derive_seed({g.master_seed, 0xDE305ULL, s64(m), s64(j), s64(c), s64(ce.second)}));
          for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(drng.uniform_int(0, i))]);
          shuffled[ce] = std::move(v);
        }

      for (int n : g.n_values) {
        Cell cell;
        cell.m = m;
        cell.n_exp = n;
        cell.j = j;
        cell.classes = classes;
        cell.seed = derive_seed({g.master_seed, 0xCE11ULL, s64(m), s64(n), s64(j)});
        const double frac = std::ldexp(1.0, n);
        for (const auto& [ce, ids] : shuffled) {
          const auto take = std::max<std::size_t>(
              1, static_cast<std::size_t>(std::ceil(frac * static_cast<double>(ids.size()) - 1e-9)));
          cell.demo_ids.insert(cell.demo_ids.end(), ids.begin(),
                               ids.begin() + static_cast<std::ptrdiff_t>(std::min(take, ids.size())));
        }
        std::sort(cell.demo_ids.begin(), cell.demo_ids.end());
        if (cell.total_demos() <= g.min_total_demos) continue;
        if (reg) cell.diversity = shape_diversity(*reg, classes);
        cells.push_back(std::move(cell));
      }
    }
  if (cells.empty()) throw ConfigError("grid: no cells survive the demo threshold");
  std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
    return std::tuple(a.m, -a.n_exp, a.j) < std::tuple(b.m, -b.n_exp, b.j);
  });
  return cells;
}

struct CellResult {
  Cell cell;
  double mean_score = 0;
  double success_rate = 0;
  int trials = 0;
  std::string checkpoint_id;
  std::vector<double> trial_scores;
  std::string error;  // non-empty when the cell failed

  bool ok() const { return error.empty(); }
};

/// Score parameters shared by every cell: t_min from the whole dataset's
/// expert completions, t_max the episode cap.
inline eval::ScoreParams dataset_score_params(const data::Dataset& ds, const sim::SimConfig& sc = {}) {
  eval::ScoreParams sp;
  sp.t_min = data::completion_percentile(ds.demos, 0.05);
  sp.t_max = sc.episode_cap;
  return sp;
}

inline CellResult run_cell(const Cell& cell, const data::Dataset& ds, const sim::ClassRegistry& reg,
                           const GridSpec& g, const policy::PolicyConfig& pc, const eval::ScoreParams& sp,
                           const sim::SimConfig& sc = {}) {
  try {
    std::vector<const data::Demonstration*> demos;
    for (int id : cell.demo_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= ds.demos.size())
        throw DataError("demo id " + std::to_string(id) + " not in dataset");
      demos.push_back(&ds.demos[static_cast<std::size_t>(id)]);
    }
    const policy::Policy pol = policy::train_policy(demos, policy::CondMode::bbox, pc, cell.seed);
    const auto trials = eval::make_trials(g.unseen_classes, g.unseen_env, g.task, g.trials_per_object,
                                          derive_seed({g.master_seed, 0xE7A1ULL}));
    const auto rep = eval::evaluate(pol, eval::InstructionSource::oracle(), reg, trials, sp, 1, sc);
    CellResult r;
    r.cell = cell;
    r.mean_score = rep.mean_score;
    r.success_rate = rep.success;
    r.trials = rep.trial_count;
    r.checkpoint_id = cell.key() + "_" + pol.digest;
    r.trial_scores = rep.scores();
    return r;
  } catch (const Error& e) {
    throw Error("cell " + cell.key() + ": " + e.what());
  }
}

using CellProgress = std::function<void(const CellResult&, std::size_t done, std::size_t total)>;

/// Runs cells on `threads` workers; results come back sorted by (m, n, j).
/// A failing cell is recorded with its error and does not stop the others.
inline std::vector<CellResult> run_grid(const std::vector<Cell>& cells, const data::Dataset& ds,
                                        const sim::ClassRegistry& reg, const GridSpec& g,
                                        const policy::PolicyConfig& pc, const eval::ScoreParams& sp, int threads = 1,
                                        const CellProgress& progress = {}, const sim::SimConfig& sc = {}) {
  std::vector<CellResult> out(cells.size());
  std::mutex mu;
  std::size_t next = 0, done = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lk(mu);
        if (next >= cells.size()) return;
        i = next++;
      }
      CellResult r;
      try {
        r = run_cell(cells[i], ds, reg, g, pc, sp, sc);
      } catch (const std::exception& e) {
        r = CellResult{};
        r.cell = cells[i];
        r.error = e.what();
      }
      std::lock_guard lk(mu);
      out[i] = std::move(r);
      ++done;
      if (progress) progress(out[i], done, cells.size());
    }
  };
  const int nt = std::clamp(threads, 1, std::max(1, static_cast<int>(cells.size())));
  if (nt == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  std::sort(out.begin(), out.end(), [](const CellResult& a, const CellResult& b) {
    return std::tuple(a.cell.m, -a.cell.n_exp, a.cell.j) < std::tuple(b.cell.m, -b.cell.n_exp, b.cell.j);
  });
  return out;
}

struct AggregateRow {
  int m = 0, n_exp = 0;
  double mean = 0;
  double std = 0;  // sample std over j, 0 for a single rep
  int reps = 0;
};

/// Unweighted mean of cell means per (m, n). `required` keys that have no
/// result raise an aggregation error.
inline std::vector<AggregateRow> aggregate(const std::vector<CellResult>& results,
                                           const std::vector<std::pair<int, int>>& required = {}) {
  std::map<std::pair<int, int>, std::vector<double>> by;
  for (const auto& r : results)
    if (r.ok()) by[{r.cell.m, r.cell.n_exp}].push_back(r.mean_score);
  for (const auto& k : required)
    if (!by.count(k))
      throw AggregationError("aggregate: no results for m=" + std::to_string(k.first) +
                             " n=" + std::to_string(k.second));
  std::vector<AggregateRow> rows;
  for (auto& [k, v] : by) {
    // sort first so the sum does not depend on result order
    std::sort(v.begin(), v.end());
    AggregateRow row;
    row.m = k.first;
    row.n_exp = k.second;
    row.reps = static_cast<int>(v.size());
    double s = 0;
    for (double x : v) s += x;
    row.mean = s / row.reps;
    if (row.reps > 1) {
      double ss = 0;
      for (double x : v) ss += (x - row.mean) * (x - row.mean);
      row.std = std::sqrt(ss / (row.reps - 1));
    }
    rows.push_back(row);
  }
  std::sort(rows.begin(), rows.end(), [](const AggregateRow& a, const AggregateRow& b) {
    return std::tuple(-a.n_exp, a.m) < std::tuple(-b.n_exp, b.m);
  });
  return rows;
}

struct PowerFit {
  double alpha = 0;
  double beta = 0;
  double r = 0;
  int points = 0;
  std::vector<std::string> warnings;
};

/// OLS of log Y on log X. Points with Y <= 0 are dropped with a warning.
inline PowerFit fit_powerlaw(const std::vector<std::pair<double, double>>& pts) {
  PowerFit f;
  std::vector<double> lx, ly;
  for (const auto& [x, y] : pts) {
    if (!(x > 0)) throw FitError("fit_powerlaw: X must be positive");
    if (!(y > 0)) {
      f.warnings.push_back("excluded point X=" + std::to_string(x) + " with Y=" + std::to_string(y) +
                           " (log undefined)");
      continue;
    }
    lx.push_back(std::log(x));
    ly.push_back(std::log(y));
  }
  const std::set<double> distinct(lx.begin(), lx.end());
  if (distinct.size() < 2) throw FitError("fit_powerlaw: fewer than 2 distinct X values with Y > 0");
  const double n = static_cast<double>(lx.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    syy += (ly[i] - my) * (ly[i] - my);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (syy <= 0) throw FitError("fit_powerlaw: zero variance in log Y, correlation undefined");
  f.alpha = sxy / sxx;
  f.beta = std::exp(my - f.alpha * mx);
  f.r = sxy / std::sqrt(sxx * syy);
  f.points = static_cast<int>(lx.size());
  return f;
}

/// Fit of the gap 1 - S against 2^m for one n, using the aggregated means.
inline PowerFit fit_gap(const std::vector<AggregateRow>& rows, int n_exp) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& r : rows)
    if (r.n_exp == n_exp) pts.emplace_back(std::ldexp(1.0, r.m), 1.0 - r.mean);
  return fit_powerlaw(pts);
}

/// Mean over j non-decreasing in m, allowing one inversion no larger than
/// the standard deviation of the two rows involved.
inline bool trend_non_decreasing(const std::vector<AggregateRow>& rows, int n_exp, std::string* why = nullptr) {
  std::vector<AggregateRow> v;
  for (const auto& r : rows)
    if (r.n_exp == n_exp) v.push_back(r);
  std::sort(v.begin(), v.end(), [](const AggregateRow& a, const AggregateRow& b) { return a.m < b.m; });
  int inversions = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    const double drop = v[i - 1].mean - v[i].mean;
    if (drop <= 0) continue;
    const double tol = std::max(v[i - 1].std, v[i].std);
    ++inversions;
    if (drop > tol || inversions > 1) {
      if (why)
        *why = "m=" + std::to_string(v[i - 1].m) + " -> m=" + std::to_string(v[i].m) + " drops by " +
               std::to_string(drop) + " (std " + std::to_string(tol) + ", inversion " + std::to_string(inversions) +
               ")";
      return false;
    }
  }
  return true;
}

}  // namespace bxl::scale
