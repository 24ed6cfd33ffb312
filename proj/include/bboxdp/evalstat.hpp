#pragma once

// Closed-loop rollouts, staged scoring, and Welch's t-test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "bboxdp/annotate.hpp"
#include "bboxdp/common.hpp"
#include "bboxdp/expertdata.hpp"
#include "bboxdp/policy.hpp"
#include "bboxdp/worldsim.hpp"

namespace bxl::eval {

class StatisticsError : public Error { using Error::Error; };

struct ScoreParams {
  double eta = 0.8;
  double lambda = 0.2;
  double t_min = 0;
  double t_max = 200;

  void validate() const {
    if (eta < 0 || lambda < 0 || std::abs(eta + lambda - 1.0) > 1e-12)
      throw ConfigError("score weights must be non-negative and sum to 1");
    if (!(t_min < t_max)) throw ConfigError("score requires t_min < t_max");
  }
};

inline double time_term(double t, const ScoreParams& p) {
  return std::clamp(1.0 - (t - p.t_min) / (p.t_max - p.t_min), 0.0, 1.0);
}

inline double score(const sim::StageVector& st, double t, const ScoreParams& p) {
  p.validate();
  double sum = 0;
  for (int m = 0; m < st.count; ++m) sum += st.flags[static_cast<std::size_t>(m)] ? 1.0 : 0.0;
  return p.eta * sum / st.count + p.lambda * time_term(t, p);
}

/// Where the policy's instruction comes from at each replan.
struct InstructionSource {
  enum class Kind { oracle, detector } kind = Kind::oracle;
  const annot::Detector* detector = nullptr;

  static InstructionSource oracle() { return {}; }
  static InstructionSource from(const annot::Detector& d) { return {Kind::detector, &d}; }
};

struct TrialSpec {
  int env_id = 0;
  sim::TaskKind task = sim::TaskKind::dispose;
  int target_class = 0;
  std::vector<int> distractors;
  std::uint64_t layout_seed = 0;
  std::uint64_t policy_seed = 0;
};

struct TrajectoryPoint {
  int clock = 0;
  double x = 0, y = 0, gripper = 0;
  sim::Action action;
};

struct RolloutResult {
  sim::StageVector stages;
  int t = 0;  // completion step, or t_max when incomplete
  double score = 0;
  std::vector<TrajectoryPoint> trajectory;
  std::vector<std::optional<annot::Detection>> detections;  // one per replan, detector mode only
  int misses = 0;
  int replans = 0;
};

inline policy::Instruction instruction_for(const policy::Policy& pol, const InstructionSource& src,
                                           const sim::Scene& s, const sim::Raster& r, int target_class,
                                           std::optional<annot::Detection>* det_out = nullptr) {
  using policy::CondMode;
  if (pol.mode == CondMode::text) return policy::ClassInstruction{target_class};
  if (src.kind == InstructionSource::Kind::oracle) {
    if (pol.mode == CondMode::bbox) return data::oracle_bbox(s, s.target);
    return policy::mask_centroid(sim::ground_truth_mask(s, s.target));
  }
  if (!src.detector) throw ContractError("rollout: detector source without a detector");
  auto d = annot::detect(*src.detector, r, target_class);
  if (det_out) *det_out = d;
  if (!d) return policy::NoInstruction{};
  if (pol.mode == CondMode::bbox) return d->bbox;
  return policy::keypoint_from_box(r, d->bbox);
}

/// Receding-horizon closed loop: instruct, encode, sample a chunk, execute its
/// first A_exec actions, repeat until every stage is done or the cap.
inline RolloutResult rollout(const policy::Policy& pol, const InstructionSource& src, const sim::ClassRegistry& reg,
                             const TrialSpec& trial, const ScoreParams& sp, const sim::SimConfig& sc = {},
                             bool keep_trajectory = true) {
  sp.validate();
  sim::Scene s = sim::spawn_scene(reg, trial.env_id, trial.task, trial.target_class, trial.distractors,
                                  trial.layout_seed, sc);
  const auto& cfg = pol.config;
  RolloutResult res;

  auto encode = [&](const sim::Scene& sc_, bool log) {
    const sim::Raster r = sim::render(sc_);
    std::optional<annot::Detection> det;
    const policy::Instruction ins = instruction_for(pol, src, sc_, r, trial.target_class, &det);
    if (log && std::holds_alternative<policy::NoInstruction>(ins)) ++res.misses;
    if (log && src.kind == InstructionSource::Kind::detector && pol.mode != policy::CondMode::text)
      res.detections.push_back(det);
    return policy::encode_obs(r, ins, data::proprio_of(sc_), pol.mode, cfg.encoder);
  };
  auto done = [&] { return sim::stage_status(s, trial.task, s.target).all(); };

  std::vector<double> prev = encode(s, false);
  while (s.clock < sc.episode_cap && !done()) {
    std::vector<double> cur = encode(s, true);
    const std::vector<double> cond = cfg.obs_horizon == 2 ? policy::average(cur, prev) : cur;
    const auto chunk =
        policy::ddim_sample(pol, cond, cfg.sample_steps, derive_seed({trial.policy_seed, static_cast<std::uint64_t>(res.replans)}));
    ++res.replans;
    prev = std::move(cur);
    for (int j = 0; j < cfg.exec_steps; ++j) {
      // the previous-frame encoding is the frame before the last executed action
      if (j == cfg.exec_steps - 1 && cfg.obs_horizon == 2) prev = encode(s, false);
      const sim::Action a = chunk[static_cast<std::size_t>(j)];
      sim::advance(s, a, sc);
      if (keep_trajectory) res.trajectory.push_back({s.clock, s.agent.x, s.agent.y, s.agent.gripper, a});
      if (s.clock >= sc.episode_cap || done()) break;
    }
  }
  res.stages = sim::stage_status(s, trial.task, s.target);
  res.t = res.stages.all() ? res.stages.completion_clock() : static_cast<int>(sp.t_max);
  res.t = std::min(res.t, static_cast<int>(sp.t_max));
  res.score = score(res.stages, res.t, sp);
  return res;
}

inline double success_rate(const std::vector<RolloutResult>& rs) {
  if (rs.empty()) throw ContractError("success_rate: no results");
  double n = 0;
  for (const auto& r : rs) n += r.stages.all() ? 1.0 : 0.0;
  return n / static_cast<double>(rs.size());
}

/// `trials_per_object` trials per target class, each with 1..3 distractors
/// drawn from the other classes of `classes`. The list is canonical: every
/// policy compared on it sees identical initial conditions and seeds.
inline std::vector<TrialSpec> make_trials(const std::vector<int>& classes, int env_id, sim::TaskKind task,
                                          int trials_per_object, std::uint64_t seed, int min_distractors = 1,
                                          int max_distractors = 3) {
  if (classes.empty() || trials_per_object < 1) throw ConfigError("make_trials: need classes and trials >= 1");
  std::vector<TrialSpec> out;
  for (int c : classes)
    for (int k = 0; k < trials_per_object; ++k) {
      TrialSpec t;
      t.env_id = env_id;
      t.task = task;
      t.target_class = c;
      const std::uint64_t base = derive_seed({seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(k)});
      Rng rng(base);
      std::vector<int> pool;
      for (int o : classes)
        if (o != c) pool.push_back(o);
      const int hi = std::min<int>(max_distractors, static_cast<int>(pool.size()));
      const int nd = std::min(hi, rng.uniform_int(min_distractors, std::max(min_distractors, hi)));
      for (int i = 0; i < nd; ++i) {
        const int pick = rng.uniform_int(i, static_cast<int>(pool.size()) - 1);
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick)]);
        t.distractors.push_back(pool[static_cast<std::size_t>(i)]);
      }
      t.layout_seed = derive_seed({base, 1});
      t.policy_seed = derive_seed({base, 2});
      out.push_back(std::move(t));
    }
  return out;
}

struct EvalReport {
  std::vector<TrialSpec> trials;
  std::vector<RolloutResult> results;
  std::map<int, double> per_object;  // class -> mean score
  double mean_score = 0;
  double success = 0;
  int trial_count = 0;

  std::vector<double> scores() const {
    std::vector<double> v;
    for (const auto& r : results) v.push_back(r.score);
    return v;
  }
};

/// Runs every trial, optionally across threads; results stay in trial order.
inline EvalReport evaluate(const policy::Policy& pol, const InstructionSource& src, const sim::ClassRegistry& reg,
                           const std::vector<TrialSpec>& trials, const ScoreParams& sp, int threads = 1,
                           const sim::SimConfig& sc = {}, bool keep_trajectory = false) {
  if (trials.empty()) throw ContractError("evaluate: no trials");
  EvalReport rep;
  rep.trials = trials;
  rep.results.resize(trials.size());
  const int nt = std::clamp(threads, 1, static_cast<int>(trials.size()));
  auto work = [&](int w) {
    for (std::size_t i = static_cast<std::size_t>(w); i < trials.size(); i += static_cast<std::size_t>(nt))
      rep.results[i] = rollout(pol, src, reg, trials[i], sp, sc, keep_trajectory);
  };
  if (nt == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(static_cast<std::size_t>(nt));
    for (int w = 0; w < nt; ++w)
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          errs[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errs)
      if (e) std::rethrow_exception(e);
  }
  std::map<int, std::pair<double, int>> acc;
  double total = 0;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    auto& a = acc[trials[i].target_class];
    a.first += rep.results[i].score;
    a.second += 1;
    total += rep.results[i].score;
  }
  for (const auto& [c, a] : acc) rep.per_object[c] = a.first / a.second;
  rep.trial_count = static_cast<int>(trials.size());
  rep.mean_score = total / rep.trial_count;
  rep.success = success_rate(rep.results);
  return rep;
}

// --- Welch's t-test ---------------------------------------------------------

/// Continued fraction for the incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15, kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw StatisticsError("incomplete beta: continued fraction did not converge");
}

/// Regularised incomplete beta I_x(a, b).
inline double inc_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw StatisticsError("incomplete beta: shape parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cf(a, b, x) / a;
  return 1.0 - bt * beta_cf(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
inline double student_t_two_sided(double t, double df) {
  if (!(df > 0)) throw StatisticsError("t distribution: degrees of freedom must be positive");
  if (!std::isfinite(t)) return 0.0;
  return inc_beta(0.5 * df, 0.5, df / (df + t * t));
}

struct WelchResult {
  double t = 0;
  double df = 0;
  double p = 1;
  double mean_a = 0, mean_b = 0;
};

inline WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw StatisticsError("welch_t: each sample needs at least 2 values");
  auto moments = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, ss / static_cast<double>(v.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  WelchResult r;
  r.mean_a = ma;
  r.mean_b = mb;
  if (sa + sb <= 0) {
    // constant samples: equal constants are indistinguishable, unequal ones have no finite t
    if (ma != mb) throw StatisticsError("welch_t: both samples have zero variance and different means");
    r.df = na + nb - 2;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1) + sb * sb / (nb - 1));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

}  // namespace bxl::eval
