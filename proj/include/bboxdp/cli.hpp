// Command-line front end: gen-data, train-policy, train-detector, evaluate,
// scaling, report. Exit codes: 0 ok, 1 runtime failure, 2 usage error.
#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bboxdp/annotate.hpp"
#include "bboxdp/evalstat.hpp"
#include "bboxdp/expertdata.hpp"
#include "bboxdp/io.hpp"
#include "bboxdp/policy.hpp"
#include "bboxdp/scaling.hpp"

namespace bxl::cli {

namespace fs = std::filesystem;
using io::json;

class UsageError : public Error { using Error::Error; };

/// "0-7,9,12-13" -> {0..7, 9, 12, 13}
inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    try {
      // a leading '-' is a sign, so look for the range dash after it
      const auto dash = part.find('-', 1);
      if (dash == std::string::npos) {
        out.push_back(std::stoi(part));
      } else {
        const int lo = std::stoi(part.substr(0, dash)), hi = std::stoi(part.substr(dash + 1));
        if (hi < lo) throw UsageError("bad range '" + part + "'");
        for (int v = lo; v <= hi; ++v) out.push_back(v);
      }
    } catch (const std::logic_error&) {
      throw UsageError("cannot parse integer list '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError("empty integer list '" + s + "'");
  return out;
}

inline std::uint64_t seed_or_env(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* e = std::getenv("BXL_SEED")) {
    try {
      return std::stoull(e);
    } catch (const std::logic_error&) {
      throw UsageError(std::string("BXL_SEED is not an unsigned integer: '") + e + "'");
    }
  }
  return 0;
}

struct TrainFlags {
  int steps = 0;
  int epochs = 30;
  int batch = 64;
  double lr = 1e-3;
  int width = 256;
  int sample_steps = 10;

  void add(CLI::App* c) {
    c->add_option("--steps", steps, "optimizer steps (overrides --epochs when > 0)")->check(CLI::NonNegativeNumber);
    c->add_option("--epochs", epochs, "passes over the training pairs")->check(CLI::PositiveNumber);
    c->add_option("--batch", batch, "minibatch size")->check(CLI::PositiveNumber);
    c->add_option("--lr", lr, "peak Adam learning rate")->check(CLI::PositiveNumber);
    c->add_option("--width", width, "denoiser hidden width")->check(CLI::PositiveNumber);
    c->add_option("--sample-steps", sample_steps, "DDIM steps at inference")->check(CLI::PositiveNumber);
  }
  policy::PolicyConfig config() const {
    policy::PolicyConfig pc;
    pc.max_steps = steps;
    pc.epochs = epochs;
    pc.batch_size = batch;
    pc.lr = lr;
    pc.net.width = width;
    pc.sample_steps = sample_steps;
    return pc;
  }
};

inline json summary_json(const eval::EvalReport& r) {
  return {{"trials", r.trial_count}, {"mean_score", r.mean_score}, {"success_rate", r.success}};
}

inline eval::ScoreParams score_params_for(const std::string& data_dir, double t_min, int cap) {
  if (!data_dir.empty()) {
    eval::ScoreParams sp = scale::dataset_score_params(io::load_dataset(data_dir));
    sp.t_max = cap;
    return sp;
  }
  eval::ScoreParams sp;
  sp.t_min = t_min;
  sp.t_max = cap;
  return sp;
}

/// Fit rows and both plots for an already aggregated grid.
inline void write_report(const fs::path& out, const std::string& task, const std::vector<scale::AggregateRow>& rows,
                         std::ostream& log) {
  std::vector<io::FitRow> fits;
  std::set<int> ns;
  for (const auto& r : rows) ns.insert(r.n_exp);
  for (auto it = ns.rbegin(); it != ns.rend(); ++it) {
    try {
      const auto f = scale::fit_gap(rows, *it);
      for (const auto& w : f.warnings) log << "fit n=" << *it << ": " << w << "\n";
      fits.push_back({task, *it, f.alpha, f.beta, f.r});
    } catch (const scale::FitError& e) {
      log << "fit n=" << *it << " skipped: " << e.what() << "\n";
    }
  }
  io::write_file(out / "fit.csv", io::fit_csv(fits));
  io::write_file(out / "score_vs_m.svg", io::score_plot(rows, task));
  io::write_file(out / "gap_loglog.svg", io::gap_plot(rows, fits, task));
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"bbox-conditioned diffusion policy lab"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "build an expert dataset");
  std::string g_task = "dispose", g_out, g_annotation = "groundtruth";
  int g_envs = 4, g_classes = 16, g_dpc = 100;
  std::optional<std::uint64_t> g_seed;
  gen->add_option("--task", g_task, "dispose | press | fetch | pour")->capture_default_str();
  gen->add_option("--envs", g_envs, "environments 0..M-1")->check(CLI::Range(1, sim::kEnvCount))->capture_default_str();
  gen->add_option("--classes", g_classes, "classes 0..N'-1")->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--demos-per-class", g_dpc, "demos per class")->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--seed", g_seed, "master seed (falls back to BXL_SEED)");
  gen->add_option("--out", g_out, "output directory")->required();
  gen->add_option("--annotation", g_annotation, "groundtruth | detector")
      ->check(CLI::IsMember({"groundtruth", "detector"}))
      ->capture_default_str();

  // train-policy
  auto* tp = app.add_subcommand("train-policy", "train a diffusion policy checkpoint");
  std::string tp_data, tp_cond = "bbox", tp_out;
  std::optional<std::uint64_t> tp_seed;
  TrainFlags tflags;
  tp->add_option("--data", tp_data, "dataset directory")->required();
  tp->add_option("--cond", tp_cond, "bbox | text | keypoint")
      ->check(CLI::IsMember({"bbox", "text", "keypoint"}))
      ->capture_default_str();
  tp->add_option("--out", tp_out, "checkpoint file")->required();
  tp->add_option("--seed", tp_seed, "training seed (falls back to BXL_SEED)");
  tflags.add(tp);

  // train-detector
  auto* td = app.add_subcommand("train-detector", "fit the prototype detector on a dataset");
  std::string td_data, td_out;
  td->add_option("--data", td_data, "dataset directory")->required();
  td->add_option("--out", td_out, "checkpoint file")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "roll out policies and score them");
  std::string ev_policy, ev_detector, ev_out, ev_data, ev_task = "dispose", ev_classes;
  std::vector<std::string> ev_compare;
  bool ev_unseen = false;
  int ev_trials = 3, ev_env = 3, ev_cap = 200;
  double ev_tmin = 0;
  std::optional<std::uint64_t> ev_seed;
  ev->add_option("--policy", ev_policy, "checkpoint to evaluate");
  ev->add_option("--compare", ev_compare, "two checkpoints, adds a Welch t-test")->expected(2);
  ev->add_flag("--unseen", ev_unseen, "held-out classes 16-31 in env 3");
  ev->add_option("--classes", ev_classes, "target classes, e.g. 16-31");
  ev->add_option("--env", ev_env, "evaluation environment")->check(CLI::Range(0, sim::kEnvCount - 1));
  ev->add_option("--trials", ev_trials, "trials per object")->check(CLI::PositiveNumber)->capture_default_str();
  ev->add_option("--task", ev_task, "task kind")->capture_default_str();
  ev->add_option("--detector", ev_detector, "detector checkpoint (default: oracle instructions)");
  ev->add_option("--data", ev_data, "dataset whose expert completions set t_min");
  ev->add_option("--t-min", ev_tmin, "t_min when no --data is given")->check(CLI::NonNegativeNumber);
  ev->add_option("--seed", ev_seed, "trial seed (falls back to BXL_SEED)");
  ev->add_option("--out", ev_out, "output directory")->required();
  auto* ev_policy_opt = ev->get_option("--policy");
  ev_policy_opt->excludes(ev->get_option("--compare"));
  ev->get_option("--unseen")->excludes(ev->get_option("--classes"));
  ev->get_option("--unseen")->excludes(ev->get_option("--env"));

  // scaling
  auto* sc = app.add_subcommand("scaling", "run the (m, n)_j grid");
  std::string sc_data, sc_out, sc_grid = "desk", sc_m, sc_n;
  int sc_parallel = 1, sc_reps = 0, sc_trials = 0;
  std::optional<std::uint64_t> sc_seed;
  TrainFlags sflags;
  sflags.steps = 8000;
  sc->add_option("--data", sc_data, "dataset directory")->required();
  sc->add_option("--out", sc_out, "output directory")->required();
  sc->add_option("--grid", sc_grid, "desk | full")->check(CLI::IsMember({"desk", "full"}))->capture_default_str();
  sc->add_option("--m-values", sc_m, "override m values, e.g. 0-3");
  sc->add_option("--n-values", sc_n, "override n values, e.g. 0,-1");
  sc->add_option("--reps", sc_reps, "override J")->check(CLI::PositiveNumber);
  sc->add_option("--trials-per-object", sc_trials, "override trials per unseen object")->check(CLI::PositiveNumber);
  sc->add_option("--parallel", sc_parallel, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  sc->add_option("--seed", sc_seed, "grid master seed (falls back to BXL_SEED)");
  sflags.add(sc);

  // report
  auto* rp = app.add_subcommand("report", "regenerate fits and plots from a results CSV");
  std::string rp_results, rp_out;
  rp->add_option("--results", rp_results, "results.csv")->required();
  rp->add_option("--out", rp_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    const auto reg = sim::ClassRegistry::standard();

    if (*gen) {
      data::DatasetSpec spec;
      spec.task = sim::parse_task(g_task);
      spec.env_count = g_envs;
      spec.class_count = g_classes;
      spec.demos_per_class = g_dpc;
      spec.master_seed = seed_or_env(g_seed);
      try {
        spec.validate(reg);
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      }
      data::Dataset ds = data::build_dataset(reg, spec);
      const auto prov = data::parse_provenance(g_annotation);
      if (prov == data::Provenance::detector) {
        for (auto& d : ds.demos) d.bboxes = annot::pipeline_annotations(reg, d);
        ds.manifest.annotation = prov;
      }
      io::save_dataset(ds, g_out);
      io::RunConfig rc;
      rc.task = spec.task;
      rc.dataset = spec;
      rc.out_dir = g_out;
      rc.master_seed = spec.master_seed;
      io::write_run_manifest(fs::path(g_out) / "run_gen-data.json", "gen-data", args, io::to_json(rc));
      out << "wrote " << ds.demos.size() << " demos to " << g_out << "\n";
      return 0;
    }

    if (*tp) {
      const data::Dataset ds = io::load_dataset(tp_data);
      std::vector<const data::Demonstration*> demos;
      for (const auto& d : ds.demos) demos.push_back(&d);
      policy::PolicyConfig pc = tflags.config();
      try {
        pc.validate();
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      }
      const std::uint64_t seed = seed_or_env(tp_seed);
      policy::TrainReport rep;
      const policy::Policy pol = policy::train_policy(demos, policy::parse_cond_mode(tp_cond), pc, seed, &rep);
      io::save_policy(pol, tp_out);
      json extra = {{"data", tp_data},
                    {"cond", tp_cond},
                    {"seed", seed},
                    {"policy", io::to_json(pc)},
                    {"steps", rep.steps},
                    {"pairs", rep.pairs},
                    {"final_loss", rep.losses.empty() ? 0.0 : rep.losses.back()},
                    {"digest", pol.digest}};
      io::write_run_manifest(tp_out + ".run.json", "train-policy", args, extra);
      out << "trained " << tp_cond << " policy: " << rep.steps << " steps, final loss "
          << (rep.losses.empty() ? 0.0 : rep.losses.back()) << " -> " << tp_out << "\n";
      return 0;
    }

    if (*td) {
      const data::Dataset ds = io::load_dataset(td_data);
      const annot::Detector det = annot::train_detector(ds);
      io::save_detector(det, td_out);
      io::write_run_manifest(td_out + ".run.json", "train-detector", args,
                             {{"data", td_data}, {"classes", det.prototypes.size()}, {"threshold", det.threshold}});
      out << "trained detector on " << det.prototypes.size() << " classes, tau " << det.threshold << " -> "
          << td_out << "\n";
      return 0;
    }

    if (*ev) {
      std::vector<std::pair<std::string, std::string>> pols;  // label, file
      if (!ev_policy.empty()) pols.emplace_back("A", ev_policy);
      if (!ev_compare.empty()) {
        pols.emplace_back("A", ev_compare[0]);
        pols.emplace_back("B", ev_compare[1]);
      }
      if (pols.empty()) throw UsageError("evaluate needs --policy or --compare A B");
      std::vector<int> classes;
      int env = ev_env;
      if (ev_unseen) {
        classes = scale::iota_vec(16, 31);
        env = 3;
      } else {
        if (ev_classes.empty()) throw UsageError("evaluate needs --unseen or --classes");
        classes = parse_int_list(ev_classes);
      }
      for (int c : classes)
        if (c < 0 || static_cast<std::size_t>(c) >= reg.size())
          throw UsageError("class " + std::to_string(c) + " not in registry");
      const auto task = sim::parse_task(ev_task);
      const std::uint64_t seed = seed_or_env(ev_seed);
      const eval::ScoreParams sp = score_params_for(ev_data, ev_tmin, ev_cap);
      sp.validate();
      std::optional<annot::Detector> det;
      if (!ev_detector.empty()) det = io::load_detector(ev_detector);
      const auto src = det ? eval::InstructionSource::from(*det) : eval::InstructionSource::oracle();
      const auto trials = eval::make_trials(classes, env, task, ev_trials, seed);

      std::string trial_csv = io::kTrialHeader + "\n", summary = io::kSummaryHeader + "\n";
      std::vector<eval::EvalReport> reps;
      json extra = {{"classes", classes}, {"env", env}, {"trials_per_object", ev_trials}, {"seed", seed},
                    {"score", io::to_json(sp)}, {"instructions", det ? "detector" : "oracle"}};
      for (const auto& [label, file] : pols) {
        const policy::Policy pol = io::load_policy(file);
        reps.push_back(eval::evaluate(pol, src, reg, trials, sp));
        const auto& r = reps.back();
        trial_csv += io::trial_rows(label, r);
        summary += label + "," + std::to_string(r.trial_count) + "," + io::fmt(r.mean_score) + "," +
                   io::fmt(r.success) + "\n";
        extra[label] = {{"checkpoint", file}, {"cond", std::string(policy::to_string(pol.mode))},
                        {"summary", summary_json(r)}};
        out << label << " (" << file << "): mean score " << r.mean_score << ", success " << r.success << " over "
            << r.trial_count << " trials\n";
      }
      const fs::path od(ev_out);
      io::write_file(od / "trials.csv", trial_csv);
      io::write_file(od / "summary.csv", summary);
      if (reps.size() == 2) {
        const auto w = eval::welch_t(reps[0].scores(), reps[1].scores());
        io::write_file(od / "welch.csv", "a,b,t,df,p,mean_a,mean_b\n" + pols[0].second + "," + pols[1].second + "," +
                                             io::fmt(w.t) + "," + io::fmt(w.df) + "," + io::fmt(w.p) + "," +
                                             io::fmt(w.mean_a) + "," + io::fmt(w.mean_b) + "\n");
        extra["welch"] = {{"t", w.t}, {"df", w.df}, {"p", w.p}};
        out << "welch: t " << w.t << ", df " << w.df << ", p " << w.p << "\n";
      }
      io::write_run_manifest(od / "run_evaluate.json", "evaluate", args, extra);
      return 0;
    }

    if (*sc) {
      const data::Dataset ds = io::load_dataset(sc_data);
      scale::GridSpec g = sc_grid == "full" ? scale::full_grid() : scale::desk_grid();
      g.task = ds.manifest.spec.task;
      if (!sc_m.empty()) g.m_values = parse_int_list(sc_m);
      if (!sc_n.empty()) g.n_values = parse_int_list(sc_n);
      if (sc_reps > 0) g.reps = sc_reps;
      if (sc_trials > 0) g.trials_per_object = sc_trials;
      g.master_seed = seed_or_env(sc_seed);
      policy::PolicyConfig pc = sflags.config();
      try {
        g.validate(ds.manifest.spec.env_ids());
        pc.validate();
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      }
      const auto cells = scale::enumerate_cells(g, ds.manifest, &reg);
      const eval::ScoreParams sp = scale::dataset_score_params(ds);
      auto progress = [&](const scale::CellResult& r, std::size_t done, std::size_t total) {
        err << "[" << done << "/" << total << "] " << r.cell.key() << " ("
            << r.cell.total_demos() << " demos): " << (r.ok() ? "score " + io::fmt(r.mean_score) : r.error)
            << std::endl;
      };
      const auto results = scale::run_grid(cells, ds, reg, g, pc, sp, sc_parallel, progress);
      const std::string task(sim::to_string(g.task));
      std::vector<io::ResultRow> rows;
      std::vector<scale::CellResult> ok;
      std::string failures = "cell,error\n";
      for (const auto& r : results) {
        if (!r.ok()) {
          failures += r.cell.key() + ",\"" + r.error + "\"\n";
          continue;
        }
        ok.push_back(r);
        rows.push_back({task, r.cell.m, r.cell.n_exp, r.cell.j, r.mean_score, r.success_rate, r.trials, r.cell.seed,
                        r.cell.diversity});
      }
      const fs::path od(sc_out);
      io::write_file(od / "results.csv", io::results_csv(rows));
      io::write_file(od / "failures.csv", failures);
      io::RunConfig rc;
      rc.task = g.task;
      rc.dataset = ds.manifest.spec;
      rc.policy = pc;
      rc.score = sp;
      rc.grid = g;
      rc.out_dir = sc_out;
      rc.master_seed = g.master_seed;
      io::write_run_manifest(od / "run_scaling.json", "scaling", args,
                             {{"config", io::to_json(rc)}, {"cells", results.size()}, {"failed", results.size() - ok.size()}});
      if (ok.empty()) {
        err << "all " << results.size() << " cells failed\n";
        return 1;
      }
      write_report(od, task, scale::aggregate(ok), err);
      out << rows.size() << " of " << results.size() << " cells completed -> " << sc_out << "\n";
      return 0;
    }

    if (*rp) {
      const auto rows = io::parse_results_csv(io::read_file(rp_results), rp_results);
      const std::string task = rows.front().task;
      const fs::path od(rp_out);
      write_report(od, task, scale::aggregate(io::cell_results_from_rows(rows)), err);
      io::write_run_manifest(od / "run_report.json", "report", args, {{"results", rp_results}, {"rows", rows.size()}});
      out << "report for " << rows.size() << " rows -> " << rp_out << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace bxl::cli
