#include <catch_amalgamated.hpp>

#include <cstdlib>

#include "bboxdp/cli.hpp"

using namespace bxl;
namespace fs = std::filesystem;
using Catch::Approx;

namespace {
fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bxl_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "bboxlab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (rc != 0) UNSCOPED_INFO(err.str());
  return rc;
}

std::map<std::string, std::string> dir_bytes(const fs::path& d) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::directory_iterator(d))
    if (e.is_regular_file() && e.path().filename().string().rfind("run_", 0) != 0)
      m[e.path().filename().string()] = io::read_file(e.path());
  return m;
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& f) {
  std::istringstream in(io::read_file(f));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  std::getline(in, line);
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(io::split_csv_line(line));
  return rows;
}

// small dataset shared by the command tests: 8 classes over 3 envs
const fs::path& dataset() {
  static const fs::path d = [] {
    const auto root = scratch_dir("shared");
    REQUIRE(run({"gen-data", "--task", "dispose", "--envs", "3", "--classes", "8", "--demos-per-class", "3",
                 "--seed", "5", "--out", (root / "D").string()}) == 0);
    return root / "D";
  }();
  return d;
}
}  // namespace

TEST_CASE("gen-data writes the requested layout reproducibly") {
  const auto root = scratch_dir("gen");
  const std::vector<std::string> base{"gen-data", "--task", "dispose", "--envs", "2", "--classes", "8",
                                      "--demos-per-class", "30", "--seed", "7", "--out"};
  auto a = base, b = base;
  a.push_back((root / "A").string());
  b.push_back((root / "B").string());
  REQUIRE(run(a) == 0);
  REQUIRE(run(b) == 0);
  const auto fa = dir_bytes(root / "A"), fb = dir_bytes(root / "B");
  int records = 0;
  for (const auto& [name, _] : fa) records += name.rfind("demo_", 0) == 0;
  CHECK(records == 240);
  CHECK(fa == fb);
  const auto man = io::load_manifest(root / "A");
  CHECK(man.records.size() == 240);
  CHECK(fs::exists(root / "A" / "run_gen-data.json"));
}

TEST_CASE("usage errors exit with 2") {
  const auto root = scratch_dir("usage");
  CHECK(run({"gen-data", "--classes", "0", "--out", (root / "x").string()}) == 2);
  CHECK(run({"gen-data", "--envs", "9", "--out", (root / "x").string()}) == 2);
  CHECK(run({"no-such-command"}) == 2);
  CHECK(run({}) == 2);
  CHECK(run({"train-policy", "--data", "x", "--out", "y", "--cond", "audio"}) == 2);
  CHECK(run({"evaluate", "--out", (root / "e").string(), "--unseen"}) == 2);
}

TEST_CASE("BXL_SEED is the fallback master seed") {
  const auto root = scratch_dir("seed");
  REQUIRE(run({"gen-data", "--envs", "1", "--classes", "2", "--demos-per-class", "2", "--seed", "13", "--out",
               (root / "A").string()}) == 0);
  ::setenv("BXL_SEED", "13", 1);
  const int rc = run({"gen-data", "--envs", "1", "--classes", "2", "--demos-per-class", "2", "--out",
                      (root / "B").string()});
  ::unsetenv("BXL_SEED");
  REQUIRE(rc == 0);
  CHECK(dir_bytes(root / "A") == dir_bytes(root / "B"));
}

TEST_CASE("train-policy checkpoints") {
  const auto root = scratch_dir("train");
  const auto ck = root / "text.bxl";
  REQUIRE(run({"train-policy", "--data", dataset().string(), "--cond", "text", "--steps", "20", "--width", "32",
               "--seed", "3", "--out", ck.string()}) == 0);
  const std::string bytes = io::read_file(ck);
  CHECK(bytes.substr(0, 4) == "BXL1");
  const auto c = io::decode_container(bytes, ck.string());
  CHECK(c.meta.at("mode") == "text");
  const auto pol = io::load_policy(ck);
  io::save_policy(pol, root / "again.bxl");
  CHECK(io::read_file(root / "again.bxl") == bytes);
  CHECK(fs::exists(root / "text.bxl.run.json"));

  CHECK(run({"train-policy", "--data", (root / "missing").string(), "--out", ck.string()}) == 1);
  REQUIRE(run({"train-policy", "--data", dataset().string(), "--steps", "30", "--lr", "1e12", "--width", "32",
               "--out", (root / "nan.bxl").string()}) == 1);
}

TEST_CASE("train-detector checkpoints") {
  const auto root = scratch_dir("det");
  REQUIRE(run({"train-detector", "--data", dataset().string(), "--out", (root / "det.bxl").string()}) == 0);
  const auto det = io::load_detector(root / "det.bxl");
  CHECK(det.classes().size() == 8);
  io::save_detector(det, root / "det2.bxl");
  CHECK(io::read_file(root / "det.bxl") == io::read_file(root / "det2.bxl"));
}

TEST_CASE("evaluate summaries and comparisons") {
  const auto root = scratch_dir("eval");
  const auto ck = root / "p.bxl";
  REQUIRE(run({"train-policy", "--data", dataset().string(), "--steps", "20", "--width", "32", "--out",
               ck.string()}) == 0);
  REQUIRE(run({"evaluate", "--compare", ck.string(), ck.string(), "--classes", "16-19", "--env", "3", "--trials", "2",
               "--data", dataset().string(), "--out", (root / "E").string()}) == 0);
  const auto trials = csv_rows(root / "E" / "trials.csv");
  CHECK(trials.size() == 2 * 4 * 2);
  const auto summary = csv_rows(root / "E" / "summary.csv");
  REQUIRE(summary.size() == 2);
  for (const auto& s : summary) {
    double succ = 0, score = 0;
    int n = 0;
    for (const auto& t : trials)
      if (t[0] == s[0]) succ += std::stod(t[9]), score += std::stod(t[8]), ++n;
    CHECK(std::stoi(s[1]) == n);
    CHECK(std::stod(s[3]) == Approx(succ / n));
    CHECK(std::stod(s[2]) == Approx(score / n));
  }
  const auto welch = csv_rows(root / "E" / "welch.csv");
  REQUIRE(welch.size() == 1);
  CHECK(std::stod(welch[0][4]) == 1.0);

  CHECK(run({"evaluate", "--policy", (root / "none.bxl").string(), "--unseen", "--out", (root / "F").string()}) == 1);
}

TEST_CASE("scaling and report commands") {
  const auto root = scratch_dir("scaling");
  const auto out = root / "S";
  REQUIRE(run({"scaling", "--data", dataset().string(), "--grid", "desk", "--steps", "5", "--width", "16",
               "--trials-per-object", "1", "--parallel", "2", "--seed", "1", "--out", out.string()}) == 0);
  const auto rows = csv_rows(out / "results.csv");
  CHECK(rows.size() == 30);
  CHECK(io::read_file(out / "results.csv").rfind(io::kResultsHeader + "\n", 0) == 0);

  // fit rows recomputed from the result rows
  const auto parsed = io::parse_results_csv(io::read_file(out / "results.csv"), "results");
  const auto agg = scale::aggregate(io::cell_results_from_rows(parsed));
  for (const auto& f : csv_rows(out / "fit.csv")) {
    const auto fit = scale::fit_gap(agg, std::stoi(f[1]));
    CHECK(std::stod(f[4]) == Approx(fit.r).epsilon(1e-12));
  }
  const std::string svg = io::read_file(out / "score_vs_m.svg");
  std::size_t series = 0;
  for (auto p = svg.find("class=\"series\""); p != std::string::npos; p = svg.find("class=\"series\"", p + 1)) ++series;
  CHECK(series == 3);

  REQUIRE(run({"report", "--results", (out / "results.csv").string(), "--out", (root / "R1").string()}) == 0);
  REQUIRE(run({"report", "--results", (out / "results.csv").string(), "--out", (root / "R2").string()}) == 0);
  CHECK(io::read_file(root / "R1" / "score_vs_m.svg") == io::read_file(root / "R2" / "score_vs_m.svg"));
  CHECK(io::read_file(root / "R1" / "gap_loglog.svg") == io::read_file(root / "R2" / "gap_loglog.svg"));
  CHECK(io::read_file(root / "R1" / "fit.csv") == io::read_file(out / "fit.csv"));
}

TEST_CASE("report on synthetic and malformed inputs") {
  const auto root = scratch_dir("report");
  std::vector<io::ResultRow> rows;
  for (int m = 0; m <= 3; ++m) {
    io::ResultRow r;
    r.task = "dispose";
    r.m = m;
    r.n_exp = 0;
    r.j = 1;
    r.cell_mean_score = 1.0 - 0.5 * std::pow(std::ldexp(1.0, m), -0.3);
    r.trials = 10;
    rows.push_back(r);
  }
  io::write_file(root / "synthetic.csv", io::results_csv(rows));
  REQUIRE(run({"report", "--results", (root / "synthetic.csv").string(), "--out", (root / "R").string()}) == 0);
  const auto fit = csv_rows(root / "R" / "fit.csv");
  REQUIRE(fit.size() == 1);
  CHECK(std::stod(fit[0][2]) == Approx(-0.3).margin(1e-9));
  CHECK(std::stod(fit[0][3]) == Approx(0.5).margin(1e-9));

  io::write_file(root / "empty.csv", "");
  CHECK(run({"report", "--results", (root / "empty.csv").string(), "--out", (root / "E").string()}) == 1);
  io::write_file(root / "bad.csv", io::kResultsHeader + "\ndispose,0,0,1,0.5,0.2,10,1,0.5\ndispose,1,zero,1,0.5,0.2,10,1,0.5\n");
  try {
    io::parse_results_csv(io::read_file(root / "bad.csv"), "bad.csv");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    const std::string m = e.what();
    CHECK(m.find("row 3") != std::string::npos);
    CHECK(m.find("n_exp") != std::string::npos);
  }
  CHECK(run({"report", "--results", (root / "bad.csv").string(), "--out", (root / "B").string()}) == 1);
  io::write_file(root / "header.csv", "task,m\n");
  CHECK(run({"report", "--results", (root / "header.csv").string(), "--out", (root / "H").string()}) == 1);
}

TEST_CASE("container format checks") {
  io::Container c;
  c.kind = io::CheckpointKind::detector;
  c.meta = {{"k", 1}};
  c.weights = {1.5, -2.25, 1e-300};
  const std::string bytes = io::encode_container(c);
  const auto back = io::decode_container(bytes, "mem");
  CHECK(back.weights == c.weights);
  CHECK(io::encode_container(back) == bytes);

  std::string bad_magic = bytes;
  bad_magic[3] = '9';
  CHECK_THROWS_AS(io::decode_container(bad_magic, "mem"), FormatError);
  std::string bad_kind = bytes;
  bad_kind[4] = 7;
  CHECK_THROWS_AS(io::decode_container(bad_kind, "mem"), FormatError);
  CHECK_THROWS_AS(io::decode_container(bytes.substr(0, bytes.size() - 8), "mem"), FormatError);
  CHECK_THROWS_AS(io::decode_container(bytes + "x", "mem"), FormatError);
}

TEST_CASE("records and run config round trip") {
  const auto reg = sim::ClassRegistry::standard();
  const auto d = data::collect_demo(reg, 1, sim::TaskKind::dispose, 3, {4}, 9);
  const std::string bytes = io::encode_record(d);
  const auto back = io::decode_record(bytes, "mem");
  CHECK(io::encode_record(back) == bytes);
  CHECK(back.stages == d.stages);
  CHECK(back.bboxes == d.bboxes);
  CHECK(back.frames.size() == d.frames.size());
  CHECK_THROWS_AS(io::decode_record(bytes.substr(0, 20), "mem"), FormatError);

  io::RunConfig rc;
  rc.task = sim::TaskKind::press;
  rc.dataset.class_count = 5;
  rc.policy.max_steps = 123;
  rc.score.t_min = 17;
  rc.grid = scale::desk_grid();
  rc.out_dir = "out";
  rc.master_seed = 99;
  const auto j = io::to_json(rc);
  CHECK(io::to_json(io::run_config_from_json(j)) == j);
  CHECK(io::run_config_from_json(j).policy == rc.policy);
}
