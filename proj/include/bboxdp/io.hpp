#pragma once

// Persistence: dataset directories, checkpoint containers, run configs,
// result/fit CSVs and SVG plots.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bboxdp/annotate.hpp"
#include "bboxdp/common.hpp"
#include "bboxdp/evalstat.hpp"
#include "bboxdp/expertdata.hpp"
#include "bboxdp/policy.hpp"
#include "bboxdp/scaling.hpp"

namespace bxl::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "record and checkpoint writers assume little-endian");

// --- byte streams -----------------------------------------------------------

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void i32(std::int32_t v) { bytes(&v, 4); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void tag(const char (&m)[5]) { bytes(m, 4); }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string what) : buf_(std::move(data)), what_(std::move(what)) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::int32_t i32() { std::int32_t v; bytes(&v, 4); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
  double f64() { double v; bytes(&v, 8); return v; }
  void expect(const char (&m)[5]) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, m, 4) != 0)
      throw FormatError(what_ + ": bad magic '" + std::string(got, 4) + "', expected '" + std::string(m, 4) + "'");
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::string buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw NotFoundError("cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& data) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + p.string());
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw Error("write failed for " + p.string());
}

// --- dataset records --------------------------------------------------------

inline constexpr const char* kRecordLayout =
    "magic 'BXR1'; i32 task, env_id, target_class, index_in_class, success; u64 seed; "
    "i32 n_distractors, distractors[n]; i32 stage_count, flags[3], clocks[3]; i32 n_frames; "
    "per frame: u8 raster[64*64*3] (row-major, RGB), f64 proprio[3] (x, y, gripper), i32 bbox[4] "
    "(x_min, y_min, x_max, y_max; max exclusive); i32 n_actions; per action: f64 dx, dy, g";

inline std::string encode_record(const data::Demonstration& d) {
  Writer w;
  w.tag("BXR1");
  w.i32(static_cast<std::int32_t>(d.task));
  w.i32(d.env_id);
  w.i32(d.target_class);
  w.i32(d.index_in_class);
  w.i32(d.success ? 1 : 0);
  w.u64(d.seed);
  w.i32(static_cast<std::int32_t>(d.distractors.size()));
  for (int c : d.distractors) w.i32(c);
  w.i32(d.stages.count);
  for (bool f : d.stages.flags) w.i32(f ? 1 : 0);
  for (int c : d.stages.clocks) w.i32(c);
  if (d.bboxes.size() != d.frames.size()) throw DataError("record: bbox count differs from frame count");
  w.i32(static_cast<std::int32_t>(d.frames.size()));
  for (std::size_t f = 0; f < d.frames.size(); ++f) {
    w.bytes(d.frames[f].raster.data.data(), d.frames[f].raster.data.size());
    for (double v : d.frames[f].proprio) w.f64(v);
    const auto& b = d.bboxes[f];
    w.i32(b.x_min);
    w.i32(b.y_min);
    w.i32(b.x_max);
    w.i32(b.y_max);
  }
  w.i32(static_cast<std::int32_t>(d.actions.size()));
  for (const auto& a : d.actions) {
    w.f64(a.dx);
    w.f64(a.dy);
    w.f64(a.g);
  }
  return w.data();
}

inline data::Demonstration decode_record(std::string bytes, const std::string& what) {
  Reader r(std::move(bytes), what);
  r.expect("BXR1");
  data::Demonstration d;
  const int task = r.i32();
  if (task < 0 || task > 3) throw FormatError(what + ": bad task tag " + std::to_string(task));
  d.task = static_cast<sim::TaskKind>(task);
  d.env_id = r.i32();
  d.target_class = r.i32();
  d.index_in_class = r.i32();
  d.success = r.i32() != 0;
  d.seed = r.u64();
  const int nd = r.i32();
  if (nd < 0 || nd > 64) throw FormatError(what + ": bad distractor count");
  for (int i = 0; i < nd; ++i) d.distractors.push_back(r.i32());
  d.stages.count = r.i32();
  for (auto& f : d.stages.flags) f = r.i32() != 0;
  for (auto& c : d.stages.clocks) c = r.i32();
  const int nf = r.i32();
  if (nf < 0) throw FormatError(what + ": bad frame count");
  for (int f = 0; f < nf; ++f) {
    data::Frame fr;
    r.bytes(fr.raster.data.data(), fr.raster.data.size());
    for (auto& v : fr.proprio) v = r.f64();
    annot::BBox b;
    b.x_min = r.i32();
    b.y_min = r.i32();
    b.x_max = r.i32();
    b.y_max = r.i32();
    d.frames.push_back(fr);
    d.bboxes.push_back(b);
  }
  const int na = r.i32();
  if (na < 0) throw FormatError(what + ": bad action count");
  for (int a = 0; a < na; ++a) {
    sim::Action act;
    act.dx = r.f64();
    act.dy = r.f64();
    act.g = r.f64();
    d.actions.push_back(act);
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
  return d;
}

inline json to_json(const data::DatasetSpec& s) {
  return {{"task", std::string(sim::to_string(s.task))}, {"env_count", s.env_count},
          {"class_count", s.class_count},                {"demos_per_class", s.demos_per_class},
          {"min_distractors", s.min_distractors},        {"max_distractors", s.max_distractors},
          {"master_seed", s.master_seed}};
}

inline data::DatasetSpec dataset_spec_from_json(const json& j) {
  data::DatasetSpec s;
  s.task = sim::parse_task(j.at("task").get<std::string>());
  s.env_count = j.at("env_count").get<int>();
  s.class_count = j.at("class_count").get<int>();
  s.demos_per_class = j.at("demos_per_class").get<int>();
  s.min_distractors = j.at("min_distractors").get<int>();
  s.max_distractors = j.at("max_distractors").get<int>();
  s.master_seed = j.at("master_seed").get<std::uint64_t>();
  return s;
}

inline json to_json(const data::DatasetManifest& m) {
  json recs = json::array();
  for (const auto& r : m.records)
    recs.push_back({{"id", r.id}, {"file", r.file}, {"class_id", r.class_id}, {"env_id", r.env_id}, {"k", r.k},
                    {"frames", r.frames}});
  return {{"format", "bboxdp-dataset-1"},
          {"record_layout", kRecordLayout},
          {"spec", to_json(m.spec)},
          {"annotation", std::string(data::to_string(m.annotation))},
          {"records", recs}};
}

inline data::DatasetManifest manifest_from_json(const json& j) {
  if (j.value("format", "") != "bboxdp-dataset-1") throw FormatError("manifest: unknown format");
  data::DatasetManifest m;
  m.spec = dataset_spec_from_json(j.at("spec"));
  m.annotation = data::parse_provenance(j.at("annotation").get<std::string>());
  for (const auto& r : j.at("records")) {
    data::RecordEntry e;
    e.id = r.at("id").get<int>();
    e.file = r.at("file").get<std::string>();
    e.class_id = r.at("class_id").get<int>();
    e.env_id = r.at("env_id").get<int>();
    e.k = r.at("k").get<int>();
    e.frames = r.at("frames").get<int>();
    m.records.push_back(e);
    m.per_class[e.class_id] += 1;
    m.per_env[e.env_id] += 1;
  }
  return m;
}

inline void save_dataset(const data::Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < ds.demos.size(); ++i)
    write_file(dir / ds.manifest.records.at(i).file, encode_record(ds.demos[i]));
  write_file(dir / "manifest.json", to_json(ds.manifest).dump(1) + "\n");
}

inline data::DatasetManifest load_manifest(const fs::path& dir) {
  const fs::path p = dir / "manifest.json";
  try {
    return manifest_from_json(json::parse(read_file(p)));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline data::Dataset load_dataset(const fs::path& dir) {
  data::Dataset ds;
  ds.manifest = load_manifest(dir);
  if (ds.manifest.records.empty()) throw DataError(dir.string() + ": manifest lists no records");
  for (const auto& r : ds.manifest.records) {
    const fs::path p = dir / r.file;
    ds.demos.push_back(decode_record(read_file(p), p.string()));
  }
  return ds;
}

// --- checkpoints ------------------------------------------------------------

enum class CheckpointKind : std::uint32_t { policy = 1, detector = 2 };

struct Container {
  CheckpointKind kind = CheckpointKind::policy;
  json meta;
  std::vector<double> weights;
};

inline std::string encode_container(const Container& c) {
  Writer w;
  w.tag("BXL1");
  w.u32(static_cast<std::uint32_t>(c.kind));
  const std::string meta = c.meta.dump();
  w.u64(meta.size());
  w.bytes(meta.data(), meta.size());
  w.u64(c.weights.size());
  w.bytes(c.weights.data(), c.weights.size() * sizeof(double));
  return w.data();
}

inline Container decode_container(std::string bytes, const std::string& what) {
  Reader r(std::move(bytes), what);
  r.expect("BXL1");
  Container c;
  const std::uint32_t kind = r.u32();
  if (kind != 1 && kind != 2) throw FormatError(what + ": unknown checkpoint kind " + std::to_string(kind));
  c.kind = static_cast<CheckpointKind>(kind);
  const std::uint64_t ml = r.u64();
  if (ml > r.remaining()) throw FormatError(what + ": metadata length exceeds file");
  std::string meta(ml, '\0');
  r.bytes(meta.data(), ml);
  try {
    c.meta = json::parse(meta);
  } catch (const json::exception& e) {
    throw FormatError(what + ": metadata: " + e.what());
  }
  const std::uint64_t n = r.u64();
  if (n * sizeof(double) != r.remaining())
    throw FormatError(what + ": declared " + std::to_string(n) + " weights, blob holds " +
                      std::to_string(r.remaining() / sizeof(double)));
  c.weights.resize(n);
  r.bytes(c.weights.data(), n * sizeof(double));
  return c;
}

inline json to_json(const policy::PolicyConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"max_steps", c.max_steps},
          {"denoise_steps", c.denoise_steps},
          {"beta_min", c.beta_min},
          {"beta_max", c.beta_max},
          {"horizon", c.horizon},
          {"obs_horizon", c.obs_horizon},
          {"exec_steps", c.exec_steps},
          {"sample_steps", c.sample_steps},
          {"net", {{"width", c.net.width}, {"blocks", c.net.blocks}, {"time_dim", c.net.time_dim}}},
          {"encoder", {{"text_vocab", c.encoder.text_vocab}, {"keypoint_sigma", c.encoder.keypoint_sigma}}}};
}

inline policy::PolicyConfig policy_config_from_json(const json& j) {
  policy::PolicyConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<double>();
  c.max_steps = j.at("max_steps").get<int>();
  c.denoise_steps = j.at("denoise_steps").get<int>();
  c.beta_min = j.at("beta_min").get<double>();
  c.beta_max = j.at("beta_max").get<double>();
  c.horizon = j.at("horizon").get<int>();
  c.obs_horizon = j.at("obs_horizon").get<int>();
  c.exec_steps = j.at("exec_steps").get<int>();
  c.sample_steps = j.at("sample_steps").get<int>();
  c.net.width = j.at("net").at("width").get<int>();
  c.net.blocks = j.at("net").at("blocks").get<int>();
  c.net.time_dim = j.at("net").at("time_dim").get<int>();
  c.encoder.text_vocab = j.at("encoder").at("text_vocab").get<int>();
  c.encoder.keypoint_sigma = j.at("encoder").at("keypoint_sigma").get<double>();
  return c;
}

inline Container policy_container(const policy::Policy& p) {
  Container c;
  c.kind = CheckpointKind::policy;
  json shapes = json::array();
  for (const auto& t : p.net.params) shapes.push_back(t.shape);
  c.meta = {{"mode", std::string(policy::to_string(p.mode))},
            {"config", to_json(p.config)},
            {"schedule", {{"steps", p.schedule.steps}, {"beta_min", p.schedule.beta_min},
                          {"beta_max", p.schedule.beta_max}}},
            {"action_dim", p.net.action_dim},
            {"cond_dim", p.net.cond_dim},
            {"param_shapes", shapes},
            {"action_min", p.action_min},
            {"action_max", p.action_max},
            {"digest", p.digest},
            {"weight_layout", "denoiser params in param_shapes order, then cond_mean[cond_dim], cond_scale[cond_dim]"}};
  for (const auto& t : p.net.params) c.weights.insert(c.weights.end(), t.data.begin(), t.data.end());
  c.weights.insert(c.weights.end(), p.cond_mean.begin(), p.cond_mean.end());
  c.weights.insert(c.weights.end(), p.cond_scale.begin(), p.cond_scale.end());
  return c;
}

inline policy::Policy policy_from_container(const Container& c, const std::string& what) {
  if (c.kind != CheckpointKind::policy) throw FormatError(what + ": not a policy checkpoint");
  try {
    const json& m = c.meta;
    policy::Policy p;
    p.mode = policy::parse_cond_mode(m.at("mode").get<std::string>());
    p.config = policy_config_from_json(m.at("config"));
    const auto& sj = m.at("schedule");
    p.schedule = policy::make_schedule(sj.at("steps").get<int>(), sj.at("beta_min").get<double>(),
                                       sj.at("beta_max").get<double>());
    p.net.config = p.config.net;
    p.net.action_dim = m.at("action_dim").get<int>();
    p.net.cond_dim = m.at("cond_dim").get<int>();
    p.action_min = m.at("action_min").get<std::array<double, 3>>();
    p.action_max = m.at("action_max").get<std::array<double, 3>>();
    p.digest = m.at("digest").get<std::string>();
    std::size_t off = 0;
    auto take = [&](std::size_t n) {
      if (off + n > c.weights.size()) throw FormatError(what + ": weight blob shorter than declared shapes");
      std::vector<double> v(c.weights.begin() + static_cast<std::ptrdiff_t>(off),
                            c.weights.begin() + static_cast<std::ptrdiff_t>(off + n));
      off += n;
      return v;
    };
    for (const auto& sh : m.at("param_shapes")) {
      ad::Shape shape = sh.get<ad::Shape>();
      p.net.params.emplace_back(shape, take(ad::shape_size(shape)));
    }
    const auto cd = static_cast<std::size_t>(p.net.cond_dim);
    p.cond_mean = take(cd);
    p.cond_scale = take(cd);
    if (off != c.weights.size()) throw FormatError(what + ": weight blob longer than declared shapes");
    if (p.net.input_dim() != static_cast<int>(p.net.params.at(0).rows()))
      throw FormatError(what + ": input layer does not match declared dims");
    return p;
  } catch (const json::exception& e) {
    throw FormatError(what + ": metadata: " + e.what());
  }
}

inline Container detector_container(const annot::Detector& d) {
  Container c;
  c.kind = CheckpointKind::detector;
  c.meta = {{"classes", d.classes()},
            {"threshold", d.threshold},
            {"hist_weight", d.hist_weight},
            {"hist_bins", annot::kHistBins},
            {"shape_dims", annot::kShapeDims},
            {"config", {{"flood_tol", d.config.flood_tol}, {"background_tol", d.config.background_tol},
                        {"max_lost_frames", d.config.max_lost_frames}, {"min_component", d.config.min_component}}},
            {"weight_layout", "shape_scale[shape_dims], then per class: hist[hist_bins], shape[shape_dims]"}};
  c.weights.insert(c.weights.end(), d.shape_scale.begin(), d.shape_scale.end());
  for (const auto& p : d.prototypes) {
    c.weights.insert(c.weights.end(), p.hist.begin(), p.hist.end());
    c.weights.insert(c.weights.end(), p.shape.begin(), p.shape.end());
  }
  return c;
}

inline annot::Detector detector_from_container(const Container& c, const std::string& what) {
  if (c.kind != CheckpointKind::detector) throw FormatError(what + ": not a detector checkpoint");
  try {
    const json& m = c.meta;
    if (m.at("hist_bins").get<int>() != annot::kHistBins || m.at("shape_dims").get<int>() != annot::kShapeDims)
      throw FormatError(what + ": descriptor sizes differ from this build");
    annot::Detector d;
    d.threshold = m.at("threshold").get<double>();
    d.hist_weight = m.at("hist_weight").get<double>();
    const auto& cj = m.at("config");
    d.config.flood_tol = cj.at("flood_tol").get<double>();
    d.config.background_tol = cj.at("background_tol").get<double>();
    d.config.max_lost_frames = cj.at("max_lost_frames").get<int>();
    d.config.min_component = cj.at("min_component").get<int>();
    const auto classes = m.at("classes").get<std::vector<int>>();
    const std::size_t need = annot::kShapeDims + classes.size() * (annot::kHistBins + annot::kShapeDims);
    if (c.weights.size() != need) throw FormatError(what + ": weight count does not match class list");
    std::size_t off = 0;
    for (auto& v : d.shape_scale) v = c.weights[off++];
    for (int cls : classes) {
      annot::Prototype p;
      p.class_id = cls;
      for (auto& v : p.hist) v = c.weights[off++];
      for (auto& v : p.shape) v = c.weights[off++];
      d.prototypes.push_back(p);
    }
    return d;
  } catch (const json::exception& e) {
    throw FormatError(what + ": metadata: " + e.what());
  }
}

inline void save_policy(const policy::Policy& p, const fs::path& f) { write_file(f, encode_container(policy_container(p))); }
inline policy::Policy load_policy(const fs::path& f) {
  return policy_from_container(decode_container(read_file(f), f.string()), f.string());
}
inline void save_detector(const annot::Detector& d, const fs::path& f) {
  write_file(f, encode_container(detector_container(d)));
}
inline annot::Detector load_detector(const fs::path& f) {
  return detector_from_container(decode_container(read_file(f), f.string()), f.string());
}

// --- run config -------------------------------------------------------------

struct RunConfig {
  sim::TaskKind task = sim::TaskKind::dispose;
  data::DatasetSpec dataset;
  policy::PolicyConfig policy;
  eval::ScoreParams score;
  scale::GridSpec grid;
  std::string out_dir;
  std::uint64_t master_seed = 0;
};

inline json to_json(const eval::ScoreParams& s) {
  return {{"eta", s.eta}, {"lambda", s.lambda}, {"t_min", s.t_min}, {"t_max", s.t_max}};
}

inline json to_json(const scale::GridSpec& g) {
  return {{"task", std::string(sim::to_string(g.task))},
          {"pool", g.pool},
          {"m_values", g.m_values},
          {"n_values", g.n_values},
          {"reps", g.reps},
          {"min_total_demos", g.min_total_demos},
          {"unseen_classes", g.unseen_classes},
          {"unseen_env", g.unseen_env},
          {"trials_per_object", g.trials_per_object},
          {"master_seed", g.master_seed}};
}

inline scale::GridSpec grid_from_json(const json& j) {
  scale::GridSpec g;
  g.task = sim::parse_task(j.at("task").get<std::string>());
  g.pool = j.at("pool").get<std::vector<int>>();
  g.m_values = j.at("m_values").get<std::vector<int>>();
  g.n_values = j.at("n_values").get<std::vector<int>>();
  g.reps = j.at("reps").get<int>();
  g.min_total_demos = j.at("min_total_demos").get<int>();
  g.unseen_classes = j.at("unseen_classes").get<std::vector<int>>();
  g.unseen_env = j.at("unseen_env").get<int>();
  g.trials_per_object = j.at("trials_per_object").get<int>();
  g.master_seed = j.at("master_seed").get<std::uint64_t>();
  return g;
}

inline json to_json(const RunConfig& r) {
  return {{"task", std::string(sim::to_string(r.task))},
          {"dataset", to_json(r.dataset)},
          {"policy", to_json(r.policy)},
          {"score", to_json(r.score)},
          {"grid", to_json(r.grid)},
          {"out_dir", r.out_dir},
          {"master_seed", r.master_seed}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig r;
  r.task = sim::parse_task(j.at("task").get<std::string>());
  r.dataset = dataset_spec_from_json(j.at("dataset"));
  r.policy = policy_config_from_json(j.at("policy"));
  const auto& s = j.at("score");
  r.score.eta = s.at("eta").get<double>();
  r.score.lambda = s.at("lambda").get<double>();
  r.score.t_min = s.at("t_min").get<double>();
  r.score.t_max = s.at("t_max").get<double>();
  r.grid = grid_from_json(j.at("grid"));
  r.out_dir = j.at("out_dir").get<std::string>();
  r.master_seed = j.at("master_seed").get<std::uint64_t>();
  return r;
}

/// Provenance record written next to every command output.
inline void write_run_manifest(const fs::path& file, const std::string& command, const std::vector<std::string>& argv,
                               const json& extra) {
  json j = {{"command", command}, {"argv", argv}, {"details", extra}};
  write_file(file, j.dump(1) + "\n");
}

// --- CSV --------------------------------------------------------------------

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline const std::string kResultsHeader =
    "task,m,n_exp,j,cell_mean_score,success_rate,trials,seed,diversity_measure";
inline const std::string kFitHeader = "task,n_exp,alpha,beta,r";
inline const std::string kTrialHeader = "label,trial,target_class,env_id,layout_seed,policy_seed,stages,t,score,success,misses";
inline const std::string kSummaryHeader = "label,trials,mean_score,success_rate";

struct ResultRow {
  std::string task;
  int m = 0, n_exp = 0, j = 0;
  double cell_mean_score = 0, success_rate = 0;
  int trials = 0;
  std::uint64_t seed = 0;
  double diversity = 0;
};

inline std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string s = kResultsHeader + "\n";
  for (const auto& r : rows)
    s += r.task + "," + std::to_string(r.m) + "," + std::to_string(r.n_exp) + "," + std::to_string(r.j) + "," +
         fmt(r.cell_mean_score) + "," + fmt(r.success_rate) + "," + std::to_string(r.trials) + "," +
         std::to_string(r.seed) + "," + fmt(r.diversity) + "\n";
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<ResultRow> parse_results_csv(const std::string& text, const std::string& what) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(what + ": empty results file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kResultsHeader) throw FormatError(what + ": row 1: header does not match '" + kResultsHeader + "'");
  static const char* cols[] = {"task", "m", "n_exp", "j", "cell_mean_score", "success_rate", "trials", "seed",
                               "diversity_measure"};
  std::vector<ResultRow> rows;
  int rowno = 1;
  while (std::getline(in, line)) {
    ++rowno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() != 9)
      throw FormatError(what + ": row " + std::to_string(rowno) + ": expected 9 columns, got " +
                        std::to_string(f.size()));
    std::size_t col = 0;
    try {
      ResultRow r;
      r.task = f[col++];
      sim::parse_task(r.task);
      r.m = std::stoi(f[col++]);
      r.n_exp = std::stoi(f[col++]);
      r.j = std::stoi(f[col++]);
      r.cell_mean_score = std::stod(f[col++]);
      r.success_rate = std::stod(f[col++]);
      r.trials = std::stoi(f[col++]);
      r.seed = std::stoull(f[col++]);
      r.diversity = std::stod(f[col++]);
      if (r.cell_mean_score < 0 || r.cell_mean_score > 1) {
        col = 5;
        throw FormatError("score outside [0,1]");
      }
      rows.push_back(r);
    } catch (const std::exception& e) {
      throw FormatError(what + ": row " + std::to_string(rowno) + ", column " + cols[col - 1] + ": " + e.what());
    }
  }
  if (rows.empty()) throw FormatError(what + ": no result rows");
  return rows;
}

inline std::vector<scale::CellResult> cell_results_from_rows(const std::vector<ResultRow>& rows) {
  std::vector<scale::CellResult> out;
  for (const auto& r : rows) {
    scale::CellResult c;
    c.cell.m = r.m;
    c.cell.n_exp = r.n_exp;
    c.cell.j = r.j;
    c.cell.seed = r.seed;
    c.cell.diversity = r.diversity;
    c.mean_score = r.cell_mean_score;
    c.success_rate = r.success_rate;
    c.trials = r.trials;
    out.push_back(c);
  }
  return out;
}

struct FitRow {
  std::string task;
  int n_exp = 0;
  double alpha = 0, beta = 0, r = 0;
};

inline std::string fit_csv(const std::vector<FitRow>& rows) {
  std::string s = kFitHeader + "\n";
  for (const auto& f : rows)
    s += f.task + "," + std::to_string(f.n_exp) + "," + fmt(f.alpha) + "," + fmt(f.beta) + "," + fmt(f.r) + "\n";
  return s;
}

inline std::string stage_string(const sim::StageVector& st) {
  std::string s;
  for (int i = 0; i < st.count; ++i) s += st.flags[static_cast<std::size_t>(i)] ? '1' : '0';
  return s;
}

inline std::string trial_rows(const std::string& label, const eval::EvalReport& rep) {
  std::string s;
  for (std::size_t i = 0; i < rep.results.size(); ++i) {
    const auto& t = rep.trials[i];
    const auto& r = rep.results[i];
    s += label + "," + std::to_string(i) + "," + std::to_string(t.target_class) + "," + std::to_string(t.env_id) +
         "," + std::to_string(t.layout_seed) + "," + std::to_string(t.policy_seed) + "," + stage_string(r.stages) +
         "," + std::to_string(r.t) + "," + fmt(r.score) + "," + (r.stages.all() ? "1" : "0") + "," +
         std::to_string(r.misses) + "\n";
  }
  return s;
}

// --- SVG --------------------------------------------------------------------

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
  bool line = true;
  bool markers = true;
  std::string css = "series";  // fitted lines use "fit" so data series stay countable
};

struct PlotSpec {
  std::string title, x_label, y_label;
  bool log_x = false, log_y = false;
};

inline std::string svg_num(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.2f", v);
  return b;
}

inline std::string render_svg(const PlotSpec& ps, const std::vector<Series>& series) {
  constexpr double W = 640, H = 420, L = 70, R = 150, T = 40, B = 55;
  auto tx = [&](double x) { return ps.log_x ? std::log10(x) : x; };
  auto ty = [&](double y) { return ps.log_y ? std::log10(y) : y; };
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      if ((ps.log_x && x <= 0) || (ps.log_y && y <= 0)) continue;
      x0 = std::min(x0, tx(x));
      x1 = std::max(x1, tx(x));
      y0 = std::min(y0, ty(y));
      y1 = std::max(y1, ty(y));
    }
  if (x0 > x1) x0 = 0, x1 = 1;
  if (y0 > y1) y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double padx = 0.05 * (x1 - x0), pady = 0.08 * (y1 - y0);
  x0 -= padx, x1 += padx, y0 -= pady, y1 += pady;
  auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (ty(y) - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << " " << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << ps.title << "</text>\n";
  o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
    << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    const double vx = ps.log_x ? std::pow(10.0, fx) : fx, vy = ps.log_y ? std::pow(10.0, fy) : fy;
    const double gx = L + (W - L - R) * i / 4.0, gy = H - B - (H - T - B) * i / 4.0;
    o << "<text x=\"" << svg_num(gx) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << svg_num(vx)
      << "</text>\n";
    o << "<text x=\"" << L - 6 << "\" y=\"" << svg_num(gy + 4) << "\" text-anchor=\"end\">" << svg_num(vy)
      << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 14 << "\" text-anchor=\"middle\">" << ps.x_label
    << "</text>\n";
  o << "<text transform=\"translate(18," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << ps.y_label << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* col = colors[si % 7];
    o << "<g class=\"" << s.css << "\" data-label=\"" << s.label << "\">\n";
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : s.points)
      if (!(ps.log_x && p.first <= 0) && !(ps.log_y && p.second <= 0)) pts.push_back(p);
    if (s.line && pts.size() > 1) {
      o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
      for (const auto& [x, y] : pts) o << svg_num(px(x)) << "," << svg_num(py(y)) << " ";
      o << "\"/>\n";
    }
    if (s.markers)
      for (const auto& [x, y] : pts)
        o << "<circle cx=\"" << svg_num(px(x)) << "\" cy=\"" << svg_num(py(y)) << "\" r=\"3.5\" fill=\"" << col
          << "\"/>\n";
    const double ly = T + 14 + 18.0 * static_cast<double>(si);
    o << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly - 4
      << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - R + 38 << "\" y=\"" << ly << "\">" << s.label << "</text>\n";
    o << "</g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Mean score against m, one series per n.
inline std::string score_plot(const std::vector<scale::AggregateRow>& rows, const std::string& task) {
  std::map<int, Series> by_n;
  for (const auto& r : rows) {
    auto& s = by_n[r.n_exp];
    s.label = "n=" + std::to_string(r.n_exp);
    s.points.emplace_back(r.m, r.mean);
  }
  std::vector<Series> ss;
  for (auto it = by_n.rbegin(); it != by_n.rend(); ++it) ss.push_back(it->second);
  return render_svg({task + ": unseen score vs m", "m (2^m bbox classes)", "mean score"}, ss);
}

/// Log-log optimality gap with the fitted line, one series per n.
inline std::string gap_plot(const std::vector<scale::AggregateRow>& rows, const std::vector<FitRow>& fits,
                            const std::string& task) {
  std::map<int, Series> by_n;
  for (const auto& r : rows) {
    auto& s = by_n[r.n_exp];
    s.label = "n=" + std::to_string(r.n_exp);
    s.line = false;
    s.points.emplace_back(std::ldexp(1.0, r.m), 1.0 - r.mean);
  }
  std::vector<Series> ss;
  for (auto it = by_n.rbegin(); it != by_n.rend(); ++it) {
    ss.push_back(it->second);
    for (const auto& f : fits)
      if (f.n_exp == it->first) {
        Series fl;
        fl.label = "fit n=" + std::to_string(f.n_exp);
        fl.markers = false;
        fl.css = "fit";
        double lo = 1e300, hi = 0;
        for (const auto& p : it->second.points) lo = std::min(lo, p.first), hi = std::max(hi, p.first);
        for (double x : {lo, hi}) fl.points.emplace_back(x, f.beta * std::pow(x, f.alpha));
        ss.push_back(fl);
      }
  }
  PlotSpec ps{task + ": optimality gap (log-log)", "X = 2^m", "1 - S"};
  ps.log_x = ps.log_y = true;
  return render_svg(ps, ss);
}

}  // namespace bxl::io
