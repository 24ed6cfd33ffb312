#pragma once

// Scripted expert and the (M, N', K) demonstration dataset builder.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "bboxdp/bbox.hpp"
#include "bboxdp/common.hpp"
#include "bboxdp/worldsim.hpp"

namespace bxl::data {

struct ExpertConfig {
  double jitter_sigma = 0.05;
  double jitter_clip = 0.15;  // |jitter| bound, 3 sigma
  double gain = 0.6;          // fraction of the waypoint error closed per step
  double arrive_tol = 1.0;    // px from a waypoint
  double close_margin = 1.0;  // close once this far (px) from the target boundary
  double release_inset = 3.0; // release once this deep inside the zone
  int max_attempts = 5;
};

/// Proportional controller over the waypoints target -> grasp -> fixture,
/// with clipped Gaussian jitter on the translational command.
inline sim::Action expert_action(const sim::Scene& s, sim::TaskKind task, int target, Rng& rng,
                                 const ExpertConfig& ec = {}, const sim::SimConfig& sc = {}) {
  if (target < 0 || target >= static_cast<int>(s.objects.size()))
    throw NotFoundError("expert_action: target index " + std::to_string(target) + " not in scene");
  const sim::Agent& ag = s.agent;
  const sim::SceneObject& t = s.objects[static_cast<std::size_t>(target)];
  double wx = ag.x, wy = ag.y, g = 1.0;

  if (t.complete_clock >= 0) {
    g = 1.0;
  } else if (task == sim::TaskKind::press) {
    wx = t.x;
    wy = t.y;
    const bool near = sim::boundary_distance(t, ag.x, ag.y) <= ec.close_margin ||
                      std::hypot(wx - ag.x, wy - ag.y) <= ec.arrive_tol;
    g = (ag.gripper >= 0.5 && near) ? -1.0 : 1.0;
  } else if (ag.held == target) {
    const sim::Rect z = *s.zone();
    wx = z.cx();
    wy = z.cy();
    g = (task != sim::TaskKind::pour && z.expanded(-ec.release_inset).contains(t.x, t.y)) ? 1.0 : -1.0;
  } else if (ag.held >= 0) {
    g = 1.0;  // holding the wrong object: let go
  } else {
    wx = t.x;
    wy = t.y;
    const bool near = sim::boundary_distance(t, ag.x, ag.y) <= ec.close_margin ||
                      std::hypot(wx - ag.x, wy - ag.y) <= ec.arrive_tol;
    g = (ag.gripper >= 0.5 && near) ? -1.0 : 1.0;
  }

  auto command = [&](double err) { return std::clamp(ec.gain * err / sc.v_max, -1.0, 1.0); };
  auto jitter = [&] { return std::clamp(ec.jitter_sigma * rng.normal(), -ec.jitter_clip, ec.jitter_clip); };
  const double jx = jitter();
  const double jy = jitter();
  return sim::clamp_action({command(wx - ag.x) + jx, command(wy - ag.y) + jy, g});
}

struct Frame {
  sim::Raster raster;
  std::array<double, 3> proprio{};  // agent x, y (px) and gripper
};

inline std::array<double, 3> proprio_of(const sim::Scene& s) { return {s.agent.x, s.agent.y, s.agent.gripper}; }

struct Demonstration {
  sim::TaskKind task = sim::TaskKind::dispose;
  int env_id = 0;
  int target_class = 0;
  int index_in_class = 0;
  std::vector<int> distractors;
  std::uint64_t seed = 0;  // layout/jitter seed of the successful attempt
  std::vector<Frame> frames;
  std::vector<sim::Action> actions;
  std::vector<annot::BBox> bboxes;
  sim::StageVector stages;
  bool success = false;
};

class CollectionError : public Error { using Error::Error; };

/// Ground-truth minimum box of an object, falling back to its unoccluded
/// footprint if it is completely hidden.
inline annot::BBox oracle_bbox(const sim::Scene& s, int index) {
  sim::Mask m = sim::ground_truth_mask(s, index);
  if (m.empty()) {
    const sim::SceneObject& o = s.objects[static_cast<std::size_t>(index)];
    for (int y = 0; y < sim::kSize; ++y)
      for (int x = 0; x < sim::kSize; ++x)
        if (sim::object_covers(o, x, y)) m.set(y, x);
  }
  return annot::min_bbox(m);
}

/// Runs one expert episode from spawn_scene(seed) and records it.
inline Demonstration record_episode(const sim::ClassRegistry& reg, int env_id, sim::TaskKind task, int target_class,
                                    const std::vector<int>& distractors, std::uint64_t seed,
                                    const ExpertConfig& ec = {}, const sim::SimConfig& sc = {}) {
  Demonstration d;
  d.task = task;
  d.env_id = env_id;
  d.target_class = target_class;
  d.distractors = distractors;
  d.seed = seed;
  sim::Scene scene = sim::spawn_scene(reg, env_id, task, target_class, distractors, seed, sc);
  Rng rng(derive_seed({seed, 0xE8A7ULL}));
  const int target = scene.target;
  auto snapshot = [&] {
    d.frames.push_back(Frame{sim::render(scene), proprio_of(scene)});
    d.bboxes.push_back(oracle_bbox(scene, target));
  };
  snapshot();
  while (scene.clock < sc.episode_cap && !sim::stage_status(scene, task, target).all()) {
    const sim::Action a = expert_action(scene, task, target, rng, ec, sc);
    sim::advance(scene, a, sc);
    d.actions.push_back(a);
    snapshot();
  }
  d.stages = sim::stage_status(scene, task, target);
  d.success = d.stages.all();
  return d;
}

/// Expert rollout with up to `max_attempts` perturbed seeds; only
/// successful episodes are returned.
inline Demonstration collect_demo(const sim::ClassRegistry& reg, int env_id, sim::TaskKind task, int target_class,
                                  const std::vector<int>& distractors, std::uint64_t seed,
                                  const ExpertConfig& ec = {}, const sim::SimConfig& sc = {}) {
  std::string last;
  for (int attempt = 0; attempt < ec.max_attempts; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : derive_seed({seed, static_cast<std::uint64_t>(attempt)});
    try {
      Demonstration d = record_episode(reg, env_id, task, target_class, distractors, s, ec, sc);
      if (d.success) return d;
      last = "episode cap reached";
    } catch (const sim::CrowdedError& e) {
      last = e.what();
    }
  }
  throw CollectionError("collect_demo failed " + std::to_string(ec.max_attempts) + " times for task " +
                        std::string(sim::to_string(task)) + ", env " + std::to_string(env_id) + ", class " +
                        std::to_string(target_class) + ", seed " + std::to_string(seed) + ": " + last);
}

/// Replays recorded actions from the demonstration's initial scene.
inline sim::Scene replay(const sim::ClassRegistry& reg, const Demonstration& d, const sim::SimConfig& sc = {}) {
  sim::Scene s = sim::spawn_scene(reg, d.env_id, d.task, d.target_class, d.distractors, d.seed, sc);
  for (const sim::Action& a : d.actions) sim::advance(s, a, sc);
  return s;
}

enum class Provenance { groundtruth, detector };

inline std::string_view to_string(Provenance p) { return p == Provenance::groundtruth ? "groundtruth" : "detector"; }

inline Provenance parse_provenance(std::string_view s) {
  if (s == "groundtruth") return Provenance::groundtruth;
  if (s == "detector") return Provenance::detector;
  throw ConfigError("unknown annotation provenance '" + std::string(s) + "'");
}

struct DatasetSpec {
  sim::TaskKind task = sim::TaskKind::dispose;
  int env_count = 4;         // M: environments 0..M-1
  int class_count = 16;      // N': registry classes 0..N'-1
  int demos_per_class = 100; // K, spread round-robin over the M envs
  int min_distractors = 1;
  int max_distractors = 3;
  std::uint64_t master_seed = 0;

  std::vector<int> env_ids() const {
    std::vector<int> v(static_cast<std::size_t>(env_count));
    for (int i = 0; i < env_count; ++i) v[static_cast<std::size_t>(i)] = i;
    return v;
  }
  std::vector<int> class_ids() const {
    std::vector<int> v(static_cast<std::size_t>(class_count));
    for (int i = 0; i < class_count; ++i) v[static_cast<std::size_t>(i)] = i;
    return v;
  }
  void validate(const sim::ClassRegistry& reg) const {
    if (env_count < 1 || env_count > sim::kEnvCount)
      throw ConfigError("env count must be in [1, " + std::to_string(sim::kEnvCount) + "]");
    if (class_count < 1) throw ConfigError("class count must be >= 1");
    if (static_cast<std::size_t>(class_count) > reg.size())
      throw ConfigError("registry has " + std::to_string(reg.size()) + " classes, spec needs " +
                        std::to_string(class_count));
    if (demos_per_class < 1) throw ConfigError("demos per class must be >= 1");
    if (min_distractors < 0 || min_distractors > max_distractors) throw ConfigError("bad distractor range");
  }
  bool operator==(const DatasetSpec&) const = default;
};

struct RecordEntry {
  int id = 0;
  std::string file;
  int class_id = 0;
  int env_id = 0;
  int k = 0;
  int frames = 0;
  bool operator==(const RecordEntry&) const = default;
};

struct DatasetManifest {
  DatasetSpec spec;
  std::vector<RecordEntry> records;
  std::map<int, int> per_class;
  std::map<int, int> per_env;
  Provenance annotation = Provenance::groundtruth;
  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Demonstration> demos;  // parallel to manifest.records
};

inline std::string record_file_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "demo_%06d.bxr", id);
  return buf;
}

inline DatasetManifest index_demos(const DatasetSpec& spec, const std::vector<Demonstration>& demos,
                                   Provenance prov) {
  DatasetManifest m;
  m.spec = spec;
  m.annotation = prov;
  for (std::size_t i = 0; i < demos.size(); ++i) {
    const Demonstration& d = demos[i];
    RecordEntry e{static_cast<int>(i), record_file_name(static_cast<int>(i)), d.target_class, d.env_id,
                  d.index_in_class, static_cast<int>(d.frames.size())};
    m.records.push_back(e);
    m.per_class[d.target_class] += 1;
    m.per_env[d.env_id] += 1;
  }
  return m;
}

inline std::uint64_t demo_seed(std::uint64_t master, int class_id, int env_id, int k) {
  return derive_seed({master, static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(env_id),
                      static_cast<std::uint64_t>(k)});
}

/// One demonstration of the canonical build order; independent of every
/// other, so builds can be split across workers.
inline Demonstration build_one(const sim::ClassRegistry& reg, const DatasetSpec& spec, int class_id, int k,
                               const ExpertConfig& ec = {}, const sim::SimConfig& sc = {}) {
  const auto envs = spec.env_ids();
  const int env = envs[static_cast<std::size_t>(k % spec.env_count)];
  const std::uint64_t seed = demo_seed(spec.master_seed, class_id, env, k);
  Rng rng(derive_seed({seed, 0xD157ULL}));
  std::vector<int> others;
  for (int c : spec.class_ids())
    if (c != class_id) others.push_back(c);
  const int want = std::min<int>(rng.uniform_int(spec.min_distractors, spec.max_distractors),
                                 static_cast<int>(others.size()));
  std::vector<int> distractors;
  for (int i = 0; i < want; ++i) {
    const int j = rng.uniform_int(i, static_cast<int>(others.size()) - 1);
    std::swap(others[static_cast<std::size_t>(i)], others[static_cast<std::size_t>(j)]);
    distractors.push_back(others[static_cast<std::size_t>(i)]);
  }
  Demonstration d = collect_demo(reg, env, spec.task, class_id, distractors, seed, ec, sc);
  d.index_in_class = k;
  return d;
}

inline Dataset build_dataset(const sim::ClassRegistry& reg, const DatasetSpec& spec, const ExpertConfig& ec = {},
                             const sim::SimConfig& sc = {}) {
  spec.validate(reg);
  Dataset ds;
  for (int c : spec.class_ids())
    for (int k = 0; k < spec.demos_per_class; ++k) ds.demos.push_back(build_one(reg, spec, c, k, ec, sc));
  ds.manifest = index_demos(spec, ds.demos, Provenance::groundtruth);
  return ds;
}

/// 5th percentile (nearest-rank) of expert completion steps.
inline int completion_percentile(const std::vector<Demonstration>& demos, double q = 0.05) {
  std::vector<int> t;
  for (const auto& d : demos)
    if (d.success) t.push_back(d.stages.completion_clock());
  if (t.empty()) throw DataError("no successful demonstrations to derive completion statistics");
  std::sort(t.begin(), t.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(t.size())));
  return t[rank == 0 ? 0 : rank - 1];
}

}  // namespace bxl::data
