#pragma once

// Deterministic 2D tabletop: textured objects on a 64x64 workspace, a planar
// gripper agent, task fixtures and latched stage bookkeeping.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bboxdp/common.hpp"

namespace bxl::sim {

inline constexpr int kSize = 64;
inline constexpr int kPixels = kSize * kSize;

enum class ShapeKind { circle, square, triangle, bar, ell, cross, ring, wedge };
enum class TextureKind { solid, striped, checker, dotted };
enum class TaskKind { dispose, press, fetch, pour };

inline constexpr std::array<std::string_view, 8> kShapeNames = {"circle", "square", "triangle", "bar",
                                                                 "ell",    "cross",  "ring",     "wedge"};
inline constexpr std::array<std::string_view, 4> kTextureNames = {"solid", "striped", "checker", "dotted"};
inline constexpr std::array<std::string_view, 4> kTaskNames = {"dispose", "press", "fetch", "pour"};

inline std::string_view to_string(TaskKind t) { return kTaskNames[static_cast<std::size_t>(t)]; }
inline std::string_view to_string(ShapeKind s) { return kShapeNames[static_cast<std::size_t>(s)]; }
inline std::string_view to_string(TextureKind t) { return kTextureNames[static_cast<std::size_t>(t)]; }

inline TaskKind parse_task(std::string_view s) {
  for (std::size_t i = 0; i < kTaskNames.size(); ++i)
    if (kTaskNames[i] == s) return static_cast<TaskKind>(i);
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

inline int stage_count(TaskKind t) { return t == TaskKind::press ? 2 : 3; }

struct Rgb {
  double r = 0, g = 0, b = 0;
};

inline double color_distance(const Rgb& a, const Rgb& b) {
  const double dr = a.r - b.r, dg = a.g - b.g, db = a.b - b.b;
  return std::sqrt(dr * dr + dg * dg + db * db);
}

inline Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb o;
  switch (static_cast<int>(hp) % 6) {
    case 0: o = {c, x, 0}; break;
    case 1: o = {x, c, 0}; break;
    case 2: o = {0, c, x}; break;
    case 3: o = {0, x, c}; break;
    case 4: o = {x, 0, c}; break;
    default: o = {c, 0, x}; break;
  }
  const double m = v - c;
  return {o.r + m, o.g + m, o.b + m};
}

struct ObjectClass {
  int id = 0;
  ShapeKind shape = ShapeKind::circle;
  TextureKind texture = TextureKind::solid;
  double hue = 0.0;
  double saturation = 0.8;
  double value = 0.9;
  double scale = 5.0;  // shape half-extent in px

  int hue_bucket() const { return static_cast<int>(hue * 16.0); }
  Rgb color() const { return hsv_to_rgb(hue, saturation, value); }
};

class ClassRegistry {
 public:
  /// The fixed registry every dataset draws from: a seeded permutation of
  /// all (shape, texture) pairs with golden-ratio hue spacing.
  static ClassRegistry standard(std::size_t count = 32) {
    if (count == 0 || count > 32) throw ConfigError("registry size must be in [1, 32]");
    std::array<int, 32> combo{};
    for (int i = 0; i < 32; ++i) combo[static_cast<std::size_t>(i)] = i;
    Rng rng(0xB0B0B0B0ULL);
    for (int i = 31; i > 0; --i) std::swap(combo[static_cast<std::size_t>(i)], combo[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    ClassRegistry reg;
    for (std::size_t i = 0; i < count; ++i) {
      ObjectClass c;
      c.id = static_cast<int>(i);
      c.shape = static_cast<ShapeKind>(combo[i] % 8);
      c.texture = static_cast<TextureKind>(combo[i] / 8);
      const double h = 0.07 + 0.6180339887498949 * static_cast<double>(i);
      c.hue = h - std::floor(h);
      c.saturation = (i % 2 == 0) ? 0.85 : 0.6;
      c.value = ((i / 2) % 2 == 0) ? 0.92 : 0.78;
      const double f = 0.37 + 0.7548776662466927 * static_cast<double>(i);
      c.scale = 4.6 + 1.4 * (f - std::floor(f));
      reg.classes_.push_back(c);
    }
    return reg;
  }

  std::size_t size() const { return classes_.size(); }
  bool contains(int id) const { return id >= 0 && static_cast<std::size_t>(id) < classes_.size(); }
  const ObjectClass& at(int id) const {
    if (!contains(id)) throw NotFoundError("class id " + std::to_string(id) + " not in registry");
    return classes_[static_cast<std::size_t>(id)];
  }
  const std::vector<ObjectClass>& all() const { return classes_; }

 private:
  std::vector<ObjectClass> classes_;
};

struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
  Rect expanded(double m) const { return {x0 - m, y0 - m, x1 + m, y1 + m}; }
};

struct EnvVariant {
  int id;
  Rgb background;
  double noise_amp;
  int pattern;
  Rect bin;
  Rect handover;
  Rect cup;
  double home_x;
  double home_y;
};

inline constexpr int kEnvCount = 6;

inline const std::array<EnvVariant, kEnvCount>& env_table() {
  static const std::array<EnvVariant, kEnvCount> table = {{
      {0, {0.46, 0.45, 0.42}, 0.025, 0, {46, 4, 60, 18}, {4, 4, 18, 18}, {4, 26, 16, 38}, 32.5, 56.5},
      {1, {0.38, 0.40, 0.43}, 0.025, 1, {44, 5, 58, 19}, {5, 3, 19, 17}, {3, 24, 15, 36}, 30.5, 57.5},
      {2, {0.52, 0.50, 0.47}, 0.025, 2, {47, 3, 61, 17}, {3, 5, 17, 19}, {5, 27, 17, 39}, 34.5, 55.5},
      {3, {0.43, 0.44, 0.44}, 0.025, 3, {45, 6, 59, 20}, {4, 6, 18, 20}, {4, 25, 16, 37}, 31.5, 56.5},
      {4, {0.36, 0.35, 0.33}, 0.025, 0, {46, 5, 60, 19}, {6, 4, 20, 18}, {3, 26, 15, 38}, 33.5, 57.5},
      {5, {0.55, 0.55, 0.53}, 0.025, 1, {45, 4, 59, 18}, {5, 5, 19, 19}, {5, 24, 17, 36}, 32.5, 55.5},
  }};
  return table;
}

inline const EnvVariant& env_variant(int env_id) {
  if (env_id < 0 || env_id >= kEnvCount) throw NotFoundError("env id " + std::to_string(env_id) + " not defined");
  return env_table()[static_cast<std::size_t>(env_id)];
}

struct SimConfig {
  double v_max = 2.0;           // px per step at |action| = 1
  double grasp_radius = 3.0;    // px from the object's boundary
  double approach_radius = 6.0; // px from the object's boundary
  int episode_cap = 200;
  double gripper_rate = 0.3;    // gripper change per step at |g| = 1
  int pour_dwell = 4;           // steps held still over the cup
};

struct Action {
  double dx = 0, dy = 0, g = 0;
};

inline Action clamp_action(Action a) {
  auto c = [](double v) { return std::isfinite(v) ? std::clamp(v, -1.0, 1.0) : 0.0; };
  return {c(a.dx), c(a.dy), c(a.g)};
}

struct SceneObject {
  int class_id = 0;
  ShapeKind shape = ShapeKind::circle;
  TextureKind texture = TextureKind::solid;
  Rgb color;
  double x = 0, y = 0;
  double scale = 5.0;
  bool held = false;
  int approach_clock = -1;
  int grasp_clock = -1;
  int complete_clock = -1;
};

struct Agent {
  double x = 0, y = 0;
  double gripper = 1.0;
  int held = -1;
};

struct Scene {
  int env_id = 0;
  TaskKind task = TaskKind::dispose;
  std::vector<SceneObject> objects;
  Agent agent;
  int target = 0;  // index of the instructed object
  int clock = 0;
  int dwell = 0;

  /// Zone where the task terminates; press has none.
  std::optional<Rect> zone() const {
    const EnvVariant& e = env_variant(env_id);
    switch (task) {
      case TaskKind::dispose: return e.bin;
      case TaskKind::fetch: return e.handover;
      case TaskKind::pour: return e.cup;
      case TaskKind::press: return std::nullopt;
    }
    return std::nullopt;
  }
};

/// Shape membership for an offset (dx, dy) from the object centre.
inline bool shape_contains(ShapeKind k, double dx, double dy, double s) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (k) {
    case ShapeKind::circle: return dx * dx + dy * dy <= s * s;
    case ShapeKind::square: return ax <= 0.8 * s && ay <= 0.8 * s;
    case ShapeKind::triangle: {
      if (dy < -0.85 * s || dy > 0.85 * s) return false;
      return ax <= 0.95 * s * (dy + 0.85 * s) / (1.7 * s) + 0.5;
    }
    case ShapeKind::bar: return ax <= 1.05 * s && ay <= 0.4 * s;
    case ShapeKind::ell:
      return (dx >= -0.85 * s && dx <= -0.15 * s && ay <= 0.85 * s) ||
             (dy >= 0.15 * s && dy <= 0.85 * s && ax <= 0.85 * s);
    case ShapeKind::cross: return (ax <= 0.32 * s && ay <= 0.95 * s) || (ay <= 0.32 * s && ax <= 0.95 * s);
    case ShapeKind::ring: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= s * s && r2 >= 0.25 * s * s;
    }
    case ShapeKind::wedge: {
      if (dx * dx + dy * dy > s * s) return false;
      // 140 degree sector opening downward
      const double ang = std::atan2(dx, dy);
      return std::abs(ang) <= 70.0 * std::numbers::pi / 180.0;
    }
  }
  return false;
}

inline double bounding_radius(double scale) { return 1.15 * scale; }

inline double texture_factor(TextureKind t, int px, int py) {
  switch (t) {
    case TextureKind::solid: return 1.0;
    case TextureKind::striped: return ((py / 2) % 2) ? 1.035 : 0.965;
    case TextureKind::checker: return ((px / 2 + py / 2) % 2) ? 1.035 : 0.965;
    case TextureKind::dotted: return (px % 3 == 0 && py % 3 == 0) ? 0.93 : 1.01;
  }
  return 1.0;
}

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// 64x64 RGB image; channel values are multiples of 1/255 in [0, 1].
struct Raster {
  std::array<std::uint8_t, kPixels * 3> data{};

  double at(int y, int x, int c) const {
    return data[static_cast<std::size_t>((y * kSize + x) * 3 + c)] / 255.0;
  }
  Rgb rgb(int y, int x) const { return {at(y, x, 0), at(y, x, 1), at(y, x, 2)}; }
  void set(int y, int x, const Rgb& c) {
    auto i = static_cast<std::size_t>((y * kSize + x) * 3);
    data[i] = quantize(c.r);
    data[i + 1] = quantize(c.g);
    data[i + 2] = quantize(c.b);
  }
  bool operator==(const Raster&) const = default;
};

struct Mask {
  std::array<std::uint8_t, kPixels> bits{};

  bool at(int y, int x) const { return bits[static_cast<std::size_t>(y * kSize + x)] != 0; }
  void set(int y, int x, bool v = true) { bits[static_cast<std::size_t>(y * kSize + x)] = v ? 1 : 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool empty() const { return count() == 0; }
  bool operator==(const Mask&) const = default;
};

inline constexpr int kLabelBackground = -1;
inline constexpr int kLabelFixture = -2;
inline constexpr int kLabelAgent = -3;

using LabelMap = std::array<int, kPixels>;

inline bool object_covers(const SceneObject& o, int px, int py) {
  return shape_contains(o.shape, px + 0.5 - o.x, py + 0.5 - o.y, o.scale);
}

inline int agent_pixel(double v) { return std::clamp(static_cast<int>(std::floor(v)), 0, kSize - 1); }

/// Per-pixel owner under painter's order: fixture, objects by list index
/// (a held object is painted last), then the one-pixel agent marker.
inline LabelMap label_map(const Scene& s) {
  LabelMap labels;
  labels.fill(kLabelBackground);
  if (auto z = s.zone()) {
    for (int y = 0; y < kSize; ++y)
      for (int x = 0; x < kSize; ++x)
        if (z->contains(x + 0.5, y + 0.5)) labels[static_cast<std::size_t>(y * kSize + x)] = kLabelFixture;
  }
  auto paint = [&](int idx) {
    const SceneObject& o = s.objects[static_cast<std::size_t>(idx)];
    const double r = bounding_radius(o.scale) + 1.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(o.x - r)));
    const int x1 = std::min(kSize - 1, static_cast<int>(std::ceil(o.x + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(o.y - r)));
    const int y1 = std::min(kSize - 1, static_cast<int>(std::ceil(o.y + r)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (object_covers(o, x, y)) labels[static_cast<std::size_t>(y * kSize + x)] = idx;
  };
  for (int i = 0; i < static_cast<int>(s.objects.size()); ++i)
    if (i != s.agent.held) paint(i);
  if (s.agent.held >= 0) paint(s.agent.held);
  labels[static_cast<std::size_t>(agent_pixel(s.agent.y) * kSize + agent_pixel(s.agent.x))] = kLabelAgent;
  return labels;
}

inline Rgb background_color(const EnvVariant& e, int x, int y) {
  double n = 0.0;
  switch (e.pattern) {
    case 0: n = static_cast<double>(mix64(static_cast<std::uint64_t>(y * kSize + x) + 977ULL * e.id) % 1001) / 500.0 - 1.0; break;
    case 1: n = ((y / 4) % 2) ? 0.8 : -0.8; break;
    case 2: n = (((x + y) / 5) % 2) ? 0.8 : -0.8; break;
    default: n = (((x / 8) + (y / 8)) % 2) ? 0.8 : -0.8; break;
  }
  const double d = e.noise_amp * n;
  return {e.background.r + d, e.background.g + d, e.background.b + d};
}

inline Rgb fixture_color(TaskKind t, int x, int y, const Rect& z) {
  const bool border = x + 0.5 < z.x0 + 1.0 || x + 0.5 > z.x1 - 1.0 || y + 0.5 < z.y0 + 1.0 || y + 0.5 > z.y1 - 1.0;
  switch (t) {
    case TaskKind::fetch: return border ? Rgb{0.12, 0.16, 0.10} : Rgb{0.22, 0.28, 0.18};
    case TaskKind::pour: return border ? Rgb{0.16, 0.10, 0.10} : Rgb{0.30, 0.18, 0.18};
    default: return border ? Rgb{0.10, 0.10, 0.15} : Rgb{0.18, 0.20, 0.28};
  }
}

inline Rgb object_color(const SceneObject& o, int x, int y) {
  const double f = texture_factor(o.texture, x, y);
  return {o.color.r * f, o.color.g * f, o.color.b * f};
}

inline Raster render(const Scene& s) {
  const LabelMap labels = label_map(s);
  const EnvVariant& env = env_variant(s.env_id);
  const auto zone = s.zone();
  Raster out;
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      const int l = labels[static_cast<std::size_t>(y * kSize + x)];
      Rgb c;
      if (l == kLabelBackground) c = background_color(env, x, y);
      else if (l == kLabelFixture) c = fixture_color(s.task, x, y, *zone);
      else if (l == kLabelAgent) c = s.agent.gripper < 0.5 ? Rgb{0.02, 0.02, 0.02} : Rgb{0.98, 0.98, 0.98};
      else c = object_color(s.objects[static_cast<std::size_t>(l)], x, y);
      out.set(y, x, c);
    }
  }
  return out;
}

inline Mask ground_truth_mask(const Scene& s, int object_index) {
  if (object_index < 0 || object_index >= static_cast<int>(s.objects.size()))
    throw NotFoundError("object index " + std::to_string(object_index) + " not in scene");
  const LabelMap labels = label_map(s);
  Mask m;
  for (int i = 0; i < kPixels; ++i) m.bits[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == object_index;
  return m;
}

/// Distance from a point to the nearest pixel centre of the object's
/// unoccluded footprint; 0 when the point's pixel is part of it.
inline double boundary_distance(const SceneObject& o, double px, double py) {
  const int apx = agent_pixel(px), apy = agent_pixel(py);
  if (object_covers(o, apx, apy)) return 0.0;
  const double r = bounding_radius(o.scale) + 1.0;
  double best = 1e9;
  const int x0 = std::max(0, static_cast<int>(std::floor(o.x - r)));
  const int x1 = std::min(kSize - 1, static_cast<int>(std::ceil(o.x + r)));
  const int y0 = std::max(0, static_cast<int>(std::floor(o.y - r)));
  const int y1 = std::min(kSize - 1, static_cast<int>(std::ceil(o.y + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (object_covers(o, x, y)) {
        const double dx = x + 0.5 - px, dy = y + 0.5 - py;
        best = std::min(best, dx * dx + dy * dy);
      }
  return std::sqrt(best);
}

class CrowdedError : public Error { using Error::Error; };

inline SceneObject make_object(const ObjectClass& c, double x, double y, double scale) {
  SceneObject o;
  o.class_id = c.id;
  o.shape = c.shape;
  o.texture = c.texture;
  o.color = c.color();
  o.x = x;
  o.y = y;
  o.scale = scale;
  return o;
}

/// Places the target and distractors without overlap, clear of the task
/// zone and the agent's home pose. The target's list position is random.
inline Scene spawn_scene(const ClassRegistry& reg, int env_id, TaskKind task, int target_class,
                         const std::vector<int>& distractor_classes, std::uint64_t layout_seed,
                         const SimConfig& cfg = {}) {
  const EnvVariant& env = env_variant(env_id);
  Scene s;
  s.env_id = env_id;
  s.task = task;
  s.agent = Agent{env.home_x, env.home_y, 1.0, -1};
  Rng rng(derive_seed({layout_seed, static_cast<std::uint64_t>(env_id), 0x5CE4EULL}));

  std::vector<int> classes{target_class};
  classes.insert(classes.end(), distractor_classes.begin(), distractor_classes.end());
  std::vector<SceneObject> placed;
  const auto zone = s.zone();
  for (int cid : classes) {
    const ObjectClass& c = reg.at(cid);
    const double scale = c.scale * (1.0 + rng.uniform(-0.08, 0.08));
    const double r = bounding_radius(scale);
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      const double x = rng.uniform(r + 2.0, kSize - r - 2.0);
      const double y = rng.uniform(r + 2.0, kSize - r - 2.0);
      if (zone && zone->expanded(r + 3.0).contains(x, y)) continue;
      if (std::hypot(x - env.home_x, y - env.home_y) < r + cfg.approach_radius + 3.0) continue;
      ok = std::all_of(placed.begin(), placed.end(), [&](const SceneObject& p) {
        return std::hypot(x - p.x, y - p.y) >= r + bounding_radius(p.scale) + 3.0;
      });
      if (ok) placed.push_back(make_object(c, x, y, scale));
    }
    if (!ok)
      throw CrowdedError("workspace too crowded: could not place class " + std::to_string(cid) + " in env " +
                         std::to_string(env_id) + " after 1000 attempts");
  }
  // random list order (painter's z) with the target tracked
  std::vector<int> order(placed.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  for (std::size_t i = 0; i < order.size(); ++i) {
    s.objects.push_back(placed[static_cast<std::size_t>(order[i])]);
    if (order[i] == 0) s.target = static_cast<int>(i);
  }
  return s;
}

/// Advances the scene by one clamped action in place.
inline void advance(Scene& s, Action raw, const SimConfig& cfg = {}) {
  const Action a = clamp_action(raw);
  Agent& ag = s.agent;
  const double ox = ag.x, oy = ag.y;
  ag.x = std::clamp(ag.x + a.dx * cfg.v_max, 0.5, kSize - 0.5);
  ag.y = std::clamp(ag.y + a.dy * cfg.v_max, 0.5, kSize - 0.5);
  if (ag.held >= 0) {
    SceneObject& h = s.objects[static_cast<std::size_t>(ag.held)];
    h.x = std::clamp(h.x + (ag.x - ox), 0.0, static_cast<double>(kSize));
    h.y = std::clamp(h.y + (ag.y - oy), 0.0, static_cast<double>(kSize));
  }
  const double prev = ag.gripper;
  ag.gripper = std::clamp(ag.gripper + a.g * cfg.gripper_rate, 0.0, 1.0);
  s.clock += 1;

  std::vector<double> dist(s.objects.size());
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    dist[i] = boundary_distance(s.objects[i], ag.x, ag.y);
    if (s.objects[i].approach_clock < 0 && dist[i] <= cfg.approach_radius) s.objects[i].approach_clock = s.clock;
  }

  const bool closed_now = prev >= 0.5 && ag.gripper < 0.5;
  const bool opened_now = prev < 0.5 && ag.gripper >= 0.5;
  const auto zone = s.zone();

  if (closed_now && ag.held < 0) {
    int best = -1;
    for (std::size_t i = 0; i < s.objects.size(); ++i)
      if (dist[i] <= cfg.grasp_radius && (best < 0 || dist[i] < dist[static_cast<std::size_t>(best)]))
        best = static_cast<int>(i);
    if (best >= 0) {
      SceneObject& o = s.objects[static_cast<std::size_t>(best)];
      if (s.task == TaskKind::press) {
        if (o.complete_clock < 0) o.complete_clock = s.clock;
      } else {
        ag.held = best;
        o.held = true;
        if (o.grasp_clock < 0) o.grasp_clock = s.clock;
      }
    }
  } else if (opened_now && ag.held >= 0) {
    SceneObject& o = s.objects[static_cast<std::size_t>(ag.held)];
    o.held = false;
    if ((s.task == TaskKind::dispose || s.task == TaskKind::fetch) && zone && zone->contains(o.x, o.y) &&
        o.complete_clock < 0)
      o.complete_clock = s.clock;
    ag.held = -1;
  }

  if (s.task == TaskKind::pour) {
    if (ag.held >= 0 && zone && zone->contains(ag.x, ag.y) && std::abs(a.dx) < 0.25 && std::abs(a.dy) < 0.25) {
      s.dwell += 1;
      SceneObject& o = s.objects[static_cast<std::size_t>(ag.held)];
      if (s.dwell >= cfg.pour_dwell && o.complete_clock < 0) o.complete_clock = s.clock;
    } else {
      s.dwell = 0;
    }
  }
}

inline Scene step(Scene s, Action a, const SimConfig& cfg = {}) {
  advance(s, a, cfg);
  return s;
}

struct StageVector {
  int count = 3;
  std::array<bool, 3> flags{};
  std::array<int, 3> clocks{-1, -1, -1};

  bool all() const {
    for (int i = 0; i < count; ++i)
      if (!flags[static_cast<std::size_t>(i)]) return false;
    return true;
  }
  int completed() const {
    int n = 0;
    for (int i = 0; i < count; ++i) n += flags[static_cast<std::size_t>(i)] ? 1 : 0;
    return n;
  }
  /// Clock of the final stage, or -1 when incomplete.
  int completion_clock() const { return all() ? clocks[static_cast<std::size_t>(count - 1)] : -1; }
  bool operator==(const StageVector&) const = default;
};

inline StageVector stage_status(const Scene& s, TaskKind task, int target_index) {
  if (target_index < 0 || target_index >= static_cast<int>(s.objects.size()))
    throw NotFoundError("target index " + std::to_string(target_index) + " not in scene");
  const SceneObject& o = s.objects[static_cast<std::size_t>(target_index)];
  StageVector v;
  v.count = stage_count(task);
  if (task == TaskKind::press) {
    v.clocks = {o.approach_clock, o.complete_clock, -1};
  } else {
    v.clocks = {o.approach_clock, o.grasp_clock, o.complete_clock};
  }
  for (int i = 0; i < v.count; ++i) v.flags[static_cast<std::size_t>(i)] = v.clocks[static_cast<std::size_t>(i)] >= 0;
  return v;
}

}  // namespace bxl::sim
