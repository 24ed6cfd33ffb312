#pragma once

// Point prompt -> flood segmentation -> minimum box, per-frame tracking by
// re-seeding, and a prototype-matching detector over connected components.

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bboxdp/bbox.hpp"
#include "bboxdp/common.hpp"
#include "bboxdp/expertdata.hpp"
#include "bboxdp/worldsim.hpp"

namespace bxl::annot {

struct AnnotateConfig {
  double flood_tol = 0.12;       // RGB Euclidean distance to the seed colour
  double background_tol = 0.12;  // distance to an env background base colour
  int max_lost_frames = 3;
  int min_component = 4;         // px; smaller proposals are ignored
};

class PromptUnavailableError : public Error { using Error::Error; };
class TrackingError : public Error { using Error::Error; };
class CoverageError : public Error { using Error::Error; };
class UnknownClassError : public Error { using Error::Error; };

/// Interior pixel of the target's visible mask nearest to the mask centroid.
inline PixelPoint laser_prompt(const sim::Scene& s, int target_index) {
  const sim::Mask m = sim::ground_truth_mask(s, target_index);
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (int y = 0; y < sim::kSize; ++y)
    for (int x = 0; x < sim::kSize; ++x)
      if (m.at(y, x)) {
        sx += x + 0.5;
        sy += y + 0.5;
        ++n;
      }
  if (n == 0) throw PromptUnavailableError("laser_prompt: target " + std::to_string(target_index) + " fully occluded");
  const double cx = sx / static_cast<double>(n), cy = sy / static_cast<double>(n);
  PixelPoint best{};
  double bd = 1e18;
  for (int y = 0; y < sim::kSize; ++y)
    for (int x = 0; x < sim::kSize; ++x)
      if (m.at(y, x)) {
        const double d = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
        if (d < bd) {
          bd = d;
          best = {x, y};
        }
      }
  return best;
}

/// 4-connected region of pixels within `tol` of the seed pixel's colour.
inline sim::Mask flood_segment(const sim::Raster& r, PixelPoint seed, double tol) {
  if (seed.x < 0 || seed.x >= sim::kSize || seed.y < 0 || seed.y >= sim::kSize)
    throw ContractError("flood_segment: seed out of bounds");
  const sim::Rgb ref = r.rgb(seed.y, seed.x);
  sim::Mask m;
  std::deque<PixelPoint> q{seed};
  m.set(seed.y, seed.x);
  constexpr std::array<std::array<int, 2>, 4> nb{{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};
  while (!q.empty()) {
    const PixelPoint p = q.front();
    q.pop_front();
    for (const auto& d : nb) {
      const int x = p.x + d[0], y = p.y + d[1];
      if (x < 0 || y < 0 || x >= sim::kSize || y >= sim::kSize || m.at(y, x)) continue;
      if (sim::color_distance(r.rgb(y, x), ref) <= tol) {
        m.set(y, x);
        q.push_back({x, y});
      }
    }
  }
  return m;
}

/// Per-frame boxes: frame 0 from the prompt, later frames re-seeded from the
/// previous box centre (or the nearest pixel matching the prompt colour).
inline std::vector<BBox> annotate_sequence(const std::vector<sim::Raster>& frames, PixelPoint prompt,
                                           const AnnotateConfig& cfg = {}) {
  if (frames.empty()) return {};
  const sim::Rgb ref = frames[0].rgb(prompt.y, prompt.x);
  std::vector<BBox> out;
  out.push_back(min_bbox(flood_segment(frames[0], prompt, cfg.flood_tol)));
  int lost = 0;
  for (std::size_t f = 1; f < frames.size(); ++f) {
    const sim::Raster& r = frames[f];
    const BBox& prev = out.back();
    PixelPoint seed = prev.center_pixel();
    if (sim::color_distance(r.rgb(seed.y, seed.x), ref) > cfg.flood_tol) {
      const int pad = 4 + lost * 3;
      std::optional<PixelPoint> best;
      double bd = 1e18;
      for (int y = std::max(0, prev.y_min - pad); y < std::min(sim::kSize, prev.y_max + pad); ++y)
        for (int x = std::max(0, prev.x_min - pad); x < std::min(sim::kSize, prev.x_max + pad); ++x) {
          if (sim::color_distance(r.rgb(y, x), ref) > cfg.flood_tol) continue;
          const double d = (x - seed.x) * (x - seed.x) + (y - seed.y) * (y - seed.y);
          if (d < bd) {
            bd = d;
            best = PixelPoint{x, y};
          }
        }
      if (!best) {
        if (++lost > cfg.max_lost_frames)
          throw TrackingError("annotate_sequence: track lost for more than " + std::to_string(cfg.max_lost_frames) +
                              " consecutive frames at frame " + std::to_string(f));
        out.push_back(prev);
        continue;
      }
      seed = *best;
    }
    lost = 0;
    out.push_back(min_bbox(flood_segment(r, seed, cfg.flood_tol)));
  }
  return out;
}

/// Re-annotates a demonstration with the automatic pipeline.
inline std::vector<BBox> pipeline_annotations(const sim::ClassRegistry& reg, const data::Demonstration& d,
                                              const AnnotateConfig& cfg = {}) {
  const sim::Scene s0 = sim::spawn_scene(reg, d.env_id, d.task, d.target_class, d.distractors, d.seed);
  const PixelPoint prompt = laser_prompt(s0, s0.target);
  std::vector<sim::Raster> frames;
  frames.reserve(d.frames.size());
  for (const auto& f : d.frames) frames.push_back(f.raster);
  return annotate_sequence(frames, prompt, cfg);
}

// --- detector ---------------------------------------------------------------

inline constexpr int kHistBins = 8 * 8 * 8;
inline constexpr int kShapeDims = 5;

using Histogram = std::array<double, kHistBins>;
using ShapeDescriptor = std::array<double, kShapeDims>;

inline bool is_background(const sim::Rgb& c, double tol) {
  for (const auto& e : sim::env_table())
    if (sim::color_distance(c, e.background) <= tol) return true;
  return false;
}

struct Proposal {
  sim::Mask mask;
  BBox box;
  Histogram hist{};
  ShapeDescriptor shape{};
};

inline int hist_bin(const sim::Rgb& c) {
  auto q = [](double v) { return std::clamp(static_cast<int>(v * 8.0), 0, 7); };
  return (q(c.r) * 8 + q(c.g)) * 8 + q(c.b);
}

/// Colour histogram over masked pixels, normalised to sum 1.
inline Histogram mask_histogram(const sim::Raster& r, const sim::Mask& m) {
  Histogram h{};
  double n = 0;
  for (int y = 0; y < sim::kSize; ++y)
    for (int x = 0; x < sim::kSize; ++x)
      if (m.at(y, x)) {
        h[static_cast<std::size_t>(hist_bin(r.rgb(y, x)))] += 1.0;
        n += 1.0;
      }
  if (n > 0)
    for (auto& v : h) v /= n;
  return h;
}

/// Fill ratio, log aspect and three Hu invariants of a non-empty mask.
inline ShapeDescriptor mask_shape(const sim::Mask& m) {
  const BBox b = min_bbox(m);
  double m00 = 0, m10 = 0, m01 = 0;
  for (int y = b.y_min; y < b.y_max; ++y)
    for (int x = b.x_min; x < b.x_max; ++x)
      if (m.at(y, x)) {
        m00 += 1;
        m10 += x;
        m01 += y;
      }
  const double xc = m10 / m00, yc = m01 / m00;
  double mu20 = 0, mu02 = 0, mu11 = 0, mu30 = 0, mu03 = 0, mu21 = 0, mu12 = 0;
  for (int y = b.y_min; y < b.y_max; ++y)
    for (int x = b.x_min; x < b.x_max; ++x)
      if (m.at(y, x)) {
        const double dx = x - xc, dy = y - yc;
        mu20 += dx * dx;
        mu02 += dy * dy;
        mu11 += dx * dy;
        mu30 += dx * dx * dx;
        mu03 += dy * dy * dy;
        mu21 += dx * dx * dy;
        mu12 += dx * dy * dy;
      }
  const double n2 = m00 * m00, n25 = std::pow(m00, 2.5);
  const double e20 = mu20 / n2, e02 = mu02 / n2, e11 = mu11 / n2;
  const double e30 = mu30 / n25, e03 = mu03 / n25, e21 = mu21 / n25, e12 = mu12 / n25;
  const double phi1 = e20 + e02;
  const double phi2 = (e20 - e02) * (e20 - e02) + 4 * e11 * e11;
  const double phi3 = (e30 - 3 * e12) * (e30 - 3 * e12) + (3 * e21 - e03) * (3 * e21 - e03);
  return {m00 / b.area(), std::log(static_cast<double>(b.x_max - b.x_min) / (b.y_max - b.y_min)), phi1,
          std::sqrt(phi2), std::sqrt(phi3)};
}

/// Connected components of non-background pixels, in scan order of their
/// first pixel.
inline std::vector<Proposal> propose(const sim::Raster& r, const AnnotateConfig& cfg = {}) {
  sim::Mask fg;
  for (int y = 0; y < sim::kSize; ++y)
    for (int x = 0; x < sim::kSize; ++x) fg.set(y, x, !is_background(r.rgb(y, x), cfg.background_tol));
  sim::Mask seen;
  std::vector<Proposal> out;
  constexpr std::array<std::array<int, 2>, 4> nb{{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};
  for (int y0 = 0; y0 < sim::kSize; ++y0)
    for (int x0 = 0; x0 < sim::kSize; ++x0) {
      if (!fg.at(y0, x0) || seen.at(y0, x0)) continue;
      Proposal p;
      std::deque<PixelPoint> q{{x0, y0}};
      seen.set(y0, x0);
      p.mask.set(y0, x0);
      std::size_t n = 1;
      while (!q.empty()) {
        const PixelPoint c = q.front();
        q.pop_front();
        for (const auto& d : nb) {
          const int x = c.x + d[0], y = c.y + d[1];
          if (x < 0 || y < 0 || x >= sim::kSize || y >= sim::kSize || seen.at(y, x) || !fg.at(y, x)) continue;
          seen.set(y, x);
          p.mask.set(y, x);
          q.push_back({x, y});
          ++n;
        }
      }
      if (static_cast<int>(n) < cfg.min_component) continue;
      p.box = min_bbox(p.mask);
      p.hist = mask_histogram(r, p.mask);
      p.shape = mask_shape(p.mask);
      out.push_back(std::move(p));
    }
  return out;
}

struct Prototype {
  int class_id = 0;
  Histogram hist{};
  ShapeDescriptor shape{};
  bool operator==(const Prototype&) const = default;
};

struct Detection {
  BBox bbox;
  int class_id = 0;
  double confidence = 0.0;
};

struct Detector {
  std::vector<Prototype> prototypes;  // sorted by class id
  ShapeDescriptor shape_scale{};      // per-feature similarity scale
  double threshold = 0.5;             // tau
  double hist_weight = 0.5;
  AnnotateConfig config;

  const Prototype* find(int class_id) const {
    auto it = std::lower_bound(prototypes.begin(), prototypes.end(), class_id,
                               [](const Prototype& p, int c) { return p.class_id < c; });
    return it != prototypes.end() && it->class_id == class_id ? &*it : nullptr;
  }

  std::vector<int> classes() const {
    std::vector<int> v;
    for (const auto& p : prototypes) v.push_back(p.class_id);
    return v;
  }

  double similarity(const Prototype& proto, const Proposal& p) const {
    double inter = 0;
    for (int i = 0; i < kHistBins; ++i)
      inter += std::min(proto.hist[static_cast<std::size_t>(i)], p.hist[static_cast<std::size_t>(i)]);
    double z2 = 0;
    for (int i = 0; i < kShapeDims; ++i) {
      const double z = (p.shape[static_cast<std::size_t>(i)] - proto.shape[static_cast<std::size_t>(i)]) /
                       shape_scale[static_cast<std::size_t>(i)];
      z2 += z * z;
    }
    const double moment = std::exp(-0.5 * z2 / kShapeDims);
    return hist_weight * inter + (1.0 - hist_weight) * moment;
  }
};

struct Scored {
  double score = 0.0;
  const Proposal* proposal = nullptr;
};

/// Best-matching proposal for a class; ties go to the smaller (y_min, x_min).
inline Scored best_match(const Detector& det, const Prototype& proto, const std::vector<Proposal>& props) {
  Scored best;
  for (const auto& p : props) {
    const double s = det.similarity(proto, p);
    bool better = !best.proposal || s > best.score;
    if (best.proposal && s == best.score)
      better = std::pair(p.box.y_min, p.box.x_min) < std::pair(best.proposal->box.y_min, best.proposal->box.x_min);
    if (better) best = {s, &p};
  }
  return best;
}

inline std::optional<Detection> detect(const Detector& det, const sim::Raster& r, int class_id) {
  const Prototype* proto = det.find(class_id);
  if (!proto) throw UnknownClassError("detect: class " + std::to_string(class_id) + " was not trained");
  const auto props = propose(r, det.config);
  const Scored s = best_match(det, *proto, props);
  if (!s.proposal || s.score < det.threshold) return std::nullopt;
  return Detection{s.proposal->box, class_id, std::clamp(s.score, 0.0, 1.0)};
}

struct DetectorTrainConfig {
  int frame_stride = 3;
  double match_iou = 0.7;    // proposal must match the annotated box this well
  int holdout_modulus = 10;  // demos with index_in_class % 10 == 9 are held out
};

/// Prototypes from annotated regions; tau maximises F1 on the held-out split.
inline Detector train_detector(const data::Dataset& ds, const DetectorTrainConfig& tc = {},
                               const AnnotateConfig& ac = {}) {
  struct Sample {
    int class_id;
    Histogram hist;
    ShapeDescriptor shape;
  };
  std::map<int, std::vector<Sample>> per_class;
  std::vector<std::size_t> held;
  for (int c : ds.manifest.spec.class_ids()) per_class[c];
  for (std::size_t i = 0; i < ds.demos.size(); ++i) {
    const auto& d = ds.demos[i];
    if (d.index_in_class % tc.holdout_modulus == tc.holdout_modulus - 1) {
      held.push_back(i);
      continue;
    }
    for (std::size_t f = 0; f < d.frames.size(); f += static_cast<std::size_t>(tc.frame_stride)) {
      const auto props = propose(d.frames[f].raster, ac);
      const Proposal* best = nullptr;
      double bi = 0;
      for (const auto& p : props) {
        const double v = iou(p.box, d.bboxes[f]);
        if (v > bi) {
          bi = v;
          best = &p;
        }
      }
      if (best && bi >= tc.match_iou) per_class[d.target_class].push_back({d.target_class, best->hist, best->shape});
    }
  }
  Detector det;
  det.config = ac;
  ShapeDescriptor pooled_var{};
  double pooled_n = 0;
  for (auto& [cid, samples] : per_class) {
    if (samples.empty()) throw CoverageError("train_detector: class " + std::to_string(cid) + " has no annotated frames");
    Prototype p;
    p.class_id = cid;
    for (const auto& s : samples) {
      for (int i = 0; i < kHistBins; ++i) p.hist[static_cast<std::size_t>(i)] += s.hist[static_cast<std::size_t>(i)];
      for (int i = 0; i < kShapeDims; ++i) p.shape[static_cast<std::size_t>(i)] += s.shape[static_cast<std::size_t>(i)];
    }
    const double n = static_cast<double>(samples.size());
    double hs = 0;
    for (auto& v : p.hist) hs += v;
    for (auto& v : p.hist) v /= hs;
    for (auto& v : p.shape) v /= n;
    for (const auto& s : samples)
      for (int i = 0; i < kShapeDims; ++i) {
        const double dv = s.shape[static_cast<std::size_t>(i)] - p.shape[static_cast<std::size_t>(i)];
        pooled_var[static_cast<std::size_t>(i)] += dv * dv;
      }
    pooled_n += n;
    det.prototypes.push_back(p);
  }
  constexpr ShapeDescriptor floor{0.02, 0.05, 0.005, 0.005, 0.002};
  for (int i = 0; i < kShapeDims; ++i) {
    const auto u = static_cast<std::size_t>(i);
    det.shape_scale[u] = std::max(floor[u], 2.0 * std::sqrt(pooled_var[u] / pooled_n));
  }

  // threshold selection: held-out demos, or the training demos if none
  if (held.empty())
    for (std::size_t i = 0; i < ds.demos.size(); ++i) held.push_back(i);
  struct Event {
    double score;
    int tp, fp;  // contribution when accepted
  };
  std::vector<Event> events;
  int positives = 0;
  for (std::size_t i : held) {
    const auto& d = ds.demos[i];
    for (std::size_t f = 0; f < d.frames.size(); f += static_cast<std::size_t>(tc.frame_stride)) {
      const auto props = propose(d.frames[f].raster, ac);
      ++positives;
      for (const auto& proto : det.prototypes) {
        const bool present = proto.class_id == d.target_class ||
                             std::find(d.distractors.begin(), d.distractors.end(), proto.class_id) != d.distractors.end();
        if (present && proto.class_id != d.target_class) continue;
        const Scored s = best_match(det, proto, props);
        if (!s.proposal) continue;
        if (proto.class_id == d.target_class) {
          const bool hit = iou(s.proposal->box, d.bboxes[f]) >= 0.5;
          events.push_back({s.score, hit ? 1 : 0, hit ? 0 : 1});
        } else {
          events.push_back({s.score, 0, 1});
        }
      }
    }
  }
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.score > b.score; });
  int tp = 0, fp = 0;
  double best_f1 = -1, best_t = 0.5;
  for (std::size_t i = 0; i < events.size(); ++i) {
    tp += events[i].tp;
    fp += events[i].fp;
    if (i + 1 < events.size() && events[i + 1].score == events[i].score) continue;
    const double f1 = 2.0 * tp / (2.0 * tp + fp + (positives - tp));
    if (f1 > best_f1) {
      best_f1 = f1;
      const double next = i + 1 < events.size() ? events[i + 1].score : 0.0;
      best_t = 0.5 * (events[i].score + next);
    }
  }
  det.threshold = best_t;
  return det;
}

}  // namespace bxl::annot
