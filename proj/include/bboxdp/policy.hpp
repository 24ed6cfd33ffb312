#pragma once

// Conditional diffusion policy over action chunks. Observations are pooled
// into 8x8 patch means of the raw frame plus an instruction channel (filled
// box, keypoint blob, or a class one-hot for the text baseline).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bboxdp/annotate.hpp"
#include "bboxdp/autodiff.hpp"
#include "bboxdp/bbox.hpp"
#include "bboxdp/common.hpp"
#include "bboxdp/expertdata.hpp"
#include "bboxdp/worldsim.hpp"

namespace bxl::policy {

enum class CondMode { bbox, text, keypoint };

inline std::string_view to_string(CondMode m) {
  switch (m) {
    case CondMode::bbox: return "bbox";
    case CondMode::text: return "text";
    case CondMode::keypoint: return "keypoint";
  }
  return "?";
}

inline CondMode parse_cond_mode(std::string_view s) {
  if (s == "bbox") return CondMode::bbox;
  if (s == "text") return CondMode::text;
  if (s == "keypoint") return CondMode::keypoint;
  throw ConfigError("unknown conditioning mode '" + std::string(s) + "'");
}

// --- noise schedule ---------------------------------------------------------

struct NoiseSchedule {
  int steps = 0;  // K
  double beta_min = 0, beta_max = 0;
  std::vector<double> betas;       // index k in [1, K]; betas[0] unused
  std::vector<double> alpha_bars;  // alpha_bars[0] == 1

  double alpha_bar(int k) const { return alpha_bars.at(static_cast<std::size_t>(k)); }
};

/// Linear betas between beta_min and beta_max, cumulative alpha products.
inline NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 1) throw ConfigError("noise schedule needs at least one step");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw ConfigError("noise schedule requires 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.betas.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  s.alpha_bars.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  for (int k = 1; k <= steps; ++k) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(k - 1) / (steps - 1);
    const auto u = static_cast<std::size_t>(k);
    s.betas[u] = beta_min + (beta_max - beta_min) * frac;
    s.alpha_bars[u] = s.alpha_bars[u - 1] * (1.0 - s.betas[u]);
  }
  return s;
}

/// Scaled forward process: sqrt(ab_k) a0 + sqrt(1 - ab_k) eps. k = 0 is the
/// identity (ab_0 = 1).
inline std::vector<double> forward_noise(std::span<const double> a0, int k, std::span<const double> eps,
                                         const NoiseSchedule& s) {
  if (k < 0 || k > s.steps)
    throw ContractError("forward_noise: step " + std::to_string(k) + " outside [0, " + std::to_string(s.steps) + "]");
  if (a0.size() != eps.size()) throw DimensionError("forward_noise: a0 and eps differ in length");
  const double ab = s.alpha_bar(k);
  const double ca = std::sqrt(ab), ce = std::sqrt(1.0 - ab);
  std::vector<double> out(a0.size());
  for (std::size_t i = 0; i < a0.size(); ++i) out[i] = ca * a0[i] + ce * eps[i];
  return out;
}

// --- observation encoding ---------------------------------------------------

inline constexpr int kPatch = 8;
inline constexpr int kGrid = sim::kSize / kPatch;
inline constexpr int kRawFeatures = kGrid * kGrid * 3;
inline constexpr int kInstructionFeatures = kGrid * kGrid;
inline constexpr int kProprioFeatures = 3;

struct NoInstruction {};
struct ClassInstruction {
  int class_id = 0;
};

using Instruction = std::variant<NoInstruction, annot::BBox, ClassInstruction, annot::PixelPoint>;

struct EncoderConfig {
  int text_vocab = 32;  // one-hot width for the text baseline
  double keypoint_sigma = 2.0;
  bool operator==(const EncoderConfig&) const = default;
};

inline std::size_t cond_dim(CondMode m, const EncoderConfig& e) {
  return kRawFeatures + (m == CondMode::text ? static_cast<std::size_t>(e.text_vocab) : kInstructionFeatures) +
         kProprioFeatures;
}

/// raw patches, then instruction features (or one-hot), then proprio.
inline std::vector<double> encode_obs(const sim::Raster& r, const Instruction& instr,
                                      const std::array<double, 3>& proprio, CondMode mode,
                                      const EncoderConfig& ec = {}) {
  const bool ok = std::holds_alternative<NoInstruction>(instr) ||
                  (mode == CondMode::bbox && std::holds_alternative<annot::BBox>(instr)) ||
                  (mode == CondMode::text && std::holds_alternative<ClassInstruction>(instr)) ||
                  (mode == CondMode::keypoint && std::holds_alternative<annot::PixelPoint>(instr));
  if (!ok || (mode == CondMode::text && std::holds_alternative<NoInstruction>(instr)))
    throw ContractError("encode_obs: instruction does not match conditioning mode " + std::string(to_string(mode)));

  std::vector<double> out;
  out.reserve(cond_dim(mode, ec));
  constexpr double inv = 1.0 / (kPatch * kPatch);
  for (int gy = 0; gy < kGrid; ++gy)
    for (int gx = 0; gx < kGrid; ++gx) {
      double acc[3] = {0, 0, 0};
      for (int y = gy * kPatch; y < (gy + 1) * kPatch; ++y)
        for (int x = gx * kPatch; x < (gx + 1) * kPatch; ++x)
          for (int c = 0; c < 3; ++c) acc[c] += r.at(y, x, c);
      for (double a : acc) out.push_back(a * inv);
    }

  if (mode == CondMode::text) {
    const int cid = std::get<ClassInstruction>(instr).class_id;
    if (cid < 0 || cid >= ec.text_vocab)
      throw ContractError("encode_obs: class " + std::to_string(cid) + " outside text vocabulary");
    for (int i = 0; i < ec.text_vocab; ++i) out.push_back(i == cid ? 1.0 : 0.0);
  } else {
    std::array<double, sim::kPixels> channel{};
    if (const auto* b = std::get_if<annot::BBox>(&instr)) {
      for (int y = b->y_min; y < b->y_max; ++y)
        for (int x = b->x_min; x < b->x_max; ++x) channel[static_cast<std::size_t>(y * sim::kSize + x)] = 1.0;
    } else if (const auto* p = std::get_if<annot::PixelPoint>(&instr)) {
      const double s2 = 2.0 * ec.keypoint_sigma * ec.keypoint_sigma;
      for (int y = 0; y < sim::kSize; ++y)
        for (int x = 0; x < sim::kSize; ++x) {
          const double d2 = (x - p->x) * (x - p->x) + (y - p->y) * (y - p->y);
          channel[static_cast<std::size_t>(y * sim::kSize + x)] = std::exp(-d2 / s2);
        }
    }
    for (int gy = 0; gy < kGrid; ++gy)
      for (int gx = 0; gx < kGrid; ++gx) {
        double acc = 0;
        for (int y = gy * kPatch; y < (gy + 1) * kPatch; ++y)
          for (int x = gx * kPatch; x < (gx + 1) * kPatch; ++x) acc += channel[static_cast<std::size_t>(y * sim::kSize + x)];
        out.push_back(acc * inv);
      }
  }
  out.push_back(std::clamp(proprio[0] / sim::kSize, 0.0, 1.0));
  out.push_back(std::clamp(proprio[1] / sim::kSize, 0.0, 1.0));
  out.push_back(std::clamp(proprio[2], 0.0, 1.0));
  return out;
}

/// Rounded centroid of a mask's pixels.
inline annot::PixelPoint mask_centroid(const sim::Mask& m) {
  double sx = 0, sy = 0, n = 0;
  for (int y = 0; y < sim::kSize; ++y)
    for (int x = 0; x < sim::kSize; ++x)
      if (m.at(y, x)) {
        sx += x;
        sy += y;
        n += 1;
      }
  if (n == 0) throw annot::EmptyMaskError("mask_centroid: empty mask");
  return {static_cast<int>(std::lround(sx / n)), static_cast<int>(std::lround(sy / n))};
}

/// Keypoint for an annotated frame: centroid of the foreground component
/// that best matches the box, or the box centre when none does.
inline annot::PixelPoint keypoint_from_box(const sim::Raster& r, const annot::BBox& b) {
  const auto props = annot::propose(r);
  const annot::Proposal* best = nullptr;
  double bi = 0.0;
  for (const auto& p : props) {
    const double v = annot::iou(p.box, b);
    if (v > bi) {
      bi = v;
      best = &p;
    }
  }
  if (best && bi >= 0.5) return mask_centroid(best->mask);
  return b.center_pixel();
}

// --- denoiser ---------------------------------------------------------------

struct DenoiserConfig {
  int width = 256;
  int blocks = 3;
  int time_dim = 16;
  bool operator==(const DenoiserConfig&) const = default;
};

inline std::vector<double> time_embedding(int k, int dim) {
  std::vector<double> e(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(1000.0) * i / half);
    e[static_cast<std::size_t>(2 * i)] = std::sin(k * freq);
    e[static_cast<std::size_t>(2 * i + 1)] = std::cos(k * freq);
  }
  return e;
}

/// Residual MLP epsilon-predictor: in-projection, `blocks` residual blocks
/// h + W2 silu(W1 silu(h)), and an output head on silu(h).
struct Denoiser {
  DenoiserConfig config;
  int action_dim = 0;
  int cond_dim = 0;
  std::vector<ad::Tensor> params;

  int input_dim() const { return action_dim + cond_dim + config.time_dim; }

  static Denoiser init(int action_dim, int cond_dim, const DenoiserConfig& cfg, std::uint64_t seed) {
    Denoiser d;
    d.config = cfg;
    d.action_dim = action_dim;
    d.cond_dim = cond_dim;
    Rng rng(derive_seed({seed, 0xDE1105EULL}));
    auto dense = [&](int in, int out, double gain) {
      ad::Tensor w({static_cast<std::size_t>(in), static_cast<std::size_t>(out)});
      const double sd = gain / std::sqrt(static_cast<double>(in));
      for (auto& v : w.data) v = sd * rng.normal();
      d.params.push_back(std::move(w));
      d.params.emplace_back(ad::Shape{static_cast<std::size_t>(out)}, 0.0);
    };
    dense(d.input_dim(), cfg.width, 1.0);
    for (int b = 0; b < cfg.blocks; ++b) {
      dense(cfg.width, cfg.width, 1.0);
      dense(cfg.width, cfg.width, 0.5);
    }
    dense(cfg.width, action_dim, 0.01);
    return d;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

  std::vector<ad::Tensor*> parameter_ptrs() {
    std::vector<ad::Tensor*> v;
    for (auto& p : params) v.push_back(&p);
    return v;
  }

  /// Builds the forward graph for a [B, input_dim] input on the tape.
  ad::Var build(ad::Tape& t, ad::Var x) {
    std::vector<ad::Var> p;
    for (auto& q : params) p.push_back(t.parameter(q));
    std::size_t i = 0;
    ad::Var h = ad::affine(t, x, p[i], p[i + 1]);
    i += 2;
    for (int b = 0; b < config.blocks; ++b) {
      ad::Var u = ad::affine(t, ad::silu(t, h), p[i], p[i + 1]);
      u = ad::affine(t, ad::silu(t, u), p[i + 2], p[i + 3]);
      h = ad::add(t, h, u);
      i += 4;
    }
    return ad::affine(t, ad::silu(t, h), p[i], p[i + 1]);
  }

  /// Rows of [noisy | cond | time embedding].
  ad::Tensor assemble(std::span<const std::vector<double>> noisy, std::span<const std::vector<double>* const> conds,
                      std::span<const int> ks) const {
    const std::size_t rows = noisy.size();
    ad::Tensor x({rows, static_cast<std::size_t>(input_dim())});
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = x.data.data() + r * static_cast<std::size_t>(input_dim());
      std::copy(noisy[r].begin(), noisy[r].end(), row);
      std::copy(conds[r]->begin(), conds[r]->end(), row + action_dim);
      const auto te = time_embedding(ks[r], config.time_dim);
      std::copy(te.begin(), te.end(), row + action_dim + cond_dim);
    }
    return x;
  }

  /// Tape-free forward for a single input row; same arithmetic as build().
  /// Read-only, so a frozen denoiser can be shared across threads.
  std::vector<double> predict(const std::vector<double>& noisy, const std::vector<double>& cond, int k) const {
    if (static_cast<int>(cond.size()) != cond_dim)
      throw DimensionError("denoiser: condition length " + std::to_string(cond.size()) + ", expected " +
                           std::to_string(cond_dim));
    if (static_cast<int>(noisy.size()) != action_dim)
      throw DimensionError("denoiser: chunk length " + std::to_string(noisy.size()) + ", expected " +
                           std::to_string(action_dim));
    using Row = Eigen::Matrix<double, 1, Eigen::Dynamic>;
    Row x(input_dim());
    std::copy(noisy.begin(), noisy.end(), x.data());
    std::copy(cond.begin(), cond.end(), x.data() + action_dim);
    const auto te = time_embedding(k, config.time_dim);
    std::copy(te.begin(), te.end(), x.data() + action_dim + cond_dim);

    auto affine = [&](const Row& in, std::size_t i) {
      const ad::Tensor& w = params[i];
      const ad::Tensor& b = params[i + 1];
      Row o(static_cast<Eigen::Index>(w.cols()));
      o.noalias() = in * ad::detail::MapC(w.data.data(), static_cast<Eigen::Index>(w.rows()),
                                          static_cast<Eigen::Index>(w.cols()));
      o += Eigen::Map<const Row>(b.data.data(), static_cast<Eigen::Index>(b.size()));
      return o;
    };
    auto silu = [](Row v) -> Row {
      for (auto& e : v) e *= ad::detail::sigmoid(e);
      return v;
    };

    std::size_t i = 0;
    Row h = affine(x, i);
    i += 2;
    for (int b = 0; b < config.blocks; ++b) {
      Row u = affine(silu(h), i);
      u = affine(silu(u), i + 2);
      h += u;
      i += 4;
    }
    const Row out = affine(silu(h), i);
    return std::vector<double>(out.data(), out.data() + out.size());
  }
};

// --- policy -----------------------------------------------------------------

struct PolicyConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr = 1e-3;
  int max_steps = 0;  // > 0 overrides the epoch-derived step count
  int denoise_steps = 50;
  double beta_min = 2e-3;
  double beta_max = 0.4;
  int horizon = 8;      // H_a
  int obs_horizon = 2;  // current + previous encodings, averaged
  int exec_steps = 4;   // actions executed per replan
  int sample_steps = 10;
  DenoiserConfig net;
  EncoderConfig encoder;
  bool operator==(const PolicyConfig&) const = default;

  void validate() const {
    if (epochs < 1 && max_steps < 1) throw ConfigError("policy config needs epochs or max_steps");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (horizon < 1 || exec_steps < 1 || exec_steps > horizon) throw ConfigError("need 1 <= exec_steps <= horizon");
    if (obs_horizon < 1 || obs_horizon > 2) throw ConfigError("obs horizon must be 1 or 2");
    if (sample_steps < 1 || sample_steps > denoise_steps) throw ConfigError("need 1 <= sample_steps <= K");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  }
};

/// Stable FNV-1a digest of every field that affects training.
inline std::string config_digest(const PolicyConfig& c, CondMode mode, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto put = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  auto putd = [&](double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, sizeof v);
    put(v);
  };
  put(static_cast<std::uint64_t>(c.epochs));
  put(static_cast<std::uint64_t>(c.batch_size));
  putd(c.lr);
  put(static_cast<std::uint64_t>(c.max_steps));
  put(static_cast<std::uint64_t>(c.denoise_steps));
  putd(c.beta_min);
  putd(c.beta_max);
  put(static_cast<std::uint64_t>(c.horizon));
  put(static_cast<std::uint64_t>(c.obs_horizon));
  put(static_cast<std::uint64_t>(c.exec_steps));
  put(static_cast<std::uint64_t>(c.sample_steps));
  put(static_cast<std::uint64_t>(c.net.width));
  put(static_cast<std::uint64_t>(c.net.blocks));
  put(static_cast<std::uint64_t>(c.net.time_dim));
  put(static_cast<std::uint64_t>(c.encoder.text_vocab));
  putd(c.encoder.keypoint_sigma);
  put(static_cast<std::uint64_t>(mode));
  put(seed);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline constexpr int kActionDims = 3;

struct Policy {
  CondMode mode = CondMode::bbox;
  PolicyConfig config;
  NoiseSchedule schedule;
  Denoiser net;
  std::array<double, kActionDims> action_min{-1, -1, -1};
  std::array<double, kActionDims> action_max{1, 1, 1};
  std::vector<double> cond_mean;  // per-feature standardisation of the condition
  std::vector<double> cond_scale;
  std::string digest;

  int chunk_dim() const { return config.horizon * kActionDims; }

  static Policy create(CondMode mode, const PolicyConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Policy p;
    p.mode = mode;
    p.config = cfg;
    p.schedule = make_schedule(cfg.denoise_steps, cfg.beta_min, cfg.beta_max);
    p.net = Denoiser::init(cfg.horizon * kActionDims, static_cast<int>(cond_dim(mode, cfg.encoder)), cfg.net, seed);
    p.digest = config_digest(cfg, mode, seed);
    p.cond_mean.assign(static_cast<std::size_t>(p.net.cond_dim), 0.0);
    p.cond_scale.assign(static_cast<std::size_t>(p.net.cond_dim), 1.0);
    return p;
  }

  /// Encoded observation -> network input space.
  std::vector<double> standardize(const std::vector<double>& cond) const {
    if (cond.size() != cond_mean.size())
      throw DimensionError("policy: condition length " + std::to_string(cond.size()) + ", expected " +
                           std::to_string(cond_mean.size()));
    std::vector<double> o(cond.size());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = (cond[i] - cond_mean[i]) * cond_scale[i];
    return o;
  }

  double normalize(double v, int d) const {
    const auto u = static_cast<std::size_t>(d);
    const double span = action_max[u] - action_min[u];
    return span > 0 ? 2.0 * (v - action_min[u]) / span - 1.0 : 0.0;
  }
  double denormalize(double v, int d) const {
    const auto u = static_cast<std::size_t>(d);
    const double span = action_max[u] - action_min[u];
    return span > 0 ? action_min[u] + 0.5 * (v + 1.0) * span : action_min[u];
  }
};

// floor on the standardisation scale; keeps near-constant training features
// (background patches) from exploding on unseen backgrounds
inline constexpr double kMinCondStd = 0.05;

/// One (condition, chunk) example. Conditions fed to train_step are already
/// standardised and chunks normalised to [-1, 1].
struct TrainingPair {
  std::vector<double> cond;
  std::vector<double> chunk;  // length H_a * 3
};

/// One DDPM update on a batch: uniform k, standard normal eps, MSE between
/// eps and the prediction, one Adam step. Returns the batch loss.
inline double train_step(Policy& p, std::span<const TrainingPair* const> batch, Rng& rng, ad::AdamState& adam) {
  if (batch.empty()) throw DataError("train_step: empty batch");
  const std::size_t dim = static_cast<std::size_t>(p.chunk_dim());
  std::vector<std::vector<double>> noisy(batch.size());
  std::vector<const std::vector<double>*> conds(batch.size());
  std::vector<int> ks(batch.size());
  ad::Tensor eps({batch.size(), dim});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ks[i] = rng.uniform_int(1, p.schedule.steps);
    std::vector<double> e(dim);
    for (auto& v : e) v = rng.normal();
    noisy[i] = forward_noise(batch[i]->chunk, ks[i], e, p.schedule);
    std::copy(e.begin(), e.end(), eps.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
    conds[i] = &batch[i]->cond;
  }
  ad::Tape t;
  ad::Var x = t.constant(p.net.assemble(noisy, conds, ks));
  ad::Var target = t.constant(std::move(eps));
  ad::Var loss = ad::mse(t, p.net.build(t, x), target);
  const double lv = t.value(loss).item();
  if (!std::isfinite(lv)) throw NumericError("train_step: non-finite loss");
  t.backward(loss);
  auto ptrs = p.net.parameter_ptrs();
  ad::adam_step(ptrs, adam);
  return lv;
}

/// Sub-sequence of diffusion steps visited by DDIM, descending, ending at 0.
inline std::vector<int> ddim_timesteps(int K, int sample_steps) {
  std::vector<int> ks;
  for (int i = sample_steps; i >= 1; --i) {
    const int k = static_cast<int>(std::lround(static_cast<double>(K) * i / sample_steps));
    if (ks.empty() || ks.back() != k) ks.push_back(std::max(k, 1));
  }
  ks.push_back(0);
  return ks;
}

/// Normalised chunk from deterministic DDIM (eta = 0).
inline std::vector<double> ddim_sample_normalized(const Policy& p, const std::vector<double>& raw_cond, int sample_steps,
                                                  std::uint64_t seed) {
  if (sample_steps < 1 || sample_steps > p.schedule.steps)
    throw ContractError("ddim_sample: sample_steps " + std::to_string(sample_steps) + " outside [1, K]");
  const std::vector<double> cond = p.standardize(raw_cond);
  Rng rng(derive_seed({seed, 0xDD13ULL}));
  std::vector<double> x(static_cast<std::size_t>(p.chunk_dim()));
  for (auto& v : x) v = rng.normal();
  const auto ks = ddim_timesteps(p.schedule.steps, sample_steps);
  for (std::size_t i = 0; i + 1 < ks.size(); ++i) {
    const int k = ks[i], kp = ks[i + 1];
    const double ab = p.schedule.alpha_bar(k), abp = p.schedule.alpha_bar(kp);
    const std::vector<double> eps = p.net.predict(x, cond, k);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double x0 = std::clamp((x[j] - std::sqrt(1.0 - ab) * eps[j]) / std::sqrt(ab), -1.0, 1.0);
      const double e = (x[j] - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
      x[j] = std::sqrt(abp) * x0 + std::sqrt(1.0 - abp) * e;
    }
  }
  for (auto& v : x) v = std::clamp(v, -1.0, 1.0);
  return x;
}

/// De-normalised action chunk, H_a actions.
inline std::vector<sim::Action> ddim_sample(const Policy& p, const std::vector<double>& cond, int sample_steps,
                                            std::uint64_t seed) {
  const auto x = ddim_sample_normalized(p, cond, sample_steps, seed);
  std::vector<sim::Action> out(static_cast<std::size_t>(p.config.horizon));
  for (int h = 0; h < p.config.horizon; ++h) {
    const auto b = static_cast<std::size_t>(h * kActionDims);
    out[static_cast<std::size_t>(h)] = {p.denormalize(x[b], 0), p.denormalize(x[b + 1], 1), p.denormalize(x[b + 2], 2)};
  }
  return out;
}

/// Instruction carried by an annotated demonstration frame.
inline Instruction frame_instruction(CondMode mode, const data::Demonstration& d, std::size_t f) {
  switch (mode) {
    case CondMode::bbox: return d.bboxes[f];
    case CondMode::text: return ClassInstruction{d.target_class};
    case CondMode::keypoint: return keypoint_from_box(d.frames[f].raster, d.bboxes[f]);
  }
  return NoInstruction{};
}

inline std::vector<double> average(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> o(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = 0.5 * (a[i] + b[i]);
  return o;
}

/// Slices demonstrations into (condition, next-H_a-actions) pairs; actions
/// are left un-normalised here. Chunks past the end repeat a resting action
/// with the final gripper command.
inline std::vector<TrainingPair> make_pairs(std::span<const data::Demonstration* const> demos, CondMode mode,
                                            const PolicyConfig& cfg) {
  std::vector<TrainingPair> pairs;
  for (const data::Demonstration* d : demos) {
    std::vector<std::vector<double>> enc;
    for (std::size_t f = 0; f < d->frames.size(); ++f)
      enc.push_back(encode_obs(d->frames[f].raster, frame_instruction(mode, *d, f), d->frames[f].proprio, mode,
                               cfg.encoder));
    const std::size_t T = d->actions.size();
    for (std::size_t t = 0; t < T; ++t) {
      TrainingPair tp;
      tp.cond = cfg.obs_horizon == 2 ? average(enc[t], enc[t == 0 ? 0 : t - 1]) : enc[t];
      for (int h = 0; h < cfg.horizon; ++h) {
        const std::size_t idx = t + static_cast<std::size_t>(h);
        sim::Action a = idx < T ? d->actions[idx] : sim::Action{0.0, 0.0, d->actions[T - 1].g};
        tp.chunk.insert(tp.chunk.end(), {a.dx, a.dy, a.g});
      }
      pairs.push_back(std::move(tp));
    }
  }
  return pairs;
}

struct TrainReport {
  std::vector<double> losses;
  int steps = 0;
  std::size_t pairs = 0;
};

using ProgressFn = std::function<void(int step, int total, double loss)>;

/// Full training run over the given demonstrations. Normalisation stats are
/// taken from the training actions and stored in the returned policy.
inline Policy train_policy(std::span<const data::Demonstration* const> demos, CondMode mode, const PolicyConfig& cfg,
                           std::uint64_t seed, TrainReport* report = nullptr, const ProgressFn& progress = {}) {
  if (demos.empty()) throw DataError("train_policy: no demonstrations");
  Policy p = Policy::create(mode, cfg, seed);
  std::vector<TrainingPair> pairs = make_pairs(demos, mode, cfg);
  if (pairs.empty()) throw DataError("train_policy: demonstrations contain no actions");

  std::array<double, kActionDims> lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
  for (const auto& tp : pairs)
    for (std::size_t i = 0; i < tp.chunk.size(); ++i) {
      const std::size_t d = i % kActionDims;
      lo[d] = std::min(lo[d], tp.chunk[i]);
      hi[d] = std::max(hi[d], tp.chunk[i]);
    }
  p.action_min = lo;
  p.action_max = hi;
  for (auto& tp : pairs)
    for (std::size_t i = 0; i < tp.chunk.size(); ++i)
      tp.chunk[i] = p.normalize(tp.chunk[i], static_cast<int>(i % kActionDims));

  const std::size_t cd = p.cond_mean.size();
  std::vector<double> sum(cd, 0.0), sq(cd, 0.0);
  for (const auto& tp : pairs)
    for (std::size_t i = 0; i < cd; ++i) {
      sum[i] += tp.cond[i];
      sq[i] += tp.cond[i] * tp.cond[i];
    }
  const double n = static_cast<double>(pairs.size());
  for (std::size_t i = 0; i < cd; ++i) {
    const double mu = sum[i] / n;
    const double var = std::max(0.0, sq[i] / n - mu * mu);
    p.cond_mean[i] = mu;
    p.cond_scale[i] = 1.0 / std::max(std::sqrt(var), kMinCondStd);
  }
  for (auto& tp : pairs) tp.cond = p.standardize(tp.cond);

  const int steps = cfg.max_steps > 0
                        ? cfg.max_steps
                        : static_cast<int>(std::ceil(static_cast<double>(cfg.epochs) * pairs.size() / cfg.batch_size));
  ad::AdamState adam;
  adam.config.lr = cfg.lr;
  Rng rng(derive_seed({seed, 0x7A1EULL}));
  TrainReport rep;
  rep.pairs = pairs.size();
  rep.steps = steps;
  std::vector<const TrainingPair*> batch(static_cast<std::size_t>(cfg.batch_size));
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  for (int s = 0; s < steps; ++s) {
    // cosine decay to a tenth of the base rate
    adam.config.lr = cfg.lr * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * s / steps)));
    for (auto& b : batch) b = &pairs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pairs.size()) - 1))];
    double loss;
    try {
      loss = train_step(p, batch, rng, adam);
    } catch (const NumericError& e) {
      throw NumericError(std::string("training aborted at step ") + std::to_string(s) + ": " + e.what() +
                         "; last finite loss " + std::to_string(last_finite));
    }
    last_finite = loss;
    rep.losses.push_back(loss);
    if (progress) progress(s, steps, loss);
  }
  if (report) *report = std::move(rep);
  return p;
}

}  // namespace bxl::policy
