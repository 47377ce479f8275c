#pragma once

// Optimizer, learning-rate schedules, augmentation, the training loop for the
// four loss variants, and mIoU / CA-IoU evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vcas/errors.hpp"
#include "vcas/losses.hpp"
#include "vcas/model.hpp"
#include "vcas/ops.hpp"
#include "vcas/random.hpp"
#include "vcas/scenes.hpp"
#include "vcas/tensor.hpp"

namespace vcas {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw InvalidArgument("optimizer.lr must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw InvalidArgument("optimizer.momentum must be in [0, 1)");
    if (!(weight_decay >= 0) || !std::isfinite(weight_decay))
      throw InvalidArgument("optimizer.weight_decay must be >= 0");
  }
};

template <typename T>
struct OptimizerState {
  OptimizerConfig hp;
  std::vector<std::vector<T>> velocity;  // created lazily, one per parameter
};

// Heavy-ball SGD with L2 in the gradient:
//   v <- momentum * v + (g + wd * w),  w <- w - lr * v.
// Parameters flagged decay=false skip the wd term. Gradients come from each
// tensor's gradient buffer (absent buffer = zero gradient). Every gradient
// is checked before any parameter changes.
template <typename T>
void sgd_momentum_step(const std::vector<NamedParameter<T>>& params, OptimizerState<T>& state, double lr) {
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.tensor.numel(), T(0));
  }
  if (state.velocity.size() != params.size())
    throw InvalidArgument("optimizer state holds " + std::to_string(state.velocity.size()) + " buffers for " +
                          std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.velocity[i].size() != params[i].tensor.numel())
      throw InvalidArgument("optimizer buffer shape mismatch for " + params[i].name);
    if (!params[i].tensor.has_grad()) continue;
    for (T g : params[i].tensor.grad())
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + params[i].name);
  }
  const T mom = static_cast<T>(state.hp.momentum), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> w = params[i].tensor;
    const T wd = params[i].decay ? static_cast<T>(state.hp.weight_decay) : T(0);
    auto& v = state.velocity[i];
    const bool has_g = w.has_grad();
    const T* g = has_g ? w.grad().data() : nullptr;
    for (std::size_t k = 0; k < v.size(); ++k) {
      v[k] = mom * v[k] + ((has_g ? g[k] : T(0)) + wd * w[k]);
      w[k] -= step * v[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

enum class ScheduleKind { poly, step };

struct Schedule {
  ScheduleKind kind = ScheduleKind::step;
  std::size_t total_iterations = 2000;
  double power = 0.9;
  std::vector<double> milestones{0.6, 0.8};
  double factor = 0.1;

  void validate() const {
    if (total_iterations == 0) throw InvalidArgument("schedule: total_iterations must be positive");
    if (!(power > 0)) throw InvalidArgument("schedule: power must be positive");
    if (!(factor > 0 && factor < 1)) throw InvalidArgument("schedule: factor must be in (0, 1)");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (!(milestones[i] > 0 && milestones[i] < 1)) throw InvalidArgument("schedule: milestones must be in (0, 1)");
      if (i && !(milestones[i] > milestones[i - 1]))
        throw InvalidArgument("schedule: milestones must be strictly increasing");
    }
  }
};

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::poly ? "poly" : "step"; }
inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "poly") return ScheduleKind::poly;
  if (s == "step") return ScheduleKind::step;
  throw InvalidArgument("unknown schedule kind '" + s + "' (expected poly|step)");
}

inline double lr_at(const Schedule& s, std::size_t iteration, double lr_base) {
  if (iteration >= s.total_iterations)
    throw RangeError("iteration " + std::to_string(iteration) + " outside schedule of " +
                     std::to_string(s.total_iterations));
  const double frac = static_cast<double>(iteration) / static_cast<double>(s.total_iterations);
  if (s.kind == ScheduleKind::poly) return lr_base * std::pow(1.0 - frac, s.power);
  double lr = lr_base;
  for (double m : s.milestones)
    if (frac >= m) lr *= s.factor;
  return lr;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  std::size_t crop_h = 48, crop_w = 48;
  double scale_min = 0.8, scale_max = 1.3;
  double flip_prob = 0.5;

  void validate() const {
    if (crop_h == 0 || crop_w == 0 || crop_h % 4 || crop_w % 4)
      throw InvalidArgument("crop size must be positive and divisible by 4");
    if (!(scale_min > 0 && scale_min <= scale_max)) throw InvalidArgument("augment: need 0 < scale_min <= scale_max");
    if (!(flip_prob >= 0 && flip_prob <= 1)) throw InvalidArgument("augment: flip probability must be in [0, 1]");
  }
};

// One geometric transform: scale, then optional horizontal flip, then crop.
struct AugmentParams {
  double scale = 1.0;
  bool flip = false;
  std::size_t crop_y = 0, crop_x = 0, crop_h = 0, crop_w = 0;
};

namespace detail {

inline std::size_t scaled_size(std::size_t n, double s) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(n) * s)));
}

// Source coordinate of output pixel `o` when resizing n -> m (pixel centres).
inline double source_coord(std::size_t o, std::size_t n, std::size_t m) {
  return (static_cast<double>(o) + 0.5) * static_cast<double>(n) / static_cast<double>(m) - 0.5;
}

inline std::size_t nearest_index(std::size_t o, std::size_t n, std::size_t m) {
  const double s = std::floor(source_coord(o, n, m) + 0.5);
  return static_cast<std::size_t>(std::clamp(s, 0.0, static_cast<double>(n - 1)));
}

// Maps an output pixel (after scale/flip/crop) to source pixel centre coords.
struct Geometry {
  std::size_t H, W, Hs, Ws;
  AugmentParams p;
  double src_y(std::size_t y) const { return source_coord(y + p.crop_y, H, Hs); }
  double src_x(std::size_t x) const {
    std::size_t xs = x + p.crop_x;
    if (p.flip) xs = Ws - 1 - xs;
    return source_coord(xs, W, Ws);
  }
  std::size_t near_y(std::size_t y) const { return nearest_index(y + p.crop_y, H, Hs); }
  std::size_t near_x(std::size_t x) const {
    std::size_t xs = x + p.crop_x;
    if (p.flip) xs = Ws - 1 - xs;
    return nearest_index(xs, W, Ws);
  }
};

inline Tensor<float> warp_bilinear(const Tensor<float>& img, const Geometry& g) {
  const std::size_t C = img.dim(0), oh = g.p.crop_h, ow = g.p.crop_w, H = g.H, W = g.W;
  Tensor<float> out(Shape{C, oh, ow});
  for (std::size_t y = 0; y < oh; ++y) {
    const double sy = std::clamp(g.src_y(y), 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < ow; ++x) {
      const double sx = std::clamp(g.src_x(x), 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = img.data() + c * H * W;
        const double v = (1 - fy) * ((1 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
                         fy * ((1 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
        out[(c * oh + y) * ow + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline Mask warp_nearest(const Mask& m, const Geometry& g) {
  const std::size_t oh = g.p.crop_h, ow = g.p.crop_w;
  Mask out(Shape{oh, ow});
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) out[y * ow + x] = m[g.near_y(y) * g.W + g.near_x(x)];
  return out;
}

// Flow is piecewise constant per object, so it is resampled like the masks
// (nearest) and its vectors are scaled; flipping negates the x component.
inline Tensor<float> warp_flow(const Tensor<float>& flow, const Geometry& g) {
  const std::size_t oh = g.p.crop_h, ow = g.p.crop_w, H = g.H, W = g.W;
  const float sx = static_cast<float>(g.Ws) / static_cast<float>(W) * (g.p.flip ? -1.0f : 1.0f);
  const float sy = static_cast<float>(g.Hs) / static_cast<float>(H);
  Tensor<float> out(Shape{2, oh, ow});
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t i = g.near_y(y) * W + g.near_x(x);
      out[y * ow + x] = flow[i] * sx;
      out[oh * ow + y * ow + x] = flow[H * W + i] * sy;
    }
  return out;
}

}  // namespace detail

inline AugmentParams draw_augment(std::size_t H, std::size_t W, const AugmentConfig& cfg, Rng& rng) {
  AugmentParams p;
  p.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  // A scale whose image would be smaller than the crop is raised to fit.
  const double need = std::max(static_cast<double>(cfg.crop_h) / static_cast<double>(H),
                               static_cast<double>(cfg.crop_w) / static_cast<double>(W));
  p.scale = std::max(p.scale, need);
  p.flip = rng.bernoulli(cfg.flip_prob);
  const std::size_t Hs = detail::scaled_size(H, p.scale), Ws = detail::scaled_size(W, p.scale);
  p.crop_h = cfg.crop_h;
  p.crop_w = cfg.crop_w;
  p.crop_y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(Hs) - static_cast<long>(cfg.crop_h)));
  p.crop_x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(Ws) - static_cast<long>(cfg.crop_w)));
  return p;
}

// Applies one transform to both frames, depths, masks and the flow.
inline SceneSample apply_augment(const SceneSample& s, const AugmentParams& p) {
  const std::size_t H = s.height(), W = s.width();
  const detail::Geometry g{H, W, detail::scaled_size(H, p.scale), detail::scaled_size(W, p.scale), p};
  if (p.crop_h == 0 || p.crop_w == 0 || p.crop_y + p.crop_h > g.Hs || p.crop_x + p.crop_w > g.Ws)
    throw InvalidArgument("augment: crop " + std::to_string(p.crop_h) + "x" + std::to_string(p.crop_w) +
                          " does not fit the scaled image " + std::to_string(g.Hs) + "x" + std::to_string(g.Ws));
  SceneSample o;
  o.frame_t = detail::warp_bilinear(s.frame_t, g);
  o.frame_tm1 = detail::warp_bilinear(s.frame_tm1, g);
  o.depth_t = detail::warp_bilinear(s.depth_t, g);
  o.depth_tm1 = detail::warp_bilinear(s.depth_tm1, g);
  o.mask_t = detail::warp_nearest(s.mask_t, g);
  o.mask_tm1 = detail::warp_nearest(s.mask_tm1, g);
  o.flow = detail::warp_flow(s.flow, g);
  return o;
}

inline SceneSample augment(const SceneSample& s, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t H = s.height(), W = s.width();
  if (cfg.crop_h > detail::scaled_size(H, cfg.scale_max) || cfg.crop_w > detail::scaled_size(W, cfg.scale_max))
    throw InvalidArgument("augment: crop larger than the largest scaled image");
  return apply_augment(s, draw_augment(H, W, cfg, rng));
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  std::vector<std::string> class_names;  // known classes
  std::vector<double> iou;               // per known class; NaN when the class has no GT pixel
  std::vector<std::uint64_t> gt_pixels;  // per known class
  double miou = 0;
  double ca_iou = 0;
  std::size_t num_classes = 0;           // C; the confusion is (C+1)×(C+1)
  std::vector<std::uint64_t> confusion;  // [gt-1][pred-1]
};

// Accumulates a (C+1)×(C+1) confusion over non-ignored pixels. Labels are
// 1..C+1.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(std::size_t C) : C_(C), conf_((C + 1) * (C + 1), 0) {}

  void add(const LabelMap& pred, const LabelMap& target, const Mask& ignore) {
    if (pred.shape != target.shape || ignore.shape != target.shape)
      throw InvalidArgument("evaluate: prediction, target and ignore shapes differ");
    const int K = static_cast<int>(C_) + 1;
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (ignore[i]) continue;
      const int g = target[i], p = pred[i];
      if (g < 1 || g > K || p < 1 || p > K) throw InvalidArgument("evaluate: label outside 1..C+1");
      ++conf_[static_cast<std::size_t>(g - 1) * (C_ + 1) + static_cast<std::size_t>(p - 1)];
    }
  }

  EvalResult result(const std::vector<std::string>& names) const {
    EvalResult r;
    r.class_names = names;
    r.num_classes = C_;
    r.confusion = conf_;
    const std::size_t K = C_ + 1;
    auto at = [&](std::size_t g, std::size_t p) { return conf_[g * K + p]; };
    double sum = 0;
    std::size_t counted = 0;
    for (std::size_t k = 0; k < C_; ++k) {
      std::uint64_t tp = at(k, k), gt = 0, pr = 0;
      for (std::size_t j = 0; j < K; ++j) {
        gt += at(k, j);
        pr += at(j, k);
      }
      r.gt_pixels.push_back(gt);
      if (gt == 0) {
        r.iou.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      const double iou = static_cast<double>(tp) / static_cast<double>(gt + pr - tp);
      r.iou.push_back(iou);
      sum += iou;
      ++counted;
    }
    r.miou = counted ? sum / static_cast<double>(counted) : 0.0;
    // Unknown channel C+1 as a binary problem.
    std::uint64_t tp = at(C_, C_), gt = 0, pr = 0;
    for (std::size_t j = 0; j < K; ++j) {
      gt += at(C_, j);
      pr += at(j, C_);
    }
    const std::uint64_t uni = gt + pr - tp;
    r.ca_iou = uni ? static_cast<double>(tp) / static_cast<double>(uni) : 1.0;
    return r;
  }

 private:
  std::size_t C_;
  std::vector<std::uint64_t> conf_;
};

inline EvalResult evaluate_labels(const LabelMap& pred, const LabelMap& target, const Mask& ignore,
                                  const std::vector<std::string>& names) {
  ConfusionAccumulator acc(names.size());
  acc.add(pred, target, ignore);
  return acc.result(names);
}

inline LabelMap upsample_nearest(const LabelMap& m, std::size_t H, std::size_t W) { return resize_nearest(m, H, W); }

// Per-sample helpers turning a SceneSample into batched model inputs.
template <typename T>
Tensor<T> stack_frames(const std::vector<const Tensor<float>*>& frames) {
  const Shape& s = frames.at(0)->shape();
  Tensor<T> out(Shape{frames.size(), s[0], s[1], s[2]});
  const std::size_t n = s.numel();
  for (std::size_t b = 0; b < frames.size(); ++b) {
    if (frames[b]->shape() != s) throw InvalidArgument("cannot batch frames of different shapes");
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = static_cast<T>((*frames[b])[i]);
  }
  return out;
}

inline Mask stack_masks(const std::vector<const Mask*>& masks) {
  const Shape& s = masks.at(0)->shape;
  Mask out(Shape{masks.size(), s[0], s[1]});
  for (std::size_t b = 0; b < masks.size(); ++b)
    std::copy(masks[b]->values.begin(), masks[b]->values.end(), out.values.begin() + b * s.numel());
  return out;
}

template <typename T>
EvalResult evaluate(const SegmentationModel<T>& model, const DatasetManifest& data, const LabelPolicy& policy,
                    const std::vector<std::string>& model_classes) {
  if (model_classes.size() != policy.num_known() || model.config().num_classes != policy.num_known())
    throw ConfigError("checkpoint has " + std::to_string(model.config().num_classes) +
                      " classes but the label policy has " + std::to_string(policy.num_known()));
  if (model_classes != policy.known_classes) throw ConfigError("checkpoint class names differ from the label policy");
  const auto idx = data.indices("eval");
  if (idx.empty()) throw InvalidArgument("evaluate: dataset has no eval samples");
  NoGradScope<T> no_grad;
  ConfusionAccumulator acc(policy.num_known());
  for (std::size_t i : idx) {
    const SceneSample s = load_sample(data, i);
    const Tensor<T> app = stack_frames<T>({&s.frame_t}), dep = stack_frames<T>({&s.depth_t});
    const LabelMap low = predict_labels(model.distances(model.segmentation_embeddings(model.features(app, dep))));
    const LabelMap pred = upsample_nearest(low, s.height(), s.width());
    PolicyTargets tg = apply_label_policy(s.mask_t, data.classes, policy, Phase::eval);
    tg.target.shape = Shape{1, s.height(), s.width()};
    tg.ignore.shape = tg.target.shape;
    acc.add(pred, tg.target, tg.ignore);
  }
  return acc.result(policy.known_classes);
}

inline void write_eval_csv(const EvalResult& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  auto num = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  f << "class,iou\n";
  for (std::size_t k = 0; k < r.class_names.size(); ++k) f << r.class_names[k] << ',' << num(r.iou[k]) << '\n';
  f << "mIoU," << num(r.miou) << '\n';
  f << "CA-IoU," << num(r.ca_iou) << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOptions {
  OptimizerConfig optimizer;
  Schedule schedule;
  AugmentConfig augment;
  ModelConfig model;
  LossWeights loss;
  double ap_factor = 0.1;
  bool use_queue = true;
  std::size_t queue_capacity = 512;
  std::size_t batch_size = 2;
  std::size_t log_every = 50;
  std::uint64_t seed = 0;
  std::string policy_mode = "FD";  // FD | LU
  std::string data_mode = "FD";    // FD | LD (first quarter of the training split)

  std::size_t iterations() const { return schedule.total_iterations; }

  void validate() const {
    optimizer.validate();
    schedule.validate();
    augment.validate();
    model.validate();
    if (!(loss.lambda >= 0) || !std::isfinite(loss.lambda)) throw InvalidArgument("loss.lambda must be >= 0");
    if (!(loss.tau > 0) || !std::isfinite(loss.tau)) throw InvalidArgument("loss.tau must be positive");
    region_window(ap_factor, 1, 1);
    if (queue_capacity == 0) throw InvalidArgument("loss.queue_capacity must be positive");
    if (batch_size == 0) throw InvalidArgument("training.batch_size must be positive");
    if (loss.variant == Variant::image && batch_size < 2)
      throw InvalidArgument("the image variant needs training.batch_size >= 2");
    if (log_every == 0) throw InvalidArgument("training.log_every must be positive");
    if (policy_mode != "FD" && policy_mode != "LU") throw InvalidArgument("data.policy_mode must be FD or LU");
    if (data_mode != "FD" && data_mode != "LD") throw InvalidArgument("data.data_mode must be FD or LD");
  }
};

struct MetricsRow {
  std::size_t iteration = 0;
  double loss_seg = 0, loss_aux = 0, lr = 0;
};

struct TrainResult {
  std::vector<MetricsRow> log;            // one row per log interval
  std::vector<double> seg_history;        // l_seg at every iteration
  std::vector<std::string> class_names;   // known classes
  std::size_t iterations_run = 0;
};

template <typename T>
struct TrainState {
  SegmentationModel<T> model;
  OptimizerState<T> optimizer;
  std::optional<MemoryQueue<T>> queue;
};

// Everything one step needs, already transformed and at crop resolution.
struct TrainBatch {
  std::vector<SceneSample> view;    // primary view (frames t and t-1 share its transform)
  std::vector<SceneSample> second;  // image variant only: an independent second view
};

namespace detail {

// Target ids at feature resolution for a batch of class-id masks.
inline PolicyTargets feature_targets(const std::vector<const Mask*>& masks, const std::vector<int>& table,
                                     std::size_t fh, std::size_t fw) {
  const std::size_t n = masks.size();
  PolicyTargets out{LabelMap(Shape{n, fh, fw}), Mask(Shape{n, fh, fw})};
  for (std::size_t b = 0; b < n; ++b) {
    const Mask& m = *masks[b];
    const std::size_t H = m.shape[0], W = m.shape[1];
    for (std::size_t y = 0; y < fh; ++y)
      for (std::size_t x = 0; x < fw; ++x) {
        const std::size_t sy = nearest_index(y, H, fh), sx = nearest_index(x, W, fw);
        const int t = table.at(m[sy * W + sx]);
        if (t < 0) throw InvalidArgument("mask contains a class not classified by the label policy");
        out.target[(b * fh + y) * fw + x] = t;
        out.ignore[(b * fh + y) * fw + x] = t == 0 ? 1 : 0;
      }
  }
  return out;
}

template <typename T>
Tensor<T> stack_flow(const std::vector<SceneSample>& v) {
  std::vector<const Tensor<float>*> f;
  for (const auto& s : v) f.push_back(&s.flow);
  return stack_frames<T>(f);
}

}  // namespace detail

struct StepLosses {
  double seg = 0, aux = 0, total = 0;
};

// Forward + backward + optimizer update for one batch.
template <typename T>
StepLosses train_step(TrainState<T>& st, const TrainBatch& batch, const std::vector<int>& table,
                      const TrainOptions& opt, double lr) {
  const auto& model = st.model;
  Tape<T> tape;
  TapeScope<T> scope(tape);
  std::vector<const Tensor<float>*> app, dep;
  std::vector<const Mask*> masks;
  for (const auto& s : batch.view) {
    app.push_back(&s.frame_t);
    dep.push_back(&s.depth_t);
    masks.push_back(&s.mask_t);
  }
  const Tensor<T> h = model.features(stack_frames<T>(app), stack_frames<T>(dep));
  const std::size_t fh = h.dim(2), fw = h.dim(3);
  const PolicyTargets tg = detail::feature_targets(masks, table, fh, fw);
  Tensor<T> l_seg = seg_cross_entropy_logits(model.distances(model.segmentation_embeddings(h)), tg.target, tg.ignore);

  Tensor<T> l_aux = Tensor<T>::scalar(T(0));
  const double tau = opt.loss.tau;
  switch (opt.loss.variant) {
    case Variant::none:
      break;
    case Variant::prototype: {
      const Tensor<T> z = model.contrastive_embeddings(h);
      const PrototypeBatch<T> pb = extract_prototypes(z, tg.target);
      if (!pb.labels.empty()) {
        if (st.queue) {
          l_aux = prototype_contrastive_step(pb, *st.queue, tau);
        } else {
          l_aux = prototype_contrastive_loss(pb, static_cast<const MemoryQueue<T>*>(nullptr), tau);
        }
      }
      break;
    }
    case Variant::image: {
      std::vector<const Tensor<float>*> app2, dep2;
      for (const auto& s : batch.second) {
        app2.push_back(&s.frame_t);
        dep2.push_back(&s.depth_t);
      }
      const Tensor<T> h2 = model.features(stack_frames<T>(app2), stack_frames<T>(dep2));
      l_aux = image_contrastive_loss(model.contrastive_embeddings(h), model.contrastive_embeddings(h2), tau);
      break;
    }
    case Variant::temporal: {
      std::vector<const Tensor<float>*> appp, depp;
      for (const auto& s : batch.view) {
        appp.push_back(&s.frame_tm1);
        depp.push_back(&s.depth_tm1);
      }
      const Tensor<T> hp = model.features(stack_frames<T>(appp), stack_frames<T>(depp));
      const Tensor<T> z = model.contrastive_embeddings(h), zp = model.contrastive_embeddings(hp);
      const Tensor<T> flow = resize_flow(detail::stack_flow<T>(batch.view), fh, fw);
      const Sampled<T> warped = warp_features(zp, flow);
      const RegionGrid<T> cur = region_pool(z, warped.valid, opt.ap_factor);
      const RegionGrid<T> prev = region_pool(warped.output, warped.valid, opt.ap_factor);
      l_aux = temporal_contrastive_loss(cur, prev, tau);
      break;
    }
  }
  Tensor<T> total = total_loss(l_seg, l_aux, opt.loss);
  StepLosses out{static_cast<double>(l_seg.item()), static_cast<double>(l_aux.item()),
                 static_cast<double>(total.item())};
  if (!std::isfinite(out.total)) throw NumericalError("non-finite loss (l_seg=" + std::to_string(out.seg) +
                                                      ", l_aux=" + std::to_string(out.aux) + ")");
  const auto params = model.parameters();
  for (const auto& p : params) Tensor<T>(p.tensor).zero_grad();
  tape.backward(total);
  sgd_momentum_step(params, st.optimizer, lr);
  return out;
}

// In-memory training split plus the phase table for the active policy.
struct TrainingData {
  std::vector<SceneSample> samples;
  std::vector<int> table;  // dataset class id -> train target
  LabelPolicy policy;      // after the policy mode
  std::vector<std::string> class_names;
};

inline TrainingData load_training_data(const DatasetManifest& data, const TrainOptions& opt) {
  TrainingData td;
  td.policy = policy_for_mode(data.policy, opt.policy_mode);
  td.table = policy_table(data.classes, td.policy, Phase::train);
  for (std::size_t id = 1; id < td.table.size(); ++id)
    if (td.table[id] < 0)
      throw InvalidArgument("class '" + data.classes[id - 1] + "' is not classified by the label policy");
  td.class_names = td.policy.known_classes;
  auto idx = data.indices("train");
  if (opt.data_mode == "LD") idx.resize(std::max<std::size_t>(1, idx.size() / 4));
  if (idx.empty()) throw InvalidArgument("dataset has no training samples");
  for (std::size_t i : idx) td.samples.push_back(load_sample(data, i));
  return td;
}

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "iteration,loss_seg,loss_aux,lr\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.8g,%.8g,%.8g\n", r.iteration, r.loss_seg, r.loss_aux, r.lr);
    f << buf;
  }
  if (!f) throw IoError("write failed: " + path.string());
}

// Runs the full loop. Writes `out_dir/checkpoint/` and `out_dir/metrics.csv`
// when out_dir is non-empty. On a numerical failure the parameters from the
// last completed step are saved before the error propagates.
template <typename T>
TrainResult train(const TrainingData& td, const TrainOptions& opt, const std::filesystem::path& out_dir,
                  TrainState<T>* state_out = nullptr,
                  const std::function<void(const MetricsRow&)>& on_log = nullptr) {
  opt.validate();
  ModelConfig mc = opt.model;
  mc.num_classes = td.policy.num_known();
  mc.contrastive_head = opt.loss.variant != Variant::none;
  TrainState<T> st{SegmentationModel<T>::init(mc, opt.seed), OptimizerState<T>{opt.optimizer, {}}, std::nullopt};
  if (opt.loss.variant == Variant::prototype && opt.use_queue) st.queue.emplace(opt.queue_capacity);

  Rng rng = Rng::substream(opt.seed, 1, 0x747261696eULL);
  const std::size_t H = td.samples.at(0).height(), W = td.samples.at(0).width();
  if (opt.augment.crop_h > detail::scaled_size(H, opt.augment.scale_max) ||
      opt.augment.crop_w > detail::scaled_size(W, opt.augment.scale_max))
    throw InvalidArgument("crop larger than the largest scaled image");

  TrainResult res;
  res.class_names = td.class_names;
  double seg_acc = 0, aux_acc = 0;
  std::size_t acc_n = 0;
  auto save = [&] {
    if (!out_dir.empty()) save_checkpoint(out_dir / "checkpoint", st.model, td.class_names);
  };
  for (std::size_t it = 0; it < opt.iterations(); ++it) {
    const double lr = lr_at(opt.schedule, it, opt.optimizer.lr);
    TrainBatch batch;
    for (std::size_t b = 0; b < opt.batch_size; ++b) {
      const auto& s = td.samples[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(td.samples.size()) - 1))];
      batch.view.push_back(apply_augment(s, draw_augment(H, W, opt.augment, rng)));
      if (opt.loss.variant == Variant::image) batch.second.push_back(apply_augment(s, draw_augment(H, W, opt.augment, rng)));
    }
    StepLosses l;
    try {
      l = train_step(st, batch, td.table, opt, lr);
    } catch (const NumericalError& e) {
      save();
      if (!out_dir.empty()) write_metrics_csv(res.log, out_dir / "metrics.csv");
      throw NumericalError(std::string(e.what()) + " at iteration " + std::to_string(it) +
                           (out_dir.empty() ? "" : "; last good checkpoint saved"));
    }
    res.seg_history.push_back(l.seg);
    seg_acc += l.seg;
    aux_acc += l.aux;
    ++acc_n;
    if ((it + 1) % opt.log_every == 0 || it + 1 == opt.iterations()) {
      MetricsRow row{it + 1, seg_acc / static_cast<double>(acc_n), aux_acc / static_cast<double>(acc_n), lr};
      res.log.push_back(row);
      if (on_log) on_log(row);
      seg_acc = aux_acc = 0;
      acc_n = 0;
    }
    res.iterations_run = it + 1;
  }
  save();
  if (!out_dir.empty()) write_metrics_csv(res.log, out_dir / "metrics.csv");
  if (state_out) *state_out = std::move(st);
  return res;
}

}  // namespace vcas
