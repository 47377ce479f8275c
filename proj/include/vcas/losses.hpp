#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "vcas/errors.hpp"
#include "vcas/ops.hpp"
#include "vcas/tensor.hpp"

namespace vcas {

enum class Variant { none, image, prototype, temporal };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::none: return "none";
    case Variant::image: return "image";
    case Variant::prototype: return "prototype";
    case Variant::temporal: return "temporal";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "none") return Variant::none;
  if (s == "image") return Variant::image;
  if (s == "prototype") return Variant::prototype;
  if (s == "temporal") return Variant::temporal;
  throw InvalidArgument("unknown variant '" + s + "' (expected none|image|prototype|temporal)");
}

// Default temperature per variant.
inline double default_tau(Variant v) { return v == Variant::temporal ? 0.1 : 0.07; }

struct LossWeights {
  double lambda = 0.5;
  double tau = 0.07;
  Variant variant = Variant::none;

  void validate() const {
    if (!(tau > 0)) throw InvalidArgument("tau must be positive");
    if (!(lambda >= 0)) throw InvalidArgument("lambda must be non-negative");
  }
};

namespace detail {

inline void require_tau(double tau) {
  if (!(tau > 0)) throw InvalidArgument("tau must be positive, got " + std::to_string(tau));
}

template <typename T>
void check_targets(const Tensor<T>& probs, const LabelMap& target, const Mask& ignore, const char* op) {
  require_rank(probs, 4, op, "probabilities");
  const Shape expect{probs.dim(0), probs.dim(2), probs.dim(3)};
  if (target.shape != expect || ignore.shape != expect)
    throw InvalidArgument(std::string(op) + ": target/ignore must be " + expect.str());
  const int k = static_cast<int>(probs.dim(1));
  for (std::size_t i = 0; i < target.size(); ++i)
    if (!ignore[i] && (target[i] < 1 || target[i] > k))
      throw InvalidArgument(std::string(op) + ": label " + std::to_string(target[i]) + " at pixel " +
                            std::to_string(i) + " outside [1, " + std::to_string(k) + "]");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Segmentation cross-entropy
// ---------------------------------------------------------------------------

// Mean of -log p[target] over non-ignored pixels; labels are 1-based channel
// numbers. Probabilities are floored at the smallest normal value.
template <typename T>
Tensor<T> seg_cross_entropy(const Tensor<T>& probs, const LabelMap& target, const Mask& ignore) {
  detail::check_targets(probs, target, ignore, "seg_cross_entropy");
  const std::size_t n = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  const T floor = std::numeric_limits<T>::min();
  std::size_t count = 0;
  T acc = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      if (ignore[b * hw + p]) continue;
      const std::size_t c = static_cast<std::size_t>(target[b * hw + p] - 1);
      acc -= std::log(std::max(probs[(b * k + c) * hw + p], floor));
      ++count;
    }
  Tensor<T> out = Tensor<T>::scalar(count ? acc / static_cast<T>(count) : T(0));
  if (count && grad_enabled({&probs})) {
    record_op(out, [probs, out, target, ignore, n, k, hw, count, floor]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(count);
      auto gp = probs.grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          if (ignore[b * hw + p]) continue;
          const std::size_t i = (b * k + static_cast<std::size_t>(target[b * hw + p] - 1)) * hw + p;
          if (probs[i] > floor) gp[i] -= g / probs[i];
        }
    });
  }
  return out;
}

// Same loss computed from the logits (class distances) with a log-sum-exp;
// equal to seg_cross_entropy(softmax(d, 1), ...) but stable for very negative
// distances. Used by the training loop.
template <typename T>
Tensor<T> seg_cross_entropy_logits(const Tensor<T>& d, const LabelMap& target, const Mask& ignore) {
  detail::check_targets(d, target, ignore, "seg_cross_entropy_logits");
  const std::size_t n = d.dim(0), k = d.dim(1), hw = d.dim(2) * d.dim(3);
  std::size_t count = 0;
  T acc = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      if (ignore[b * hw + p]) continue;
      const T* base = d.data() + b * k * hw + p;
      T mx = base[0];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, base[c * hw]);
      T z = 0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(base[c * hw] - mx);
      acc += mx + std::log(z) - base[static_cast<std::size_t>(target[b * hw + p] - 1) * hw];
      ++count;
    }
  Tensor<T> out = Tensor<T>::scalar(count ? acc / static_cast<T>(count) : T(0));
  if (count && grad_enabled({&d})) {
    record_op(out, [d, out, target, ignore, n, k, hw, count]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(count);
      auto gd = d.grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          if (ignore[b * hw + p]) continue;
          const T* base = d.data() + b * k * hw + p;
          T mx = base[0];
          for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, base[c * hw]);
          T z = 0;
          for (std::size_t c = 0; c < k; ++c) z += std::exp(base[c * hw] - mx);
          const std::size_t y = static_cast<std::size_t>(target[b * hw + p] - 1);
          for (std::size_t c = 0; c < k; ++c) {
            const T pc = std::exp(base[c * hw] - mx) / z;
            gd[b * k * hw + c * hw + p] += g * (pc - (c == y ? T(1) : T(0)));
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prototypes and the memory queue
// ---------------------------------------------------------------------------

template <typename T>
struct PrototypeBatch {
  Tensor<T> vectors;                 // B × D, unit rows
  std::vector<int> labels;           // B labels in [1, C+1]
  std::vector<std::size_t> images;   // source image of each row
};

// Masked average pooling: one row per (image, label) pair present in `labels`
// (N×H×W), holding the mean of z (N×D×H×W) over that label's pixels. Labels
// < 1 mark pixels that take part in no region. Rows are ordered by image,
// then label.
template <typename T>
Tensor<T> masked_average_pool(const Tensor<T>& z, const LabelMap& labels, std::vector<int>* row_labels = nullptr,
                              std::vector<std::size_t>* row_images = nullptr) {
  detail::require_rank(z, 4, "masked_average_pool", "embeddings");
  const std::size_t n = z.dim(0), dz = z.dim(1), hw = z.dim(2) * z.dim(3);
  if (labels.shape != Shape{n, z.dim(2), z.dim(3)})
    throw InvalidArgument("masked_average_pool: mask shape " + labels.shape.str() + " does not match embeddings " +
                          z.shape().str());
  struct Row {
    std::size_t image;
    int label;
    std::vector<std::size_t> pixels;
  };
  std::vector<Row> rows;
  for (std::size_t b = 0; b < n; ++b) {
    std::map<int, std::vector<std::size_t>> by_label;
    for (std::size_t p = 0; p < hw; ++p) {
      const int l = labels[b * hw + p];
      if (l >= 1) by_label[l].push_back(p);
    }
    for (auto& [l, px] : by_label) rows.push_back({b, l, std::move(px)});
  }
  if (row_labels) {
    row_labels->clear();
    for (const auto& r : rows) row_labels->push_back(r.label);
  }
  if (row_images) {
    row_images->clear();
    for (const auto& r : rows) row_images->push_back(r.image);
  }
  if (rows.empty()) return Tensor<T>();

  Tensor<T> out(Shape{rows.size(), dz});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const T inv = T(1) / static_cast<T>(rows[r].pixels.size());
    for (std::size_t c = 0; c < dz; ++c) {
      const T* plane = z.data() + (rows[r].image * dz + c) * hw;
      T acc = 0;
      for (auto p : rows[r].pixels) acc += plane[p];
      out[r * dz + c] = acc * inv;
    }
  }
  if (grad_enabled({&z})) {
    record_op(out, [z, out, rows = std::move(rows), dz, hw]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gz = z.grad();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const T inv = T(1) / static_cast<T>(rows[r].pixels.size());
        for (std::size_t c = 0; c < dz; ++c) {
          T* plane = gz.data() + (rows[r].image * dz + c) * hw;
          const T v = g[r * dz + c] * inv;
          for (auto p : rows[r].pixels) plane[p] += v;
        }
      }
    });
  }
  return out;
}

// Masked average pooling followed by L2 normalization of each row.
template <typename T>
PrototypeBatch<T> extract_prototypes(const Tensor<T>& z, const LabelMap& labels) {
  PrototypeBatch<T> batch;
  Tensor<T> raw = masked_average_pool(z, labels, &batch.labels, &batch.images);
  if (!batch.labels.empty()) batch.vectors = l2_normalize(raw, 1, T(1e-12));
  return batch;
}

// Fixed-capacity FIFO of detached (vector, label) pairs.
template <typename T>
class MemoryQueue {
 public:
  struct Entry {
    std::vector<T> vector;
    int label;
    bool operator==(const Entry&) const = default;
  };

  explicit MemoryQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw InvalidArgument("memory queue capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::deque<Entry>& entries() const { return entries_; }

  void push(Entry e) {
    entries_.push_back(std::move(e));
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  // Appends every row of the batch (values copied, no gradient) and evicts
  // the oldest entries beyond capacity.
  void push(const PrototypeBatch<T>& batch) {
    if (batch.labels.empty()) return;
    const std::size_t d = batch.vectors.dim(1);
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      const T* row = batch.vectors.data() + i * d;
      push(Entry{std::vector<T>(row, row + d), batch.labels[i]});
    }
  }

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
};

template <typename T>
void queue_push(MemoryQueue<T>& queue, const PrototypeBatch<T>& batch) {
  queue.push(batch);
}

// Supervised contrastive loss over prototypes. Anchors are the batch rows;
// each anchor's candidates are all other batch rows plus every queue entry,
// positives are candidates with the same label. Anchors without positives
// contribute nothing; the result is the sum over contributing anchors.
template <typename T>
Tensor<T> prototype_contrastive_loss(const PrototypeBatch<T>& batch, const MemoryQueue<T>* queue, double tau) {
  detail::require_tau(tau);
  if (batch.labels.empty()) throw InvalidArgument("prototype_contrastive_loss: empty prototype batch");
  const Tensor<T>& v = batch.vectors;
  const std::size_t B = v.dim(0), D = v.dim(1);
  const std::size_t Q = queue ? queue->size() : 0;
  if (queue)
    for (const auto& e : queue->entries())
      if (e.vector.size() != D) throw InvalidArgument("prototype_contrastive_loss: queue vector width mismatch");
  const T inv_tau = static_cast<T>(1.0 / tau);
  const std::size_t A = B + Q;
  auto cand = [&](std::size_t a) -> const T* {
    return a < B ? v.data() + a * D : queue->entries()[a - B].vector.data();
  };
  auto cand_label = [&](std::size_t a) { return a < B ? batch.labels[a] : queue->entries()[a - B].label; };

  // Per-anchor d(loss)/d(logit) coefficients, kept for the backward pass.
  std::vector<T> coef(B * A, T(0));
  T total = 0;
  std::vector<T> logits(A);
  for (std::size_t i = 0; i < B; ++i) {
    std::size_t npos = 0;
    for (std::size_t a = 0; a < A; ++a)
      if (a != i && cand_label(a) == batch.labels[i]) ++npos;
    if (npos == 0) continue;
    const T* bi = v.data() + i * D;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t a = 0; a < A; ++a) {
      if (a == i) continue;
      const T* ba = cand(a);
      T dot = 0;
      for (std::size_t c = 0; c < D; ++c) dot += bi[c] * ba[c];
      logits[a] = dot * inv_tau;
      mx = std::max(mx, logits[a]);
    }
    T z = 0;
    for (std::size_t a = 0; a < A; ++a)
      if (a != i) z += std::exp(logits[a] - mx);
    const T lse = mx + std::log(z);
    T pos_sum = 0;
    for (std::size_t a = 0; a < A; ++a)
      if (a != i && cand_label(a) == batch.labels[i]) pos_sum += logits[a];
    total += lse - pos_sum / static_cast<T>(npos);
    for (std::size_t a = 0; a < A; ++a) {
      if (a == i) continue;
      const T p = std::exp(logits[a] - lse);
      coef[i * A + a] = p - (cand_label(a) == batch.labels[i] ? T(1) / static_cast<T>(npos) : T(0));
    }
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  if (grad_enabled({&v})) {
    std::vector<T> qvals(Q * D);
    for (std::size_t q = 0; q < Q; ++q) std::copy_n(queue->entries()[q].vector.data(), D, qvals.data() + q * D);
    record_op(out, [v, out, coef = std::move(coef), qvals = std::move(qvals), B, D, A, inv_tau]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] * inv_tau;
      auto gv = v.grad();
      for (std::size_t i = 0; i < B; ++i) {
        const T* bi = v.data() + i * D;
        for (std::size_t a = 0; a < A; ++a) {
          const T c = coef[i * A + a] * g;
          if (c == T(0)) continue;
          const T* ba = a < B ? v.data() + a * D : qvals.data() + (a - B) * D;
          for (std::size_t k = 0; k < D; ++k) gv[i * D + k] += c * ba[k];
          if (a < B)
            for (std::size_t k = 0; k < D; ++k) gv[a * D + k] += c * bi[k];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> prototype_contrastive_loss(const PrototypeBatch<T>& batch, const MemoryQueue<T>& queue, double tau) {
  return prototype_contrastive_loss(batch, &queue, tau);
}

// Loss against the current queue contents, then pushes the batch (detached).
template <typename T>
Tensor<T> prototype_contrastive_step(const PrototypeBatch<T>& batch, MemoryQueue<T>& queue, double tau) {
  Tensor<T> loss = prototype_contrastive_loss(batch, &queue, tau);
  queue.push(batch);
  return loss;
}

// ---------------------------------------------------------------------------
// Temporal guidance: warping, region pooling, region InfoNCE
// ---------------------------------------------------------------------------

// Bilinear resize with half-pixel centers; not differentiable.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  detail::require_rank(x, 4, "resize_bilinear", "input");
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  Tensor<T> coords(Shape{n, 2, oh, ow});
  const T sy = static_cast<T>(h) / static_cast<T>(oh), sx = static_cast<T>(w) / static_cast<T>(ow);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        coords[(b * 2) * oh * ow + y * ow + xx] = (static_cast<T>(xx) + T(0.5)) * sx - T(0.5);
        coords[(b * 2 + 1) * oh * ow + y * ow + xx] = (static_cast<T>(y) + T(0.5)) * sy - T(0.5);
      }
  NoGradScope<T> no_grad;
  return bilinear_sample(x.detach(), coords).output;
}

// Resizes a flow field to (oh, ow) and rescales its displacements by the
// per-axis size ratio.
template <typename T>
Tensor<T> resize_flow(const Tensor<T>& flow, std::size_t oh, std::size_t ow) {
  detail::require_rank(flow, 4, "resize_flow", "flow");
  if (flow.dim(1) != 2) throw InvalidArgument("resize_flow: flow must have 2 channels");
  Tensor<T> out = resize_bilinear(flow, oh, ow);
  const T rx = static_cast<T>(ow) / static_cast<T>(flow.dim(3));
  const T ry = static_cast<T>(oh) / static_cast<T>(flow.dim(2));
  const std::size_t hw = oh * ow;
  for (std::size_t b = 0; b < flow.dim(0); ++b) {
    for (std::size_t p = 0; p < hw; ++p) out[(b * 2) * hw + p] *= rx;
    for (std::size_t p = 0; p < hw; ++p) out[(b * 2 + 1) * hw + p] *= ry;
  }
  return out;
}

// Nearest-neighbour resampling of an N×H×W label map (half-pixel centers).
inline LabelMap resize_nearest(const LabelMap& m, std::size_t oh, std::size_t ow) {
  if (m.shape.rank() != 3) throw InvalidArgument("resize_nearest: label map must be N×H×W");
  const std::size_t n = m.shape[0], h = m.shape[1], w = m.shape[2];
  LabelMap out(Shape{n, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < oh; ++y) {
      const std::size_t sy = std::min(h - 1, (2 * y + 1) * h / (2 * oh));
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t sx = std::min(w - 1, (2 * x + 1) * w / (2 * ow));
        out[(b * oh + y) * ow + x] = m[(b * h + sy) * w + sx];
      }
    }
  return out;
}

// Backward warp: f'(p) = f_prev(p + flow(p)). flow channel 0 is the column
// displacement, channel 1 the row displacement, both from frame t to t-1.
template <typename T>
Sampled<T> warp_features(const Tensor<T>& f_prev, const Tensor<T>& flow) {
  detail::require_rank(f_prev, 4, "warp_features", "features");
  detail::require_rank(flow, 4, "warp_features", "flow");
  if (flow.dim(0) != f_prev.dim(0) || flow.dim(1) != 2 || flow.dim(2) != f_prev.dim(2) ||
      flow.dim(3) != f_prev.dim(3))
    throw InvalidArgument("warp_features: flow " + flow.shape().str() + " does not match features " +
                          f_prev.shape().str());
  const std::size_t n = flow.dim(0), h = flow.dim(2), w = flow.dim(3), hw = h * w;
  Tensor<T> coords(flow.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t p = y * w + x;
        coords[(b * 2) * hw + p] = static_cast<T>(x) + flow[(b * 2) * hw + p];
        coords[(b * 2 + 1) * hw + p] = static_cast<T>(y) + flow[(b * 2 + 1) * hw + p];
      }
  return bilinear_sample(f_prev, coords);
}

template <typename T>
struct RegionGrid {
  Tensor<T> regions;  // N × D × Hr × Wr, unit vectors along D
  Mask valid;         // N × 1 × Hr × Wr
};

// Pooling window for an AP factor: the kernel covers ceil(factor · size)
// feature pixels per axis, stride = kernel, so smaller factors give finer
// grids.
inline PoolWindow region_window(double ap_factor, std::size_t h, std::size_t w) {
  if (!(ap_factor > 0 && ap_factor <= 1))
    throw InvalidArgument("ap_factor must be in (0, 1], got " + std::to_string(ap_factor));
  auto k = [&](std::size_t n) {
    const auto v = static_cast<std::size_t>(std::ceil(ap_factor * static_cast<double>(n) - 1e-9));
    return std::clamp<std::size_t>(v, 1, n);
  };
  const std::size_t kh = k(h), kw = k(w);
  return PoolWindow{kh, kw, kh, kw};
}

template <typename T>
RegionGrid<T> region_pool(const Tensor<T>& f, const Mask& validity, double ap_factor) {
  detail::require_rank(f, 4, "region_pool", "features");
  const std::size_t n = f.dim(0), h = f.dim(2), w = f.dim(3);
  if (validity.shape != Shape{n, 1, h, w})
    throw InvalidArgument("region_pool: validity must be " + Shape{n, 1, h, w}.str());
  const PoolWindow win = region_window(ap_factor, h, w);
  const std::size_t oh = h / win.kernel_h, ow = w / win.kernel_w;
  if (oh < 1 || ow < 1) throw InvalidArgument("region_pool: degenerate output grid");
  RegionGrid<T> g;
  g.regions = l2_normalize(avg_pool2d(f, win), 1, T(1e-12));
  g.valid = Mask(Shape{n, 1, oh, ow});
  const std::size_t area = win.kernel_h * win.kernel_w;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t cnt = 0;
        for (std::size_t i = 0; i < win.kernel_h; ++i)
          for (std::size_t j = 0; j < win.kernel_w; ++j)
            cnt += validity[(b * h + y * win.kernel_h + i) * w + x * win.kernel_w + j] ? 1 : 0;
        g.valid[(b * oh + y) * ow + x] = 2 * cnt >= area ? 1 : 0;
      }
  return g;
}

// Region InfoNCE between the current grid and the warped previous grid: the
// aligned region is the positive, the other valid regions of the same image
// are negatives. Images with fewer than two valid regions contribute 0.
template <typename T>
Tensor<T> temporal_contrastive_loss(const RegionGrid<T>& cur, const RegionGrid<T>& prev, double tau) {
  detail::require_tau(tau);
  const Tensor<T>& a = cur.regions;
  const Tensor<T>& b = prev.regions;
  detail::require_rank(a, 4, "temporal_contrastive_loss", "current grid");
  detail::require_same_shape(a, b, "temporal_contrastive_loss");
  if (cur.valid.shape != prev.valid.shape || cur.valid.shape != Shape{a.dim(0), 1, a.dim(2), a.dim(3)})
    throw InvalidArgument("temporal_contrastive_loss: validity grids do not match");
  const std::size_t n = a.dim(0), D = a.dim(1), R = a.dim(2) * a.dim(3);
  const T inv_tau = static_cast<T>(1.0 / tau);

  // For each image: the valid region indices and the coefficient matrix.
  std::vector<std::vector<std::size_t>> valid(n);
  std::vector<std::vector<T>> coef(n);
  T total = 0;
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t r = 0; r < R; ++r)
      if (cur.valid[img * R + r] && prev.valid[img * R + r]) valid[img].push_back(r);
    const auto& V = valid[img];
    const std::size_t m = V.size();
    if (m < 2) {
      valid[img].clear();
      continue;
    }
    coef[img].assign(m * m, T(0));
    std::vector<T> s(m);
    for (std::size_t i = 0; i < m; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        T dot = 0;
        for (std::size_t c = 0; c < D; ++c) dot += a[(img * D + c) * R + V[i]] * b[(img * D + c) * R + V[j]];
        s[j] = dot * inv_tau;
        mx = std::max(mx, s[j]);
      }
      T z = 0;
      for (std::size_t j = 0; j < m; ++j) z += std::exp(s[j] - mx);
      const T lse = mx + std::log(z);
      total += lse - s[i];
      for (std::size_t j = 0; j < m; ++j) coef[img][i * m + j] = std::exp(s[j] - lse) - (i == j ? T(1) : T(0));
    }
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  if (grad_enabled({&a, &b})) {
    record_op(out, [a, b, out, valid = std::move(valid), coef = std::move(coef), n, D, R, inv_tau]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] * inv_tau;
      for (std::size_t img = 0; img < n; ++img) {
        const auto& V = valid[img];
        const std::size_t m = V.size();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const T c = coef[img][i * m + j] * g;
            for (std::size_t k = 0; k < D; ++k) {
              const std::size_t ia = (img * D + k) * R + V[i], jb = (img * D + k) * R + V[j];
              if (a.requires_grad()) a.grad()[ia] += c * b[jb];
              if (b.requires_grad()) b.grad()[jb] += c * a[ia];
            }
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image-level contrastive loss (NT-Xent)
// ---------------------------------------------------------------------------

// u, v: N×D unit rows, row i of u paired with row i of v. Each of the 2N rows
// is an anchor whose positive is its pair and whose negatives are the other
// 2N-2 rows. Returns the mean over anchors.
template <typename T>
Tensor<T> nt_xent(const Tensor<T>& u, const Tensor<T>& v, double tau) {
  detail::require_tau(tau);
  detail::require_rank(u, 2, "nt_xent", "u");
  detail::require_same_shape(u, v, "nt_xent");
  const std::size_t N = u.dim(0), D = u.dim(1), M = 2 * N;
  if (N < 2) throw InvalidArgument("image contrastive loss needs at least 2 pairs");
  const T inv_tau = static_cast<T>(1.0 / tau);
  auto row = [&](std::size_t i) { return i < N ? u.data() + i * D : v.data() + (i - N) * D; };
  std::vector<T> coef(M * M, T(0));
  std::vector<T> s(M);
  T total = 0;
  for (std::size_t i = 0; i < M; ++i) {
    const std::size_t pos = (i + N) % M;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < M; ++j) {
      if (j == i) continue;
      T dot = 0;
      for (std::size_t k = 0; k < D; ++k) dot += row(i)[k] * row(j)[k];
      s[j] = dot * inv_tau;
      mx = std::max(mx, s[j]);
    }
    T z = 0;
    for (std::size_t j = 0; j < M; ++j)
      if (j != i) z += std::exp(s[j] - mx);
    const T lse = mx + std::log(z);
    total += lse - s[pos];
    for (std::size_t j = 0; j < M; ++j)
      if (j != i) coef[i * M + j] = std::exp(s[j] - lse) - (j == pos ? T(1) : T(0));
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(M));
  if (grad_enabled({&u, &v})) {
    record_op(out, [u, v, out, coef = std::move(coef), N, D, M, inv_tau]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] * inv_tau / static_cast<T>(M);
      auto val = [&](std::size_t i, std::size_t k) { return i < N ? u[i * D + k] : v[(i - N) * D + k]; };
      auto add_grad = [&](std::size_t i, std::size_t k, T x) {
        if (i < N) {
          if (u.requires_grad()) u.grad()[i * D + k] += x;
        } else if (v.requires_grad()) {
          v.grad()[(i - N) * D + k] += x;
        }
      };
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < M; ++j) {
          const T c = coef[i * M + j] * g;
          if (c == T(0)) continue;
          for (std::size_t k = 0; k < D; ++k) {
            add_grad(i, k, c * val(j, k));
            add_grad(j, k, c * val(i, k));
          }
        }
    });
  }
  return out;
}

// Global-average-pools each view's embeddings (N×D×H×W), normalizes, and
// applies NT-Xent.
template <typename T>
Tensor<T> image_contrastive_loss(const Tensor<T>& z_view1, const Tensor<T>& z_view2, double tau) {
  detail::require_rank(z_view1, 4, "image_contrastive_loss", "view 1");
  detail::require_same_shape(z_view1, z_view2, "image_contrastive_loss");
  if (z_view1.dim(0) < 2) throw InvalidArgument("image contrastive loss needs a batch of at least 2");
  detail::require_tau(tau);
  return nt_xent(l2_normalize(global_avg_pool(z_view1), 1, T(1e-12)),
                 l2_normalize(global_avg_pool(z_view2), 1, T(1e-12)), tau);
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_seg, const Tensor<T>& l_aux, const LossWeights& w) {
  if (w.variant == Variant::none) return l_seg;
  return add(l_seg, scale(l_aux, static_cast<T>(w.lambda)));
}

}  // namespace vcas
