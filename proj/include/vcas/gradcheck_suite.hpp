#pragma once

// Finite-difference checks of every differentiable op and of the two combined
// objectives (segmentation + prototype loss, segmentation + temporal loss),
// each over many random instances.

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vcas/gradcheck.hpp"
#include "vcas/losses.hpp"
#include "vcas/model.hpp"
#include "vcas/ops.hpp"
#include "vcas/random.hpp"

namespace vcas {

struct GradCase {
  std::string name;
  // Builds one random instance and checks it.
  std::function<GradCheckReport(Rng&, const GradCheckOptions&)> run;
};

struct GradCaseResult {
  std::string name;
  std::size_t instances = 0, failures = 0;
  double max_rel_error = 0;
  double seconds = 0;
  std::string first_failure;
};

namespace gc {

inline Tensor<double> uniform(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(static_cast<long>(lo), static_cast<long>(hi)));
}

// Scalarizes a tensor with fixed random weights.
inline Tensor<double> weigh(const Tensor<double>& y, const Tensor<double>& w) { return sum(mul(y, w)); }

inline LabelMap random_labels(Shape s, Rng& rng, int lo, int hi) {
  LabelMap m(std::move(s));
  for (auto& v : m.values) v = static_cast<int>(rng.uniform_int(lo, hi));
  return m;
}

// Coordinates whose fractional parts stay away from the bilinear kinks.
inline double safe_coord(Rng& rng, std::size_t n) {
  const double base = static_cast<double>(rng.uniform_int(0, static_cast<long>(n) - 2));
  return base + rng.uniform(0.05, 0.95);
}

inline Tensor<double> safe_flow(std::size_t n, std::size_t h, std::size_t w, Rng& rng) {
  Tensor<double> flow(Shape{n, 2, h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        flow[((b * 2) * h + y) * w + x] = safe_coord(rng, w) - static_cast<double>(x);
        flow[((b * 2 + 1) * h + y) * w + x] = safe_coord(rng, h) - static_cast<double>(y);
      }
  return flow;
}

// Same as relu but its backward passes the gradient through unchanged for
// negative inputs as well: a deliberately wrong op for fault injection.
inline Tensor<double> faulty_relu(const Tensor<double>& x) {
  Tensor<double> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0 ? x[i] : 0.0;
  if (grad_enabled({&x})) {
    record_op(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

inline std::uint64_t name_tag(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

}  // namespace gc

inline std::vector<GradCase> gradient_cases(bool inject_fault = false) {
  using gc::pick;
  using gc::uniform;
  using gc::weigh;
  std::vector<GradCase> cases;

  cases.push_back({"add_mul_scale", [](Rng& rng, const GradCheckOptions& o) {
                     const Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
                     auto a = uniform(s, rng), b = uniform(s, rng), r = uniform(s, rng);
                     const double k = rng.uniform(-2, 2);
                     return gradient_check([&] { return weigh(add(mul(a, b), scale(a, k)), r); }, {a, b}, o);
                   }});
  cases.push_back({"sum_mean", [](Rng& rng, const GradCheckOptions& o) {
                     auto a = uniform(Shape{pick(rng, 1, 5), pick(rng, 1, 5)}, rng);
                     return gradient_check([&] { return add(sum(mul(a, a)), scale(mean(a), 3.0)); }, {a}, o);
                   }});
  cases.push_back({"concat_channels", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
                     auto a = uniform(Shape{n, pick(rng, 1, 3), h, w}, rng);
                     auto b = uniform(Shape{n, pick(rng, 1, 3), h, w}, rng);
                     auto r = uniform(Shape{n, a.dim(1) + b.dim(1), h, w}, rng);
                     return gradient_check([&] { return weigh(concat_channels(a, b), r); }, {a, b}, o);
                   }});
  cases.push_back({"global_avg_pool", [](Rng& rng, const GradCheckOptions& o) {
                     auto x = uniform(Shape{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng);
                     auto r = uniform(Shape{x.dim(0), x.dim(1)}, rng);
                     return gradient_check([&] { return weigh(global_avg_pool(x), r); }, {x}, o);
                   }});
  cases.push_back({"conv2d", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t k = pick(rng, 1, 3);
                     const int stride = static_cast<int>(pick(rng, 1, 2)), pad = static_cast<int>(pick(rng, 0, 1));
                     auto x = uniform(Shape{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, k, 6), pick(rng, k, 6)}, rng);
                     auto w = uniform(Shape{pick(rng, 1, 3), x.dim(1), k, k}, rng);
                     auto b = uniform(Shape{w.dim(0)}, rng);
                     const auto y = conv2d(x, w, b, stride, pad);
                     auto r = uniform(y.shape(), rng);
                     return gradient_check([&] { return weigh(conv2d(x, w, b, stride, pad), r); }, {x, w, b}, o);
                   }});
  cases.push_back({"relu", [inject_fault](Rng& rng, const GradCheckOptions& o) {
                     auto x = uniform(Shape{pick(rng, 1, 3), pick(rng, 2, 6)}, rng);
                     for (auto& v : x.values())
                       if (std::abs(v) < 1e-3) v = v < 0 ? -0.5 : 0.5;
                     auto r = uniform(x.shape(), rng);
                     return gradient_check(
                         [&] { return weigh(inject_fault ? gc::faulty_relu(x) : relu(x), r); }, {x}, o);
                   }});
  cases.push_back({"group_norm", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t groups = pick(rng, 1, 3), per = pick(rng, 1, 2);
                     auto x = uniform(Shape{pick(rng, 1, 2), groups * per, pick(rng, 1, 3), pick(rng, 2, 3)}, rng);
                     auto g = uniform(Shape{x.dim(1)}, rng, 0.5, 1.5), b = uniform(Shape{x.dim(1)}, rng);
                     auto r = uniform(x.shape(), rng);
                     return gradient_check(
                         [&] { return weigh(group_norm(x, static_cast<int>(groups), g, b), r); }, {x, g, b}, o);
                   }});
  cases.push_back({"softmax", [](Rng& rng, const GradCheckOptions& o) {
                     auto x = uniform(Shape{pick(rng, 1, 2), pick(rng, 2, 5), pick(rng, 1, 3)}, rng, -3, 3);
                     const std::size_t axis = pick(rng, 0, 2);
                     auto r = uniform(x.shape(), rng);
                     return gradient_check([&] { return weigh(softmax(x, axis), r); }, {x}, o);
                   }});
  cases.push_back({"bilinear_sample", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
                     auto x = uniform(Shape{n, pick(rng, 1, 3), h, w}, rng);
                     const std::size_t oh = pick(rng, 1, 4), ow = pick(rng, 1, 4);
                     Tensor<double> coords(Shape{n, 2, oh, ow});
                     for (std::size_t b = 0; b < n; ++b)
                       for (std::size_t p = 0; p < oh * ow; ++p) {
                         coords[(b * 2) * oh * ow + p] = gc::safe_coord(rng, w);
                         coords[(b * 2 + 1) * oh * ow + p] = gc::safe_coord(rng, h);
                       }
                     auto r = uniform(Shape{n, x.dim(1), oh, ow}, rng);
                     return gradient_check([&] { return weigh(bilinear_sample(x, coords).output, r); }, {x}, o);
                   }});
  cases.push_back({"avg_pool2d", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t k = pick(rng, 1, 3), s = pick(rng, 1, 3);
                     auto x = uniform(Shape{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, k, 6), pick(rng, k, 6)}, rng);
                     const auto y = avg_pool2d(x, PoolWindow{k, k, s, s});
                     auto r = uniform(y.shape(), rng);
                     return gradient_check([&] { return weigh(avg_pool2d(x, PoolWindow{k, k, s, s}), r); }, {x}, o);
                   }});
  cases.push_back({"l2_normalize", [](Rng& rng, const GradCheckOptions& o) {
                     auto x = uniform(Shape{pick(rng, 1, 4), pick(rng, 2, 5)}, rng);
                     auto r = uniform(x.shape(), rng);
                     return gradient_check([&] { return weigh(l2_normalize(x, 1, 1e-12), r); }, {x}, o);
                   }});
  cases.push_back({"class_distances", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t C = pick(rng, 1, 4), D = pick(rng, 1, 4);
                     auto m = uniform(Shape{pick(rng, 1, 2), D, pick(rng, 1, 3), pick(rng, 1, 3)}, rng);
                     ClassStats<double> st{uniform(Shape{C, D}, rng), uniform(Shape{C}, rng, -0.5, 0.5),
                                           uniform(Shape{1}, rng)};
                     auto r = uniform(Shape{m.dim(0), C + 1, m.dim(2), m.dim(3)}, rng);
                     return gradient_check([&] { return weigh(class_distances(m, st), r); },
                                           {m, st.mu, st.log_sigma, st.gamma}, o);
                   }});
  cases.push_back({"seg_cross_entropy", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), k = pick(rng, 2, 5), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
                     auto d = uniform(Shape{n, k, h, w}, rng, -2, 2);
                     auto t = gc::random_labels(Shape{n, h, w}, rng, 1, static_cast<int>(k));
                     Mask ig(Shape{n, h, w});
                     for (auto& v : ig.values) v = rng.bernoulli(0.2);
                     ig[0] = 0;
                     return gradient_check([&] { return seg_cross_entropy(class_probabilities(d), t, ig); }, {d}, o);
                   }});
  cases.push_back({"seg_cross_entropy_logits", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), k = pick(rng, 2, 5), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
                     auto d = uniform(Shape{n, k, h, w}, rng, -2, 2);
                     auto t = gc::random_labels(Shape{n, h, w}, rng, 1, static_cast<int>(k));
                     Mask ig(Shape{n, h, w});
                     for (auto& v : ig.values) v = rng.bernoulli(0.2);
                     ig[0] = 0;
                     return gradient_check([&] { return seg_cross_entropy_logits(d, t, ig); }, {d}, o);
                   }});
  cases.push_back({"masked_average_pool", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
                     auto z = uniform(Shape{n, pick(rng, 1, 4), h, w}, rng);
                     auto lab = gc::random_labels(Shape{n, h, w}, rng, 0, 3);
                     lab[0] = 1;
                     const auto y = masked_average_pool(z, lab);
                     auto r = uniform(y.shape(), rng);
                     return gradient_check([&] { return weigh(extract_prototypes(z, lab).vectors, r); }, {z}, o);
                   }});
  cases.push_back({"prototype_contrastive_loss", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4), D = pick(rng, 2, 4);
                     auto z = uniform(Shape{n, D, h, w}, rng);
                     auto lab = gc::random_labels(Shape{n, h, w}, rng, 1, 3);
                     MemoryQueue<double> q(pick(rng, 1, 6));
                     const std::size_t pushes = pick(rng, 0, 8);
                     for (std::size_t i = 0; i < pushes; ++i) {
                       std::vector<double> v(D);
                       double nn = 0;
                       for (auto& e : v) {
                         e = rng.uniform(-1, 1);
                         nn += e * e;
                       }
                       for (auto& e : v) e /= std::sqrt(nn);
                       q.push({v, static_cast<int>(rng.uniform_int(1, 3))});
                     }
                     const double tau = rng.uniform(0.1, 1.0);
                     return gradient_check(
                         [&] { return prototype_contrastive_loss(extract_prototypes(z, lab), &q, tau); }, {z}, o);
                   }});
  cases.push_back({"warp_features", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
                     auto f = uniform(Shape{n, pick(rng, 1, 3), h, w}, rng);
                     auto flow = gc::safe_flow(n, h, w, rng);
                     auto r = uniform(f.shape(), rng);
                     return gradient_check([&] { return weigh(warp_features(f, flow).output, r); }, {f}, o);
                   }});
  cases.push_back({"region_pool", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 6), w = pick(rng, 2, 6);
                     auto f = uniform(Shape{n, pick(rng, 1, 3), h, w}, rng);
                     Mask valid(Shape{n, 1, h, w}, 1);
                     const double ap = rng.uniform(0.1, 0.6);
                     const auto g = region_pool(f, valid, ap);
                     auto r = uniform(g.regions.shape(), rng);
                     return gradient_check([&] { return weigh(region_pool(f, valid, ap).regions, r); }, {f}, o);
                   }});
  cases.push_back({"temporal_contrastive_loss", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4), D = pick(rng, 2, 4);
                     auto a = uniform(Shape{n, D, h, w}, rng), b = uniform(Shape{n, D, h, w}, rng);
                     Mask va(Shape{n, 1, h, w}, 1), vb(Shape{n, 1, h, w}, 1);
                     for (auto& v : vb.values) v = rng.bernoulli(0.8);
                     const double tau = rng.uniform(0.1, 1.0);
                     return gradient_check(
                         [&] {
                           RegionGrid<double> ga{l2_normalize(a, 1, 1e-12), va}, gb{l2_normalize(b, 1, 1e-12), vb};
                           return temporal_contrastive_loss(ga, gb, tau);
                         },
                         {a, b}, o);
                   }});
  cases.push_back({"image_contrastive_loss", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 2, 3), D = pick(rng, 2, 4), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
                     auto u = uniform(Shape{n, D, h, w}, rng), v = uniform(Shape{n, D, h, w}, rng);
                     const double tau = rng.uniform(0.1, 1.0);
                     return gradient_check([&] { return image_contrastive_loss(u, v, tau); }, {u, v}, o);
                   }});

  // L_seg + λ L_pcl as a function of the segmentation embeddings, the class
  // statistics and the contrastive embeddings.
  cases.push_back({"combined_prototype_objective", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
                     const std::size_t C = pick(rng, 2, 4), Dm = pick(rng, 2, 4), Dz = pick(rng, 2, 4);
                     auto m = uniform(Shape{n, Dm, h, w}, rng), z = uniform(Shape{n, Dz, h, w}, rng);
                     ClassStats<double> st{uniform(Shape{C, Dm}, rng), uniform(Shape{C}, rng, -0.5, 0.5),
                                           uniform(Shape{1}, rng)};
                     auto t = gc::random_labels(Shape{n, h, w}, rng, 0, static_cast<int>(C) + 1);
                     t[0] = 1;
                     Mask ig(Shape{n, h, w});
                     for (std::size_t i = 0; i < t.size(); ++i) ig[i] = t[i] == 0;
                     MemoryQueue<double> q(8);
                     LossWeights lw{rng.uniform(0.1, 1.0), 0.07, Variant::prototype};
                     return gradient_check(
                         [&] {
                           auto ls = seg_cross_entropy(class_probabilities(class_distances(m, st)), t, ig);
                           auto lp = prototype_contrastive_loss(extract_prototypes(z, t), &q, lw.tau);
                           return total_loss(ls, lp, lw);
                         },
                         {m, z, st.mu, st.log_sigma, st.gamma}, o);
                   }});
  // L_seg + λ L_tcl with warping and region pooling of the contrastive maps.
  cases.push_back({"combined_temporal_objective", [](Rng& rng, const GradCheckOptions& o) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 3, 5), w = pick(rng, 3, 5);
                     const std::size_t C = pick(rng, 2, 4), Dm = pick(rng, 2, 4), Dz = pick(rng, 2, 4);
                     auto m = uniform(Shape{n, Dm, h, w}, rng);
                     auto zt = uniform(Shape{n, Dz, h, w}, rng), zp = uniform(Shape{n, Dz, h, w}, rng);
                     ClassStats<double> st{uniform(Shape{C, Dm}, rng), uniform(Shape{C}, rng, -0.5, 0.5),
                                           uniform(Shape{1}, rng)};
                     auto t = gc::random_labels(Shape{n, h, w}, rng, 1, static_cast<int>(C) + 1);
                     Mask ig(Shape{n, h, w});
                     auto flow = gc::safe_flow(n, h, w, rng);
                     const double ap = rng.uniform(0.2, 0.5);
                     LossWeights lw{rng.uniform(0.1, 1.0), 0.1, Variant::temporal};
                     return gradient_check(
                         [&] {
                           auto ls = seg_cross_entropy(class_probabilities(class_distances(m, st)), t, ig);
                           const auto warped = warp_features(zp, flow);
                           auto lt = temporal_contrastive_loss(region_pool(zt, warped.valid, ap),
                                                               region_pool(warped.output, warped.valid, ap), lw.tau);
                           return total_loss(ls, lt, lw);
                         },
                         {m, zt, zp, st.mu, st.log_sigma, st.gamma}, o);
                   }});
  return cases;
}

inline GradCaseResult run_grad_case(const GradCase& c, std::size_t instances, std::uint64_t seed,
                                    GradCheckOptions opt = {}) {
  GradCaseResult r;
  r.name = c.name;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < instances; ++i) {
    Rng rng = Rng::substream(seed, i, gc::name_tag(c.name));
    opt.seed = seed + i;
    const GradCheckReport rep = c.run(rng, opt);
    ++r.instances;
    r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
    if (!rep.passed) {
      if (r.failures == 0) r.first_failure = "instance " + std::to_string(i) + ": " + rep.message;
      ++r.failures;
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace vcas
