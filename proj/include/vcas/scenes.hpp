#pragma once

// Two-frame synthetic street scenes: appearance, depth, per-pixel class-name
// masks and exact ground-truth flow, written as CAST files plus a JSON
// manifest.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vcas/cast_io.hpp"
#include "vcas/errors.hpp"
#include "vcas/random.hpp"
#include "vcas/tensor.hpp"

namespace vcas {

enum class ShapeKind { circle, square, triangle, cross, ring, bar };
enum class Texture { solid, stripes, checker, dots };

inline std::string to_string(ShapeKind k) {
  static const char* names[] = {"circle", "square", "triangle", "cross", "ring", "bar"};
  return names[static_cast<int>(k)];
}
inline std::string to_string(Texture t) {
  static const char* names[] = {"solid", "stripes", "checker", "dots"};
  return names[static_cast<int>(t)];
}
inline ShapeKind parse_shape_kind(const std::string& s) {
  for (int i = 0; i < 6; ++i)
    if (to_string(static_cast<ShapeKind>(i)) == s) return static_cast<ShapeKind>(i);
  throw InvalidArgument("unknown shape kind '" + s + "'");
}
inline Texture parse_texture(const std::string& s) {
  for (int i = 0; i < 4; ++i)
    if (to_string(static_cast<Texture>(i)) == s) return static_cast<Texture>(i);
  throw InvalidArgument("unknown texture '" + s + "'");
}

using Color = std::array<float, 3>;

// One object class of the vocabulary.
struct ShapeSpec {
  std::string name;
  ShapeKind kind = ShapeKind::square;
  Texture texture = Texture::solid;
  Color color{0.5f, 0.5f, 0.5f};
};

struct LabelPolicy {
  std::vector<std::string> known_classes;
  std::vector<std::string> train_unknown;
  std::vector<std::string> train_ignored;
  std::vector<std::string> test_unknown;
  std::vector<std::string> test_ignored;

  std::size_t num_known() const { return known_classes.size(); }

  void validate() const {
    if (known_classes.empty()) throw InvalidArgument("label policy: known_classes is empty");
    if (test_unknown.empty()) throw InvalidArgument("label policy: test_unknown is empty");
    std::map<std::string, std::string> seen;
    auto add = [&](const std::vector<std::string>& names, const char* set) {
      for (const auto& n : names) {
        auto [it, fresh] = seen.emplace(n, set);
        if (!fresh)
          throw InvalidArgument("label policy: class '" + n + "' is in both " + it->second + " and " + set);
      }
    };
    add(known_classes, "known_classes");
    add(train_unknown, "train_unknown");
    add(train_ignored, "train_ignored");
    add(test_unknown, "test_unknown");
    add(test_ignored, "test_ignored");
  }

  // Every class name mentioned, in set order.
  std::vector<std::string> all_names() const {
    std::vector<std::string> out;
    for (const auto* v : {&known_classes, &train_unknown, &train_ignored, &test_unknown, &test_ignored})
      out.insert(out.end(), v->begin(), v->end());
    return out;
  }
};

// The three background ("stuff") classes are always sky, road, sidewalk.
inline const std::array<std::string, 3>& stuff_classes() {
  static const std::array<std::string, 3> names{"sky", "road", "sidewalk"};
  return names;
}

struct SceneConfig {
  std::size_t height = 64, width = 64;
  std::size_t train_samples = 200, eval_samples = 50;
  std::size_t min_objects = 2, max_objects = 4;
  std::size_t min_size = 14, max_size = 22;  // object bounding box side, pixels
  double max_motion = 3.0;                   // pixels per frame, per axis
  bool fractional_motion = false;
  double noise = 0.02;
  double sky_fraction = 0.3, sidewalk_fraction = 0.2;  // road takes the rest
  std::uint64_t seed = 0;
  std::vector<ShapeSpec> shapes;

  std::size_t num_samples() const { return train_samples + eval_samples; }

  void validate() const {
    if (height == 0 || width == 0 || height % 4 || width % 4)
      throw InvalidArgument("scene size must be positive and divisible by 4, got " + std::to_string(height) + "x" +
                            std::to_string(width));
    if (num_samples() == 0) throw InvalidArgument("scene config: no samples requested");
    if (min_objects > max_objects) throw InvalidArgument("scene config: min_objects > max_objects");
    if (min_size < 3 || min_size > max_size) throw InvalidArgument("scene config: need 3 <= min_size <= max_size");
    if (max_size + 2 * max_motion + 2 > static_cast<double>(std::min(height, width)))
      throw InvalidArgument("scene config: objects do not fit in the frame");
    if (!(max_motion >= 0) || max_motion >= static_cast<double>(std::min(height, width)) / 4)
      throw InvalidArgument("scene config: motion magnitude must be in [0, min(H,W)/4)");
    if (!(noise >= 0)) throw InvalidArgument("scene config: noise must be >= 0");
    if (!(sky_fraction > 0 && sidewalk_fraction > 0 && sky_fraction + sidewalk_fraction < 1))
      throw InvalidArgument("scene config: stuff band fractions must be positive and sum below 1");
    std::set<std::string> names;
    for (const auto& s : shapes) {
      if (!names.insert(s.name).second) throw InvalidArgument("scene config: duplicate shape class " + s.name);
      for (const auto& st : stuff_classes())
        if (s.name == st) throw InvalidArgument("scene config: shape class may not be named " + st);
    }
  }

  const ShapeSpec* find_shape(const std::string& name) const {
    for (const auto& s : shapes)
      if (s.name == name) return &s;
    return nullptr;
  }
};

// Toy vocabulary. cone shares texture and color with barrier (the
// train-unknown / test-unknown pair with a common appearance).
inline std::vector<ShapeSpec> default_shapes() {
  return {
      {"vehicle", ShapeKind::square, Texture::solid, {0.15f, 0.30f, 0.85f}},
      {"sign", ShapeKind::circle, Texture::solid, {0.65f, 0.20f, 0.75f}},
      {"pole", ShapeKind::bar, Texture::solid, {0.95f, 0.85f, 0.20f}},
      {"barrier", ShapeKind::square, Texture::stripes, {1.00f, 0.55f, 0.10f}},
      {"crate", ShapeKind::cross, Texture::checker, {0.55f, 0.35f, 0.15f}},
      {"cone", ShapeKind::circle, Texture::stripes, {1.00f, 0.55f, 0.10f}},
      {"bin", ShapeKind::triangle, Texture::dots, {0.15f, 0.65f, 0.25f}},
      {"debris", ShapeKind::ring, Texture::solid, {0.90f, 0.15f, 0.15f}},
      {"rubble", ShapeKind::circle, Texture::solid, {0.30f, 0.30f, 0.30f}},
  };
}

inline LabelPolicy default_policy() {
  return {{"sky", "road", "sidewalk", "vehicle", "sign", "pole"},
          {"barrier", "crate"},
          {"debris"},
          {"cone", "bin"},
          {"rubble"}};
}

inline SceneConfig default_scene_config() {
  SceneConfig c;
  c.shapes = default_shapes();
  return c;
}

// Policy modes: FD keeps the policy as written; LU keeps only the first
// train-unknown class and moves the others to train_ignored.
inline LabelPolicy policy_for_mode(const LabelPolicy& p, const std::string& mode) {
  if (mode == "FD") return p;
  if (mode == "LU") {
    LabelPolicy q = p;
    if (q.train_unknown.size() > 1) {
      q.train_ignored.insert(q.train_ignored.end(), q.train_unknown.begin() + 1, q.train_unknown.end());
      q.train_unknown.resize(1);
    }
    return q;
  }
  throw InvalidArgument("unknown policy mode '" + mode + "' (expected FD|LU)");
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct Placement {
  std::uint8_t class_id = 0;  // index into the dataset class list (1-based)
  const ShapeSpec* shape = nullptr;
  double x = 0, y = 0;  // top-left of the bounding box
  std::size_t size = 0;
  double depth = 1.0;  // in (0, 1]; larger is closer
};

namespace detail {

// Point-in-shape test in box-local coordinates u, v in [0, s].
inline bool shape_contains(ShapeKind k, double u, double v, double s) {
  const double c = s / 2;
  switch (k) {
    case ShapeKind::square:
      return u >= 0 && u <= s && v >= 0 && v <= s;
    case ShapeKind::circle:
      return (u - c) * (u - c) + (v - c) * (v - c) <= c * c;
    case ShapeKind::ring: {
      const double r2 = (u - c) * (u - c) + (v - c) * (v - c), ri = 0.55 * c;
      return r2 <= c * c && r2 >= ri * ri;
    }
    case ShapeKind::triangle:
      return v >= 0 && v <= s && std::abs(u - c) <= v / 2;
    case ShapeKind::cross: {
      const double a = s / 3;
      const bool in_box = u >= 0 && u <= s && v >= 0 && v <= s;
      return in_box && ((u >= a && u <= 2 * a) || (v >= a && v <= 2 * a));
    }
    case ShapeKind::bar:
      return v >= 0 && v <= s && u >= s / 3 && u <= 2 * s / 3;
  }
  return false;
}

// A pixel belongs to a shape when all four of its corners do.
inline bool pixel_inside(ShapeKind k, double u0, double v0, double s) {
  return shape_contains(k, u0, v0, s) && shape_contains(k, u0 + 1, v0, s) && shape_contains(k, u0, v0 + 1, s) &&
         shape_contains(k, u0 + 1, v0 + 1, s);
}

// Texture multiplier in object-local integer coordinates, so the pattern moves
// rigidly with the object.
inline float texture_gain(Texture t, long u, long v) {
  switch (t) {
    case Texture::solid:
      return 1.0f;
    case Texture::stripes:
      return ((u + v) / 2) % 2 == 0 ? 1.0f : 0.35f;
    case Texture::checker:
      return ((u / 3) + (v / 3)) % 2 == 0 ? 1.0f : 0.45f;
    case Texture::dots:
      return (u % 4 == 1 && v % 4 == 1) || (u % 4 == 2 && v % 4 == 1) ? 0.25f : 1.0f;
  }
  return 1.0f;
}

}  // namespace detail

inline double analytic_area(ShapeKind k, double s) {
  const double c = s / 2;
  switch (k) {
    case ShapeKind::square:
      return s * s;
    case ShapeKind::circle:
      return std::numbers::pi * c * c;
    case ShapeKind::ring:
      return std::numbers::pi * c * c * (1 - 0.55 * 0.55);
    case ShapeKind::triangle:
      return s * s / 2;
    case ShapeKind::cross:
      return 2 * s * (s / 3) - (s / 3) * (s / 3);
    case ShapeKind::bar:
      return s * s / 3;
  }
  return 0;
}

struct Frame {
  Tensor<float> appearance;  // 3×H×W in [0,1]
  Tensor<float> depth;       // 1×H×W in (0,1]
  Mask mask;                 // H×W class ids (1-based into the class list)
};

// Class ids of the stuff classes are 1, 2, 3 (sky, road, sidewalk).
inline Frame render_background(const SceneConfig& cfg) {
  const std::size_t H = cfg.height, W = cfg.width;
  Frame f{Tensor<float>(Shape{3, H, W}), Tensor<float>(Shape{1, H, W}), Mask(Shape{H, W})};
  const auto sky_end = static_cast<std::size_t>(std::lround(cfg.sky_fraction * static_cast<double>(H)));
  const auto walk_end =
      static_cast<std::size_t>(std::lround((cfg.sky_fraction + cfg.sidewalk_fraction) * static_cast<double>(H)));
  for (std::size_t y = 0; y < H; ++y) {
    const float ry = static_cast<float>(y) / static_cast<float>(H);
    std::uint8_t cls;
    Color col;
    float depth;
    if (y < sky_end) {
      cls = 1;
      col = {0.55f + 0.3f * ry, 0.75f + 0.2f * ry, 0.95f};
      depth = 0.05f;
    } else if (y < walk_end) {
      cls = 3;
      depth = 0.1f + 0.35f * ry;
      col = {0.72f, 0.70f, 0.66f};
    } else {
      cls = 2;
      depth = 0.1f + 0.35f * ry;
      col = {0.30f, 0.30f, 0.32f};
    }
    for (std::size_t x = 0; x < W; ++x) {
      // Paving joints on the sidewalk, lane marks on the road.
      float gain = 1.0f;
      if (cls == 3 && x % 8 == 0) gain = 0.8f;
      if (cls == 2 && y == (walk_end + H) / 2 && (x / 4) % 2 == 0) gain = 2.5f;
      for (std::size_t c = 0; c < 3; ++c) f.appearance[(c * H + y) * W + x] = std::min(1.0f, col[c] * gain);
      f.depth[y * W + x] = depth;
      f.mask[y * W + x] = cls;
    }
  }
  return f;
}

// Paints objects far-to-near over the background, so nearer objects own the
// pixels where they overlap. Placements must lie within the frame.
inline Frame render_frame(const std::vector<Placement>& objects, const SceneConfig& cfg) {
  Frame f = render_background(cfg);
  const std::size_t H = cfg.height, W = cfg.width;
  std::vector<const Placement*> order;
  for (const auto& p : objects) order.push_back(&p);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->depth < b->depth; });
  for (const Placement* p : order) {
    if (!p->shape) throw InvalidArgument("render_frame: placement without a shape");
    const double s = static_cast<double>(p->size);
    const long x0 = static_cast<long>(std::floor(p->x)), y0 = static_cast<long>(std::floor(p->y));
    for (long y = y0; y <= y0 + static_cast<long>(p->size) + 1; ++y)
      for (long x = x0; x <= x0 + static_cast<long>(p->size) + 1; ++x) {
        if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H)) continue;
        const double u = static_cast<double>(x) - p->x, v = static_cast<double>(y) - p->y;
        if (!detail::pixel_inside(p->shape->kind, u, v, s)) continue;
        const float gain = detail::texture_gain(p->shape->texture, static_cast<long>(std::floor(u + 1e-9)),
                                                static_cast<long>(std::floor(v + 1e-9)));
        const std::size_t i = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
        for (std::size_t c = 0; c < 3; ++c) f.appearance[c * H * W + i] = p->shape->color[c] * gain;
        f.depth[i] = static_cast<float>(p->depth);
        f.mask[i] = p->class_id;
      }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Samples and datasets
// ---------------------------------------------------------------------------

struct SceneSample {
  Tensor<float> frame_t, frame_tm1;  // 3×H×W
  Tensor<float> depth_t, depth_tm1;  // 1×H×W
  Mask mask_t, mask_tm1;             // H×W class ids
  Tensor<float> flow;                // 2×H×W: (dx, dy) from frame t to frame t-1

  std::size_t height() const { return mask_t.shape[0]; }
  std::size_t width() const { return mask_t.shape[1]; }
};

inline const std::array<const char*, 7>& sample_fields() {
  static const std::array<const char*, 7> f{"frame_t", "frame_tm1", "depth_t", "depth_tm1",
                                            "mask_t",  "mask_tm1",  "flow"};
  return f;
}

struct SampleEntry {
  std::size_t index = 0;
  std::string split;  // "train" or "eval"
  std::map<std::string, std::string> files;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  std::vector<std::string> classes;  // id = position + 1
  LabelPolicy policy;
  std::vector<SampleEntry> samples;
  std::filesystem::path root;  // directory holding the files (not serialized)

  std::size_t size() const { return samples.size(); }

  int class_id(const std::string& name) const {
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == name) return static_cast<int>(i) + 1;
    throw InvalidArgument("class '" + name + "' is not in the dataset class list");
  }

  std::vector<std::size_t> indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (const auto& s : samples)
      if (s.split == split) out.push_back(s.index);
    return out;
  }
};

inline constexpr int kDatasetVersion = 1;

inline nlohmann::ordered_json policy_to_json(const LabelPolicy& p) {
  nlohmann::ordered_json j;
  j["known_classes"] = p.known_classes;
  j["train_unknown"] = p.train_unknown;
  j["train_ignored"] = p.train_ignored;
  j["test_unknown"] = p.test_unknown;
  j["test_ignored"] = p.test_ignored;
  return j;
}

inline LabelPolicy policy_from_json(const nlohmann::json& j) {
  LabelPolicy p;
  p.known_classes = j.at("known_classes").get<std::vector<std::string>>();
  p.train_unknown = j.at("train_unknown").get<std::vector<std::string>>();
  p.train_ignored = j.at("train_ignored").get<std::vector<std::string>>();
  p.test_unknown = j.at("test_unknown").get<std::vector<std::string>>();
  p.test_ignored = j.at("test_ignored").get<std::vector<std::string>>();
  return p;
}

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.classes.size(); ++i) classes.push_back({{"id", i + 1}, {"name", m.classes[i]}});
  j["classes"] = classes;
  j["policy"] = policy_to_json(m.policy);
  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  for (const auto& s : m.samples) {
    nlohmann::ordered_json e;
    e["index"] = s.index;
    e["split"] = s.split;
    nlohmann::ordered_json files;
    for (const char* f : sample_fields())
      if (auto it = s.files.find(f); it != s.files.end()) files[f] = it->second;
    e["files"] = files;
    samples.push_back(e);
  }
  j["samples"] = samples;
  return j;
}

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream f(path);
  if (!f) throw IoError("cannot open dataset manifest " + path.string());
  DatasetManifest m;
  m.root = dir;
  try {
    nlohmann::json j;
    f >> j;
    m.version = j.at("version").get<int>();
    if (m.version != kDatasetVersion) throw FormatError(path.string() + ": unsupported version");
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& c : j.at("classes")) {
      if (c.at("id").get<std::size_t>() != m.classes.size() + 1)
        throw FormatError(path.string() + ": class ids must be contiguous from 1");
      m.classes.push_back(c.at("name").get<std::string>());
    }
    m.policy = policy_from_json(j.at("policy"));
    for (const auto& s : j.at("samples")) {
      SampleEntry e;
      e.index = s.at("index").get<std::size_t>();
      e.split = s.at("split").get<std::string>();
      e.files = s.at("files").get<std::map<std::string, std::string>>();
      if (e.index != m.samples.size()) throw FormatError(path.string() + ": sample indices must be contiguous");
      m.samples.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  m.policy.validate();
  return m;
}

inline SceneSample load_sample(const DatasetManifest& m, std::size_t index) {
  if (index >= m.size())
    throw RangeError("sample index " + std::to_string(index) + " out of range (dataset has " +
                     std::to_string(m.size()) + ")");
  const auto& e = m.samples[index];
  auto file = [&](const char* field) {
    auto it = e.files.find(field);
    if (it == e.files.end())
      throw FormatError("sample " + std::to_string(index) + " has no '" + field + "' file");
    return m.root / it->second;
  };
  SceneSample s;
  s.frame_t = to_tensor<float>(read_cast(file("frame_t")));
  s.frame_tm1 = to_tensor<float>(read_cast(file("frame_tm1")));
  s.depth_t = to_tensor<float>(read_cast(file("depth_t")));
  s.depth_tm1 = to_tensor<float>(read_cast(file("depth_tm1")));
  s.mask_t = to_mask(read_cast(file("mask_t")));
  s.mask_tm1 = to_mask(read_cast(file("mask_tm1")));
  // Flow is optional for datasets used only by the non-temporal variants.
  if (e.files.count("flow")) {
    s.flow = to_tensor<float>(read_cast(file("flow")));
  } else {
    s.flow = Tensor<float>(Shape{2, s.mask_t.shape[0], s.mask_t.shape.rank() == 2 ? s.mask_t.shape[1] : 1});
  }
  const std::size_t H = s.mask_t.shape[0], W = s.mask_t.shape.rank() == 2 ? s.mask_t.shape[1] : 0;
  if (s.mask_t.shape.rank() != 2 || s.frame_t.shape() != Shape{3, H, W} || s.frame_tm1.shape() != Shape{3, H, W} ||
      s.depth_t.shape() != Shape{1, H, W} || s.depth_tm1.shape() != Shape{1, H, W} ||
      s.mask_tm1.shape != Shape{H, W} || s.flow.shape() != Shape{2, H, W})
    throw FormatError("sample " + std::to_string(index) + " has inconsistent field shapes");
  return s;
}

// True when every sample lists a flow file that exists on disk.
inline bool has_flow(const DatasetManifest& m) {
  for (const auto& e : m.samples) {
    auto it = e.files.find("flow");
    if (it == e.files.end() || !std::filesystem::exists(m.root / it->second)) return false;
  }
  return true;
}

namespace detail {

inline std::string sample_file(std::size_t index, const char* field) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return std::string(buf) + "_" + field + ".cast";
}

// Axis-aligned boxes grown by one pixel of clearance.
inline bool boxes_overlap(double ax, double ay, double as, double bx, double by, double bs) {
  return ax < bx + bs + 1 && bx < ax + as + 1 && ay < by + bs + 1 && by < ay + as + 1;
}

}  // namespace detail

// Object placements for one sample in both frames, non-overlapping in each.
struct ScenePlan {
  std::vector<Placement> frame_t, frame_tm1;
};

inline ScenePlan plan_sample(const SceneConfig& cfg, const std::vector<std::string>& classes,
                             const std::vector<std::string>& pool, const std::string& guaranteed, Rng& rng) {
  ScenePlan plan;
  const auto count = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long>(cfg.min_objects), static_cast<long>(cfg.max_objects)));
  const double m = cfg.max_motion;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string& name =
        i == 0 && !guaranteed.empty() ? guaranteed : pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(pool.size()) - 1))];
    const ShapeSpec* spec = cfg.find_shape(name);
    std::uint8_t id = 0;
    for (std::size_t c = 0; c < classes.size(); ++c)
      if (classes[c] == name) id = static_cast<std::uint8_t>(c + 1);
    // The first object gets many more attempts so that guaranteed classes
    // are always placed.
    const int attempts = i == 0 ? 1000 : 50;
    for (int a = 0; a < attempts; ++a) {
      const auto size = static_cast<std::size_t>(
          rng.uniform_int(static_cast<long>(cfg.min_size), static_cast<long>(cfg.max_size)));
      const double s = static_cast<double>(size);
      double dx, dy;
      if (cfg.fractional_motion) {
        dx = rng.uniform(-m, m);
        dy = rng.uniform(-m, m);
      } else {
        const long mi = static_cast<long>(std::floor(m));
        dx = static_cast<double>(rng.uniform_int(-mi, mi));
        dy = static_cast<double>(rng.uniform_int(-mi, mi));
      }
      // Keep both positions (and a one-pixel rasterization margin) inside.
      const double lo_x = std::max(0.0, -dx), hi_x = static_cast<double>(cfg.width) - s - 1 - std::max(0.0, dx);
      const double lo_y = std::max(0.0, -dy), hi_y = static_cast<double>(cfg.height) - s - 1 - std::max(0.0, dy);
      if (hi_x < lo_x || hi_y < lo_y) continue;
      double x, y;
      if (cfg.fractional_motion) {
        x = rng.uniform(lo_x, hi_x);
        y = rng.uniform(lo_y, hi_y);
      } else {
        x = static_cast<double>(rng.uniform_int(static_cast<long>(std::ceil(lo_x)), static_cast<long>(std::floor(hi_x))));
        y = static_cast<double>(rng.uniform_int(static_cast<long>(std::ceil(lo_y)), static_cast<long>(std::floor(hi_y))));
      }
      bool clash = false;
      for (std::size_t k = 0; k < plan.frame_t.size() && !clash; ++k) {
        const auto& pt = plan.frame_t[k];
        const auto& pp = plan.frame_tm1[k];
        const double ps = static_cast<double>(pt.size);
        clash = detail::boxes_overlap(x, y, s, pt.x, pt.y, ps) || detail::boxes_overlap(x + dx, y + dy, s, pp.x, pp.y, ps);
      }
      if (clash) continue;
      Placement p{id, spec, x, y, size, 1.0};
      plan.frame_t.push_back(p);
      p.x += dx;
      p.y += dy;
      plan.frame_tm1.push_back(p);
      break;
    }
  }
  // Depth by a random distance rank: nearest 1.0, farthest 0.5.
  const std::size_t k = plan.frame_t.size();
  std::vector<std::size_t> rank(k);
  for (std::size_t i = 0; i < k; ++i) rank[i] = i;
  for (std::size_t i = k; i > 1; --i)
    std::swap(rank[i - 1], rank[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);
  for (std::size_t i = 0; i < k; ++i) {
    const double d = 1.0 - 0.5 * static_cast<double>(rank[i]) / static_cast<double>(std::max<std::size_t>(k, 1));
    plan.frame_t[i].depth = plan.frame_tm1[i].depth = d;
  }
  return plan;
}

inline void add_noise(Tensor<float>& img, double sigma, Rng& rng) {
  if (sigma <= 0) return;
  for (auto& v : img.values()) v = std::clamp(v + static_cast<float>(rng.normal(0.0, sigma)), 0.0f, 1.0f);
}

// Renders sample `index` of a dataset; a pure function of (cfg, policy,
// classes, index).
inline SceneSample make_sample(const SceneConfig& cfg, const LabelPolicy& policy,
                               const std::vector<std::string>& classes, std::size_t index) {
  const bool train = index < cfg.train_samples;
  std::vector<std::string> known_objects, pool;
  for (const auto& n : policy.known_classes)
    if (cfg.find_shape(n)) known_objects.push_back(n);
  pool = known_objects;
  for (const auto* set : train ? std::array{&policy.train_unknown, &policy.train_ignored}
                               : std::array{&policy.test_unknown, &policy.test_ignored})
    for (const auto& n : *set)
      if (cfg.find_shape(n)) pool.push_back(n);
  const std::size_t local = train ? index : index - cfg.train_samples;
  const std::string guaranteed = known_objects.empty() ? "" : known_objects[local % known_objects.size()];

  Rng rng = Rng::substream(cfg.seed, index, 0x7363656e65ULL);
  ScenePlan plan = pool.empty() || cfg.max_objects == 0 ? ScenePlan{} : plan_sample(cfg, classes, pool, guaranteed, rng);
  Frame ft = render_frame(plan.frame_t, cfg), fp = render_frame(plan.frame_tm1, cfg);

  const std::size_t H = cfg.height, W = cfg.width;
  Tensor<float> flow(Shape{2, H, W});
  // Objects never overlap, so every object pixel of frame t belongs to
  // exactly one placement.
  for (std::size_t k = 0; k < plan.frame_t.size(); ++k) {
    const auto& a = plan.frame_t[k];
    const auto& b = plan.frame_tm1[k];
    const double s = static_cast<double>(a.size);
    const long x0 = static_cast<long>(std::floor(a.x)), y0 = static_cast<long>(std::floor(a.y));
    for (long y = y0; y <= y0 + static_cast<long>(a.size) + 1; ++y)
      for (long x = x0; x <= x0 + static_cast<long>(a.size) + 1; ++x) {
        if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H)) continue;
        if (!detail::pixel_inside(a.shape->kind, static_cast<double>(x) - a.x, static_cast<double>(y) - a.y, s))
          continue;
        const std::size_t i = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
        flow[i] = static_cast<float>(b.x - a.x);
        flow[H * W + i] = static_cast<float>(b.y - a.y);
        if (!cfg.fractional_motion) continue;
        // Sub-pixel shifts: the frame t-1 footprint also covers the nearest
        // pixel of every moved frame-t pixel, so nearest lookups along the
        // flow stay on the object.
        const long qx = std::lround(static_cast<double>(x) + b.x - a.x);
        const long qy = std::lround(static_cast<double>(y) + b.y - a.y);
        if (qx < 0 || qy < 0 || qx >= static_cast<long>(W) || qy >= static_cast<long>(H)) continue;
        const std::size_t q = static_cast<std::size_t>(qy) * W + static_cast<std::size_t>(qx);
        if (fp.mask[q] == b.class_id) continue;
        const float gain = detail::texture_gain(b.shape->texture, static_cast<long>(std::floor(qx - b.x + 1e-9)),
                                                static_cast<long>(std::floor(qy - b.y + 1e-9)));
        for (std::size_t c = 0; c < 3; ++c) fp.appearance[c * H * W + q] = b.shape->color[c] * gain;
        fp.depth[q] = static_cast<float>(b.depth);
        fp.mask[q] = b.class_id;
      }
  }
  add_noise(ft.appearance, cfg.noise, rng);
  add_noise(fp.appearance, cfg.noise, rng);
  return {ft.appearance, fp.appearance, ft.depth, fp.depth, ft.mask, fp.mask, flow};
}

// Dataset class list: the policy's classes in policy order.
inline std::vector<std::string> dataset_classes(const LabelPolicy& policy) { return policy.all_names(); }

inline void check_vocabulary(const SceneConfig& cfg, const LabelPolicy& policy) {
  for (const auto& n : policy.all_names()) {
    const bool stuff = std::find(stuff_classes().begin(), stuff_classes().end(), n) != stuff_classes().end();
    if (!stuff && !cfg.find_shape(n))
      throw InvalidArgument("label policy names class '" + n + "' which is neither stuff nor a configured shape");
  }
  for (const auto& st : stuff_classes()) {
    const auto names = policy.all_names();
    if (std::find(names.begin(), names.end(), st) == names.end())
      throw InvalidArgument("label policy does not classify stuff class '" + st + "'");
  }
  if (policy.all_names().size() > 255) throw InvalidArgument("too many classes for an 8-bit mask");
}

inline DatasetManifest generate_dataset(const SceneConfig& cfg, const LabelPolicy& policy,
                                        const std::filesystem::path& out_dir) {
  cfg.validate();
  policy.validate();
  check_vocabulary(cfg, policy);
  // Stuff ids must be 1..3 for the background renderer.
  const auto classes = dataset_classes(policy);
  for (std::size_t i = 0; i < 3; ++i)
    if (classes[i] != stuff_classes()[i])
      throw InvalidArgument("the first known classes must be sky, road, sidewalk in that order");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.version = kDatasetVersion;
  m.seed = cfg.seed;
  m.classes = classes;
  m.policy = policy;
  m.root = out_dir;
  for (std::size_t i = 0; i < cfg.num_samples(); ++i) {
    SceneSample s = make_sample(cfg, policy, classes, i);
    SampleEntry e;
    e.index = i;
    e.split = i < cfg.train_samples ? "train" : "eval";
    for (const char* f : sample_fields()) e.files[f] = detail::sample_file(i, f);
    write_cast(out_dir / e.files["frame_t"], s.frame_t);
    write_cast(out_dir / e.files["frame_tm1"], s.frame_tm1);
    write_cast(out_dir / e.files["depth_t"], s.depth_t);
    write_cast(out_dir / e.files["depth_tm1"], s.depth_tm1);
    write_cast(out_dir / e.files["mask_t"], s.mask_t);
    write_cast(out_dir / e.files["mask_tm1"], s.mask_tm1);
    write_cast(out_dir / e.files["flow"], s.flow);
    m.samples.push_back(std::move(e));
  }
  const auto path = out_dir / "manifest.json";
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << manifest_to_json(m).dump(2) << '\n';
  if (!f) throw IoError("write failed: " + path.string());
  return m;
}

// ---------------------------------------------------------------------------
// Label policy
// ---------------------------------------------------------------------------

enum class Phase { train, eval };

struct PolicyTargets {
  LabelMap target;  // 1..C known, C+1 unknown, 0 where ignored
  Mask ignore;      // 1 where excluded
};

// Lookup from dataset class id to target id (0 = ignore) for one phase.
inline std::vector<int> policy_table(const std::vector<std::string>& classes, const LabelPolicy& policy, Phase phase) {
  const int C = static_cast<int>(policy.num_known());
  auto in = [](const std::vector<std::string>& v, const std::string& n) {
    return std::find(v.begin(), v.end(), n) != v.end();
  };
  std::vector<int> table(classes.size() + 1, -1);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const std::string& n = classes[i];
    int t = -1;
    for (int k = 0; k < C; ++k)
      if (policy.known_classes[static_cast<std::size_t>(k)] == n) t = k + 1;
    if (t < 0) {
      if (phase == Phase::train) {
        if (in(policy.train_unknown, n)) t = C + 1;
        else if (in(policy.train_ignored, n) || in(policy.test_unknown, n) || in(policy.test_ignored, n)) t = 0;
      } else {
        if (in(policy.test_unknown, n)) t = C + 1;
        else if (in(policy.train_unknown, n) || in(policy.train_ignored, n) || in(policy.test_ignored, n)) t = 0;
      }
    }
    table[i + 1] = t;
  }
  return table;
}

// `mask` holds dataset class ids; the result is in policy ids. Classes absent
// from every policy set are rejected.
inline PolicyTargets apply_label_policy(const Mask& mask, const std::vector<std::string>& classes,
                                        const LabelPolicy& policy, Phase phase) {
  const auto table = policy_table(classes, policy, phase);
  PolicyTargets out{LabelMap(mask.shape), Mask(mask.shape)};
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const std::size_t id = mask[i];
    if (id == 0 || id >= table.size())
      throw InvalidArgument("mask value " + std::to_string(id) + " is not a dataset class id");
    const int t = table[id];
    if (t < 0) throw InvalidArgument("class '" + classes[id - 1] + "' is not classified by the label policy");
    out.target[i] = t;
    out.ignore[i] = t == 0 ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Audits
// ---------------------------------------------------------------------------

// Fraction of frame-t object pixels whose flow target in frame t-1 (nearest
// pixel) has the same class. Stuff pixels (ids 1..3) and pixels whose target
// falls outside the frame (possible after cropping) are skipped; returns 1
// when nothing is left to check.
inline double flow_consistency(const SceneSample& s) {
  const std::size_t H = s.height(), W = s.width();
  std::size_t total = 0, ok = 0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t i = y * W + x;
      if (s.mask_t[i] <= 3) continue;
      const long tx = std::lround(static_cast<double>(x) + s.flow[i]);
      const long ty = std::lround(static_cast<double>(y) + s.flow[H * W + i]);
      if (tx < 0 || ty < 0 || tx >= static_cast<long>(W) || ty >= static_cast<long>(H)) continue;
      ++total;
      if (s.mask_tm1[static_cast<std::size_t>(ty) * W + static_cast<std::size_t>(tx)] == s.mask_t[i]) ++ok;
    }
  return total ? static_cast<double>(ok) / static_cast<double>(total) : 1.0;
}

struct AuditReport {
  bool disjoint = true;             // no test_unknown pixel in any training mask
  std::vector<std::string> leaks;   // offending "sample:class" entries
  std::map<std::string, double> known_frequency;  // share of training samples containing each known class
  double min_flow_consistency = 1.0;
};

inline AuditReport audit_dataset(const DatasetManifest& m) {
  AuditReport r;
  std::set<int> test_unknown;
  for (const auto& n : m.policy.test_unknown) test_unknown.insert(m.class_id(n));
  std::map<int, std::size_t> present;
  const auto train = m.indices("train");
  for (std::size_t idx = 0; idx < m.size(); ++idx) {
    const SceneSample s = load_sample(m, idx);
    r.min_flow_consistency = std::min(r.min_flow_consistency, flow_consistency(s));
    if (m.samples[idx].split != "train") continue;
    std::set<int> ids;
    for (const Mask* mk : {&s.mask_t, &s.mask_tm1})
      for (auto v : mk->values) ids.insert(v);
    for (int id : ids) {
      ++present[id];
      if (test_unknown.count(id)) {
        r.disjoint = false;
        r.leaks.push_back(std::to_string(idx) + ":" + m.classes[static_cast<std::size_t>(id - 1)]);
      }
    }
  }
  for (const auto& n : m.policy.known_classes) {
    const int id = m.class_id(n);
    r.known_frequency[n] =
        train.empty() ? 0.0 : static_cast<double>(present[id]) / static_cast<double>(train.size());
  }
  return r;
}

}  // namespace vcas
