#pragma once

// JSON run configurations. Every section is optional; missing keys keep their
// defaults and unknown keys are rejected.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "vcas/errors.hpp"
#include "vcas/scenes.hpp"
#include "vcas/training.hpp"

namespace vcas {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

struct RunConfig {
  std::string data_path;
  std::string output_dir;
  TrainOptions train;
  bool tau_given = false;  // false: tau follows the variant default

  void validate() const {
    if (data_path.empty()) throw ConfigError("data.path is required");
    if (output_dir.empty()) throw ConfigError("output_dir is required");
    try {
      train.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline json load_json_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

}  // namespace detail

// Applies the keys present in `j` on top of `c`.
inline void apply_run_json(RunConfig& c, const json& j) {
  using detail::read;
  detail::reject_unknown(j, {"data", "output_dir", "optimizer", "schedule", "training", "loss", "model"}, "config");
  read(j, "output_dir", c.output_dir, "config");
  TrainOptions& t = c.train;
  if (j.contains("data")) {
    const json& d = j["data"];
    detail::reject_unknown(d, {"path", "policy_mode", "data_mode"}, "data");
    read(d, "path", c.data_path, "data");
    read(d, "policy_mode", t.policy_mode, "data");
    read(d, "data_mode", t.data_mode, "data");
  }
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    detail::reject_unknown(o, {"lr", "momentum", "weight_decay"}, "optimizer");
    read(o, "lr", t.optimizer.lr, "optimizer");
    read(o, "momentum", t.optimizer.momentum, "optimizer");
    read(o, "weight_decay", t.optimizer.weight_decay, "optimizer");
  }
  if (j.contains("schedule")) {
    const json& s = j["schedule"];
    detail::reject_unknown(s, {"kind", "power", "milestones", "factor"}, "schedule");
    std::string kind = to_string(t.schedule.kind);
    read(s, "kind", kind, "schedule");
    try {
      t.schedule.kind = parse_schedule_kind(kind);
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
    read(s, "power", t.schedule.power, "schedule");
    read(s, "milestones", t.schedule.milestones, "schedule");
    read(s, "factor", t.schedule.factor, "schedule");
  }
  if (j.contains("training")) {
    const json& r = j["training"];
    detail::reject_unknown(r,
                           {"iterations", "batch_size", "crop", "log_every", "seed", "scale_min", "scale_max",
                            "flip_prob"},
                           "training");
    read(r, "iterations", t.schedule.total_iterations, "training");
    read(r, "batch_size", t.batch_size, "training");
    if (r.contains("crop")) {
      std::size_t crop = 0;
      read(r, "crop", crop, "training");
      t.augment.crop_h = t.augment.crop_w = crop;
    }
    read(r, "log_every", t.log_every, "training");
    read(r, "seed", t.seed, "training");
    read(r, "scale_min", t.augment.scale_min, "training");
    read(r, "scale_max", t.augment.scale_max, "training");
    read(r, "flip_prob", t.augment.flip_prob, "training");
  }
  if (j.contains("loss")) {
    const json& l = j["loss"];
    detail::reject_unknown(l, {"variant", "lambda", "tau", "ap_factor", "queue", "queue_capacity"}, "loss");
    if (l.contains("variant")) {
      std::string v;
      read(l, "variant", v, "loss");
      try {
        t.loss.variant = parse_variant(v);
      } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
      }
    }
    read(l, "lambda", t.loss.lambda, "loss");
    if (l.contains("tau") && !l["tau"].is_null()) {
      read(l, "tau", t.loss.tau, "loss");
      c.tau_given = true;
    }
    read(l, "ap_factor", t.ap_factor, "loss");
    read(l, "queue", t.use_queue, "loss");
    read(l, "queue_capacity", t.queue_capacity, "loss");
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    detail::reject_unknown(m, {"stream_width", "feature_dim", "seg_dim", "contrast_dim", "head_width", "groups"},
                           "model");
    read(m, "stream_width", t.model.stream_width, "model");
    read(m, "feature_dim", t.model.feature_dim, "model");
    read(m, "seg_dim", t.model.seg_dim, "model");
    read(m, "contrast_dim", t.model.contrast_dim, "model");
    read(m, "head_width", t.model.head_width, "model");
    read(m, "groups", t.model.groups, "model");
  }
  if (!c.tau_given) t.loss.tau = default_tau(t.loss.variant);
}

inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  apply_run_json(c, j);
  return c;
}

// Fully resolved configuration, every key present.
inline ordered_json run_config_to_json(const RunConfig& c) {
  const TrainOptions& t = c.train;
  ordered_json j;
  j["data"] = {{"path", c.data_path}, {"policy_mode", t.policy_mode}, {"data_mode", t.data_mode}};
  j["output_dir"] = c.output_dir;
  j["optimizer"] = {{"lr", t.optimizer.lr}, {"momentum", t.optimizer.momentum},
                    {"weight_decay", t.optimizer.weight_decay}};
  j["schedule"] = {{"kind", to_string(t.schedule.kind)},
                   {"power", t.schedule.power},
                   {"milestones", t.schedule.milestones},
                   {"factor", t.schedule.factor}};
  j["training"] = {{"iterations", t.schedule.total_iterations},
                   {"batch_size", t.batch_size},
                   {"crop", t.augment.crop_h},
                   {"log_every", t.log_every},
                   {"seed", t.seed},
                   {"scale_min", t.augment.scale_min},
                   {"scale_max", t.augment.scale_max},
                   {"flip_prob", t.augment.flip_prob}};
  j["loss"] = {{"variant", to_string(t.loss.variant)}, {"lambda", t.loss.lambda},     {"tau", t.loss.tau},
               {"ap_factor", t.ap_factor},             {"queue", t.use_queue},        {"queue_capacity", t.queue_capacity}};
  j["model"] = {{"stream_width", t.model.stream_width}, {"feature_dim", t.model.feature_dim},
                {"seg_dim", t.model.seg_dim},           {"contrast_dim", t.model.contrast_dim},
                {"head_width", t.model.head_width},     {"groups", t.model.groups}};
  return j;
}

// ---------------------------------------------------------------------------
// Dataset generation config
// ---------------------------------------------------------------------------

struct DataConfig {
  SceneConfig scene = default_scene_config();
  LabelPolicy policy = default_policy();
};

inline DataConfig parse_data_config(const json& j) {
  using detail::read;
  DataConfig c;
  detail::reject_unknown(j, {"scene", "policy"}, "data config");
  if (j.contains("scene")) {
    const json& s = j["scene"];
    detail::reject_unknown(s,
                           {"height", "width", "train_samples", "eval_samples", "min_objects", "max_objects",
                            "min_size", "max_size", "max_motion", "fractional_motion", "noise", "sky_fraction",
                            "sidewalk_fraction", "seed", "shapes"},
                           "scene");
    SceneConfig& sc = c.scene;
    read(s, "height", sc.height, "scene");
    read(s, "width", sc.width, "scene");
    read(s, "train_samples", sc.train_samples, "scene");
    read(s, "eval_samples", sc.eval_samples, "scene");
    read(s, "min_objects", sc.min_objects, "scene");
    read(s, "max_objects", sc.max_objects, "scene");
    read(s, "min_size", sc.min_size, "scene");
    read(s, "max_size", sc.max_size, "scene");
    read(s, "max_motion", sc.max_motion, "scene");
    read(s, "fractional_motion", sc.fractional_motion, "scene");
    read(s, "noise", sc.noise, "scene");
    read(s, "sky_fraction", sc.sky_fraction, "scene");
    read(s, "sidewalk_fraction", sc.sidewalk_fraction, "scene");
    read(s, "seed", sc.seed, "scene");
    if (s.contains("shapes")) {
      sc.shapes.clear();
      for (const auto& e : s["shapes"]) {
        detail::reject_unknown(e, {"name", "kind", "texture", "color"}, "scene.shapes[]");
        ShapeSpec sp;
        try {
          sp.name = e.at("name").get<std::string>();
          sp.kind = parse_shape_kind(e.at("kind").get<std::string>());
          sp.texture = parse_texture(e.value("texture", std::string("solid")));
          if (e.contains("color")) sp.color = e["color"].get<Color>();
        } catch (const json::exception& ex) {
          throw ConfigError(std::string("scene.shapes[]: ") + ex.what());
        } catch (const InvalidArgument& ex) {
          throw ConfigError(ex.what());
        }
        sc.shapes.push_back(sp);
      }
    }
  }
  if (j.contains("policy")) {
    detail::reject_unknown(j["policy"],
                           {"known_classes", "train_unknown", "train_ignored", "test_unknown", "test_ignored"},
                           "policy");
    try {
      c.policy = policy_from_json(j["policy"]);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("policy: ") + e.what());
    }
  }
  try {
    c.scene.validate();
    c.policy.validate();
    check_vocabulary(c.scene, c.policy);
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline ordered_json data_config_to_json(const DataConfig& c) {
  const SceneConfig& s = c.scene;
  ordered_json shapes = ordered_json::array();
  for (const auto& sp : s.shapes)
    shapes.push_back({{"name", sp.name}, {"kind", to_string(sp.kind)}, {"texture", to_string(sp.texture)},
                      {"color", sp.color}});
  ordered_json j;
  j["scene"] = {{"height", s.height},
                {"width", s.width},
                {"train_samples", s.train_samples},
                {"eval_samples", s.eval_samples},
                {"min_objects", s.min_objects},
                {"max_objects", s.max_objects},
                {"min_size", s.min_size},
                {"max_size", s.max_size},
                {"max_motion", s.max_motion},
                {"fractional_motion", s.fractional_motion},
                {"noise", s.noise},
                {"sky_fraction", s.sky_fraction},
                {"sidewalk_fraction", s.sidewalk_fraction},
                {"seed", s.seed},
                {"shapes", shapes}};
  j["policy"] = policy_to_json(c.policy);
  return j;
}

// Every configurable key with its default, for `config-schema`.
inline ordered_json config_schema() {
  RunConfig run;
  run.data_path = "<dataset dir>";
  run.output_dir = "<output dir>";
  run.train.loss.tau = default_tau(run.train.loss.variant);
  ordered_json j;
  j["run_config"] = run_config_to_json(run);
  j["run_config_notes"] = {
      {"loss.variant", "none | image | prototype | temporal"},
      {"loss.tau", "defaults to 0.07 (image, prototype) or 0.1 (temporal) when omitted"},
      {"loss.ap_factor", "region pooling window as a fraction of the feature map side, in (0, 1]"},
      {"schedule.kind", "step (milestones are fractions of training.iterations) | poly (uses power)"},
      {"data.policy_mode", "FD (all train-unknown classes) | LU (first train-unknown class only)"},
      {"data.data_mode", "FD (full training split) | LD (first quarter of the training split)"}};
  j["data_config"] = data_config_to_json(DataConfig{});
  j["ablation_grid"] = {{"data", "<dataset dir, or omit to generate the default dataset>"},
                        {"data_seed", 0},
                        {"base", "<run config sections applied to every cell>"},
                        {"variants", {"none", "image", "prototype", "temporal"}},
                        {"lambda", {0.2, 0.5, 1.0}},
                        {"ap_factor", {0.05, 0.1, 0.3}},
                        {"queue", {true, false}},
                        {"policy_mode", {"FD"}},
                        {"data_mode", {"FD"}},
                        {"seeds", {0, 1, 2}}};
  return j;
}

}  // namespace vcas
