#pragma once

// Experiment grid: variant × λ × AP factor × queue × policy mode × data mode ×
// seed. Axes a variant does not use are collapsed, so e.g. `none` yields one
// cell per (modes, seed). Each cell trains, evaluates and is merged into a
// single results.csv that is rewritten atomically after every cell; cells
// already marked ok are skipped on a rerun.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vcas/config.hpp"
#include "vcas/errors.hpp"
#include "vcas/scenes.hpp"
#include "vcas/training.hpp"

namespace vcas {

struct AblationGrid {
  std::string data_path;  // empty: generate the default dataset under <out>/dataset
  std::uint64_t data_seed = 0;
  json base = json::object();  // run-config sections applied to every cell
  std::vector<Variant> variants{Variant::none, Variant::prototype};
  std::vector<double> lambdas{0.5};
  std::vector<double> ap_factors{0.1};
  std::vector<bool> queues{true};
  std::vector<std::string> policy_modes{"FD"};
  std::vector<std::string> data_modes{"FD"};
  std::vector<std::uint64_t> seeds{0};
};

struct AblationCell {
  Variant variant = Variant::none;
  std::optional<double> lambda, ap_factor;
  std::optional<bool> queue;
  std::string policy_mode = "FD", data_mode = "FD";
  std::uint64_t seed = 0;

  std::string id() const {
    std::ostringstream os;
    os << to_string(variant);
    char buf[32];
    if (lambda) {
      std::snprintf(buf, sizeof buf, "%g", *lambda);
      os << "_l" << buf;
    }
    if (ap_factor) {
      std::snprintf(buf, sizeof buf, "%g", *ap_factor);
      os << "_ap" << buf;
    }
    if (queue) os << (*queue ? "_qon" : "_qoff");
    os << '_' << policy_mode << '_' << data_mode << "_s" << seed;
    return os.str();
  }
};

inline bool uses_lambda(Variant v) { return v != Variant::none; }
inline bool uses_ap(Variant v) { return v == Variant::temporal; }
inline bool uses_queue(Variant v) { return v == Variant::prototype; }

inline AblationGrid parse_grid(const json& j) {
  using detail::read;
  detail::reject_unknown(j,
                         {"data", "data_seed", "base", "variants", "lambda", "ap_factor", "queue", "policy_mode",
                          "data_mode", "seeds"},
                         "grid");
  AblationGrid g;
  read(j, "data", g.data_path, "grid");
  read(j, "data_seed", g.data_seed, "grid");
  if (j.contains("base")) g.base = j["base"];
  if (j.contains("variants")) {
    g.variants.clear();
    for (const auto& v : j["variants"]) {
      try {
        g.variants.push_back(parse_variant(v.get<std::string>()));
      } catch (const std::exception& e) {
        throw ConfigError(std::string("grid.variants: ") + e.what());
      }
    }
  }
  read(j, "lambda", g.lambdas, "grid");
  read(j, "ap_factor", g.ap_factors, "grid");
  read(j, "queue", g.queues, "grid");
  read(j, "policy_mode", g.policy_modes, "grid");
  read(j, "data_mode", g.data_modes, "grid");
  read(j, "seeds", g.seeds, "grid");
  for (const auto* axis : {&g.lambdas, &g.ap_factors})
    if (axis->empty()) throw ConfigError("grid axes may not be empty");
  if (g.variants.empty() || g.queues.empty() || g.policy_modes.empty() || g.data_modes.empty() || g.seeds.empty())
    throw ConfigError("grid axes may not be empty");
  return g;
}

// Cells in a fixed order, duplicates removed.
inline std::vector<AblationCell> enumerate_cells(const AblationGrid& g) {
  std::vector<AblationCell> out;
  std::set<std::string> seen;
  for (const auto& pm : g.policy_modes)
    for (const auto& dm : g.data_modes)
      for (Variant v : g.variants)
        for (double l : g.lambdas)
          for (double ap : g.ap_factors)
            for (bool q : g.queues)
              for (auto seed : g.seeds) {
                AblationCell c;
                c.variant = v;
                if (uses_lambda(v)) c.lambda = l;
                if (uses_ap(v)) c.ap_factor = ap;
                if (uses_queue(v)) c.queue = q;
                c.policy_mode = pm;
                c.data_mode = dm;
                c.seed = seed;
                if (seen.insert(c.id()).second) out.push_back(c);
              }
  return out;
}

// Run configuration for one cell.
inline RunConfig cell_config(const AblationGrid& g, const AblationCell& c, const std::string& data_path,
                             const std::filesystem::path& cell_dir) {
  json j = g.base;
  if (!j.is_object()) throw ConfigError("grid.base must be an object");
  j["data"]["path"] = data_path;
  j["data"]["policy_mode"] = c.policy_mode;
  j["data"]["data_mode"] = c.data_mode;
  j["output_dir"] = cell_dir.string();
  j["loss"]["variant"] = to_string(c.variant);
  if (c.lambda) j["loss"]["lambda"] = *c.lambda;
  if (c.ap_factor) j["loss"]["ap_factor"] = *c.ap_factor;
  if (c.queue) j["loss"]["queue"] = *c.queue;
  j["training"]["seed"] = c.seed;
  RunConfig rc = parse_run_config(j);
  rc.validate();
  return rc;
}

struct AblationRow {
  std::string cell_id, variant, lambda, ap_factor, queue, policy_mode, data_mode, seed, miou, ca_iou, status;
};

inline constexpr const char* kResultsHeader = "cell_id,variant,lambda,ap_factor,queue,policy_mode,data_mode,seed,mIoU,CA-IoU,status";

inline std::vector<AblationRow> read_results(const std::filesystem::path& path) {
  std::vector<AblationRow> rows;
  std::ifstream f(path);
  if (!f) return rows;
  std::string line;
  if (!std::getline(f, line) || line != kResultsHeader) throw FormatError(path.string() + ": unexpected header");
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) v.push_back(cell);
    if (v.size() != 11) throw FormatError(path.string() + ": malformed row '" + line + "'");
    rows.push_back({v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]});
  }
  return rows;
}

inline void write_results(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write " + tmp);
    f << kResultsHeader << '\n';
    for (const auto& r : rows)
      f << r.cell_id << ',' << r.variant << ',' << r.lambda << ',' << r.ap_factor << ',' << r.queue << ','
        << r.policy_mode << ',' << r.data_mode << ',' << r.seed << ',' << r.miou << ',' << r.ca_iou << ',' << r.status
        << '\n';
    if (!f) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot replace " + path.string() + ": " + ec.message());
}

inline AblationRow describe(const AblationCell& c) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", *v);
    return std::string(buf);
  };
  AblationRow r;
  r.cell_id = c.id();
  r.variant = to_string(c.variant);
  r.lambda = num(c.lambda);
  r.ap_factor = num(c.ap_factor);
  r.queue = c.queue ? (*c.queue ? "on" : "off") : "-";
  r.policy_mode = c.policy_mode;
  r.data_mode = c.data_mode;
  r.seed = std::to_string(c.seed);
  return r;
}

struct AblationOptions {
  std::size_t max_cells = 0;  // stop after running this many cells (0 = all); for interruption tests
  std::function<void(const std::string&)> progress;
};

struct AblationSummary {
  std::size_t total = 0, ran = 0, skipped = 0, failed = 0;
};

// Cell training/evaluation, replaceable in tests.
using CellRunner = std::function<EvalResult(const RunConfig&, const DatasetManifest&)>;

inline EvalResult default_cell_runner(const RunConfig& rc, const DatasetManifest& data) {
  const TrainingData td = load_training_data(data, rc.train);
  TrainState<float> st;
  train<float>(td, rc.train, rc.output_dir, &st);
  const EvalResult r = evaluate(st.model, data, td.policy, td.class_names);
  write_eval_csv(r, std::filesystem::path(rc.output_dir) / "eval.csv");
  return r;
}

inline AblationSummary run_ablation(const AblationGrid& g, const std::filesystem::path& out,
                                    const AblationOptions& opt = {}, const CellRunner& runner = default_cell_runner) {
  const auto cells = enumerate_cells(g);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  std::string data_path = g.data_path;
  if (data_path.empty()) {
    data_path = (out / "dataset").string();
    if (!std::filesystem::exists(out / "dataset" / "manifest.json")) {
      SceneConfig sc = default_scene_config();
      sc.seed = g.data_seed;
      generate_dataset(sc, default_policy(), data_path);
    }
  }
  // Validate every cell before running any.
  std::vector<RunConfig> configs;
  for (const auto& c : cells) configs.push_back(cell_config(g, c, data_path, out / "cells" / c.id()));
  const DatasetManifest data = read_manifest(data_path);

  const auto results_path = out / "results.csv";
  std::map<std::string, AblationRow> done;
  for (auto& r : read_results(results_path)) done[r.cell_id] = r;

  AblationSummary sum;
  sum.total = cells.size();
  auto flush = [&] {
    std::vector<AblationRow> rows;
    for (const auto& c : cells)
      if (auto it = done.find(c.id()); it != done.end()) rows.push_back(it->second);
    write_results(results_path, rows);
  };
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::string id = cells[i].id();
    if (auto it = done.find(id); it != done.end() && it->second.status == "ok") {
      ++sum.skipped;
      continue;
    }
    if (opt.max_cells && sum.ran >= opt.max_cells) break;
    AblationRow row = describe(cells[i]);
    try {
      const EvalResult r = runner(configs[i], data);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", r.miou);
      row.miou = buf;
      std::snprintf(buf, sizeof buf, "%.6f", r.ca_iou);
      row.ca_iou = buf;
      row.status = "ok";
    } catch (const std::exception& e) {
      row.miou = row.ca_iou = "nan";
      row.status = "failed";
      ++sum.failed;
      if (opt.progress) opt.progress("cell " + id + " failed: " + e.what());
    }
    ++sum.ran;
    done[id] = row;
    flush();
    if (opt.progress)
      opt.progress("[" + std::to_string(i + 1) + "/" + std::to_string(cells.size()) + "] " + id + " " + row.status +
                   " mIoU=" + row.miou + " CA-IoU=" + row.ca_iou);
  }
  if (sum.ran == 0 && !std::filesystem::exists(results_path)) flush();
  return sum;
}

}  // namespace vcas
