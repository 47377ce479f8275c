// Command-line front end: dataset generation, training, evaluation,
// dendrogram analysis, ablation grids and the gradient-check suite.
//
// Exit codes: 0 success, 1 usage / configuration / precondition error,
// 2 IO or file-format error, 3 numerical abort.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "vcas/ablation.hpp"
#include "vcas/analysis.hpp"
#include "vcas/config.hpp"
#include "vcas/gradcheck_suite.hpp"
#include "vcas/model.hpp"
#include "vcas/relations.hpp"
#include "vcas/scenes.hpp"
#include "vcas/training.hpp"

namespace fs = std::filesystem;
using namespace vcas;

namespace {

void write_json(const fs::path& p, const ordered_json& j) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << j.dump(2) << '\n';
}

int cmd_gen_data(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  DataConfig dc = config_path.empty() ? DataConfig{} : parse_data_config(detail::load_json_file(config_path));
  if (seed) dc.scene.seed = *seed;
  const DatasetManifest m = generate_dataset(dc.scene, dc.policy, out);
  const auto train = m.indices("train").size(), eval = m.indices("eval").size();
  std::cout << "wrote " << m.size() << " samples to " << out << " (" << train << " train, " << eval
            << " eval), seed " << m.seed << "\n";
  std::cout << "classes:";
  for (std::size_t i = 0; i < m.classes.size(); ++i) std::cout << ' ' << i + 1 << '=' << m.classes[i];
  std::cout << "\nknown: " << m.policy.known_classes.size() << ", train-unknown: " << m.policy.train_unknown.size()
            << ", test-unknown: " << m.policy.test_unknown.size() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path) {
  RunConfig rc = parse_run_config(detail::load_json_file(config_path));
  rc.validate();
  const DatasetManifest data = read_manifest(rc.data_path);
  if (rc.train.loss.variant == Variant::temporal && !has_flow(data))
    throw ConfigError("variant 'temporal' needs the 'flow' field, which is missing from dataset " + rc.data_path);
  const TrainingData td = load_training_data(data, rc.train);

  fs::create_directories(rc.output_dir);
  write_json(fs::path(rc.output_dir) / "config.json", run_config_to_json(rc));
  std::cout << "training " << to_string(rc.train.loss.variant) << " for " << rc.train.iterations() << " iterations on "
            << td.samples.size() << " samples\n";
  const TrainResult r = train<float>(td, rc.train, rc.output_dir, nullptr, [](const MetricsRow& row) {
    std::printf("iter %6zu  l_seg %.5f  l_aux %.5f  lr %.6g\n", row.iteration, row.loss_seg, row.loss_aux, row.lr);
    std::fflush(stdout);
  });
  std::cout << "checkpoint: " << (fs::path(rc.output_dir) / "checkpoint").string() << "\n";
  return r.iterations_run == rc.train.iterations() ? 0 : 3;
}

void print_eval(const EvalResult& r) {
  for (std::size_t k = 0; k < r.class_names.size(); ++k) std::printf("  %-10s %.4f\n", r.class_names[k].c_str(), r.iou[k]);
  std::printf("  mIoU       %.4f\n  CA-IoU     %.4f\n", r.miou, r.ca_iou);
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& out) {
  const Checkpoint<float> ck = load_checkpoint<float>(ckpt);
  const DatasetManifest data = read_manifest(data_dir);
  const EvalResult r = evaluate(ck.model, data, data.policy, ck.class_names);
  write_eval_csv(r, out);
  print_eval(r);
  return 0;
}

int cmd_dendrogram(const std::string& ckpt, std::optional<std::uint64_t> random_seed, const std::string& data_dir,
                   const std::string& out, const std::string& linkage_name) {
  if (ckpt.empty() == !random_seed) throw ConfigError("give exactly one of --checkpoint or --random-encoder");
  const Linkage linkage = parse_linkage(linkage_name);
  const DatasetManifest data = read_manifest(data_dir);
  const SegmentationModel<float> model =
      random_seed ? random_encoder(data, *random_seed) : load_checkpoint<float>(ckpt).model;
  const RelationResult r = unknown_class_relations(model, data, linkage);
  const Dendrogram& dg = r.dendrogram;
  export_dendrogram(dg, out);
  export_distances(r.distances, r.names, fs::path(out) / "distances.csv");
  std::cout << to_newick(dg) << "\n";
  for (const auto& m : dg.merges) std::printf("  merge %zu + %zu at %.6g (size %zu)\n", m.a, m.b, m.distance, m.size);
  return 0;
}

int cmd_ablate(const std::string& grid_path, const std::string& out, std::size_t max_cells) {
  const AblationGrid g = parse_grid(detail::load_json_file(grid_path));
  AblationOptions opt;
  opt.max_cells = max_cells;
  opt.progress = [](const std::string& msg) {
    std::cout << msg << "\n";
    std::cout.flush();
  };
  const AblationSummary s = run_ablation(g, out, opt);
  std::cout << "cells: " << s.total << ", ran " << s.ran << ", skipped " << s.skipped << ", failed " << s.failed
            << "\nresults: " << (fs::path(out) / "results.csv").string() << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t instances, std::uint64_t seed, bool inject_fault) {
  bool ok = true;
  std::printf("%-30s %9s %9s %12s %8s\n", "op", "instances", "failures", "max_rel_err", "seconds");
  for (const auto& c : gradient_cases(inject_fault)) {
    const GradCaseResult r = run_grad_case(c, instances, seed);
    std::printf("%-30s %9zu %9zu %12.3e %8.2f\n", r.name.c_str(), r.instances, r.failures, r.max_rel_error, r.seconds);
    if (r.failures) {
      ok = false;
      std::printf("    first failure: %s\n", r.first_failure.c_str());
    }
  }
  std::printf("%s\n", ok ? "gradient check passed" : "gradient check FAILED");
  return ok ? 0 : 3;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return 2;
  if (dynamic_cast<const NumericalError*>(&e)) return 3;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 2;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-agnostic video segmentation with contrastive auxiliary losses (toy scale)"};
  app.require_subcommand(1);

  std::string config, out, ckpt, data, grid, linkage = "average";
  std::uint64_t seed = 0, random_encoder = 0;
  std::size_t instances = 100, max_cells = 0;
  bool inject_fault = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic two-frame dataset");
  gen->add_option("--config", config, "data config JSON (optional)");
  gen->add_option("--out", out, "output directory")->required();
  auto* gen_seed = gen->add_option("--seed", seed, "generator seed (overrides the config)");

  auto* tr = app.add_subcommand("train", "train one model");
  tr->add_option("--config", config, "run config JSON")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  ev->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--out", out, "output CSV")->required();

  auto* dg = app.add_subcommand("dendrogram", "cluster unknown-class prototypes");
  dg->add_option("--checkpoint", ckpt, "checkpoint whose encoder provides features");
  auto* dg_rand = dg->add_option("--random-encoder", random_encoder, "use a randomly initialised encoder with this seed");
  dg->add_option("--data", data, "dataset directory")->required();
  dg->add_option("--out", out, "output directory")->required();
  dg->add_option("--linkage", linkage, "average | single | complete");

  auto* ab = app.add_subcommand("ablate", "run an experiment grid");
  ab->add_option("--grid", grid, "ablation grid JSON")->required();
  ab->add_option("--out", out, "output directory")->required();
  ab->add_option("--max-cells", max_cells, "stop after this many newly run cells (0 = no limit)");

  auto* gcmd = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gcmd->add_option("--instances", instances, "random instances per op");
  gcmd->add_option("--seed", seed, "seed");
  gcmd->add_flag("--inject-fault", inject_fault, "swap in a relu with a wrong backward (the check must fail)");

  auto* schema = app.add_subcommand("config-schema", "print every config key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen)
      return cmd_gen_data(config, out, gen_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt);
    if (*tr) return cmd_train(config);
    if (*ev) return cmd_eval(ckpt, data, out);
    if (*dg)
      return cmd_dendrogram(ckpt, dg_rand->count() ? std::optional<std::uint64_t>(random_encoder) : std::nullopt, data,
                            out, linkage);
    if (*ab) return cmd_ablate(grid, out, max_cells);
    if (*gcmd) return cmd_gradcheck(instances, seed, inject_fault);
    if (*schema) {
      std::cout << config_schema().dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 1;
}
