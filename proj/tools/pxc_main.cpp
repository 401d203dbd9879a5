// pxc: train a toy per-pixel semantic encoder from unlabeled masks.
// Subcommands: gen-data, train, eval, infer, cluster-masks.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pxc/commands.hpp"
#include "pxc/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"pxc: per-pixel semantic training from unlabeled masks"};
  app.require_subcommand(0, 1);

  std::string config_path;
  bool dump_defaults = false;
  unsigned long long seed_override = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "Run config JSON file");
  app.add_flag("--dump-defaults", dump_defaults,
               "Print the full default config and exit");
  app.add_option("--seed", seed_override, "Master seed override")
      ->each([&seed_set](const std::string&) { seed_set = true; });

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output dataset directory");

  // train
  auto* train = app.add_subcommand("train", "Train from a dataset directory");
  std::string train_data, train_out, train_resume, ablate;
  train->add_option("--data", train_data, "Dataset directory");
  train->add_option("--out", train_out, "Output directory");
  train->add_option("--resume", train_resume, "Checkpoint prefix to resume from");
  train->add_option("--ablate", ablate,
                    "Ablation switch: no-clustering | no-momentum");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_data;
  bool masks_from_gt = false;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint prefix or .json path");
  eval->add_option("--data", eval_data, "Dataset directory");
  eval->add_flag("--masks-from-gt", masks_from_gt,
                 "Classify ground-truth masks instead of fragments");

  // infer
  auto* infer = app.add_subcommand("infer", "Per-pixel labels for one sample");
  std::string infer_ckpt, infer_data, infer_out;
  std::size_t infer_index = 0;
  infer->add_option("--checkpoint", infer_ckpt, "Checkpoint prefix");
  infer->add_option("--data", infer_data, "Dataset directory");
  infer->add_option("--index", infer_index, "Sample index");
  infer->add_option("--out", infer_out, "Optional .lbl output path");

  // cluster-masks
  auto* cm = app.add_subcommand("cluster-masks",
                                "Generate masks by clustering feature maps");
  std::string cm_ckpt, cm_data, cm_out;
  std::size_t cm_k = 16;
  bool cm_random = false, cm_split = false;
  cm->add_option("--checkpoint", cm_ckpt, "Checkpoint prefix");
  cm->add_flag("--random-features", cm_random,
               "Use a freshly seeded encoder instead of a checkpoint");
  cm->add_option("--data", cm_data, "Dataset directory");
  cm->add_option("--out", cm_out, "Output directory for .msk files");
  cm->add_option("--k", cm_k, "Cluster count");
  cm->add_flag("--split-components", cm_split,
               "Split each mask into 4-connected components");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  pxc::RunConfig rc;
  try {
    rc = config_path.empty() ? pxc::default_run_config()
                             : pxc::load_run_config(config_path);
    if (seed_set) {
      rc.seed = static_cast<pxc::Seed>(seed_override);
      rc.train.seed = rc.seed;
      rc.gen.seed = rc.seed;
    }
    if (!ablate.empty()) {
      if (ablate == "no-clustering") {
        rc.train.use_clustering = false;
      } else if (ablate == "no-momentum") {
        rc.train.use_momentum_encoder = false;
      } else {
        throw pxc::ConfigError("--ablate: expected 'no-clustering' or "
                               "'no-momentum', got '" + ablate + "'");
      }
    }
  } catch (const pxc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pxc::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  }

  if (dump_defaults) {
    std::cout << pxc::run_config_to_json(pxc::default_run_config()).dump(2)
              << "\n";
    return 0;
  }

  if (gen->parsed()) {
    const std::string out = gen_out.empty() ? rc.paths.data_dir : gen_out;
    return pxc::cmd_gen_data(rc, out, std::cout, std::cerr);
  }
  if (train->parsed()) {
    const std::string data = train_data.empty() ? rc.paths.data_dir : train_data;
    const std::string out = train_out.empty() ? rc.paths.out_dir : train_out;
    return pxc::cmd_train(rc, data, out, train_resume, std::cout, std::cerr);
  }
  if (eval->parsed()) {
    const std::string data = eval_data.empty() ? rc.paths.data_dir : eval_data;
    const std::string ckpt =
        eval_ckpt.empty() ? rc.paths.out_dir + "/ckpt_final" : eval_ckpt;
    return pxc::cmd_eval(ckpt, data, masks_from_gt, std::cout, std::cerr);
  }
  if (infer->parsed()) {
    const std::string data = infer_data.empty() ? rc.paths.data_dir : infer_data;
    const std::string ckpt =
        infer_ckpt.empty() ? rc.paths.out_dir + "/ckpt_final" : infer_ckpt;
    return pxc::cmd_infer(ckpt, data, infer_index, infer_out, std::cout,
                          std::cerr);
  }
  if (cm->parsed()) {
    const std::string data = cm_data.empty() ? rc.paths.data_dir : cm_data;
    const std::string out = cm_out.empty() ? rc.paths.out_dir + "/masks" : cm_out;
    if (cm_random && !cm_ckpt.empty()) {
      std::cerr << "config error: --checkpoint and --random-features are "
                   "mutually exclusive\n";
      return 2;
    }
    if (!cm_random && cm_ckpt.empty()) {
      std::cerr << "config error: cluster-masks needs --checkpoint or "
                   "--random-features\n";
      return 2;
    }
    return pxc::cmd_cluster_masks(rc, cm_ckpt, data, out, cm_k, cm_split,
                                  std::cout, std::cerr);
  }

  std::cerr << app.help() << "\n";
  return 2;
}
