#pragma once

#include <iosfwd>
#include <string>

#include <json.hpp>

#include "pxc/dataio.hpp"
#include "pxc/eval.hpp"
#include "pxc/training.hpp"

namespace pxc {

// One self-contained run description: training config, generator spec and
// paths, all serialized as a single JSON document with explicit defaults.
// The top-level seed governs every substream.

struct RunPaths {
  std::string data_dir = "data";
  std::string out_dir = "out";
};

struct RunConfig {
  Seed seed = 7;
  std::size_t num_samples = 200;
  TrainConfig train;
  GeneratorSpec gen;
  RunPaths paths;
};

RunConfig default_run_config();
nlohmann::json run_config_to_json(const RunConfig& rc);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

nlohmann::json report_to_json(const SegmentationReport& rep);

// Library-level command bodies, shared by the CLI and the python module.
std::size_t run_gen_data(const RunConfig& rc, const std::string& out_dir);

struct TrainRunResult {
  double first_loss = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
  std::string checkpoint_prefix;
  std::string metrics_path;
};
TrainRunResult run_train(const RunConfig& rc, const std::string& data_dir,
                         const std::string& out_dir,
                         const std::string& resume_prefix = "",
                         std::ostream* progress = nullptr);

SegmentationReport run_eval(const std::string& checkpoint_prefix,
                            const std::string& data_dir, bool masks_from_gt);

LabelGrid run_infer(const std::string& checkpoint_prefix,
                    const std::string& data_dir, std::size_t index);

struct ClusterMasksResult {
  std::size_t samples = 0;
  std::size_t masks_total = 0;
};
ClusterMasksResult run_cluster_masks(const RunConfig& rc,
                                     const std::string& checkpoint_prefix,
                                     const std::string& data_dir,
                                     const std::string& out_dir, std::size_t k,
                                     bool split_components);

// CLI entry points: machine-readable output on `out`, diagnostics on `err`.
// Exit codes: 0 ok, 2 config error, 3 I/O error, 4 non-finite loss.
int cmd_gen_data(const RunConfig& rc, const std::string& out_dir,
                 std::ostream& out, std::ostream& err);
int cmd_train(const RunConfig& rc, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume_prefix,
              std::ostream& out, std::ostream& err);
int cmd_eval(const std::string& checkpoint_prefix, const std::string& data_dir,
             bool masks_from_gt, std::ostream& out, std::ostream& err);
int cmd_infer(const std::string& checkpoint_prefix,
              const std::string& data_dir, std::size_t index,
              const std::string& out_path, std::ostream& out,
              std::ostream& err);
int cmd_cluster_masks(const RunConfig& rc, const std::string& checkpoint_prefix,
                      const std::string& data_dir, const std::string& out_dir,
                      std::size_t k, bool split_components, std::ostream& out,
                      std::ostream& err);

// Strip a trailing ".json"/".bin" so both the manifest path and the bare
// prefix address the same checkpoint.
std::string checkpoint_prefix_of(const std::string& path);

}  // namespace pxc
