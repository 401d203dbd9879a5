#include "pxc/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "pxc/config_json.hpp"
#include "pxc/errors.hpp"

namespace fs = std::filesystem;

namespace pxc {

namespace {

using nlohmann::json;

std::string sample_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05zu", i);
  return buf;
}

json metrics_to_json(const StepMetrics& mt) {
  json j;
  j["step"] = mt.step;
  j["loss"] = mt.loss;
  j["sinkhorn_marginal_error"] = mt.sinkhorn_marginal_error;
  j["mean_affinity"] = mt.mean_affinity;
  j["cluster_usage"] = mt.cluster_usage;
  j["grad_norm"] = {{"encoder", mt.grad_norm_encoder},
                    {"prompts", mt.grad_norm_prompts},
                    {"decoder", mt.grad_norm_decoder}};
  return j;
}

int guard(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CorruptManifest& e) {
    err << "io error: " << e.what() << "\n";
    return 3;
  } catch (const BadMagic& e) {
    err << "io error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return 3;
  } catch (const NonFiniteLoss& e) {
    err << "training aborted: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

RunConfig default_run_config() {
  RunConfig rc;
  rc.gen = default_generator_spec();
  rc.train.seed = rc.seed;
  rc.gen.seed = rc.seed;
  return rc;
}

json run_config_to_json(const RunConfig& rc) {
  json j;
  j["seed"] = rc.seed;
  j["num_samples"] = rc.num_samples;
  json train = train_config_to_json(rc.train);
  train.erase("seed");  // the top-level seed governs
  j["train"] = std::move(train);
  json gen = generator_spec_to_json(rc.gen);
  gen.erase("seed");
  j["data"] = std::move(gen);
  j["paths"] = {{"data_dir", rc.paths.data_dir},
                {"out_dir", rc.paths.out_dir}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config: expected a JSON object");
  RunConfig rc = default_run_config();
  std::set<std::string> known = {"seed", "num_samples", "train", "data",
                                 "paths"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("run config: unknown key '" + it.key() + "'");
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer() && !j["seed"].is_number_unsigned())
      throw ConfigError("run config: seed must be an integer");
    rc.seed = j["seed"].get<Seed>();
  }
  if (j.contains("num_samples")) {
    if (!j["num_samples"].is_number_unsigned() &&
        !(j["num_samples"].is_number_integer() &&
          j["num_samples"].get<long long>() > 0))
      throw ConfigError("run config: num_samples must be a positive integer");
    rc.num_samples = j["num_samples"].get<std::size_t>();
    if (rc.num_samples == 0)
      throw ConfigError("run config: num_samples must be >= 1");
  }
  if (j.contains("train")) rc.train = train_config_from_json(j["train"]);
  if (j.contains("data")) rc.gen = generator_spec_from_json(j["data"]);
  if (j.contains("paths")) {
    const json& p = j["paths"];
    if (!p.is_object()) throw ConfigError("paths: expected a JSON object");
    for (auto it = p.begin(); it != p.end(); ++it) {
      if (it.key() == "data_dir") {
        rc.paths.data_dir = it.value().get<std::string>();
      } else if (it.key() == "out_dir") {
        rc.paths.out_dir = it.value().get<std::string>();
      } else {
        throw ConfigError("paths: unknown key '" + it.key() + "'");
      }
    }
  }
  rc.train.seed = rc.seed;
  rc.gen.seed = rc.seed;
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

json report_to_json(const SegmentationReport& rep) {
  json matching = json::object();
  for (const auto& [cluster, cls] : rep.matching)
    matching[std::to_string(cluster)] = cls;
  json j;
  j["miou"] = rep.miou;
  j["per_class_iou"] = rep.per_class_iou;
  j["matching"] = std::move(matching);
  j["mask_accuracy"] = rep.mask_accuracy;
  j["num_samples"] = rep.num_samples;
  return j;
}

std::string checkpoint_prefix_of(const std::string& path) {
  for (const char* ext : {".json", ".bin"}) {
    const std::size_t n = std::string(ext).size();
    if (path.size() > n && path.substr(path.size() - n) == ext)
      return path.substr(0, path.size() - n);
  }
  return path;
}

std::size_t run_gen_data(const RunConfig& rc, const std::string& out_dir) {
  const std::vector<SceneSample> samples =
      build_dataset(rc.gen, rc.num_samples);
  std::vector<std::string> names;
  for (const ClassSpec& c : rc.gen.classes) names.push_back(c.name);
  write_dataset(samples, names, out_dir);
  return samples.size();
}

namespace {

std::vector<BatchItem> as_batch_items(const Dataset& ds) {
  std::vector<BatchItem> items;
  items.reserve(ds.samples.size());
  for (const SceneSample& s : ds.samples)
    items.push_back({&s.image, &s.unlabeled_masks});
  return items;
}

}  // namespace

TrainRunResult run_train(const RunConfig& rc, const std::string& data_dir,
                         const std::string& out_dir,
                         const std::string& resume_prefix,
                         std::ostream* progress) {
  const Dataset ds = read_dataset(data_dir);
  if (ds.height % rc.train.patch != 0 || ds.width % rc.train.patch != 0)
    throw ConfigError("train.patch must divide the dataset image size");
  fs::create_directories(out_dir);

  TrainConfig cfg = rc.train;
  cfg.seed = rc.seed;
  TrainState state = resume_prefix.empty()
                         ? init_train_state(cfg)
                         : read_checkpoint(resume_prefix, cfg);
  state.config = cfg;

  const std::vector<BatchItem> items = as_batch_items(ds);

  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(metrics_path,
                        resume_prefix.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw IoError("cannot write " + metrics_path);

  TrainRunResult result;
  result.metrics_path = metrics_path;
  bool first = true;
  const MetricsSink on_metrics = [&](const StepMetrics& mt) {
    metrics << metrics_to_json(mt).dump() << "\n";
    if (first) {
      result.first_loss = mt.loss;
      first = false;
    }
    result.final_loss = mt.loss;
    if (progress && cfg.log_every > 0 && mt.step % cfg.log_every == 0)
      *progress << "step " << mt.step << " loss " << mt.loss << "\n";
  };
  const CheckpointSink on_checkpoint = [&](const TrainState& st,
                                           std::size_t step) {
    const std::string prefix =
        (fs::path(out_dir) /
         (step == cfg.steps ? std::string("ckpt_final")
                            : "ckpt_step" + std::to_string(step)))
            .string();
    write_checkpoint(st, prefix);
  };

  fit(state, items, cfg, on_metrics, on_checkpoint);
  metrics.flush();

  result.steps = state.step;
  result.checkpoint_prefix = (fs::path(out_dir) / "ckpt_final").string();
  return result;
}

SegmentationReport run_eval(const std::string& checkpoint_prefix,
                            const std::string& data_dir, bool masks_from_gt) {
  const std::string prefix = checkpoint_prefix_of(checkpoint_prefix);
  const TrainConfig cfg = read_checkpoint_config(prefix);
  const TrainState state = read_checkpoint(prefix, cfg);
  const Dataset ds = read_dataset(data_dir);
  return evaluate(state, ds, masks_from_gt);
}

LabelGrid run_infer(const std::string& checkpoint_prefix,
                    const std::string& data_dir, std::size_t index) {
  const std::string prefix = checkpoint_prefix_of(checkpoint_prefix);
  const TrainConfig cfg = read_checkpoint_config(prefix);
  const TrainState state = read_checkpoint(prefix, cfg);
  const Dataset ds = read_dataset(data_dir);
  if (index >= ds.samples.size())
    throw ConfigError("infer: sample index out of range");
  return infer_segmentation(state, ds.samples[index].image);
}

ClusterMasksResult run_cluster_masks(const RunConfig& rc,
                                     const std::string& checkpoint_prefix,
                                     const std::string& data_dir,
                                     const std::string& out_dir, std::size_t k,
                                     bool split_components) {
  if (k < 1) throw ConfigError("cluster-masks: k must be >= 1");
  const Dataset ds = read_dataset(data_dir);
  fs::create_directories(out_dir);

  ImageEncoderParams encoder;
  if (checkpoint_prefix.empty()) {
    std::mt19937_64 rng = substream(rc.seed, stream::kInit);
    encoder = init_image_encoder(rc.train.patch, rc.train.channels,
                                 rc.train.d, rng);
  } else {
    const std::string prefix = checkpoint_prefix_of(checkpoint_prefix);
    const TrainConfig cfg = read_checkpoint_config(prefix);
    encoder = read_checkpoint(prefix, cfg).student;
  }

  ClusterMasksResult result;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const DenseGrid feat = encode_image(encoder, ds.samples[i].image);
    std::mt19937_64 rng = substream(rc.seed, stream::kMaskGen, i);
    const Seed sample_seed = rng();
    const MaskSet masks = feature_map_to_masks(
        feat, k, sample_seed, split_components, ds.height, ds.width);
    write_mask_file(masks,
                    (fs::path(out_dir) / (sample_name(i) + ".msk")).string());
    result.masks_total += masks.size();
    ++result.samples;
  }
  return result;
}

int cmd_gen_data(const RunConfig& rc, const std::string& out_dir,
                 std::ostream& out, std::ostream& err) {
  return guard(err, [&]() {
    const std::size_t n = run_gen_data(rc, out_dir);
    json names = json::array();
    for (const ClassSpec& c : rc.gen.classes) names.push_back(c.name);
    json j = {{"samples", n}, {"classes", names}, {"out_dir", out_dir}};
    out << j.dump() << "\n";
    return 0;
  });
}

int cmd_train(const RunConfig& rc, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume_prefix,
              std::ostream& out, std::ostream& err) {
  return guard(err, [&]() {
    const TrainRunResult r = run_train(rc, data_dir, out_dir,
                                       resume_prefix, &err);
    json j = {{"steps", r.steps},
              {"first_loss", r.first_loss},
              {"final_loss", r.final_loss},
              {"checkpoint", r.checkpoint_prefix},
              {"metrics", r.metrics_path}};
    out << j.dump() << "\n";
    return 0;
  });
}

int cmd_eval(const std::string& checkpoint_prefix, const std::string& data_dir,
             bool masks_from_gt, std::ostream& out, std::ostream& err) {
  return guard(err, [&]() {
    const SegmentationReport rep =
        run_eval(checkpoint_prefix, data_dir, masks_from_gt);
    out << report_to_json(rep).dump() << "\n";
    return 0;
  });
}

int cmd_infer(const std::string& checkpoint_prefix,
              const std::string& data_dir, std::size_t index,
              const std::string& out_path, std::ostream& out,
              std::ostream& err) {
  return guard(err, [&]() {
    const LabelGrid labels = run_infer(checkpoint_prefix, data_dir, index);
    std::vector<std::size_t> hist;
    for (std::uint16_t v : labels.v) {
      if (v >= hist.size()) hist.resize(v + 1, 0);
      hist[v] += 1;
    }
    if (!out_path.empty()) {
      // Reuse the dataset label format for the prediction.
      std::string buf;
      buf += "PXC1";
      auto put32 = [&buf](std::uint32_t v) {
        for (int i = 0; i < 4; ++i)
          buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
      };
      put32(static_cast<std::uint32_t>(labels.h));
      put32(static_cast<std::uint32_t>(labels.w));
      for (std::uint16_t v : labels.v) {
        buf.push_back(static_cast<char>(v & 0xff));
        buf.push_back(static_cast<char>((v >> 8) & 0xff));
      }
      std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
      if (!f) throw IoError("cannot write " + out_path);
      f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    json j = {{"index", index},
              {"height", labels.h},
              {"width", labels.w},
              {"cluster_histogram", hist}};
    if (!out_path.empty()) j["out"] = out_path;
    out << j.dump() << "\n";
    return 0;
  });
}

int cmd_cluster_masks(const RunConfig& rc, const std::string& checkpoint_prefix,
                      const std::string& data_dir, const std::string& out_dir,
                      std::size_t k, bool split_components, std::ostream& out,
                      std::ostream& err) {
  return guard(err, [&]() {
    const ClusterMasksResult r = run_cluster_masks(
        rc, checkpoint_prefix, data_dir, out_dir, k, split_components);
    json j = {{"samples", r.samples},
              {"k", k},
              {"masks_total", r.masks_total},
              {"out_dir", out_dir}};
    out << j.dump() << "\n";
    return 0;
  });
}

}  // namespace pxc
