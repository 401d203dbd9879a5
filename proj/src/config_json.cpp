#include "pxc/config_json.hpp"

#include <set>

#include "pxc/errors.hpp"

namespace pxc {

namespace {

using nlohmann::json;

// Strict object reader: every consumed key is recorded; finish() rejects
// leftovers so config typos fail loudly instead of silently using defaults.
class ObjReader {
 public:
  ObjReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw ConfigError(path_ + ": expected a JSON object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  void get(const char* key, double& out) {
    if (!mark(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    out = v.get<double>();
  }

  void get(const char* key, std::size_t& out) {
    if (!mark(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      throw ConfigError(where(key) + ": expected a non-negative integer");
    out = v.get<std::size_t>();
  }

  void get(const char* key, int& out) {
    if (!mark(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer())
      throw ConfigError(where(key) + ": expected an integer");
    out = v.get<int>();
  }

  void get(const char* key, bool& out) {
    if (!mark(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
    out = v.get<bool>();
  }

  void get(const char* key, std::string& out) {
    if (!mark(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
    out = v.get<std::string>();
  }

  const json* sub(const char* key) {
    if (!mark(key)) return nullptr;
    return &j_.at(key);
  }

  std::string where(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key()))
        throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
  }

 private:
  bool mark(const char* key) {
    if (!j_.contains(key)) return false;
    used_.insert(key);
    return true;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::kBackground: return "background";
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kRectangle: return "rectangle";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "background";
}

ShapeKind shape_from_name(const std::string& s, const std::string& path) {
  if (s == "background") return ShapeKind::kBackground;
  if (s == "circle") return ShapeKind::kCircle;
  if (s == "rectangle") return ShapeKind::kRectangle;
  if (s == "triangle") return ShapeKind::kTriangle;
  throw ConfigError(path + ": unknown shape '" + s + "'");
}

}  // namespace

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["k"] = cfg.k;
  j["l"] = cfg.l;
  j["d"] = cfg.d;
  j["d_e"] = cfg.d_e;
  j["patch"] = cfg.patch;
  j["channels"] = cfg.channels;
  j["decoder_upsample"] = cfg.decoder_upsample;
  j["epsilon"] = cfg.epsilon;
  j["gamma"] = cfg.gamma;
  j["logit_scale"] = cfg.logit_scale;
  j["lr_decoder"] = cfg.lr_decoder;
  j["lr_prompts"] = cfg.lr_prompts;
  j["lr_encoder"] = cfg.lr_encoder;
  j["weight_decay"] = cfg.weight_decay;
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["batch_size"] = cfg.batch_size;
  j["steps"] = cfg.steps;
  j["sinkhorn_tol"] = cfg.sinkhorn_tol;
  j["sinkhorn_max_iter"] = cfg.sinkhorn_max_iter;
  j["use_clustering"] = cfg.use_clustering;
  j["use_momentum_encoder"] = cfg.use_momentum_encoder;
  j["supervise_empty"] = cfg.supervise_empty;
  j["cover_only"] = cfg.cover_only;
  j["augment"] = {{"cutout_holes", cfg.augment.cutout_holes},
                  {"cutout_frac", cfg.augment.cutout_frac},
                  {"jitter_scale", cfg.augment.jitter_scale},
                  {"jitter_shift", cfg.augment.jitter_shift}};
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["log_every"] = cfg.log_every;
  j["seed"] = cfg.seed;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j,
                                   const std::string& path) {
  TrainConfig cfg;
  ObjReader r(j, path);
  r.get("k", cfg.k);
  r.get("l", cfg.l);
  r.get("d", cfg.d);
  r.get("d_e", cfg.d_e);
  r.get("patch", cfg.patch);
  r.get("channels", cfg.channels);
  r.get("decoder_upsample", cfg.decoder_upsample);
  r.get("epsilon", cfg.epsilon);
  r.get("gamma", cfg.gamma);
  r.get("logit_scale", cfg.logit_scale);
  r.get("lr_decoder", cfg.lr_decoder);
  r.get("lr_prompts", cfg.lr_prompts);
  r.get("lr_encoder", cfg.lr_encoder);
  r.get("weight_decay", cfg.weight_decay);
  r.get("adam_beta1", cfg.adam_beta1);
  r.get("adam_beta2", cfg.adam_beta2);
  r.get("adam_eps", cfg.adam_eps);
  r.get("batch_size", cfg.batch_size);
  r.get("steps", cfg.steps);
  r.get("sinkhorn_tol", cfg.sinkhorn_tol);
  r.get("sinkhorn_max_iter", cfg.sinkhorn_max_iter);
  r.get("use_clustering", cfg.use_clustering);
  r.get("use_momentum_encoder", cfg.use_momentum_encoder);
  r.get("supervise_empty", cfg.supervise_empty);
  r.get("cover_only", cfg.cover_only);
  if (const json* a = r.sub("augment")) {
    ObjReader ra(*a, path + ".augment");
    ra.get("cutout_holes", cfg.augment.cutout_holes);
    ra.get("cutout_frac", cfg.augment.cutout_frac);
    ra.get("jitter_scale", cfg.augment.jitter_scale);
    ra.get("jitter_shift", cfg.augment.jitter_shift);
    ra.finish();
  }
  r.get("checkpoint_every", cfg.checkpoint_every);
  r.get("log_every", cfg.log_every);
  r.get("seed", cfg.seed);
  r.finish();

  if (cfg.k < 1 || cfg.l < 1 || cfg.d < 1 || cfg.d_e < 1 || cfg.patch < 1 ||
      cfg.channels < 1 || cfg.decoder_upsample < 1)
    throw ConfigError(path + ": model dimensions must be >= 1");
  if (!(cfg.epsilon > 0.0)) throw ConfigError(path + ".epsilon: must be > 0");
  if (cfg.gamma < 0.0 || cfg.gamma > 1.0)
    throw ConfigError(path + ".gamma: must lie in [0, 1]");
  if (!(cfg.logit_scale > 0.0))
    throw ConfigError(path + ".logit_scale: must be > 0");
  if (cfg.lr_decoder < 0.0 || cfg.lr_prompts < 0.0 || cfg.lr_encoder < 0.0)
    throw ConfigError(path + ": learning rates must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError(path + ".batch_size: must be >= 1");
  if (!(cfg.sinkhorn_tol > 0.0))
    throw ConfigError(path + ".sinkhorn_tol: must be > 0");
  if (cfg.sinkhorn_max_iter < 1)
    throw ConfigError(path + ".sinkhorn_max_iter: must be >= 1");
  return cfg;
}

nlohmann::json generator_spec_to_json(const GeneratorSpec& spec) {
  json classes = json::array();
  for (const ClassSpec& c : spec.classes)
    classes.push_back(
        {{"name", c.name}, {"shape", shape_name(c.shape)}, {"hue", c.hue}});
  json j;
  j["classes"] = classes;
  j["image_size"] = spec.image_size;
  j["shapes_min"] = spec.shapes_min;
  j["shapes_max"] = spec.shapes_max;
  j["fragments_min"] = spec.fragments_min;
  j["fragments_max"] = spec.fragments_max;
  j["fragmentation"] =
      spec.mode == FragmentMode::kGrid ? "grid" : "voronoi";
  j["seed"] = spec.seed;
  return j;
}

GeneratorSpec generator_spec_from_json(const nlohmann::json& j,
                                       const std::string& path) {
  GeneratorSpec spec = default_generator_spec();
  ObjReader r(j, path);
  if (const json* cl = r.sub("classes")) {
    if (!cl->is_array() || cl->empty())
      throw ConfigError(path + ".classes: expected a non-empty array");
    spec.classes.clear();
    std::size_t idx = 0;
    for (const json& e : *cl) {
      const std::string cpath = path + ".classes[" + std::to_string(idx) + "]";
      ObjReader rc(e, cpath);
      ClassSpec c;
      rc.get("name", c.name);
      std::string shape = "background";
      rc.get("shape", shape);
      c.shape = shape_from_name(shape, cpath + ".shape");
      rc.get("hue", c.hue);
      rc.finish();
      spec.classes.push_back(std::move(c));
      ++idx;
    }
  }
  r.get("image_size", spec.image_size);
  r.get("shapes_min", spec.shapes_min);
  r.get("shapes_max", spec.shapes_max);
  r.get("fragments_min", spec.fragments_min);
  r.get("fragments_max", spec.fragments_max);
  if (r.has("fragmentation")) {
    std::string mode;
    r.get("fragmentation", mode);
    if (mode == "grid") {
      spec.mode = FragmentMode::kGrid;
    } else if (mode == "voronoi") {
      spec.mode = FragmentMode::kVoronoi;
    } else {
      throw ConfigError(path + ".fragmentation: expected 'grid' or 'voronoi'");
    }
  }
  r.get("seed", spec.seed);
  r.finish();

  if (spec.classes.empty())
    throw ConfigError(path + ".classes: need at least one class");
  if (spec.classes.front().shape != ShapeKind::kBackground)
    throw ConfigError(path + ".classes: class 0 must be the background");
  if (spec.image_size < 4)
    throw ConfigError(path + ".image_size: too small");
  if (spec.shapes_min > spec.shapes_max)
    throw ConfigError(path + ".shapes_min: exceeds shapes_max");
  if (spec.fragments_min < 1 || spec.fragments_min > spec.fragments_max)
    throw ConfigError(path + ".fragments_min: invalid fragment range");
  return spec;
}

}  // namespace pxc
