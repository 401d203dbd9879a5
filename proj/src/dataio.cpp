#include "pxc/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "pxc/config_json.hpp"
#include "pxc/errors.hpp"

namespace fs = std::filesystem;

namespace pxc {

namespace {

constexpr char kMagic[4] = {'P', 'X', 'C', '1'};

void rgb_from_hsv(double h, double s, double v, double* rgb) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c; g = x;
  } else if (hp < 2) {
    r = x; g = c;
  } else if (hp < 3) {
    g = c; b = x;
  } else if (hp < 4) {
    g = x; b = c;
  } else if (hp < 5) {
    r = x; b = c;
  } else {
    r = c; b = x;
  }
  const double m = v - c;
  rgb[0] = std::clamp(r + m, 0.0, 1.0);
  rgb[1] = std::clamp(g + m, 0.0, 1.0);
  rgb[2] = std::clamp(b + m, 0.0, 1.0);
}

Mask rasterize(ShapeKind kind, std::size_t size, double cy, double cx,
               double r) {
  Mask m(size, size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) - cy;
      const double dx = static_cast<double>(x) - cx;
      bool in = false;
      switch (kind) {
        case ShapeKind::kCircle:
          in = dy * dy + dx * dx <= r * r;
          break;
        case ShapeKind::kRectangle:
          in = std::abs(dy) <= r * 0.85 && std::abs(dx) <= r * 1.1;
          break;
        case ShapeKind::kTriangle: {
          // Isoceles, apex up: width grows linearly from apex to base.
          const double t = (dy + r) / (2.0 * r);
          in = t >= 0.0 && t <= 1.0 && std::abs(dx) <= t * r;
          break;
        }
        case ShapeKind::kBackground:
          break;
      }
      if (in) m.at(y, x) = 1;
    }
  }
  return m;
}

bool overlaps(const Mask& m, const Mask& occupied) {
  for (std::size_t i = 0; i < m.v.size(); ++i)
    if (m.v[i] && occupied.v[i]) return true;
  return false;
}

// --------------------------- binary helpers ---------------------------

void put_u32(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_f64(std::string& buf, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i)
    buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string name)
      : bytes_(std::move(bytes)), name_(std::move(name)) {}

  void expect_magic() {
    if (bytes_.size() < 4 || std::memcmp(bytes_.data(), kMagic, 4) != 0)
      throw BadMagic(name_ + ": bad magic");
    pos_ = 4;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(bytes_[pos_ + i]);
    pos_ += 4;
    return v;
  }

  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(
        static_cast<std::uint8_t>(bytes_[pos_]) |
        (static_cast<std::uint8_t>(bytes_[pos_ + 1]) << 8));
    pos_ += 2;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i)
      bits = (bits << 8) | static_cast<std::uint8_t>(bytes_[pos_ + i]);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_exhausted() const {
    if (pos_ != bytes_.size())
      throw ShapeMismatch(name_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw ShapeMismatch(name_ + ": truncated file");
  }

  std::string bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::string sample_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu", i);
  return buf;
}

}  // namespace

GeneratorSpec default_generator_spec() {
  GeneratorSpec spec;
  spec.classes = {
      {"background", ShapeKind::kBackground, 0.12},
      {"circle", ShapeKind::kCircle, 0.95},
      {"rectangle", ShapeKind::kRectangle, 0.38},
      {"triangle", ShapeKind::kTriangle, 0.62},
  };
  return spec;
}

SceneSample generate_scene(const GeneratorSpec& spec, std::mt19937_64& rng) {
  if (spec.classes.empty())
    throw ConfigError("generate_scene: no classes configured");
  const std::size_t size = spec.image_size;
  SceneSample s;
  s.image = DenseGrid({size, size, 3});
  s.gt_labels = LabelGrid(size, size, 0);

  // Textured background around the background class hue.
  const ClassSpec& bg = spec.classes.front();
  double base[3];
  std::uniform_real_distribution<double> hue_jit(-0.04, 0.04);
  std::uniform_real_distribution<double> val_jit(-0.08, 0.08);
  rgb_from_hsv(bg.hue + hue_jit(rng), 0.25, 0.45 + val_jit(rng), base);
  std::uniform_real_distribution<double> noise(-0.06, 0.06);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        s.image(y, x, c) = std::clamp(base[c] + noise(rng), 0.0, 1.0);

  const std::size_t num_shape_classes = spec.classes.size() - 1;
  Mask occupied(size, size);
  MaskSet shape_masks;
  std::vector<std::uint16_t> shape_class;

  if (num_shape_classes > 0) {
    std::size_t want = 0;
    {
      std::uniform_int_distribution<std::size_t> ns(spec.shapes_min,
                                                    spec.shapes_max);
      want = std::min(ns(rng), num_shape_classes);
    }
    // Distinct classes per image, order randomized.
    std::vector<std::size_t> ids(num_shape_classes);
    std::iota(ids.begin(), ids.end(), 1);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(want);

    for (std::size_t cls : ids) {
      const ClassSpec& cs = spec.classes[cls];
      const double base_r = static_cast<double>(size) / 6.0;
      bool placed = false;
      double radius = base_r;
      for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
        if (attempt > 0 && attempt % 8 == 0) radius *= 0.85;
        std::uniform_real_distribution<double> rr(radius * 0.75, radius * 1.15);
        const double r = rr(rng);
        const double margin = r * 1.2 + 1.0;
        if (2.0 * margin >= static_cast<double>(size)) continue;
        std::uniform_real_distribution<double> pc(margin,
                                                  static_cast<double>(size) -
                                                      margin);
        const double cy = pc(rng), cx = pc(rng);
        Mask m = rasterize(cs.shape, size, cy, cx, r);
        if (!m.any() || overlaps(m, occupied)) continue;

        std::uniform_real_distribution<double> h_jit(-0.05, 0.05);
        std::uniform_real_distribution<double> s_rng(0.6, 0.9);
        std::uniform_real_distribution<double> v_rng(0.6, 0.95);
        double rgb[3];
        rgb_from_hsv(cs.hue + h_jit(rng), s_rng(rng), v_rng(rng), rgb);
        for (std::size_t y = 0; y < size; ++y) {
          for (std::size_t x = 0; x < size; ++x) {
            if (!m.at(y, x)) continue;
            occupied.at(y, x) = 1;
            s.gt_labels.at(y, x) = static_cast<std::uint16_t>(cls);
            for (std::size_t c = 0; c < 3; ++c) s.image(y, x, c) = rgb[c];
          }
        }
        shape_masks.push_back(std::move(m));
        shape_class.push_back(static_cast<std::uint16_t>(cls));
        placed = true;
      }
      if (!placed)
        throw PlacementFailure("generate_scene: could not place class '" +
                               cs.name + "'");
    }
  }

  // Background mask is the complement of all shapes.
  Mask bg_mask(size, size);
  for (std::size_t i = 0; i < bg_mask.v.size(); ++i)
    bg_mask.v[i] = occupied.v[i] ? 0 : 1;
  s.gt_masks.push_back(std::move(bg_mask));
  s.gt_mask_class.push_back(0);
  for (std::size_t i = 0; i < shape_masks.size(); ++i) {
    s.gt_masks.push_back(std::move(shape_masks[i]));
    s.gt_mask_class.push_back(shape_class[i]);
  }
  return s;
}

namespace {

MaskSet fragment_grid(const Mask& mask, std::mt19937_64& rng, std::size_t n) {
  // Bounding box.
  std::size_t r0 = mask.h, r1 = 0, c0 = mask.w, c1 = 0;
  for (std::size_t y = 0; y < mask.h; ++y)
    for (std::size_t x = 0; x < mask.w; ++x)
      if (mask.at(y, x)) {
        r0 = std::min(r0, y);
        r1 = std::max(r1, y);
        c0 = std::min(c0, x);
        c1 = std::max(c1, x);
      }
  const double hb = static_cast<double>(r1 - r0 + 1);
  const double wb = static_cast<double>(c1 - c0 + 1);
  const std::size_t gr = static_cast<std::size_t>(
      std::ceil(std::sqrt(static_cast<double>(n))));
  const std::size_t gc = (n + gr - 1) / gr;

  auto cuts = [&](std::size_t parts, double extent,
                  std::size_t origin) -> std::vector<double> {
    std::vector<double> b;
    b.push_back(static_cast<double>(origin));
    for (std::size_t i = 1; i < parts; ++i) {
      const double cell = extent / static_cast<double>(parts);
      std::uniform_real_distribution<double> jit(-cell / 4.0, cell / 4.0);
      b.push_back(static_cast<double>(origin) +
                  cell * static_cast<double>(i) + jit(rng));
    }
    b.push_back(static_cast<double>(origin) + extent);
    std::sort(b.begin(), b.end());
    return b;
  };
  const std::vector<double> row_cuts = cuts(gr, hb, r0);
  const std::vector<double> col_cuts = cuts(gc, wb, c0);

  auto band = [](const std::vector<double>& cuts_v, double p) {
    std::size_t lo = 0;
    for (std::size_t i = 1; i + 1 < cuts_v.size(); ++i)
      if (p >= cuts_v[i]) lo = i;
    return lo;
  };

  std::vector<Mask> cells(gr * gc, Mask(mask.h, mask.w));
  for (std::size_t y = 0; y < mask.h; ++y) {
    for (std::size_t x = 0; x < mask.w; ++x) {
      if (!mask.at(y, x)) continue;
      const std::size_t by = band(row_cuts, static_cast<double>(y) + 0.5);
      const std::size_t bx = band(col_cuts, static_cast<double>(x) + 0.5);
      cells[by * gc + bx].at(y, x) = 1;
    }
  }
  MaskSet out;
  for (Mask& c : cells)
    if (c.any()) out.push_back(std::move(c));
  return out;
}

MaskSet fragment_voronoi(const Mask& mask, std::mt19937_64& rng,
                         std::size_t n) {
  std::vector<std::size_t> pixels;
  for (std::size_t i = 0; i < mask.v.size(); ++i)
    if (mask.v[i]) pixels.push_back(i);
  const std::size_t seeds = std::min(n, pixels.size());
  // Partial Fisher-Yates for distinct seed pixels.
  std::vector<std::size_t> pool = pixels;
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < seeds; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    chosen.push_back(pool[i]);
  }
  std::vector<Mask> cells(seeds, Mask(mask.h, mask.w));
  for (std::size_t p : pixels) {
    const double py = static_cast<double>(p / mask.w);
    const double px = static_cast<double>(p % mask.w);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t sidx = 0; sidx < seeds; ++sidx) {
      const double sy = static_cast<double>(chosen[sidx] / mask.w);
      const double sx = static_cast<double>(chosen[sidx] % mask.w);
      const double dd = (py - sy) * (py - sy) + (px - sx) * (px - sx);
      if (dd < best_d) {
        best_d = dd;
        best = sidx;
      }
    }
    cells[best].v[p] = 1;
  }
  MaskSet out;
  for (Mask& c : cells)
    if (c.any()) out.push_back(std::move(c));
  return out;
}

}  // namespace

MaskSet fragment_masks(const MaskSet& gt_masks, std::mt19937_64& rng,
                       std::size_t fragments_min, std::size_t fragments_max,
                       FragmentMode mode) {
  if (fragments_min < 1 || fragments_min > fragments_max)
    throw ConfigError("fragment_masks: invalid fragment range");
  MaskSet out;
  for (const Mask& m : gt_masks) {
    if (!m.any()) continue;
    std::uniform_int_distribution<std::size_t> nf(fragments_min,
                                                  fragments_max);
    const std::size_t n = nf(rng);
    if (n == 1) {
      out.push_back(m);
      continue;
    }
    MaskSet parts = mode == FragmentMode::kGrid ? fragment_grid(m, rng, n)
                                                : fragment_voronoi(m, rng, n);
    for (Mask& p : parts) out.push_back(std::move(p));
  }
  return out;
}

std::vector<SceneSample> build_dataset(const GeneratorSpec& spec,
                                       std::size_t num_samples) {
  std::vector<SceneSample> samples;
  samples.reserve(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) {
    std::mt19937_64 rng_scene = substream(spec.seed, stream::kScene, i);
    SceneSample s = generate_scene(spec, rng_scene);
    std::mt19937_64 rng_frag = substream(spec.seed, stream::kFragment, i);
    s.unlabeled_masks = fragment_masks(s.gt_masks, rng_frag,
                                       spec.fragments_min, spec.fragments_max,
                                       spec.mode);
    samples.push_back(std::move(s));
  }
  return samples;
}

void write_mask_file(const MaskSet& masks, const std::string& path) {
  std::string buf(kMagic, 4);
  const std::size_t h = masks.empty() ? 0 : masks.front().h;
  const std::size_t w = masks.empty() ? 0 : masks.front().w;
  put_u32(buf, static_cast<std::uint32_t>(masks.size()));
  put_u32(buf, static_cast<std::uint32_t>(h));
  put_u32(buf, static_cast<std::uint32_t>(w));
  for (const Mask& m : masks) {
    if (m.h != h || m.w != w)
      throw ShapeMismatch("write_mask_file: inconsistent mask shapes");
    for (std::uint8_t b : m.v) buf.push_back(static_cast<char>(b ? 1 : 0));
  }
  spit(path, buf);
}

MaskSet read_mask_file(const std::string& path) {
  ByteReader r(slurp(path), path);
  r.expect_magic();
  const std::uint32_t n = r.u32();
  const std::uint32_t h = r.u32();
  const std::uint32_t w = r.u32();
  if (r.remaining() != static_cast<std::size_t>(n) * h * w)
    throw ShapeMismatch(path + ": payload size mismatch");
  MaskSet masks;
  masks.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Mask m(h, w);
    for (std::size_t p = 0; p < m.v.size(); ++p) m.v[p] = r.u8() ? 1 : 0;
    masks.push_back(std::move(m));
  }
  r.expect_exhausted();
  return masks;
}

void write_dataset(const std::vector<SceneSample>& samples,
                   const std::vector<std::string>& class_names,
                   const std::string& dir) {
  if (samples.empty()) throw ConfigError("write_dataset: no samples");
  fs::create_directories(dir);
  const std::size_t H = samples.front().image.dim(0);
  const std::size_t W = samples.front().image.dim(1);

  nlohmann::json manifest;
  manifest["format_version"] = "PXC1";
  manifest["sample_count"] = samples.size();
  manifest["height"] = H;
  manifest["width"] = W;
  manifest["class_names"] = class_names;
  spit(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");

  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SceneSample& s = samples[i];
    if (s.image.dim(0) != H || s.image.dim(1) != W)
      throw ShapeMismatch("write_dataset: inconsistent sample shapes");
    const std::string stem = sample_stem(i);

    std::string img(kMagic, 4);
    put_u32(img, static_cast<std::uint32_t>(H));
    put_u32(img, static_cast<std::uint32_t>(W));
    put_u32(img, static_cast<std::uint32_t>(s.image.dim(2)));
    for (double v : s.image.data) put_f64(img, v);
    spit(fs::path(dir) / (stem + ".img"), img);

    std::string msk(kMagic, 4);
    put_u32(msk, static_cast<std::uint32_t>(s.unlabeled_masks.size()));
    put_u32(msk, static_cast<std::uint32_t>(H));
    put_u32(msk, static_cast<std::uint32_t>(W));
    for (const Mask& m : s.unlabeled_masks) {
      if (m.h != H || m.w != W)
        throw ShapeMismatch("write_dataset: mask resolution mismatch");
      for (std::uint8_t b : m.v) msk.push_back(static_cast<char>(b ? 1 : 0));
    }
    spit(fs::path(dir) / (stem + ".msk"), msk);

    std::string lbl(kMagic, 4);
    put_u32(lbl, static_cast<std::uint32_t>(H));
    put_u32(lbl, static_cast<std::uint32_t>(W));
    for (std::uint16_t v : s.gt_labels.v) put_u16(lbl, v);
    spit(fs::path(dir) / (stem + ".lbl"), lbl);
  }
}

Dataset read_dataset(const std::string& dir) {
  const fs::path root(dir);
  const fs::path mpath = root / "manifest.json";
  if (!fs::exists(mpath))
    throw CorruptManifest(dir + ": missing manifest.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(slurp(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptManifest(dir + ": unparsable manifest: " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format_version", "") != "PXC1")
    throw CorruptManifest(dir + ": wrong or missing format_version");
  if (!manifest.contains("sample_count") || !manifest.contains("height") ||
      !manifest.contains("width") || !manifest.contains("class_names"))
    throw CorruptManifest(dir + ": manifest missing required fields");

  Dataset ds;
  const std::size_t count = manifest["sample_count"].get<std::size_t>();
  ds.height = manifest["height"].get<std::size_t>();
  ds.width = manifest["width"].get<std::size_t>();
  ds.class_names =
      manifest["class_names"].get<std::vector<std::string>>();
  if (count == 0) throw CorruptManifest(dir + ": empty dataset");

  // Validate every header against the manifest before loading any payload.
  for (std::size_t i = 0; i < count; ++i) {
    const std::string stem = sample_stem(i);
    for (const char* ext : {".img", ".msk", ".lbl"}) {
      const fs::path p = root / (stem + ext);
      if (!fs::exists(p))
        throw CorruptManifest(dir + ": missing sample file " + stem + ext);
    }
    {
      ByteReader r(slurp(root / (stem + ".img")), stem + ".img");
      r.expect_magic();
      const auto H = r.u32(), W = r.u32(), C = r.u32();
      if (H != ds.height || W != ds.width || C != 3)
        throw ShapeMismatch(stem + ".img: header disagrees with manifest");
      if (r.remaining() != static_cast<std::size_t>(H) * W * C * 8)
        throw ShapeMismatch(stem + ".img: payload size mismatch");
    }
    {
      ByteReader r(slurp(root / (stem + ".msk")), stem + ".msk");
      r.expect_magic();
      const auto N = r.u32(), H = r.u32(), W = r.u32();
      if (H != ds.height || W != ds.width)
        throw ShapeMismatch(stem + ".msk: header disagrees with manifest");
      if (r.remaining() != static_cast<std::size_t>(N) * H * W)
        throw ShapeMismatch(stem + ".msk: payload size mismatch");
    }
    {
      ByteReader r(slurp(root / (stem + ".lbl")), stem + ".lbl");
      r.expect_magic();
      const auto H = r.u32(), W = r.u32();
      if (H != ds.height || W != ds.width)
        throw ShapeMismatch(stem + ".lbl: header disagrees with manifest");
      if (r.remaining() != static_cast<std::size_t>(H) * W * 2)
        throw ShapeMismatch(stem + ".lbl: payload size mismatch");
    }
  }

  for (std::size_t i = 0; i < count; ++i) {
    const std::string stem = sample_stem(i);
    SceneSample s;
    {
      ByteReader r(slurp(root / (stem + ".img")), stem + ".img");
      r.expect_magic();
      const auto H = r.u32(), W = r.u32(), C = r.u32();
      s.image = DenseGrid({H, W, C});
      for (double& v : s.image.data) v = r.f64();
    }
    s.unlabeled_masks = read_mask_file((root / (stem + ".msk")).string());
    {
      ByteReader r(slurp(root / (stem + ".lbl")), stem + ".lbl");
      r.expect_magic();
      const auto H = r.u32(), W = r.u32();
      s.gt_labels = LabelGrid(H, W);
      for (auto& v : s.gt_labels.v) v = r.u16();
    }
    // Ground-truth masks are recovered from the label map: one mask per
    // class present (the generator places at most one instance per class).
    for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
      Mask m(ds.height, ds.width);
      bool any = false;
      for (std::size_t p = 0; p < s.gt_labels.v.size(); ++p) {
        if (s.gt_labels.v[p] == c) {
          m.v[p] = 1;
          any = true;
        }
      }
      if (any) {
        s.gt_masks.push_back(std::move(m));
        s.gt_mask_class.push_back(static_cast<std::uint16_t>(c));
      }
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

struct TensorRef {
  std::string name;
  const DenseGrid* grid;
};

std::vector<TensorRef> tensor_list(const TrainState& state) {
  return {
      {"student.weight", &state.student.weight},
      {"student.bias", &state.student.bias},
      {"momentum.weight", &state.momentum.weight},
      {"momentum.bias", &state.momentum.bias},
      {"prompts.tokens", &state.prompts.tokens},
      {"prompts.proj", &state.prompts.proj},
      {"prompts.proj_bias", &state.prompts.proj_bias},
      {"decoder.kernel", &state.decoder.kernel},
      {"decoder.bias", &state.decoder.bias},
      {"opt.enc_weight.m", &state.opt.enc_weight.m},
      {"opt.enc_weight.v", &state.opt.enc_weight.v},
      {"opt.enc_bias.m", &state.opt.enc_bias.m},
      {"opt.enc_bias.v", &state.opt.enc_bias.v},
      {"opt.tokens.m", &state.opt.tokens.m},
      {"opt.tokens.v", &state.opt.tokens.v},
      {"opt.kernel.m", &state.opt.kernel.m},
      {"opt.kernel.v", &state.opt.kernel.v},
      {"opt.dec_bias.m", &state.opt.dec_bias.m},
      {"opt.dec_bias.v", &state.opt.dec_bias.v},
  };
}

std::vector<std::pair<std::string, DenseGrid*>> tensor_list_mut(
    TrainState& state) {
  std::vector<std::pair<std::string, DenseGrid*>> out;
  for (const TensorRef& t : tensor_list(state))
    out.emplace_back(t.name, const_cast<DenseGrid*>(t.grid));
  return out;
}

}  // namespace

void write_checkpoint(const TrainState& state, const std::string& prefix) {
  nlohmann::json manifest;
  manifest["format"] = "PXC1";
  manifest["kind"] = "checkpoint";
  manifest["step"] = state.step;
  manifest["config"] = train_config_to_json(state.config);

  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const TensorRef& t : tensor_list(state)) {
    nlohmann::json e;
    e["name"] = t.name;
    e["shape"] = t.grid->shape;
    e["offset"] = blob.size();
    tensors.push_back(std::move(e));
    for (double v : t.grid->data) put_f64(blob, v);
  }
  manifest["tensors"] = std::move(tensors);
  spit(prefix + ".json", manifest.dump(2) + "\n");
  spit(prefix + ".bin", blob);
}

namespace {

nlohmann::json load_checkpoint_manifest(const std::string& prefix) {
  const fs::path mpath = prefix + ".json";
  if (!fs::exists(mpath))
    throw IoError("checkpoint manifest not found: " + mpath.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(slurp(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptManifest(prefix + ": unparsable manifest: " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != "PXC1" ||
      manifest.value("kind", "") != "checkpoint" ||
      !manifest.contains("tensors") || !manifest.contains("step") ||
      !manifest.contains("config"))
    throw CorruptManifest(prefix + ": not a checkpoint manifest");
  return manifest;
}

}  // namespace

TrainConfig read_checkpoint_config(const std::string& prefix) {
  const nlohmann::json manifest = load_checkpoint_manifest(prefix);
  return train_config_from_json(manifest["config"], "checkpoint.config");
}

TrainState read_checkpoint(const std::string& prefix,
                           const TrainConfig& expected) {
  const nlohmann::json manifest = load_checkpoint_manifest(prefix);
  TrainState state = init_train_state(expected);
  state.step = manifest["step"].get<std::size_t>();

  const std::string blob = slurp(prefix + ".bin");
  std::size_t expected_total = 0;
  for (const auto& e : manifest["tensors"])
    expected_total +=
        DenseGrid::product(e["shape"].get<std::vector<std::size_t>>()) * 8;
  if (blob.size() != expected_total)
    throw ShapeMismatch(prefix + ".bin: blob size disagrees with manifest");

  auto tensors = tensor_list_mut(state);
  std::vector<bool> filled(tensors.size(), false);
  for (const auto& e : manifest["tensors"]) {
    const std::string name = e["name"].get<std::string>();
    const auto shape = e["shape"].get<std::vector<std::size_t>>();
    const std::size_t offset = e["offset"].get<std::size_t>();
    auto it = std::find_if(tensors.begin(), tensors.end(),
                           [&](const auto& t) { return t.first == name; });
    if (it == tensors.end())
      throw CorruptManifest(prefix + ": unexpected tensor '" + name + "'");
    DenseGrid* grid = it->second;
    if (grid->shape != shape)
      throw ShapeMismatch("checkpoint tensor '" + name +
                          "' shape disagrees with the requested config");
    const std::size_t bytes = grid->numel() * 8;
    if (offset + bytes > blob.size())
      throw ShapeMismatch(prefix + ": tensor '" + name + "' overruns blob");
    ByteReader r(blob.substr(offset, bytes), name);
    for (double& v : grid->data) v = r.f64();
    filled[static_cast<std::size_t>(it - tensors.begin())] = true;
  }
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (!filled[i])
      throw CorruptManifest(prefix + ": tensor '" + tensors[i].first +
                            "' missing from checkpoint");
  return state;
}

}  // namespace pxc
