#include <filesystem>
#include <fstream>
#include <random>

#include <doctest.h>

#include "pxc/dataio.hpp"
#include "pxc/errors.hpp"

using namespace pxc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("pxc_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool files_identical(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)),
                 std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)),
                 std::istreambuf_iterator<char>());
  return sa == sb;
}

}  // namespace

TEST_CASE("generate_scene single background class") {
  GeneratorSpec spec;
  spec.classes = {{"background", ShapeKind::kBackground, 0.1}};
  spec.image_size = 16;
  spec.shapes_min = 0;
  spec.shapes_max = 0;
  std::mt19937_64 rng = substream(spec.seed, stream::kScene, 0);
  const SceneSample s = generate_scene(spec, rng);
  REQUIRE(s.gt_masks.size() == 1);
  CHECK(s.gt_masks[0].count() == 256);
  for (auto v : s.gt_labels.v) CHECK(v == 0);
}

TEST_CASE("generate_scene four classes: full coverage, disjoint masks") {
  const GeneratorSpec spec = default_generator_spec();
  for (std::size_t idx = 0; idx < 5; ++idx) {
    std::mt19937_64 rng = substream(7, stream::kScene, idx);
    const SceneSample s = generate_scene(spec, rng);
    // Labels cover all pixels (never the unlabeled sentinel).
    for (auto v : s.gt_labels.v) CHECK(v < spec.classes.size());
    // Masks are pairwise disjoint and cover everything.
    std::vector<int> hits(64 * 64, 0);
    for (const Mask& m : s.gt_masks)
      for (std::size_t p = 0; p < m.v.size(); ++p) hits[p] += m.v[p];
    for (int h : hits) CHECK(h == 1);
    // Labels agree with the per-mask classes.
    for (std::size_t n = 0; n < s.gt_masks.size(); ++n)
      for (std::size_t p = 0; p < s.gt_masks[n].v.size(); ++p)
        if (s.gt_masks[n].v[p])
          CHECK(s.gt_labels.v[p] == s.gt_mask_class[n]);
    // Image values stay in range.
    for (double v : s.image.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("generate_scene is deterministic per seed") {
  const GeneratorSpec spec = default_generator_spec();
  std::mt19937_64 a = substream(spec.seed, stream::kScene, 3);
  std::mt19937_64 b = substream(spec.seed, stream::kScene, 3);
  const SceneSample s1 = generate_scene(spec, a);
  const SceneSample s2 = generate_scene(spec, b);
  CHECK(s1.image.data == s2.image.data);
  CHECK(s1.gt_labels.v == s2.gt_labels.v);
}

TEST_CASE("fragment_masks identity, exact grid split, partition property") {
  Mask square(8, 8);
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 2; x < 6; ++x) square.at(y, x) = 1;

  std::mt19937_64 rng(1);
  const MaskSet same = fragment_masks({square}, rng, 1, 1, FragmentMode::kGrid);
  REQUIRE(same.size() == 1);
  CHECK(same[0].v == square.v);

  // 2x2 mask split into 4 -> four single-pixel fragments.
  Mask tiny(4, 4);
  tiny.at(1, 1) = tiny.at(1, 2) = tiny.at(2, 1) = tiny.at(2, 2) = 1;
  std::mt19937_64 rng2(2);
  const MaskSet four = fragment_masks({tiny}, rng2, 4, 4, FragmentMode::kGrid);
  REQUIRE(four.size() == 4);
  for (const Mask& f : four) CHECK(f.count() == 1);

  // Partition property in both modes on an irregular mask.
  Mask blob(16, 16);
  std::mt19937_64 rng3(3);
  std::uniform_int_distribution<int> bit(0, 1);
  for (auto& v : blob.v) v = static_cast<std::uint8_t>(bit(rng3));
  for (FragmentMode mode : {FragmentMode::kGrid, FragmentMode::kVoronoi}) {
    std::mt19937_64 r(17);
    const MaskSet frags = fragment_masks({blob}, r, 3, 8, mode);
    std::vector<int> hits(blob.v.size(), 0);
    for (const Mask& f : frags) {
      CHECK(f.any());
      for (std::size_t p = 0; p < f.v.size(); ++p) hits[p] += f.v[p];
    }
    for (std::size_t p = 0; p < blob.v.size(); ++p)
      CHECK(hits[p] == (blob.v[p] ? 1 : 0));
  }
}

TEST_CASE("fragments never cross class boundaries") {
  const GeneratorSpec spec = default_generator_spec();
  const auto samples = build_dataset(spec, 4);
  for (const SceneSample& s : samples) {
    for (const Mask& f : s.unlabeled_masks) {
      std::uint16_t cls = kUnlabeled;
      for (std::size_t p = 0; p < f.v.size(); ++p) {
        if (!f.v[p]) continue;
        if (cls == kUnlabeled) cls = s.gt_labels.v[p];
        CHECK(s.gt_labels.v[p] == cls);
      }
    }
  }
}

TEST_CASE("dataset round trip is bit-exact") {
  const GeneratorSpec spec = default_generator_spec();
  const auto samples = build_dataset(spec, 3);
  const fs::path dir = temp_dir("roundtrip");
  write_dataset(samples, {"background", "circle", "rectangle", "triangle"},
                dir.string());
  const Dataset ds = read_dataset(dir.string());
  REQUIRE(ds.samples.size() == 3);
  CHECK(ds.class_names.size() == 4);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(ds.samples[i].image.data == samples[i].image.data);
    CHECK(ds.samples[i].gt_labels.v == samples[i].gt_labels.v);
    REQUIRE(ds.samples[i].unlabeled_masks.size() ==
            samples[i].unlabeled_masks.size());
    for (std::size_t n = 0; n < samples[i].unlabeled_masks.size(); ++n)
      CHECK(ds.samples[i].unlabeled_masks[n].v ==
            samples[i].unlabeled_masks[n].v);
    // Recovered ground-truth masks match the originals (same class order).
    REQUIRE(ds.samples[i].gt_masks.size() == samples[i].gt_masks.size());
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset writes are byte-identical for the same spec and seed") {
  const GeneratorSpec spec = default_generator_spec();
  const fs::path d1 = temp_dir("bytes1");
  const fs::path d2 = temp_dir("bytes2");
  write_dataset(build_dataset(spec, 2), {"a", "b", "c", "d"}, d1.string());
  write_dataset(build_dataset(spec, 2), {"a", "b", "c", "d"}, d2.string());
  for (const auto& entry : fs::directory_iterator(d1))
    CHECK(files_identical(entry.path(), d2 / entry.path().filename()));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("dataset loader rejects corruption loudly") {
  const GeneratorSpec spec = default_generator_spec();
  const auto samples = build_dataset(spec, 2);
  const fs::path dir = temp_dir("corrupt");
  write_dataset(samples, {"a", "b", "c", "d"}, dir.string());

  // Truncated mask file.
  {
    const fs::path msk = dir / "00001.msk";
    std::string bytes;
    {
      std::ifstream in(msk, std::ios::binary);
      bytes.assign((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
    }
    std::ofstream out(msk, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(read_dataset(dir.string()), ShapeMismatch);

  // Bad magic.
  {
    std::ofstream out(dir / "00001.msk", std::ios::binary | std::ios::trunc);
    out << "NOPE";
  }
  CHECK_THROWS_AS(read_dataset(dir.string()), BadMagic);

  // Empty directory -> corrupt manifest.
  const fs::path empty = temp_dir("empty");
  CHECK_THROWS_AS(read_dataset(empty.string()), CorruptManifest);

  fs::remove_all(dir);
  fs::remove_all(empty);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  TrainConfig cfg;
  cfg.k = 4;
  cfg.d = 8;
  cfg.patch = 4;
  cfg.seed = 77;
  TrainState state = init_train_state(cfg);
  state.step = 123;
  // Touch the moments so the round trip covers them too.
  state.opt.tokens.m.data[0] = 0.5;
  state.opt.kernel.v.data[1] = 0.25;

  const fs::path dir = temp_dir("ckpt");
  const std::string prefix = (dir / "state").string();
  write_checkpoint(state, prefix);

  const TrainConfig loaded_cfg = read_checkpoint_config(prefix);
  CHECK(loaded_cfg.k == cfg.k);
  CHECK(loaded_cfg.seed == cfg.seed);

  const TrainState loaded = read_checkpoint(prefix, loaded_cfg);
  CHECK(loaded.step == 123);
  CHECK(loaded.student.weight.data == state.student.weight.data);
  CHECK(loaded.student.bias.data == state.student.bias.data);
  CHECK(loaded.momentum.weight.data == state.momentum.weight.data);
  CHECK(loaded.prompts.tokens.data == state.prompts.tokens.data);
  CHECK(loaded.prompts.proj.data == state.prompts.proj.data);
  CHECK(loaded.decoder.kernel.data == state.decoder.kernel.data);
  CHECK(loaded.opt.tokens.m.data == state.opt.tokens.m.data);
  CHECK(loaded.opt.kernel.v.data == state.opt.kernel.v.data);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint with mismatched k names the offending tensor") {
  TrainConfig cfg;
  cfg.k = 4;
  cfg.d = 8;
  cfg.patch = 4;
  TrainState state = init_train_state(cfg);
  const fs::path dir = temp_dir("ckpt_k");
  const std::string prefix = (dir / "state").string();
  write_checkpoint(state, prefix);

  TrainConfig other = cfg;
  other.k = 8;
  try {
    read_checkpoint(prefix, other);
    FAIL("expected ShapeMismatch");
  } catch (const ShapeMismatch& e) {
    CHECK(std::string(e.what()).find("prompts.tokens") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("mask file round trip") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> bit(0, 1);
  MaskSet masks;
  for (int n = 0; n < 3; ++n) {
    Mask m(6, 7);
    for (auto& v : m.v) v = static_cast<std::uint8_t>(bit(rng));
    masks.push_back(std::move(m));
  }
  const fs::path dir = temp_dir("maskfile");
  const std::string path = (dir / "m.msk").string();
  write_mask_file(masks, path);
  const MaskSet back = read_mask_file(path);
  REQUIRE(back.size() == 3);
  for (std::size_t n = 0; n < 3; ++n) CHECK(back[n].v == masks[n].v);
  fs::remove_all(dir);
}
