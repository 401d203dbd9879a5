#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pxc/grid.hpp"
#include "pxc/rng.hpp"
#include "pxc/training.hpp"

namespace pxc {

// Synthetic scenes of colored shapes over a textured background, SAM-style
// fragmentation of the ground-truth masks, and the on-disk formats shared
// with the CLI (magic "PXC1", little-endian payloads).

enum class ShapeKind { kBackground, kCircle, kRectangle, kTriangle };

struct ClassSpec {
  std::string name;
  ShapeKind shape = ShapeKind::kBackground;
  double hue = 0.0;  // [0, 1)
};

enum class FragmentMode { kGrid, kVoronoi };

struct GeneratorSpec {
  std::vector<ClassSpec> classes;  // index 0 is the background class
  std::size_t image_size = 64;
  std::size_t shapes_min = 2;
  std::size_t shapes_max = 3;
  std::size_t fragments_min = 3;
  std::size_t fragments_max = 8;
  FragmentMode mode = FragmentMode::kGrid;
  Seed seed = 7;
};

GeneratorSpec default_generator_spec();

struct SceneSample {
  DenseGrid image;      // H x W x 3, values in [0, 1]
  LabelGrid gt_labels;  // per-pixel class ids
  MaskSet gt_masks;     // pairwise disjoint, one per class present
  std::vector<std::uint16_t> gt_mask_class;  // class id of each gt mask
  MaskSet unlabeled_masks;  // fragments; the only training-time mask input
};

// Places non-overlapping shapes of distinct classes over the background.
// Colors are perturbed per instance. Does not fragment; unlabeled_masks is
// left empty. Throws PlacementFailure when a shape cannot be placed even
// after shrinking.
SceneSample generate_scene(const GeneratorSpec& spec, std::mt19937_64& rng);

// Partitions each ground-truth mask into fragments (jittered grid cells or
// Voronoi cells seeded inside the mask). Fragments of one mask are disjoint
// and their union reproduces the mask exactly; empty cells are dropped.
MaskSet fragment_masks(const MaskSet& gt_masks, std::mt19937_64& rng,
                       std::size_t fragments_min, std::size_t fragments_max,
                       FragmentMode mode);

// generate_scene + fragment_masks per sample, each drawing from its own
// substream of spec.seed so samples are independent and reproducible.
std::vector<SceneSample> build_dataset(const GeneratorSpec& spec,
                                       std::size_t num_samples);

struct Dataset {
  std::vector<SceneSample> samples;
  std::vector<std::string> class_names;
  std::size_t height = 0;
  std::size_t width = 0;
};

// Directory layout: manifest.json plus NNNNN.img / NNNNN.msk / NNNNN.lbl per
// sample. Round trips are bit-exact. The manifest is validated against every
// file header before any payload is loaded.
void write_dataset(const std::vector<SceneSample>& samples,
                   const std::vector<std::string>& class_names,
                   const std::string& dir);
Dataset read_dataset(const std::string& dir);

// Checkpoints: <prefix>.json manifest (tensor names, shapes, byte offsets,
// step counter, config snapshot) plus <prefix>.bin, one blob of
// little-endian f64 in declaration order. Round trip is bit-exact including
// optimizer moments.
void write_checkpoint(const TrainState& state, const std::string& prefix);
TrainConfig read_checkpoint_config(const std::string& prefix);
TrainState read_checkpoint(const std::string& prefix,
                           const TrainConfig& expected);

// Mask-set files reuse the dataset .msk format.
void write_mask_file(const MaskSet& masks, const std::string& path);
MaskSet read_mask_file(const std::string& path);

}  // namespace pxc
