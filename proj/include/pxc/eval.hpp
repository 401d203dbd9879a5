#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "pxc/dataio.hpp"
#include "pxc/grid.hpp"
#include "pxc/training.hpp"

namespace pxc {

// Inference and scoring: per-pixel cluster labels from the student encoder
// and the class features (no decoder, no momentum copy), Hungarian-matched
// mIoU against ground truth, and zero-shot mask classification.

struct MiouResult {
  std::vector<double> per_class_iou;   // indexed by class
  std::vector<bool> class_present;     // false -> excluded from the mean
  double miou = 0.0;
};

struct SegmentationReport {
  std::vector<double> per_class_iou;
  std::vector<bool> class_present;
  double miou = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> matching;  // cluster -> class
  std::vector<std::vector<std::size_t>> intersection;  // k x c pixel counts
  std::vector<std::size_t> pred_count;                 // per cluster
  std::vector<std::size_t> gt_count;                   // per class
  double mask_accuracy = 0.0;
  std::size_t masks_evaluated = 0;
  std::size_t num_samples = 0;
};

// Per-pixel argmax over the k class-feature similarities, nearest-neighbor
// upsampled to image resolution. Ties go to the lowest cluster index.
LabelGrid infer_segmentation(const TrainState& state, const DenseGrid& image);

// IoU per class with ignore_label pixels excluded; classes absent from both
// prediction and ground truth are excluded from the mean.
MiouResult miou(const LabelGrid& pred, const LabelGrid& gt,
                std::size_t num_classes, std::uint16_t ignore_label);

// Exact maximum-total-IoU one-to-one matching on min(k, c) pairs.
std::vector<std::pair<std::size_t, std::size_t>> hungarian_match(
    const DenseGrid& iou_matrix);

// Pool the student features under each mask and take the most similar class
// feature. Ties go to the lowest index.
std::vector<std::size_t> classify_masks(const TrainState& state,
                                        const DenseGrid& image,
                                        const MaskSet& masks);

// Full-dataset protocol: infer every sample, accumulate one global cluster x
// class IoU matrix, match once, report matched mIoU plus the accuracy of
// classify_masks (on ground-truth masks when use_gt_masks, else on the
// unlabeled fragments).
SegmentationReport evaluate(const TrainState& state, const Dataset& dataset,
                            bool use_gt_masks);

}  // namespace pxc
