#include "pxc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pxc/errors.hpp"
#include "pxc/numerics.hpp"

namespace pxc {

LabelGrid infer_segmentation(const TrainState& state, const DenseGrid& image) {
  const DenseGrid feat = encode_image(state.student, image);
  const DenseGrid refs = encode_class_prompts(state.prompts);
  const DenseGrid sim = similarity_map(feat, refs);
  const std::size_t h = sim.dim(0), w = sim.dim(1), k = sim.dim(2);
  LabelGrid coarse(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t best = 0;
      double best_v = sim(y, x, 0);
      for (std::size_t j = 1; j < k; ++j) {
        if (sim(y, x, j) > best_v) {
          best_v = sim(y, x, j);
          best = j;
        }
      }
      coarse.at(y, x) = static_cast<std::uint16_t>(best);
    }
  }
  return nearest_upsample(coarse, image.dim(0), image.dim(1));
}

MiouResult miou(const LabelGrid& pred, const LabelGrid& gt,
                std::size_t num_classes, std::uint16_t ignore_label) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw ShapeMismatch("miou: label grids differ in shape");
  std::vector<std::size_t> inter(num_classes, 0), pc(num_classes, 0),
      gc(num_classes, 0);
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    const std::uint16_t p = pred.v[i], g = gt.v[i];
    if (p == ignore_label || g == ignore_label) continue;
    if (p < num_classes) pc[p] += 1;
    if (g < num_classes) gc[g] += 1;
    if (p == g && p < num_classes) inter[p] += 1;
  }
  MiouResult r;
  r.per_class_iou.assign(num_classes, 0.0);
  r.class_present.assign(num_classes, false);
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t uni = pc[c] + gc[c] - inter[c];
    if (uni == 0) continue;  // absent from both pred and gt
    r.class_present[c] = true;
    r.per_class_iou[c] =
        static_cast<double>(inter[c]) / static_cast<double>(uni);
    total += r.per_class_iou[c];
    ++present;
  }
  r.miou = present == 0 ? 0.0 : total / static_cast<double>(present);
  return r;
}

namespace {

// O(n^3) Hungarian algorithm with potentials on a square cost matrix
// (minimization). Returns the matched column per row.
std::vector<int> hungarian_min(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] >= 1) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> hungarian_match(
    const DenseGrid& iou_matrix) {
  if (iou_matrix.rank() != 2)
    throw ShapeMismatch("hungarian_match: need k x c matrix");
  if (!iou_matrix.all_finite())
    throw NonFinite("hungarian_match: non-finite entries");
  const std::size_t k = iou_matrix.dim(0), c = iou_matrix.dim(1);
  const std::size_t n = std::max(k, c);
  std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < c; ++i) cost[j][i] = -iou_matrix(j, i);
  const std::vector<int> row_to_col = hungarian_min(cost);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t j = 0; j < k; ++j) {
    const int col = row_to_col[j];
    if (col >= 0 && static_cast<std::size_t>(col) < c)
      out.emplace_back(j, static_cast<std::size_t>(col));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> classify_masks(const TrainState& state,
                                        const DenseGrid& image,
                                        const MaskSet& masks) {
  const DenseGrid feat = encode_image(state.student, image);
  const DenseGrid pooled = mask_pool(feat, masks);
  const DenseGrid refs = encode_class_prompts(state.prompts);
  const std::size_t k = refs.dim(0), d = refs.dim(1);
  std::vector<std::size_t> out(masks.size(), 0);
  for (std::size_t n = 0; n < masks.size(); ++n) {
    std::span<const double> f(&pooled.data[n * d], d);
    std::size_t best = 0;
    double best_v = -2.0;
    for (std::size_t j = 0; j < k; ++j) {
      std::span<const double> r(&refs.data[j * d], d);
      const double cs = cosine_similarity(f, r);
      if (cs > best_v) {
        best_v = cs;
        best = j;
      }
    }
    out[n] = best;
  }
  return out;
}

SegmentationReport evaluate(const TrainState& state, const Dataset& dataset,
                            bool use_gt_masks) {
  if (dataset.samples.empty()) throw ShapeMismatch("evaluate: empty dataset");
  const std::size_t k = state.config.k;
  const std::size_t c = dataset.class_names.size();

  SegmentationReport rep;
  rep.intersection.assign(k, std::vector<std::size_t>(c, 0));
  rep.pred_count.assign(k, 0);
  rep.gt_count.assign(c, 0);
  rep.num_samples = dataset.samples.size();

  for (const SceneSample& s : dataset.samples) {
    const LabelGrid pred = infer_segmentation(state, s.image);
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
      const std::uint16_t g = s.gt_labels.v[i];
      if (g == kUnlabeled) continue;
      const std::uint16_t p = pred.v[i];
      rep.pred_count[p] += 1;
      if (g < c) {
        rep.gt_count[g] += 1;
        rep.intersection[p][g] += 1;
      }
    }
  }

  DenseGrid iou({k, c});
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t g = 0; g < c; ++g) {
      const std::size_t uni =
          rep.pred_count[j] + rep.gt_count[g] - rep.intersection[j][g];
      iou(j, g) = uni == 0 ? 0.0
                           : static_cast<double>(rep.intersection[j][g]) /
                                 static_cast<double>(uni);
    }
  }
  rep.matching = hungarian_match(iou);

  std::vector<long> cluster_to_class(k, -1);
  for (const auto& [j, g] : rep.matching)
    cluster_to_class[j] = static_cast<long>(g);

  rep.per_class_iou.assign(c, 0.0);
  rep.class_present.assign(c, false);
  std::vector<long> class_to_cluster(c, -1);
  for (const auto& [j, g] : rep.matching) class_to_cluster[g] = static_cast<long>(j);
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t g = 0; g < c; ++g) {
    const bool gt_present = rep.gt_count[g] > 0;
    const bool pred_present =
        class_to_cluster[g] >= 0 &&
        rep.pred_count[static_cast<std::size_t>(class_to_cluster[g])] > 0;
    if (!gt_present && !pred_present) continue;
    rep.class_present[g] = true;
    if (class_to_cluster[g] >= 0)
      rep.per_class_iou[g] =
          iou(static_cast<std::size_t>(class_to_cluster[g]), g);
    total += rep.per_class_iou[g];
    ++present;
  }
  rep.miou = present == 0 ? 0.0 : total / static_cast<double>(present);

  // Mask classification through the same global matching.
  std::size_t correct = 0, evaluated = 0;
  for (const SceneSample& s : dataset.samples) {
    const MaskSet& masks = use_gt_masks ? s.gt_masks : s.unlabeled_masks;
    if (masks.empty()) continue;
    const std::vector<std::size_t> clusters =
        classify_masks(state, s.image, masks);
    for (std::size_t n = 0; n < masks.size(); ++n) {
      // Masks never straddle class boundaries, so any covered pixel gives
      // the true class.
      std::uint16_t truth = kUnlabeled;
      for (std::size_t p = 0; p < masks[n].v.size(); ++p) {
        if (masks[n].v[p]) {
          truth = s.gt_labels.v[p];
          break;
        }
      }
      if (truth == kUnlabeled) continue;
      ++evaluated;
      if (cluster_to_class[clusters[n]] == static_cast<long>(truth)) ++correct;
    }
  }
  rep.masks_evaluated = evaluated;
  rep.mask_accuracy = evaluated == 0
                          ? 0.0
                          : static_cast<double>(correct) /
                                static_cast<double>(evaluated);
  return rep;
}

}  // namespace pxc
