#pragma once

#include <cstddef>
#include <vector>

#include "pxc/grid.hpp"
#include "pxc/rng.hpp"

namespace pxc {

// Entropy-regularized balanced assignment of mask features to class features,
// plus the mask-side bookkeeping around it (hard labels, target unions) and
// k-means for feature-driven mask generation.

// Nonnegative k x m transport plan with row sums 1/k and column sums 1/m.
struct AssignmentMatrix {
  DenseGrid q;  // k x m, strictly positive after a converged solve
  double epsilon = 1.0;
  int iterations_used = 0;
  double marginal_error = 0.0;
};

struct HardAssignment {
  std::vector<std::size_t> cluster_of;  // one cluster index in [0, k) per mask
};

// Per-cluster pixel unions plus the coverage map (OR over all input masks).
struct TargetMaskStack {
  std::vector<Mask> unions;
  Mask coverage;
};

struct KMeansResult {
  DenseGrid centroids;              // k x d
  std::vector<std::size_t> labels;  // length n
  std::vector<double> inertia_history;  // one entry per Lloyd iteration
};

// Entry (j, i) = cosine similarity of class_features row j vs mask_features
// row i. Both inputs are row-per-vector matrices sharing the feature dim.
DenseGrid class_mask_affinity(const DenseGrid& mask_features,
                              const DenseGrid& class_features);

// Alternating row/column scaling of diag(u) exp(S/eps) diag(v) toward row
// sums 1/k and column sums 1/m, run fully in the log domain so large |S|/eps
// never overflows. Stops when the max marginal deviation drops below tol.
AssignmentMatrix sinkhorn_solve(const DenseGrid& affinity, double epsilon,
                                double tol = 1e-6, int max_iter = 1000);

// Sum Q.S + eps * H(Q), with H the entropy and 0 log 0 taken as 0.
double clustering_objective(const DenseGrid& q, const DenseGrid& affinity,
                            double epsilon);

// Column argmax of Q; ties go to the lowest cluster index.
HardAssignment hard_assign(const AssignmentMatrix& assignment);

// Pixel-wise OR of the masks assigned to each cluster. Clusters with no
// assigned mask keep an all-zero map so the channel count stays k.
TargetMaskStack union_masks(const MaskSet& masks,
                            const HardAssignment& assignment, std::size_t k);

// Lloyd iterations from k-means++ initialization; empty clusters are
// re-seeded to the current farthest point. Throws InsufficientPoints if
// n < k.
KMeansResult kmeans(const DenseGrid& points, std::size_t k, std::size_t iters,
                    Seed seed);

// k-means over the h*w pixel feature vectors; one binary mask per non-empty
// cluster, nearest-neighbor upsampled to out_h x out_w. With
// split_components, each mask is further split into its 4-connected
// components.
MaskSet feature_map_to_masks(const DenseGrid& features, std::size_t k,
                             Seed seed, bool split_components,
                             std::size_t out_h, std::size_t out_w);

// 4-connected components of a mask, in row-major discovery order.
MaskSet connected_components(const Mask& mask);

}  // namespace pxc
