#include "pxc/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "pxc/errors.hpp"
#include "pxc/numerics.hpp"

namespace pxc {

DenseGrid class_mask_affinity(const DenseGrid& mask_features,
                              const DenseGrid& class_features) {
  if (mask_features.rank() != 2 || class_features.rank() != 2 ||
      mask_features.dim(1) != class_features.dim(1))
    throw ShapeMismatch("class_mask_affinity: need m x d and k x d");
  const std::size_t m = mask_features.dim(0);
  const std::size_t k = class_features.dim(0);
  const std::size_t d = mask_features.dim(1);
  DenseGrid s({k, m});
  for (std::size_t j = 0; j < k; ++j) {
    std::span<const double> cj(&class_features.data[j * d], d);
    for (std::size_t i = 0; i < m; ++i) {
      std::span<const double> mi(&mask_features.data[i * d], d);
      s(j, i) = cosine_similarity(cj, mi);
    }
  }
  return s;
}

namespace {

double log_sum_exp(const std::vector<double>& terms) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double t : terms) mx = std::max(mx, t);
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - mx);
  return mx + std::log(acc);
}

}  // namespace

AssignmentMatrix sinkhorn_solve(const DenseGrid& affinity, double epsilon,
                                double tol, int max_iter) {
  if (affinity.rank() != 2) throw ShapeMismatch("sinkhorn_solve: need k x m");
  if (!(epsilon > 0.0)) throw ConfigError("sinkhorn_solve: epsilon must be > 0");
  if (!(tol > 0.0)) throw ConfigError("sinkhorn_solve: tol must be > 0");
  if (max_iter < 1) throw ConfigError("sinkhorn_solve: max_iter must be >= 1");
  if (!affinity.all_finite())
    throw NonFinite("sinkhorn_solve: non-finite affinity");

  const std::size_t k = affinity.dim(0);
  const std::size_t m = affinity.dim(1);
  if (k == 0 || m == 0) throw ShapeMismatch("sinkhorn_solve: empty problem");

  // Stabilized kernel: subtract the per-problem max of S/eps before any
  // exponentiation; the scaling vectors absorb the shift.
  DenseGrid log_kernel({k, m});
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < affinity.numel(); ++i)
    mx = std::max(mx, affinity.data[i] / epsilon);
  for (std::size_t i = 0; i < affinity.numel(); ++i)
    log_kernel.data[i] = affinity.data[i] / epsilon - mx;

  const double log_row_target = -std::log(static_cast<double>(k));
  const double log_col_target = -std::log(static_cast<double>(m));
  std::vector<double> log_u(k, 0.0), log_v(m, 0.0);
  std::vector<double> scratch(std::max(k, m));

  auto marginal_error_now = [&]() {
    double err = 0.0;
    std::vector<double> col_sum(m, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      double row_sum = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double q = std::exp(log_kernel(j, i) + log_u[j] + log_v[i]);
        row_sum += q;
        col_sum[i] += q;
      }
      err = std::max(err, std::abs(row_sum - 1.0 / static_cast<double>(k)));
    }
    for (std::size_t i = 0; i < m; ++i)
      err = std::max(err, std::abs(col_sum[i] - 1.0 / static_cast<double>(m)));
    return err;
  };

  // At small epsilon the alternating updates contract through one slow mode;
  // Aitken extrapolation on the stacked potentials removes it. Guarded: an
  // extrapolation that does not reduce the marginal error is rolled back.
  std::vector<double> snap0, snap1, trial_u, trial_v;
  constexpr int kExtrapolateEvery = 16;

  int used = 0;
  double err = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iter; ++it) {
    for (std::size_t j = 0; j < k; ++j) {
      scratch.resize(m);
      for (std::size_t i = 0; i < m; ++i)
        scratch[i] = log_kernel(j, i) + log_v[i];
      log_u[j] = log_row_target - log_sum_exp(scratch);
    }
    for (std::size_t i = 0; i < m; ++i) {
      scratch.resize(k);
      for (std::size_t j = 0; j < k; ++j)
        scratch[j] = log_kernel(j, i) + log_u[j];
      log_v[i] = log_col_target - log_sum_exp(scratch);
    }
    used = it + 1;
    err = marginal_error_now();
    if (!std::isfinite(err)) throw NonFinite("sinkhorn_solve: diverged");
    if (err < tol) break;

    if (used % kExtrapolateEvery == 0) {
      std::vector<double> x(log_u);
      x.insert(x.end(), log_v.begin(), log_v.end());
      if (!snap0.empty() && !snap1.empty()) {
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double d1 = snap1[i] - snap0[i];
          const double d2 = x[i] - snap1[i];
          num += d2 * d1;
          den += d1 * d1;
        }
        const double lam = den > 0.0 ? num / den : 0.0;
        if (lam > 0.2 && lam < 1.0 - 1e-9) {
          const double f = lam / (1.0 - lam);
          trial_u = log_u;
          trial_v = log_v;
          for (std::size_t j = 0; j < k; ++j)
            trial_u[j] += (x[j] - snap1[j]) * f;
          for (std::size_t i = 0; i < m; ++i)
            trial_v[i] += (x[k + i] - snap1[k + i]) * f;
          std::swap(log_u, trial_u);
          std::swap(log_v, trial_v);
          const double trial_err = marginal_error_now();
          if (std::isfinite(trial_err) && trial_err < err) {
            err = trial_err;
            snap0.clear();
            snap1.clear();
            if (err < tol) break;
            continue;
          }
          std::swap(log_u, trial_u);
          std::swap(log_v, trial_v);
        }
      }
      snap0 = std::move(snap1);
      snap1 = std::move(x);
    }
  }

  AssignmentMatrix out;
  out.q = DenseGrid({k, m});
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < m; ++i)
      out.q(j, i) = std::exp(log_kernel(j, i) + log_u[j] + log_v[i]);
  out.epsilon = epsilon;
  out.iterations_used = used;
  out.marginal_error = err;
  if (!out.q.all_finite()) throw NonFinite("sinkhorn_solve: non-finite plan");
  return out;
}

double clustering_objective(const DenseGrid& q, const DenseGrid& affinity,
                            double epsilon) {
  if (!q.same_shape(affinity))
    throw ShapeMismatch("clustering_objective: shape mismatch");
  double transport = 0.0, entropy = 0.0;
  for (std::size_t i = 0; i < q.numel(); ++i) {
    const double qi = q.data[i];
    transport += qi * affinity.data[i];
    if (qi > 0.0) entropy -= qi * std::log(qi);
  }
  return transport + epsilon * entropy;
}

HardAssignment hard_assign(const AssignmentMatrix& assignment) {
  const DenseGrid& q = assignment.q;
  const std::size_t k = q.dim(0), m = q.dim(1);
  HardAssignment out;
  out.cluster_of.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    double best_val = q(0, i);
    for (std::size_t j = 1; j < k; ++j) {
      if (q(j, i) > best_val) {
        best_val = q(j, i);
        best = j;
      }
    }
    out.cluster_of[i] = best;
  }
  return out;
}

TargetMaskStack union_masks(const MaskSet& masks,
                            const HardAssignment& assignment, std::size_t k) {
  if (assignment.cluster_of.size() != masks.size())
    throw ShapeMismatch("union_masks: assignment length != mask count");
  if (masks.empty()) throw ShapeMismatch("union_masks: empty mask set");
  const std::size_t h = masks.front().h, w = masks.front().w;
  TargetMaskStack stack;
  stack.unions.assign(k, Mask(h, w));
  stack.coverage = Mask(h, w);
  for (std::size_t n = 0; n < masks.size(); ++n) {
    const Mask& mk = masks[n];
    if (mk.h != h || mk.w != w)
      throw ShapeMismatch("union_masks: inconsistent mask shapes");
    const std::size_t c = assignment.cluster_of[n];
    if (c >= k) throw ShapeMismatch("union_masks: cluster index out of range");
    Mask& tgt = stack.unions[c];
    for (std::size_t i = 0; i < mk.v.size(); ++i) {
      if (mk.v[i]) {
        tgt.v[i] = 1;
        stack.coverage.v[i] = 1;
      }
    }
  }
  return stack;
}

namespace {

double dist2(const DenseGrid& points, std::size_t i,
             const DenseGrid& centroids, std::size_t c) {
  const std::size_t d = points.dim(1);
  double acc = 0.0;
  for (std::size_t t = 0; t < d; ++t) {
    const double diff = points(i, t) - centroids(c, t);
    acc += diff * diff;
  }
  return acc;
}

}  // namespace

KMeansResult kmeans(const DenseGrid& points, std::size_t k, std::size_t iters,
                    Seed seed) {
  if (points.rank() != 2) throw ShapeMismatch("kmeans: need n x d points");
  const std::size_t n = points.dim(0), d = points.dim(1);
  if (k < 1) throw ConfigError("kmeans: k must be >= 1");
  if (n < k)
    throw InsufficientPoints("kmeans: fewer points than clusters");

  std::mt19937_64 rng = substream(seed, stream::kMaskGen);
  KMeansResult res;
  res.centroids = DenseGrid({k, d});
  res.labels.assign(n, 0);

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<std::uint8_t> chosen(n, 0);
  std::uniform_int_distribution<std::size_t> pick_first(0, n - 1);
  std::size_t first = pick_first(rng);
  chosen[first] = 1;
  for (std::size_t t = 0; t < d; ++t) res.centroids(0, t) = points(first, t);
  for (std::size_t i = 0; i < n; ++i) d2[i] = dist2(points, i, res.centroids, 0);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += d2[i];
    std::size_t idx = n;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      for (std::size_t i = 0; i < n; ++i) {
        r -= d2[i];
        if (r <= 0.0) {
          idx = i;
          break;
        }
      }
      if (idx == n) idx = n - 1;
    } else {
      // All remaining points coincide with a centroid; take the first unused.
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) {
          idx = i;
          break;
        }
      }
      if (idx == n) idx = 0;
    }
    chosen[idx] = 1;
    for (std::size_t t = 0; t < d; ++t) res.centroids(c, t) = points(idx, t);
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], dist2(points, i, res.centroids, c));
  }

  std::vector<std::size_t> counts(k, 0);
  std::vector<double> point_d2(n, 0.0);
  for (std::size_t it = 0; it < iters; ++it) {
    // Assignment (ties to the lowest cluster index).
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = dist2(points, i, res.centroids, 0);
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = dist2(points, i, res.centroids, c);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      if (res.labels[i] != best) changed = true;
      res.labels[i] = best;
    }

    // Mean update.
    DenseGrid sums({k, d});
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      counts[res.labels[i]] += 1;
      for (std::size_t t = 0; t < d; ++t)
        sums(res.labels[i], t) += points(i, t);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t t = 0; t < d; ++t)
        res.centroids(c, t) = sums(c, t) / static_cast<double>(counts[c]);
    }

    for (std::size_t i = 0; i < n; ++i)
      point_d2[i] = dist2(points, i, res.centroids, res.labels[i]);

    // Re-seed empty clusters to the current farthest point.
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (point_d2[i] > far_d && counts[res.labels[i]] > 1) {
          far_d = point_d2[i];
          far = i;
        }
      }
      counts[res.labels[far]] -= 1;
      for (std::size_t t = 0; t < d; ++t) res.centroids(c, t) = points(far, t);
      res.labels[far] = c;
      counts[c] = 1;
      point_d2[far] = 0.0;
      changed = true;
    }

    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += point_d2[i];
    res.inertia_history.push_back(inertia);
    if (!changed) break;
  }

  if (res.inertia_history.empty()) {
    // iters == 0: still report the seeding inertia for the caller.
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = dist2(points, i, res.centroids, 0);
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = dist2(points, i, res.centroids, c);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      res.labels[i] = best;
      inertia += best_d;
    }
    res.inertia_history.push_back(inertia);
  }
  return res;
}

MaskSet connected_components(const Mask& mask) {
  MaskSet parts;
  std::vector<std::uint8_t> seen(mask.v.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.v.size(); ++start) {
    if (!mask.v[start] || seen[start]) continue;
    Mask part(mask.h, mask.w);
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      part.v[p] = 1;
      const std::size_t y = p / mask.w, x = p % mask.w;
      const std::size_t nbrs[4][2] = {{y, x + 1},
                                      {y, x == 0 ? mask.w : x - 1},
                                      {y + 1, x},
                                      {y == 0 ? mask.h : y - 1, x}};
      for (const auto& nb : nbrs) {
        if (nb[0] >= mask.h || nb[1] >= mask.w) continue;
        const std::size_t q = nb[0] * mask.w + nb[1];
        if (mask.v[q] && !seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      }
    }
    parts.push_back(std::move(part));
  }
  return parts;
}

MaskSet feature_map_to_masks(const DenseGrid& features, std::size_t k,
                             Seed seed, bool split_components,
                             std::size_t out_h, std::size_t out_w) {
  if (features.rank() != 3)
    throw ShapeMismatch("feature_map_to_masks: need h x w x d features");
  const std::size_t h = features.dim(0), w = features.dim(1),
                    d = features.dim(2);
  DenseGrid points({h * w, d});
  std::copy(features.data.begin(), features.data.end(), points.data.begin());
  const KMeansResult km = kmeans(points, k, 64, seed);

  MaskSet out;
  for (std::size_t c = 0; c < k; ++c) {
    Mask cell(h, w);
    bool any = false;
    for (std::size_t i = 0; i < km.labels.size(); ++i) {
      if (km.labels[i] == c) {
        cell.v[i] = 1;
        any = true;
      }
    }
    if (!any) continue;
    MaskSet pieces =
        split_components ? connected_components(cell) : MaskSet{cell};
    for (const Mask& piece : pieces) {
      Mask up(out_h, out_w);
      for (std::size_t y = 0; y < out_h; ++y) {
        std::size_t sy = static_cast<std::size_t>(
            (static_cast<double>(y) + 0.5) * static_cast<double>(h) / out_h);
        if (sy >= h) sy = h - 1;
        for (std::size_t x = 0; x < out_w; ++x) {
          std::size_t sx = static_cast<std::size_t>(
              (static_cast<double>(x) + 0.5) * static_cast<double>(w) / out_w);
          if (sx >= w) sx = w - 1;
          up.at(y, x) = piece.at(sy, sx);
        }
      }
      out.push_back(std::move(up));
    }
  }
  return out;
}

}  // namespace pxc
