#include "pxc/numerics.hpp"

#include <algorithm>
#include <cmath>

#include "pxc/errors.hpp"

namespace pxc {

double l2_norm(std::span<const double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

std::vector<double> l2_normalize(std::span<const double> v) {
  const double n = l2_norm(v);
  if (!(n > kEpsNorm)) throw DegenerateVector("cannot normalize near-zero vector");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ShapeMismatch("cosine_similarity: length mismatch");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (!(na > kEpsNorm) || !(nb > kEpsNorm))
    throw DegenerateVector("cosine_similarity: zero-norm input");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (na * nb);
}

namespace {

// Source index pair and interpolation weight for one output coordinate,
// align-corners=false: src = (dst + 0.5) / factor - 0.5, clamped to edges.
struct Tap {
  std::size_t i0, i1;
  double t;  // weight of i1; i0 gets 1 - t
};

std::vector<Tap> make_taps(std::size_t in_extent, std::size_t factor) {
  std::vector<Tap> taps(in_extent * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    const double s =
        (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    double f = std::floor(s);
    double t = s - f;
    long i0 = static_cast<long>(f);
    long i1 = i0 + 1;
    const long hi = static_cast<long>(in_extent) - 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > hi) i0 = hi;
    if (i1 > hi) i1 = hi;
    taps[o] = {static_cast<std::size_t>(i0), static_cast<std::size_t>(i1), t};
  }
  return taps;
}

}  // namespace

DenseGrid bilinear_upsample(const DenseGrid& grid, std::size_t factor) {
  if (grid.rank() != 3) throw ShapeMismatch("bilinear_upsample: need h x w x c");
  if (factor == 0) throw ShapeMismatch("bilinear_upsample: factor must be >= 1");
  const std::size_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
  if (h == 0 || w == 0) throw ShapeMismatch("bilinear_upsample: empty grid");
  DenseGrid out({h * factor, w * factor, c});
  const auto ty = make_taps(h, factor);
  const auto tx = make_taps(w, factor);
  for (std::size_t y = 0; y < h * factor; ++y) {
    const Tap& ay = ty[y];
    for (std::size_t x = 0; x < w * factor; ++x) {
      const Tap& ax = tx[x];
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = (1.0 - ax.t) * grid(ay.i0, ax.i0, ch) +
                           ax.t * grid(ay.i0, ax.i1, ch);
        const double bot = (1.0 - ax.t) * grid(ay.i1, ax.i0, ch) +
                           ax.t * grid(ay.i1, ax.i1, ch);
        out(y, x, ch) = (1.0 - ay.t) * top + ay.t * bot;
      }
    }
  }
  return out;
}

DenseGrid bilinear_upsample_backward(const DenseGrid& grad_out, std::size_t h,
                                     std::size_t w, std::size_t factor) {
  if (grad_out.rank() != 3)
    throw ShapeMismatch("bilinear_upsample_backward: need h x w x c");
  if (grad_out.dim(0) != h * factor || grad_out.dim(1) != w * factor)
    throw ShapeMismatch("bilinear_upsample_backward: shape mismatch");
  const std::size_t c = grad_out.dim(2);
  DenseGrid grad_in({h, w, c});
  const auto ty = make_taps(h, factor);
  const auto tx = make_taps(w, factor);
  for (std::size_t y = 0; y < h * factor; ++y) {
    const Tap& ay = ty[y];
    for (std::size_t x = 0; x < w * factor; ++x) {
      const Tap& ax = tx[x];
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = grad_out(y, x, ch);
        grad_in(ay.i0, ax.i0, ch) += (1.0 - ay.t) * (1.0 - ax.t) * g;
        grad_in(ay.i0, ax.i1, ch) += (1.0 - ay.t) * ax.t * g;
        grad_in(ay.i1, ax.i0, ch) += ay.t * (1.0 - ax.t) * g;
        grad_in(ay.i1, ax.i1, ch) += ay.t * ax.t * g;
      }
    }
  }
  return grad_in;
}

namespace {

// Per-axis overlap lengths between output cell [o*N/ON, (o+1)*N/ON) and the
// unit input pixels it intersects.
struct Overlap {
  std::size_t index;
  double len;
};

std::vector<std::vector<Overlap>> axis_overlaps(std::size_t in_extent,
                                                std::size_t out_extent) {
  std::vector<std::vector<Overlap>> all(out_extent);
  const double cell =
      static_cast<double>(in_extent) / static_cast<double>(out_extent);
  for (std::size_t o = 0; o < out_extent; ++o) {
    const double lo = static_cast<double>(o) * cell;
    const double hi = static_cast<double>(o + 1) * cell;
    const std::size_t p0 = static_cast<std::size_t>(std::floor(lo));
    for (std::size_t p = p0; p < in_extent; ++p) {
      const double a = std::max(lo, static_cast<double>(p));
      const double b = std::min(hi, static_cast<double>(p + 1));
      if (b <= a) {
        if (static_cast<double>(p) >= hi) break;
        continue;
      }
      all[o].push_back({p, b - a});
    }
  }
  return all;
}

}  // namespace

DenseGrid area_downsample(const DenseGrid& grid, std::size_t oh,
                          std::size_t ow) {
  if (grid.rank() != 2) throw ShapeMismatch("area_downsample: need H x W");
  if (oh == 0 || ow == 0)
    throw ShapeMismatch("area_downsample: empty output shape");
  const std::size_t H = grid.dim(0), W = grid.dim(1);
  const auto oy = axis_overlaps(H, oh);
  const auto ox = axis_overlaps(W, ow);
  const double cell_area = (static_cast<double>(H) / oh) *
                           (static_cast<double>(W) / ow);
  DenseGrid out({oh, ow});
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (const Overlap& ry : oy[y])
        for (const Overlap& rx : ox[x])
          acc += ry.len * rx.len * grid(ry.index, rx.index);
      out(y, x) = acc / cell_area;
    }
  }
  return out;
}

Mask threshold_downsample(const Mask& mask, std::size_t oh, std::size_t ow) {
  DenseGrid g({mask.h, mask.w});
  for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] = mask.v[i] ? 1.0 : 0.0;
  const DenseGrid frac = area_downsample(g, oh, ow);
  Mask out(oh, ow);
  for (std::size_t i = 0; i < frac.numel(); ++i)
    out.v[i] = frac.data[i] >= 0.5 ? 1 : 0;
  return out;
}

LabelGrid nearest_upsample(const LabelGrid& labels, std::size_t oh,
                           std::size_t ow) {
  LabelGrid out(oh, ow);
  for (std::size_t y = 0; y < oh; ++y) {
    std::size_t sy = static_cast<std::size_t>(
        (static_cast<double>(y) + 0.5) * static_cast<double>(labels.h) / oh);
    if (sy >= labels.h) sy = labels.h - 1;
    for (std::size_t x = 0; x < ow; ++x) {
      std::size_t sx = static_cast<std::size_t>(
          (static_cast<double>(x) + 0.5) * static_cast<double>(labels.w) / ow);
      if (sx >= labels.w) sx = labels.w - 1;
      out.at(y, x) = labels.at(sy, sx);
    }
  }
  return out;
}

std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& loss_fn,
    std::vector<double> params, double h) {
  if (!(h > 0.0)) throw ConfigError("finite_difference_gradient: h must be > 0");
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double fp = loss_fn(params);
    params[i] = saved - h;
    const double fm = loss_fn(params);
    params[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NonFiniteLoss("finite_difference_gradient: non-finite probe");
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace pxc
