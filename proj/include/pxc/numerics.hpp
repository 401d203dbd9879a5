#pragma once

#include <functional>
#include <span>
#include <vector>

#include "pxc/grid.hpp"

namespace pxc {

// Vectors with Euclidean norm at or below this are treated as degenerate.
inline constexpr double kEpsNorm = 1e-12;

double l2_norm(std::span<const double> v);

// Throws DegenerateVector when the norm is <= kEpsNorm.
std::vector<double> l2_normalize(std::span<const double> v);

// a.b / (|a||b|); symmetric and scale-invariant in each argument.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Bilinear upsampling of an h x w x c grid by an integer factor,
// align-corners=false convention with edge clamping. Constant inputs are
// reproduced exactly and outputs stay within the per-channel input range.
DenseGrid bilinear_upsample(const DenseGrid& grid, std::size_t factor);

// Transpose of bilinear_upsample as a linear map: scatters an upstream
// gradient of shape (h*factor) x (w*factor) x c back to h x w x c.
DenseGrid bilinear_upsample_backward(const DenseGrid& grad_out, std::size_t h,
                                     std::size_t w, std::size_t factor);

// Exact box-filter downsampling of a single-channel H x W grid to oh x ow.
// Output cell value is the area-weighted mean of the input over the cell's
// footprint, so binary inputs land in [0, 1].
DenseGrid area_downsample(const DenseGrid& grid, std::size_t oh,
                          std::size_t ow);

// Binary mask downsampling: covered-area fraction >= 0.5 becomes 1.
Mask threshold_downsample(const Mask& mask, std::size_t oh, std::size_t ow);

// Nearest-neighbor label upsampling to oh x ow.
LabelGrid nearest_upsample(const LabelGrid& labels, std::size_t oh,
                           std::size_t ow);

// Central-difference gradient estimate (f(p + h e_i) - f(p - h e_i)) / 2h.
// The independent oracle used by every gradient test in this project.
// Throws NonFiniteLoss if any probe evaluates non-finite.
std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& loss_fn,
    std::vector<double> params, double h);

}  // namespace pxc
