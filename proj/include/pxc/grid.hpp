#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace pxc {

// Dense real-valued array in row-major order, last axis fastest. All training
// arithmetic runs in 64-bit floats.
struct DenseGrid {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  DenseGrid() = default;
  explicit DenseGrid(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(product(shape), fill) {}

  static std::size_t product(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const {
    assert(i < shape.size());
    return shape[i];
  }

  double& operator()(std::size_t i, std::size_t j) {
    assert(rank() == 2 && i < shape[0] && j < shape[1]);
    return data[i * shape[1] + j];
  }
  const double& operator()(std::size_t i, std::size_t j) const {
    assert(rank() == 2 && i < shape[0] && j < shape[1]);
    return data[i * shape[1] + j];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    assert(rank() == 3 && i < shape[0] && j < shape[1] && k < shape[2]);
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  const double& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    assert(rank() == 3 && i < shape[0] && j < shape[1] && k < shape[2]);
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const DenseGrid& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Binary mask at image resolution; one byte per pixel, values 0/1.
struct Mask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> v;

  Mask() = default;
  Mask(std::size_t h_, std::size_t w_) : h(h_), w(w_), v(h_ * w_, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) {
    assert(y < h && x < w);
    return v[y * w + x];
  }
  std::uint8_t at(std::size_t y, std::size_t x) const {
    assert(y < h && x < w);
    return v[y * w + x];
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : v) n += b != 0;
    return n;
  }
  bool any() const {
    for (auto b : v)
      if (b) return true;
    return false;
  }
};

using MaskSet = std::vector<Mask>;

// Per-pixel class indices; 65535 marks unlabeled pixels.
inline constexpr std::uint16_t kUnlabeled = 65535;

struct LabelGrid {
  std::size_t h = 0, w = 0;
  std::vector<std::uint16_t> v;

  LabelGrid() = default;
  LabelGrid(std::size_t h_, std::size_t w_, std::uint16_t fill = 0)
      : h(h_), w(w_), v(h_ * w_, fill) {}

  std::uint16_t& at(std::size_t y, std::size_t x) {
    assert(y < h && x < w);
    return v[y * w + x];
  }
  std::uint16_t at(std::size_t y, std::size_t x) const {
    assert(y < h && x < w);
    return v[y * w + x];
  }
};

}  // namespace pxc
