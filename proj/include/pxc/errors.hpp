#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pxc {

// Common base so callers can catch everything from this library at once.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateVector : Error {
  using Error::Error;
};

struct ShapeMismatch : Error {
  using Error::Error;
};

struct NonFinite : Error {
  using Error::Error;
};

struct NonFiniteLoss : Error {
  using Error::Error;
};

struct InsufficientPoints : Error {
  using Error::Error;
};

struct NoSupervisedPixels : Error {
  using Error::Error;
};

struct PlacementFailure : Error {
  using Error::Error;
};

struct CorruptManifest : Error {
  using Error::Error;
};

struct BadMagic : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// A mask vanished after soft downsampling to the feature grid. Carries the
// offending index so the caller can drop exactly that mask.
struct EmptyMaskAtFeatureScale : Error {
  std::size_t mask_index;
  explicit EmptyMaskAtFeatureScale(std::size_t index)
      : Error("mask " + std::to_string(index) +
              " has zero weight at feature scale"),
        mask_index(index) {}
};

}  // namespace pxc
