#pragma once

// Single-click encoding: dense distance-from-click channel and the exact
// Euclidean distance transform used to place deterministic clicks.

#include <cstddef>
#include <cstdint>
#include <span>

#include "pdseg/tensor.hpp"

namespace pdseg::click {

/// 0-based pixel coordinate.
struct Click {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Click&, const Click&) = default;
};

enum class ClickNorm {
  diagonal,  ///< divide by sqrt(H^2 + W^2), values in [0, 1]
  raw,       ///< plain pixel distances
};

enum class ClickMode { center, uniform };

/// [H,W] map of Euclidean distances from every pixel to `p`.
/// Throws BoundsError if `p` lies outside the image.
Tensor click_distance_map(Click p, std::size_t height, std::size_t width,
                          ClickNorm norm = ClickNorm::diagonal);

/// Squared-distance transform of a sampled function along one line, using
/// the lower envelope of parabolas rooted at each sample. Linear time.
void squared_distance_1d(std::span<const double> f, std::span<double> out);

/// Distance from every foreground pixel (value > 0.5) of an [H,W] mask to
/// the nearest background pixel center; 0 on background. The image is
/// surrounded by a virtual background ring one pixel outside the border.
/// Throws EmptyMaskError when no pixel is foreground.
Tensor edt_binary(const Tensor& mask);

/// center: argmax of edt_binary, ties to the smallest (row, col).
/// uniform: a foreground pixel drawn uniformly with the given seed.
Click sample_click(const Tensor& mask, ClickMode mode, std::uint64_t seed = 0);

}  // namespace pdseg::click
