#pragma once

// Ground-truth reprojection check shared by the synthworld tests and the
// acceptance suite: warp a later frame onto an earlier one with rendered
// depth and the recorded relative pose.

#include <cmath>

#include "pdseg/photometric.hpp"
#include "pdseg/synthworld.hpp"

namespace pdseg::testing {

struct ReprojectionStats {
  double mae = 0.0;
  std::size_t pixels = 0;  ///< valid, non-occluded pixels scored
  std::size_t total = 0;
};

/// Pixels are scored when the projection is valid and the projected depth
/// agrees with the source frame's depth at the sampled location within 1%.
inline ReprojectionStats reprojection_error(const synth::Sequence& seq, std::size_t target,
                                            std::size_t source) {
  const synth::Sample& tgt = seq.frames.at(target);
  const synth::Sample& src = seq.frames.at(source);
  const std::size_t h = tgt.depth.size(0), w = tgt.depth.size(1);
  const photo::Pose rel = seq.relative_pose(target, source);
  const photo::CameraIntrinsics& K = tgt.intrinsics;

  const Tensor depth = reshape(tgt.depth, {1, h, w});
  const Tensor pose = reshape(rel.to_tensor(), {1, 6});
  const auto warped = photo::warp(reshape(src.rgb, {1, 3, h, w}), depth, pose, K);
  const auto proj = photo::project_points(depth, pose, K);
  const auto src_depth = grid_sample(reshape(src.depth, {1, 1, h, w}),
                                     photo::normalized_to_pixels(proj.coords, h, w));

  ReprojectionStats st;
  st.total = h * w;
  double err = 0.0;
  const photo::Mat3 R = rel.rotation_matrix();
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t k = i * w + j;
      if (warped.valid.data()[k] == 0.0) continue;
      const photo::Vec3 ray = K.ray((j + 0.5) / w, (i + 0.5) / h);
      const double z = (R * (tgt.depth.data()[k] * ray) + rel.translation).z();
      if (std::fabs(src_depth.output.data()[k] - z) > 0.01 * z) continue;
      for (std::size_t c = 0; c < 3; ++c)
        err += std::fabs(warped.image.data()[c * h * w + k] - tgt.rgb.data()[c * h * w + k]);
      ++st.pixels;
    }
  st.mae = st.pixels ? err / (3.0 * static_cast<double>(st.pixels)) : 0.0;
  return st;
}

}  // namespace pdseg::testing
