#pragma once

// Camera geometry and the self-supervised view-synthesis losses.
//
// Geometry works in normalized image coordinates: the image spans [0,1]^2
// and pixel (row i, col j) has its center at ((j + 0.5) / W, (i + 0.5) / H).
// Conversion to sampler pixel units happens only in normalized_to_pixels.

#include <Eigen/Core>
#include <array>
#include <cstddef>

#include "pdseg/tensor.hpp"

namespace pdseg::photo {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics in normalized units. The defaults are the unit-focal,
/// centered substitute used when true intrinsics are unknown.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.5;
  double cy = 0.5;

  Mat3 matrix() const;
  Mat3 inverse() const;
  /// Throws ConfigError unless fx, fy > 0 and all values are finite.
  void validate() const;
  /// Viewing ray (z = 1) through a normalized image point.
  Vec3 ray(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }
};

/// Rotation matrix of an axis-angle vector (Rodrigues).
Mat3 rotation_from_axis_angle(const Vec3& r);
/// Inverse of rotation_from_axis_angle for proper rotations.
Vec3 axis_angle_from_rotation(const Mat3& R);
/// dR/dr_k for k = 0..2, stable near the identity.
std::array<Mat3, 3> rotation_jacobian(const Vec3& r);

/// Rigid motion x -> R(rotation) x + translation.
struct Pose {
  Vec3 rotation = Vec3::Zero();
  Vec3 translation = Vec3::Zero();

  Mat3 rotation_matrix() const { return rotation_from_axis_angle(rotation); }
  Vec3 apply(const Vec3& x) const { return rotation_matrix() * x + translation; }
  Pose inverse() const;
  /// `after` applied to the result of `before`.
  static Pose compose(const Pose& after, const Pose& before);
  static Pose from_matrix(const Mat3& R, const Vec3& t);
  /// [6] tensor (rx, ry, rz, tx, ty, tz).
  Tensor to_tensor() const;
  static Pose from_values(std::span<const double> six);
};

/// [H,W,2] normalized (u, v) centers of the target pixel grid.
Tensor pixel_grid(std::size_t height, std::size_t width);

struct ProjectionResult {
  Tensor coords;  ///< [N,H,W,2] normalized (u, v) in the source view
  Tensor valid;   ///< [N,H,W] 0 where the transformed depth is <= 0
};

/// For every target pixel p: back-project with K^-1, scale by depth, apply
/// the pose, perspective-divide and re-project with K. `depth` is [N,H,W],
/// `pose` is [N,6]. Differentiable w.r.t. depth and pose. Invalid pixels get
/// coordinates (-1, -1), outside the image.
ProjectionResult project_points(const Tensor& depth, const Tensor& pose,
                                const CameraIntrinsics& K);

/// Normalized [.., 2] coordinates to sampler pixel units: u * W - 0.5.
Tensor normalized_to_pixels(const Tensor& coords, std::size_t height, std::size_t width);

struct WarpResult {
  Tensor image;  ///< [N,C,H,W] source resampled into the target view
  Tensor valid;  ///< [N,H,W] projection in front of the camera and inside the source
};

/// Inverse warp of `src` [N,C,H,W] into the target view described by the
/// target depth [N,H,W] and the target-to-source pose [N,6].
WarpResult warp(const Tensor& src, const Tensor& depth_target, const Tensor& pose,
                const CameraIntrinsics& K);

struct PhotometricConfig {
  double alpha = 0.85;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
  std::size_t window = 3;
  double smoothness_weight = 1e-3;

  void validate() const;
};

/// Per-pixel SSIM map from window x window zero-padded average pooling.
/// Accepts [C,H,W] or [N,C,H,W]; returns the same shape.
Tensor ssim(const Tensor& x, const Tensor& y, const PhotometricConfig& cfg = {});

/// Mean over valid pixels of the channel-averaged
/// (alpha / 2)(1 - SSIM) + (1 - alpha)|target - warped|.
/// Images [N,C,H,W] (or [C,H,W]) and validity [N,H,W] (or [H,W]).
/// Throws DegenerateBatchError when no pixel is valid.
Tensor photometric_loss(const Tensor& target, const Tensor& warped, const Tensor& valid,
                        const PhotometricConfig& cfg = {});

/// Edge-aware first-order smoothness of the mean-normalized depth:
/// mean |dx d^| exp(-|dx I|) + mean |dy d^| exp(-|dy I|), image gradients
/// averaged over channels. Depth [N,H,W] or [H,W]; image [N,C,H,W] or [C,H,W].
/// Throws DegenerateBatchError when an image has zero mean depth.
Tensor smoothness_loss(const Tensor& depth, const Tensor& image);

}  // namespace pdseg::photo
