#include "pdseg/photometric.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <memory>
#include <vector>

#include "pdseg/errors.hpp"

namespace pdseg::photo {

namespace {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Rodrigues coefficients R = I + a K + b K^2 with K = [r]x, plus
// c = a'(t)/t and d = b'(t)/t. Series below 1e-2 keep them accurate to
// about 1e-12 where the closed forms cancel catastrophically.
struct RodriguesCoeffs {
  double a, b, c, d;
};

RodriguesCoeffs rodrigues_coeffs(double theta) {
  const double t2 = theta * theta;
  if (theta < 1e-2) {
    return {1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0, -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0};
  }
  const double s = std::sin(theta), co = std::cos(theta);
  return {s / theta, (1.0 - co) / t2, (theta * co - s) / (t2 * theta),
          (theta * s - 2.0 * (1.0 - co)) / (t2 * t2)};
}

void ensure_grad(detail::Node& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
}

// Image tensors may come without the batch axis; this lifts them to 4-D.
Tensor as_batched(const Tensor& t, std::size_t rank, const char* what) {
  if (t.dim() == rank) return t;
  if (t.dim() + 1 == rank) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    return reshape(t, s);
  }
  throw ShapeError(std::string(what) + ": unexpected shape " + shape_str(t.shape()));
}

}  // namespace

Mat3 CameraIntrinsics::matrix() const {
  Mat3 k;
  k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return k;
}

Mat3 CameraIntrinsics::inverse() const {
  Mat3 k;
  k << 1 / fx, 0, -cx / fx, 0, 1 / fy, -cy / fy, 0, 0, 1;
  return k;
}

void CameraIntrinsics::validate() const {
  if (!(std::isfinite(fx) && std::isfinite(fy) && std::isfinite(cx) && std::isfinite(cy)))
    throw ConfigError("camera intrinsics must be finite");
  if (!(fx > 0 && fy > 0)) throw ConfigError("camera focal lengths must be positive");
}

Mat3 rotation_from_axis_angle(const Vec3& r) {
  const RodriguesCoeffs k = rodrigues_coeffs(r.norm());
  const Mat3 K = skew(r);
  return Mat3::Identity() + k.a * K + k.b * K * K;
}

Vec3 axis_angle_from_rotation(const Mat3& R) {
  const Eigen::AngleAxisd aa(R);
  return aa.axis() * aa.angle();
}

std::array<Mat3, 3> rotation_jacobian(const Vec3& r) {
  const RodriguesCoeffs k = rodrigues_coeffs(r.norm());
  const Mat3 K = skew(r);
  const Mat3 K2 = K * K;
  std::array<Mat3, 3> out;
  for (int i = 0; i < 3; ++i) {
    const Mat3 E = skew(Vec3::Unit(i));
    out[static_cast<std::size_t>(i)] =
        k.c * r(i) * K + k.a * E + k.d * r(i) * K2 + k.b * (E * K + K * E);
  }
  return out;
}

Pose Pose::inverse() const {
  const Mat3 Rt = rotation_matrix().transpose();
  return {-rotation, -(Rt * translation)};
}

Pose Pose::compose(const Pose& after, const Pose& before) {
  const Mat3 Ra = after.rotation_matrix();
  return from_matrix(Ra * before.rotation_matrix(), Ra * before.translation + after.translation);
}

Pose Pose::from_matrix(const Mat3& R, const Vec3& t) { return {axis_angle_from_rotation(R), t}; }

Tensor Pose::to_tensor() const {
  return Tensor(Shape{6}, {rotation.x(), rotation.y(), rotation.z(), translation.x(),
                           translation.y(), translation.z()});
}

Pose Pose::from_values(std::span<const double> six) {
  if (six.size() != 6) throw ShapeError("a pose needs 6 values");
  return {Vec3(six[0], six[1], six[2]), Vec3(six[3], six[4], six[5])};
}

Tensor pixel_grid(std::size_t height, std::size_t width) {
  std::vector<double> g(height * width * 2);
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      g[2 * (i * width + j)] = (static_cast<double>(j) + 0.5) / static_cast<double>(width);
      g[2 * (i * width + j) + 1] = (static_cast<double>(i) + 0.5) / static_cast<double>(height);
    }
  return Tensor(Shape{height, width, 2}, std::move(g));
}

ProjectionResult project_points(const Tensor& depth, const Tensor& pose,
                                const CameraIntrinsics& K) {
  K.validate();
  const Shape& ds = depth.shape();
  const Shape& ps = pose.shape();
  if (ds.size() != 3 || ps.size() != 2 || ps[1] != 6 || ps[0] != ds[0])
    throw ShapeError("project_points expects depth [N,H,W] and pose [N,6], got " +
                     shape_str(ds) + " and " + shape_str(ps));
  const std::size_t n = ds[0], h = ds[1], w = ds[2], hw = h * w;
  const auto dd = depth.data();
  const auto pd = pose.data();

  // Saved per pixel for the backward pass: the ray and the transformed point.
  struct Saved {
    Vec3 ray, point;
    bool valid;
  };
  auto saved = std::make_shared<std::vector<Saved>>(n * hw);
  std::vector<double> coords(n * hw * 2);
  std::vector<double> valid(n * hw, 0.0);

  for (std::size_t b = 0; b < n; ++b) {
    const Pose p = Pose::from_values(pd.subspan(6 * b, 6));
    const Mat3 R = p.rotation_matrix();
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t idx = b * hw + i * w + j;
        Saved& s = (*saved)[idx];
        s.ray = K.ray((static_cast<double>(j) + 0.5) / static_cast<double>(w),
                      (static_cast<double>(i) + 0.5) / static_cast<double>(h));
        s.point = R * (dd[idx] * s.ray) + p.translation;
        s.valid = s.point.z() > 0.0 && std::isfinite(s.point.z());
        if (s.valid) {
          coords[2 * idx] = K.fx * s.point.x() / s.point.z() + K.cx;
          coords[2 * idx + 1] = K.fy * s.point.y() / s.point.z() + K.cy;
          valid[idx] = 1.0;
        } else {
          coords[2 * idx] = -1.0;
          coords[2 * idx + 1] = -1.0;
        }
      }
  }

  ProjectionResult result;
  result.valid = Tensor(Shape{n, h, w}, std::move(valid));
  result.coords = detail::make_result(
      {n, h, w, 2}, std::move(coords), {&depth, &pose},
      [saved, n, hw, K](detail::Node& self) {
        detail::Node& nd = *self.inputs[0];
        detail::Node& np = *self.inputs[1];
        if (nd.requires_grad) ensure_grad(nd);
        if (np.requires_grad) ensure_grad(np);
        for (std::size_t b = 0; b < n; ++b) {
          const Pose p = Pose::from_values(std::span<const double>(np.data).subspan(6 * b, 6));
          const Mat3 R = p.rotation_matrix();
          Vec3 g_t = Vec3::Zero();
          Mat3 g_R = Mat3::Zero();
          for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t idx = b * hw + k;
            const Saved& s = (*saved)[idx];
            if (!s.valid) continue;
            const double gu = self.grad[2 * idx], gv = self.grad[2 * idx + 1];
            if (gu == 0.0 && gv == 0.0) continue;
            const double z = s.point.z();
            const Vec3 g_point(gu * K.fx / z, gv * K.fy / z,
                               -(gu * K.fx * s.point.x() + gv * K.fy * s.point.y()) / (z * z));
            const Vec3 x_cam = nd.data[idx] * s.ray;
            if (nd.requires_grad) nd.grad[idx] += g_point.dot(R * s.ray);
            g_t += g_point;
            g_R += g_point * x_cam.transpose();
          }
          if (!np.requires_grad) continue;
          const auto dR = rotation_jacobian(p.rotation);
          for (std::size_t a = 0; a < 3; ++a) {
            np.grad[6 * b + a] += dR[a].cwiseProduct(g_R).sum();
            np.grad[6 * b + 3 + a] += g_t(static_cast<Eigen::Index>(a));
          }
        }
      });
  return result;
}

Tensor normalized_to_pixels(const Tensor& coords, std::size_t height, std::size_t width) {
  if (coords.dim() == 0 || coords.shape().back() != 2)
    throw ShapeError("coordinates need a trailing axis of 2, got " + shape_str(coords.shape()));
  const Tensor scale(Shape{2}, {static_cast<double>(width), static_cast<double>(height)});
  return coords * scale - 0.5;
}

WarpResult warp(const Tensor& src, const Tensor& depth_target, const Tensor& pose,
                const CameraIntrinsics& K) {
  if (src.dim() != 4 || depth_target.dim() != 3 || src.size(0) != depth_target.size(0))
    throw ShapeError("warp expects src [N,C,H,W] and depth [N,H,W], got " +
                     shape_str(src.shape()) + " and " + shape_str(depth_target.shape()));
  const ProjectionResult proj = project_points(depth_target, pose, K);
  const Tensor pix = normalized_to_pixels(proj.coords, src.size(2), src.size(3));
  GridSampleResult gs = grid_sample(src, pix);
  return {gs.output, proj.valid * gs.valid};
}

void PhotometricConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(c1 > 0.0 && c2 > 0.0)) throw ConfigError("SSIM constants must be positive");
  if (window == 0 || window % 2 == 0) throw ConfigError("SSIM window must be odd");
  if (!(smoothness_weight >= 0.0)) throw ConfigError("smoothness weight must be >= 0");
}

Tensor ssim(const Tensor& x, const Tensor& y, const PhotometricConfig& cfg) {
  cfg.validate();
  if (x.shape() != y.shape())
    throw ShapeError("ssim inputs differ in shape: " + shape_str(x.shape()) + " vs " +
                     shape_str(y.shape()));
  const Tensor xb = as_batched(x, 4, "ssim");
  const Tensor yb = as_batched(y, 4, "ssim");
  const std::size_t k = cfg.window, pad = cfg.window / 2;
  auto pool = [&](const Tensor& t) { return avg_pool2d(t, k, 1, pad); };
  const Tensor mx = pool(xb), my = pool(yb);
  const Tensor sxx = pool(xb * xb) - mx * mx;
  const Tensor syy = pool(yb * yb) - my * my;
  const Tensor sxy = pool(xb * yb) - mx * my;
  const Tensor num = (2.0 * mx * my + cfg.c1) * (2.0 * sxy + cfg.c2);
  const Tensor den = (mx * mx + my * my + cfg.c1) * (sxx + syy + cfg.c2);
  const Tensor out = num / den;
  return x.dim() == 4 ? out : reshape(out, x.shape());
}

Tensor photometric_loss(const Tensor& target, const Tensor& warped, const Tensor& valid,
                        const PhotometricConfig& cfg) {
  cfg.validate();
  const Tensor t = as_batched(target, 4, "photometric_loss");
  const Tensor w = as_batched(warped, 4, "photometric_loss");
  const Tensor m = as_batched(valid, 3, "photometric_loss");
  if (t.shape() != w.shape())
    throw ShapeError("photometric_loss images differ in shape: " + shape_str(t.shape()) +
                     " vs " + shape_str(w.shape()));
  if (m.shape() != Shape{t.size(0), t.size(2), t.size(3)})
    throw ShapeError("photometric_loss validity mask has shape " + shape_str(m.shape()));
  const double count = sum(m.detach()).item();
  if (!(count > 0.0)) throw DegenerateBatchError("no valid pixel in the photometric loss");

  const Tensor s = ssim(t, w, cfg);
  const Tensor per = (cfg.alpha / 2.0) * rsub(1.0, s) + (1.0 - cfg.alpha) * abs(t - w);
  const Tensor per_pixel = mean(per, {1});
  return sum(per_pixel * m) * (1.0 / count);
}

Tensor smoothness_loss(const Tensor& depth, const Tensor& image) {
  const Tensor d = as_batched(depth, 3, "smoothness_loss");
  const Tensor img = as_batched(image, 4, "smoothness_loss");
  if (img.size(0) != d.size(0) || img.size(2) != d.size(1) || img.size(3) != d.size(2))
    throw ShapeError("smoothness_loss depth " + shape_str(d.shape()) + " and image " +
                     shape_str(img.shape()) + " disagree");
  const std::size_t h = d.size(1), w = d.size(2);
  if (h < 2 || w < 2) throw ShapeError("smoothness_loss needs at least 2x2 images");

  const Tensor mu = mean(d, {1, 2}, true);
  for (double v : mu.data())
    if (!(std::abs(v) > 0.0)) throw DegenerateBatchError("depth map with zero mean");
  const Tensor dn = d / mu;

  const Tensor ddx = abs(slice(dn, 2, 1, w) - slice(dn, 2, 0, w - 1));
  const Tensor ddy = abs(slice(dn, 1, 1, h) - slice(dn, 1, 0, h - 1));
  const Tensor idx = mean(abs(slice(img, 3, 1, w) - slice(img, 3, 0, w - 1)), {1});
  const Tensor idy = mean(abs(slice(img, 2, 1, h) - slice(img, 2, 0, h - 1)), {1});
  return mean(ddx * exp(-idx)) + mean(ddy * exp(-idy));
}

}  // namespace pdseg::photo
