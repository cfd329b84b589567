#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "doctest.h"
#include "pdseg/errors.hpp"
#include "pdseg/photometric.hpp"
#include "support/gradcheck.hpp"

using namespace pdseg;
using namespace pdseg::photo;
using pdseg::testing::gradcheck;
using pdseg::testing::random_tensor;

namespace {

Tensor pose_tensor(std::initializer_list<Pose> poses, bool rg = false) {
  std::vector<double> v;
  for (const Pose& p : poses) {
    const Tensor t = p.to_tensor();
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  return Tensor(Shape{poses.size(), 6}, std::move(v), rg);
}

// Smooth, low-curvature image so bilinear kinks stay small under FD probing.
Tensor smooth_image(std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> v(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        v[(ch * h + i) * w + j] = 0.5 + 0.3 * std::sin(0.35 * j + 0.2 * ch) * std::cos(0.25 * i);
  return Tensor(Shape{1, c, h, w}, std::move(v));
}

// SSIM of one pixel evaluated straight from its zero-padded window.
double ssim_at(const std::vector<double>& x, const std::vector<double>& y, int h, int w, int r,
               int c) {
  double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
  for (int dr = -1; dr <= 1; ++dr)
    for (int dc = -1; dc <= 1; ++dc) {
      const int rr = r + dr, cc = c + dc;
      if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
      const double a = x[rr * w + cc], b = y[rr * w + cc];
      mx += a;
      my += b;
      xx += a * a;
      yy += b * b;
      xy += a * b;
    }
  mx /= 9, my /= 9, xx /= 9, yy /= 9, xy /= 9;
  const double c1 = 1e-4, c2 = 9e-4;
  return (2 * mx * my + c1) * (2 * (xy - mx * my) + c2) /
         ((mx * mx + my * my + c1) * (xx - mx * mx + yy - my * my + c2));
}

}  // namespace

TEST_CASE("rotation is orthonormal with unit determinant") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  for (int k = 0; k < 50; ++k) {
    const Vec3 r(d(rng), d(rng), d(rng));
    const Mat3 R = rotation_from_axis_angle(r * (k % 5 == 0 ? 1e-4 : 1.0));
    CHECK((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::fabs(R.determinant() - 1.0) < 1e-9);
  }
}

TEST_CASE("rotation agrees with Eigen angle-axis and round-trips") {
  const Vec3 r(0.3, -0.7, 0.2);
  const Mat3 ref = Eigen::AngleAxisd(r.norm(), r.normalized()).toRotationMatrix();
  CHECK((rotation_from_axis_angle(r) - ref).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((axis_angle_from_rotation(ref) - r).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rotation jacobian matches finite differences") {
  for (double scale : {1.0, 1e-3, 1e-7, 0.0}) {
    const Vec3 r = Vec3(0.4, -0.9, 0.25) * scale;
    const auto J = rotation_jacobian(r);
    for (int k = 0; k < 3; ++k) {
      const double h = 1e-6;
      const Mat3 num = (rotation_from_axis_angle(r + h * Vec3::Unit(k)) -
                        rotation_from_axis_angle(r - h * Vec3::Unit(k))) /
                       (2 * h);
      CHECK((num - J[static_cast<std::size_t>(k)]).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("pose inverse and composition") {
  const Pose p{Vec3(0.1, 0.2, -0.3), Vec3(1.0, -2.0, 0.5)};
  const Vec3 x(0.3, 0.4, 5.0);
  CHECK((p.inverse().apply(p.apply(x)) - x).norm() < 1e-12);
  const Pose q{Vec3(-0.2, 0.05, 0.1), Vec3(0.0, 0.3, -1.0)};
  const Pose qp = Pose::compose(q, p);
  CHECK((qp.apply(x) - q.apply(p.apply(x))).norm() < 1e-12);
  const Pose id = Pose::compose(p.inverse(), p);
  CHECK(id.rotation.norm() < 1e-12);
  CHECK(id.translation.norm() < 1e-12);
}

TEST_CASE("intrinsics validation and inverse") {
  CameraIntrinsics K;
  CHECK((K.matrix() * K.inverse() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-15);
  K.fx = 0;
  CHECK_THROWS_AS(K.validate(), ConfigError);
  K.fx = 1;
  K.cy = NAN;
  CHECK_THROWS_AS(K.validate(), ConfigError);
}

TEST_CASE("identity pose maps the grid onto itself") {
  std::mt19937_64 rng(5);
  const Tensor depth = random_tensor({2, 6, 7}, rng, 0.5, 9.0, false);
  const auto proj = project_points(depth, pose_tensor({Pose{}, Pose{}}), CameraIntrinsics{});
  const Tensor grid = pixel_grid(6, 7);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 6 * 7 * 2; ++k)
      CHECK(proj.coords.data()[b * 84 + k] == doctest::Approx(grid.data()[k]).epsilon(1e-14));
  for (double v : proj.valid.data()) CHECK(v == 1.0);
}

TEST_CASE("worked projection example") {
  // Width 5 puts column 3's center at u = 0.7; height 1 puts v at 0.5.
  const Tensor depth(Shape{1, 1, 5}, 2.0);
  const Pose p{Vec3::Zero(), Vec3(0.1, 0, 0)};
  const auto proj = project_points(depth, pose_tensor({p}), CameraIntrinsics{});
  CHECK(proj.coords.at({0, 0, 3, 0}) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(proj.coords.at({0, 0, 3, 1}) == doctest::Approx(0.5).epsilon(1e-12));
  const Tensor px = normalized_to_pixels(proj.coords, 1, 5);
  CHECK(px.at({0, 0, 3, 0}) == doctest::Approx(3.25));
}

TEST_CASE("forward z-translation moves coordinates radially outward") {
  std::mt19937_64 rng(8);
  const Tensor depth = random_tensor({1, 8, 8}, rng, 2.0, 6.0, false);
  const Pose p{Vec3::Zero(), Vec3(0, 0, -1.5)};
  const auto proj = project_points(depth, pose_tensor({p}), CameraIntrinsics{});
  const Tensor grid = pixel_grid(8, 8);
  for (std::size_t k = 0; k < 64; ++k) {
    REQUIRE(proj.valid.data()[k] == 1.0);
    const double ox = grid.data()[2 * k] - 0.5, oy = grid.data()[2 * k + 1] - 0.5;
    const double nx = proj.coords.data()[2 * k] - 0.5, ny = proj.coords.data()[2 * k + 1] - 0.5;
    // Oracle: same direction, scaled by D / (D - 1.5).
    const double s = depth.data()[k] / (depth.data()[k] - 1.5);
    CHECK(nx == doctest::Approx(ox * s).epsilon(1e-12));
    CHECK(ny == doctest::Approx(oy * s).epsilon(1e-12));
    CHECK(nx * nx + ny * ny > ox * ox + oy * oy);
  }
}

TEST_CASE("points behind the camera are invalid") {
  const Tensor depth(Shape{1, 2, 2}, 1.0);
  const Pose p{Vec3::Zero(), Vec3(0, 0, -2.0)};
  const auto proj = project_points(depth, pose_tensor({p}), CameraIntrinsics{});
  for (double v : proj.valid.data()) CHECK(v == 0.0);
  for (double v : proj.coords.data()) CHECK(v == -1.0);
  CHECK_THROWS_AS(project_points(Tensor(Shape{2, 2}, 1.0), pose_tensor({p}), CameraIntrinsics{}),
                  ShapeError);
}

TEST_CASE("identity warp reproduces the source") {
  std::mt19937_64 rng(9);
  const Tensor src = random_tensor({2, 3, 5, 6}, rng, 0.0, 1.0, false);
  const Tensor depth = random_tensor({2, 5, 6}, rng, 1.0, 4.0, false);
  const auto w = warp(src, depth, pose_tensor({Pose{}, Pose{}}), CameraIntrinsics{});
  for (std::size_t k = 0; k < src.numel(); ++k)
    CHECK(w.image.data()[k] == doctest::Approx(src.data()[k]).epsilon(1e-12));
  for (double v : w.valid.data()) CHECK(v == 1.0);
}

TEST_CASE("warp by a pose then its inverse returns to the source") {
  // A fronto-parallel plane keeps depths consistent in both views.
  const std::size_t n = 32;
  const Tensor src = smooth_image(1, n, n);
  const double z = 4.0;
  const Pose p{Vec3(0, 0.02, 0), Vec3(0.1, 0.0, 0.0)};
  const Tensor d_tgt(Shape{1, n, n}, z);
  const auto fwd = warp(src, d_tgt, pose_tensor({p}), CameraIntrinsics{});
  // The plane z_t = z seen from the source frame: (R e_z).x = z + (R e_z).t.
  const Mat3 R = p.rotation_matrix();
  const Vec3 nrm = R.col(2);
  const double dist = z + nrm.dot(p.translation);
  std::vector<double> dsrc(n * n);
  const CameraIntrinsics K;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      dsrc[i * n + j] = dist / nrm.dot(K.ray((j + 0.5) / n, (i + 0.5) / n));
  // The forward validity rides along as a channel so border mixing is excluded.
  const Tensor both = concat({fwd.image, reshape(fwd.valid, {1, 1, n, n})}, 1);
  const auto back = warp(both, Tensor(Shape{1, n, n}, dsrc), pose_tensor({p.inverse()}), K);
  double err = 0, cnt = 0;
  for (std::size_t k = 0; k < n * n; ++k) {
    if (back.valid.data()[k] == 0.0 || back.image.data()[n * n + k] < 1.0 - 1e-9) continue;
    err += std::fabs(back.image.data()[k] - src.data()[k]);
    cnt += 1;
  }
  REQUIRE(cnt > n * n / 2);
  CHECK(err / cnt < 0.03);
}

TEST_CASE("warp gradients w.r.t. pose, depth and source") {
  const std::size_t h = 9, w = 10;
  const Tensor src = smooth_image(2, h, w);
  std::mt19937_64 rng(12);
  Tensor depth = random_tensor({1, h, w}, rng, 3.0, 5.0);
  Tensor pose = pose_tensor({Pose{Vec3(0.01, -0.02, 0.015), Vec3(0.05, 0.03, -0.1)}}, true);
  auto mean_warp = [](const std::vector<Tensor>& in) {
    return mean(warp(in[0], in[1], in[2], CameraIntrinsics{}).image);
  };
  Tensor s = src.detach().requires_grad_();
  CHECK(gradcheck(mean_warp, {s.detach(), depth.detach(), pose}, 1e-6) < 1e-3);
  CHECK(gradcheck(mean_warp, {s.detach(), depth, pose.detach()}, 1e-6) < 1e-3);
  CHECK(gradcheck(mean_warp, {s, depth.detach(), pose.detach()}, 1e-6) < 1e-3);
}

TEST_CASE("ssim properties") {
  std::mt19937_64 rng(21);
  const Tensor x = random_tensor({3, 6, 7}, rng, 0.0, 1.0, false);
  const Tensor y = random_tensor({3, 6, 7}, rng, 0.0, 1.0, false);
  const Tensor sxx = ssim(x, x);
  CHECK(sxx.shape() == x.shape());
  for (double v : sxx.data()) CHECK(std::fabs(v - 1.0) < 1e-9);
  const Tensor sxy = ssim(x, y), syx = ssim(y, x);
  for (std::size_t k = 0; k < sxy.numel(); ++k) {
    CHECK(sxy.data()[k] == syx.data()[k]);
    CHECK(sxy.data()[k] >= -1.0);
    CHECK(sxy.data()[k] <= 1.0);
  }
  CHECK_THROWS_AS(ssim(x, Tensor(Shape{3, 6, 6})), ShapeError);
  PhotometricConfig bad;
  bad.c1 = 0;
  CHECK_THROWS_AS(ssim(x, y, bad), ConfigError);
}

TEST_CASE("ssim of a checkerboard against its complement") {
  const int h = 6, w = 6;
  std::vector<double> x(h * w), y(h * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      x[r * w + c] = (r + c) % 2;
      y[r * w + c] = 1.0 - x[r * w + c];
    }
  const Tensor s = ssim(Tensor(Shape{1, h, w}, x), Tensor(Shape{1, h, w}, y));
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      CHECK(s.at({0, size_t(r), size_t(c)}) == doctest::Approx(ssim_at(x, y, h, w, r, c)));
      if (r > 0 && r < h - 1 && c > 0 && c < w - 1) CHECK(s.at({0, size_t(r), size_t(c)}) < 0.0);
    }
}

TEST_CASE("photometric loss values") {
  std::mt19937_64 rng(31);
  const Tensor a = random_tensor({2, 3, 6, 6}, rng, 0.0, 1.0, false);
  const Tensor b = random_tensor({2, 3, 6, 6}, rng, 0.0, 1.0, false);
  const Tensor full(Shape{2, 6, 6}, 1.0);
  CHECK(photometric_loss(a, a, full).item() <= 1e-9);

  PhotometricConfig l1;
  l1.alpha = 0.0;
  double mae = 0;
  for (std::size_t k = 0; k < a.numel(); ++k) mae += std::fabs(a.data()[k] - b.data()[k]);
  CHECK(photometric_loss(a, b, full, l1).item() == doctest::Approx(mae / a.numel()));

  PhotometricConfig s1;
  s1.alpha = 1.0;
  CHECK(photometric_loss(a, a, full, s1).item() <= 1e-9);
  const double v = photometric_loss(a, b, full, s1).item();
  CHECK(v > 0.0);
  CHECK(v <= 1.0);

  // Only valid pixels count.
  std::vector<double> m(72, 0.0);
  m[7] = 1.0;
  double one = 0;
  for (std::size_t c = 0; c < 3; ++c) one += std::fabs(a.data()[c * 36 + 7] - b.data()[c * 36 + 7]);
  CHECK(photometric_loss(a, b, Tensor(Shape{2, 6, 6}, m), l1).item() ==
        doctest::Approx(one / 3));

  CHECK_THROWS_AS(photometric_loss(a, b, Tensor(Shape{2, 6, 6}, 0.0)), DegenerateBatchError);
  CHECK_THROWS_AS(photometric_loss(a, b, Tensor(Shape{2, 5, 6}, 1.0)), ShapeError);
}

TEST_CASE("photometric loss gradient") {
  std::mt19937_64 rng(32);
  Tensor a = random_tensor({1, 2, 5, 5}, rng, 0.0, 1.0, false);
  Tensor b = random_tensor({1, 2, 5, 5}, rng, 0.0, 1.0);
  std::vector<double> m(25, 1.0);
  m[3] = m[11] = 0.0;
  const Tensor valid(Shape{1, 5, 5}, m);
  auto f = [&](const std::vector<Tensor>& in) { return photometric_loss(in[0], in[1], valid); };
  CHECK(gradcheck(f, {a, b}) < 1e-3);
}

TEST_CASE("smoothness loss") {
  const std::size_t h = 5, w = 6;
  const Tensor img(Shape{3, h, w}, 0.4);
  CHECK(smoothness_loss(Tensor(Shape{h, w}, 3.0), img).item() == 0.0);

  std::vector<double> ramp(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) ramp[i * w + j] = 2.0 + 0.5 * j;
  const double mean_depth = 2.0 + 0.5 * (w - 1) / 2.0;
  const Tensor d(Shape{h, w}, ramp);
  CHECK(smoothness_loss(d, img).item() == doctest::Approx(0.5 / mean_depth).epsilon(1e-12));
  CHECK(smoothness_loss(d * 7.5, img).item() ==
        doctest::Approx(smoothness_loss(d, img).item()).epsilon(1e-12));

  CHECK_THROWS_AS(smoothness_loss(Tensor(Shape{h, w}, 0.0), img), DegenerateBatchError);
  CHECK_THROWS_AS(smoothness_loss(d, Tensor(Shape{3, h, w + 1})), ShapeError);
}

TEST_CASE("smoothness loss gradient and non-negativity") {
  std::mt19937_64 rng(41);
  Tensor d = random_tensor({2, 5, 5}, rng, 1.0, 3.0);
  Tensor img = random_tensor({2, 3, 5, 5}, rng, 0.0, 1.0);
  auto f = [](const std::vector<Tensor>& in) { return smoothness_loss(in[0], in[1]); };
  CHECK(f({d, img}).item() >= 0.0);
  CHECK(gradcheck(f, {d, img}) < 1e-3);
}
