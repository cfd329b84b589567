#include "pdseg/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>

#include "pdseg/errors.hpp"

namespace pdseg::synth {

namespace {

constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "sphere",  "box",     "cylinder", "cone",   "torus",       "capsule",
    "ellipsoid", "pyramid", "prism3", "prism6", "half_sphere", "rounded_box"};

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMinT = 1e-9;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double hash_unit(std::uint64_t seed, std::int64_t a, std::int64_t b, std::int64_t c) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(a));
  h = splitmix64(h ^ static_cast<std::uint64_t>(b));
  h = splitmix64(h ^ static_cast<std::uint64_t>(c));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3 - 2 * t); }

double value_noise(const Vec3& p, std::uint64_t seed) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy),
             iz = static_cast<std::int64_t>(fz);
  const double tx = smooth(p.x() - fx), ty = smooth(p.y() - fy), tz = smooth(p.z() - fz);
  double acc = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
        acc += w * hash_unit(seed, ix + dx, iy + dy, iz + dz);
      }
  return acc;
}

// Blend factor in [0,1] between the two colors of a procedural solid texture.
double pattern(Texture tex, const Vec3& p, double freq, std::uint64_t seed) {
  switch (tex) {
    case Texture::flat:
      return 0.0;
    case Texture::stripes: {
      Vec3 axis(hash_unit(seed, 1, 0, 0) - 0.5, hash_unit(seed, 2, 0, 0) - 0.5,
                hash_unit(seed, 3, 0, 0) - 0.5);
      if (axis.norm() < 1e-6) axis = Vec3::UnitX();
      return std::sin(std::numbers::pi * freq * p.dot(axis.normalized())) > 0 ? 1.0 : 0.0;
    }
    case Texture::checker: {
      const auto s = static_cast<std::int64_t>(std::floor(freq * p.x()) +
                                               std::floor(freq * p.y()) +
                                               std::floor(freq * p.z()));
      return (s % 2 + 2) % 2 == 1 ? 1.0 : 0.0;
    }
    case Texture::noise:
      return value_noise(freq * p, seed);
  }
  return 0.0;
}

Vec3 hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double k[3] = {5.0, 3.0, 1.0};
  Vec3 out;
  for (int i = 0; i < 3; ++i) {
    const double kk = std::fmod(k[i] + h * 6.0, 6.0);
    out(i) = v - v * s * std::max(0.0, std::min({kk, 4.0 - kk, 1.0}));
  }
  return out;
}

// ---- convex clipping in object coordinates ------------------------------------

struct Interval {
  double t0 = -kInf, t1 = kInf;
  Vec3 n0 = Vec3::Zero();
  bool empty() const { return t0 > t1; }
};

// n.x <= offset
void clip_halfspace(Interval& iv, const Vec3& o, const Vec3& d, const Vec3& n, double offset) {
  const double denom = n.dot(d);
  const double num = offset - n.dot(o);
  if (std::fabs(denom) < 1e-15) {
    if (num < 0) iv.t0 = kInf;
    return;
  }
  const double t = num / denom;
  if (denom < 0) {
    if (t > iv.t0) {
      iv.t0 = t;
      iv.n0 = n;
    }
  } else {
    iv.t1 = std::min(iv.t1, t);
  }
}

// Quadric |M (x - c)|^2 <= 1 for diagonal M = diag(inv_axes), restricted to the
// components where `mask` is 1.
void clip_quadric(Interval& iv, const Vec3& o, const Vec3& d, const Vec3& c, const Vec3& inv_axes,
                  const Vec3& mask) {
  const Vec3 oc = (o - c).cwiseProduct(inv_axes).cwiseProduct(mask);
  const Vec3 dc = d.cwiseProduct(inv_axes).cwiseProduct(mask);
  const double a = dc.squaredNorm();
  const double b = 2 * oc.dot(dc);
  const double cc = oc.squaredNorm() - 1.0;
  if (a < 1e-15) {
    if (cc > 0) iv.t0 = kInf;
    return;
  }
  const double disc = b * b - 4 * a * cc;
  if (disc < 0) {
    iv.t0 = kInf;
    return;
  }
  const double sq = std::sqrt(disc);
  const double q = b < 0 ? -0.5 * (b - sq) : -0.5 * (b + sq);
  double r0 = q / a, r1 = cc / q;
  if (r0 > r1) std::swap(r0, r1);
  if (r0 > iv.t0) {
    iv.t0 = r0;
    const Vec3 p = o + r0 * d - c;
    iv.n0 = p.cwiseProduct(inv_axes).cwiseProduct(inv_axes).cwiseProduct(mask);
  }
  iv.t1 = std::min(iv.t1, r1);
}

void clip_slab_y(Interval& iv, const Vec3& o, const Vec3& d, double lo, double hi) {
  clip_halfspace(iv, o, d, Vec3::UnitY(), hi);
  clip_halfspace(iv, o, d, -Vec3::UnitY(), -lo);
}

void clip_polygon_prism(Interval& iv, const Vec3& o, const Vec3& d, int sides, double radius,
                        double half_length) {
  const double inradius = radius * std::cos(std::numbers::pi / sides);
  for (int k = 0; k < sides; ++k) {
    const double a = std::numbers::pi / 2 + 2 * std::numbers::pi * k / sides;
    clip_halfspace(iv, o, d, Vec3(std::cos(a), 0, std::sin(a)), inradius);
  }
  clip_slab_y(iv, o, d, -half_length, half_length);
}

std::optional<Interval> convex_interval(const ObjectSpec& obj, const Vec3& o, const Vec3& d) {
  Interval iv;
  const Vec3& m = obj.dims;
  const Vec3 all(1, 1, 1), xz(1, 0, 1);
  switch (obj.shape) {
    case ShapeClass::sphere:
      clip_quadric(iv, o, d, Vec3::Zero(), all / m.x(), all);
      break;
    case ShapeClass::ellipsoid:
      clip_quadric(iv, o, d, Vec3::Zero(), m.cwiseInverse(), all);
      break;
    case ShapeClass::box:
      for (int a = 0; a < 3; ++a) {
        clip_halfspace(iv, o, d, Vec3::Unit(a), m(a));
        clip_halfspace(iv, o, d, -Vec3::Unit(a), m(a));
      }
      break;
    case ShapeClass::cylinder:
      clip_quadric(iv, o, d, Vec3::Zero(), all / m.x(), xz);
      clip_slab_y(iv, o, d, -m.y(), m.y());
      break;
    case ShapeClass::pyramid: {
      const double s = m.x(), h = m.y();
      const double base = -h / 4, apex = 3 * h / 4;
      for (int k = 0; k < 4; ++k) {
        const double a = std::numbers::pi / 2 * k;
        const Vec3 n(h * std::cos(a), s, h * std::sin(a));
        clip_halfspace(iv, o, d, n, s * apex);
      }
      clip_halfspace(iv, o, d, -Vec3::UnitY(), -base);
      break;
    }
    case ShapeClass::prism3:
      clip_polygon_prism(iv, o, d, 3, m.x(), m.y());
      break;
    case ShapeClass::prism6:
      clip_polygon_prism(iv, o, d, 6, m.x(), m.y());
      break;
    case ShapeClass::half_sphere: {
      const Vec3 c(0, -0.375 * m.x(), 0);
      clip_quadric(iv, o, d, c, all / m.x(), all);
      clip_halfspace(iv, o, d, -Vec3::UnitY(), -c.y());
      break;
    }
    default:
      return std::nullopt;
  }
  return iv;
}

// ---- signed distance families ---------------------------------------------------

double sdf(const ObjectSpec& obj, const Vec3& p) {
  const Vec3& m = obj.dims;
  switch (obj.shape) {
    case ShapeClass::torus: {
      const double qx = std::hypot(p.x(), p.z()) - m.x();
      return std::hypot(qx, p.y()) - m.y();
    }
    case ShapeClass::capsule: {
      Vec3 q = p;
      q.y() -= std::clamp(p.y(), -m.y(), m.y());
      return q.norm() - m.x();
    }
    case ShapeClass::rounded_box: {
      const double r = 0.3 * m.minCoeff();
      const Vec3 q = p.cwiseAbs() - (m - Vec3::Constant(r));
      return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0) - r;
    }
    case ShapeClass::cone: {
      // Apex at (0, h, 0), base disc of radius rho at y = -h.
      const double rho = m.x(), h = m.y();
      const double qx = rho, qy = -2 * h;
      const double wx = std::hypot(p.x(), p.z()), wy = p.y() - h;
      const double ta = std::clamp((wx * qx + wy * qy) / (qx * qx + qy * qy), 0.0, 1.0);
      const double ax = wx - qx * ta, ay = wy - qy * ta;
      const double bx = wx - qx * std::clamp(wx / qx, 0.0, 1.0), by = wy - qy;
      const double dist = std::min(ax * ax + ay * ay, bx * bx + by * by);
      const double s = std::max(-(wx * qy - wy * qx), -(wy - qy));
      return std::sqrt(dist) * (s > 0 ? 1.0 : -1.0);
    }
    default:
      return kInf;
  }
}

double local_bound(const ObjectSpec& obj) {
  const Vec3& m = obj.dims;
  switch (obj.shape) {
    case ShapeClass::sphere:
      return m.x();
    case ShapeClass::ellipsoid:
      return m.maxCoeff();
    case ShapeClass::box:
    case ShapeClass::rounded_box:
      return m.norm();
    case ShapeClass::cylinder:
    case ShapeClass::cone:
    case ShapeClass::prism3:
    case ShapeClass::prism6:
      return std::hypot(m.x(), m.y());
    case ShapeClass::torus:
      return m.x() + m.y();
    case ShapeClass::capsule:
      return m.x() + m.y();
    case ShapeClass::pyramid:
      return std::max(std::hypot(std::sqrt(2.0) * m.x(), m.y() / 4), 0.75 * m.y());
    case ShapeClass::half_sphere:
      return 1.07 * m.x();
  }
  return m.norm();
}

std::optional<std::pair<double, Vec3>> march(const ObjectSpec& obj, const Vec3& o, const Vec3& d) {
  const double dn = d.norm();
  const Vec3 u = d / dn;
  const double B = local_bound(obj) * 1.01;
  const double b = o.dot(u);
  const double c = o.squaredNorm() - B * B;
  const double disc = b * b - c;
  if (disc < 0) return std::nullopt;
  const double sq = std::sqrt(disc);
  double tau = std::max(-b - sq, 0.0);
  const double tau_end = -b + sq;
  for (int it = 0; it < 256 && tau <= tau_end; ++it) {
    const Vec3 p = o + tau * u;
    const double dist = sdf(obj, p);
    if (dist < 1e-7) {
      const double e = 1e-6;
      Vec3 n;
      for (int a = 0; a < 3; ++a)
        n(a) = sdf(obj, p + e * Vec3::Unit(a)) - sdf(obj, p - e * Vec3::Unit(a));
      return std::make_pair(tau / dn, n);
    }
    tau += dist;
  }
  return std::nullopt;
}

int family_arity(ShapeClass c) {
  switch (c) {
    case ShapeClass::sphere:
    case ShapeClass::half_sphere:
      return 1;
    case ShapeClass::box:
    case ShapeClass::ellipsoid:
    case ShapeClass::rounded_box:
      return 3;
    default:
      return 2;
  }
}

void check_positive(const ObjectSpec& o, std::size_t i) {
  if (!(o.scale > 0) || !(o.dims.head(family_arity(o.shape)).minCoeff() > 0) ||
      !o.center.allFinite())
    throw SceneError("object " + std::to_string(i) + " has non-positive size or bad center");
}

}  // namespace

std::string_view class_name(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses)
    throw ConfigError("class id out of range: " + std::to_string(class_id));
  return kClassNames[static_cast<std::size_t>(class_id)];
}

int class_from_name(std::string_view name) {
  for (int i = 0; i < kNumClasses; ++i)
    if (kClassNames[static_cast<std::size_t>(i)] == name) return i;
  throw ConfigError("unknown shape class '" + std::string(name) + "'");
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(splitmix64(master) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

double bounding_radius(const ObjectSpec& object) { return object.scale * local_bound(object); }

std::optional<Hit> intersect(const ObjectSpec& object, const Ray& ray) {
  const Mat3 R = photo::rotation_from_axis_angle(object.rotation);
  const Vec3 o = R.transpose() * (ray.origin - object.center) / object.scale;
  const Vec3 d = R.transpose() * ray.dir / object.scale;
  double t;
  Vec3 n;
  if (auto iv = convex_interval(object, o, d)) {
    if (iv->empty() || iv->t1 < kMinT || iv->t0 < kMinT) return std::nullopt;
    t = iv->t0;
    n = iv->n0;
  } else if (auto hit = march(object, o, d)) {
    if (hit->first < kMinT) return std::nullopt;
    t = hit->first;
    n = hit->second;
  } else {
    return std::nullopt;
  }
  Hit h;
  h.t = t;
  h.local = o + t * d;
  h.normal = (R * n).normalized();
  return h;
}

void SceneSpec::validate(const Pose& camera) const {
  const Pose inv = camera.inverse();
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const ObjectSpec& o = objects[i];
    check_positive(o, i);
    const Vec3 c = inv.apply(o.center);
    if (c.z() - bounding_radius(o) <= 0.0)
      throw SceneError("object " + std::to_string(i) + " (" +
                       std::string(class_name(static_cast<int>(o.shape))) +
                       ") reaches behind the camera");
  }
  if (!(background.far > 0)) throw SceneError("far plane must lie in front of the camera");
  if (!(light_dir.norm() > 0)) throw SceneError("light direction must be nonzero");
}

Sample render(const SceneSpec& spec, std::size_t height, std::size_t width,
              const CameraIntrinsics& K, const Pose& camera_pose, std::size_t supersample) {
  if (height < 16 || width < 16)
    throw ShapeError("render needs H, W >= 16, got " + std::to_string(height) + "x" +
                     std::to_string(width));
  K.validate();
  spec.validate(camera_pose);

  const std::size_t hw = height * width;
  const Mat3 Rc = camera_pose.rotation_matrix();
  const Vec3 origin = camera_pose.translation;
  const Vec3 light = spec.light_dir.normalized();
  const Background& bg = spec.background;

  std::vector<double> rgb(3 * hw), depth(hw);
  std::vector<int> owner(hw, -1);

  auto shade = [&](const Vec3& base, const Vec3& normal) {
    return base * (0.3 + 0.7 * std::max(0.0, normal.dot(light)));
  };

  struct Trace {
    double t;
    int owner;
    Vec3 color;
  };
  auto trace = [&](const Vec3& dir) {
    const Ray ray{origin, dir};
    Trace tr{kInf, -1, Vec3::Zero()};
    // Background: backdrop plane and optional ground plane, world-fixed.
    if (dir.z() > 1e-12) {
      const double t = (bg.far - origin.z()) / dir.z();
      if (t > kMinT) {
        tr.t = t;
        const Vec3 p = origin + t * dir;
        const double f =
            pattern(bg.texture, Vec3(p.x(), p.y(), 0), bg.texture_freq, bg.texture_seed);
        tr.color = shade((1 - f) * bg.color_a + f * bg.color_b, -Vec3::UnitZ());
      }
    }
    if (bg.ground && dir.y() > 1e-12) {
      const double t = (bg.ground_y - origin.y()) / dir.y();
      if (t > kMinT && t < tr.t) {
        tr.t = t;
        const Vec3 p = origin + t * dir;
        const double f = pattern(bg.texture, Vec3(p.x(), 0, p.z()), bg.texture_freq,
                                 bg.texture_seed ^ 0x5bd1e995ULL);
        tr.color = shade(0.8 * ((1 - f) * bg.color_b + f * bg.color_a), -Vec3::UnitY());
      }
    }
    for (std::size_t k = 0; k < spec.objects.size(); ++k) {
      const ObjectSpec& obj = spec.objects[k];
      // Cheap reject with the bounding sphere.
      const Vec3 oc = origin - obj.center;
      const double br = bounding_radius(obj);
      const double a = dir.squaredNorm(), b = oc.dot(dir);
      if (b * b - a * (oc.squaredNorm() - br * br) < 0) continue;
      const auto hit = intersect(obj, ray);
      if (!hit || hit->t >= tr.t) continue;
      tr.t = hit->t;
      tr.owner = static_cast<int>(k);
      const double f = pattern(obj.texture, hit->local, obj.texture_freq, obj.texture_seed);
      Vec3 n = hit->normal;
      if (n.dot(dir) > 0) n = -n;
      tr.color = shade((1 - f) * obj.albedo + f * obj.albedo2, n);
    }
    if (!std::isfinite(tr.t)) tr.t = bg.far;
    return tr;
  };

  const double fw = static_cast<double>(width), fh = static_cast<double>(height);
  const auto ss = static_cast<double>(supersample);
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t idx = i * width + j;
      // Depth and ownership come from the pixel-center ray; color averages an
      // ss x ss grid of sub-pixel rays.
      const Trace center = trace(Rc * K.ray((j + 0.5) / fw, (i + 0.5) / fh));
      depth[idx] = center.t;
      owner[idx] = center.owner;
      Vec3 color = Vec3::Zero();
      if (supersample <= 1) {
        color = center.color;
      } else {
        for (std::size_t a = 0; a < supersample; ++a)
          for (std::size_t b = 0; b < supersample; ++b) {
            const double u = (j + (b + 0.5) / ss) / fw, v = (i + (a + 0.5) / ss) / fh;
            color += trace(Rc * K.ray(u, v)).color;
          }
        color /= ss * ss;
      }
      for (int c = 0; c < 3; ++c)
        rgb[static_cast<std::size_t>(c) * hw + idx] = std::clamp(color(c), 0.0, 1.0);
    }

  Sample s;
  s.intrinsics = K;
  s.rgb = Tensor(Shape{3, height, width}, std::move(rgb));
  s.depth = Tensor(Shape{height, width}, std::move(depth));
  for (std::size_t k = 0; k < spec.objects.size(); ++k) {
    std::vector<double> m(hw, 0.0);
    std::size_t count = 0;
    for (std::size_t idx = 0; idx < hw; ++idx)
      if (owner[idx] == static_cast<int>(k)) {
        m[idx] = 1.0;
        ++count;
      }
    if (count == 0) continue;
    s.instances.push_back(
        {Tensor(Shape{height, width}, std::move(m)), static_cast<int>(spec.objects[k].shape), k,
         count});
  }
  return s;
}

void SceneConfig::validate() const {
  if (min_objects < 0 || max_objects < min_objects || max_objects > 6)
    throw ConfigError("object count range must satisfy 0 <= min <= max <= 6");
  for (int c : classes)
    if (c < 0 || c >= kNumClasses) throw ConfigError("class id out of range in scene config");
  if (!(occlusion_rate >= 0 && occlusion_rate <= 1))
    throw ConfigError("occlusion_rate must lie in [0, 1]");
  if (!(texture_correlation >= 0 && texture_correlation <= 1))
    throw ConfigError("texture_correlation must lie in [0, 1]");
  if (!(min_depth > 0 && max_depth > min_depth)) throw ConfigError("bad depth range");
  if (!(min_scale > 0 && max_scale >= min_scale)) throw ConfigError("bad scale range");
}

namespace {

Vec3 family_dims(ShapeClass c, std::mt19937_64& rng) {
  auto U = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  switch (c) {
    case ShapeClass::sphere:
      return {1.0, 1.0, 1.0};
    case ShapeClass::box:
      return {U(0.45, 0.85), U(0.45, 0.85), U(0.45, 0.85)};
    case ShapeClass::cylinder:
      return {U(0.5, 0.7), U(0.6, 0.9), 0};
    case ShapeClass::cone:
      return {U(0.6, 0.8), U(0.6, 0.9), 0};
    case ShapeClass::torus:
      return {U(0.65, 0.8), U(0.18, 0.28), 0};
    case ShapeClass::capsule:
      return {U(0.3, 0.4), U(0.45, 0.65), 0};
    case ShapeClass::ellipsoid:
      return {1.0, U(0.4, 0.6), U(0.55, 0.8)};
    case ShapeClass::pyramid:
      return {U(0.6, 0.8), U(1.1, 1.4), 0};
    case ShapeClass::prism3:
      return {U(0.8, 1.0), U(0.45, 0.7), 0};
    case ShapeClass::prism6:
      return {U(0.75, 0.9), U(0.3, 0.55), 0};
    case ShapeClass::half_sphere:
      return {1.0, 1.0, 1.0};
    case ShapeClass::rounded_box:
      return {U(0.45, 0.8), U(0.45, 0.8), U(0.45, 0.8)};
  }
  return {1, 1, 1};
}

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 v;
  do v = Vec3(n(rng), n(rng), n(rng));
  while (v.norm() < 1e-9);
  return v.normalized();
}

}  // namespace

SceneSpec random_scene(const SceneConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto U = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto I = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  std::vector<int> classes = config.classes;
  if (classes.empty())
    for (int c = 0; c < kNumClasses; ++c) classes.push_back(c);

  SceneSpec spec;
  spec.seed = seed;
  spec.light_dir = Vec3(U(-0.6, 0.6), U(-1.0, -0.3), U(-1.0, -0.4)).normalized();
  Background& bg = spec.background;
  bg.ground = config.ground;
  bg.far = 20.0;
  bg.texture = static_cast<Texture>(I(0, 3));
  bg.texture_freq = U(0.3, 0.8);
  bg.texture_seed = rng();
  bg.color_a = hsv(U(0, 1), U(0.1, 0.7), U(0.45, 0.9));
  bg.color_b = hsv(U(0, 1), U(0.1, 0.7), U(0.2, 0.6));

  const CameraIntrinsics K;
  struct Disc {
    double u, v, r;
  };
  std::vector<Disc> discs;
  const int n = I(config.min_objects, config.max_objects);
  for (int i = 0; i < n; ++i) {
    ObjectSpec o;
    const int cls = classes[static_cast<std::size_t>(I(0, static_cast<int>(classes.size()) - 1))];
    o.shape = static_cast<ShapeClass>(cls);
    o.dims = family_dims(o.shape, rng);
    o.scale = U(config.min_scale, config.max_scale);
    o.rotation = random_unit(rng) * U(0.0, std::numbers::pi);
    if (U(0, 1) < config.texture_correlation) {
      const double hue = cls / static_cast<double>(kNumClasses) + U(-0.02, 0.02);
      const double v = U(0.7, 0.95);
      o.albedo = hsv(hue, U(0.55, 0.9), v);
      o.albedo2 = hsv(hue + 0.04, U(0.55, 0.9), 0.45 * v);
      o.texture = static_cast<Texture>(cls % 4);
      o.texture_freq = 3.0 + cls % 3;
    } else {
      const double v = U(0.5, 0.95);
      o.albedo = hsv(U(0, 1), U(0.2, 0.9), v);
      o.albedo2 = hsv(U(0, 1), U(0.2, 0.9), 0.5 * v);
      o.texture = static_cast<Texture>(I(0, 3));
      o.texture_freq = U(2.0, 6.0);
    }
    o.texture_seed = rng();

    const double br = bounding_radius(o);
    double zlo = config.min_depth + br, zhi = config.max_depth - br;
    if (zlo > zhi) zlo = zhi = 0.5 * (config.min_depth + config.max_depth);
    Disc placed{};
    const bool occlude = i > 0 && U(0, 1) < config.occlusion_rate;
    for (int attempt = 0; attempt < 40; ++attempt) {
      // Nearer placements are favored so objects stay legible at low resolution.
      const double z = zlo + (zhi - zlo) * std::pow(U(0, 1), 1.5);
      const double r = br / z;
      Disc cand{0, 0, r};
      if (occlude) {
        const Disc& other = discs[static_cast<std::size_t>(I(0, static_cast<int>(discs.size()) - 1))];
        const double ang = U(0, 2 * std::numbers::pi);
        const double off = U(0.4, 0.9) * (other.r + r);
        cand.u = std::clamp(other.u + off * std::cos(ang), 0.1, 0.9);
        cand.v = std::clamp(other.v + off * std::sin(ang), 0.1, 0.9);
      } else {
        cand.u = U(0.15, 0.85);
        cand.v = U(0.15, 0.85);
      }
      bool clear = true;
      if (!occlude)
        for (const Disc& d : discs)
          clear = clear && std::hypot(d.u - cand.u, d.v - cand.v) > d.r + cand.r;
      placed = cand;
      o.center = Vec3((cand.u - K.cx) / K.fx * z, (cand.v - K.cy) / K.fy * z, z);
      if (clear) break;
    }
    discs.push_back(placed);
    spec.objects.push_back(o);
  }
  if (config.textured) {
    bg.texture = Texture::noise;
    for (ObjectSpec& o : spec.objects)
      if (o.texture == Texture::flat) o.texture = Texture::noise;
  }
  return spec;
}

SceneSpec scale_scene(SceneSpec scene, double factor) {
  if (!(factor > 0) || !std::isfinite(factor)) throw ConfigError("scene scale must be positive");
  for (ObjectSpec& o : scene.objects) {
    o.center *= factor;
    o.scale *= factor;
  }
  scene.background.far *= factor;
  scene.background.ground_y *= factor;
  scene.background.texture_freq /= factor;
  return scene;
}

Pose Sequence::relative_pose(std::size_t a, std::size_t b) const {
  return Pose::compose(cameras.at(b).inverse(), cameras.at(a));
}

std::vector<Pose> camera_trajectory(const SequenceSpec& spec) {
  if (!spec.trajectory.empty()) return spec.trajectory;
  std::mt19937_64 rng(spec.seed);
  std::vector<Pose> poses;
  poses.reserve(spec.frames);
  Pose cam;
  if (spec.motion == CameraMotion::sideways) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double a = u(rng);
    const double x = std::copysign(0.5 + 0.5 * std::fabs(a), a), y = 0.3 * u(rng), z = 0.3 * u(rng);
    const Pose step{random_unit(rng) * spec.step_rotation, Vec3(x, y, z).normalized() * spec.step_translation};
    for (std::size_t f = 0; f < spec.frames; ++f) {
      poses.push_back(cam);
      cam = Pose::compose(cam, step);
    }
    return poses;
  }
  Vec3 v = (random_unit(rng) + Vec3(0, 0, 1.5)).normalized();
  Vec3 w = random_unit(rng);
  for (std::size_t f = 0; f < spec.frames; ++f) {
    poses.push_back(cam);
    v = (0.85 * v + 0.15 * random_unit(rng)).normalized();
    w = (0.85 * w + 0.15 * random_unit(rng)).normalized();
    const Pose step{w * spec.step_rotation, v * spec.step_translation};
    cam = Pose::compose(cam, step);
  }
  return poses;
}

Sequence render_sequence(const SequenceSpec& spec, std::size_t height, std::size_t width,
                         const CameraIntrinsics& K) {
  if (spec.stride == 0) throw ConfigError("sequence stride must be positive");
  const std::vector<Pose> traj = camera_trajectory(spec);
  if (traj.size() < 2 * spec.stride + 1)
    throw ConfigError("sequence needs at least 2 * stride + 1 frames");
  Sequence seq;
  for (std::size_t f = 0; f < traj.size(); f += spec.stride) {
    seq.kept.push_back(f);
    seq.cameras.push_back(traj[f]);
    seq.frames.push_back(render(spec.scene, height, width, K, traj[f]));
  }
  if (spec.trajectory.empty() && spec.step_translation > 0)
    for (std::size_t k = 1; k < seq.cameras.size(); ++k)
      if ((seq.cameras[k].translation - seq.cameras[k - 1].translation).norm() <
          spec.min_displacement)
        throw ConfigError("camera trajectory moves less than min_displacement between kept frames");
  return seq;
}

}  // namespace pdseg::synth
