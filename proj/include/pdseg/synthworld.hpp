#pragma once

// Deterministic raycast renderer for labeled synthetic scenes and
// moving-camera videos of static scenes.
//
// Camera frame: x right, y down, z forward. A camera pose maps camera
// coordinates to world coordinates. Each pixel casts one ray through its
// center with camera-frame direction K^-1 p (z = 1), so the ray parameter of
// a hit is its planar z-depth.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pdseg/photometric.hpp"
#include "pdseg/tensor.hpp"

namespace pdseg::synth {

using photo::CameraIntrinsics;
using photo::Mat3;
using photo::Pose;
using photo::Vec3;

enum class ShapeClass {
  sphere,
  box,
  cylinder,
  cone,
  torus,
  capsule,
  ellipsoid,
  pyramid,
  prism3,
  prism6,
  half_sphere,
  rounded_box,
};
inline constexpr int kNumClasses = 12;

std::string_view class_name(int class_id);
/// Throws ConfigError for unknown names.
int class_from_name(std::string_view name);

enum class Texture { flat, stripes, checker, noise };

struct ObjectSpec {
  ShapeClass shape = ShapeClass::sphere;
  Vec3 center = Vec3(0, 0, 5);
  Vec3 rotation = Vec3::Zero();  ///< axis-angle, object to world
  double scale = 1.0;
  /// Family parameters in object units, see the family table in synthworld.cpp.
  Vec3 dims = Vec3(1, 1, 1);
  Vec3 albedo = Vec3(0.8, 0.8, 0.8);
  Vec3 albedo2 = Vec3(0.3, 0.3, 0.3);
  Texture texture = Texture::flat;
  double texture_freq = 4.0;
  std::uint64_t texture_seed = 0;
};

struct Background {
  bool ground = true;
  double ground_y = 1.5;  ///< world plane y = ground_y (below the camera)
  double far = 20.0;      ///< backdrop plane z = far in world coordinates
  Vec3 color_a = Vec3(0.55, 0.55, 0.55);
  Vec3 color_b = Vec3(0.35, 0.35, 0.35);
  Texture texture = Texture::checker;
  double texture_freq = 1.0;
  std::uint64_t texture_seed = 0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<ObjectSpec> objects;
  Background background;
  Vec3 light_dir = Vec3(-0.3, -0.8, -0.5);  ///< direction towards the light

  /// Throws SceneError when an object reaches behind the camera plane of
  /// `camera` or has non-positive scale/dims.
  void validate(const Pose& camera = {}) const;
};

struct Ray {
  Vec3 origin;
  Vec3 dir;
};

struct Hit {
  double t = 0.0;
  Vec3 normal;  ///< world frame, unit length
  Vec3 local;   ///< hit point in object coordinates (texture space)
};

/// Nearest intersection with t > 0, if any.
std::optional<Hit> intersect(const ObjectSpec& object, const Ray& ray);
/// Radius of a world-space sphere around `center` containing the object.
double bounding_radius(const ObjectSpec& object);

struct Instance {
  Tensor mask;  ///< [H,W] in {0,1}
  int class_id = 0;
  std::size_t object_index = 0;
  std::size_t pixels = 0;
};

struct Sample {
  Tensor rgb;    ///< [3,H,W] in [0,1]
  Tensor depth;  ///< [H,W] planar z-depth
  std::vector<Instance> instances;  ///< nonempty masks, in object order
  CameraIntrinsics intrinsics;
};

/// RGB averages a supersample x supersample grid of rays per pixel; depth and
/// masks use the pixel-center ray. Throws ShapeError for H or W < 16 and
/// SceneError per SceneSpec::validate.
Sample render(const SceneSpec& spec, std::size_t height, std::size_t width,
              const CameraIntrinsics& K = {}, const Pose& camera_pose = {},
              std::size_t supersample = 3);

struct SceneConfig {
  int min_objects = 1;
  int max_objects = 6;
  std::vector<int> classes;  ///< empty = all classes
  double occlusion_rate = 0.3;
  /// Probability that an object takes its class palette and pattern.
  double texture_correlation = 0.8;
  bool ground = true;
  double min_depth = 2.0;
  double max_depth = 12.0;
  double min_scale = 0.7;
  double max_scale = 1.5;
  /// Give the backdrop, ground and otherwise flat objects a noise texture.
  bool textured = false;

  void validate() const;
};

SceneSpec random_scene(const SceneConfig& config, std::uint64_t seed);

/// The same scene in units multiplied by `factor`: rendering it from a
/// camera whose translation is scaled alike gives the same image and depth
/// times `factor`.
SceneSpec scale_scene(SceneSpec scene, double factor);

enum class CameraMotion {
  wander,    ///< slowly turning heading, biased forward, drifting rotation axis
  sideways,  ///< one fixed, mostly horizontal heading and rotation axis
};

struct SequenceSpec {
  SceneSpec scene;
  std::size_t frames = 10;
  std::size_t stride = 3;
  std::uint64_t seed = 0;
  /// Camera speed per raw frame; zero for a static camera.
  double step_translation = 0.06;
  double step_rotation = 0.01;
  CameraMotion motion = CameraMotion::wander;
  /// Lower bound on translation between consecutive kept frames when moving.
  double min_displacement = 0.05;
  /// Explicit camera-to-world poses per raw frame; overrides the random walk
  /// and `frames` when nonempty.
  std::vector<Pose> trajectory;
};

struct Sequence {
  std::vector<std::size_t> kept;  ///< raw frame indices
  std::vector<Sample> frames;     ///< rendered kept frames
  std::vector<Pose> cameras;      ///< camera-to-world pose of each kept frame
  /// Maps frame a's camera coordinates to frame b's: C_b^-1 C_a.
  Pose relative_pose(std::size_t a, std::size_t b) const;
};

/// Camera-to-world poses for every raw frame (the explicit trajectory when given).
std::vector<Pose> camera_trajectory(const SequenceSpec& spec);

/// Throws ConfigError when frames < 2 * stride + 1.
Sequence render_sequence(const SequenceSpec& spec, std::size_t height, std::size_t width,
                         const CameraIntrinsics& K = {});

/// Independent 64-bit seed for item `index` of a stream seeded by `master`.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace pdseg::synth
