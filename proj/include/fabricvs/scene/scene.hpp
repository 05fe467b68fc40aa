#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fabricvs/geometry.hpp"
#include "fabricvs/image.hpp"
#include "fabricvs/net/pose_diff.hpp"
#include "json.hpp"

namespace fabricvs::scene {

using Vec2d = Eigen::Vector2d;

/// Pinhole camera. Pixel (u, v) has its center at integer coordinates.
struct Camera {
  double focal = 240.0;  // px
  double cx = 47.5;
  double cy = 26.5;
  Pose6d pose;  // camera frame in world

  [[nodiscard]] Mat3d intrinsics() const;
  [[nodiscard]] Mat4d world_to_camera() const { return invert_rigid<double>(pose.matrix()); }
  /// Throws GeometryError for points at or behind the image plane.
  [[nodiscard]] Vec2d project(const Vec3d& world) const;
};

/// Homography from plane-local (x, y) [mm] to pixels for a plane z = 0 at `plane` (world).
Mat3d plane_homography(const Camera& cam, const Pose6d& plane);

struct Occluder {
  Vec3d center;  // world [mm]
  double radius_mm = 7.0;
};

struct Lighting {
  double gain = 1.0;
  // Linear falloff across the image standing in for the light count.
  double gradient = 0.0;
  double angle = 0.0;
};

struct SceneState {
  Pose6d fabric_b;   // world
  Pose6d alignment;  // fabric A target pose relative to fabric B
  std::optional<Pose6d> fabric_a;  // world; absent in the desired capture
  double fabric_a_width = 140.0;
  double fabric_a_height = 80.0;
  // Corner displacements (dx, dy) [mm] of fabric A in its own frame.
  std::array<double, 8> corner_jitter{};
  Camera camera;
  Lighting lighting;
  std::vector<Occluder> occluders;
  double occluder_intensity = 0.1;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
  double background = 0.5;

  /// World pose fabric A should reach.
  [[nodiscard]] Pose6d fabric_a_target() const;
};

/// Camera-frame pose difference q_A - q*_A (mm, rad).
Vec6 camera_frame_difference(const SceneState& s);

struct Resolution {
  std::size_t width = 96;
  std::size_t height = 54;
};

/// Texture coordinates are fabric-B-local millimeters centered on the texture.
GrayImage render(const SceneState& scene, const GrayImage& texture, Resolution res);

struct TextureSpec {
  std::uint64_t seed = 0;
  double contrast = 0.8;
  std::size_t size = 448;
  double pitch_mm = 0.5;
  std::size_t lines = 10;
  std::string file;  // PGM texture; overrides the procedural family when set
};

/// Value-noise blobs plus random lines around 0.5; contrast is the +-2 sigma span (clamped to [0, 1]).
GrayImage procedural_texture(const TextureSpec& spec);
/// Reads spec.file when set, otherwise procedural_texture.
GrayImage load_texture(const TextureSpec& spec);

template <class T>
struct Range {
  T lo{};
  T hi{};
};

/// Randomization ranges and fixed rig geometry for sample_scene.
struct SceneConfig {
  Resolution resolution;
  double camera_height = 400.0;  // mm above the table
  double focal = 240.0;
  double camera_jitter_mm = 3.0;
  double camera_jitter_rad = 0.0174533;
  double fabric_b_jitter_mm = 8.0;
  double fabric_b_jitter_rad = 0.0872665;
  double fabric_a_width = 140.0;
  double fabric_a_height = 80.0;
  double grasp_offset_mm = 50.0;
  // Pose-difference sampling box, camera frame.
  LabelRanges diff{{-20.0, -20.0, -2.0, -0.0349066, -0.0349066, -0.1745329},
                   {20.0, 20.0, 2.0, 0.0349066, 0.0349066, 0.1745329}};
  Range<double> lighting_gain{0.7, 1.3};
  Range<double> lighting_gradient{0.0, 0.3};
  Range<double> occluder_radius_frac{0.08, 0.08};  // of image height
  bool occluders = true;
  Range<double> noise_sigma{0.0, 0.01};
  double corner_jitter_mm = 1.0;
  Range<double> texture_contrast{0.5, 1.0};
  double low_saliency_prob = 0.1;
  double low_saliency_contrast = 0.15;
  std::size_t texture_size = 448;
  double texture_pitch_mm = 0.5;
  std::vector<std::string> texture_files;  // picked uniformly when non-empty

  /// Throws nn::ConfigError on inverted ranges or bad geometry.
  void validate() const;
  [[nodiscard]] Camera nominal_camera() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);
void to_json(nlohmann::json& j, const SceneState& s);
void from_json(const nlohmann::json& j, SceneState& s);
nlohmann::json pose_to_json(const Pose6d& p);
Pose6d pose_from_json(const nlohmann::json& j);

struct ScenePair {
  SceneState desired;
  SceneState current;
  Vec6 diff{};  // raw camera-frame label
  TextureSpec texture;
};

/// Places fabric A at `diff` (camera frame) from its target.
void place_fabric_a(SceneState& s, const Vec6& diff);
/// Grasp points of fabric A (world), at -/+ offset along its x axis.
std::array<Vec3d, 2> grasp_points(const Pose6d& fabric_a, double offset_mm);

/// Seeded draw of a desired/current state pair plus its texture.
ScenePair sample_scene(std::uint64_t seed, const SceneConfig& cfg);

/// Seed of the texture family reserved for held-out evaluation.
TextureSpec held_out_texture(std::uint64_t index, const SceneConfig& cfg);

struct Manifest {
  std::vector<nlohmann::json> records;
  std::size_t train = 0;
  std::size_t val = 0;
};

/// Writes n pairs as PGM images plus manifest.jsonl and returns the records.
Manifest generate_dataset(const SceneConfig& cfg, std::uint64_t seed, std::size_t n,
                          const std::string& out_dir, double val_fraction = 0.1);

/// Mixes a base seed with an index (splitmix64).
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index);

}  // namespace fabricvs::scene
