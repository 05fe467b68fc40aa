#pragma once

#include <array>
#include <optional>
#include <utility>

#include "fabricvs/geometry.hpp"

namespace fabricvs::control {

/// Missing or invalid transform in a frame graph.
class FrameError : public GeometryError {
 public:
  using GeometryError::GeometryError;
};

/// Diagonal of the servo gain matrix [1/s]: tx, ty, tz, rx, ry, rz.
struct Gains {
  std::array<double, 6> lambda{0.3, 0.3, 0.0, 0.0, 0.0, 0.3};

  /// Throws std::invalid_argument on a negative or non-finite entry.
  void validate() const;
  [[nodiscard]] bool controls(int axis) const { return lambda[axis] > 0.0; }
};

struct FrameGraph {
  Mat4d world_camera = Mat4d::Identity();  // camera pose in world
  Mat4d world_base1 = Mat4d::Identity();
  Mat4d world_base2 = Mat4d::Identity();
  Mat4d world_object = Mat4d::Identity();
  std::optional<Mat4d> object_effector1;
  std::optional<Mat4d> object_effector2;

  /// Object frame built from two effector poses, offsets taken from them.
  static FrameGraph from_effectors(const Mat4d& world_e1, const Mat4d& world_e2);
  /// Effectors at -/+ half_separation along the object x axis, same orientation.
  static FrameGraph symmetric(double half_separation);

  /// object<-effector transform, i in {1, 2}. Throws FrameError if absent.
  [[nodiscard]] const Mat4d& object_effector(int i) const;
  [[nodiscard]] Mat4d world_effector(int i) const { return world_object * object_effector(i); }
  /// Effector pose expressed in its arm base frame.
  [[nodiscard]] Mat4d base_effector(int i) const;
};

/// Origin at the midpoint, x from p1 to p2, z as close to world z as possible.
Mat4d object_frame(const Vec3d& p1, const Vec3d& p2);

/// Camera-frame velocity -Lambda * diff.
Vector6d control_law(const Vector6d& diff, const Gains& gains);

/// Rotates both halves of a camera-frame twist into the world frame.
Vector6d twist_camera_to_world(const Vector6d& v, const FrameGraph& frames);

/// One control period ahead: t += v_t T, R <- exp(v_r T) R.
Pose6d integrate_reference(const Pose6d& ref, const Vector6d& v_world, double period);

/// Effector reference poses (world) from an object reference pose.
std::pair<Pose6d, Pose6d> object_to_effector_refs(const Pose6d& q_obj_ref, const FrameGraph& frames);

}  // namespace fabricvs::control
