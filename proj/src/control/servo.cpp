#include "fabricvs/control/servo.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fabricvs::control {

void Gains::validate() const {
  for (double l : lambda) {
    if (!std::isfinite(l) || l < 0.0) throw std::invalid_argument("gains must be finite and non-negative");
  }
}

Mat4d object_frame(const Vec3d& p1, const Vec3d& p2) {
  const Vec3d d = p2 - p1;
  if (d.norm() < 1e-9) throw FrameError("effectors coincide");
  const Vec3d x = d.normalized();
  Vec3d z = Vec3d::UnitZ() - x.z() * x;
  if (z.norm() < 1e-9) throw FrameError("effector axis is vertical");
  z.normalize();
  Mat4d H = Mat4d::Identity();
  H.block<3, 1>(0, 0) = x;
  H.block<3, 1>(0, 1) = z.cross(x);
  H.block<3, 1>(0, 2) = z;
  H.block<3, 1>(0, 3) = 0.5 * (p1 + p2);
  return H;
}

FrameGraph FrameGraph::from_effectors(const Mat4d& world_e1, const Mat4d& world_e2) {
  FrameGraph g;
  g.world_object = object_frame(world_e1.block<3, 1>(0, 3), world_e2.block<3, 1>(0, 3));
  const Mat4d inv = invert_rigid<double>(g.world_object);
  g.object_effector1 = inv * world_e1;
  g.object_effector2 = inv * world_e2;
  return g;
}

FrameGraph FrameGraph::symmetric(double half_separation) {
  FrameGraph g;
  Mat4d e = Mat4d::Identity();
  e(0, 3) = -half_separation;
  g.object_effector1 = e;
  e(0, 3) = half_separation;
  g.object_effector2 = e;
  return g;
}

const Mat4d& FrameGraph::object_effector(int i) const {
  const auto& e = i == 1 ? object_effector1 : object_effector2;
  if ((i != 1 && i != 2) || !e) throw FrameError("frame graph has no object-effector transform " + std::to_string(i));
  return *e;
}

Mat4d FrameGraph::base_effector(int i) const {
  return invert_rigid<double>(i == 1 ? world_base1 : world_base2) * world_effector(i);
}

Vector6d control_law(const Vector6d& diff, const Gains& gains) {
  Vector6d v;
  for (int i = 0; i < 6; ++i) v[i] = gains.lambda[i] == 0.0 ? 0.0 : -gains.lambda[i] * diff[i];
  return v;
}

Vector6d twist_camera_to_world(const Vector6d& v, const FrameGraph& frames) {
  const Mat3d R = frames.world_camera.block<3, 3>(0, 0);
  try {
    require_rotation<double>(R);
  } catch (const GeometryError&) {
    throw FrameError("camera extrinsics are not a rotation");
  }
  Vector6d out;
  out << R * v.head<3>(), R * v.tail<3>();
  return out;
}

Pose6d integrate_reference(const Pose6d& ref, const Vector6d& v_world, double period) {
  if (!(period > 0.0)) throw std::invalid_argument("control period must be positive");
  const Vec3d w = v_world.tail<3>() * period;
  const Mat3d R = exp_so3<double>(w) * ref.rotation();
  return {ref.t + v_world.head<3>() * period, matrix_to_euler<double>(R)};
}

std::pair<Pose6d, Pose6d> object_to_effector_refs(const Pose6d& q_obj_ref, const FrameGraph& frames) {
  const Mat4d H = q_obj_ref.matrix();
  return {Pose6d::from_matrix(H * frames.object_effector(1)), Pose6d::from_matrix(H * frames.object_effector(2))};
}

}  // namespace fabricvs::control
