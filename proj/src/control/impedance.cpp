#include "fabricvs/control/impedance.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>

#include "fabricvs/nn/module.hpp"

namespace fabricvs::control {

using nn::ConfigError;

void ImpedanceParams::validate() const {
  for (int i = 0; i < 6; ++i) {
    if (!std::isfinite(M[i]) || !std::isfinite(D[i]) || !std::isfinite(K[i]) || !std::isfinite(F_desired[i])) {
      throw ConfigError("impedance: non-finite parameter on axis " + std::to_string(i));
    }
    if (!S[i]) continue;
    if (M[i] <= 0.0) throw ConfigError("impedance: inertia must be positive on selected axis " + std::to_string(i));
    if (D[i] <= 0.0) throw ConfigError("impedance: damping must be positive on selected axis " + std::to_string(i));
    if (K[i] < 0.0) throw ConfigError("impedance: negative stiffness on axis " + std::to_string(i));
    if (!stiffness && K[i] != 0.0) throw ConfigError("impedance: internal controller has no stiffness term");
  }
}

ImpedanceParams default_external() {
  ImpedanceParams p;
  p.S = {false, false, true, true, true, false};
  p.M << 1, 1, 0.05, 50, 50, 1;
  p.D << 50, 50, 2, 1600, 1600, 50;
  p.K << 0.5, 0.5, 0.01, 100, 100, 0.5;
  p.F_desired << 0, 0, 2.0, 0, 0, 0;
  return p;
}

ImpedanceParams default_internal() {
  ImpedanceParams p;
  p.S = {true, false, false, false, false, false};
  p.M << 0.05, 1, 1, 1, 1, 1;
  p.D << 5, 100, 100, 100, 100, 100;
  p.K.setZero();
  p.F_desired << -3.0, 0, 0, 0, 0, 0;
  p.stiffness = false;
  return p;
}

namespace {

// Wrench of effector i rotated into object axes, with its lever arm.
std::pair<Wrench6, Vec3d> to_object(const Wrench6& f, const FrameGraph& frames, int i) {
  const Mat4d& oe = frames.object_effector(i);
  const Mat3d R = oe.block<3, 3>(0, 0);
  try {
    require_rotation<double>(R);
  } catch (const GeometryError&) {
    throw FrameError("object-effector rotation is not orthonormal");
  }
  Wrench6 out;
  out << R * f.head<3>(), R * f.tail<3>();
  return {out, oe.block<3, 1>(0, 3)};
}

}  // namespace

Wrench6 external_wrench(const Wrench6& f_e1, const Wrench6& f_e2, const FrameGraph& frames) {
  const auto [w1, r1] = to_object(f_e1, frames, 1);
  const auto [w2, r2] = to_object(f_e2, frames, 2);
  Wrench6 out;
  out.head<3>() = w1.head<3>() + w2.head<3>();
  out.tail<3>() = w1.tail<3>() + w2.tail<3>() + r1.cross(Vec3d(w1.head<3>())) + r2.cross(Vec3d(w2.head<3>()));
  return out;
}

Wrench6 internal_wrench(const Wrench6& f_e1, const Wrench6& f_e2, const FrameGraph& frames) {
  const auto w1 = to_object(f_e1, frames, 1).first;
  const auto w2 = to_object(f_e2, frames, 2).first;
  return 0.5 * (w2 - w1);
}

VirtualState impedance_step(const VirtualState& s, const ImpedanceParams& p, const Wrench6& F, double dt) {
  if (!(dt > 0.0)) throw ConfigError("impedance: dt must be positive");
  p.validate();
  VirtualState out = s;
  for (int i = 0; i < 6; ++i) {
    if (!p.S[i]) continue;
    const double acc = (F[i] - p.F_desired[i] - p.D[i] * s.dq_dot[i] - p.K[i] * s.dq[i]) / p.M[i];
    out.dq_dot[i] = s.dq_dot[i] + acc * dt;
    out.dq[i] = s.dq[i] + out.dq_dot[i] * dt;
  }
  return out;
}

double lyapunov(const VirtualState& s, const ImpedanceParams& p) {
  double v = 0.0;
  for (int i = 0; i < 6; ++i) {
    if (p.S[i]) v += 0.5 * p.M[i] * s.dq_dot[i] * s.dq_dot[i] + 0.5 * p.K[i] * s.dq[i] * s.dq[i];
  }
  return v;
}

bool dissipative(const ImpedanceParams& p, double dt) {
  for (int i = 0; i < 6; ++i) {
    if (!p.S[i]) continue;
    const double m = p.M[i], d = p.D[i], k = p.K[i];
    // (x, v) -> (x', v') for the homogeneous step.
    Eigen::Matrix2d A;
    const double a = 1.0 - dt * d / m, b = -dt * k / m;
    A << 1.0 + dt * b, dt * a, b, a;
    const Eigen::Matrix2d P = Eigen::Vector2d(k, m).asDiagonal();
    const Eigen::Matrix2d Q = A.transpose() * P * A - P;
    const double scale = std::max(k, m);
    if (Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d>(Q).eigenvalues().maxCoeff() > 1e-12 * scale) return false;
  }
  return true;
}

std::array<EffectorDisplacement, 2> distribute_displacement(const Vector6d& dq_ext, const Vector6d& dq_int,
                                                            const FrameGraph& frames) {
  const Mat3d R = frames.world_object.block<3, 3>(0, 0);
  const Vec3d t_ext = R * dq_ext.head<3>(), w_ext = R * dq_ext.tail<3>();
  const Vec3d t_int = R * dq_int.head<3>(), w_int = R * dq_int.tail<3>();
  const Mat3d rot = exp_so3<double>(w_ext) - Mat3d::Identity();
  std::array<EffectorDisplacement, 2> out;
  for (int i = 0; i < 2; ++i) {
    const Vec3d lever = R * frames.object_effector(i + 1).block<3, 1>(0, 3);
    const double side = i == 0 ? -0.5 : 0.5;
    out[i].ext << t_ext + rot * lever, w_ext;
    out[i].in << side * t_int, side * w_int;
  }
  return out;
}

Pose6d compose_desired(const Pose6d& ref, const Vector6d& d_ext, const Vector6d& d_int) {
  const Vec3d t = ref.t + d_ext.head<3>() + d_int.head<3>();
  if (d_ext.tail<3>().isZero(0.0) && d_int.tail<3>().isZero(0.0)) return {t, ref.r};
  const Mat3d R = exp_so3<double>(d_ext.tail<3>()) * exp_so3<double>(d_int.tail<3>()) * ref.rotation();
  return {t, matrix_to_euler<double>(R)};
}

void validate_axis_partition(const Gains& gains, const ImpedanceParams& ext, const ImpedanceParams& in) {
  static const char* names[] = {"x", "y", "z", "rx", "ry", "rz"};
  for (int i = 0; i < 6; ++i) {
    const int owners = (gains.controls(i) ? 1 : 0) + (ext.S[i] ? 1 : 0);
    if (owners != 1) {
      throw ConfigError(std::string("axis ") + names[i] + (owners == 0 ? " has no controller" : " has two controllers"));
    }
  }
  if (std::none_of(in.S.begin(), in.S.end(), [](bool b) { return b; })) {
    throw ConfigError("internal force controller selects no axis");
  }
}

}  // namespace fabricvs::control
