#pragma once

#include <array>

#include "fabricvs/control/servo.hpp"
#include "fabricvs/geometry.hpp"

namespace fabricvs::control {

/// Force [N] then torque [N mm].
using Wrench6 = Vector6d;

struct ImpedanceParams {
  Vector6d M = Vector6d::Ones();
  Vector6d D = Vector6d::Ones();
  Vector6d K = Vector6d::Zero();
  std::array<bool, 6> S{};
  Wrench6 F_desired = Wrench6::Zero();
  bool stiffness = true;  // false for the internal controller

  /// Throws nn::ConfigError: non-positive M or D on a selected axis, negative K,
  /// or K set on a controller without stiffness.
  void validate() const;
  [[nodiscard]] bool selected(int axis) const { return S[axis]; }
};

/// Defaults: z, rx, ry for the external controller.
ImpedanceParams default_external();
/// Defaults: relative x (tension) for the internal controller.
ImpedanceParams default_internal();

struct VirtualState {
  Vector6d dq = Vector6d::Zero();
  Vector6d dq_dot = Vector6d::Zero();
};

/// Equivalent wrench at the object origin, object axes.
Wrench6 external_wrench(const Wrench6& f_e1, const Wrench6& f_e2, const FrameGraph& frames);
/// Half difference 0.5 (f_e2 - f_e1) in object axes.
Wrench6 internal_wrench(const Wrench6& f_e1, const Wrench6& f_e2, const FrameGraph& frames);

/// Semi-implicit Euler on M a + D v + K x = S (F - F_d). Unselected axes are not touched.
VirtualState impedance_step(const VirtualState& s, const ImpedanceParams& p, const Wrench6& F, double dt);

/// 0.5 v'Mv + 0.5 x'Kx over the selected axes.
double lyapunov(const VirtualState& s, const ImpedanceParams& p);
/// True when one step with F = F_d cannot increase lyapunov() for any state.
bool dissipative(const ImpedanceParams& p, double dt);

struct EffectorDisplacement {
  Vector6d ext = Vector6d::Zero();  // world translation, world rotation vector
  Vector6d in = Vector6d::Zero();
};

/// Rigid common-mode external motion and antisymmetric internal motion per effector.
std::array<EffectorDisplacement, 2> distribute_displacement(const Vector6d& dq_ext, const Vector6d& dq_int,
                                                            const FrameGraph& frames);

/// Adds translations, composes rotation increments on the left.
Pose6d compose_desired(const Pose6d& ref, const Vector6d& d_ext, const Vector6d& d_int);

/// Each absolute axis is owned by exactly one of vision and external force; the
/// internal controller must select something. Throws nn::ConfigError.
void validate_axis_partition(const Gains& gains, const ImpedanceParams& ext, const ImpedanceParams& in);

}  // namespace fabricvs::control
