#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <Eigen/Dense>

namespace fabricvs {

template <class S>
using Vec3 = Eigen::Matrix<S, 3, 1>;
template <class S>
using Mat3 = Eigen::Matrix<S, 3, 3>;
template <class S>
using Mat4 = Eigen::Matrix<S, 4, 4>;
template <class S>
using Vector6 = Eigen::Matrix<S, 6, 1>;

using Vec3d = Vec3<double>;
using Mat3d = Mat3<double>;
using Mat4d = Mat4<double>;
using Vector6d = Vector6<double>;

/// Degenerate orientation or invalid frame.
class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// XYZ Euler angles, R = Rz(rz) Ry(ry) Rx(rx).
template <class S>
Mat3<S> euler_to_matrix(const Vec3<S>& r) {
  using AA = Eigen::AngleAxis<S>;
  return (AA(r.z(), Vec3<S>::UnitZ()) * AA(r.y(), Vec3<S>::UnitY()) * AA(r.x(), Vec3<S>::UnitX()))
      .toRotationMatrix();
}

/// Inverse of euler_to_matrix with pitch in [-pi/2, pi/2].
template <class S>
Vec3<S> matrix_to_euler(const Mat3<S>& R) {
  using std::atan2;
  using std::abs;
  using std::sqrt;
  const S pitch = atan2(-R(2, 0), sqrt(R(0, 0) * R(0, 0) + R(1, 0) * R(1, 0)));
  if (abs(std::numbers::pi_v<S> / 2 - abs(pitch)) < S(1e-9)) {
    throw GeometryError("gimbal lock: pitch is +-pi/2");
  }
  return {atan2(R(2, 1), R(2, 2)), pitch, atan2(R(1, 0), R(0, 0))};
}

/// Rotation vector -> rotation matrix.
template <class S>
Mat3<S> exp_so3(const Vec3<S>& w) {
  const S angle = w.norm();
  if (angle == S(0)) return Mat3<S>::Identity();
  return Eigen::AngleAxis<S>(angle, w / angle).toRotationMatrix();
}

/// Checks ||R^T R - I|| <= tol.
template <class S>
void require_rotation(const Mat3<S>& R, S tol = S(1e-9)) {
  if ((R.transpose() * R - Mat3<S>::Identity()).norm() > tol) {
    throw GeometryError("matrix is not orthonormal");
  }
}

/// Translation [mm] plus XYZ Euler rotation [rad].
template <class S>
struct Pose6 {
  Vec3<S> t = Vec3<S>::Zero();
  Vec3<S> r = Vec3<S>::Zero();

  Pose6() = default;
  Pose6(const Vec3<S>& t_, const Vec3<S>& r_) : t(t_), r(r_) {}

  static Pose6 from_vector(const Vector6<S>& q) { return {q.template head<3>(), q.template tail<3>()}; }
  static Pose6 from_matrix(const Mat4<S>& H) {
    return {H.template block<3, 1>(0, 3), matrix_to_euler<S>(H.template block<3, 3>(0, 0))};
  }

  [[nodiscard]] Vector6<S> vector() const {
    Vector6<S> q;
    q << t, r;
    return q;
  }
  [[nodiscard]] Mat3<S> rotation() const { return euler_to_matrix<S>(r); }
  [[nodiscard]] Mat4<S> matrix() const {
    Mat4<S> H = Mat4<S>::Identity();
    H.template block<3, 3>(0, 0) = rotation();
    H.template block<3, 1>(0, 3) = t;
    return H;
  }
};

using Pose6d = Pose6<double>;

/// Rigid inverse of a homogeneous transform.
template <class S>
Mat4<S> invert_rigid(const Mat4<S>& H) {
  Mat4<S> out = Mat4<S>::Identity();
  const Mat3<S> Rt = H.template block<3, 3>(0, 0).transpose();
  out.template block<3, 3>(0, 0) = Rt;
  out.template block<3, 1>(0, 3) = -Rt * H.template block<3, 1>(0, 3);
  return out;
}

/// Euler representation of R(r_a) R(r_b)^T.
template <class S>
Vec3<S> rotation_difference(const Vec3<S>& r_a, const Vec3<S>& r_b) {
  return matrix_to_euler<S>(euler_to_matrix<S>(r_a) * euler_to_matrix<S>(r_b).transpose());
}

/// Pose difference a - b: translations subtracted, rotations via matrices.
template <class S>
Vector6<S> pose_difference(const Pose6<S>& a, const Pose6<S>& b) {
  Vector6<S> d;
  d << a.t - b.t, rotation_difference<S>(a.r, b.r);
  return d;
}

}  // namespace fabricvs
