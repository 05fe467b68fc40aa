#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "fabricvs/control/servo.hpp"

using namespace fabricvs;
using namespace fabricvs::control;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Vec3d random_angles(std::mt19937_64& rng, double limit) {
  std::uniform_real_distribution<double> u(-limit, limit);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace

TEST_CASE("rotation_difference") {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 200; ++k) {
    const Vec3d a = random_angles(rng, 1.2);
    CHECK(rotation_difference<double>(a, a).norm() < 1e-12);
    CHECK((rotation_difference<double>(a, Vec3d::Zero()) - a).norm() < 1e-12);
  }
  // Agreement with plain subtraction is first order: the residual is bounded by
  // 0.5 |a - b| (|a| + |b|), which stays under 1e-4 for rotations up to 0.5 deg.
  double worst_half = 0.0, worst_ratio = 0.0;
  std::uniform_real_distribution<double> scale(0.0, 1.0);
  for (int k = 0; k < 20000; ++k) {
    Vec3d a = random_angles(rng, 1.0), b = random_angles(rng, 1.0);
    a *= scale(rng) * kDeg / a.norm();
    b *= scale(rng) * kDeg / b.norm();
    const double err = (rotation_difference<double>(a, b) - (a - b)).cwiseAbs().maxCoeff();
    const double bound = 0.5 * (a - b).norm() * (a.norm() + b.norm());
    if (bound > 1e-10) worst_ratio = std::max(worst_ratio, err / bound);
    worst_half = std::max(worst_half, (rotation_difference<double>(0.5 * a, 0.5 * b) - 0.5 * (a - b)).cwiseAbs().maxCoeff());
  }
  CHECK(worst_ratio <= 1.0);
  CHECK(worst_half < 1e-4);
  CHECK_THROWS_AS(rotation_difference<double>(Vec3d(0, std::numbers::pi / 2, 0), Vec3d::Zero()), GeometryError);
}

TEST_CASE("pose round trip through the homogeneous transform") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> t(-100, 100);
  for (int k = 0; k < 500; ++k) {
    Pose6d p(Vec3d(t(rng), t(rng), t(rng)), random_angles(rng, 1.5));
    p.r.x() *= 2.0;
    p.r.z() *= 2.0;
    const Pose6d back = Pose6d::from_matrix(p.matrix());
    CHECK((back.vector() - p.vector()).norm() < 1e-9);
  }
}

TEST_CASE("control law") {
  Gains g;
  CHECK(control_law(Vector6d::Zero(), g).isZero(0.0));
  Vector6d d;
  d << 1, 0, 0, 0, 0, 0;
  g.lambda = {0.5, 0.3, 0, 0, 0, 0.3};
  Vector6d expected;
  expected << -0.5, 0, 0, 0, 0, 0;
  CHECK(control_law(d, g) == expected);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 10);
  g = Gains{};
  for (int k = 0; k < 100; ++k) {
    Vector6d a, b;
    for (int i = 0; i < 6; ++i) {
      a[i] = n(rng);
      b[i] = n(rng);
    }
    const Vector6d v = control_law(a, g);
    CHECK(v[2] == 0.0);
    CHECK(v[3] == 0.0);
    CHECK(v[4] == 0.0);
    CHECK(v[0] == -0.3 * a[0]);
    CHECK(v[5] == -0.3 * a[5]);
    CHECK((control_law(a + b, g) - v - control_law(b, g)).norm() < 1e-12);
  }
  g.lambda[1] = -0.1;
  CHECK_THROWS(g.validate());
}

TEST_CASE("twist camera to world") {
  FrameGraph f;
  Vector6d v;
  v << 1, 2, 3, 0.1, 0.2, 0.3;
  CHECK(twist_camera_to_world(v, f) == v);

  f.world_camera = Pose6d(Vec3d(5, 6, 7), Vec3d(0, 0, std::numbers::pi / 2)).matrix();
  Vector6d vx;
  vx << 1, 0, 0, 0, 0, 0;
  const Vector6d w = twist_camera_to_world(vx, f);
  CHECK(std::abs(w[1] - 1.0) < 1e-12);
  CHECK(std::abs(w[0]) < 1e-12);

  std::mt19937_64 rng(4);
  for (int k = 0; k < 100; ++k) {
    f.world_camera = Pose6d(Vec3d::Zero(), random_angles(rng, 1.5)).matrix();
    const Vector6d out = twist_camera_to_world(v, f);
    CHECK(std::abs(out.head<3>().norm() - v.head<3>().norm()) < 1e-12);
    CHECK(std::abs(out.tail<3>().norm() - v.tail<3>().norm()) < 1e-12);
  }
  f.world_camera(0, 0) = 1.1;
  CHECK_THROWS_AS(twist_camera_to_world(v, f), FrameError);
}

TEST_CASE("integrate reference") {
  const Pose6d ref(Vec3d(1, 2, 3), Vec3d(0.1, -0.2, 0.3));
  const Pose6d same = integrate_reference(ref, Vector6d::Zero(), 0.1);
  CHECK((same.vector() - ref.vector()).norm() < 1e-12);

  Pose6d p;
  Vector6d v;
  v << 1, 0, 0, 0, 0, 0;
  for (int k = 0; k < 10; ++k) p = integrate_reference(p, v, 0.1);
  CHECK(std::abs(p.t.x() - 1.0) < 1e-12);
  CHECK(p.t.tail<2>().isZero(0.0));

  // Yaw rate omega for theta / omega seconds adds theta.
  const double omega = 0.3, theta = 0.6, T = 0.1;
  Pose6d q(Vec3d::Zero(), Vec3d(0, 0, 0.25));
  v << 0, 0, 0, 0, 0, omega;
  for (int k = 0; k < static_cast<int>(std::lround(theta / omega / T)); ++k) q = integrate_reference(q, v, T);
  CHECK(std::abs(q.r.z() - 0.85) < 1e-9);
  CHECK(std::abs(q.r.x()) < 1e-12);

  CHECK_THROWS(integrate_reference(ref, v, 0.0));
}

TEST_CASE("object frame and effector references") {
  const Mat4d H = object_frame(Vec3d(-40, 0, 5), Vec3d(40, 0, 5));
  CHECK((H.block<3, 1>(0, 3) - Vec3d(0, 0, 5)).norm() < 1e-12);
  CHECK((H.block<3, 3>(0, 0) - Mat3d::Identity()).norm() < 1e-12);
  const Mat4d tilted = object_frame(Vec3d(0, 0, 0), Vec3d(30, 40, 10));
  CHECK((tilted.block<3, 1>(0, 0) - Vec3d(30, 40, 10).normalized()).norm() < 1e-12);
  CHECK(tilted(2, 1) == doctest::Approx(0.0));  // y stays horizontal
  CHECK(tilted(2, 2) > 0.0);
  CHECK_THROWS_AS(object_frame(Vec3d(1, 1, 1), Vec3d(1, 1, 1)), FrameError);

  FrameGraph id;
  id.object_effector1 = Mat4d::Identity();
  id.object_effector2 = Mat4d::Identity();
  const Pose6d ref(Vec3d(3, 4, 5), Vec3d(0.1, 0.2, 0.3));
  auto [a, b] = object_to_effector_refs(ref, id);
  CHECK((a.vector() - ref.vector()).norm() < 1e-12);
  CHECK((b.vector() - ref.vector()).norm() < 1e-12);

  const FrameGraph sym = FrameGraph::symmetric(40.0);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> t(-100, 100);
  for (int k = 0; k < 100; ++k) {
    const Pose6d q(Vec3d(t(rng), t(rng), t(rng)), random_angles(rng, 1.2));
    auto [e1, e2] = object_to_effector_refs(q, sym);
    CHECK(std::abs((e2.t - e1.t).norm() - 80.0) < 1e-9);
    CHECK((0.5 * (e1.t + e2.t) - q.t).norm() < 1e-9);
  }

  // Yaw of the object by 10 deg carries both effectors around its origin.
  const Pose6d base(Vec3d(10, 20, 0), Vec3d::Zero());
  const Pose6d yawed(Vec3d(10, 20, 0), Vec3d(0, 0, 10 * kDeg));
  auto [b1, b2] = object_to_effector_refs(base, sym);
  auto [y1, y2] = object_to_effector_refs(yawed, sym);
  const Eigen::Matrix2d R2 = Eigen::Rotation2Dd(10 * kDeg).toRotationMatrix();
  CHECK(((R2 * (b1.t - base.t).head<2>()) - (y1.t - base.t).head<2>()).norm() < 1e-9);
  CHECK(((R2 * (b2.t - base.t).head<2>()) - (y2.t - base.t).head<2>()).norm() < 1e-9);

  FrameGraph missing;
  CHECK_THROWS_AS(object_to_effector_refs(ref, missing), FrameError);
}

TEST_CASE("discrete closed-loop contraction with perfect measurement") {
  Gains g;
  const double T = 0.1, ratio = 1.0 - 0.3 * T;
  FrameGraph f;
  f.world_camera = Pose6d(Vec3d(0, 0, 400), Vec3d(std::numbers::pi, 0, 0)).matrix();
  const Mat4d Hcw = invert_rigid<double>(f.world_camera);
  const Pose6d target(Vec3d(3, -2, 0), Vec3d(0, 0, 0.2));
  Pose6d obj(Vec3d(23, 18, 0), Vec3d(0, 0, 0.2 + 10 * kDeg));
  auto diff_of = [&](const Pose6d& p) {
    return pose_difference(Pose6d::from_matrix(Hcw * p.matrix()), Pose6d::from_matrix(Hcw * target.matrix()));
  };
  Vector6d e = diff_of(obj);
  for (int k = 0; k < 60; ++k) {
    obj = integrate_reference(obj, twist_camera_to_world(control_law(e, g), f), T);
    const Vector6d next = diff_of(obj);
    CHECK(std::abs(next.head<2>().norm() / e.head<2>().norm() - ratio) < 1e-9);
    CHECK(std::abs(next[5] / e[5] - ratio) < 1e-6);
    e = next;
  }
}
