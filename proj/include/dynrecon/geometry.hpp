#pragma once

#include <span>
#include <vector>

#include <Eigen/Geometry>

#include "dynrecon/common.hpp"

namespace dynrecon {

using Quat = Eigen::Quaterniond;

/// Rigid transform stored as unit quaternion + translation. Maps points from
/// the local frame into the parent frame: x_parent = R x_local + t. Camera
/// poses are camera-to-world.
struct RigidPose {
  Quat rotation = Quat::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidPose identity() { return {}; }
  static RigidPose from_translation(const Vec3& t) { return {Quat::Identity(), t}; }
  static RigidPose from_axis_angle(const Vec3& axis_angle, const Vec3& t = Vec3::Zero());

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_inverse(const Vec3& p) const { return rotation.conjugate() * (p - translation); }
  RigidPose inverse() const;
  /// this ∘ other: first `other`, then `this`.
  RigidPose compose(const RigidPose& other) const;
  RigidPose operator*(const RigidPose& other) const { return compose(other); }
  Mat3 rotation_matrix() const { return rotation.toRotationMatrix(); }
  Eigen::Matrix4d matrix() const;

  /// Left perturbation exp(xi) ∘ this with xi = (dt, dtheta): rotation
  /// R' = Exp(dtheta) R, translation t' = Exp(dtheta) t + dt.
  RigidPose retract(const Eigen::Matrix<double, 6, 1>& xi) const;

  RigidPose normalized() const { return {rotation.normalized(), translation}; }
};

/// Unit dual quaternion real + eps·dual with dual = ½ (0,t) ⊗ real.
struct DualQuaternion {
  Quat real{1, 0, 0, 0};
  Quat dual{0, 0, 0, 0};

  static DualQuaternion from_pose(const RigidPose& pose);
  /// Normalizes by |real| and converts back; the translation is read from
  /// 2·dual⊗conj(real), which is exact for rigid inputs.
  RigidPose to_pose() const;
  DualQuaternion normalized() const;
};

struct PinholeIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;

  /// Throws InvalidIntrinsics when focal lengths or principal point are out of range.
  void validate() const;
  Mat3 matrix() const;
  /// K⁻¹[pixel, 1]: viewing ray with unit z.
  Vec3 ray(const Vec2& pixel) const { return {(pixel.x() - cx) / fx, (pixel.y() - cy) / fy, 1.0}; }
  bool operator==(const PinholeIntrinsics&) const = default;
};

struct SimilarityTransform {
  double scale = 1.0;
  Quat rotation = Quat::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
  /// Similarity applied to a camera-to-world pose (rotation composed, position mapped).
  RigidPose apply(const RigidPose& pose) const;
};

struct Projection {
  Vec2 pixel;
  double depth;
};

constexpr double kMinDepth = 1e-8;

/// Projects a world point into the camera with camera-to-world `pose`.
Projection project(const RigidPose& pose, const PinholeIntrinsics& K, const Vec3& point);
/// pose ∘ ((1/disparity)·K⁻¹[pixel,1]).
Vec3 backproject(const RigidPose& pose, const PinholeIntrinsics& K, const Vec2& pixel, double disparity);

/// Dual quaternion blending. Inputs are flipped to the hemisphere of the
/// largest-weight transform before averaging.
RigidPose dqb_blend(std::span<const double> weights, std::span<const RigidPose> transforms);

/// Least-squares similarity mapping source onto target (Umeyama 1991).
SimilarityTransform umeyama_align(std::span<const Vec3> source, std::span<const Vec3> target);

Mat3 skew(const Vec3& v);
/// Quaternion exponential of a rotation vector.
Quat quat_exp(const Vec3& omega);
/// Rotation vector of a unit quaternion (shortest arc).
Vec3 quat_log(const Quat& q);
double rotation_angle_between(const Quat& a, const Quat& b);

}  // namespace dynrecon
