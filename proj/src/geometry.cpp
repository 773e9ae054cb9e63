#include "dynrecon/geometry.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/SVD>

namespace dynrecon {

RigidPose RigidPose::from_axis_angle(const Vec3& axis_angle, const Vec3& t) {
  return {quat_exp(axis_angle), t};
}

RigidPose RigidPose::inverse() const {
  const Quat inv = rotation.conjugate();
  return {inv, -(inv * translation)};
}

RigidPose RigidPose::compose(const RigidPose& other) const {
  return {(rotation * other.rotation).normalized(), rotation * other.translation + translation};
}

Eigen::Matrix4d RigidPose::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation_matrix();
  m.topRightCorner<3, 1>() = translation;
  return m;
}

RigidPose RigidPose::retract(const Eigen::Matrix<double, 6, 1>& xi) const {
  const Quat dq = quat_exp(xi.tail<3>());
  return {(dq * rotation).normalized(), dq * translation + xi.head<3>()};
}

DualQuaternion DualQuaternion::from_pose(const RigidPose& pose) {
  const Quat r = pose.rotation.normalized();
  const Quat t(0, pose.translation.x(), pose.translation.y(), pose.translation.z());
  Quat d = t * r;
  d.coeffs() *= 0.5;
  return {r, d};
}

DualQuaternion DualQuaternion::normalized() const {
  const double n = real.norm();
  DualQuaternion out = *this;
  out.real.coeffs() /= n;
  out.dual.coeffs() /= n;
  return out;
}

RigidPose DualQuaternion::to_pose() const {
  const DualQuaternion n = normalized();
  const Quat t = n.dual * n.real.conjugate();
  return {n.real, 2.0 * t.vec()};
}

void PinholeIntrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw Error(ErrorCode::InvalidIntrinsics, "focal lengths must be positive");
  if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidIntrinsics, "image size must be positive");
  if (!(cx >= 0 && cx < width && cy >= 0 && cy < height))
    throw Error(ErrorCode::InvalidIntrinsics, "principal point outside image");
}

Mat3 PinholeIntrinsics::matrix() const {
  Mat3 k;
  k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return k;
}

RigidPose SimilarityTransform::apply(const RigidPose& pose) const {
  return {(rotation * pose.rotation).normalized(), apply(pose.translation)};
}

Projection project(const RigidPose& pose, const PinholeIntrinsics& K, const Vec3& point) {
  const Vec3 c = pose.apply_inverse(point);
  if (c.z() <= kMinDepth) throw Error(ErrorCode::NonPositiveDepth, "point not in front of camera");
  return {{K.fx * c.x() / c.z() + K.cx, K.fy * c.y() / c.z() + K.cy}, c.z()};
}

Vec3 backproject(const RigidPose& pose, const PinholeIntrinsics& K, const Vec2& pixel, double disparity) {
  if (!(disparity > 0)) throw Error(ErrorCode::NonPositiveDisparity, "disparity must be positive");
  return pose.apply(K.ray(pixel) / disparity);
}

RigidPose dqb_blend(std::span<const double> weights, std::span<const RigidPose> transforms) {
  if (weights.empty() || weights.size() != transforms.size())
    throw Error(ErrorCode::EmptyInput, "weights and transforms must be non-empty and equal length");
  std::size_t pivot = 0;
  double total = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < 0) throw Error(ErrorCode::AllZeroWeights, "negative blend weight");
    total += weights[i];
    if (weights[i] > weights[pivot]) pivot = i;
  }
  if (!(total > 0)) throw Error(ErrorCode::AllZeroWeights, "all blend weights are zero");

  const Quat pivot_rot = transforms[pivot].rotation.normalized();
  DualQuaternion acc{Quat(0, 0, 0, 0), Quat(0, 0, 0, 0)};
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] == 0) continue;
    const DualQuaternion dq = DualQuaternion::from_pose(transforms[i]);
    const double sign = dq.real.coeffs().dot(pivot_rot.coeffs()) < 0 ? -1.0 : 1.0;
    acc.real.coeffs() += sign * weights[i] * dq.real.coeffs();
    acc.dual.coeffs() += sign * weights[i] * dq.dual.coeffs();
  }
  if (acc.real.norm() < 1e-300) throw Error(ErrorCode::AllZeroWeights, "blend cancelled to zero");
  return acc.to_pose();
}

SimilarityTransform umeyama_align(std::span<const Vec3> source, std::span<const Vec3> target) {
  const std::size_t n = source.size();
  if (n < 3 || target.size() != n)
    throw Error(ErrorCode::DegenerateConfiguration, "need at least 3 point pairs of equal count");
  Vec3 mu_s = Vec3::Zero(), mu_t = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_s += source[i];
    mu_t += target[i];
  }
  mu_s /= double(n);
  mu_t /= double(n);

  Mat3 cov = Mat3::Zero(), scatter = Mat3::Zero();
  double var_s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 ds = source[i] - mu_s;
    cov += (target[i] - mu_t) * ds.transpose();
    scatter += ds * ds.transpose();
    var_s += ds.squaredNorm();
  }
  cov /= double(n);
  var_s /= double(n);

  Eigen::JacobiSVD<Mat3> scatter_svd(scatter);
  const Vec3 sv = scatter_svd.singularValues();
  if (!(sv(0) > 0) || sv(1) <= 1e-12 * sv(0))
    throw Error(ErrorCode::DegenerateConfiguration, "source points are collinear or coincident");

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 s = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) s(2, 2) = -1;
  const Mat3 r = svd.matrixU() * s * svd.matrixV().transpose();
  const double scale = (svd.singularValues().asDiagonal() * s).trace() / var_s;

  SimilarityTransform out;
  out.scale = scale;
  out.rotation = Quat(r).normalized();
  out.translation = mu_t - scale * (r * mu_s);
  return out;
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

Quat quat_exp(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta < 1e-12) {
    Quat q(1, 0.5 * omega.x(), 0.5 * omega.y(), 0.5 * omega.z());
    return q.normalized();
  }
  const Vec3 axis = omega / theta;
  return Quat(Eigen::AngleAxisd(theta, axis));
}

Vec3 quat_log(const Quat& q_in) {
  Quat q = q_in.normalized();
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  const double vn = q.vec().norm();
  if (vn < 1e-12) return 2.0 * q.vec();
  const double angle = 2.0 * std::atan2(vn, q.w());
  return angle * q.vec() / vn;
}

double rotation_angle_between(const Quat& a, const Quat& b) {
  return quat_log(a.conjugate() * b).norm();
}

}  // namespace dynrecon
