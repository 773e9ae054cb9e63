#pragma once

#include <cstdint>
#include <vector>

#include "dynrecon/common.hpp"
#include "dynrecon/geometry.hpp"

namespace dynrecon {

/// Anisotropic 3D Gaussian. Scale and opacity are stored unconstrained
/// (log-scale, logit) so gradient steps never leave the valid set.
struct Gaussian3D {
  Vec3 mean = Vec3::Zero();
  Quat rotation = Quat::Identity();  // not necessarily unit; normalized on use
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();
  std::uint64_t id = 0;

  static Gaussian3D make(const Vec3& mean, const Quat& rotation, const Vec3& scale, double opacity,
                         const Vec3& color, std::uint64_t id = 0);

  Vec3 scale() const { return log_scale.array().exp(); }
  double opacity() const;
  Mat3 covariance() const;
};

double sigmoid(double x);
double logit(double p);

struct SplatOptions {
  double dilation_floor = 0.3;     // px², minimum eigenvalue of the 2D covariance
  double alpha_max = 0.999;
  double taper_start = 9.0;       // Mahalanobis² where the footprint starts tapering
  double support_limit = 11.082527090316852;// 2·ln 255: footprint is exactly zero beyond
  double transmittance_min = 1e-4;
  double near_plane = 0.01;
  int tile_size = 16;
};

/// Screen-space footprint of one Gaussian plus the camera-frame quantities
/// needed for ray-intersection depth and the backward pass.
struct ProjectedGaussian {
  Vec2 mean2d;
  Mat2 cov2d;       // after dilation
  Mat2 conic;       // cov2d⁻¹
  Mat2 cov2d_raw;   // before dilation
  double dilation = 0.0;
  Vec3 mean_cam;
  Mat3 cov_cam;
  Mat3 cov_cam_inv;
  Vec3 cov_inv_mean;  // cov_cam_inv · mean_cam
  double opacity = 0.0;
  double radius = 0.0;  // px, exact support radius of the tapered footprint

  /// Depth of the maximum-density point of the 3D Gaussian along the ray of `pixel`.
  double intersection_depth(const Vec2& pixel, const PinholeIntrinsics& K) const;
};

/// Throws BehindCamera when the mean is not in front of the camera.
ProjectedGaussian project_gaussian(const Gaussian3D& g, const RigidPose& pose, const PinholeIntrinsics& K,
                                   const SplatOptions& opt = {});

struct RenderOutput {
  RgbImage color;
  ScalarField depth;
  ScalarField opacity;

  // Forward state retained for render_backward.
  RigidPose pose;
  PinholeIntrinsics K;
  SplatOptions options;
  std::vector<ProjectedGaussian> projected;
  std::vector<std::uint8_t> visible;
  std::vector<std::vector<std::uint32_t>> contributors;  // per pixel, front-to-back
  ScalarField final_transmittance;
  std::uint64_t fingerprint = 0;
};

RenderOutput render(const std::vector<Gaussian3D>& gaussians, const RigidPose& pose, const PinholeIntrinsics& K,
                    const SplatOptions& opt = {});

struct GaussianGradient {
  Vec3 mean = Vec3::Zero();
  Vec4 rotation = Vec4::Zero();  // (w, x, y, z) of the stored quaternion
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();

  GaussianGradient& operator+=(const GaussianGradient& o);
};

/// Analytic gradients of a scalar loss given dL/dC, dL/dD, dL/dO per pixel.
/// Empty upstream rasters are treated as zero. Throws StaleForwardState when
/// `gaussians` differs from the set the forward pass was run on.
std::vector<GaussianGradient> render_backward(const RenderOutput& out, const std::vector<Gaussian3D>& gaussians,
                                              const RgbImage& d_color, const ScalarField& d_depth,
                                              const ScalarField& d_opacity);

std::uint64_t fingerprint(const std::vector<Gaussian3D>& gaussians);

/// d R(q/|q|) / dq contracted with dL/dR; q in (w, x, y, z).
Vec4 rotation_matrix_backward(const Quat& q, const Mat3& d_rotation);

}  // namespace dynrecon
