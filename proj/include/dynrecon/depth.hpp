#pragma once

#include <span>
#include <utility>
#include <vector>

#include "dynrecon/common.hpp"
#include "dynrecon/geometry.hpp"

namespace dynrecon {

struct DepthMap {
  int frame = -1;
  ScalarField depth;  // meters, z along the optical axis
  Mask valid;

  static DepthMap from_field(const ScalarField& depth, int frame = -1);  // valid where depth > 0
};

struct DepthSample {
  Vec2 pixel;
  double depth = 0;
};

/// A keyframe as seen by the depth synthesis of a neighbouring frame.
struct DepthSource {
  RigidPose pose;
  ScalarField disparity;
  Mask dynamic;  // may be empty
  Mask valid;    // may be empty
};

/// Back-projects every usable keyframe pixel and projects it into the
/// frame with pose `frame_pose`. Dynamic, invalid, behind-camera and
/// out-of-image points are dropped. Throws NoValidSamples.
std::vector<DepthSample> reproject_depth(const RigidPose& frame_pose, const PinholeIntrinsics& K,
                                         std::span<const DepthSource> sources);

/// Nearest-cell splat with z-min conflicts, axis-aligned linear hole filling,
/// validity restricted to the convex hull of the samples.
DepthMap interpolate_sparse_depth(std::span<const DepthSample> samples, int width, int height);

struct AffineDepthFit {
  double scale = 1;  // θ
  double shift = 0;  // γ
  std::size_t inliers = 0;
};

/// Closed-form least squares of θ·mono + γ ≈ repro over jointly valid pixels.
std::pair<AffineDepthFit, DepthMap> align_mono_depth(const DepthMap& mono, const DepthMap& repro);

/// Σ (θ·mono + γ − repro)² over jointly valid pixels.
double alignment_objective(const DepthMap& mono, const DepthMap& repro, double scale, double shift);

}  // namespace dynrecon
