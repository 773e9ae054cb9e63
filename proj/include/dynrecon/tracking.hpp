#pragma once

#include <functional>
#include <vector>

#include "dynrecon/common.hpp"
#include "dynrecon/geometry.hpp"

namespace dynrecon {

/// Dense correspondences from every pixel of `source` into `target`.
/// `predicted(x, y)` is the absolute pixel p̃ in the target image.
struct FlowObservation {
  int source = 0;
  int target = 0;
  Raster<Vec2> predicted;
  ScalarField confidence;  // in [0, 1]
};

struct Keyframe {
  int id = 0;  // frame index in the sequence
  RigidPose pose;
  ScalarField disparity;  // 1/m
  Mask valid;             // 0 where the disparity is unusable
  RgbImage image;
  bool fixed_pose = false;
  bool fixed_disparity = false;
};

struct FactorGraph {
  PinholeIntrinsics K;
  std::vector<Keyframe> keyframes;
  std::vector<FlowObservation> edges;

  /// Index of the keyframe with frame id `id`, or -1.
  int find(int id) const;
  /// Throws MissingEdge when absent.
  const FlowObservation& edge(int source_id, int target_id) const;
  /// Target ids of all edges leaving `source_id`, in edge order.
  std::vector<int> targets_of(int source_id) const;
};

/// A pixel displacement field with per-pixel validity.
struct FlowField {
  Raster<Vec2> flow;
  Mask valid;
};

/// p_ij − p_i for every source pixel. Pixels with invalid or non-positive
/// disparity, or that land behind the target camera, are flagged invalid.
FlowField camera_induced_flow(const FactorGraph& graph, int source_id, int target_id);

/// p̃_ij − p_ij. Validity as in camera_induced_flow.
FlowField residual_flow(const FactorGraph& graph, int source_id, int target_id);

struct ResidualField {
  int keyframe = 0;
  ScalarField magnitude;  // r̄_i, zero at invalid pixels
  Mask valid;
  bool usable = true;  // false when every edge had a vanishing mean flow
};

/// Mean over outgoing edges of |r̂_ij| divided by the edge's mean observed
/// flow magnitude. Edges whose mean observed flow is below 1e-12 are
/// skipped; if all are, the field is returned with usable = false.
ResidualField normalized_residual_magnitude(const FactorGraph& graph, int keyframe_id);

/// 1 where r̄ is at or above the value of the ceil(q·N)-th largest valid
/// entry. Ties at the threshold are all included.
Mask coarse_mask(const ResidualField& field, double quantile);

struct DbaIteration {
  int iteration = 0;
  double objective = 0;  // after the iteration
  double lambda = 0;
  bool accepted = false;
  const std::vector<ScalarField>* suppression = nullptr;
};

struct DbaOptions {
  int iterations = 20;
  double damping = 1e-4;
  double tolerance = 1e-14;  // relative objective decrease that counts as converged
  /// Recompute coarse masks from the current estimate after every iteration.
  bool refine_masks = false;
  double quantile = 0.2;
  std::function<void(const DbaIteration&)> hook;
};

struct DbaReport {
  int iterations = 0;
  int accepted = 0;
  double initial_objective = 0;
  double final_objective = 0;
  bool converged = false;
  std::vector<double> objective_trace;  // objective after each accepted step
};

/// Weighted reprojection objective Σ_edges Σ_p w ‖p̃ − p_ij‖² with
/// w = confidence·(1 − suppression_i)·valid_i. `suppression` holds one
/// raster per keyframe (same order as graph.keyframes) or is empty.
double dba_objective(const FactorGraph& graph, const std::vector<ScalarField>& suppression);

/// Levenberg-Marquardt on poses and disparities with the disparities
/// eliminated by a Schur complement. The first keyframe's pose is held
/// fixed; when it is the only fixed pose, keyframe 0's mean disparity is
/// restored after every step to pin the scale.
DbaReport dba_solve(FactorGraph& graph, std::vector<ScalarField>& suppression, const DbaOptions& options = {});

/// A frame between two keyframes, observed through flow from each of them.
struct NonKeyframe {
  int id = 0;
  RigidPose initial_pose;
  std::vector<FlowObservation> flows;  // source = keyframe id, target = id
};

/// Pose of a non-keyframe from DBA on a temporary graph of its two
/// neighbouring keyframes (frozen) plus the frame itself.
RigidPose solve_nonkeyframe_pose(const FactorGraph& graph, const NonKeyframe& frame,
                                 const std::vector<ScalarField>& suppression, const DbaOptions& options = {});

/// Mean |p̃ − p| over confident pixels.
double mean_flow_magnitude(const FlowObservation& flow);

/// Two-view symmetric reprojection check of a keyframe's disparities against
/// its graph neighbours: a pixel stays valid when, in at least one
/// neighbour, its reprojection lands within `pixel_tol` after a round trip
/// and the depths agree within `depth_rel_tol`.
Mask consistency_mask(const FactorGraph& graph, int keyframe_id, double pixel_tol = 1.0,
                      double depth_rel_tol = 0.05);

}  // namespace dynrecon
