#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dynrecon/common.hpp"
#include "dynrecon/depth.hpp"
#include "dynrecon/geometry.hpp"
#include "dynrecon/scaffold.hpp"
#include "dynrecon/splatting.hpp"

namespace dynrecon {

/// Dynamic Gaussian ids carry this bit; static ids never do.
constexpr std::uint64_t kDynamicIdBit = 1ull << 63;

/// Where a static Gaussian was seeded: frame index and pixel.
struct StaticAnchor {
  int frame = -1;
  Vec2 pixel = Vec2::Zero();
};

/// Gaussian living in the canonical frame of `t_ref`, moved to other
/// timesteps by the scaffold warp over `nodes` with corrections `dw`.
struct DynamicGaussian {
  Gaussian3D canonical;
  int t_ref = 0;
  std::vector<int> nodes;
  std::vector<double> dw;
};

struct GaussianMap {
  std::vector<Gaussian3D> statics;
  std::vector<StaticAnchor> anchors;  // parallel to statics
  std::vector<DynamicGaussian> dynamics;
  std::uint64_t next_static_id = 1;
  std::uint64_t next_dynamic_id = kDynamicIdBit | 1;

  /// Throws ShapeMismatch / MissingNeighbor when the id spaces overlap or a
  /// dynamic neighbourhood points outside `graph`.
  void validate(const ScaffoldGraph& graph) const;
};

struct LossWeights {
  double rgb = 1.0;
  double depth = 0.5;
  double track = 0.1;
  double mask = 1.0;
  double arap = 0.2;
  double velocity = 0.1;
  double acceleration = 0.1;
  // Gaussian footprints straddle label and depth edges, so the mask term
  // ignores static pixels within mask_band px of the dynamic mask and the
  // depth term ignores pixels within depth_band px of a relative depth jump
  // above depth_jump.
  int mask_band = 3;
  int depth_band = 2;
  double depth_jump = 0.05;
};

/// One frame the mapper trains against.
struct TrainingView {
  int frame = 0;
  RigidPose pose;
  RgbImage image;
  DepthMap depth;
  Mask dynamic;  // fine motion mask, 1 = dynamic
};

struct SeedOptions {
  int stride = 2;
  double initial_opacity = 0.1;
  double footprint = 0.6;        // Gaussian σ as a fraction of the seed spacing
  double thickness = 0.1;        // normal-axis σ relative to the tangent σ
  double discontinuity = 0.05;   // relative depth jump that breaks a tangent estimate
};

/// One static Gaussian per stride-th pixel that is valid, static and not in
/// `skip` (per view, may be empty). Appends to map.statics / map.anchors.
/// Throws NoStaticPixels when no view has a valid static pixel.
void init_static(GaussianMap& map, std::span<const TrainingView> views, const PinholeIntrinsics& K,
                 std::span<const Mask> skip = {}, const SeedOptions& options = {});

/// One dynamic Gaussian per stride-th pixel inside `select` (per view) with
/// valid depth; t_ref is the view's frame. Returns the number seeded.
/// Throws EmptyMask on a missing selection raster.
std::size_t init_dynamic(GaussianMap& map, std::span<const TrainingView> views, std::span<const Mask> select,
                         const ScaffoldGraph& graph, const PinholeIntrinsics& K, const SeedOptions& options = {});

/// Mean of `opacity` over pixels with mask == 0, 0 when there are none. When
/// `grad` is non-null it receives d loss / d opacity.
double mask_loss(const ScalarField& opacity, const Mask& mask, ScalarField* grad = nullptr);

double huber(double r, double delta);

/// Supervision of the scaffold by one lifted track: `point` at `t_src` is
/// warped over `nodes` and compared to the 2D observation of `track`.
struct TrackAnchor {
  std::size_t track = 0;
  int t_src = 0;
  Vec3 point = Vec3::Zero();
  std::vector<int> nodes;
};

/// Mean Huber reprojection error over visible (anchor, t) pairs with t in
/// `frames`; poses are indexed by frame. Accumulates scale·∂ into `grad`.
double track_loss(const ScaffoldGraph& graph, std::span<const TrackAnchor> anchors, std::span<const Track2D> tracks,
                  std::span<const RigidPose> poses, const PinholeIntrinsics& K, std::span<const int> frames,
                  double delta = 2.0, ScaffoldGradient* grad = nullptr, double scale = 1.0);

/// Static Gaussians followed by every dynamic Gaussian warped to t.
struct ComposedScene {
  std::vector<Gaussian3D> gaussians;
  std::size_t static_count = 0;
  std::vector<WarpTape> tapes;  // one per dynamic Gaussian
};

ComposedScene compose_scene(const GaussianMap& map, const ScaffoldGraph& graph, int t, bool with_static = true);

RenderOutput render_map(const GaussianMap& map, const ScaffoldGraph& graph, const RigidPose& pose,
                        const PinholeIntrinsics& K, int t, const SplatOptions& options = {});

struct LossReport {
  long step = 0;
  double rgb = 0, depth = 0, track = 0, mask = 0, arap = 0, velocity = 0, acceleration = 0;
  double total = 0;
};

struct MapGradient {
  std::vector<GaussianGradient> statics;
  std::vector<GaussianGradient> dynamics;
  std::vector<std::vector<double>> dw;
  ScaffoldGradient scaffold;
};

struct LossInputs {
  std::span<const TrainingView> views;
  std::span<const Track2D> tracks;
  std::span<const TrackAnchor> anchors;
  std::span<const RigidPose> poses;  // by frame, for the track term
  PinholeIntrinsics K;
};

/// Full loss stack averaged over `views`, plus geometry regularizers.
/// Depth is compared as the opacity-normalized rendered depth on pixels
/// with valid reference depth and rendered opacity above 0.5.
LossReport evaluate_losses(const GaussianMap& map, const ScaffoldGraph& graph, const LossInputs& inputs,
                           const LossWeights& weights, MapGradient* grad = nullptr);

struct LearningRates {
  double mean = 5e-4;
  double rotation = 2e-3;
  double scale = 5e-3;
  double opacity = 5e-2;
  double color = 1e-2;
  double node_translation = 5e-4;
  double node_rotation = 1e-3;
  double dw = 1e-3;
};

/// Adam moments for one parameter block.
struct AdamSlot {
  std::vector<double> m, v;
  long steps = 0;
};

struct OptimizerState {
  LearningRates rates;
  double lr_scale = 1.0;     // halved on non-finite losses
  double lr_schedule = 1.0;  // set per step by optimize_map
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-15;
  std::vector<AdamSlot> statics, dynamics, nodes;  // dynamics hold 14 + |dw| entries; nodes 6 per timestep
  long step = 0;
  bool optimize_observed_nodes = false;
};

/// One Adam step on the full loss. On a non-finite loss the parameters are
/// untouched, the learn rate is halved and NonFiniteLoss is thrown.
LossReport photometric_step(GaussianMap& map, ScaffoldGraph& graph, const LossInputs& inputs,
                            const LossWeights& weights, OptimizerState& state);

/// Removes Gaussians with opacity below `threshold` (and their optimizer slots).
std::size_t prune_transparent(GaussianMap& map, OptimizerState& state, double threshold = 0.005);

struct MapOptimizeOptions {
  int steps = 300;
  int views_per_step = 1;
  int prune_every = 100;  // 0 disables
  double prune_threshold = 0.005;
  double final_lr_fraction = 0.1;  // exponential decay of every learn rate over the run
  std::uint64_t seed = 0;
  LossWeights weights;
};

/// Runs `steps` photometric steps cycling through `views` in a seeded
/// order. Non-finite steps are skipped after halving the learn rate.
std::vector<LossReport> optimize_map(GaussianMap& map, ScaffoldGraph& graph, const LossInputs& inputs,
                                     OptimizerState& state, const MapOptimizeOptions& options,
                                     const std::function<void(const LossReport&)>& on_step = {});

/// Re-anchors static Gaussians after a pose/depth update of their seeding
/// frames: means go through new_pose ∘ ρ ∘ old_pose⁻¹, rotations are
/// composed with the relative rotation and scales grow by ρ, where ρ is the
/// depth ratio at the anchor pixel. Inputs are indexed by frame. Throws
/// MissingAnchor.
void deform_static(std::vector<Gaussian3D>& statics, std::span<const StaticAnchor> anchors,
                   std::span<const RigidPose> old_poses, std::span<const DepthMap> old_depths,
                   std::span<const RigidPose> new_poses, std::span<const DepthMap> new_depths);

/// Loss trace as CSV: step,rgb,depth,track,mask,arap,velocity,acceleration,total.
std::string loss_trace_csv(std::span<const LossReport> trace);

}  // namespace dynrecon
