#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "dynrecon/common.hpp"
#include "dynrecon/depth.hpp"
#include "dynrecon/geometry.hpp"

namespace dynrecon {

/// 2D pixel trajectory indexed by frame; entries outside the observed
/// range are invisible.
struct Track2D {
  std::uint64_t id = 0;
  int query_frame = 0;
  std::vector<Vec2> positions;
  std::vector<std::uint8_t> visible;

  int first_visible() const;  // -1 when never visible
  int visible_count(int t0, int t1) const;
};

struct Track3D {
  std::uint64_t id = 0;
  std::vector<Vec3> positions;        // every frame, gaps filled
  std::vector<std::uint8_t> visible;  // frames actually lifted
};

/// Depth at a sub-pixel location: bilinear when the four surrounding pixels
/// are valid and share the nearest pixel's mask label, else the nearest
/// pixel. Returns a non-positive value when unavailable.
double sample_depth(const DepthMap& depth, const Mask* labels, const Vec2& pixel);

/// Back-projects visible positions; gaps are linearly interpolated and
/// leading/trailing gaps hold the nearest lifted position. Throws
/// NoVisibleTimestep.
std::vector<Track3D> lift_tracks(std::span<const Track2D> tracks, std::span<const RigidPose> poses,
                                 std::span<const DepthMap> depths, std::span<const Mask> masks,
                                 const PinholeIntrinsics& K);

/// Fills invisible positions of a partially lifted track in place.
void fill_track_gaps(Track3D& track);

struct ScaffoldNode {
  std::vector<RigidPose> transforms;    // Q_t, one per timestep
  std::vector<std::uint8_t> observed;  // transforms at observed steps are data
  double radius = 1.0;
  std::uint64_t track_id = 0;
};

struct ScaffoldGraph {
  int anchor_time = 0;
  std::vector<ScaffoldNode> nodes;
  std::vector<std::vector<int>> neighbors;  // symmetric adjacency

  int timesteps() const { return nodes.empty() ? 0 : int(nodes.front().transforms.size()); }
  Vec3 position(int m, int t) const { return nodes[std::size_t(m)].transforms[std::size_t(t)].translation; }
  /// (m, n) for every n in neighbors[m].
  std::vector<std::pair<int, int>> directed_edges() const;
};

/// Earliest frame where every track is visible, else the frame with the
/// most visible tracks.
int anchor_frame(std::span<const Track3D> tracks);

/// Farthest-point sampling at the anchor frame. Nodes carry the source
/// track's positions with identity rotations; topology and radii are built.
ScaffoldGraph sample_nodes(std::span<const Track3D> tracks, int target_count, double min_separation, int k = 8);

/// Indices of tracks picked by farthest-point sampling at frame t, also
/// keeping min_separation from `existing` points.
std::vector<std::size_t> farthest_point_indices(std::span<const Vec3> points, std::span<const Vec3> existing,
                                                int target_count, double min_separation);

/// k-nearest-neighbour adjacency at the anchor time, symmetrized.
void build_topology(ScaffoldGraph& graph, int k = 8);
/// Radius of every node = distance to its nth nearest node at anchor time.
void init_radii(ScaffoldGraph& graph, int nth = 4);

struct Skinning {
  std::vector<int> nodes;  // nearest node first, then its neighbours
  std::vector<double> weights;
};

/// Nearest node at t_ref plus its graph neighbours, with normalized RBF weights.
Skinning skinning_weights(const Vec3& query, const ScaffoldGraph& graph, int t_ref);
std::vector<int> skinning_neighborhood(const Vec3& query, const ScaffoldGraph& graph, int t_ref);

/// Per-node, per-timestep gradient (translation, left rotation tangent).
struct ScaffoldGradient {
  int timesteps = 0;
  std::vector<Vec3> translation;
  std::vector<Vec3> rotation;

  void reset(const ScaffoldGraph& graph);
  Vec3& dt(int m, int t) { return translation[std::size_t(m) * timesteps + t]; }
  Vec3& dr(int m, int t) { return rotation[std::size_t(m) * timesteps + t]; }
};

/// Forward record of one DQB warp, enough to run the reverse pass.
struct WarpTape {
  Vec3 query = Vec3::Zero();
  int t_src = 0, t_dst = 0;
  std::vector<int> nodes;
  std::vector<double> rbf;       // unnormalized RBF values
  double rbf_sum = 0;
  std::vector<double> combined;  // max(0, w + dw)
  double combined_sum = 0;
  std::vector<double> blend;     // normalized blend weights
  std::vector<double> sign;
  std::vector<Quat> rel_rotation;     // ΔQ rotations
  std::vector<Vec3> rel_translation;  // ΔQ translations
  std::vector<Quat> dual;             // ½ (0,t) ⊗ r per node
  Quat acc_real, acc_dual;
  double norm = 1;
  RigidPose result;
};

/// T_i = DQB over `nodes` of Q_dst Q_src⁻¹ with weights w(query) + dw, where
/// w are the RBF weights at t_src. Throws AllZeroWeights.
WarpTape warp_forward(const Vec3& query, std::span<const int> nodes, std::span<const double> dw,
                      const ScaffoldGraph& graph, int t_src, int t_dst);

/// Reverse pass. `d_rotation` is dL/d(result rotation) in (w, x, y, z),
/// `d_translation` is dL/d(result translation). Any output pointer may be
/// null.
void warp_backward(const WarpTape& tape, const Vec4& d_rotation, const Vec3& d_translation,
                   const ScaffoldGraph& graph, ScaffoldGradient* d_graph, Vec3* d_query,
                   std::span<double> d_dw);

RigidPose warp_point(const Vec3& query, std::span<const int> nodes, std::span<const double> dw,
                     const ScaffoldGraph& graph, int t_src, int t_dst);
/// Neighbourhood from skinning_weights at t_src and zero corrections.
RigidPose warp_point(const Vec3& query, const ScaffoldGraph& graph, int t_src, int t_dst);

/// Regularizers; when `grad` is non-null, scale·∂loss is accumulated into it.
double arap_loss(const ScaffoldGraph& graph, ScaffoldGradient* grad = nullptr, double scale = 1.0);
double velocity_loss(const ScaffoldGraph& graph, ScaffoldGradient* grad = nullptr, double scale = 1.0);
double acceleration_loss(const ScaffoldGraph& graph, ScaffoldGradient* grad = nullptr, double scale = 1.0);

struct GeometryWeights {
  double arap = 0.2;
  double velocity = 0.1;
  double acceleration = 0.1;
};

double geometry_loss(const ScaffoldGraph& graph, const GeometryWeights& w, ScaffoldGradient* grad = nullptr);

struct GeometryOptions {
  int steps = 300;
  double learn_rate = 1e-2;
  GeometryWeights weights;
};

struct GeometryReport {
  double initial_loss = 0;
  double final_loss = 0;
  int accepted = 0;
};

/// Adam over the transforms at unobserved timesteps; steps that raise the
/// loss are rejected and halve the step size.
GeometryReport optimize_geometry(ScaffoldGraph& graph, const GeometryOptions& options = {});

/// Re-lifts nodes after a pose/depth update: each node transform is mapped
/// through the camera correction new_pose ∘ diag(ρ) ∘ old_pose⁻¹ of its
/// frame, with ρ the depth ratio under the node's track pixel. Throws
/// MissingUpdate.
ScaffoldGraph reanchor(const ScaffoldGraph& graph, std::span<const Track2D> tracks,
                       std::span<const RigidPose> old_poses, std::span<const DepthMap> old_depths,
                       std::span<const RigidPose> new_poses, std::span<const DepthMap> new_depths);

/// Quaternion product helpers in (w, x, y, z) coefficient order.
Eigen::Matrix4d quat_left_matrix(const Quat& q);   // q ⊗ p = L(q) p
Eigen::Matrix4d quat_right_matrix(const Quat& q);  // p ⊗ q = R(q) p
Vec4 quat_wxyz(const Quat& q);

}  // namespace dynrecon
