#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dynrecon/common.hpp"
#include "dynrecon/depth.hpp"
#include "dynrecon/masking.hpp"
#include "dynrecon/reconstruction.hpp"
#include "dynrecon/scaffold.hpp"
#include "dynrecon/synthetic.hpp"
#include "dynrecon/tracking.hpp"

namespace dynrecon {

/// Frames [overlap_begin, new_begin) were seen before; [new_begin, end) are new.
struct BatchWindow {
  int overlap_begin = 0;
  int new_begin = 0;
  int end = 0;

  std::vector<int> new_frames() const;
  std::vector<int> overlap_frames() const;
};

BatchWindow make_window(int processed, int end, int overlap = 8);

enum class TrackClass : std::uint8_t { RecentlyVisible = 0, Retired = 1, New = 2 };

struct TrackStatus {
  std::uint64_t id = 0;
  TrackClass cls = TrackClass::Retired;
};

/// Tracks queried inside the new frames are New; the rest are
/// RecentlyVisible iff visible on at least `min_visible` overlap frames.
std::vector<TrackStatus> classify_tracks(std::span<const Track2D> tracks, const BatchWindow& window,
                                         int min_visible = 4);

/// Dynamic pixels (with valid depth) whose backprojection has no point of
/// `lifted` within r_search.
Mask detect_newly_seen(const Mask& dynamic, const DepthMap& depth, const RigidPose& pose, const PinholeIntrinsics& K,
                       std::span<const Vec3> lifted, double r_search = 0.02);

struct MultiStageOptions {
  int grid_stride = 4;       // pass-3 query grid
  double dedup_radius = 2;   // px, pass-3 queries this close to a track are dropped
};

struct MultiStageResult {
  std::size_t extended = 0;      // pass 1
  std::vector<Track2D> newly_seen;  // pass 2
  std::vector<Track2D> replenish;   // pass 3
};

/// Pass 1 extends the recently visible tracks of `tracks` into the window in
/// place; pass 2 queries each new frame's newly-seen pixels, frame by frame,
/// where `detect(frame, known)` returns that mask given every track so far;
/// pass 3 queries a grid over the dynamic regions of each new frame.
MultiStageResult multi_stage_tracking(std::vector<Track2D>& tracks, std::span<const TrackStatus> status,
                                      const BatchWindow& window, std::span<const Mask> dynamic,
                                      const std::function<Mask(int, std::span<const Track2D>)>& detect,
                                      OracleBundle& oracle, std::uint64_t& next_id,
                                      const MultiStageOptions& options = {});

/// Positions of `track` before its first lifted timestep t_f, obtained by
/// warping the position at t_f with `previous` (when t_f is inside its
/// range); later positions are left as they are.
void warp_track_to_past(Track3D& track, const ScaffoldGraph& previous);

/// What the tracker knows about every frame so far.
struct KeyframeUpdate {
  std::vector<RigidPose> poses;
  std::vector<DepthMap> depths;
  std::vector<Mask> masks;  // fine motion masks
  std::vector<std::uint8_t> keyframe;
};

struct FrontEndOptions {
  bool rgbd = true;
  int keyframe_stride = 2;
  int span = 2;          // edges to this many previous keyframes
  int local_window = 5;  // keyframes refined per insertion
  DbaOptions local;
  DbaOptions global;
  double quantile = 0.2;
  MaskingOptions masking;
  ThresholdOptions threshold;
};

/// Online tracker: keyframe insertion with local masked DBA, fine masks,
/// a global masked DBA per batch, non-keyframe poses and depth.
struct FrontEnd {
  FactorGraph graph;
  std::vector<ScalarField> suppression;  // per keyframe, graph order
  MaskTrackState mask_state;
  std::vector<FineMask> fine;  // per frame
  std::vector<Mask> coarse;    // per frame, empty on non-keyframes
  std::vector<RigidPose> poses;
  std::vector<DepthMap> depths;
  std::vector<std::uint8_t> is_keyframe;
  int frames = 0;
  double quantile = 0.2;  // residual quantile adapted from the latest fine mask
  int fine_frames = 0;    // frames with a fine mask so far

  /// Consumes frames [frames, end).
  void advance(int end, OracleBundle& oracle, const PinholeIntrinsics& K, const FrontEndOptions& options);
  KeyframeUpdate snapshot() const;
};

struct ProgressiveOptions {
  int batch_size = 16;
  int overlap = 8;
  int min_visible = 4;
  double r_search = 0.02;
  MultiStageOptions passes;
  int nodes_per_batch = 48;
  double node_separation = 0.08;
  int topology_k = 8;
  int radius_nth = 4;
  int geometry_steps = 150;
  GeometryWeights geometry_weights;
  double geometry_learn_rate = 1e-2;
  int photometric_steps = 300;
  int views_per_step = 1;
  int max_track_anchors = 256;
  int prune_every = 100;
  double prune_threshold = 0.005;
  double final_lr_fraction = 0.1;
  SeedOptions seeding;
  LossWeights weights;
  LearningRates rates;
  std::uint64_t seed = 0;
};

/// Mapper state carried across batches; everything needed to resume.
struct ProgressiveState {
  int batches = 0;
  int frames = 0;
  GaussianMap map;
  ScaffoldGraph scaffold;
  OptimizerState optimizer;
  std::vector<Track2D> tracks;
  std::vector<std::uint8_t> origin;  // pass that created each track (1, 2, 3)
  std::vector<std::uint8_t> retired;
  std::vector<Track3D> lifted;
  std::vector<RigidPose> poses;  // snapshot the map is anchored to
  std::vector<DepthMap> depths;
  std::vector<Mask> masks;
  std::uint64_t next_track_id = 1;
  std::vector<LossReport> trace;
};

using StageLogger = std::function<void(int batch, const std::string& stage, double ms)>;

/// One batch: apply the tracker update to the existing map, classify,
/// multi-stage tracking, lift, warp to past, extend the scaffold, seed
/// Gaussians on newly-seen and uncovered pixels, then optimize. Frames in
/// `train` (by frame, empty = all) feed seeding and the photometric loss.
void process_batch(ProgressiveState& state, const KeyframeUpdate& update, std::span<const RgbImage> images,
                   int end, OracleBundle& oracle, const PinholeIntrinsics& K, const ProgressiveOptions& options,
                   std::span<const std::uint8_t> train = {}, const StageLogger& log = {});

/// Training views for frames [0, state.frames) selected by `train`.
std::vector<TrainingView> training_views(const ProgressiveState& state, std::span<const RgbImage> images,
                                         std::span<const std::uint8_t> train);

}  // namespace dynrecon
