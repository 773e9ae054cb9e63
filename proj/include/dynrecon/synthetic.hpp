#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dynrecon/common.hpp"
#include "dynrecon/depth.hpp"
#include "dynrecon/geometry.hpp"
#include "dynrecon/masking.hpp"
#include "dynrecon/scaffold.hpp"
#include "dynrecon/splatting.hpp"
#include "dynrecon/tracking.hpp"

namespace dynrecon {

/// Smooth procedural albedo over surface coordinates (meters).
struct Texture {
  Vec3 base = Vec3::Constant(0.5);
  Vec3 amplitude = Vec3::Constant(0.2);
  Vec2 frequency = Vec2(1.0, 1.0);  // cycles per meter along u and v
  Vec3 phase = Vec3::Zero();

  Vec3 color(const Vec2& uv) const;
};

/// Rectangle in the xy-plane of `frame`, centered at its origin.
struct Rectangle {
  RigidPose frame;
  Vec2 half_extent = Vec2(0.5, 0.5);
  Texture texture;
};

/// Rigid object: faces in the object frame plus its object-to-world pose per frame.
struct Mover {
  std::vector<Rectangle> faces;
  std::vector<RigidPose> trajectory;
};

struct NoiseKnobs {
  double flow_sigma = 0;     // px
  double depth_scale = 1;    // hidden mono-depth affine a
  double depth_shift = 0;    // hidden mono-depth affine b
  double depth_sigma = 0;    // m
  double dropout = 0;        // track visibility dropout rate
};

struct SceneSpec {
  PinholeIntrinsics K{56, 56, 31.5, 23.5, 64, 48};
  int frame_count = 32;
  double frame_interval = 1.0 / 30.0;
  std::vector<Rectangle> statics;
  std::vector<Mover> movers;
  std::vector<RigidPose> camera;  // camera-to-world per frame
  NoiseKnobs noise;
  double gaussian_spacing = 0.06;  // m between Gaussian centers on a surface
  double gaussian_opacity = 0.99;

  /// Throws InvalidSpec.
  void validate() const;
};

std::vector<Rectangle> box_faces(const Vec3& half_size, const Texture& texture);

struct DeskSceneParams {
  int width = 64;
  int height = 48;
  double focal = 56;
  int frames = 32;
  int movers = 1;
  double dynamic_fraction = 0.15;  // approximate share of pixels covered by movers
  double mover_speed = 1.2;        // px per frame of projected mover motion
  double mover_spin = 0;           // rad per frame about the vertical axis
  double camera_motion = 1.0;      // scales the camera path amplitude
  double spacing = 0.06;
  NoiseKnobs noise;
};

/// Back wall, floor and a static box with 1-2 boxes moving on circles in
/// front of them, seen by a camera on a smooth path. The seed picks
/// textures and phases.
SceneSpec make_desk_scene(const DeskSceneParams& params, std::uint64_t seed);

struct SurfaceHit {
  int instance = -1;  // -1 nothing, 0 static, m+1 mover m
  int face = -1;
  double depth = 0;   // camera z
  Vec3 local = Vec3::Zero();  // hit point in the face's own frame
};

SurfaceHit ray_cast(const SceneSpec& spec, int t, const Vec2& pixel);
/// World position at frame t of the surface point in `hit`.
Vec3 surface_point(const SceneSpec& spec, const SurfaceHit& hit, int t);

/// Gaussianized scene geometry at frame t.
std::vector<Gaussian3D> scene_gaussians(const SceneSpec& spec, int t, std::uint64_t seed);

struct Dataset {
  SceneSpec spec;
  std::uint64_t seed = 0;
  std::vector<double> timestamps;
  std::vector<RigidPose> poses;
  std::vector<RgbImage> images;
  std::vector<ScalarField> depths;  // 0 where no surface
  std::vector<Mask> instances;      // 0 static, m+1 mover m
  std::vector<Mask> dynamic_masks;

  int frames() const { return int(images.size()); }
  const PinholeIntrinsics& K() const { return spec.K; }
};

Dataset generate(const SceneSpec& spec, std::uint64_t seed);

/// Ground-truth correspondences i → j plus N(0, σ²) noise per component.
/// Confidence is 0 where the surface is hidden or leaves the image in j,
/// else 1 − min(1, |noise| / 3σ).
FlowObservation oracle_flow(const Dataset& data, int i, int j, double sigma, std::uint64_t seed);

struct TrackQuery {
  int frame = 0;
  Vec2 pixel = Vec2::Zero();
};

/// Ground-truth trajectories of the surface points under each query over
/// frames [t0, t1). Visibility is occlusion plus frustum; `dropout` flips
/// visible entries off at that rate (the query frame is kept).
std::vector<Track2D> oracle_tracks(const Dataset& data, std::span<const TrackQuery> queries, int t0, int t1,
                                   double dropout, std::uint64_t seed, std::uint64_t first_id = 0);

/// a·depth + b + N(0, σ²) on valid pixels.
DepthMap oracle_monodepth(const Dataset& data, int frame, double a, double b, double sigma, std::uint64_t seed);

LabelRasterSegmenter ground_truth_segmenter(const Dataset& data);

/// Every perception input the pipeline consumes, behind one interface so
/// file-backed or learned providers can replace the synthetic oracles.
class OracleBundle {
 public:
  virtual ~OracleBundle() = default;
  virtual FlowObservation flow(int source, int target) = 0;
  virtual std::vector<Track2D> tracks(std::span<const TrackQuery> queries, int t0, int t1, std::uint64_t first_id) = 0;
  virtual DepthMap sensor_depth(int frame) = 0;
  virtual DepthMap mono_depth(int frame) = 0;
  virtual SegmentationOracle& segmenter() = 0;
};

/// Oracles over a generated dataset; noise comes from the scene's knobs.
class SyntheticOracles : public OracleBundle {
 public:
  SyntheticOracles(const Dataset& data, std::uint64_t seed);
  FlowObservation flow(int source, int target) override;
  std::vector<Track2D> tracks(std::span<const TrackQuery> queries, int t0, int t1, std::uint64_t first_id) override;
  DepthMap sensor_depth(int frame) override;
  DepthMap mono_depth(int frame) override;
  SegmentationOracle& segmenter() override { return segmenter_; }

 private:
  const Dataset& data_;
  std::uint64_t seed_;
  LabelRasterSegmenter segmenter_;
};

/// Deterministic per-purpose RNG seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace dynrecon
