#pragma once

// 16×16 scene with a static backdrop, a few dynamic Gaussians riding a
// four-node scaffold and three camera views. The "truth" map renders the
// views; tests optimize or differentiate a perturbed copy against them.

#include <random>

#include "dynrecon/reconstruction.hpp"
#include "test_support.hpp"

namespace dynrecon::testing {

struct MiniScene {
  PinholeIntrinsics K{20, 20, 7.5, 7.5, 16, 16};
  GaussianMap truth;
  GaussianMap map;  // perturbed copy
  ScaffoldGraph graph;
  std::vector<RigidPose> poses;
  std::vector<TrainingView> views;
  std::vector<Track2D> tracks;
  std::vector<TrackAnchor> anchors;

  LossInputs inputs() const {
    LossInputs in;
    in.views = views;
    in.tracks = tracks;
    in.anchors = anchors;
    in.poses = poses;
    in.K = K;
    return in;
  }
};

inline ScalarField normalized_depth(const RenderOutput& r) {
  ScalarField d(r.depth.width, r.depth.height, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = r.opacity[i] > 0.5 ? r.depth[i] / r.opacity[i] : 0.0;
  return d;
}

/// `dynamic_threshold` is the dynamic-only opacity above which a pixel is
/// labelled dynamic; 0 labels the whole footprint support.
inline MiniScene make_mini_scene(std::uint64_t seed, int dynamics = 3, double dynamic_threshold = 0.0,
                                 double perturb = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> n(0, 1);
  MiniScene s;
  const int T = 3;

  for (int i = 0; i < 4; ++i) {
    ScaffoldNode node;
    const Vec3 p = Vec3(i % 2 ? 0.12 : -0.12, i / 2 ? 0.12 : -0.12, 1.5) + random_vec3(rng, -0.02, 0.02);
    for (int t = 0; t < T; ++t) {
      const RigidPose m = RigidPose::from_axis_angle(Vec3(0, 0, 0.06 * t), Vec3(0.04 * t, -0.02 * t, 0.01 * t));
      RigidPose q = m * RigidPose::from_translation(p);
      q.translation += random_vec3(rng, -0.004, 0.004) * double(t > 0);
      node.transforms.push_back(q);
    }
    node.observed.assign(std::size_t(T), 1);
    node.track_id = std::uint64_t(i);
    s.graph.nodes.push_back(node);
  }
  build_topology(s.graph, 3);
  init_radii(s.graph, 2);

  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      const Vec3 mean(-1.0 + 0.5 * x, -1.0 + 0.5 * y, 3.0 + 0.05 * u(rng));
      Gaussian3D g = Gaussian3D::make(mean, Quat::Identity(), Vec3(0.22, 0.22, 0.03), 0.95,
                                      Vec3(u(rng), u(rng), u(rng)), s.truth.next_static_id++);
      s.truth.statics.push_back(g);
      s.truth.anchors.push_back({0, Vec2::Zero()});
    }
  for (int k = 0; k < dynamics; ++k) {
    DynamicGaussian dg;
    const Vec3 mean = Vec3(0, 0, 1.5) + random_vec3(rng, -0.08, 0.08);
    dg.canonical = Gaussian3D::make(mean, random_quat(rng), Vec3(0.06, 0.05, 0.04), 0.8,
                                    Vec3(u(rng), u(rng), u(rng)), s.truth.next_dynamic_id++);
    dg.t_ref = 0;
    dg.nodes = skinning_neighborhood(mean, s.graph, 0);
    dg.dw.assign(dg.nodes.size(), 0.0);
    s.truth.dynamics.push_back(dg);
  }

  for (int t = 0; t < T; ++t) s.poses.push_back(RigidPose::from_axis_angle(Vec3(0, 0.01 * t, 0), Vec3(0.03 * t, 0, 0)));

  GaussianMap dyn_only = s.truth;
  dyn_only.statics.clear();
  dyn_only.anchors.clear();
  for (int t = 0; t < T; ++t) {
    const RenderOutput r = render_map(s.truth, s.graph, s.poses[std::size_t(t)], s.K, t);
    const RenderOutput rd = render_map(dyn_only, s.graph, s.poses[std::size_t(t)], s.K, t);
    TrainingView v;
    v.frame = t;
    v.pose = s.poses[std::size_t(t)];
    v.image = r.color;
    v.depth = DepthMap::from_field(normalized_depth(r), t);
    v.dynamic = Mask(s.K.width, s.K.height, 0);
    for (std::size_t i = 0; i < v.dynamic.size(); ++i) v.dynamic[i] = rd.opacity[i] > dynamic_threshold;
    s.views.push_back(std::move(v));
  }

  for (std::size_t k = 0; k < s.truth.dynamics.size(); ++k) {
    const DynamicGaussian& dg = s.truth.dynamics[k];
    Track2D tr;
    tr.id = k;
    for (int t = 0; t < T; ++t) {
      const Vec3 X = warp_point(dg.canonical.mean, s.graph, 0, t).apply(dg.canonical.mean);
      tr.positions.push_back(project(s.poses[std::size_t(t)], s.K, X).pixel);
      tr.visible.push_back(1);
    }
    s.tracks.push_back(tr);
    s.anchors.push_back({k, 0, dg.canonical.mean, dg.nodes});
  }

  s.map = s.truth;
  for (Gaussian3D& g : s.map.statics) {
    g.color += 0.08 * perturb * Vec3(n(rng), n(rng), n(rng));
    g.mean += 0.02 * perturb * Vec3(n(rng), n(rng), n(rng));
    g.opacity_logit += 0.2 * perturb * n(rng);
  }
  for (DynamicGaussian& dg : s.map.dynamics) {
    dg.canonical.color += 0.08 * perturb * Vec3(n(rng), n(rng), n(rng));
    dg.canonical.mean += 0.01 * perturb * Vec3(n(rng), n(rng), n(rng));
    dg.canonical.log_scale += 0.1 * perturb * Vec3(n(rng), n(rng), n(rng));
    for (double& w : dg.dw) w = 0.05 * perturb * u(rng);
  }
  return s;
}

}  // namespace dynrecon::testing
