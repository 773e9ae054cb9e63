#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "dynrecon/reconstruction.hpp"
#include "map_support.hpp"

using namespace dynrecon;
using namespace dynrecon::testing;

namespace {

const PinholeIntrinsics kK{20, 20, 7.5, 7.5, 16, 16};

TrainingView plane_view(const RigidPose& pose, double z, int frame = 0) {
  TrainingView v;
  v.frame = frame;
  v.pose = pose;
  v.image = RgbImage(kK.width, kK.height, Vec3(0.3, 0.5, 0.7));
  v.depth = DepthMap::from_field(ScalarField(kK.width, kK.height, z), frame);
  v.dynamic = Mask(kK.width, kK.height, 0);
  return v;
}

// Parameters addressed uniformly for finite differences.
struct Param {
  std::function<double&(GaussianMap&, ScaffoldGraph&)> ref;
  std::function<double(const MapGradient&)> grad;
};

double& gparam(Gaussian3D& g, int k) {
  if (k < 3) return g.mean[k];
  if (k == 3) return g.rotation.w();
  if (k < 7) return g.rotation.vec()[k - 4];
  if (k < 10) return g.log_scale[k - 7];
  if (k == 10) return g.opacity_logit;
  return g.color[k - 11];
}

double ggrad(const GaussianGradient& gr, int k) {
  if (k < 3) return gr.mean[k];
  if (k < 7) return gr.rotation[k - 3];
  if (k < 10) return gr.log_scale[k - 7];
  if (k == 10) return gr.opacity_logit;
  return gr.color[k - 11];
}

std::vector<Param> all_params(const MiniScene& s) {
  std::vector<Param> ps;
  for (std::size_t i = 0; i < s.map.statics.size(); ++i)
    for (int k = 0; k < 14; ++k)
      ps.push_back({[i, k](GaussianMap& m, ScaffoldGraph&) -> double& { return gparam(m.statics[i], k); },
                    [i, k](const MapGradient& g) { return ggrad(g.statics[i], k); }});
  for (std::size_t i = 0; i < s.map.dynamics.size(); ++i) {
    for (int k = 0; k < 14; ++k)
      ps.push_back({[i, k](GaussianMap& m, ScaffoldGraph&) -> double& { return gparam(m.dynamics[i].canonical, k); },
                    [i, k](const MapGradient& g) { return ggrad(g.dynamics[i], k); }});
    for (std::size_t j = 0; j < s.map.dynamics[i].dw.size(); ++j)
      ps.push_back({[i, j](GaussianMap& m, ScaffoldGraph&) -> double& { return m.dynamics[i].dw[j]; },
                    [i, j](const MapGradient& g) { return g.dw[i][j]; }});
  }
  for (int m = 0; m < int(s.graph.nodes.size()); ++m)
    for (int t = 0; t < s.graph.timesteps(); ++t)
      for (int c = 0; c < 3; ++c)
        ps.push_back(
            {[m, t, c](GaussianMap&, ScaffoldGraph& g) -> double& {
               return g.nodes[std::size_t(m)].transforms[std::size_t(t)].translation[c];
             },
             [m, t, c](const MapGradient& g) { return const_cast<ScaffoldGradient&>(g.scaffold).dt(m, t)[c]; }});
  return ps;
}

double max_param_change(const GaussianMap& a, const GaussianMap& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.statics.size(); ++i)
    for (int k = 0; k < 14; ++k)
      worst = std::max(worst, std::abs(gparam(const_cast<Gaussian3D&>(a.statics[i]), k) -
                                       gparam(const_cast<Gaussian3D&>(b.statics[i]), k)));
  for (std::size_t i = 0; i < a.dynamics.size(); ++i) {
    for (int k = 0; k < 14; ++k)
      worst = std::max(worst, std::abs(gparam(const_cast<Gaussian3D&>(a.dynamics[i].canonical), k) -
                                       gparam(const_cast<Gaussian3D&>(b.dynamics[i].canonical), k)));
    for (std::size_t j = 0; j < a.dynamics[i].dw.size(); ++j)
      worst = std::max(worst, std::abs(a.dynamics[i].dw[j] - b.dynamics[i].dw[j]));
  }
  return worst;
}

}  // namespace

TEST_CASE("mask_loss examples") {
  const ScalarField zero(8, 8, 0.0);
  Mask half(8, 8, 0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 4; ++x) half(x, y) = 1;
  CHECK(mask_loss(zero, half) == 0.0);
  CHECK(mask_loss(ScalarField(8, 8, 0.5), half) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(mask_loss(ScalarField(8, 8, 0.5), Mask(8, 8, 1)) == 0.0);

  ScalarField o(8, 8, 0.0), g;
  o(6, 2) = 0.4;
  CHECK(mask_loss(o, half, &g) == doctest::Approx(0.4 / 32));
  CHECK(g(6, 2) == doctest::Approx(1.0 / 32));
  CHECK(g(1, 1) == 0.0);
  CHECK_THROWS_AS(mask_loss(ScalarField(4, 4, 0.0), half), Error);
}

TEST_CASE("mask_loss vanishes iff dynamic opacity is zero on static pixels") {
  MiniScene s = make_mini_scene(3);
  GaussianMap dyn = s.truth;
  dyn.statics.clear();
  dyn.anchors.clear();
  const RenderOutput r = render_map(dyn, s.graph, s.poses[0], s.K, 0);
  Mask support(s.K.width, s.K.height, 0);
  for (std::size_t i = 0; i < support.size(); ++i) support[i] = r.opacity[i] > 0;
  CHECK(mask_loss(r.opacity, support) <= 1e-12);
  Mask shrunk = support;
  for (std::size_t i = 0; i < shrunk.size(); ++i)
    if (shrunk[i]) {
      shrunk[i] = 0;
      break;
    }
  CHECK(mask_loss(r.opacity, shrunk) > 1e-12);
}

TEST_CASE("track_loss examples") {
  MiniScene s = make_mini_scene(5, 1);
  std::vector<int> frames{0, 1, 2};
  CHECK(track_loss(s.graph, s.anchors, s.tracks, s.poses, s.K, frames) < 1e-20);

  std::vector<Track2D> off = s.tracks;
  off[0].positions[1].x() += 1.0;
  const std::vector<int> one{1};
  CHECK(track_loss(s.graph, s.anchors, off, s.poses, s.K, one) == doctest::Approx(0.5).epsilon(1e-9));
  off[0].positions[1].x() += 2.0;  // 3 px, linear branch: 2·(3 − 1)
  CHECK(track_loss(s.graph, s.anchors, off, s.poses, s.K, one) == doctest::Approx(4.0).epsilon(1e-9));
  off[0].visible[1] = 0;
  CHECK(track_loss(s.graph, s.anchors, off, s.poses, s.K, one) == 0.0);
}

TEST_CASE("init_static seeds only static pixels with valid depth") {
  GaussianMap map;
  TrainingView v = plane_view(RigidPose::identity(), 2.0);
  v.dynamic = Mask(kK.width, kK.height, 1);
  std::vector<TrainingView> views{v};
  CHECK_THROWS_WITH_AS(init_static(map, views, kK), doctest::Contains("NoStaticPixels"), Error);

  std::mt19937_64 rng(4);
  const RigidPose pose = random_pose(rng, 0.5);
  TrainingView p = plane_view(pose, 2.0);
  for (int y = 0; y < kK.height; ++y)
    for (int x = 0; x < 6; ++x) p.dynamic(x, y) = 1;
  Mask skip(kK.width, kK.height, 0);
  skip(10, 10) = 1;
  std::vector<TrainingView> pv{p};
  std::vector<Mask> sk{skip};
  init_static(map, pv, kK, sk);
  REQUIRE(!map.statics.empty());
  CHECK(map.statics.size() == map.anchors.size());
  for (std::size_t i = 0; i < map.statics.size(); ++i) {
    const Vec2 px = map.anchors[i].pixel;
    CHECK(p.dynamic(int(px.x()), int(px.y())) == 0);
    CHECK(!(px.x() == 10 && px.y() == 10));
    CHECK(int(px.x()) % 2 == 0);
    CHECK(std::abs(pose.apply_inverse(map.statics[i].mean).z() - 2.0) < 1e-9);  // on the plane
    CHECK(map.statics[i].opacity() == doctest::Approx(0.1));
    CHECK((map.statics[i].id & kDynamicIdBit) == 0);
  }
  CHECK(map.statics.size() == 5 * 8 - 1);
}

TEST_CASE("init_dynamic seeds backprojected masked pixels") {
  MiniScene s = make_mini_scene(6);
  GaussianMap map;
  TrainingView v = plane_view(s.poses[1], 1.6, 1);
  std::vector<TrainingView> views{v};
  std::vector<Mask> none{Mask(kK.width, kK.height, 0)};
  CHECK(init_dynamic(map, views, none, s.graph, kK) == 0);
  CHECK(map.dynamics.empty());
  CHECK_THROWS_AS(init_dynamic(map, views, std::vector<Mask>{}, s.graph, kK), Error);

  Mask sel(kK.width, kK.height, 0);
  for (int y = 6; y < 10; ++y)
    for (int x = 6; x < 10; ++x) sel(x, y) = 1;
  std::vector<Mask> select{sel};
  CHECK(init_dynamic(map, views, select, s.graph, kK) == 4);
  for (const DynamicGaussian& dg : map.dynamics) {
    CHECK(dg.t_ref == 1);
    CHECK(std::all_of(dg.dw.begin(), dg.dw.end(), [](double w) { return w == 0.0; }));
    CHECK(dg.nodes == skinning_neighborhood(dg.canonical.mean, s.graph, 1));
    CHECK((dg.canonical.id & kDynamicIdBit) != 0);
    const Projection pr = project(v.pose, kK, dg.canonical.mean);
    const Vec2 px(std::round(pr.pixel.x()), std::round(pr.pixel.y()));
    CHECK((backproject(v.pose, kK, px, 1.0 / 1.6) - dg.canonical.mean).norm() < 1e-9);
  }
  CHECK_NOTHROW(map.validate(s.graph));
}

TEST_CASE("full loss gradient matches finite differences") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    MiniScene s = make_mini_scene(seed);
    const LossInputs in = s.inputs();
    LossWeights w;
    MapGradient grad;
    evaluate_losses(s.map, s.graph, in, w, &grad);
    auto params = all_params(s);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < params.size(); ++i)
      if (std::abs(params[i].grad(grad)) > 1e-6) live.push_back(i);
    std::shuffle(live.begin(), live.end(), rng);
    REQUIRE(live.size() >= 10);
    const double eps = 1e-6;
    double worst = 0;
    for (std::size_t k = 0; k < 10; ++k) {
      const Param& p = params[live[k]];
      GaussianMap mp = s.map, mm = s.map;
      ScaffoldGraph gp = s.graph, gm = s.graph;
      p.ref(mp, gp) += eps;
      p.ref(mm, gm) -= eps;
      const double fd = (evaluate_losses(mp, gp, in, w).total - evaluate_losses(mm, gm, in, w).total) / (2 * eps);
      const double an = p.grad(grad);
      const double err = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3});
      if (std::abs(an - fd) > 1e-6) worst = std::max(worst, err);
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("photometric_step leaves a converged scene in place") {
  MiniScene s = make_mini_scene(21);
  s.map = s.truth;
  const LossInputs in = s.inputs();
  const LossWeights w;
  OptimizerState st;
  const LossReport before = evaluate_losses(s.map, s.graph, in, w);
  CHECK(before.rgb == 0.0);
  CHECK(before.mask == 0.0);
  GaussianMap map = s.map;
  ScaffoldGraph graph = s.graph;
  photometric_step(map, graph, in, w, st);
  CHECK(max_param_change(map, s.map) < 1e-6);
  const LossReport after = evaluate_losses(map, graph, in, w);
  CHECK(std::abs(after.total - before.total) < 1e-8);
}

TEST_CASE("photometric optimization decreases the loss in 10-step windows") {
  MiniScene s = make_mini_scene(22);
  const LossInputs in = s.inputs();
  OptimizerState st;
  st.rates.mean = 5e-5;  // the desk default overshoots on this 16 px scene
  MapOptimizeOptions o;
  o.steps = 200;
  o.views_per_step = 3;
  o.prune_every = 0;
  const auto trace = optimize_map(s.map, s.graph, in, st, o);
  REQUIRE(trace.size() == 200);
  double prev = 1e300;
  for (int w = 0; w < 20; ++w) {
    double mean = 0;
    for (int k = 0; k < 10; ++k) mean += trace[std::size_t(10 * w + k)].total / 10;
    CHECK(mean < prev);
    prev = mean;
  }
  CHECK(trace.back().total < 0.5 * trace.front().total);
  CHECK_NOTHROW(s.map.validate(s.graph));
  for (const Gaussian3D& g : s.map.statics) CHECK((g.id & kDynamicIdBit) == 0);
  for (const DynamicGaussian& d : s.map.dynamics) CHECK((d.canonical.id & kDynamicIdBit) != 0);
}

TEST_CASE("non-finite loss aborts the step and halves the learn rate") {
  MiniScene s = make_mini_scene(23);
  s.map.statics[12].color.x() = std::nan("");
  const GaussianMap before = s.map;
  OptimizerState st;
  CHECK_THROWS_WITH_AS(photometric_step(s.map, s.graph, s.inputs(), LossWeights{}, st),
                       doctest::Contains("NonFiniteLoss"), Error);
  CHECK(st.lr_scale == 0.5);
  CHECK(s.map.statics[5].mean == before.statics[5].mean);
}

TEST_CASE("prune_transparent drops low-opacity Gaussians and their slots") {
  MiniScene s = make_mini_scene(24);
  OptimizerState st;
  photometric_step(s.map, s.graph, s.inputs(), LossWeights{}, st);
  s.map.statics[3].opacity_logit = logit(0.001);
  s.map.dynamics[1].canonical.opacity_logit = logit(0.001);
  const std::size_t ns = s.map.statics.size(), nd = s.map.dynamics.size();
  CHECK(prune_transparent(s.map, st, 0.005) == 2);
  CHECK(s.map.statics.size() == ns - 1);
  CHECK(s.map.anchors.size() == ns - 1);
  CHECK(s.map.dynamics.size() == nd - 1);
  CHECK(st.statics.size() == ns - 1);
  CHECK(st.dynamics.size() == nd - 1);
}

TEST_CASE("deform_static re-anchors statics on pose and depth updates") {
  std::mt19937_64 rng(31);
  std::vector<RigidPose> poses{random_pose(rng, 0.3), random_pose(rng, 0.3)};
  std::vector<DepthMap> depths;
  std::vector<TrainingView> views;
  for (int f = 0; f < 2; ++f) {
    views.push_back(plane_view(poses[std::size_t(f)], 2.0 + 0.5 * f, f));
    depths.push_back(views.back().depth);
  }
  GaussianMap map;
  init_static(map, views, kK);
  const auto original = map.statics;

  auto statics = original;
  deform_static(statics, map.anchors, poses, depths, poses, depths);
  for (std::size_t i = 0; i < statics.size(); ++i) CHECK(statics[i].mean == original[i].mean);

  // global similarity of the trajectory and depths
  const double sc = 1.7;
  const RigidPose S = random_pose(rng, 1.0);
  std::vector<RigidPose> sim_poses;
  std::vector<DepthMap> sim_depths;
  for (int f = 0; f < 2; ++f) {
    RigidPose p = S * poses[std::size_t(f)];
    p.translation = S.rotation * (sc * poses[std::size_t(f)].translation) + S.translation;
    sim_poses.push_back(p);
    DepthMap d = depths[std::size_t(f)];
    for (double& z : d.depth.data) z *= sc;
    sim_depths.push_back(d);
  }
  statics = original;
  deform_static(statics, map.anchors, poses, depths, sim_poses, sim_depths);
  double worst = 0;
  for (std::size_t i = 0; i < statics.size(); ++i)
    worst = std::max(worst, (statics[i].mean - (S.rotation * (sc * original[i].mean) + S.translation)).norm());
  CHECK(worst < 1e-6);

  // inverse update restores the map
  deform_static(statics, map.anchors, sim_poses, sim_depths, poses, depths);
  worst = 0;
  for (std::size_t i = 0; i < statics.size(); ++i) {
    worst = std::max(worst, (statics[i].mean - original[i].mean).norm());
    worst = std::max(worst, (statics[i].log_scale - original[i].log_scale).norm());
    worst = std::max(worst, (statics[i].rotation.coeffs() - original[i].rotation.coeffs()).norm());
  }
  CHECK(worst < 1e-9);

  // doubled anchor depth moves Gaussians along their rays
  std::vector<DepthMap> doubled = depths;
  for (double& z : doubled[0].depth.data) z *= 2;
  statics = original;
  deform_static(statics, map.anchors, poses, depths, poses, doubled);
  for (std::size_t i = 0; i < statics.size(); ++i) {
    if (map.anchors[i].frame != 0) {
      CHECK(statics[i].mean == original[i].mean);
      continue;
    }
    const Vec3 c0 = poses[0].apply_inverse(original[i].mean), c1 = poses[0].apply_inverse(statics[i].mean);
    CHECK((c1 - 2 * c0).norm() < 1e-9);
  }

  std::vector<StaticAnchor> bad = map.anchors;
  bad[0].frame = 7;
  statics = original;
  CHECK_THROWS_WITH_AS(deform_static(statics, bad, poses, depths, poses, depths), doctest::Contains("MissingAnchor"),
                       Error);
}

TEST_CASE("GaussianMap::validate catches overlapping ids and bad neighbourhoods") {
  MiniScene s = make_mini_scene(41);
  CHECK_NOTHROW(s.map.validate(s.graph));
  GaussianMap bad = s.map;
  bad.statics[0].id |= kDynamicIdBit;
  CHECK_THROWS_AS(bad.validate(s.graph), Error);
  bad = s.map;
  bad.dynamics[0].nodes[0] = 99;
  CHECK_THROWS_AS(bad.validate(s.graph), Error);
}
