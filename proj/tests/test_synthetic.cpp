#include <doctest.h>

#include <cmath>

#include "dynrecon/synthetic.hpp"
#include "scene_support.hpp"

using namespace dynrecon;
using namespace dynrecon::testing;

namespace {

Dataset desk(int frames, int movers, double fraction, std::uint64_t seed) {
  DeskSceneParams p;
  p.frames = frames;
  p.movers = movers;
  p.dynamic_fraction = fraction;
  return generate(make_desk_scene(p, seed), seed);
}

Vec2 project_into(const Dataset& d, int t, const Vec3& X) {
  const Vec3 c = d.poses[std::size_t(t)].rotation.conjugate() * (X - d.poses[std::size_t(t)].translation);
  return {d.K().fx * c.x() / c.z() + d.K().cx, d.K().fy * c.y() / c.z() + d.K().cy};
}

Vec3 lift(const Dataset& d, int t, int x, int y) {
  const double z = d.depths[std::size_t(t)](x, y);
  const Vec3 c((x - d.K().cx) / d.K().fx * z, (y - d.K().cy) / d.K().fy * z, z);
  return d.poses[std::size_t(t)].rotation * c + d.poses[std::size_t(t)].translation;
}

}  // namespace

TEST_CASE("generate: static scenes have empty dynamic masks; output is deterministic") {
  const Dataset a = desk(4, 0, 0.0, 3);
  for (const Mask& m : a.dynamic_masks) CHECK(count_nonzero(m) == 0);
  const Dataset b = desk(4, 1, 0.15, 9);
  const Dataset c = desk(4, 1, 0.15, 9);
  for (int t = 0; t < 4; ++t) {
    CHECK(b.images[std::size_t(t)] == c.images[std::size_t(t)]);
    CHECK(b.depths[std::size_t(t)] == c.depths[std::size_t(t)]);
    CHECK(b.dynamic_masks[std::size_t(t)] == c.dynamic_masks[std::size_t(t)]);
  }
  const double frac = double(count_nonzero(b.dynamic_masks[0])) / double(b.dynamic_masks[0].size());
  CHECK(frac > 0.08);
  CHECK(frac < 0.25);
  for (const auto& px : b.images[0].data) CHECK((px.array() >= 0).all());
}

TEST_CASE("generate: movers occlude the background in the depth maps") {
  const Dataset d = desk(3, 1, 0.15, 4);
  SceneSpec bare = d.spec;
  bare.movers.clear();
  std::size_t checked = 0;
  for (int y = 0; y < d.K().height; ++y)
    for (int x = 0; x < d.K().width; ++x) {
      if (!d.dynamic_masks[0](x, y)) continue;
      const SurfaceHit behind = ray_cast(bare, 0, Vec2(x, y));
      REQUIRE(behind.instance == 0);
      CHECK(d.depths[0](x, y) < behind.depth);
      ++checked;
    }
  CHECK(checked > 100);
}

TEST_CASE("oracle_flow: exact correspondences, occlusion gives zero confidence") {
  const Dataset d = desk(6, 1, 0.15, 5);
  const FlowObservation f = oracle_flow(d, 0, 4, 0.0, 1);
  std::size_t dyn = 0, occluded = 0;
  for (int y = 0; y < d.K().height; ++y)
    for (int x = 0; x < d.K().width; ++x) {
      const double conf = f.confidence(x, y);
      CHECK((conf == 0.0 || conf == 1.0));
      const SurfaceHit hit = ray_cast(d.spec, 0, Vec2(x, y));
      const Vec2 expect = project_into(d, 4, surface_point(d.spec, hit, 4));
      CHECK((f.predicted(x, y) - expect).norm() < 1e-9);
      if (hit.instance == 0) {
        // static: the world point does not move
        CHECK((project_into(d, 4, lift(d, 0, x, y)) - f.predicted(x, y)).norm() < 1e-6);
      } else {
        ++dyn;
      }
      if (conf == 0) {
        ++occluded;
        const Vec2 q = f.predicted(x, y);
        const bool inside = q.x() >= -0.5 && q.y() >= -0.5 && q.x() < d.K().width - 0.5 && q.y() < d.K().height - 0.5;
        if (inside) {
          const SurfaceHit there = ray_cast(d.spec, 4, q);
          const double z = (d.poses[4].rotation.conjugate() * (surface_point(d.spec, hit, 4) - d.poses[4].translation)).z();
          CHECK((there.instance != hit.instance || std::abs(there.depth - z) > 1e-7 * z));
        }
      }
    }
  CHECK(dyn > 0);
  CHECK(occluded > 0);

  const FlowObservation noisy = oracle_flow(d, 0, 4, 0.5, 1);
  double mean_dev = 0;
  for (std::size_t i = 0; i < f.predicted.size(); ++i) {
    mean_dev += (noisy.predicted[i] - f.predicted[i]).squaredNorm();
    CHECK(noisy.confidence[i] <= 1.0);
    CHECK(noisy.confidence[i] >= 0.0);
  }
  mean_dev /= 2.0 * double(f.predicted.size());
  CHECK(std::sqrt(mean_dev) == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("oracle flow and tracks compose along a chain") {
  const Dataset d = desk(7, 1, 0.15, 8);
  const FlowObservation ij = oracle_flow(d, 0, 3, 0.0, 1), ik = oracle_flow(d, 0, 6, 0.0, 1);
  std::size_t checked = 0;
  for (int y = 2; y < d.K().height; y += 5)
    for (int x = 2; x < d.K().width; x += 5) {
      if (ij.confidence(x, y) == 0 || ik.confidence(x, y) == 0) continue;
      const TrackQuery q{3, ij.predicted(x, y)};
      const auto tr = oracle_tracks(d, std::span<const TrackQuery>(&q, 1), 0, 7, 0.0, 1);
      CHECK((tr[0].positions[6] - ik.predicted(x, y)).norm() < 1e-6);
      ++checked;
    }
  CHECK(checked > 30);
}

TEST_CASE("oracle_tracks: static reprojection, occlusion, dropout") {
  const Dataset d = desk(10, 1, 0.2, 2);
  std::vector<TrackQuery> qs;
  for (int y = 1; y < d.K().height; y += 3)
    for (int x = 1; x < d.K().width; x += 3) qs.push_back({0, Vec2(x, y)});
  const auto tracks = oracle_tracks(d, qs, 0, 10, 0.0, 1);
  std::size_t hidden = 0;
  for (std::size_t k = 0; k < qs.size(); ++k) {
    const int x = int(qs[k].pixel.x()), y = int(qs[k].pixel.y());
    CHECK(tracks[k].visible[0] == 1);
    for (int t = 0; t < 10; ++t) {
      const SurfaceHit hit = ray_cast(d.spec, 0, qs[k].pixel);
      const Vec3 X = surface_point(d.spec, hit, t);
      if (hit.instance == 0) CHECK((tracks[k].positions[std::size_t(t)] - project_into(d, t, lift(d, 0, x, y))).norm() < 1e-6);
      // visibility equals the ray-cast occlusion test at the projection
      const Vec2 p = project_into(d, t, X);
      bool vis = p.x() >= -0.5 && p.y() >= -0.5 && p.x() < d.K().width - 0.5 && p.y() < d.K().height - 0.5;
      if (vis) {
        const SurfaceHit there = ray_cast(d.spec, t, p);
        const double z = (d.poses[std::size_t(t)].rotation.conjugate() * (X - d.poses[std::size_t(t)].translation)).z();
        vis = there.instance == hit.instance && std::abs(there.depth - z) <= 1e-7 * std::max(1.0, z);
      }
      CHECK(tracks[k].visible[std::size_t(t)] == (vis ? 1 : 0));
      hidden += vis ? 0 : 1;
    }
  }
  CHECK(hidden > 0);

  const auto dropped = oracle_tracks(d, qs, 0, 10, 0.5, 1);
  std::size_t kept = 0, total = 0;
  for (std::size_t k = 0; k < qs.size(); ++k) {
    CHECK(dropped[k].visible[0] == 1);
    for (int t = 1; t < 10; ++t) {
      if (dropped[k].visible[std::size_t(t)]) CHECK(tracks[k].visible[std::size_t(t)]);
      if (tracks[k].visible[std::size_t(t)]) {
        ++total;
        kept += dropped[k].visible[std::size_t(t)];
      }
    }
  }
  CHECK(double(kept) / double(total) == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("oracle_monodepth: identity and hidden affine") {
  const Dataset d = desk(2, 1, 0.15, 6);
  const DepthMap id = oracle_monodepth(d, 1, 1.0, 0.0, 0.0, 1);
  CHECK(id.depth == d.depths[1]);
  const DepthMap mono = oracle_monodepth(d, 1, 2.0, 1.0, 0.0, 1);
  auto [fit, aligned] = align_mono_depth(mono, DepthMap::from_field(d.depths[1], 1));
  CHECK(std::abs(fit.scale - 0.5) < 1e-6);
  CHECK(std::abs(fit.shift + 0.5) < 1e-6);

  const double sigma = 0.01;
  const DepthMap noisy = oracle_monodepth(d, 1, 2.0, 1.0, sigma, 3);
  auto [nfit, naligned] = align_mono_depth(noisy, DepthMap::from_field(d.depths[1], 1));
  CHECK(std::abs(nfit.scale - 0.5) < 3 * sigma);
  CHECK(std::abs(nfit.shift + 0.5) < 3 * sigma * 3);
}

TEST_CASE("invalid scene specs are rejected") {
  DeskSceneParams p;
  p.movers = 3;
  CHECK_THROWS_AS(make_desk_scene(p, 1), Error);
  SceneSpec s = make_desk_scene(DeskSceneParams{}, 1);
  s.camera.pop_back();
  try {
    generate(s, 1);
    FAIL("expected InvalidSpec");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidSpec);
  }
  s = make_desk_scene(DeskSceneParams{}, 1);
  s.noise.flow_sigma = -1;
  CHECK_THROWS_AS(s.validate(), Error);
}
