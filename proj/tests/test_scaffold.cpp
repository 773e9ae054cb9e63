#include <doctest.h>

#include <cmath>
#include <random>

#include "dynrecon/scaffold.hpp"
#include "test_support.hpp"

using namespace dynrecon;
using namespace dynrecon::testing;

namespace {

const PinholeIntrinsics kK{40, 40, 15.5, 11.5, 32, 24};

// Nodes on a jittered grid with per-timestep transforms Q_t = G_t ∘ Q_0.
ScaffoldGraph grid_graph(int T, const std::vector<RigidPose>& motion, std::uint64_t seed, bool random_rot = false) {
  std::mt19937_64 rng(seed);
  ScaffoldGraph g;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      ScaffoldNode n;
      const Vec3 p = Vec3(0.3 * i, 0.3 * j, 2.0 + 0.1 * ((i + j) % 2)) + random_vec3(rng, -0.03, 0.03);
      const RigidPose q0{random_rot ? random_quat(rng) : Quat::Identity(), p};
      for (int t = 0; t < T; ++t) n.transforms.push_back(motion[std::size_t(t)] * q0);
      n.observed.assign(std::size_t(T), 1);
      n.track_id = std::uint64_t(i * 3 + j);
      g.nodes.push_back(n);
    }
  build_topology(g, 4);
  init_radii(g);
  return g;
}

std::vector<RigidPose> random_motion(int T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<RigidPose> m;
  for (int t = 0; t < T; ++t) m.push_back(random_pose(rng, 0.5));
  return m;
}

double scalar_loss(const RigidPose& r, const Vec4& a, const Vec3& b) { return quat_wxyz(r.rotation).dot(a) + r.translation.dot(b); }

}  // namespace

TEST_CASE("lift_tracks: static point, gap interpolation, invisible track") {
  // camera moves, point fixed at world (0.1, -0.05, 2)
  const Vec3 X(0.1, -0.05, 2.0);
  std::vector<RigidPose> poses{RigidPose::identity(), RigidPose::from_translation({0.05, 0, 0}),
                               RigidPose::from_axis_angle({0, 0.02, 0}, {0.1, 0.01, 0})};
  std::vector<DepthMap> depths;
  Track2D tr;
  for (const auto& p : poses) {
    const Vec3 c = p.apply_inverse(X);
    DepthMap d;
    d.depth = ScalarField(kK.width, kK.height, c.z());
    d.valid = Mask(kK.width, kK.height, 1);
    depths.push_back(d);
    tr.positions.push_back(Vec2(kK.fx * c.x() / c.z() + kK.cx, kK.fy * c.y() / c.z() + kK.cy));
    tr.visible.push_back(1);
  }
  const auto lifted = lift_tracks(std::span<const Track2D>(&tr, 1), poses, depths, {}, kK);
  for (const Vec3& p : lifted[0].positions) CHECK((p - X).norm() < 1e-6);

  Track3D gap;
  gap.positions = {Vec3(0, 0, 1), Vec3(9, 9, 9), Vec3(0, 0, 3)};
  gap.visible = {1, 0, 1};
  fill_track_gaps(gap);
  CHECK((gap.positions[1] - Vec3(0, 0, 2)).norm() < 1e-15);

  Track2D never = tr;
  never.visible.assign(3, 0);
  try {
    lift_tracks(std::span<const Track2D>(&never, 1), poses, depths, {}, kK);
    FAIL("expected NoVisibleTimestep");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoVisibleTimestep);
  }
}

TEST_CASE("sample_nodes: separation, small inputs") {
  std::mt19937_64 rng(2);
  std::vector<Track3D> tracks;
  for (int c = 0; c < 4; ++c) {
    const Vec3 center = random_vec3(rng, -1, 1);
    for (int k = 0; k < 25; ++k) {
      Track3D t;
      t.id = std::uint64_t(tracks.size());
      t.positions.assign(3, center + random_vec3(rng, -0.2, 0.2));
      t.visible.assign(3, 1);
      tracks.push_back(t);
    }
  }
  const double sep = 0.1;
  const ScaffoldGraph g = sample_nodes(tracks, 10, sep);
  CHECK(g.nodes.size() == 10);
  for (std::size_t a = 0; a < g.nodes.size(); ++a)
    for (std::size_t b = a + 1; b < g.nodes.size(); ++b)
      CHECK((g.position(int(a), 0) - g.position(int(b), 0)).norm() >= sep);
  for (std::size_t m = 0; m < g.neighbors.size(); ++m) {
    CHECK(!g.neighbors[m].empty());
    for (int n : g.neighbors[m]) {
      const auto& back = g.neighbors[std::size_t(n)];
      CHECK(std::find(back.begin(), back.end(), int(m)) != back.end());
    }
    CHECK(g.nodes[m].radius > 0);
    CHECK(g.nodes[m].transforms[1].rotation.coeffs() == Quat::Identity().coeffs());
  }

  const std::vector<Track3D> five(tracks.begin(), tracks.begin() + 5);
  CHECK(sample_nodes(five, 10, 0.0).nodes.size() == 5);
  const std::vector<Track3D> one(tracks.begin(), tracks.begin() + 1);
  CHECK(sample_nodes(one, 10, 0.0).nodes.size() == 1);
}

TEST_CASE("skinning weights") {
  ScaffoldGraph g;
  for (double x : {0.0, 5.0, -5.0, 0.0}) {
    ScaffoldNode n;
    n.transforms = {RigidPose::from_translation({x, x == 0.0 && !g.nodes.empty() ? 5.0 : 0.0, 0})};
    n.radius = 1.0;
    g.nodes.push_back(n);
  }
  g.neighbors = {{1, 2, 3}, {0}, {0}, {0}};
  const Skinning s = skinning_weights(Vec3::Zero(), g, 0);
  CHECK(s.nodes.front() == 0);
  CHECK(s.weights.front() >= 0.99);
  double sum = 0;
  for (double w : s.weights) {
    CHECK(w >= 0);
    CHECK(w <= 1);
    sum += w;
  }
  CHECK(sum == doctest::Approx(1.0));

  ScaffoldGraph single;
  single.nodes.push_back(g.nodes[0]);
  single.neighbors = {{}};
  CHECK(skinning_weights(Vec3(0.3, 0.1, 0), single, 0).weights == std::vector<double>{1.0});

  ScaffoldGraph pair;
  pair.nodes = {g.nodes[0], g.nodes[1]};
  pair.neighbors = {{1}, {0}};
  const Skinning half = skinning_weights(Vec3(2.5, 0.7, -0.3), pair, 0);
  CHECK(half.weights[0] == doctest::Approx(0.5));
  CHECK(half.weights[1] == doctest::Approx(0.5));
}

TEST_CASE("warp_point: identity, rigid exactness, translation average") {
  const int T = 4;
  const auto motion = random_motion(T, 3);
  const ScaffoldGraph g = grid_graph(T, motion, 5, true);
  std::mt19937_64 rng(7);
  for (int k = 0; k < 20; ++k) {
    const Vec3 q = Vec3(0.3, 0.3, 2.0) + random_vec3(rng, -0.4, 0.4);
    for (int t = 0; t < T; ++t) {
      const RigidPose id = warp_point(q, g, t, t);
      CHECK(id.translation == Vec3::Zero());
      CHECK(id.rotation.coeffs() == Quat::Identity().coeffs());
    }
    const int ts = k % T, td = (k + 1) % T;
    const RigidPose expect = motion[std::size_t(td)] * motion[std::size_t(ts)].inverse();
    const RigidPose w = warp_point(q, g, ts, td);
    CHECK((w.apply(q) - expect.apply(q)).norm() < 1e-9);
    CHECK(rotation_angle_between(w.rotation, expect.rotation) < 1e-9);
  }

  ScaffoldGraph two;
  for (double x : {1.0, 3.0}) {
    ScaffoldNode n;
    n.transforms = {RigidPose::identity(), RigidPose::from_translation({x, 0, 0})};
    n.radius = 1.0;
    two.nodes.push_back(n);
  }
  two.neighbors = {{1}, {0}};
  const std::vector<int> nodes{0, 1};
  const std::vector<double> dw{0.0, 0.0};
  const RigidPose avg = warp_point(Vec3::Zero(), nodes, dw, two, 0, 1);
  CHECK((avg.translation - Vec3(2, 0, 0)).norm() < 1e-12);

  const std::vector<double> kill{-2.0, -2.0};
  try {
    warp_point(Vec3::Zero(), nodes, kill, two, 0, 1);
    FAIL("expected AllZeroWeights");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::AllZeroWeights);
  }
}

TEST_CASE("warp_backward matches central differences") {
  const int T = 3;
  const auto motion = random_motion(T, 11);
  ScaffoldGraph g = grid_graph(T, motion, 13, true);
  // break rigidity so blending is non-trivial
  std::mt19937_64 rng(17);
  for (auto& n : g.nodes)
    for (auto& q : n.transforms) q = q.retract((Eigen::Matrix<double, 6, 1>() << random_vec3(rng, -0.1, 0.1), random_vec3(rng, -0.3, 0.3)).finished());
  const Vec3 query = Vec3(0.35, 0.25, 2.05);
  const std::vector<int> nodes = skinning_neighborhood(query, g, 0);
  std::vector<double> dw(nodes.size());
  for (double& v : dw) v = std::uniform_real_distribution<double>(-0.05, 0.05)(rng);
  const Vec4 a = Vec4(0.3, -0.7, 0.5, 0.2);
  const Vec3 b = Vec3(-0.4, 0.9, 0.6);
  const int ts = 0, td = 2;

  const WarpTape tape = warp_forward(query, nodes, dw, g, ts, td);
  ScaffoldGradient grad;
  grad.reset(g);
  Vec3 dq = Vec3::Zero();
  std::vector<double> ddw(nodes.size(), 0.0);
  warp_backward(tape, a, b, g, &grad, &dq, ddw);

  auto loss = [&](const ScaffoldGraph& gg, const Vec3& q, const std::vector<double>& w) {
    return scalar_loss(warp_point(q, nodes, w, gg, ts, td), a, b);
  };
  const double h = 1e-6;
  auto rel_ok = [](double fd, double an) { return std::abs(fd - an) <= 1e-4 * std::max(std::abs(an), 1e-3); };

  for (int m : nodes)
    for (int t : {ts, td})
      for (int k = 0; k < 3; ++k) {
        ScaffoldGraph p = g, n = g;
        p.nodes[std::size_t(m)].transforms[std::size_t(t)].translation(k) += h;
        n.nodes[std::size_t(m)].transforms[std::size_t(t)].translation(k) -= h;
        const double fd = (loss(p, query, dw) - loss(n, query, dw)) / (2 * h);
        CHECK(rel_ok(fd, grad.dt(m, t)(k)));

        Vec3 e = Vec3::Zero();
        e(k) = h;
        p = g;
        n = g;
        auto& rp = p.nodes[std::size_t(m)].transforms[std::size_t(t)].rotation;
        auto& rn = n.nodes[std::size_t(m)].transforms[std::size_t(t)].rotation;
        rp = quat_exp(e) * rp;
        rn = quat_exp(-e) * rn;
        const double fdr = (loss(p, query, dw) - loss(n, query, dw)) / (2 * h);
        CHECK(rel_ok(fdr, grad.dr(m, t)(k)));
      }
  for (int k = 0; k < 3; ++k) {
    Vec3 e = Vec3::Zero();
    e(k) = h;
    const double fd = (loss(g, query + e, dw) - loss(g, query - e, dw)) / (2 * h);
    CHECK(rel_ok(fd, dq(k)));
  }
  for (std::size_t k = 0; k < dw.size(); ++k) {
    auto p = dw, n = dw;
    p[k] += h;
    n[k] -= h;
    const double fd = (loss(g, query, p) - loss(g, query, n)) / (2 * h);
    CHECK(rel_ok(fd, ddw[k]));
  }
}

TEST_CASE("regularizers: zero under rigid motion and constant velocity, invariant, positive otherwise") {
  const int T = 5;
  const ScaffoldGraph rigid = grid_graph(T, random_motion(T, 21), 4, true);
  CHECK(std::abs(arap_loss(rigid)) < 1e-10);

  std::vector<RigidPose> drift;
  for (int t = 0; t < T; ++t) drift.push_back(RigidPose::from_translation(Vec3(0.1, -0.05, 0.02) * t));
  const ScaffoldGraph steady = grid_graph(T, drift, 4);
  CHECK(std::abs(arap_loss(steady)) < 1e-10);
  CHECK(std::abs(velocity_loss(steady)) < 1e-10);
  CHECK(std::abs(acceleration_loss(steady)) < 1e-10);

  const std::vector<RigidPose> still(std::size_t(T), RigidPose{});
  const ScaffoldGraph fixed = grid_graph(T, still, 4);
  CHECK(arap_loss(fixed) == 0);
  CHECK(velocity_loss(fixed) == 0);
  CHECK(acceleration_loss(fixed) == 0);

  ScaffoldGraph bumped = fixed;
  bumped.nodes[4].transforms[2].translation += Vec3(0.05, 0, 0);
  CHECK(arap_loss(bumped) > 0);
  CHECK(velocity_loss(bumped) > 0);

  // global rigid transform of the whole trajectory set
  ScaffoldGraph moved = bumped;
  const RigidPose G = RigidPose::from_axis_angle({0.3, -0.5, 0.2}, {1, 2, -1});
  for (auto& n : moved.nodes)
    for (auto& q : n.transforms) q = G * q;
  CHECK(std::abs(arap_loss(moved) - arap_loss(bumped)) < 1e-9);
  CHECK(std::abs(velocity_loss(moved) - velocity_loss(bumped)) < 1e-9);
  CHECK(std::abs(acceleration_loss(moved) - acceleration_loss(bumped)) < 1e-9);

  ScaffoldGraph quad;
  ScaffoldNode n;
  for (int t = 0; t < 4; ++t) n.transforms.push_back(RigidPose::from_translation({double(t * t), 0, 0}));
  quad.nodes.push_back(n);
  quad.neighbors = {{}};
  CHECK(acceleration_loss(quad) == doctest::Approx(4.0));

  ScaffoldGraph opposite;
  for (double s : {1.0, -1.0}) {
    ScaffoldNode o;
    for (int t = 0; t < 3; ++t) o.transforms.push_back(RigidPose::from_translation({s * t, 0, 0}));
    opposite.nodes.push_back(o);
  }
  opposite.neighbors = {{1}, {0}};
  CHECK(velocity_loss(opposite) > 0);
}

TEST_CASE("regularizer gradients match central differences") {
  const int T = 4;
  ScaffoldGraph g = grid_graph(T, random_motion(T, 2), 6, true);
  std::mt19937_64 rng(3);
  for (auto& n : g.nodes)
    for (auto& q : n.transforms) {
      q.translation += random_vec3(rng, -0.05, 0.05);
      q.rotation = quat_exp(random_vec3(rng, -0.2, 0.2)) * q.rotation;
    }
  const GeometryWeights w{0.7, 0.4, 0.3};
  ScaffoldGradient grad;
  grad.reset(g);
  geometry_loss(g, w, &grad);
  const double h = 1e-6;
  for (int m = 0; m < int(g.nodes.size()); m += 2)
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < 3; ++k) {
        ScaffoldGraph p = g, n = g;
        p.nodes[std::size_t(m)].transforms[std::size_t(t)].translation(k) += h;
        n.nodes[std::size_t(m)].transforms[std::size_t(t)].translation(k) -= h;
        const double fd = (geometry_loss(p, w) - geometry_loss(n, w)) / (2 * h);
        CHECK(std::abs(fd - grad.dt(m, t)(k)) <= 1e-4 * std::max(1e-3, std::abs(fd)));
        Vec3 e = Vec3::Zero();
        e(k) = h;
        p = g;
        n = g;
        p.nodes[std::size_t(m)].transforms[std::size_t(t)].rotation =
            quat_exp(e) * p.nodes[std::size_t(m)].transforms[std::size_t(t)].rotation;
        n.nodes[std::size_t(m)].transforms[std::size_t(t)].rotation =
            quat_exp(-e) * n.nodes[std::size_t(m)].transforms[std::size_t(t)].rotation;
        const double fdr = (geometry_loss(p, w) - geometry_loss(n, w)) / (2 * h);
        CHECK(std::abs(fdr - grad.dr(m, t)(k)) <= 1e-4 * std::max(1e-3, std::abs(fdr)));
      }
}

TEST_CASE("optimize_geometry: no free variables, hidden node recovery, observed steps untouched") {
  const int T = 5;
  std::vector<RigidPose> drift;
  for (int t = 0; t < T; ++t) drift.push_back(RigidPose::from_translation(Vec3(0.08, 0.03, -0.02) * t));
  ScaffoldGraph g = grid_graph(T, drift, 9);
  const ScaffoldGraph truth = g;

  ScaffoldGraph untouched = g;
  const GeometryReport none = optimize_geometry(untouched);
  CHECK(none.accepted == 0);
  for (std::size_t m = 0; m < g.nodes.size(); ++m)
    for (int t = 0; t < T; ++t)
      CHECK(untouched.nodes[m].transforms[std::size_t(t)].translation == g.nodes[m].transforms[std::size_t(t)].translation);

  g.nodes[4].observed[2] = 0;
  g.nodes[4].transforms[2].translation += Vec3(0.06, -0.04, 0.05);
  g.nodes[4].transforms[2].rotation = quat_exp(Vec3(0.1, 0.0, -0.1));
  const ScaffoldGraph before = g;
  const GeometryReport rep = optimize_geometry(g);
  CHECK(rep.final_loss <= rep.initial_loss);
  const double err = (g.position(4, 2) - truth.position(4, 2)).norm();
  MESSAGE("hidden node error " << err);
  CHECK(err < 1e-3);
  for (std::size_t m = 0; m < g.nodes.size(); ++m)
    for (int t = 0; t < T; ++t) {
      if (!g.nodes[m].observed[std::size_t(t)]) continue;
      CHECK(g.nodes[m].transforms[std::size_t(t)].translation == before.nodes[m].transforms[std::size_t(t)].translation);
      CHECK(g.nodes[m].transforms[std::size_t(t)].rotation.coeffs() ==
            before.nodes[m].transforms[std::size_t(t)].rotation.coeffs());
    }
}

TEST_CASE("reanchor: identity update, global similarity, depth scaling") {
  const int T = 3;
  std::vector<RigidPose> poses{RigidPose::identity(), RigidPose::from_translation({0.05, 0, 0}),
                               RigidPose::from_axis_angle({0, 0.03, 0}, {0.1, 0.02, 0})};
  const std::vector<RigidPose> still(std::size_t(T), RigidPose{});
  ScaffoldGraph g = grid_graph(T, still, 1);
  std::vector<Track2D> tracks;
  std::vector<DepthMap> depths;
  for (int t = 0; t < T; ++t) {
    DepthMap d;
    d.depth = ScalarField(kK.width, kK.height, 0.0);
    d.valid = Mask(kK.width, kK.height, 0);
    depths.push_back(d);
  }
  for (std::size_t m = 0; m < g.nodes.size(); ++m) {
    Track2D tr;
    tr.id = g.nodes[m].track_id;
    for (int t = 0; t < T; ++t) {
      const Vec3 c = poses[std::size_t(t)].apply_inverse(g.position(int(m), t));
      const Vec2 px(kK.fx * c.x() / c.z() + kK.cx, kK.fy * c.y() / c.z() + kK.cy);
      tr.positions.push_back(px);
      tr.visible.push_back(1);
      // constant depth in a small window around the pixel
      for (int dy = -1; dy <= 2; ++dy)
        for (int dx = -1; dx <= 2; ++dx) {
          const int x = int(std::floor(px.x())) + dx, y = int(std::floor(px.y())) + dy;
          if (depths[std::size_t(t)].depth.inside(x, y)) {
            depths[std::size_t(t)].depth(x, y) = c.z();
            depths[std::size_t(t)].valid(x, y) = 1;
          }
        }
    }
    tracks.push_back(tr);
  }
  const ScaffoldGraph same = reanchor(g, tracks, poses, depths, poses, depths);
  for (std::size_t m = 0; m < g.nodes.size(); ++m)
    for (int t = 0; t < T; ++t) CHECK(same.position(int(m), t) == g.position(int(m), t));

  const SimilarityTransform S{1.7, quat_exp(Vec3(0.2, -0.1, 0.3)), Vec3(0.5, -1.0, 2.0)};
  std::vector<RigidPose> new_poses;
  std::vector<DepthMap> new_depths = depths;
  for (const auto& p : poses) new_poses.push_back(S.apply(p));
  for (auto& d : new_depths)
    for (auto& v : d.depth.data) v *= S.scale;
  const ScaffoldGraph sim = reanchor(g, tracks, poses, depths, new_poses, new_depths);
  for (std::size_t m = 0; m < g.nodes.size(); ++m)
    for (int t = 0; t < T; ++t) CHECK((sim.position(int(m), t) - S.apply(g.position(int(m), t))).norm() < 1e-6);

  std::vector<DepthMap> doubled = depths;
  for (auto& v : doubled[1].depth.data) v *= 2;
  const ScaffoldGraph deep = reanchor(g, tracks, poses, depths, poses, doubled);
  for (std::size_t m = 0; m < g.nodes.size(); ++m) {
    const Vec3 c_old = poses[1].apply_inverse(g.position(int(m), 1));
    const Vec3 c_new = poses[1].apply_inverse(deep.position(int(m), 1));
    CHECK((c_new - 2 * c_old).norm() < 1e-9);
    CHECK((deep.position(int(m), 0) - g.position(int(m), 0)).norm() < 1e-12);
  }

  const std::vector<RigidPose> short_poses(poses.begin(), poses.begin() + 2);
  try {
    reanchor(g, tracks, poses, depths, short_poses, depths);
    FAIL("expected MissingUpdate");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingUpdate);
  }
}
