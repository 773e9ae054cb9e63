#include "dynrecon/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace dynrecon {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

RigidPose face_to_world(const SceneSpec& spec, int instance, int face, int t) {
  if (instance == 0) return spec.statics[std::size_t(face)].frame;
  const Mover& m = spec.movers[std::size_t(instance - 1)];
  return m.trajectory[std::size_t(t)] * m.faces[std::size_t(face)].frame;
}

bool intersect(const Rectangle& rect, const RigidPose& to_world, const Vec3& origin, const Vec3& dir, double& s,
               Vec2& uv) {
  const Vec3 o = to_world.apply_inverse(origin);
  const Vec3 d = to_world.rotation.conjugate() * dir;
  if (std::abs(d.z()) < 1e-14) return false;
  s = -o.z() / d.z();
  if (!(s > kMinDepth)) return false;
  const Vec3 p = o + s * d;
  if (std::abs(p.x()) > rect.half_extent.x() || std::abs(p.y()) > rect.half_extent.y()) return false;
  uv = p.head<2>();
  return true;
}

bool visible_at(const SceneSpec& spec, const SurfaceHit& hit, int t, Vec2& pixel) {
  const Vec3 world = surface_point(spec, hit, t);
  const Vec3 c = spec.camera[std::size_t(t)].apply_inverse(world);
  if (c.z() <= kMinDepth) return false;
  const PinholeIntrinsics& K = spec.K;
  pixel = Vec2(K.fx * c.x() / c.z() + K.cx, K.fy * c.y() / c.z() + K.cy);
  if (pixel.x() < -0.5 || pixel.y() < -0.5 || pixel.x() >= K.width - 0.5 || pixel.y() >= K.height - 0.5)
    return false;
  const SurfaceHit other = ray_cast(spec, t, pixel);
  return other.instance == hit.instance && std::abs(other.depth - c.z()) <= 1e-7 * std::max(1.0, c.z());
}

Texture random_texture(std::mt19937_64& rng, double freq) {
  std::uniform_real_distribution<double> u(0, 1);
  Texture tex;
  tex.base = Vec3(0.3 + 0.4 * u(rng), 0.3 + 0.4 * u(rng), 0.3 + 0.4 * u(rng));
  tex.amplitude = Vec3(0.12 + 0.1 * u(rng), 0.12 + 0.1 * u(rng), 0.12 + 0.1 * u(rng));
  tex.frequency = Vec2(freq * (0.8 + 0.4 * u(rng)), freq * (0.8 + 0.4 * u(rng)));
  tex.phase = Vec3(kTwoPi * u(rng), kTwoPi * u(rng), kTwoPi * u(rng));
  return tex;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  };
  return mix(mix(mix(mix(seed) ^ a) ^ b) ^ c);
}

Vec3 Texture::color(const Vec2& uv) const {
  Vec3 c;
  for (int k = 0; k < 3; ++k) {
    const double s = std::sin(kTwoPi * frequency.x() * uv.x() + phase(k)) +
                     std::sin(kTwoPi * frequency.y() * uv.y() + 1.7 * phase(k));
    c(k) = std::clamp(base(k) + 0.5 * amplitude(k) * s, 0.0, 1.0);
  }
  return c;
}

void SceneSpec::validate() const {
  K.validate();
  if (frame_count < 1) throw Error(ErrorCode::InvalidSpec, "frame_count must be positive");
  if (int(camera.size()) != frame_count) throw Error(ErrorCode::InvalidSpec, "camera trajectory length != frame_count");
  for (const Mover& m : movers) {
    if (int(m.trajectory.size()) != frame_count)
      throw Error(ErrorCode::InvalidSpec, "mover trajectory length != frame_count");
    if (m.faces.empty()) throw Error(ErrorCode::InvalidSpec, "mover without faces");
  }
  if (movers.size() > 254) throw Error(ErrorCode::InvalidSpec, "too many movers");
  if (!(gaussian_spacing > 0)) throw Error(ErrorCode::InvalidSpec, "gaussian_spacing must be positive");
  if (!(gaussian_opacity > 0 && gaussian_opacity < 1))
    throw Error(ErrorCode::InvalidSpec, "gaussian_opacity must be in (0, 1)");
  if (noise.flow_sigma < 0 || noise.depth_sigma < 0 || noise.dropout < 0 || noise.dropout > 1 ||
      !(noise.depth_scale > 0))
    throw Error(ErrorCode::InvalidSpec, "noise knobs out of range");
}

std::vector<Rectangle> box_faces(const Vec3& h, const Texture& texture) {
  std::vector<Rectangle> faces;
  const double q = std::numbers::pi / 2;
  auto add = [&](const Vec3& axis_angle, const Vec3& center, const Vec2& half) {
    Rectangle r;
    r.frame = RigidPose::from_axis_angle(axis_angle, center);
    r.half_extent = half;
    r.texture = texture;
    faces.push_back(r);
  };
  add(Vec3::Zero(), Vec3(0, 0, -h.z()), Vec2(h.x(), h.y()));
  add(Vec3::Zero(), Vec3(0, 0, h.z()), Vec2(h.x(), h.y()));
  add(Vec3(0, q, 0), Vec3(-h.x(), 0, 0), Vec2(h.z(), h.y()));
  add(Vec3(0, q, 0), Vec3(h.x(), 0, 0), Vec2(h.z(), h.y()));
  add(Vec3(q, 0, 0), Vec3(0, -h.y(), 0), Vec2(h.x(), h.z()));
  add(Vec3(q, 0, 0), Vec3(0, h.y(), 0), Vec2(h.x(), h.z()));
  return faces;
}

SceneSpec make_desk_scene(const DeskSceneParams& p, std::uint64_t seed) {
  if (p.frames < 1 || p.movers < 0 || p.movers > 2 || p.dynamic_fraction < 0 || p.dynamic_fraction > 0.5)
    throw Error(ErrorCode::InvalidSpec, "desk scene parameters out of range");
  std::mt19937_64 rng(mix_seed(seed, 0x5ce7e));
  std::uniform_real_distribution<double> u(0, 1);

  SceneSpec spec;
  spec.K = PinholeIntrinsics{p.focal, p.focal, (p.width - 1) / 2.0, (p.height - 1) / 2.0, p.width, p.height};
  spec.frame_count = p.frames;
  spec.noise = p.noise;
  spec.gaussian_spacing = p.spacing;

  Rectangle wall;
  wall.frame = RigidPose::from_translation(Vec3(0, -0.1, 3.0));
  wall.half_extent = Vec2(3.0, 2.2);
  wall.texture = random_texture(rng, 0.7);
  spec.statics.push_back(wall);

  Rectangle floor;
  floor.frame = RigidPose::from_axis_angle(Vec3(std::numbers::pi / 2, 0, 0), Vec3(0, 0.9, 1.65));
  floor.half_extent = Vec2(3.0, 1.35);
  floor.texture = random_texture(rng, 0.9);
  spec.statics.push_back(floor);

  const Texture crate_tex = random_texture(rng, 1.6);
  for (Rectangle r : box_faces(Vec3(0.2, 0.2, 0.2), crate_tex)) {
    r.frame = RigidPose::from_translation(Vec3(-0.75, 0.69, 2.3)) * r.frame;
    spec.statics.push_back(r);
  }

  const double cam_phase = kTwoPi * u(rng);
  for (int t = 0; t < p.frames; ++t) {
    const double a = p.camera_motion;
    const Vec3 trans(a * 0.35 * std::sin(0.045 * t + cam_phase), a * 0.05 * std::sin(0.07 * t),
                     a * 0.12 * std::sin(0.03 * t + 0.5 * cam_phase));
    const Vec3 rot(a * 0.02 * std::sin(0.05 * t), a * 0.06 * std::sin(0.04 * t + cam_phase), 0.0);
    spec.camera.push_back(RigidPose::from_axis_angle(rot, trans));
  }

  const double pixels = double(p.width) * p.height;
  for (int m = 0; m < p.movers; ++m) {
    const double depth = m == 0 ? 2.0 : 1.6;
    // front face at depth − side/2 spans sqrt(fraction·pixels/movers) px
    const double span = std::sqrt(p.dynamic_fraction * pixels / p.movers);
    const double side = span * depth / (p.focal + span / 2);
    const double radius = 0.22 + 0.06 * u(rng);
    const double omega = (m == 0 ? 1.0 : -1.0) * p.mover_speed * depth / (p.focal * radius);
    const double phase = kTwoPi * u(rng);
    const Vec3 center = m == 0 ? Vec3(0.15, -0.15, depth) : Vec3(-0.45, 0.05, depth);
    Mover mover;
    mover.faces = box_faces(Vec3(side / 2, side / 2, side / 2), random_texture(rng, 2.0));
    for (int t = 0; t < p.frames; ++t) {
      const double ang = phase + omega * t;
      const Vec3 pos = center + radius * Vec3(std::cos(ang), 0.6 * std::sin(ang), 0.0);
      mover.trajectory.push_back(RigidPose::from_axis_angle(Vec3(0, p.mover_spin * t, 0), pos));
    }
    spec.movers.push_back(std::move(mover));
  }
  spec.validate();
  return spec;
}

SurfaceHit ray_cast(const SceneSpec& spec, int t, const Vec2& pixel) {
  const RigidPose& cam = spec.camera[std::size_t(t)];
  const Vec3 origin = cam.translation;
  const Vec3 dir = cam.rotation * spec.K.ray(pixel);
  SurfaceHit best;
  double best_s = std::numeric_limits<double>::infinity();
  auto consider = [&](const Rectangle& rect, const RigidPose& to_world, int instance, int face) {
    double s;
    Vec2 uv;
    if (!intersect(rect, to_world, origin, dir, s, uv) || s >= best_s) return;
    best_s = s;
    best.instance = instance;
    best.face = face;
    best.depth = s;
    best.local = Vec3(uv.x(), uv.y(), 0.0);
  };
  for (std::size_t f = 0; f < spec.statics.size(); ++f) consider(spec.statics[f], spec.statics[f].frame, 0, int(f));
  for (std::size_t m = 0; m < spec.movers.size(); ++m) {
    const Mover& mover = spec.movers[m];
    for (std::size_t f = 0; f < mover.faces.size(); ++f)
      consider(mover.faces[f], mover.trajectory[std::size_t(t)] * mover.faces[f].frame, int(m + 1), int(f));
  }
  return best;
}

Vec3 surface_point(const SceneSpec& spec, const SurfaceHit& hit, int t) {
  return face_to_world(spec, hit.instance, hit.face, t).apply(hit.local);
}

std::vector<Gaussian3D> scene_gaussians(const SceneSpec& spec, int t, std::uint64_t seed) {
  std::vector<Gaussian3D> out;
  std::uint64_t id = 1;
  auto gaussianize = [&](const Rectangle& rect, const RigidPose& to_world, std::uint64_t surface_key) {
    std::mt19937_64 rng(mix_seed(seed, 0x6a55, surface_key));
    std::uniform_real_distribution<double> jitter(-0.15, 0.15);
    const int nx = std::max(1, int(std::lround(2 * rect.half_extent.x() / spec.gaussian_spacing)));
    const int ny = std::max(1, int(std::lround(2 * rect.half_extent.y() / spec.gaussian_spacing)));
    const double cx = 2 * rect.half_extent.x() / nx, cy = 2 * rect.half_extent.y() / ny;
    const Quat rot = to_world.rotation;
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i) {
        const Vec2 uv(-rect.half_extent.x() + (i + 0.5 + jitter(rng)) * cx,
                      -rect.half_extent.y() + (j + 0.5 + jitter(rng)) * cy);
        const Vec3 mean = to_world.apply(Vec3(uv.x(), uv.y(), 0));
        const Vec3 scale(0.6 * cx, 0.6 * cy, 0.05 * std::min(cx, cy));
        out.push_back(Gaussian3D::make(mean, rot, scale, spec.gaussian_opacity, rect.texture.color(uv), id++));
      }
    }
  };
  for (std::size_t f = 0; f < spec.statics.size(); ++f) gaussianize(spec.statics[f], spec.statics[f].frame, f);
  for (std::size_t m = 0; m < spec.movers.size(); ++m) {
    const Mover& mover = spec.movers[m];
    for (std::size_t f = 0; f < mover.faces.size(); ++f)
      gaussianize(mover.faces[f], mover.trajectory[std::size_t(t)] * mover.faces[f].frame, 1000 * (m + 1) + f);
  }
  return out;
}

Dataset generate(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset data;
  data.spec = spec;
  data.seed = seed;
  const int n = spec.frame_count, w = spec.K.width, h = spec.K.height;
  data.timestamps.resize(std::size_t(n));
  data.poses = spec.camera;
  data.images.resize(std::size_t(n));
  data.depths.resize(std::size_t(n));
  data.instances.resize(std::size_t(n));
  data.dynamic_masks.resize(std::size_t(n));
  for (int t = 0; t < n; ++t) {
    data.timestamps[std::size_t(t)] = t * spec.frame_interval;
    data.images[std::size_t(t)] = render(scene_gaussians(spec, t, seed), spec.camera[std::size_t(t)], spec.K).color;
    ScalarField depth(w, h, 0.0);
    Mask inst(w, h, 0), dyn(w, h, 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const SurfaceHit hit = ray_cast(spec, t, Vec2(x, y));
        if (hit.instance < 0) continue;
        depth(x, y) = hit.depth;
        inst(x, y) = std::uint8_t(hit.instance);
        dyn(x, y) = hit.instance > 0 ? 1 : 0;
      }
    data.depths[std::size_t(t)] = std::move(depth);
    data.instances[std::size_t(t)] = std::move(inst);
    data.dynamic_masks[std::size_t(t)] = std::move(dyn);
  }
  return data;
}

FlowObservation oracle_flow(const Dataset& data, int i, int j, double sigma, std::uint64_t seed) {
  const SceneSpec& spec = data.spec;
  if (i < 0 || j < 0 || i >= spec.frame_count || j >= spec.frame_count)
    throw Error(ErrorCode::OracleFailure, "flow requested for a frame outside the sequence");
  const int w = spec.K.width, h = spec.K.height;
  FlowObservation obs;
  obs.source = i;
  obs.target = j;
  obs.predicted = Raster<Vec2>(w, h, Vec2::Zero());
  obs.confidence = ScalarField(w, h, 0.0);
  std::mt19937_64 rng(mix_seed(seed, 0xf10f, std::uint64_t(i), std::uint64_t(j)));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec2 n(noise(rng), noise(rng));
      const SurfaceHit hit = ray_cast(spec, i, Vec2(x, y));
      if (hit.instance < 0) {
        obs.predicted(x, y) = Vec2(x, y);
        continue;
      }
      const Vec3 c = spec.camera[std::size_t(j)].apply_inverse(surface_point(spec, hit, j));
      if (c.z() <= kMinDepth) {
        obs.predicted(x, y) = Vec2(x, y);
        continue;
      }
      const Vec2 q(spec.K.fx * c.x() / c.z() + spec.K.cx, spec.K.fy * c.y() / c.z() + spec.K.cy);
      Vec2 tmp;
      const bool vis = visible_at(spec, hit, j, tmp);
      obs.predicted(x, y) = q + sigma * n;
      if (vis) obs.confidence(x, y) = sigma > 0 ? 1.0 - std::min(1.0, n.norm() / 3.0) : 1.0;
    }
  }
  return obs;
}

std::vector<Track2D> oracle_tracks(const Dataset& data, std::span<const TrackQuery> queries, int t0, int t1,
                                   double dropout, std::uint64_t seed, std::uint64_t first_id) {
  const SceneSpec& spec = data.spec;
  const int n = spec.frame_count;
  t0 = std::max(0, t0);
  t1 = std::min(n, t1);
  std::vector<Track2D> tracks;
  tracks.reserve(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const TrackQuery& query = queries[q];
    if (query.frame < 0 || query.frame >= n || query.pixel.x() < -0.5 || query.pixel.y() < -0.5 ||
        query.pixel.x() >= spec.K.width - 0.5 || query.pixel.y() >= spec.K.height - 0.5)
      throw Error(ErrorCode::OracleFailure, "track query out of bounds");
    Track2D tr;
    tr.id = first_id + q;
    tr.query_frame = query.frame;
    tr.positions.assign(std::size_t(n), Vec2::Zero());
    tr.visible.assign(std::size_t(n), 0);
    const SurfaceHit hit = ray_cast(spec, query.frame, query.pixel);
    if (hit.instance >= 0) {
      std::mt19937_64 rng(mix_seed(seed, 0x7ac4, tr.id));
      std::uniform_real_distribution<double> u(0, 1);
      for (int t = t0; t < t1; ++t) {
        const Vec3 c = spec.camera[std::size_t(t)].apply_inverse(surface_point(spec, hit, t));
        if (c.z() > kMinDepth)
          tr.positions[std::size_t(t)] =
              Vec2(spec.K.fx * c.x() / c.z() + spec.K.cx, spec.K.fy * c.y() / c.z() + spec.K.cy);
        Vec2 pix;
        bool vis = visible_at(spec, hit, t, pix);
        const double draw = u(rng);
        if (vis && t != query.frame && draw < dropout) vis = false;
        tr.visible[std::size_t(t)] = vis ? 1 : 0;
      }
    }
    tracks.push_back(std::move(tr));
  }
  return tracks;
}

DepthMap oracle_monodepth(const Dataset& data, int frame, double a, double b, double sigma, std::uint64_t seed) {
  if (!(a > 0)) throw Error(ErrorCode::OracleFailure, "mono-depth scale must be positive");
  const ScalarField& gt = data.depths.at(std::size_t(frame));
  DepthMap out;
  out.frame = frame;
  out.depth = ScalarField(gt.width, gt.height, 0.0);
  out.valid = Mask(gt.width, gt.height, 0);
  std::mt19937_64 rng(mix_seed(seed, 0xde97, std::uint64_t(frame)));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double n = noise(rng);
    if (!(gt[i] > 0)) continue;
    out.depth[i] = a * gt[i] + b + sigma * n;
    out.valid[i] = 1;
  }
  return out;
}

LabelRasterSegmenter ground_truth_segmenter(const Dataset& data) { return LabelRasterSegmenter(data.instances); }

SyntheticOracles::SyntheticOracles(const Dataset& data, std::uint64_t seed)
    : data_(data), seed_(seed), segmenter_(data.instances) {}

FlowObservation SyntheticOracles::flow(int source, int target) {
  return oracle_flow(data_, source, target, data_.spec.noise.flow_sigma, seed_);
}

std::vector<Track2D> SyntheticOracles::tracks(std::span<const TrackQuery> queries, int t0, int t1,
                                              std::uint64_t first_id) {
  return oracle_tracks(data_, queries, t0, t1, data_.spec.noise.dropout, seed_, first_id);
}

// The sensor sees metric depth; only the noise knob applies.
DepthMap SyntheticOracles::sensor_depth(int frame) {
  return oracle_monodepth(data_, frame, 1.0, 0.0, data_.spec.noise.depth_sigma, mix_seed(seed_, 0x5e75));
}

DepthMap SyntheticOracles::mono_depth(int frame) {
  const NoiseKnobs& n = data_.spec.noise;
  return oracle_monodepth(data_, frame, n.depth_scale, n.depth_shift, n.depth_sigma, seed_);
}

}  // namespace dynrecon
