#include "dynrecon/reconstruction.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace dynrecon {

namespace {

constexpr int kGaussianParams = 14;  // mean 3, rotation 4, log-scale 3, opacity 1, color 3

Vec3 backproject_depth(const RigidPose& pose, const PinholeIntrinsics& K, int x, int y, double z) {
  return pose.apply(K.ray(Vec2(x, y)) * z);
}

bool usable(const TrainingView& v, int x, int y, bool want_dynamic) {
  if (!v.depth.valid.inside(x, y) || !v.depth.valid(x, y) || !(v.depth.depth(x, y) > 0)) return false;
  const bool dyn = !v.dynamic.empty() && v.dynamic(x, y) != 0;
  return dyn == want_dynamic;
}

// Gaussian shape from the local surface: tangent axes from neighbouring
// backprojections, thin along the normal.
Gaussian3D seed_gaussian(const TrainingView& v, const PinholeIntrinsics& K, int x, int y, bool dynamic,
                         const SeedOptions& opt) {
  const double z = v.depth.depth(x, y);
  const Vec3 X = backproject_depth(v.pose, K, x, y, z);
  const Mat3 rc = v.pose.rotation_matrix();
  auto tangent = [&](int dx, int dy, const Vec3& fallback) -> Vec3 {
    for (int s : {1, -1}) {
      const int nx = x + s * dx, ny = y + s * dy;
      if (!usable(v, nx, ny, dynamic)) continue;
      const double zn = v.depth.depth(nx, ny);
      if (std::abs(zn - z) > opt.discontinuity * z) continue;
      return double(s) * (backproject_depth(v.pose, K, nx, ny, zn) - X);
    }
    return fallback;
  };
  const Vec3 tu = tangent(1, 0, rc.col(0) * (z / K.fx));
  const Vec3 tv = tangent(0, 1, rc.col(1) * (z / K.fy));
  Vec3 a1 = tu.normalized();
  Vec3 n = tu.cross(tv);
  if (n.norm() < 1e-12 * tu.norm() * tv.norm()) n = rc.col(2);
  n.normalize();
  Vec3 a2 = n.cross(a1);
  Mat3 axes;
  axes << a1, a2, n;
  const double s1 = opt.footprint * opt.stride * tu.norm();
  const double s2 = opt.footprint * opt.stride * std::max(std::abs(tv.dot(a2)), 0.25 * tv.norm());
  const double s3 = opt.thickness * std::min(s1, s2);
  const Vec3& c = v.image(x, y);
  return Gaussian3D::make(X, Quat(axes), Vec3(s1, s2, s3), opt.initial_opacity, c);
}

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

// Chebyshev dilation by r px.
Mask dilate(const Mask& m, int r) {
  if (r <= 0 || m.empty()) return m;
  Mask row(m.width, m.height, 0), out(m.width, m.height, 0);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      for (int d = -r; d <= r && !row(x, y); ++d)
        if (m.inside(x + d, y) && m(x + d, y)) row(x, y) = 1;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      for (int d = -r; d <= r && !out(x, y); ++d)
        if (m.inside(x, y + d) && row(x, y + d)) out(x, y) = 1;
  return out;
}

// Pixels within `band` of a reference depth jump or hole.
Mask depth_edges(const DepthMap& D, int band, double jump) {
  Mask e(D.depth.width, D.depth.height, 0);
  if (band < 0) return e;
  for (int y = 0; y < e.height; ++y)
    for (int x = 0; x < e.width; ++x) {
      if (!D.valid(x, y)) continue;
      const double z = D.depth(x, y);
      const int nx[4] = {x - 1, x + 1, x, x}, ny[4] = {y, y, y - 1, y + 1};
      for (int k = 0; k < 4; ++k)
        if (e.inside(nx[k], ny[k]) && (!D.valid(nx[k], ny[k]) || std::abs(D.depth(nx[k], ny[k]) - z) > jump * z)) {
          e(x, y) = 1;
          break;
        }
    }
  return dilate(e, band);
}

Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& c, const PinholeIntrinsics& K) {
  Eigen::Matrix<double, 2, 3> j;
  const double iz = 1.0 / c.z();
  j << K.fx * iz, 0, -K.fx * c.x() * iz * iz, 0, K.fy * iz, -K.fy * c.y() * iz * iz;
  return j;
}

// Upstream gradient of one view's photometric terms on the full and the
// dynamic-only render.
struct ViewTerms {
  double rgb = 0, depth = 0, mask = 0;
};

ViewTerms view_losses(const RenderOutput& full, const RenderOutput* dyn, const TrainingView& v,
                      const Mask& depth_skip, const Mask& mask_labels, const LossWeights& w, double view_scale, RgbImage* d_color, ScalarField* d_depth,
                      ScalarField* d_opacity, ScalarField* d_dyn_opacity) {
  ViewTerms terms;
  const std::size_t n = full.color.size();
  const double inv_rgb = 1.0 / double(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 diff = full.color[i] - v.image[i];
    terms.rgb += diff.cwiseAbs().sum() * inv_rgb;
    if (d_color) (*d_color)[i] = view_scale * w.rgb * inv_rgb * Vec3(sign(diff.x()), sign(diff.y()), sign(diff.z()));
  }

  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (v.depth.valid[i] && !depth_skip[i] && full.opacity[i] > 0.5) ++count;
  if (count) {
    const double inv = 1.0 / double(count);
    for (std::size_t i = 0; i < n; ++i) {
      if (!v.depth.valid[i] || depth_skip[i] || !(full.opacity[i] > 0.5)) continue;
      const double o = full.opacity[i], d = full.depth[i];
      const double r = d / o - v.depth.depth[i];
      terms.depth += std::abs(r) * inv;
      if (d_depth) {
        const double s = view_scale * w.depth * inv * sign(r);
        (*d_depth)[i] = s / o;
        (*d_opacity)[i] = -s * d / (o * o);
      }
    }
  }

  if (dyn) {
    ScalarField g;
    terms.mask = mask_loss(dyn->opacity, mask_labels, d_dyn_opacity ? &g : nullptr);
    if (d_dyn_opacity)
      for (std::size_t i = 0; i < n; ++i) (*d_dyn_opacity)[i] = view_scale * w.mask * g[i];
  }
  return terms;
}

// Chains the renderer gradient of a warped dynamic Gaussian back to its
// canonical parameters, corrections and the scaffold.
void dynamic_backward(const DynamicGaussian& dg, const WarpTape& tape, const GaussianGradient& gw,
                      const ScaffoldGraph& graph, GaussianGradient& g_canon, std::vector<double>& g_dw,
                      ScaffoldGradient* g_graph) {
  const Quat& r = tape.result.rotation;
  const Quat& q = dg.canonical.rotation;
  const Vec3& mu = dg.canonical.mean;
  g_canon.log_scale += gw.log_scale;
  g_canon.opacity_logit += gw.opacity_logit;
  g_canon.color += gw.color;
  g_canon.rotation += quat_left_matrix(r).transpose() * gw.rotation;
  g_canon.mean += r.toRotationMatrix().transpose() * gw.mean;
  if (tape.t_src == tape.t_dst) return;
  const Vec4 d_r = quat_right_matrix(q).transpose() * gw.rotation +
                   rotation_matrix_backward(r, gw.mean * mu.transpose());
  Vec3 d_query = Vec3::Zero();
  warp_backward(tape, d_r, gw.mean, graph, g_graph, &d_query, g_dw);
  g_canon.mean += d_query;
}

void resize_slot(AdamSlot& s, std::size_t n) {
  s.m.resize(n, 0.0);
  s.v.resize(n, 0.0);
}

// One bias-corrected Adam update; `delta` receives the parameter change.
void adam_update(AdamSlot& s, const double* grad, double* delta, std::size_t n, const double* lr,
                 const OptimizerState& st) {
  ++s.steps;
  const double c1 = 1.0 - std::pow(st.beta1, double(s.steps));
  const double c2 = 1.0 - std::pow(st.beta2, double(s.steps));
  for (std::size_t i = 0; i < n; ++i) {
    s.m[i] = st.beta1 * s.m[i] + (1 - st.beta1) * grad[i];
    s.v[i] = st.beta2 * s.v[i] + (1 - st.beta2) * grad[i] * grad[i];
    const double mh = s.m[i] / c1, vh = s.v[i] / c2;
    delta[i] = -st.lr_scale * st.lr_schedule * lr[i] * mh / (std::sqrt(vh) + st.eps);
  }
}

std::array<double, kGaussianParams> gaussian_rates(const LearningRates& r) {
  std::array<double, kGaussianParams> lr{};
  for (int i = 0; i < 3; ++i) lr[std::size_t(i)] = r.mean;
  for (int i = 3; i < 7; ++i) lr[std::size_t(i)] = r.rotation;
  for (int i = 7; i < 10; ++i) lr[std::size_t(i)] = r.scale;
  lr[10] = r.opacity;
  for (int i = 11; i < 14; ++i) lr[std::size_t(i)] = r.color;
  return lr;
}

void pack(const GaussianGradient& g, double* out) {
  for (int i = 0; i < 3; ++i) out[i] = g.mean(i);
  for (int i = 0; i < 4; ++i) out[3 + i] = g.rotation(i);
  for (int i = 0; i < 3; ++i) out[7 + i] = g.log_scale(i);
  out[10] = g.opacity_logit;
  for (int i = 0; i < 3; ++i) out[11 + i] = g.color(i);
}

void apply_delta(Gaussian3D& g, const double* d) {
  g.mean += Vec3(d[0], d[1], d[2]);
  Quat q(g.rotation.w() + d[3], g.rotation.x() + d[4], g.rotation.y() + d[5], g.rotation.z() + d[6]);
  if (q.norm() > 1e-12) g.rotation = q.normalized();
  g.log_scale += Vec3(d[7], d[8], d[9]);
  g.opacity_logit += d[10];
  g.color += Vec3(d[11], d[12], d[13]);
}

bool finite(const LossReport& r) {
  return std::isfinite(r.total) && std::isfinite(r.rgb) && std::isfinite(r.depth) && std::isfinite(r.track) &&
         std::isfinite(r.mask);
}

}  // namespace

void GaussianMap::validate(const ScaffoldGraph& graph) const {
  if (anchors.size() != statics.size()) throw Error(ErrorCode::ShapeMismatch, "static anchors out of sync");
  for (const auto& g : statics)
    if (g.id & kDynamicIdBit) throw Error(ErrorCode::ShapeMismatch, "static gaussian in the dynamic id space");
  for (const auto& d : dynamics) {
    if (!(d.canonical.id & kDynamicIdBit)) throw Error(ErrorCode::ShapeMismatch, "dynamic gaussian in the static id space");
    if (d.dw.size() != d.nodes.size()) throw Error(ErrorCode::ShapeMismatch, "skinning corrections out of sync");
    for (int m : d.nodes)
      if (m < 0 || std::size_t(m) >= graph.nodes.size())
        throw Error(ErrorCode::MissingNeighbor, "dynamic gaussian references a missing node");
  }
}

void init_static(GaussianMap& map, std::span<const TrainingView> views, const PinholeIntrinsics& K,
                 std::span<const Mask> skip, const SeedOptions& opt) {
  bool any_static = false;
  for (std::size_t k = 0; k < views.size(); ++k) {
    const TrainingView& v = views[k];
    if (!v.depth.depth.same_shape(K.width, K.height) || !v.image.same_shape(K.width, K.height))
      throw Error(ErrorCode::ShapeMismatch, "training view does not match the intrinsics");
    const Mask* sk = k < skip.size() && !skip[k].empty() ? &skip[k] : nullptr;
    for (int y = 0; y < K.height; ++y)
      for (int x = 0; x < K.width; ++x) {
        if (!usable(v, x, y, false)) continue;
        any_static = true;
        if (x % opt.stride || y % opt.stride) continue;
        if (sk && (*sk)(x, y)) continue;
        Gaussian3D g = seed_gaussian(v, K, x, y, false, opt);
        g.id = map.next_static_id++;
        map.statics.push_back(g);
        map.anchors.push_back({v.frame, Vec2(x, y)});
      }
  }
  if (!any_static) throw Error(ErrorCode::NoStaticPixels, "no static pixel with valid depth to seed from");
}

std::size_t init_dynamic(GaussianMap& map, std::span<const TrainingView> views, std::span<const Mask> select,
                         const ScaffoldGraph& graph, const PinholeIntrinsics& K, const SeedOptions& opt) {
  std::size_t seeded = 0;
  for (std::size_t k = 0; k < views.size(); ++k) {
    const TrainingView& v = views[k];
    if (k >= select.size() || !select[k].same_shape(K.width, K.height))
      throw Error(ErrorCode::EmptyMask, "no dynamic selection mask for frame " + std::to_string(v.frame));
    const Mask& sel = select[k];
    // tangents come from the surrounding selected region
    TrainingView local;
    local.frame = v.frame;
    local.pose = v.pose;
    local.image = v.image;
    local.depth = v.depth;
    local.dynamic = sel;
    for (int y = 0; y < K.height; y += opt.stride)
      for (int x = 0; x < K.width; x += opt.stride) {
        if (!sel(x, y) || !v.depth.valid(x, y) || !(v.depth.depth(x, y) > 0)) continue;
        if (graph.nodes.empty()) throw Error(ErrorCode::DegenerateConfiguration, "scaffold has no nodes");
        DynamicGaussian dg;
        dg.canonical = seed_gaussian(local, K, x, y, true, opt);
        dg.canonical.id = map.next_dynamic_id++;
        dg.t_ref = v.frame;
        dg.nodes = skinning_neighborhood(dg.canonical.mean, graph, v.frame);
        dg.dw.assign(dg.nodes.size(), 0.0);
        map.dynamics.push_back(std::move(dg));
        ++seeded;
      }
  }
  return seeded;
}

double mask_loss(const ScalarField& opacity, const Mask& mask, ScalarField* grad) {
  if (!opacity.same_shape(mask)) throw Error(ErrorCode::ShapeMismatch, "mask and opacity differ in shape");
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) n += mask[i] == 0;
  if (grad) *grad = ScalarField(opacity.width, opacity.height, 0.0);
  if (!n) return 0.0;
  double sum = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) {
      sum += opacity[i];
      if (grad) (*grad)[i] = 1.0 / double(n);
    }
  return sum / double(n);
}

double huber(double r, double delta) { return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta); }

double track_loss(const ScaffoldGraph& graph, std::span<const TrackAnchor> anchors, std::span<const Track2D> tracks,
                  std::span<const RigidPose> poses, const PinholeIntrinsics& K, std::span<const int> frames,
                  double delta, ScaffoldGradient* grad, double scale) {
  struct Pair {
    std::size_t anchor;
    int t;
  };
  std::vector<Pair> pairs;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const Track2D& tr = tracks[anchors[a].track];
    for (int t : frames)
      if (t >= 0 && std::size_t(t) < tr.visible.size() && tr.visible[std::size_t(t)] && t < graph.timesteps() &&
          std::size_t(t) < poses.size())
        pairs.push_back({a, t});
  }
  if (pairs.empty()) return 0.0;
  const double norm = 1.0 / double(pairs.size());
  double total = 0;
  for (const Pair& p : pairs) {
    const TrackAnchor& an = anchors[p.anchor];
    const std::vector<double> zero(an.nodes.size(), 0.0);
    const WarpTape tape = warp_forward(an.point, an.nodes, zero, graph, an.t_src, p.t);
    const Vec3 X = tape.result.apply(an.point);
    const RigidPose& cam = poses[std::size_t(p.t)];
    const Vec3 c = cam.apply_inverse(X);
    if (c.z() <= kMinDepth) continue;
    const Vec2 u(K.fx * c.x() / c.z() + K.cx, K.fy * c.y() / c.z() + K.cy);
    const Vec2 e = u - tracks[an.track].positions[std::size_t(p.t)];
    const double r = e.norm();
    total += huber(r, delta);
    if (!grad || p.t == an.t_src || r == 0) continue;
    const Vec2 psi = r <= delta ? e : Vec2(delta * e / r);
    const Vec3 gX = scale * norm * (cam.rotation_matrix() * (projection_jacobian(c, K).transpose() * psi));
    const Vec4 g_r = rotation_matrix_backward(tape.result.rotation, gX * an.point.transpose());
    warp_backward(tape, g_r, gX, graph, grad, nullptr, {});
  }
  return total * norm;
}

ComposedScene compose_scene(const GaussianMap& map, const ScaffoldGraph& graph, int t, bool with_static) {
  ComposedScene s;
  if (with_static) s.gaussians = map.statics;
  s.static_count = s.gaussians.size();
  s.gaussians.reserve(s.static_count + map.dynamics.size());
  s.tapes.reserve(map.dynamics.size());
  for (const DynamicGaussian& dg : map.dynamics) {
    WarpTape tape = warp_forward(dg.canonical.mean, dg.nodes, dg.dw, graph, dg.t_ref, t);
    Gaussian3D g = dg.canonical;
    g.mean = tape.result.apply(dg.canonical.mean);
    g.rotation = tape.result.rotation * dg.canonical.rotation;
    s.gaussians.push_back(g);
    s.tapes.push_back(std::move(tape));
  }
  return s;
}

RenderOutput render_map(const GaussianMap& map, const ScaffoldGraph& graph, const RigidPose& pose,
                        const PinholeIntrinsics& K, int t, const SplatOptions& options) {
  if (map.dynamics.empty()) return render(map.statics, pose, K, options);
  return render(compose_scene(map, graph, t).gaussians, pose, K, options);
}

LossReport evaluate_losses(const GaussianMap& map, const ScaffoldGraph& graph, const LossInputs& in,
                           const LossWeights& w, MapGradient* grad) {
  LossReport rep;
  if (in.views.empty()) throw Error(ErrorCode::EmptyInput, "no training views");
  if (grad) {
    grad->statics.assign(map.statics.size(), GaussianGradient{});
    grad->dynamics.assign(map.dynamics.size(), GaussianGradient{});
    grad->dw.resize(map.dynamics.size());
    for (std::size_t i = 0; i < map.dynamics.size(); ++i) grad->dw[i].assign(map.dynamics[i].dw.size(), 0.0);
    grad->scaffold.reset(graph);
  }
  ScaffoldGradient* sg = grad ? &grad->scaffold : nullptr;
  const double view_scale = 1.0 / double(in.views.size());
  const int W = in.K.width, H = in.K.height;

  for (const TrainingView& v : in.views) {
    const ComposedScene scene = compose_scene(map, graph, v.frame);
    const RenderOutput full = render(scene.gaussians, v.pose, in.K);
    const bool with_mask = !map.dynamics.empty() && w.mask > 0;
    std::vector<Gaussian3D> dyn_only;
    RenderOutput dyn;
    if (with_mask) {
      dyn_only.assign(scene.gaussians.begin() + std::ptrdiff_t(scene.static_count), scene.gaussians.end());
      dyn = render(dyn_only, v.pose, in.K);
    }
    RgbImage dC(W, H, Vec3::Zero());
    ScalarField dD(W, H, 0.0), dO(W, H, 0.0), dOd(W, H, 0.0);
    const Mask skip = w.depth > 0 ? depth_edges(v.depth, w.depth_band, w.depth_jump) : Mask(W, H, 0);
    const Mask labels = with_mask ? dilate(v.dynamic, w.mask_band) : Mask();
    const ViewTerms t = view_losses(full, with_mask ? &dyn : nullptr, v, skip, labels, w, view_scale, grad ? &dC : nullptr,
                                    grad ? &dD : nullptr, grad ? &dO : nullptr, grad ? &dOd : nullptr);
    rep.rgb += t.rgb * view_scale;
    rep.depth += t.depth * view_scale;
    rep.mask += t.mask * view_scale;
    if (!grad) continue;

    const auto gfull = render_backward(full, scene.gaussians, dC, dD, dO);
    for (std::size_t i = 0; i < scene.static_count; ++i) grad->statics[i] += gfull[i];
    std::vector<GaussianGradient> gdyn(map.dynamics.size());
    for (std::size_t k = 0; k < map.dynamics.size(); ++k) gdyn[k] = gfull[scene.static_count + k];
    if (with_mask) {
      const auto gm = render_backward(dyn, dyn_only, RgbImage(), ScalarField(), dOd);
      for (std::size_t k = 0; k < gm.size(); ++k) gdyn[k] += gm[k];
    }
    for (std::size_t k = 0; k < map.dynamics.size(); ++k)
      dynamic_backward(map.dynamics[k], scene.tapes[k], gdyn[k], graph, grad->dynamics[k], grad->dw[k], sg);
  }

  if (!in.anchors.empty() && w.track > 0) {
    std::vector<int> frames;
    for (const TrainingView& v : in.views) frames.push_back(v.frame);
    rep.track = track_loss(graph, in.anchors, in.tracks, in.poses, in.K, frames, 2.0, sg, w.track);
  }
  if (!graph.nodes.empty()) {
    rep.arap = arap_loss(graph, sg, w.arap) / (w.arap > 0 ? w.arap : 1.0);
    rep.velocity = velocity_loss(graph, sg, w.velocity) / (w.velocity > 0 ? w.velocity : 1.0);
    rep.acceleration = acceleration_loss(graph, sg, w.acceleration) / (w.acceleration > 0 ? w.acceleration : 1.0);
    if (w.arap == 0) rep.arap = arap_loss(graph);
    if (w.velocity == 0) rep.velocity = velocity_loss(graph);
    if (w.acceleration == 0) rep.acceleration = acceleration_loss(graph);
  }
  rep.total = w.rgb * rep.rgb + w.depth * rep.depth + w.track * rep.track + w.mask * rep.mask + w.arap * rep.arap +
              w.velocity * rep.velocity + w.acceleration * rep.acceleration;
  return rep;
}

LossReport photometric_step(GaussianMap& map, ScaffoldGraph& graph, const LossInputs& inputs, const LossWeights& w,
                            OptimizerState& st) {
  MapGradient g;
  LossReport rep = evaluate_losses(map, graph, inputs, w, &g);
  rep.step = st.step;
  if (!finite(rep)) {
    st.lr_scale *= 0.5;
    throw Error(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(st.step));
  }
  ++st.step;

  const auto lr = gaussian_rates(st.rates);
  st.statics.resize(map.statics.size());
  std::array<double, kGaussianParams> buf{}, delta{};
  for (std::size_t i = 0; i < map.statics.size(); ++i) {
    resize_slot(st.statics[i], kGaussianParams);
    pack(g.statics[i], buf.data());
    adam_update(st.statics[i], buf.data(), delta.data(), kGaussianParams, lr.data(), st);
    apply_delta(map.statics[i], delta.data());
  }

  st.dynamics.resize(map.dynamics.size());
  for (std::size_t i = 0; i < map.dynamics.size(); ++i) {
    DynamicGaussian& dg = map.dynamics[i];
    const std::size_t n = kGaussianParams + dg.dw.size();
    resize_slot(st.dynamics[i], n);
    std::vector<double> gb(n), rates(n), d(n);
    pack(g.dynamics[i], gb.data());
    std::copy(lr.begin(), lr.end(), rates.begin());
    for (std::size_t k = 0; k < dg.dw.size(); ++k) {
      gb[kGaussianParams + k] = g.dw[i][k];
      rates[kGaussianParams + k] = st.rates.dw;
    }
    adam_update(st.dynamics[i], gb.data(), d.data(), n, rates.data(), st);
    apply_delta(dg.canonical, d.data());
    for (std::size_t k = 0; k < dg.dw.size(); ++k) dg.dw[k] += d[kGaussianParams + k];
  }

  const int T = graph.timesteps();
  st.nodes.resize(graph.nodes.size());
  const std::array<double, 6> node_lr{st.rates.node_translation, st.rates.node_translation, st.rates.node_translation,
                                      st.rates.node_rotation,    st.rates.node_rotation,    st.rates.node_rotation};
  for (std::size_t m = 0; m < graph.nodes.size(); ++m) {
    ScaffoldNode& node = graph.nodes[m];
    AdamSlot& slot = st.nodes[m];
    resize_slot(slot, std::size_t(6 * T));
    // one shared step count per node; moments per timestep
    ++slot.steps;
    const double c1 = 1.0 - std::pow(st.beta1, double(slot.steps));
    const double c2 = 1.0 - std::pow(st.beta2, double(slot.steps));
    for (int t = 0; t < T; ++t) {
      const bool observed = std::size_t(t) < node.observed.size() && node.observed[std::size_t(t)];
      if (observed && !st.optimize_observed_nodes) continue;
      double step[6];
      for (int k = 0; k < 6; ++k) {
        const double gi = k < 3 ? g.scaffold.dt(int(m), t)(k) : g.scaffold.dr(int(m), t)(k - 3);
        double& m1 = slot.m[std::size_t(6 * t + k)];
        double& m2 = slot.v[std::size_t(6 * t + k)];
        m1 = st.beta1 * m1 + (1 - st.beta1) * gi;
        m2 = st.beta2 * m2 + (1 - st.beta2) * gi * gi;
        step[k] = -st.lr_scale * st.lr_schedule * node_lr[std::size_t(k)] * (m1 / c1) / (std::sqrt(m2 / c2) + st.eps);
      }
      RigidPose& Q = node.transforms[std::size_t(t)];
      Q.translation += Vec3(step[0], step[1], step[2]);
      Q.rotation = (quat_exp(Vec3(step[3], step[4], step[5])) * Q.rotation).normalized();
    }
  }
  return rep;
}

std::size_t prune_transparent(GaussianMap& map, OptimizerState& st, double threshold) {
  std::size_t removed = 0;
  st.statics.resize(map.statics.size());
  st.dynamics.resize(map.dynamics.size());
  std::size_t keep = 0;
  for (std::size_t i = 0; i < map.statics.size(); ++i) {
    if (map.statics[i].opacity() < threshold) {
      ++removed;
      continue;
    }
    map.statics[keep] = map.statics[i];
    map.anchors[keep] = map.anchors[i];
    st.statics[keep] = std::move(st.statics[i]);
    ++keep;
  }
  map.statics.resize(keep);
  map.anchors.resize(keep);
  st.statics.resize(keep);
  keep = 0;
  for (std::size_t i = 0; i < map.dynamics.size(); ++i) {
    if (map.dynamics[i].canonical.opacity() < threshold) {
      ++removed;
      continue;
    }
    if (keep != i) {
      map.dynamics[keep] = std::move(map.dynamics[i]);
      st.dynamics[keep] = std::move(st.dynamics[i]);
    }
    ++keep;
  }
  map.dynamics.resize(keep);
  st.dynamics.resize(keep);
  return removed;
}

std::vector<LossReport> optimize_map(GaussianMap& map, ScaffoldGraph& graph, const LossInputs& inputs,
                                     OptimizerState& st, const MapOptimizeOptions& opt,
                                     const std::function<void(const LossReport&)>& on_step) {
  std::vector<LossReport> trace;
  if (inputs.views.empty() || opt.steps <= 0) return trace;
  const std::size_t n = inputs.views.size();
  const std::size_t per = std::size_t(std::clamp<int>(opt.views_per_step, 1, int(n)));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::mt19937_64 rng(opt.seed);
  for (int s = 0; s < opt.steps; ++s) {
    std::vector<TrainingView> batch;
    for (std::size_t k = 0; k < per; ++k) {
      if (cursor == order.size()) {
        order.resize(n);
        std::iota(order.begin(), order.end(), std::size_t(0));
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(inputs.views[order[cursor++]]);
    }
    st.lr_schedule = std::pow(opt.final_lr_fraction, double(s) / double(opt.steps));
    LossInputs step_in = inputs;
    step_in.views = batch;
    try {
      const LossReport rep = photometric_step(map, graph, step_in, opt.weights, st);
      trace.push_back(rep);
      if (on_step) on_step(rep);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFiniteLoss) throw;
    }
    if (opt.prune_every > 0 && (s + 1) % opt.prune_every == 0) prune_transparent(map, st, opt.prune_threshold);
  }
  return trace;
}

void deform_static(std::vector<Gaussian3D>& statics, std::span<const StaticAnchor> anchors,
                   std::span<const RigidPose> old_poses, std::span<const DepthMap> old_depths,
                   std::span<const RigidPose> new_poses, std::span<const DepthMap> new_depths) {
  if (anchors.size() != statics.size()) throw Error(ErrorCode::MissingAnchor, "static gaussians without anchors");
  for (std::size_t i = 0; i < statics.size(); ++i) {
    const StaticAnchor& a = anchors[i];
    const std::size_t f = std::size_t(a.frame);
    if (a.frame < 0 || f >= old_poses.size() || f >= new_poses.size() || f >= old_depths.size() ||
        f >= new_depths.size())
      throw Error(ErrorCode::MissingAnchor, "anchor frame " + std::to_string(a.frame) + " has no update");
    const double d0 = sample_depth(old_depths[f], nullptr, a.pixel);
    const double d1 = sample_depth(new_depths[f], nullptr, a.pixel);
    const double rho = d0 > 0 && d1 > 0 ? d1 / d0 : 1.0;
    const RigidPose& P0 = old_poses[f];
    const RigidPose& P1 = new_poses[f];
    if (rho == 1.0 && P0.translation == P1.translation && P0.rotation.coeffs() == P1.rotation.coeffs()) continue;
    Gaussian3D& g = statics[i];
    g.mean = P1.apply(rho * P0.apply_inverse(g.mean));
    g.rotation = (P1.rotation * P0.rotation.conjugate()) * g.rotation;
    g.log_scale.array() += std::log(rho);
  }
}

std::string loss_trace_csv(std::span<const LossReport> trace) {
  std::ostringstream os;
  os.precision(17);
  os << "step,rgb,depth,track,mask,arap,velocity,acceleration,total\n";
  for (const LossReport& r : trace)
    os << r.step << ',' << r.rgb << ',' << r.depth << ',' << r.track << ',' << r.mask << ',' << r.arap << ','
       << r.velocity << ',' << r.acceleration << ',' << r.total << '\n';
  return os.str();
}

}  // namespace dynrecon
