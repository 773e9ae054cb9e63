#include "dynrecon/splatting.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <tuple>

namespace dynrecon {

namespace {

using Mat23 = Eigen::Matrix<double, 2, 3>;

Mat23 projection_jacobian(const Vec3& c, const PinholeIntrinsics& K) {
  const double iz = 1.0 / c.z();
  Mat23 j;
  j << K.fx * iz, 0, -K.fx * c.x() * iz * iz, 0, K.fy * iz, -K.fy * c.y() * iz * iz;
  return j;
}

struct Eigen2 {
  double lmin, lmax;
  Vec2 vmin;
};

Eigen2 sym2_eigen(const Mat2& m) {
  const double a = m(0, 0), b = 0.5 * (m(0, 1) + m(1, 0)), c = m(1, 1);
  const double mid = 0.5 * (a + c);
  const double s = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
  Eigen2 e{mid - s, mid + s, Vec2::Zero()};
  if (std::abs(b) > 1e-300) {
    e.vmin = Vec2(b, e.lmin - a).normalized();
  } else {
    e.vmin = a <= c ? Vec2(1, 0) : Vec2(0, 1);
  }
  return e;
}

void hash_mix(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
}

struct PixelAlpha {
  double alpha = 0;
  double d_power = 0;    // dα/dpower, power = -½ ΔᵀQΔ
  double d_opacity = 0;  // dα/do
  bool skip = true;
  Vec2 delta;
};

// α = o·exp(power)·taper(m²) with a C¹ taper to zero between taper_start and
// support_limit (Mahalanobis²), clamped at alpha_max.
PixelAlpha pixel_alpha(const ProjectedGaussian& pg, const Vec2& p, const SplatOptions& opt) {
  PixelAlpha r;
  r.delta = p - pg.mean2d;
  const double m2 = r.delta.dot(pg.conic * r.delta);
  if (!(m2 < opt.support_limit)) return r;
  const double g = std::exp(-0.5 * m2);
  double w = 1.0, dw_dm2 = 0.0;
  if (m2 > opt.taper_start) {
    const double span = opt.support_limit - opt.taper_start;
    const double t = (m2 - opt.taper_start) / span;
    w = 1.0 - t * t * (3.0 - 2.0 * t);
    dw_dm2 = -6.0 * t * (1.0 - t) / span;
  }
  const double a = pg.opacity * g * w;
  if (!(a > 0)) return r;
  r.skip = false;
  if (a > opt.alpha_max) {
    r.alpha = opt.alpha_max;
    return r;
  }
  r.alpha = a;
  r.d_opacity = g * w;
  r.d_power = pg.opacity * g * (w - 2.0 * dw_dm2);
  return r;
}

}  // namespace

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

Gaussian3D Gaussian3D::make(const Vec3& mean, const Quat& rotation, const Vec3& scale, double opacity,
                            const Vec3& color, std::uint64_t id) {
  Gaussian3D g;
  g.mean = mean;
  g.rotation = rotation.normalized();
  g.log_scale = scale.array().log();
  g.opacity_logit = logit(std::clamp(opacity, 1e-9, 1.0 - 1e-9));
  g.color = color;
  g.id = id;
  return g;
}

double Gaussian3D::opacity() const { return sigmoid(opacity_logit); }

Mat3 Gaussian3D::covariance() const {
  const Mat3 r = rotation.normalized().toRotationMatrix();
  const Vec3 s2 = (2.0 * log_scale).array().exp();
  return r * s2.asDiagonal() * r.transpose();
}

double ProjectedGaussian::intersection_depth(const Vec2& pixel, const PinholeIntrinsics& K) const {
  const Vec3 d = K.ray(pixel);
  return d.dot(cov_inv_mean) / d.dot(cov_cam_inv * d);
}

ProjectedGaussian project_gaussian(const Gaussian3D& g, const RigidPose& pose, const PinholeIntrinsics& K,
                                   const SplatOptions& opt) {
  const Mat3 rw = pose.rotation_matrix();
  ProjectedGaussian pg;
  pg.mean_cam = rw.transpose() * (g.mean - pose.translation);
  if (pg.mean_cam.z() <= kMinDepth) throw Error(ErrorCode::BehindCamera, "gaussian behind camera");

  const Mat3 rg = g.rotation.normalized().toRotationMatrix();
  const Vec3 s2 = (2.0 * g.log_scale).array().exp();
  const Mat3 local = rw.transpose() * rg;
  pg.cov_cam = local * s2.asDiagonal() * local.transpose();
  pg.cov_cam_inv = local * s2.cwiseInverse().asDiagonal() * local.transpose();
  pg.cov_inv_mean = pg.cov_cam_inv * pg.mean_cam;

  const Mat23 j = projection_jacobian(pg.mean_cam, K);
  pg.cov2d_raw = j * pg.cov_cam * j.transpose();
  pg.cov2d_raw(1, 0) = pg.cov2d_raw(0, 1);
  const Eigen2 e = sym2_eigen(pg.cov2d_raw);
  pg.dilation = std::max(0.0, opt.dilation_floor - e.lmin);
  pg.cov2d = pg.cov2d_raw + pg.dilation * Mat2::Identity();
  pg.conic = pg.cov2d.inverse();
  pg.mean2d = Vec2(K.fx * pg.mean_cam.x() / pg.mean_cam.z() + K.cx, K.fy * pg.mean_cam.y() / pg.mean_cam.z() + K.cy);
  pg.opacity = g.opacity();
  if (pg.opacity > 0) pg.radius = std::sqrt(opt.support_limit * (e.lmax + pg.dilation));
  return pg;
}

std::uint64_t fingerprint(const std::vector<Gaussian3D>& gaussians) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& g : gaussians) {
    hash_mix(h, g.mean.data(), sizeof(double) * 3);
    hash_mix(h, g.rotation.coeffs().data(), sizeof(double) * 4);
    hash_mix(h, g.log_scale.data(), sizeof(double) * 3);
    hash_mix(h, &g.opacity_logit, sizeof(double));
    hash_mix(h, g.color.data(), sizeof(double) * 3);
    hash_mix(h, &g.id, sizeof(g.id));
  }
  const std::uint64_t n = gaussians.size();
  hash_mix(h, &n, sizeof(n));
  return h;
}

RenderOutput render(const std::vector<Gaussian3D>& gaussians, const RigidPose& pose, const PinholeIntrinsics& K,
                    const SplatOptions& opt) {
  const int w = K.width, h = K.height;
  RenderOutput out;
  out.color = RgbImage(w, h, Vec3::Zero());
  out.depth = ScalarField(w, h, 0.0);
  out.opacity = ScalarField(w, h, 0.0);
  out.final_transmittance = ScalarField(w, h, 1.0);
  out.contributors.assign(std::size_t(w) * h, {});
  out.pose = pose;
  out.K = K;
  out.options = opt;
  out.fingerprint = fingerprint(gaussians);
  out.projected.resize(gaussians.size());
  out.visible.assign(gaussians.size(), 0);

  const int ts = opt.tile_size;
  const int tiles_x = (w + ts - 1) / ts, tiles_y = (h + ts - 1) / ts;
  std::vector<std::vector<std::uint32_t>> tiles(std::size_t(tiles_x) * tiles_y);

  const Mat3 rw = pose.rotation_matrix();
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    const double z = (rw.transpose() * (gaussians[i].mean - pose.translation)).z();
    if (z <= std::max(opt.near_plane, kMinDepth)) continue;
    ProjectedGaussian pg = project_gaussian(gaussians[i], pose, K, opt);
    if (!(pg.radius > 0) || !std::isfinite(pg.radius)) continue;
    const double r = pg.radius;
    const int x0 = int(std::floor(pg.mean2d.x() - r)), x1 = int(std::ceil(pg.mean2d.x() + r));
    const int y0 = int(std::floor(pg.mean2d.y() - r)), y1 = int(std::ceil(pg.mean2d.y() + r));
    if (x1 < 0 || y1 < 0 || x0 >= w || y0 >= h) continue;
    out.projected[i] = pg;
    out.visible[i] = 1;
    const int tx0 = std::max(0, x0) / ts, tx1 = std::min(w - 1, x1) / ts;
    const int ty0 = std::max(0, y0) / ts, ty1 = std::min(h - 1, y1) / ts;
    for (int ty = ty0; ty <= ty1; ++ty)
      for (int tx = tx0; tx <= tx1; ++tx) tiles[std::size_t(ty) * tiles_x + tx].push_back(std::uint32_t(i));
  }

  parallel_for(tiles.size(), [&](std::size_t t, int) {
    auto& list = tiles[t];
    std::sort(list.begin(), list.end(), [&](std::uint32_t a, std::uint32_t b) {
      return std::make_tuple(out.projected[a].mean_cam.z(), gaussians[a].id, a) <
             std::make_tuple(out.projected[b].mean_cam.z(), gaussians[b].id, b);
    });
    const int tx = int(t % tiles_x), ty = int(t / tiles_x);
    for (int y = ty * ts; y < std::min(h, (ty + 1) * ts); ++y) {
      for (int x = tx * ts; x < std::min(w, (tx + 1) * ts); ++x) {
        const Vec2 p(x, y);
        double T = 1.0;
        Vec3 c = Vec3::Zero();
        double d = 0, o = 0;
        auto& contrib = out.contributors[std::size_t(y) * w + x];
        for (std::uint32_t gi : list) {
          const ProjectedGaussian& pg = out.projected[gi];
          const PixelAlpha pa = pixel_alpha(pg, p, opt);
          if (pa.skip) continue;
          const double next_T = T * (1.0 - pa.alpha);
          if (next_T < opt.transmittance_min) break;
          const double wgt = pa.alpha * T;
          c += gaussians[gi].color * wgt;
          d += pg.intersection_depth(p, K) * wgt;
          o += wgt;
          contrib.push_back(gi);
          T = next_T;
        }
        out.color(x, y) = c;
        out.depth(x, y) = d;
        out.opacity(x, y) = o;
        out.final_transmittance(x, y) = T;
      }
    }
  });
  return out;
}

GaussianGradient& GaussianGradient::operator+=(const GaussianGradient& o) {
  mean += o.mean;
  rotation += o.rotation;
  log_scale += o.log_scale;
  opacity_logit += o.opacity_logit;
  color += o.color;
  return *this;
}

Vec4 rotation_matrix_backward(const Quat& q_raw, const Mat3& g) {
  const double n = q_raw.norm();
  const Quat q = q_raw.normalized();
  const double r = q.w(), x = q.x(), y = q.y(), z = q.z();
  Mat3 dr, dx, dy, dz;
  dr << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  dx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * r, 2 * z, 2 * r, -4 * x;
  dy << -4 * y, 2 * x, 2 * r, 2 * x, 0, 2 * z, -2 * r, 2 * z, -4 * y;
  dz << -4 * z, -2 * r, 2 * x, 2 * r, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  const Vec4 gn(g.cwiseProduct(dr).sum(), g.cwiseProduct(dx).sum(), g.cwiseProduct(dy).sum(),
                g.cwiseProduct(dz).sum());
  const Vec4 qn(r, x, y, z);
  return (gn - qn * qn.dot(gn)) / n;
}

namespace {

struct ScreenGrad {
  Vec2 mean2d = Vec2::Zero();
  Mat2 conic = Mat2::Zero();
  double opacity = 0;
  Vec3 color = Vec3::Zero();
  Vec3 mean_cam = Vec3::Zero();
  Mat3 cov_inv = Mat3::Zero();
  bool touched = false;

  void add(const ScreenGrad& o) {
    mean2d += o.mean2d;
    conic += o.conic;
    opacity += o.opacity;
    color += o.color;
    mean_cam += o.mean_cam;
    cov_inv += o.cov_inv;
    touched = touched || o.touched;
  }
};

}  // namespace

std::vector<GaussianGradient> render_backward(const RenderOutput& out, const std::vector<Gaussian3D>& gaussians,
                                              const RgbImage& d_color, const ScalarField& d_depth,
                                              const ScalarField& d_opacity) {
  if (fingerprint(gaussians) != out.fingerprint)
    throw Error(ErrorCode::StaleForwardState, "gaussians changed since the forward pass");
  const int w = out.K.width, h = out.K.height;
  const bool has_c = !d_color.empty(), has_d = !d_depth.empty(), has_o = !d_opacity.empty();
  if ((has_c && !d_color.same_shape(w, h)) || (has_d && !d_depth.same_shape(w, h)) ||
      (has_o && !d_opacity.same_shape(w, h)))
    throw Error(ErrorCode::ShapeMismatch, "upstream gradient shape differs from render");

  const std::size_t n = gaussians.size();
  const int workers = worker_count();
  std::vector<std::vector<ScreenGrad>> acc(static_cast<std::size_t>(workers), std::vector<ScreenGrad>(n));
  const SplatOptions& opt = out.options;
  const PinholeIntrinsics& K = out.K;

  parallel_for(std::size_t(h), [&](std::size_t row, int worker) {
    auto& sg = acc[std::size_t(worker)];
    const int y = int(row);
    for (int x = 0; x < w; ++x) {
      const auto& list = out.contributors[std::size_t(y) * w + x];
      if (list.empty()) continue;
      const Vec3 gc = has_c ? d_color(x, y) : Vec3::Zero();
      const double gd = has_d ? d_depth(x, y) : 0.0;
      const double go = has_o ? d_opacity(x, y) : 0.0;
      if (gc.isZero(0) && gd == 0 && go == 0) continue;
      const Vec2 p(x, y);
      const Vec3 ray = K.ray(p);
      double T = out.final_transmittance(x, y);
      double after = 0;
      for (auto it = list.rbegin(); it != list.rend(); ++it) {
        const std::uint32_t gi = *it;
        const ProjectedGaussian& pg = out.projected[gi];
        const PixelAlpha pa = pixel_alpha(pg, p, opt);
        const Vec3 ad = pg.cov_cam_inv * ray;
        const double den = ray.dot(ad);
        const double num = ray.dot(pg.cov_inv_mean);
        const double dhat = num / den;
        const double Tk = T / (1.0 - pa.alpha);
        const double wgt = pa.alpha * Tk;
        const double val = gc.dot(gaussians[gi].color) + gd * dhat + go;
        const double g_alpha = Tk * val - after / (1.0 - pa.alpha);
        after += val * wgt;
        T = Tk;

        ScreenGrad& s = sg[gi];
        s.touched = true;
        s.color += gc * wgt;
        if (gd != 0) {
          const double g_dhat = gd * wgt;
          s.mean_cam += g_dhat * ad / den;
          s.cov_inv += g_dhat * (ray * pg.mean_cam.transpose() / den - (num / (den * den)) * ray * ray.transpose());
        }
        if (pa.d_opacity != 0) {
          s.opacity += g_alpha * pa.d_opacity;
          const double g_power = g_alpha * pa.d_power;
          s.mean2d += g_power * (pg.conic * pa.delta);
          s.conic += g_power * (-0.5) * pa.delta * pa.delta.transpose();
        }
      }
    }
  });

  for (int k = 1; k < workers; ++k)
    for (std::size_t i = 0; i < n; ++i) acc[0][i].add(acc[std::size_t(k)][i]);

  std::vector<GaussianGradient> grads(n);
  const Mat3 rw = out.pose.rotation_matrix();
  for (std::size_t i = 0; i < n; ++i) {
    const ScreenGrad& s = acc[0][i];
    if (!s.touched || !out.visible[i]) continue;
    const ProjectedGaussian& pg = out.projected[i];
    const Gaussian3D& g = gaussians[i];
    GaussianGradient& gr = grads[i];
    gr.color = s.color;
    gr.opacity_logit = s.opacity * pg.opacity * (1.0 - pg.opacity);

    // conic -> 2D covariance -> undilated covariance
    const Mat2 g_cov2d = -pg.conic * s.conic * pg.conic;
    Mat2 g_raw = g_cov2d;
    if (pg.dilation > 0) {
      const Vec2 v = sym2_eigen(pg.cov2d_raw).vmin;
      g_raw -= g_cov2d.trace() * v * v.transpose();
    }
    const Vec3& c = pg.mean_cam;
    const Mat23 j = projection_jacobian(c, K);
    Mat3 g_cov_cam = j.transpose() * g_raw * j;
    const Mat23 g_j = (g_raw + g_raw.transpose()) * j * pg.cov_cam;
    g_cov_cam += -pg.cov_cam_inv * s.cov_inv * pg.cov_cam_inv;

    Vec3 g_c = s.mean_cam;
    const double iz = 1.0 / c.z(), iz2 = iz * iz, iz3 = iz2 * iz;
    g_c.x() += K.fx * iz * s.mean2d.x();
    g_c.y() += K.fy * iz * s.mean2d.y();
    g_c.z() += -K.fx * c.x() * iz2 * s.mean2d.x() - K.fy * c.y() * iz2 * s.mean2d.y();
    g_c.z() += g_j(0, 0) * (-K.fx * iz2) + g_j(1, 1) * (-K.fy * iz2) + g_j(0, 2) * (2 * K.fx * c.x() * iz3) +
               g_j(1, 2) * (2 * K.fy * c.y() * iz3);
    g_c.x() += g_j(0, 2) * (-K.fx * iz2);
    g_c.y() += g_j(1, 2) * (-K.fy * iz2);

    gr.mean = rw * g_c;
    const Mat3 g_sigma = rw * g_cov_cam * rw.transpose();
    const Mat3 rg = g.rotation.normalized().toRotationMatrix();
    const Vec3 sc = g.scale();
    const Mat3 m = rg * sc.asDiagonal();
    const Mat3 g_m = (g_sigma + g_sigma.transpose()) * m;
    const Mat3 g_rg = g_m * sc.asDiagonal();
    const Vec3 g_s = (rg.transpose() * g_m).diagonal();
    gr.log_scale = g_s.cwiseProduct(sc);
    gr.rotation = rotation_matrix_backward(g.rotation, g_rg);
  }
  return grads;
}

}  // namespace dynrecon
