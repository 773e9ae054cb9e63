#include "dynrecon/depth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

namespace dynrecon {

DepthMap DepthMap::from_field(const ScalarField& depth, int frame) {
  DepthMap out;
  out.frame = frame;
  out.depth = depth;
  out.valid = Mask(depth.width, depth.height, 0);
  for (std::size_t i = 0; i < depth.size(); ++i) out.valid[i] = depth[i] > 0 ? 1 : 0;
  return out;
}

std::vector<DepthSample> reproject_depth(const RigidPose& frame_pose, const PinholeIntrinsics& K,
                                         std::span<const DepthSource> sources) {
  std::vector<DepthSample> samples;
  for (const DepthSource& src : sources) {
    const ScalarField& disp = src.disparity;
    const bool same = src.pose.rotation.coeffs() == frame_pose.rotation.coeffs() &&
                      src.pose.translation == frame_pose.translation;
    const RigidPose rel = frame_pose.inverse() * src.pose;
    for (int y = 0; y < disp.height; ++y) {
      for (int x = 0; x < disp.width; ++x) {
        const double d = disp(x, y);
        if (!(d > 0)) continue;
        if (!src.valid.empty() && !src.valid(x, y)) continue;
        if (!src.dynamic.empty() && src.dynamic(x, y)) continue;
        if (same) {
          samples.push_back({Vec2(x, y), 1.0 / d});
          continue;
        }
        const Vec3 c = rel.apply(K.ray(Vec2(x, y)) / d);
        if (c.z() <= kMinDepth) continue;
        const Vec2 q(K.fx * c.x() / c.z() + K.cx, K.fy * c.y() / c.z() + K.cy);
        if (q.x() < -0.5 || q.y() < -0.5 || q.x() >= K.width - 0.5 || q.y() >= K.height - 0.5) continue;
        samples.push_back({q, c.z()});
      }
    }
  }
  if (samples.empty()) throw Error(ErrorCode::NoValidSamples, "no keyframe point reprojects into the frame");
  return samples;
}

namespace {

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Vec2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const Vec2& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

bool inside_hull(const std::vector<Vec2>& hull, const Vec2& p) {
  for (std::size_t i = 0; i < hull.size(); ++i)
    if (cross(hull[i], hull[(i + 1) % hull.size()], p) < -1e-9) return false;
  return true;
}

double hull_area(const std::vector<Vec2>& hull) {
  double a = 0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const Vec2& p = hull[i];
    const Vec2& q = hull[(i + 1) % hull.size()];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * std::abs(a);
}

// Least-squares plane through nearby filled cells, growing the window until
// the fit is well posed; nearest filled value as a last resort.
double plane_fill(const ScalarField& filled, const Mask& has, int x, int y) {
  const int limit = std::max(filled.width, filled.height);
  for (int r = 2;; r *= 2) {
    std::vector<Eigen::Vector3d> rows;
    std::vector<double> vals;
    for (int yy = std::max(0, y - r); yy <= std::min(filled.height - 1, y + r); ++yy)
      for (int xx = std::max(0, x - r); xx <= std::min(filled.width - 1, x + r); ++xx)
        if (has(xx, yy)) {
          rows.emplace_back(xx - x, yy - y, 1.0);
          vals.push_back(filled(xx, yy));
        }
    if (rows.size() >= 3) {
      Eigen::MatrixXd A(rows.size(), 3);
      Eigen::VectorXd b(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        A.row(Eigen::Index(i)) = rows[i].transpose();
        b(Eigen::Index(i)) = vals[i];
      }
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
      if (qr.rank() == 3) return qr.solve(b)(2);
    }
    if (r < limit) continue;
    double best = std::numeric_limits<double>::infinity(), v = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double d = rows[i].head<2>().squaredNorm();
      if (d < best) {
        best = d;
        v = vals[i];
      }
    }
    return v;
  }
}

}  // namespace

DepthMap interpolate_sparse_depth(std::span<const DepthSample> samples, int width, int height) {
  if (samples.size() < 3) throw Error(ErrorCode::NoValidSamples, "at least 3 samples required");
  std::vector<Vec2> pts;
  pts.reserve(samples.size());
  for (const DepthSample& s : samples) pts.push_back(s.pixel);
  const std::vector<Vec2> hull = convex_hull(pts);
  if (hull.size() < 3 || hull_area(hull) < 1e-12) throw Error(ErrorCode::NoValidSamples, "samples are collinear");

  ScalarField cell(width, height, std::numeric_limits<double>::infinity());
  Mask has(width, height, 0);
  for (const DepthSample& s : samples) {
    const int x = int(std::lround(s.pixel.x())), y = int(std::lround(s.pixel.y()));
    if (!cell.inside(x, y) || !(s.depth > 0)) continue;
    if (s.depth < cell(x, y)) cell(x, y) = s.depth;
    has(x, y) = 1;
  }

  DepthMap out;
  out.depth = ScalarField(width, height, 0.0);
  out.valid = Mask(width, height, 0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (!inside_hull(hull, Vec2(x, y))) continue;
      double v;
      if (has(x, y)) {
        v = cell(x, y);
      } else {
        int xl = x - 1, xr = x + 1, yu = y - 1, yd = y + 1;
        while (xl >= 0 && !has(xl, y)) --xl;
        while (xr < width && !has(xr, y)) ++xr;
        while (yu >= 0 && !has(x, yu)) --yu;
        while (yd < height && !has(x, yd)) ++yd;
        const bool horiz = xl >= 0 && xr < width, vert = yu >= 0 && yd < height;
        double acc = 0, wsum = 0;
        if (horiz) {
          const double f = double(x - xl) / double(xr - xl);
          const double wh = 1.0 / double(xr - xl);
          acc += wh * (cell(xl, y) + f * (cell(xr, y) - cell(xl, y)));
          wsum += wh;
        }
        if (vert) {
          const double f = double(y - yu) / double(yd - yu);
          const double wv = 1.0 / double(yd - yu);
          acc += wv * (cell(x, yu) + f * (cell(x, yd) - cell(x, yu)));
          wsum += wv;
        }
        v = wsum > 0 ? acc / wsum : plane_fill(cell, has, x, y);
      }
      if (v > 0 && std::isfinite(v)) {
        out.depth(x, y) = v;
        out.valid(x, y) = 1;
      }
    }
  }
  return out;
}

double alignment_objective(const DepthMap& mono, const DepthMap& repro, double scale, double shift) {
  double sum = 0;
  for (std::size_t i = 0; i < mono.depth.size(); ++i) {
    if (!mono.valid[i] || !repro.valid[i]) continue;
    const double r = scale * mono.depth[i] + shift - repro.depth[i];
    sum += r * r;
  }
  return sum;
}

std::pair<AffineDepthFit, DepthMap> align_mono_depth(const DepthMap& mono, const DepthMap& repro) {
  if (!mono.depth.same_shape(repro.depth) || !mono.valid.same_shape(mono.depth) ||
      !repro.valid.same_shape(repro.depth))
    throw Error(ErrorCode::ShapeMismatch, "mono and reprojected depth differ in shape");
  std::size_t n = 0;
  double mm = 0, mr = 0;
  for (std::size_t i = 0; i < mono.depth.size(); ++i) {
    if (!mono.valid[i] || !repro.valid[i]) continue;
    ++n;
    mm += mono.depth[i];
    mr += repro.depth[i];
  }
  if (n < 2) throw Error(ErrorCode::InsufficientOverlap, "fewer than 2 jointly valid pixels");
  mm /= double(n);
  mr /= double(n);
  double var = 0, cov = 0;
  for (std::size_t i = 0; i < mono.depth.size(); ++i) {
    if (!mono.valid[i] || !repro.valid[i]) continue;
    const double dm = mono.depth[i] - mm;
    var += dm * dm;
    cov += dm * (repro.depth[i] - mr);
  }
  if (var / double(n) < 1e-12) throw Error(ErrorCode::ConstantMonoDepth, "mono depth is constant over the overlap");
  AffineDepthFit fit;
  fit.scale = cov / var;
  fit.shift = mr - fit.scale * mm;
  fit.inliers = n;

  DepthMap aligned;
  aligned.frame = mono.frame;
  aligned.depth = ScalarField(mono.depth.width, mono.depth.height, 0.0);
  aligned.valid = Mask(mono.depth.width, mono.depth.height, 0);
  for (std::size_t i = 0; i < mono.depth.size(); ++i) {
    if (!mono.valid[i]) continue;
    const double v = fit.scale * mono.depth[i] + fit.shift;
    aligned.depth[i] = v;
    aligned.valid[i] = v > 0 ? 1 : 0;
  }
  return {fit, aligned};
}

}  // namespace dynrecon
