#pragma once

// Brute-force reference renderer used as a test oracle: every pixel visits
// every Gaussian, computes its own footprint from scratch, and sorts the
// contributors by their per-pixel ray-intersection depth.

#include <algorithm>
#include <cmath>
#include <random>
#include <tuple>
#include <vector>

#include <Eigen/Eigenvalues>

#include "dynrecon/splatting.hpp"

namespace dynrecon::testing {

struct ReferenceImage {
  RgbImage color;
  ScalarField depth;
  ScalarField opacity;
};

inline ReferenceImage render_reference(const std::vector<Gaussian3D>& gs, const RigidPose& pose,
                                       const PinholeIntrinsics& K) {
  const double alpha_max = 0.999, t_min = 1e-4, floor = 0.3;
  ReferenceImage out{RgbImage(K.width, K.height, Vec3::Zero()), ScalarField(K.width, K.height, 0.0),
                     ScalarField(K.width, K.height, 0.0)};
  const Eigen::Matrix4d world_to_cam = pose.matrix().inverse();
  for (int y = 0; y < K.height; ++y) {
    for (int x = 0; x < K.width; ++x) {
      struct Hit {
        double depth;
        std::uint64_t id;
        double alpha;
        Vec3 color;
      };
      std::vector<Hit> hits;
      for (const auto& g : gs) {
        const Eigen::Vector4d hc = world_to_cam * Eigen::Vector4d(g.mean.x(), g.mean.y(), g.mean.z(), 1.0);
        const Vec3 c = hc.head<3>();
        if (c.z() <= 0.01) continue;
        const Mat3 w = world_to_cam.topLeftCorner<3, 3>();
        const Mat3 sigma_c = w * g.covariance() * w.transpose();
        Eigen::Matrix<double, 2, 3> j;
        j << K.fx / c.z(), 0, -K.fx * c.x() / (c.z() * c.z()), 0, K.fy / c.z(), -K.fy * c.y() / (c.z() * c.z());
        Mat2 cov = j * sigma_c * j.transpose();
        Eigen::SelfAdjointEigenSolver<Mat2> es(cov);
        const double lmin = es.eigenvalues()(0);
        if (lmin < floor) cov += (floor - lmin) * Mat2::Identity();
        const Vec2 mu(K.fx * c.x() / c.z() + K.cx, K.fy * c.y() / c.z() + K.cy);
        const Vec2 d = Vec2(x, y) - mu;
        const double m2 = d.dot(cov.inverse() * d);
        if (m2 >= 2.0 * std::log(255.0)) continue;
        double taper = 1.0;
        if (m2 > 9.0) {
          const double t = (m2 - 9.0) / (2.0 * std::log(255.0) - 9.0);
          taper = 1.0 - t * t * (3.0 - 2.0 * t);
        }
        const double a = std::min(alpha_max, sigmoid(g.opacity_logit) * std::exp(-0.5 * m2) * taper);
        if (a <= 0) continue;
        const Vec3 ray((x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0);
        const Mat3 inv = sigma_c.inverse();
        const double depth = ray.dot(inv * c) / ray.dot(inv * ray);
        hits.push_back({depth, g.id, a, g.color});
      }
      std::sort(hits.begin(), hits.end(),
                [](const Hit& a, const Hit& b) { return std::tie(a.depth, a.id) < std::tie(b.depth, b.id); });
      double T = 1;
      for (const auto& hit : hits) {
        if (T * (1 - hit.alpha) < t_min) break;
        out.color(x, y) += hit.color * hit.alpha * T;
        out.depth(x, y) += hit.depth * hit.alpha * T;
        out.opacity(x, y) += hit.alpha * T;
        T *= 1 - hit.alpha;
      }
    }
  }
  return out;
}

/// Random 16×16 scene with Gaussians on well separated depth layers so the
/// per-tile center-depth order agrees with the per-pixel order.
inline std::vector<Gaussian3D> random_layered_scene(std::mt19937_64& rng, int count, PinholeIntrinsics& K) {
  K = PinholeIntrinsics{20, 20, 7.5, 7.5, 16, 16};
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> nrm(0, 1);
  std::vector<Gaussian3D> gs;
  for (int i = 0; i < count; ++i) {
    const double z = std::pow(1.5, i);
    const Vec3 mean((u(rng) - 0.5) * 0.7 * z, (u(rng) - 0.5) * 0.7 * z, z);
    const Vec3 scale(0.03 + 0.05 * u(rng), 0.03 + 0.05 * u(rng), 0.01 + 0.02 * u(rng));
    Quat q(nrm(rng), nrm(rng), nrm(rng), nrm(rng));
    gs.push_back(Gaussian3D::make(mean, q.normalized(), scale * z, 0.2 + 0.7 * u(rng),
                                  Vec3(u(rng), u(rng), u(rng)), std::uint64_t(100 + i)));
  }
  return gs;
}

}  // namespace dynrecon::testing
