#include "dynrecon/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace dynrecon {

std::vector<std::pair<std::size_t, std::size_t>> associate(std::span<const double> est, std::span<const double> ref,
                                                           double tol) {
  struct Candidate {
    double gap;
    std::size_t i, j;
  };
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < est.size(); ++i) {
    // reference stamps are sorted; only neighbours within tol can match
    auto lo = std::lower_bound(ref.begin(), ref.end(), est[i] - tol);
    for (auto it = lo; it != ref.end() && *it <= est[i] + tol; ++it)
      cands.push_back({std::abs(*it - est[i]), i, std::size_t(it - ref.begin())});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.gap < b.gap; });
  std::vector<char> used_e(est.size(), 0), used_r(ref.size(), 0);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const Candidate& c : cands) {
    if (used_e[c.i] || used_r[c.j]) continue;
    used_e[c.i] = used_r[c.j] = 1;
    out.emplace_back(c.i, c.j);
  }
  std::sort(out.begin(), out.end());
  return out;
}

AteResult ate(const Trajectory& est, const Trajectory& ref, double tol) {
  est.validate();
  ref.validate();
  const auto pairs = associate(est.timestamps, ref.timestamps, tol);
  if (pairs.size() < 3)
    throw Error(ErrorCode::InsufficientAssociations,
                std::to_string(pairs.size()) + " timestamps associated within " + std::to_string(tol) + " s");
  std::vector<Vec3> a, b;
  for (const auto& [i, j] : pairs) {
    a.push_back(est.poses[i].translation);
    b.push_back(ref.poses[j].translation);
  }
  AteResult r;
  r.alignment = umeyama_align(a, b);
  r.matched = pairs.size();
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (r.alignment.apply(a[k]) - b[k]).squaredNorm();
  r.rmse = std::sqrt(s / double(a.size()));
  return r;
}

double ate_rmse(const Trajectory& est, const Trajectory& ref, double tol) { return ate(est, ref, tol).rmse; }

double psnr(const RgbImage& a, const RgbImage& b, const Mask* mask) {
  if (!a.same_shape(b) || (mask && !mask->same_shape(a))) throw Error(ErrorCode::ShapeMismatch, "psnr inputs differ in shape");
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    s += (a[i] - b[i]).squaredNorm();
    n += 3;
  }
  if (n == 0) throw Error(ErrorCode::EmptyMask, "psnr mask selects no pixel");
  const double mse = s / double(n);
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const RgbImage& a, const RgbImage& b, const Mask* mask) {
  if (!a.same_shape(b) || (mask && !mask->same_shape(a))) throw Error(ErrorCode::ShapeMismatch, "ssim inputs differ in shape");
  constexpr int R = 5;
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double g[2 * R + 1], gs = 0;
  for (int k = -R; k <= R; ++k) gs += g[k + R] = std::exp(-k * k / (2 * 1.5 * 1.5));
  for (double& v : g) v /= gs;
  const int W = a.width, H = a.height;
  if (W < 2 * R + 1 || H < 2 * R + 1) throw Error(ErrorCode::ShapeMismatch, "ssim needs images of at least 11x11");
  double total = 0;
  std::size_t count = 0;
  for (int y = R; y < H - R; ++y)
    for (int x = R; x < W - R; ++x) {
      if (mask && !(*mask)(x, y)) continue;
      for (int c = 0; c < 3; ++c) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = -R; dy <= R; ++dy)
          for (int dx = -R; dx <= R; ++dx) {
            const double w = g[dy + R] * g[dx + R];
            const double va = a(x + dx, y + dy)[c], vb = b(x + dx, y + dy)[c];
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        ++count;
      }
    }
  if (count == 0) throw Error(ErrorCode::EmptyMask, "ssim mask selects no window");
  return total / double(count);
}

}  // namespace dynrecon
