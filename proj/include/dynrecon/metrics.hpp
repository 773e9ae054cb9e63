#pragma once

#include <vector>

#include "dynrecon/common.hpp"
#include "dynrecon/geometry.hpp"
#include "dynrecon/io.hpp"

namespace dynrecon {

/// Index pairs (estimate, reference) whose timestamps differ by at most
/// `tolerance`; each side is used once, closest pairs first.
std::vector<std::pair<std::size_t, std::size_t>> associate(std::span<const double> estimate,
                                                           std::span<const double> reference, double tolerance = 0.02);

struct AteResult {
  double rmse = 0;
  SimilarityTransform alignment;  // estimate → reference
  std::size_t matched = 0;
};

/// Translational RMSE after a similarity alignment of the matched estimate
/// positions onto the reference. Throws InsufficientAssociations below 3 pairs.
AteResult ate(const Trajectory& estimate, const Trajectory& reference, double tolerance = 0.02);
double ate_rmse(const Trajectory& estimate, const Trajectory& reference, double tolerance = 0.02);

/// 10·log10(1/MSE) over the pixels selected by `mask` (all when null),
/// 100 when MSE < 1e-10. Throws ShapeMismatch, EmptyMask.
double psnr(const RgbImage& a, const RgbImage& b, const Mask* mask = nullptr);

/// Mean SSIM over channels with an 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, over window centres that lie
/// fully inside the image (and inside `mask` when given).
double ssim(const RgbImage& a, const RgbImage& b, const Mask* mask = nullptr);

}  // namespace dynrecon
