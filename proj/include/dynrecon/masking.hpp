#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "dynrecon/common.hpp"

namespace dynrecon {

struct PromptPoint {
  int x = 0;
  int y = 0;
  int object_hint = 0;
};

struct FineMask {
  int frame = -1;
  Mask mask;        // 1 = dynamic
  Mask object_ids;  // 0 = static

  double dynamic_ratio() const;
};

/// Promptable segmenter contract. `segment` returns one mask per prompt
/// (possibly empty); `propagate` carries an object mask from one frame
/// into another (empty when the object is gone).
class SegmentationOracle {
 public:
  virtual ~SegmentationOracle() = default;
  virtual std::vector<Mask> segment(int frame, std::span<const PromptPoint> prompts) = 0;
  virtual Mask propagate(int from_frame, const Mask& prior, int to_frame) = 0;
};

/// Segmenter backed by per-frame instance label rasters (0 = background):
/// a prompt selects the instance under it, propagation follows the
/// instance covering most of the prior mask.
class LabelRasterSegmenter : public SegmentationOracle {
 public:
  explicit LabelRasterSegmenter(std::vector<Mask> labels);
  std::vector<Mask> segment(int frame, std::span<const PromptPoint> prompts) override;
  Mask propagate(int from_frame, const Mask& prior, int to_frame) override;

 private:
  const Mask& labels(int frame) const;
  std::vector<Mask> labels_;
};

/// Majority vote over an odd k×k window with edge clamping. Throws EvenKernel.
Mask median_filter(const Mask& mask, int kernel);

struct Region {
  std::vector<std::pair<int, int>> pixels;
  PromptPoint centroid;  // rounded, snapped onto the region
};

/// 4-connected components of the non-zero pixels, in raster order of their
/// first pixel.
std::vector<Region> connected_regions(const Mask& mask);

/// One prompt per region of median_filter(coarse, kernel).
std::vector<PromptPoint> seed_prompts(const Mask& coarse, int kernel = 5);

/// Accept iff at least `min_prompt_support` region centroids of the
/// filtered coarse mask fall inside the candidate.
bool validate_segment(const Mask& candidate, const Mask& coarse, int min_prompt_support = 1, int kernel = 5);

struct ThresholdOptions {
  double margin = 1.5;
  double q_min = 0.05;
  double q_max = 0.5;
};

/// clamp(margin·ρ, q_min, q_max) with ρ the dynamic ratio of `prev`.
/// An empty previous mask keeps the base quantile.
double adapt_threshold(const FineMask& prev, double base_quantile, const ThresholdOptions& options = {});

struct MaskingOptions {
  int kernel = 5;
  int min_prompt_support = 1;
  int patience = 5;
  double merge_iou = 0.5;
};

struct TrackedObject {
  int frame = -1;  // frame of `mask`
  Mask mask;
  int empty_frames = 0;
};

/// Object lifecycle carried between calls.
struct MaskTrackState {
  std::map<int, TrackedObject> objects;  // live ids
  std::vector<int> retired;
  int next_id = 1;
};

/// Seeds objects on the first frame and extends through the rest.
/// `coarse` holds one mask per frame (empty Mask = no coarse evidence).
std::vector<FineMask> init_fine_masks(std::span<const int> frames, std::span<const Mask> coarse,
                                      SegmentationOracle& oracle, MaskTrackState& state,
                                      const MaskingOptions& options = {});

/// Propagates live objects into each frame and spawns validated new objects
/// from coarse regions not already covered.
std::vector<FineMask> extend_fine_masks(MaskTrackState& state, std::span<const int> frames,
                                        std::span<const Mask> coarse, SegmentationOracle& oracle,
                                        const MaskingOptions& options = {});

}  // namespace dynrecon
