#include "dynrecon/masking.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace dynrecon {

double FineMask::dynamic_ratio() const {
  return mask.empty() ? 0.0 : double(count_nonzero(mask)) / double(mask.size());
}

LabelRasterSegmenter::LabelRasterSegmenter(std::vector<Mask> labels) : labels_(std::move(labels)) {}

const Mask& LabelRasterSegmenter::labels(int frame) const {
  if (frame < 0 || frame >= int(labels_.size()))
    throw Error(ErrorCode::OracleFailure, "segmenter has no labels for frame " + std::to_string(frame));
  return labels_[std::size_t(frame)];
}

std::vector<Mask> LabelRasterSegmenter::segment(int frame, std::span<const PromptPoint> prompts) {
  const Mask& lab = labels(frame);
  std::vector<Mask> out;
  for (const PromptPoint& p : prompts) {
    if (!lab.inside(p.x, p.y)) throw Error(ErrorCode::OracleFailure, "prompt outside image");
    Mask m(lab.width, lab.height, 0);
    const std::uint8_t id = lab(p.x, p.y);
    if (id != 0)
      for (std::size_t i = 0; i < lab.size(); ++i) m[i] = lab[i] == id ? 1 : 0;
    out.push_back(std::move(m));
  }
  return out;
}

Mask LabelRasterSegmenter::propagate(int from_frame, const Mask& prior, int to_frame) {
  const Mask& src = labels(from_frame);
  const Mask& dst = labels(to_frame);
  if (!prior.same_shape(src)) throw Error(ErrorCode::OracleFailure, "prior mask shape mismatch");
  std::array<std::size_t, 256> votes{};
  for (std::size_t i = 0; i < prior.size(); ++i)
    if (prior[i]) ++votes[src[i]];
  std::size_t best = 0;
  for (std::size_t id = 1; id < votes.size(); ++id)
    if (votes[id] > votes[best] || (best == 0 && votes[id] > 0)) best = id;
  Mask out(dst.width, dst.height, 0);
  if (best == 0) return out;
  for (std::size_t i = 0; i < dst.size(); ++i) out[i] = dst[i] == best ? 1 : 0;
  return out;
}

Mask median_filter(const Mask& mask, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw Error(ErrorCode::EvenKernel, "median kernel must be odd and >= 1");
  const int r = kernel / 2, w = mask.width, h = mask.height;
  const int half = kernel * kernel / 2;
  Mask out(w, h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int ones = 0;
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = std::clamp(y + dy, 0, h - 1);
        for (int dx = -r; dx <= r; ++dx) ones += mask(std::clamp(x + dx, 0, w - 1), yy) ? 1 : 0;
      }
      out(x, y) = ones > half ? 1 : 0;
    }
  }
  return out;
}

std::vector<Region> connected_regions(const Mask& mask) {
  const int w = mask.width, h = mask.height;
  std::vector<int> label(mask.size(), -1);
  std::vector<Region> regions;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask(x, y) || label[std::size_t(y) * w + x] >= 0) continue;
      const int id = int(regions.size());
      Region reg;
      stack.assign(1, {x, y});
      label[std::size_t(y) * w + x] = id;
      while (!stack.empty()) {
        const auto [cx, cy] = stack.back();
        stack.pop_back();
        reg.pixels.push_back({cx, cy});
        const int nx[4] = {cx - 1, cx + 1, cx, cx};
        const int ny[4] = {cy, cy, cy - 1, cy + 1};
        for (int k = 0; k < 4; ++k) {
          if (!mask.inside(nx[k], ny[k]) || !mask(nx[k], ny[k])) continue;
          int& l = label[std::size_t(ny[k]) * w + nx[k]];
          if (l >= 0) continue;
          l = id;
          stack.push_back({nx[k], ny[k]});
        }
      }
      double sx = 0, sy = 0;
      for (const auto& [px, py] : reg.pixels) {
        sx += px;
        sy += py;
      }
      const double n = double(reg.pixels.size());
      const int rx = int(std::lround(sx / n)), ry = int(std::lround(sy / n));
      if (mask.inside(rx, ry) && label[std::size_t(ry) * w + rx] == id) {
        reg.centroid = {rx, ry, id + 1};
      } else {
        // nearest region pixel to the centroid; raster order breaks ties
        std::pair<int, int> best = reg.pixels.front();
        long best_d = std::numeric_limits<long>::max();
        for (const auto& [px, py] : reg.pixels) {
          const long d = long(px - rx) * (px - rx) + long(py - ry) * (py - ry);
          if (d < best_d || (d == best_d && std::make_pair(py, px) < std::make_pair(best.second, best.first))) {
            best_d = d;
            best = {px, py};
          }
        }
        reg.centroid = {best.first, best.second, id + 1};
      }
      regions.push_back(std::move(reg));
    }
  }
  return regions;
}

std::vector<PromptPoint> seed_prompts(const Mask& coarse, int kernel) {
  std::vector<PromptPoint> prompts;
  for (const Region& r : connected_regions(median_filter(coarse, kernel))) prompts.push_back(r.centroid);
  return prompts;
}

bool validate_segment(const Mask& candidate, const Mask& coarse, int min_prompt_support, int kernel) {
  int support = 0;
  for (const PromptPoint& p : seed_prompts(coarse, kernel))
    if (candidate.inside(p.x, p.y) && candidate(p.x, p.y)) ++support;
  return support >= min_prompt_support;
}

double adapt_threshold(const FineMask& prev, double base_quantile, const ThresholdOptions& o) {
  const double rho = prev.dynamic_ratio();
  if (rho <= 0) return base_quantile;
  return std::clamp(o.margin * rho, o.q_min, o.q_max);
}

namespace {

double iou(const Mask& a, const Mask& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

FineMask compose(int frame, int w, int h, const std::map<int, Mask>& objects) {
  FineMask fm;
  fm.frame = frame;
  fm.mask = Mask(w, h, 0);
  fm.object_ids = Mask(w, h, 0);
  for (const auto& [id, m] : objects) {
    if (id > 255) throw Error(ErrorCode::OracleFailure, "object id exceeds the 8-bit label range");
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i] && !fm.object_ids[i]) {
        fm.object_ids[i] = std::uint8_t(id);
        fm.mask[i] = 1;
      }
  }
  return fm;
}

FineMask step_frame(MaskTrackState& state, int frame, const Mask& coarse, SegmentationOracle& oracle,
                    const MaskingOptions& opt, int w, int h) {
  std::map<int, Mask> current;
  for (auto it = state.objects.begin(); it != state.objects.end();) {
    TrackedObject& obj = it->second;
    Mask m = obj.frame == frame ? obj.mask : oracle.propagate(obj.frame, obj.mask, frame);
    if (count_nonzero(m) == 0) {
      if (++obj.empty_frames > opt.patience) {
        state.retired.push_back(it->first);
        it = state.objects.erase(it);
        continue;
      }
    } else {
      obj.empty_frames = 0;
      obj.mask = m;
      obj.frame = frame;
      current[it->first] = m;
    }
    ++it;
  }

  if (!coarse.empty() && count_nonzero(coarse)) {
    // Regions holding several objects yield one prompt per round; the part
    // left uncovered is prompted again.
    for (int round = 0; round < 4; ++round) {
      Mask residual = coarse;
      for (const auto& [id, m] : current)
        for (std::size_t i = 0; i < m.size(); ++i)
          if (m[i]) residual[i] = 0;
      std::vector<PromptPoint> fresh;
      for (const PromptPoint& p : seed_prompts(residual, opt.kernel)) {
        bool covered = false;
        for (const auto& [id, m] : current) covered = covered || m(p.x, p.y);
        if (!covered) fresh.push_back(p);
      }
      if (fresh.empty()) break;
      bool added = false;
      std::vector<Mask> candidates = oracle.segment(frame, fresh);
      for (Mask& cand : candidates) {
        if (count_nonzero(cand) == 0) continue;
        if (!validate_segment(cand, residual, opt.min_prompt_support, opt.kernel)) continue;
        bool duplicate = false;
        for (const auto& [id, m] : current) duplicate = duplicate || iou(cand, m) > opt.merge_iou;
        if (duplicate) continue;
        const int id = state.next_id++;
        state.objects[id] = TrackedObject{frame, cand, 0};
        current[id] = std::move(cand);
        added = true;
      }
      if (!added) break;
    }
  }
  return compose(frame, w, h, current);
}

}  // namespace

std::vector<FineMask> init_fine_masks(std::span<const int> frames, std::span<const Mask> coarse,
                                      SegmentationOracle& oracle, MaskTrackState& state,
                                      const MaskingOptions& options) {
  state = MaskTrackState{};
  return extend_fine_masks(state, frames, coarse, oracle, options);
}

std::vector<FineMask> extend_fine_masks(MaskTrackState& state, std::span<const int> frames,
                                        std::span<const Mask> coarse, SegmentationOracle& oracle,
                                        const MaskingOptions& options) {
  if (coarse.size() != frames.size()) throw Error(ErrorCode::ShapeMismatch, "one coarse mask per frame expected");
  int w = 0, h = 0;
  for (const Mask& c : coarse)
    if (!c.empty()) {
      w = c.width;
      h = c.height;
    }
  for (const auto& [id, obj] : state.objects) {
    w = obj.mask.width;
    h = obj.mask.height;
  }
  std::vector<FineMask> out;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    if (w == 0 && h == 0) {
      FineMask empty;
      empty.frame = frames[k];
      out.push_back(empty);
      continue;
    }
    out.push_back(step_frame(state, frames[k], coarse[k], oracle, options, w, h));
  }
  return out;
}

}  // namespace dynrecon
