#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dynrecon/config.hpp"
#include "dynrecon/io.hpp"
#include "dynrecon/metrics.hpp"
#include "dynrecon/progressive.hpp"
#include "dynrecon/synthetic.hpp"

namespace dynrecon {

/// Scene behind a scene.cfg text (scene.* and noise.* keys).
SceneSpec scene_from_config(const std::string& scene_config);

/// Dataset from `config.dataset` when set, else generated in memory.
Dataset load_or_generate(const RunConfig& config);
/// Generates the configured scene and writes it to `dir`.
Dataset synthesize(const RunConfig& config, const fs::path& dir);

/// 1 for training frames, 0 for held-out ones.
std::vector<std::uint8_t> train_split(int frames, int holdout_every);

struct RunResult {
  ProgressiveState state;
  FrontEnd tracker;
  Trajectory trajectory;               // estimated camera-to-world poses
  std::vector<int> trace_batch;        // batch of each entry of state.trace
};

/// Tracking plus progressive reconstruction over the whole sequence. With a
/// non-empty `out` writes run.cfg, checkpoint_%03d.bin per batch,
/// trajectory.txt, loss_trace.csv and progress.log.
RunResult run_pipeline(const RunConfig& config, const Dataset& data, const fs::path& out = {},
                       const StageLogger& log = {});

struct FrameScore {
  int frame = 0;
  bool train = true;
  double psnr = 0;
  double ssim = 0;
};

struct Metrics {
  double ate = 0;
  double ate_scale = 1;
  std::size_t matched = 0;
  double train_psnr = 0, train_ssim = 0;
  double heldout_psnr = 0, heldout_ssim = 0;
  int train_views = 0, heldout_views = 0;
  std::vector<FrameScore> frames;
};

/// Poses and map of `checkpoint` rendered at every frame and scored
/// against `data`; `train` marks training frames (empty = all).
Metrics evaluate(const Checkpoint& checkpoint, const Dataset& data, std::span<const std::uint8_t> train);
/// `key = value` lines, fixed order, no timings.
std::string metrics_text(const Metrics& metrics);

/// Renders the checkpoint's map from each pose; the deformation time of
/// each pose is the checkpoint frame with the nearest timestamp.
std::vector<RgbImage> render_trajectory(const Checkpoint& checkpoint, const Trajectory& poses);

std::string loss_trace_csv(const RunResult& result);

/// Text table of the metrics file and a per-batch summary of the loss trace.
std::string report(const fs::path& run_dir);

Checkpoint make_checkpoint(const Dataset& data, const RunResult& result);
fs::path checkpoint_path(const fs::path& dir, int batch);
/// Highest-numbered checkpoint in `dir`; throws Io when there is none.
fs::path latest_checkpoint(const fs::path& dir);

}  // namespace dynrecon
