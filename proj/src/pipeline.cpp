#include "dynrecon/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace dynrecon {

namespace {

std::string num(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

void write_loss_row(std::ostream& os, int batch, const LossReport& l) {
  os << batch << ',' << l.step << ',' << num(l.rgb) << ',' << num(l.depth) << ',' << num(l.track) << ','
     << num(l.mask) << ',' << num(l.arap) << ',' << num(l.velocity) << ',' << num(l.acceleration) << ','
     << num(l.total) << '\n';
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

}  // namespace

SceneSpec scene_from_config(const std::string& scene_config) {
  RunConfig c = default_run_config();
  apply_config_text(c, scene_config);
  return make_desk_scene(c.scene, c.effective_scene_seed());
}

Dataset load_or_generate(const RunConfig& config) {
  if (!config.dataset.empty()) {
    Dataset data = load_dataset(config.dataset, scene_from_config);
    RunConfig c = default_run_config();
    apply_config_text(c, read_text(fs::path(config.dataset) / "scene.cfg"));
    data.seed = c.effective_scene_seed();
    return data;
  }
  const std::uint64_t s = config.effective_scene_seed();
  return generate(make_desk_scene(config.scene, s), s);
}

Dataset synthesize(const RunConfig& config, const fs::path& dir) {
  const std::uint64_t s = config.effective_scene_seed();
  Dataset data = generate(make_desk_scene(config.scene, s), s);
  save_dataset(dir, data, scene_config_text(config));
  return data;
}

std::vector<std::uint8_t> train_split(int frames, int holdout_every) {
  std::vector<std::uint8_t> train(std::size_t(std::max(frames, 0)), 1);
  if (holdout_every > 1)
    for (int t = 0; t < frames; ++t)
      if (t % holdout_every == holdout_every / 2) train[std::size_t(t)] = 0;
  return train;
}

fs::path checkpoint_path(const fs::path& dir, int batch) {
  char name[32];
  std::snprintf(name, sizeof name, "checkpoint_%03d.bin", batch);
  return dir / name;
}

fs::path latest_checkpoint(const fs::path& dir) {
  for (int b = 999; b >= 0; --b)
    if (fs::exists(checkpoint_path(dir, b))) return checkpoint_path(dir, b);
  throw Error(ErrorCode::Io, "no checkpoint_NNN.bin in " + dir.string());
}

Checkpoint make_checkpoint(const Dataset& data, const RunResult& result) {
  Checkpoint c;
  c.K = data.K();
  c.timestamps.assign(data.timestamps.begin(), data.timestamps.begin() + result.state.frames);
  c.state = result.state;
  c.tracker = result.tracker;
  return c;
}

std::string loss_trace_csv(const RunResult& result) {
  std::ostringstream os;
  os << "batch,step,rgb,depth,track,mask,arap,velocity,acceleration,total\n";
  for (std::size_t i = 0; i < result.state.trace.size(); ++i)
    write_loss_row(os, result.trace_batch[i], result.state.trace[i]);
  return os.str();
}

RunResult run_pipeline(const RunConfig& config, const Dataset& data, const fs::path& out, const StageLogger& log) {
  if (data.frames() == 0) throw StageError("input", Error(ErrorCode::EmptyInput, "dataset has no frames"));
  if (config.mapper.batch_size <= 0)
    throw StageError("config", Error(ErrorCode::Config, "key 'run.batch_size' must be positive"));

  FrontEndOptions tracker = config.tracker;
  tracker.rgbd = config.rgbd;
  ProgressiveOptions mapper = config.mapper;
  mapper.seed = config.seed;
  const auto train = train_split(data.frames(), config.holdout_every);

  std::ofstream progress;
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(out / "run.cfg", config_text(config));
    progress.open(out / "progress.log");
    if (!progress) throw StageError("output", Error(ErrorCode::Io, "cannot write " + (out / "progress.log").string()));
  }
  const StageLogger logger = [&](int batch, const std::string& stage, double ms) {
    if (progress.is_open()) {
      progress << "batch=" << batch << " stage=" << stage << " ms=" << std::fixed << std::setprecision(3) << ms
               << '\n';
      progress.flush();
    }
    if (log) log(batch, stage, ms);
  };

  SyntheticOracles oracle(data, config.seed);
  RunResult r;
  int processed = 0;
  while (processed < data.frames()) {
    const int end = std::min(processed + mapper.batch_size, data.frames());
    const int batch = r.state.batches;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      r.tracker.advance(end, oracle, data.K(), tracker);
    } catch (const Error& e) {
      throw StageError("tracker", e);
    }
    logger(batch, "tracker",
           std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());

    process_batch(r.state, r.tracker.snapshot(), data.images, end, oracle, data.K(), mapper, train, logger);
    r.trace_batch.resize(r.state.trace.size(), batch);
    processed = end;

    if (!out.empty()) {
      try {
        save_checkpoint(checkpoint_path(out, batch), make_checkpoint(data, r));
      } catch (const Error& e) {
        throw StageError("output", e);
      }
    }
  }

  r.trajectory.timestamps = data.timestamps;
  r.trajectory.poses = r.state.poses;
  if (!out.empty()) {
    try {
      write_trajectory(out / "trajectory.txt", r.trajectory);
      write_text(out / "loss_trace.csv", loss_trace_csv(r));
    } catch (const Error& e) {
      throw StageError("output", e);
    }
  }
  return r;
}

Metrics evaluate(const Checkpoint& checkpoint, const Dataset& data, std::span<const std::uint8_t> train) {
  const ProgressiveState& s = checkpoint.state;
  if (s.frames > data.frames())
    throw Error(ErrorCode::ShapeMismatch, "checkpoint covers " + std::to_string(s.frames) + " frames, dataset has " +
                                              std::to_string(data.frames()));
  Metrics m;
  Trajectory est{std::vector<double>(data.timestamps.begin(), data.timestamps.begin() + s.frames), s.poses};
  Trajectory gt{data.timestamps, data.poses};
  const AteResult a = ate(est, gt);
  m.ate = a.rmse;
  m.ate_scale = a.alignment.scale;
  m.matched = a.matched;

  m.frames.resize(std::size_t(s.frames));
  parallel_for(std::size_t(s.frames), [&](std::size_t t, int) {
    const RenderOutput r = render_map(s.map, s.scaffold, s.poses[t], checkpoint.K, int(t));
    FrameScore& f = m.frames[t];
    f.frame = int(t);
    f.train = train.empty() || train[t];
    f.psnr = psnr(r.color, data.images[t]);
    f.ssim = ssim(r.color, data.images[t]);
  });
  for (const FrameScore& f : m.frames) {
    if (f.train) {
      m.train_psnr += f.psnr;
      m.train_ssim += f.ssim;
      ++m.train_views;
    } else {
      m.heldout_psnr += f.psnr;
      m.heldout_ssim += f.ssim;
      ++m.heldout_views;
    }
  }
  if (m.train_views) {
    m.train_psnr /= m.train_views;
    m.train_ssim /= m.train_views;
  }
  if (m.heldout_views) {
    m.heldout_psnr /= m.heldout_views;
    m.heldout_ssim /= m.heldout_views;
  }
  return m;
}

std::string metrics_text(const Metrics& m) {
  std::ostringstream os;
  os << "ate_rmse = " << num(m.ate) << '\n'
     << "ate_scale = " << num(m.ate_scale) << '\n'
     << "ate_matched = " << m.matched << '\n'
     << "train_psnr = " << num(m.train_psnr) << '\n'
     << "train_ssim = " << num(m.train_ssim) << '\n'
     << "train_views = " << m.train_views << '\n'
     << "heldout_psnr = " << num(m.heldout_psnr) << '\n'
     << "heldout_ssim = " << num(m.heldout_ssim) << '\n'
     << "heldout_views = " << m.heldout_views << '\n';
  for (const FrameScore& f : m.frames) {
    char key[32];
    std::snprintf(key, sizeof key, "frame_%03d", f.frame);
    os << key << ".split = " << (f.train ? "train" : "heldout") << '\n'
       << key << ".psnr = " << num(f.psnr) << '\n'
       << key << ".ssim = " << num(f.ssim) << '\n';
  }
  return os.str();
}

std::vector<RgbImage> render_trajectory(const Checkpoint& checkpoint, const Trajectory& poses) {
  poses.validate();
  const auto& ts = checkpoint.timestamps;
  if (ts.empty()) throw Error(ErrorCode::EmptyInput, "checkpoint has no frames");
  std::vector<RgbImage> out(poses.size());
  parallel_for(poses.size(), [&](std::size_t i, int) {
    const double stamp = poses.timestamps[i];
    const auto it = std::lower_bound(ts.begin(), ts.end(), stamp);
    std::size_t t = std::size_t(std::min<std::ptrdiff_t>(it - ts.begin(), std::ptrdiff_t(ts.size()) - 1));
    if (t > 0 && std::abs(ts[t - 1] - stamp) <= std::abs(ts[t] - stamp)) --t;
    out[i] = render_map(checkpoint.state.map, checkpoint.state.scaffold, poses.poses[i], checkpoint.K, int(t)).color;
  });
  return out;
}

std::string report(const fs::path& run_dir) {
  std::ostringstream os;
  const fs::path metrics = run_dir / "metrics.txt";
  const fs::path trace = run_dir / "loss_trace.csv";
  if (!fs::exists(metrics) && !fs::exists(trace))
    throw Error(ErrorCode::Io, "neither metrics.txt nor loss_trace.csv in " + run_dir.string());

  if (fs::exists(metrics)) {
    os << "metric,value\n";
    std::istringstream in(read_text(metrics));
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos || line.rfind("frame_", 0) == 0) continue;
      os << line.substr(0, eq) << ',' << line.substr(eq + 3) << '\n';
    }
  }

  if (fs::exists(trace)) {
    struct Summary {
      long steps = 0;
      std::vector<std::string> first, last;
    };
    std::map<int, Summary> batches;
    std::istringstream in(read_text(trace));
    std::string line;
    std::getline(in, line);
    const auto header = split(line, ',');
    if (header.size() != 10 || header[0] != "batch") throw Error(ErrorCode::Io, trace.string() + ": unexpected header");
    int lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto cells = split(line, ',');
      if (cells.size() != header.size())
        throw Error(ErrorCode::Io, trace.string() + ": line " + std::to_string(lineno) + " has the wrong column count");
      Summary& s = batches[std::stoi(cells[0])];
      if (s.steps++ == 0) s.first = cells;
      s.last = cells;
    }
    if (fs::exists(metrics)) os << '\n';
    os << "batch,steps";
    for (std::size_t c = 2; c < header.size(); ++c) os << ",first_" << header[c] << ",last_" << header[c];
    os << '\n';
    for (const auto& [b, s] : batches) {
      os << b << ',' << s.steps;
      for (std::size_t c = 2; c < header.size(); ++c) os << ',' << s.first[c] << ',' << s.last[c];
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace dynrecon
