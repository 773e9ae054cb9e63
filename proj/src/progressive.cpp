#include "dynrecon/progressive.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <unordered_map>

namespace dynrecon {

namespace {

Vec2 project_pixel(const RigidPose& pose, const PinholeIntrinsics& K, const Vec3& X, double& z) {
  const Vec3 c = pose.apply_inverse(X);
  z = c.z();
  return {K.fx * c.x() / c.z() + K.cx, K.fy * c.y() / c.z() + K.cy};
}

bool in_image(const Vec2& p, const PinholeIntrinsics& K) {
  return p.x() >= -0.5 && p.y() >= -0.5 && p.x() < K.width - 0.5 && p.y() < K.height - 0.5;
}

// Uniform grid over points for radius queries.
class PointGrid {
 public:
  PointGrid(std::span<const Vec3> points, double cell) : points_(points), cell_(cell) {
    for (std::size_t i = 0; i < points.size(); ++i) cells_[key(points[i])].push_back(i);
  }

  bool any_within(const Vec3& q, double r) const {
    const Eigen::Vector3i c = coord(q);
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto it = cells_.find(pack(c + Eigen::Vector3i(dx, dy, dz)));
          if (it == cells_.end()) continue;
          for (std::size_t i : it->second)
            if ((points_[i] - q).norm() <= r) return true;
        }
    return false;
  }

 private:
  Eigen::Vector3i coord(const Vec3& p) const {
    return {int(std::floor(p.x() / cell_)), int(std::floor(p.y() / cell_)), int(std::floor(p.z() / cell_))};
  }
  static std::int64_t pack(const Eigen::Vector3i& c) {
    return (std::int64_t(c.x()) * 73856093) ^ (std::int64_t(c.y()) * 19349663) ^ (std::int64_t(c.z()) * 83492791);
  }
  std::int64_t key(const Vec3& p) const { return pack(coord(p)); }

  std::span<const Vec3> points_;
  double cell_;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> cells_;
};

// Backprojections of every track visible at t.
std::vector<Vec3> visible_points(std::span<const Track2D> tracks, int t, const RigidPose& pose, const DepthMap& depth,
                                 const Mask& labels, const PinholeIntrinsics& K) {
  std::vector<Vec3> pts;
  for (const Track2D& tr : tracks) {
    if (std::size_t(t) >= tr.visible.size() || !tr.visible[std::size_t(t)]) continue;
    const double z = sample_depth(depth, labels.empty() ? nullptr : &labels, tr.positions[std::size_t(t)]);
    if (z > 0) pts.push_back(pose.apply(K.ray(tr.positions[std::size_t(t)]) * z));
  }
  return pts;
}

// Lifts one track over [0, T); false when no timestep could be lifted.
bool lift_one(const Track2D& tr, std::span<const RigidPose> poses, std::span<const DepthMap> depths,
              std::span<const Mask> masks, const PinholeIntrinsics& K, Track3D& out) {
  const std::size_t T = poses.size();
  out.id = tr.id;
  out.positions.assign(T, Vec3::Zero());
  out.visible.assign(T, 0);
  bool any = false;
  for (std::size_t t = 0; t < T && t < tr.positions.size(); ++t) {
    if (t >= tr.visible.size() || !tr.visible[t]) continue;
    const Mask* lab = t < masks.size() && !masks[t].empty() ? &masks[t] : nullptr;
    const double z = sample_depth(depths[t], lab, tr.positions[t]);
    if (!(z > 0)) continue;
    out.positions[t] = poses[t].apply(K.ray(tr.positions[t]) * z);
    out.visible[t] = 1;
    any = true;
  }
  if (any) fill_track_gaps(out);
  return any;
}

// Pixels near a projected static mean at consistent depth count as covered.
Mask static_coverage(const std::vector<Gaussian3D>& statics, const RigidPose& pose, const DepthMap& depth,
                     const PinholeIntrinsics& K) {
  Mask cov(K.width, K.height, 0);
  for (const Gaussian3D& g : statics) {
    double z;
    const Vec2 p = project_pixel(pose, K, g.mean, z);
    if (z <= 1e-6 || !in_image(p, K)) continue;
    const int x = int(std::lround(p.x())), y = int(std::lround(p.y()));
    if (!depth.valid(x, y) || std::abs(depth.depth(x, y) - z) > 0.05 * z) continue;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (cov.inside(x + dx, y + dy)) cov(x + dx, y + dy) = 1;
  }
  return cov;
}

class StageTimer {
 public:
  StageTimer(const StageLogger& log, int batch) : log_(log), batch_(batch) {}
  template <typename F>
  void operator()(const std::string& name, F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn();
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      throw StageError(name, e);
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (log_) log_(batch_, name, ms);
  }

 private:
  const StageLogger& log_;
  int batch_;
};

ScalarField mask_to_field(const Mask& m) {
  ScalarField f(m.width, m.height, 0.0);
  for (std::size_t i = 0; i < m.size(); ++i) f[i] = m[i] ? 1.0 : 0.0;
  return f;
}

}  // namespace

std::vector<int> BatchWindow::new_frames() const {
  std::vector<int> out;
  for (int t = new_begin; t < end; ++t) out.push_back(t);
  return out;
}

std::vector<int> BatchWindow::overlap_frames() const {
  std::vector<int> out;
  for (int t = overlap_begin; t < new_begin; ++t) out.push_back(t);
  return out;
}

BatchWindow make_window(int processed, int end, int overlap) {
  if (end < processed || processed < 0) throw Error(ErrorCode::EmptyInput, "batch window ends before it starts");
  return {std::max(0, processed - overlap), processed, end};
}

std::vector<TrackStatus> classify_tracks(std::span<const Track2D> tracks, const BatchWindow& w, int min_visible) {
  std::vector<TrackStatus> out;
  out.reserve(tracks.size());
  for (const Track2D& tr : tracks) {
    TrackStatus s{tr.id, TrackClass::Retired};
    if (tr.query_frame >= w.new_begin)
      s.cls = TrackClass::New;
    else if (tr.visible_count(w.overlap_begin, w.new_begin) >= min_visible)
      s.cls = TrackClass::RecentlyVisible;
    out.push_back(s);
  }
  return out;
}

Mask detect_newly_seen(const Mask& dynamic, const DepthMap& depth, const RigidPose& pose, const PinholeIntrinsics& K,
                       std::span<const Vec3> lifted, double r_search) {
  Mask out(dynamic.width, dynamic.height, 0);
  const PointGrid grid(lifted, std::max(r_search, 1e-9));
  for (int y = 0; y < dynamic.height; ++y)
    for (int x = 0; x < dynamic.width; ++x) {
      if (!dynamic(x, y) || !depth.valid(x, y) || !(depth.depth(x, y) > 0)) continue;
      const Vec3 X = pose.apply(K.ray(Vec2(x, y)) * depth.depth(x, y));
      if (!grid.any_within(X, r_search)) out(x, y) = 1;
    }
  return out;
}

MultiStageResult multi_stage_tracking(std::vector<Track2D>& tracks, std::span<const TrackStatus> status,
                                      const BatchWindow& w, std::span<const Mask> dynamic,
                                      const std::function<Mask(int, std::span<const Track2D>)>& detect,
                                      OracleBundle& oracle, std::uint64_t& next_id, const MultiStageOptions& opt) {
  MultiStageResult res;
  if (w.end <= w.new_begin) return res;

  // pass 1: re-query the surface point of each recently visible track
  std::vector<TrackQuery> queries;
  std::vector<std::size_t> owners;
  for (std::size_t i = 0; i < tracks.size() && i < status.size(); ++i) {
    if (status[i].cls != TrackClass::RecentlyVisible) continue;
    const Track2D& tr = tracks[i];
    for (int t = w.new_begin - 1; t >= w.overlap_begin; --t)
      if (std::size_t(t) < tr.visible.size() && tr.visible[std::size_t(t)]) {
        queries.push_back({t, tr.positions[std::size_t(t)]});
        owners.push_back(i);
        break;
      }
  }
  if (!queries.empty()) {
    const auto ext = oracle.tracks(queries, w.overlap_begin, w.end, 0);
    for (std::size_t k = 0; k < ext.size(); ++k) {
      Track2D& tr = tracks[owners[k]];
      if (tr.positions.size() < ext[k].positions.size()) {
        tr.positions.resize(ext[k].positions.size(), Vec2::Zero());
        tr.visible.resize(ext[k].visible.size(), 0);
      }
      for (int t = w.new_begin; t < w.end; ++t) {
        tr.positions[std::size_t(t)] = ext[k].positions[std::size_t(t)];
        tr.visible[std::size_t(t)] = ext[k].visible[std::size_t(t)];
      }
    }
    res.extended = ext.size();
  }

  // pass 2: newly-seen pixels, frame by frame so earlier queries count as known
  std::vector<Track2D> known(tracks.begin(), tracks.end());
  for (int t = w.new_begin; t < w.end; ++t) {
    const Mask fresh = detect(t, known);
    std::vector<TrackQuery> q;
    for (int y = 0; y < fresh.height; ++y)
      for (int x = 0; x < fresh.width; ++x)
        if (fresh(x, y)) q.push_back({t, Vec2(x, y)});
    if (q.empty()) continue;
    auto fresh_tracks = oracle.tracks(q, w.overlap_begin, w.end, next_id);
    next_id += q.size();
    for (auto& tr : fresh_tracks) {
      known.push_back(tr);
      res.newly_seen.push_back(std::move(tr));
    }
  }

  // pass 3: replenish density on a grid, skipping queries near existing tracks
  for (int t = w.new_begin; t < w.end; ++t) {
    if (std::size_t(t) >= dynamic.size() || dynamic[std::size_t(t)].empty()) continue;
    const Mask& dyn = dynamic[std::size_t(t)];
    std::vector<Vec2> occupied;
    for (const Track2D& tr : known)
      if (std::size_t(t) < tr.visible.size() && tr.visible[std::size_t(t)]) occupied.push_back(tr.positions[std::size_t(t)]);
    std::vector<TrackQuery> q;
    for (int y = 0; y < dyn.height; y += opt.grid_stride)
      for (int x = 0; x < dyn.width; x += opt.grid_stride) {
        if (!dyn(x, y)) continue;
        const Vec2 p(x, y);
        bool near = false;
        for (const Vec2& o : occupied)
          if ((o - p).norm() <= opt.dedup_radius) {
            near = true;
            break;
          }
        if (!near) q.push_back({t, p});
      }
    if (q.empty()) continue;
    auto more = oracle.tracks(q, w.overlap_begin, w.end, next_id);
    next_id += q.size();
    for (auto& tr : more) {
      known.push_back(tr);
      res.replenish.push_back(std::move(tr));
    }
  }
  return res;
}

void warp_track_to_past(Track3D& track, const ScaffoldGraph& previous) {
  int first = -1;
  for (std::size_t t = 0; t < track.visible.size(); ++t)
    if (track.visible[t]) {
      first = int(t);
      break;
    }
  if (first <= 0 || previous.nodes.empty() || first >= previous.timesteps()) return;
  const Vec3 X = track.positions[std::size_t(first)];
  const Skinning sk = skinning_weights(X, previous, first);
  const std::vector<double> zero(sk.nodes.size(), 0.0);
  for (int t = 0; t < first; ++t)
    track.positions[std::size_t(t)] = warp_point(X, sk.nodes, zero, previous, first, t).apply(X);
}

void FrontEnd::advance(int end, OracleBundle& oracle, const PinholeIntrinsics& K, const FrontEndOptions& o) {
  if (end <= frames) return;
  const int begin = frames;
  graph.K = K;
  poses.resize(std::size_t(end));
  depths.resize(std::size_t(end));
  fine.resize(std::size_t(end));
  coarse.resize(std::size_t(end));
  is_keyframe.resize(std::size_t(end), 0);
  if (begin == 0) quantile = o.quantile;

  auto initial_depth = [&](int id) { return o.rgbd ? oracle.sensor_depth(id) : oracle.mono_depth(id); };

  // fine masks for frames [fine_frames, upto); keyframes switch to them
  auto extend_fine = [&](int upto) {
    if (upto <= fine_frames) return;
    std::vector<int> ids;
    std::vector<Mask> evidence;
    for (int t = fine_frames; t < upto; ++t) {
      ids.push_back(t);
      evidence.push_back(coarse[std::size_t(t)]);
    }
    const std::vector<FineMask> fm =
        fine_frames == 0 ? init_fine_masks(ids, evidence, oracle.segmenter(), mask_state, o.masking)
                         : extend_fine_masks(mask_state, ids, evidence, oracle.segmenter(), o.masking);
    for (std::size_t k = 0; k < fm.size(); ++k) {
      const int t = ids[k];
      fine[std::size_t(t)] = fm[k];
      if (is_keyframe[std::size_t(t)]) {
        suppression[std::size_t(graph.find(t))] = mask_to_field(fm[k].mask);
        quantile = adapt_threshold(fm[k], o.quantile, o.threshold);
      }
    }
    fine_frames = upto;
  };

  // keyframe insertion with a local refinement window
  for (int t = begin; t < end; ++t) {
    if (t % o.keyframe_stride != 0 && t != end - 1) continue;
    Keyframe kf;
    kf.id = t;
    kf.pose = graph.keyframes.empty() ? RigidPose::identity() : graph.keyframes.back().pose;
    const DepthMap d = initial_depth(t);
    kf.disparity = ScalarField(K.width, K.height, 0.0);
    kf.valid = Mask(K.width, K.height, 0);
    for (std::size_t i = 0; i < d.depth.size(); ++i)
      if (d.valid[i] && d.depth[i] > 0) {
        kf.disparity[i] = 1.0 / d.depth[i];
        kf.valid[i] = 1;
      }
    kf.fixed_disparity = o.rgbd;
    const int before = int(graph.keyframes.size());
    for (int j = std::max(0, before - o.span); j < before; ++j) {
      const int src = graph.keyframes[std::size_t(j)].id;
      graph.edges.push_back(oracle.flow(src, t));
      graph.edges.push_back(oracle.flow(t, src));
    }
    graph.keyframes.push_back(std::move(kf));
    suppression.push_back(ScalarField(K.width, K.height, 0.0));
    is_keyframe[std::size_t(t)] = 1;
    if (graph.keyframes.size() < 2) continue;

    const int n = int(graph.keyframes.size());
    const int first = std::max(0, n - o.local_window);
    auto local_dba = [&](bool refine, bool fix_disparity) {
      FactorGraph local;
      local.K = K;
      std::vector<ScalarField> local_supp;
      for (int k = first; k < n; ++k) {
        local.keyframes.push_back(graph.keyframes[std::size_t(k)]);
        // pose-only passes keep free disparities from soaking up motion
        if (fix_disparity) local.keyframes.back().fixed_disparity = true;
        local_supp.push_back(suppression[std::size_t(k)]);
      }
      for (const FlowObservation& e : graph.edges)
        if (local.find(e.source) >= 0 && local.find(e.target) >= 0) local.edges.push_back(e);
      DbaOptions lo = o.local;
      lo.refine_masks = refine;
      lo.quantile = quantile;
      dba_solve(local, local_supp, lo);
      for (int k = first; k < n; ++k) {
        Keyframe& dst = graph.keyframes[std::size_t(k)];
        dst.pose = local.keyframes[std::size_t(k - first)].pose;
        if (!fix_disparity) dst.disparity = local.keyframes[std::size_t(k - first)].disparity;
      }
      return local_supp;
    };
    // coarse masks for keyframes still waiting on a fine mask
    const auto refined = local_dba(true, true);
    for (int k = first; k < n; ++k) {
      const int id = graph.keyframes[std::size_t(k)].id;
      if (id < fine_frames) continue;
      Mask c(K.width, K.height, 0);
      for (std::size_t i = 0; i < c.size(); ++i) c[i] = refined[std::size_t(k - first)][i] > 0.5;
      coarse[std::size_t(id)] = c;
    }
    // prompted fine masks up to this keyframe, then a second pass under them
    extend_fine(t + 1);
    local_dba(false, true);
    if (!o.rgbd) local_dba(false, false);
  }
  extend_fine(end);

  // global refinement with fine masks
  std::vector<RigidPose> before_global;
  for (const Keyframe& kf : graph.keyframes) before_global.push_back(kf.pose);
  if (graph.keyframes.size() >= 2) {
    DbaOptions go = o.global;
    go.refine_masks = false;
    dba_solve(graph, suppression, go);
  }
  for (const Keyframe& kf : graph.keyframes) poses[std::size_t(kf.id)] = kf.pose;

  // non-keyframes: old ones follow their left keyframe, new ones are solved
  auto left_keyframe = [&](int t) {
    int best = -1;
    for (std::size_t k = 0; k < graph.keyframes.size(); ++k)
      if (graph.keyframes[k].id < t) best = int(k);
    return best;
  };
  for (int t = 0; t < begin; ++t) {
    if (is_keyframe[std::size_t(t)]) continue;
    const int a = left_keyframe(t);
    const RigidPose corr = graph.keyframes[std::size_t(a)].pose * before_global[std::size_t(a)].inverse();
    poses[std::size_t(t)] = corr * poses[std::size_t(t)];
  }
  for (int t = begin; t < end; ++t) {
    if (is_keyframe[std::size_t(t)]) continue;
    const int a = left_keyframe(t);
    const Keyframe& ka = graph.keyframes[std::size_t(a)];
    const Keyframe& kb = graph.keyframes[std::size_t(a + 1)];
    NonKeyframe nk;
    nk.id = t;
    nk.initial_pose = ka.pose;
    nk.flows = {oracle.flow(ka.id, t), oracle.flow(kb.id, t)};
    poses[std::size_t(t)] = solve_nonkeyframe_pose(graph, nk, suppression, o.local);
  }

  // depth: sensor depth, or mono depth aligned to reprojected keyframe depth
  for (int t = o.rgbd ? begin : 0; t < end; ++t) {
    if (o.rgbd) {
      depths[std::size_t(t)] = oracle.sensor_depth(t);
      continue;
    }
    std::vector<DepthSource> sources;
    const int a = is_keyframe[std::size_t(t)] ? graph.find(t) : left_keyframe(t);
    for (int k = std::max(0, a - 1); k <= std::min<int>(int(graph.keyframes.size()) - 1, a + 1); ++k) {
      const Keyframe& kf = graph.keyframes[std::size_t(k)];
      sources.push_back({kf.pose, kf.disparity, fine[std::size_t(kf.id)].mask, kf.valid});
    }
    const auto samples = reproject_depth(poses[std::size_t(t)], K, sources);
    const DepthMap repro = interpolate_sparse_depth(samples, K.width, K.height);
    auto [fit, aligned] = align_mono_depth(oracle.mono_depth(t), repro);
    aligned.frame = t;
    depths[std::size_t(t)] = std::move(aligned);
  }
  frames = end;
}

KeyframeUpdate FrontEnd::snapshot() const {
  KeyframeUpdate u;
  u.poses = poses;
  u.depths = depths;
  for (const FineMask& f : fine) u.masks.push_back(f.mask);
  u.keyframe = is_keyframe;
  return u;
}

std::vector<TrainingView> training_views(const ProgressiveState& s, std::span<const RgbImage> images,
                                         std::span<const std::uint8_t> train) {
  std::vector<TrainingView> views;
  for (int t = 0; t < s.frames; ++t) {
    if (!train.empty() && !train[std::size_t(t)]) continue;
    TrainingView v;
    v.frame = t;
    v.pose = s.poses[std::size_t(t)];
    v.image = images[std::size_t(t)];
    v.depth = s.depths[std::size_t(t)];
    v.dynamic = s.masks[std::size_t(t)];
    views.push_back(std::move(v));
  }
  return views;
}

void process_batch(ProgressiveState& s, const KeyframeUpdate& update, std::span<const RgbImage> images, int end,
                   OracleBundle& oracle, const PinholeIntrinsics& K, const ProgressiveOptions& o,
                   std::span<const std::uint8_t> train, const StageLogger& log) {
  if (end <= s.frames) return;
  if (update.poses.size() < std::size_t(end) || update.depths.size() < std::size_t(end) ||
      update.masks.size() < std::size_t(end) || images.size() < std::size_t(end))
    throw Error(ErrorCode::ShapeMismatch, "tracker update does not cover the batch");
  StageTimer stage(log, s.batches);
  const BatchWindow w = make_window(s.frames, end, o.overlap);
  auto is_train = [&](int t) { return train.empty() || train[std::size_t(t)]; };

  stage("update", [&] {
    const std::size_t old = std::size_t(s.frames);
    if (old > 0) {
      const std::span<const RigidPose> new_poses(update.poses.data(), old);
      const std::span<const DepthMap> new_depths(update.depths.data(), old);
      deform_static(s.map.statics, s.map.anchors, s.poses, s.depths, new_poses, new_depths);
      std::vector<Gaussian3D> canon;
      std::vector<StaticAnchor> where;
      for (const DynamicGaussian& dg : s.map.dynamics) {
        double z;
        const Vec2 p = project_pixel(s.poses[std::size_t(dg.t_ref)], K, dg.canonical.mean, z);
        canon.push_back(dg.canonical);
        where.push_back({dg.t_ref, p});
      }
      deform_static(canon, where, s.poses, s.depths, new_poses, new_depths);
      for (std::size_t i = 0; i < canon.size(); ++i) s.map.dynamics[i].canonical = canon[i];
      if (!s.scaffold.nodes.empty())
        s.scaffold = reanchor(s.scaffold, s.tracks, s.poses, s.depths, new_poses, new_depths);
    }
    s.poses.assign(update.poses.begin(), update.poses.begin() + end);
    s.depths.assign(update.depths.begin(), update.depths.begin() + end);
    s.masks.assign(update.masks.begin(), update.masks.begin() + end);
  });

  std::vector<TrackStatus> status;
  stage("classify", [&] {
    status = classify_tracks(s.tracks, w, o.min_visible);
    s.retired.resize(s.tracks.size(), 0);
    for (std::size_t i = 0; i < status.size(); ++i) {
      if (s.retired[i]) status[i].cls = TrackClass::Retired;
      if (status[i].cls == TrackClass::Retired && w.new_begin > 0) s.retired[i] = 1;
    }
  });

  std::vector<Mask> fresh(static_cast<std::size_t>(end));
  std::size_t first_new_track = s.tracks.size();
  stage("track", [&] {
    auto detect = [&](int t, std::span<const Track2D> known) {
      const auto pts = visible_points(known, t, s.poses[std::size_t(t)], s.depths[std::size_t(t)],
                                      s.masks[std::size_t(t)], K);
      Mask m = detect_newly_seen(s.masks[std::size_t(t)], s.depths[std::size_t(t)], s.poses[std::size_t(t)], K, pts,
                                 o.r_search);
      fresh[std::size_t(t)] = m;
      return m;
    };
    MultiStageResult r =
        multi_stage_tracking(s.tracks, status, w, s.masks, detect, oracle, s.next_track_id, o.passes);
    for (auto& tr : r.newly_seen) {
      s.tracks.push_back(std::move(tr));
      s.origin.push_back(2);
      s.retired.push_back(0);
    }
    for (auto& tr : r.replenish) {
      s.tracks.push_back(std::move(tr));
      s.origin.push_back(3);
      s.retired.push_back(0);
    }
  });

  ScaffoldGraph previous = s.scaffold;
  std::vector<std::uint8_t> lifted_ok(s.tracks.size(), 0);
  stage("lift", [&] {
    s.lifted.resize(s.tracks.size());
    for (std::size_t i = 0; i < s.tracks.size(); ++i) {
      Track3D t3;
      if (!lift_one(s.tracks[i], s.poses, s.depths, s.masks, K, t3)) {
        // keep whatever was lifted before, padded to the new length
        Track3D& keep = s.lifted[i];
        keep.id = s.tracks[i].id;
        const Vec3 last = keep.positions.empty() ? Vec3::Zero() : keep.positions.back();
        keep.positions.resize(std::size_t(end), last);
        keep.visible.resize(std::size_t(end), 0);
        continue;
      }
      warp_track_to_past(t3, previous);
      s.lifted[i] = std::move(t3);
      lifted_ok[i] = 1;
    }
  });

  stage("scaffold", [&] {
    std::unordered_map<std::uint64_t, std::size_t> index;
    for (std::size_t i = 0; i < s.tracks.size(); ++i) index[s.tracks[i].id] = i;
    if (s.scaffold.nodes.empty()) {
      std::vector<Track3D> usable;
      for (std::size_t i = 0; i < s.lifted.size(); ++i)
        if (lifted_ok[i]) usable.push_back(s.lifted[i]);
      if (usable.empty()) return;
      s.scaffold = sample_nodes(usable, o.nodes_per_batch, o.node_separation, o.topology_k);
      init_radii(s.scaffold, o.radius_nth);
    } else {
      const int T0 = s.scaffold.timesteps();
      for (ScaffoldNode& node : s.scaffold.nodes) {
        const std::size_t i = index.at(node.track_id);
        const bool frozen = s.retired[i] || !lifted_ok[i];
        node.transforms.resize(std::size_t(end));
        node.observed.resize(std::size_t(end), 0);
        for (int t = T0; t < end; ++t) {
          if (frozen) {
            node.transforms[std::size_t(t)] = node.transforms[std::size_t(T0 - 1)];
            node.observed[std::size_t(t)] = 1;
          } else {
            node.transforms[std::size_t(t)] = RigidPose::from_translation(s.lifted[i].positions[std::size_t(t)]);
            node.observed[std::size_t(t)] = s.lifted[i].visible[std::size_t(t)];
          }
        }
      }
      // new nodes come only from newly-seen tracks of this batch
      const int ta = s.scaffold.anchor_time;
      std::vector<Vec3> candidates, existing;
      std::vector<std::size_t> owner;
      for (std::size_t i = first_new_track; i < s.tracks.size(); ++i)
        if (s.origin[i] == 2 && lifted_ok[i]) {
          candidates.push_back(s.lifted[i].positions[std::size_t(ta)]);
          owner.push_back(i);
        }
      for (std::size_t m = 0; m < s.scaffold.nodes.size(); ++m) existing.push_back(s.scaffold.position(int(m), ta));
      const auto picked = farthest_point_indices(candidates, existing, o.nodes_per_batch, o.node_separation);
      for (std::size_t k : picked) {
        const Track3D& tr = s.lifted[owner[k]];
        ScaffoldNode node;
        node.track_id = tr.id;
        for (int t = 0; t < end; ++t) node.transforms.push_back(RigidPose::from_translation(tr.positions[std::size_t(t)]));
        node.observed = tr.visible;
        s.scaffold.nodes.push_back(std::move(node));
      }
      build_topology(s.scaffold, o.topology_k);
      init_radii(s.scaffold, o.radius_nth);
    }
    GeometryOptions go;
    go.steps = o.geometry_steps;
    go.learn_rate = o.geometry_learn_rate;
    go.weights = o.geometry_weights;
    optimize_geometry(s.scaffold, go);
  });

  stage("seed", [&] {
    std::vector<TrainingView> views;
    std::vector<Mask> select;
    for (int t = w.new_begin; t < end; ++t) {
      if (!is_train(t)) continue;
      TrainingView v;
      v.frame = t;
      v.pose = s.poses[std::size_t(t)];
      v.image = images[std::size_t(t)];
      v.depth = s.depths[std::size_t(t)];
      v.dynamic = s.masks[std::size_t(t)];
      views.push_back(std::move(v));
      select.push_back(fresh[std::size_t(t)].empty() ? Mask(K.width, K.height, 0) : fresh[std::size_t(t)]);
    }
    if (!s.scaffold.nodes.empty()) init_dynamic(s.map, views, select, s.scaffold, K, o.seeding);
    for (const TrainingView& v : views) {
      const Mask cov = static_coverage(s.map.statics, v.pose, v.depth, K);
      try {
        init_static(s.map, std::span<const TrainingView>(&v, 1), K, std::span<const Mask>(&cov, 1), o.seeding);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NoStaticPixels) throw;
      }
    }
    if (s.map.statics.empty() && !views.empty())
      throw Error(ErrorCode::NoStaticPixels, "no static pixel seeded in batch " + std::to_string(s.batches));
  });

  s.frames = end;
  stage("optimize", [&] {
    const auto views = training_views(s, images, train);
    if (views.empty() || (s.map.statics.empty() && s.map.dynamics.empty())) return;
    std::vector<TrackAnchor> anchors;
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < s.lifted.size(); ++i)
      if (std::find(s.lifted[i].visible.begin(), s.lifted[i].visible.end(), 1) != s.lifted[i].visible.end())
        candidates.push_back(i);
    if (!s.scaffold.nodes.empty() && !candidates.empty()) {
      const std::size_t n = std::min<std::size_t>(candidates.size(), std::size_t(std::max(0, o.max_track_anchors)));
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = candidates[k * candidates.size() / n];
        const Track3D& tr = s.lifted[i];
        TrackAnchor a;
        a.track = i;
        a.t_src = int(std::find(tr.visible.begin(), tr.visible.end(), 1) - tr.visible.begin());
        a.point = tr.positions[std::size_t(a.t_src)];
        a.nodes = skinning_neighborhood(a.point, s.scaffold, a.t_src);
        anchors.push_back(std::move(a));
      }
    }
    LossInputs in;
    in.views = views;
    in.tracks = s.tracks;
    in.anchors = anchors;
    in.poses = s.poses;
    in.K = K;
    s.optimizer.rates = o.rates;
    MapOptimizeOptions mo;
    mo.steps = o.photometric_steps;
    mo.views_per_step = o.views_per_step;
    mo.prune_every = o.prune_every;
    mo.prune_threshold = o.prune_threshold;
    mo.final_lr_fraction = o.final_lr_fraction;
    mo.seed = mix_seed(o.seed, 0x0b7a, std::uint64_t(s.batches));
    mo.weights = o.weights;
    const auto trace = optimize_map(s.map, s.scaffold, in, s.optimizer, mo);
    s.trace.insert(s.trace.end(), trace.begin(), trace.end());
  });
  ++s.batches;
}

}  // namespace dynrecon
