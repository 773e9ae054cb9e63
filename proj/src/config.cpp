#include "dynrecon/config.hpp"

#include <algorithm>
#include <charconv>
#include <set>
#include <sstream>
#include <variant>

namespace dynrecon {

namespace {

struct ModeField {
  bool* rgbd;
};

using Target = std::variant<int*, double*, bool*, std::string*, std::uint64_t*, std::int64_t*, ModeField>;

struct Entry {
  std::string key;
  Target target;
  std::string comment;
};

std::vector<Entry> table(RunConfig& c) {
  DeskSceneParams& s = c.scene;
  FrontEndOptions& t = c.tracker;
  ProgressiveOptions& p = c.mapper;
  return {
      {"run.mode", ModeField{&c.rgbd}, "rgbd | rgb (rgb replaces sensor depth with aligned mono depth)"},
      {"run.seed", &c.seed, "seeds the scene, the oracles and the optimizer"},
      {"run.batch_size", &p.batch_size, "frames per progressive batch"},
      {"run.holdout_every", &c.holdout_every, "hold out frame t when t % n == n/2; 0 trains on every frame"},
      {"dataset.path", &c.dataset, "dataset directory written by synth; empty generates the scene in memory"},
      {"scene.seed", &c.scene_seed, "scene seed; negative uses run.seed"},
      {"scene.width", &s.width, "image width, px"},
      {"scene.height", &s.height, "image height, px"},
      {"scene.focal", &s.focal, "focal length, px"},
      {"scene.frames", &s.frames, "sequence length"},
      {"scene.movers", &s.movers, "moving boxes (0-2)"},
      {"scene.dynamic_fraction", &s.dynamic_fraction, "approximate share of dynamic pixels"},
      {"scene.mover_speed", &s.mover_speed, "projected mover speed, px per frame"},
      {"scene.mover_spin", &s.mover_spin, "mover spin, rad per frame"},
      {"scene.camera_motion", &s.camera_motion, "camera path amplitude scale"},
      {"scene.spacing", &s.spacing, "ground-truth Gaussian spacing, m"},
      {"noise.flow_sigma", &s.noise.flow_sigma, "flow oracle noise, px"},
      {"noise.depth_scale", &s.noise.depth_scale, "hidden mono-depth scale a"},
      {"noise.depth_shift", &s.noise.depth_shift, "hidden mono-depth shift b"},
      {"noise.depth_sigma", &s.noise.depth_sigma, "depth oracle noise, m"},
      {"noise.dropout", &s.noise.dropout, "track visibility dropout rate"},
      {"tracking.keyframe_stride", &t.keyframe_stride, "frames between keyframes"},
      {"tracking.span", &t.span, "flow edges to this many previous keyframes"},
      {"tracking.local_window", &t.local_window, "keyframes refined on each insertion"},
      {"tracking.local_iterations", &t.local.iterations, "LM iterations per local solve"},
      {"tracking.global_iterations", &t.global.iterations, "LM iterations of the per-batch global solve"},
      {"tracking.damping", &t.local.damping, "initial LM damping"},
      {"tracking.quantile", &t.quantile, "share of highest residual pixels masked as dynamic"},
      {"masking.kernel", &t.masking.kernel, "median filter size for prompt seeding"},
      {"masking.min_prompt_support", &t.masking.min_prompt_support, "prompts a segment must cover"},
      {"masking.patience", &t.masking.patience, "empty frames before an object retires"},
      {"masking.merge_iou", &t.masking.merge_iou, "IoU at which a new segment joins a live object"},
      {"masking.threshold_margin", &t.threshold.margin, "adaptive quantile = margin x dynamic ratio"},
      {"masking.q_min", &t.threshold.q_min, "adaptive quantile lower bound"},
      {"masking.q_max", &t.threshold.q_max, "adaptive quantile upper bound"},
      {"progressive.overlap", &p.overlap, "frames shared with the previous batch"},
      {"progressive.min_visible", &p.min_visible, "overlap visibility that keeps a track alive"},
      {"progressive.r_search", &p.r_search, "newly-seen search radius, m"},
      {"progressive.grid_stride", &p.passes.grid_stride, "replenishing query grid, px"},
      {"progressive.dedup_radius", &p.passes.dedup_radius, "replenishing queries this close to a track are dropped, px"},
      {"progressive.nodes_per_batch", &p.nodes_per_batch, "scaffold nodes added per batch"},
      {"progressive.node_separation", &p.node_separation, "minimum node spacing, m"},
      {"progressive.topology_k", &p.topology_k, "scaffold neighbours per node"},
      {"progressive.radius_nth", &p.radius_nth, "node radius = distance to this neighbour"},
      {"progressive.geometry_steps", &p.geometry_steps, "scaffold-only optimization steps per batch"},
      {"progressive.geometry_learn_rate", &p.geometry_learn_rate, "scaffold-only learn rate"},
      {"progressive.photometric_steps", &p.photometric_steps, "photometric steps per batch"},
      {"progressive.views_per_step", &p.views_per_step, "training views per photometric step"},
      {"progressive.max_track_anchors", &p.max_track_anchors, "tracks supervising the scaffold"},
      {"progressive.prune_every", &p.prune_every, "steps between opacity pruning; 0 disables"},
      {"progressive.prune_threshold", &p.prune_threshold, "opacity below which Gaussians are pruned"},
      {"progressive.final_lr_fraction", &p.final_lr_fraction, "learn rate decay reached at the end of each batch"},
      {"seeding.stride", &p.seeding.stride, "pixel stride of Gaussian seeding"},
      {"seeding.initial_opacity", &p.seeding.initial_opacity, "opacity of new Gaussians"},
      {"seeding.footprint", &p.seeding.footprint, "Gaussian sigma relative to the seed spacing"},
      {"seeding.thickness", &p.seeding.thickness, "normal-axis sigma relative to the tangent sigma"},
      {"seeding.discontinuity", &p.seeding.discontinuity, "relative depth jump that breaks a tangent estimate"},
      {"loss.rgb", &p.weights.rgb, "L1 color"},
      {"loss.depth", &p.weights.depth, "L1 depth"},
      {"loss.track", &p.weights.track, "2D track reprojection"},
      {"loss.mask", &p.weights.mask, "dynamic opacity over static pixels"},
      {"loss.arap", &p.weights.arap, "as-rigid-as-possible"},
      {"loss.velocity", &p.weights.velocity, "node velocity"},
      {"loss.acceleration", &p.weights.acceleration, "node acceleration"},
      {"loss.mask_band", &p.weights.mask_band, "static pixels this close to the dynamic mask are ignored, px"},
      {"loss.depth_band", &p.weights.depth_band, "pixels this close to a depth jump are ignored, px"},
      {"loss.depth_jump", &p.weights.depth_jump, "relative depth change counted as a jump"},
      {"geometry.arap", &p.geometry_weights.arap, "scaffold-only ARAP weight"},
      {"geometry.velocity", &p.geometry_weights.velocity, "scaffold-only velocity weight"},
      {"geometry.acceleration", &p.geometry_weights.acceleration, "scaffold-only acceleration weight"},
      {"lr.mean", &p.rates.mean, "Gaussian means"},
      {"lr.rotation", &p.rates.rotation, "Gaussian rotations"},
      {"lr.scale", &p.rates.scale, "Gaussian log-scales"},
      {"lr.opacity", &p.rates.opacity, "Gaussian opacity logits"},
      {"lr.color", &p.rates.color, "Gaussian colors"},
      {"lr.node_translation", &p.rates.node_translation, "scaffold node translations"},
      {"lr.node_rotation", &p.rates.node_rotation, "scaffold node rotations"},
      {"lr.dw", &p.rates.dw, "skinning weight corrections"},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v, const char* what) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw Error(ErrorCode::Config, "key '" + key + "': expected " + what + ", got '" + v + "'");
  return out;
}

void assign(const std::string& key, const Target& target, const std::string& v) {
  std::visit(
      [&](auto* ptr) {
        using T = std::remove_pointer_t<decltype(ptr)>;
        if constexpr (std::is_same_v<T, int>)
          *ptr = parse_number<int>(key, v, "an integer");
        else if constexpr (std::is_same_v<T, double>) {
          *ptr = parse_number<double>(key, v, "a number");
          if (!std::isfinite(*ptr)) throw Error(ErrorCode::Config, "key '" + key + "': value is not finite");
        } else if constexpr (std::is_same_v<T, bool>) {
          if (v == "true" || v == "1")
            *ptr = true;
          else if (v == "false" || v == "0")
            *ptr = false;
          else
            throw Error(ErrorCode::Config, "key '" + key + "': expected true or false, got '" + v + "'");
        } else if constexpr (std::is_same_v<T, std::string>)
          *ptr = v;
        else if constexpr (std::is_same_v<T, std::uint64_t>)
          *ptr = parse_number<std::uint64_t>(key, v, "an unsigned integer");
        else if constexpr (std::is_same_v<T, std::int64_t>)
          *ptr = parse_number<std::int64_t>(key, v, "an integer");
      },
      std::visit(
          [](auto t) -> std::variant<int*, double*, bool*, std::string*, std::uint64_t*, std::int64_t*> {
            if constexpr (std::is_same_v<decltype(t), ModeField>)
              return t.rgbd;
            else
              return t;
          },
          target));
}

void assign_entry(const Entry& e, const std::string& v) {
  if (const auto* m = std::get_if<ModeField>(&e.target)) {
    if (v == "rgbd")
      *m->rgbd = true;
    else if (v == "rgb")
      *m->rgbd = false;
    else
      throw Error(ErrorCode::Config, "key '" + e.key + "': expected rgbd or rgb, got '" + v + "'");
    return;
  }
  assign(e.key, e.target, v);
}

std::string format(const Target& target) {
  return std::visit(
      [](auto ptr) -> std::string {
        using P = decltype(ptr);
        if constexpr (std::is_same_v<P, ModeField>)
          return *ptr.rgbd ? "rgbd" : "rgb";
        else {
          using T = std::remove_pointer_t<P>;
          if constexpr (std::is_same_v<T, std::string>)
            return *ptr;
          else if constexpr (std::is_same_v<T, bool>)
            return *ptr ? "true" : "false";
          else {
            char buf[64];
            const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, *ptr);
            return std::string(buf, p);
          }
        }
      },
      target);
}

std::string render(RunConfig& c, const std::function<bool(const std::string&)>& keep) {
  std::ostringstream os;
  std::string section;
  for (const Entry& e : table(c)) {
    if (!keep(e.key)) continue;
    const std::string sec = e.key.substr(0, e.key.find('.'));
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << "# " << sec << '\n';
      section = sec;
    }
    os << e.key << " = " << format(e.target) << "  # " << e.comment << '\n';
  }
  return os.str();
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.mapper.photometric_steps = 1500;
  return c;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const Entry& e : table(config))
    if (e.key == key) return assign_entry(e, value);
  throw Error(ErrorCode::Config, "unknown key '" + key + "'");
}

void apply_config_text(RunConfig& config, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto c = line.find('#'); c != std::string::npos) line.resize(c);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::Config, "line " + std::to_string(lineno) + ": expected 'section.key = value', got '" +
                                         line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || key.find('.') == std::string::npos)
      throw Error(ErrorCode::Config, "line " + std::to_string(lineno) + ": key '" + key + "' is not section.key");
    if (!seen.insert(key).second) throw Error(ErrorCode::Config, "key '" + key + "' given twice");
    set_config_value(config, key, value);
  }
  config.tracker.rgbd = config.rgbd;
  config.tracker.global.damping = config.tracker.local.damping;
  config.mapper.seed = config.seed;
}

std::string config_text(const RunConfig& config) {
  RunConfig c = config;
  return render(c, [](const std::string&) { return true; });
}

std::string scene_config_text(const RunConfig& config) {
  RunConfig c = config;
  c.scene_seed = std::int64_t(config.effective_scene_seed());
  return render(c, [](const std::string& k) { return k.rfind("scene.", 0) == 0 || k.rfind("noise.", 0) == 0; });
}

std::vector<std::string> config_keys() {
  RunConfig c;
  std::vector<std::string> keys;
  for (const Entry& e : table(c)) keys.push_back(e.key);
  return keys;
}

}  // namespace dynrecon
