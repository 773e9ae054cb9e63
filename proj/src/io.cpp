#include "dynrecon/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dynrecon {

namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& path, const char* data, std::size_t n) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(data, std::streamsize(n));
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

// Netpbm header: magic, width, height, maxval, one whitespace byte.
std::size_t parse_netpbm(const std::vector<char>& b, const char* magic, int& w, int& h, const fs::path& path) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < b.size() && std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
      if (pos < b.size() && b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string t;
    while (pos < b.size() && !std::isspace(static_cast<unsigned char>(b[pos]))) t += b[pos++];
    return t;
  };
  if (token() != magic) throw Error(ErrorCode::Io, path.string() + " is not a " + magic + " file");
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    if (std::stoi(token()) != 255) throw Error(ErrorCode::Io, path.string() + ": only 8-bit rasters are supported");
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::Io, path.string() + ": malformed header");
  }
  if (w <= 0 || h <= 0) throw Error(ErrorCode::Io, path.string() + ": bad size");
  return pos + 1;
}

std::uint8_t to_byte(double v) { return std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// ---- checkpoint encoding ----

void put(BinaryWriter& w, const Vec3& v) {
  for (int i = 0; i < 3; ++i) w.pod(v[i]);
}
void get(BinaryReader& r, Vec3& v) {
  for (int i = 0; i < 3; ++i) v[i] = r.pod<double>();
}
void put(BinaryWriter& w, const Vec2& v) {
  w.pod(v.x());
  w.pod(v.y());
}
void get(BinaryReader& r, Vec2& v) {
  v.x() = r.pod<double>();
  v.y() = r.pod<double>();
}
void put(BinaryWriter& w, const Quat& q) {
  w.pod(q.w());
  w.pod(q.x());
  w.pod(q.y());
  w.pod(q.z());
}
void get(BinaryReader& r, Quat& q) {
  const double a = r.pod<double>(), b = r.pod<double>(), c = r.pod<double>(), d = r.pod<double>();
  q = Quat(a, b, c, d);
}
void put(BinaryWriter& w, const RigidPose& p) {
  put(w, p.rotation);
  put(w, p.translation);
}
void get(BinaryReader& r, RigidPose& p) {
  get(r, p.rotation);
  get(r, p.translation);
}

// Declared up front so the container templates below see every overload.
void put(BinaryWriter& w, double v);
void get(BinaryReader& r, double& v);
void put(BinaryWriter& w, std::uint8_t v);
void get(BinaryReader& r, std::uint8_t& v);
void put(BinaryWriter& w, int v);
void get(BinaryReader& r, int& v);
void put(BinaryWriter& w, const DepthMap& v);
void get(BinaryReader& r, DepthMap& v);
void put(BinaryWriter& w, const Gaussian3D& v);
void get(BinaryReader& r, Gaussian3D& v);
void put(BinaryWriter& w, const StaticAnchor& v);
void get(BinaryReader& r, StaticAnchor& v);
void put(BinaryWriter& w, const DynamicGaussian& v);
void get(BinaryReader& r, DynamicGaussian& v);
void put(BinaryWriter& w, const ScaffoldNode& v);
void get(BinaryReader& r, ScaffoldNode& v);
void put(BinaryWriter& w, const AdamSlot& v);
void get(BinaryReader& r, AdamSlot& v);
void put(BinaryWriter& w, const Track2D& v);
void get(BinaryReader& r, Track2D& v);
void put(BinaryWriter& w, const Track3D& v);
void get(BinaryReader& r, Track3D& v);
void put(BinaryWriter& w, const LossReport& v);
void get(BinaryReader& r, LossReport& v);
void put(BinaryWriter& w, const Keyframe& v);
void get(BinaryReader& r, Keyframe& v);
void put(BinaryWriter& w, const FlowObservation& v);
void get(BinaryReader& r, FlowObservation& v);
void put(BinaryWriter& w, const FineMask& v);
void get(BinaryReader& r, FineMask& v);
void put(BinaryWriter& w, const GaussianMap& v);
void get(BinaryReader& r, GaussianMap& v);
void put(BinaryWriter& w, const ScaffoldGraph& v);
void get(BinaryReader& r, ScaffoldGraph& v);
void put(BinaryWriter& w, const OptimizerState& v);
void get(BinaryReader& r, OptimizerState& v);
void put(BinaryWriter& w, const MaskTrackState& v);
void get(BinaryReader& r, MaskTrackState& v);
template <typename T>
void put(BinaryWriter& w, const Raster<T>& m);
template <typename T>
void get(BinaryReader& r, Raster<T>& m);

template <typename T>
void put(BinaryWriter& w, const std::vector<T>& v) {
  w.pod<std::uint64_t>(v.size());
  for (const T& x : v) put(w, x);
}
template <typename T>
void get(BinaryReader& r, std::vector<T>& v) {
  v.resize(r.count(1));
  for (T& x : v) get(r, x);
}

void put(BinaryWriter& w, double v) { w.pod(v); }
void get(BinaryReader& r, double& v) { v = r.pod<double>(); }
void put(BinaryWriter& w, std::uint8_t v) { w.pod(v); }
void get(BinaryReader& r, std::uint8_t& v) { v = r.pod<std::uint8_t>(); }
void put(BinaryWriter& w, int v) { w.pod<std::int64_t>(v); }
void get(BinaryReader& r, int& v) { v = int(r.pod<std::int64_t>()); }

template <typename T>
void put(BinaryWriter& w, const Raster<T>& m) {
  w.pod<std::int64_t>(m.width);
  w.pod<std::int64_t>(m.height);
  for (const T& x : m.data) put(w, x);
}
template <typename T>
void get(BinaryReader& r, Raster<T>& m) {
  const auto W = r.pod<std::int64_t>(), H = r.pod<std::int64_t>();
  if (W < 0 || H < 0 || W * H > (std::int64_t(1) << 32)) throw Error(ErrorCode::Io, "corrupt raster in checkpoint");
  m = Raster<T>(int(W), int(H));
  for (T& x : m.data) get(r, x);
}

void put(BinaryWriter& w, const PinholeIntrinsics& K) {
  w.pod(K.fx);
  w.pod(K.fy);
  w.pod(K.cx);
  w.pod(K.cy);
  w.pod<std::int64_t>(K.width);
  w.pod<std::int64_t>(K.height);
}
void get(BinaryReader& r, PinholeIntrinsics& K) {
  K.fx = r.pod<double>();
  K.fy = r.pod<double>();
  K.cx = r.pod<double>();
  K.cy = r.pod<double>();
  K.width = int(r.pod<std::int64_t>());
  K.height = int(r.pod<std::int64_t>());
}

void put(BinaryWriter& w, const DepthMap& d) {
  put(w, d.frame);
  put(w, d.depth);
  put(w, d.valid);
}
void get(BinaryReader& r, DepthMap& d) {
  get(r, d.frame);
  get(r, d.depth);
  get(r, d.valid);
}

void put(BinaryWriter& w, const Gaussian3D& g) {
  put(w, g.mean);
  put(w, g.rotation);
  put(w, g.log_scale);
  w.pod(g.opacity_logit);
  put(w, g.color);
  w.pod(g.id);
}
void get(BinaryReader& r, Gaussian3D& g) {
  get(r, g.mean);
  get(r, g.rotation);
  get(r, g.log_scale);
  g.opacity_logit = r.pod<double>();
  get(r, g.color);
  g.id = r.pod<std::uint64_t>();
}

void put(BinaryWriter& w, const StaticAnchor& a) {
  put(w, a.frame);
  put(w, a.pixel);
}
void get(BinaryReader& r, StaticAnchor& a) {
  get(r, a.frame);
  get(r, a.pixel);
}

void put(BinaryWriter& w, const DynamicGaussian& g) {
  put(w, g.canonical);
  put(w, g.t_ref);
  put(w, g.nodes);
  put(w, g.dw);
}
void get(BinaryReader& r, DynamicGaussian& g) {
  get(r, g.canonical);
  get(r, g.t_ref);
  get(r, g.nodes);
  get(r, g.dw);
}

void put(BinaryWriter& w, const GaussianMap& m) {
  put(w, m.statics);
  put(w, m.anchors);
  put(w, m.dynamics);
  w.pod(m.next_static_id);
  w.pod(m.next_dynamic_id);
}
void get(BinaryReader& r, GaussianMap& m) {
  get(r, m.statics);
  get(r, m.anchors);
  get(r, m.dynamics);
  m.next_static_id = r.pod<std::uint64_t>();
  m.next_dynamic_id = r.pod<std::uint64_t>();
}

void put(BinaryWriter& w, const ScaffoldNode& n) {
  put(w, n.transforms);
  put(w, n.observed);
  w.pod(n.radius);
  w.pod(n.track_id);
}
void get(BinaryReader& r, ScaffoldNode& n) {
  get(r, n.transforms);
  get(r, n.observed);
  n.radius = r.pod<double>();
  n.track_id = r.pod<std::uint64_t>();
}

void put(BinaryWriter& w, const ScaffoldGraph& g) {
  put(w, g.anchor_time);
  put(w, g.nodes);
  put(w, g.neighbors);
}
void get(BinaryReader& r, ScaffoldGraph& g) {
  get(r, g.anchor_time);
  get(r, g.nodes);
  get(r, g.neighbors);
}

void put(BinaryWriter& w, const AdamSlot& s) {
  put(w, s.m);
  put(w, s.v);
  w.pod<std::int64_t>(s.steps);
}
void get(BinaryReader& r, AdamSlot& s) {
  get(r, s.m);
  get(r, s.v);
  s.steps = long(r.pod<std::int64_t>());
}

void put(BinaryWriter& w, const OptimizerState& s) {
  w.pod(s.rates);
  w.pod(s.lr_scale);
  w.pod(s.lr_schedule);
  w.pod(s.beta1);
  w.pod(s.beta2);
  w.pod(s.eps);
  put(w, s.statics);
  put(w, s.dynamics);
  put(w, s.nodes);
  w.pod<std::int64_t>(s.step);
  w.pod<std::uint8_t>(s.optimize_observed_nodes);
}
void get(BinaryReader& r, OptimizerState& s) {
  s.rates = r.pod<LearningRates>();
  s.lr_scale = r.pod<double>();
  s.lr_schedule = r.pod<double>();
  s.beta1 = r.pod<double>();
  s.beta2 = r.pod<double>();
  s.eps = r.pod<double>();
  get(r, s.statics);
  get(r, s.dynamics);
  get(r, s.nodes);
  s.step = long(r.pod<std::int64_t>());
  s.optimize_observed_nodes = r.pod<std::uint8_t>() != 0;
}

void put(BinaryWriter& w, const Track2D& t) {
  w.pod(t.id);
  put(w, t.query_frame);
  put(w, t.positions);
  put(w, t.visible);
}
void get(BinaryReader& r, Track2D& t) {
  t.id = r.pod<std::uint64_t>();
  get(r, t.query_frame);
  get(r, t.positions);
  get(r, t.visible);
}

void put(BinaryWriter& w, const Track3D& t) {
  w.pod(t.id);
  put(w, t.positions);
  put(w, t.visible);
}
void get(BinaryReader& r, Track3D& t) {
  t.id = r.pod<std::uint64_t>();
  get(r, t.positions);
  get(r, t.visible);
}

void put(BinaryWriter& w, const LossReport& l) { w.pod(l); }
void get(BinaryReader& r, LossReport& l) { l = r.pod<LossReport>(); }

void put(BinaryWriter& w, const ProgressiveState& s) {
  put(w, s.batches);
  put(w, s.frames);
  put(w, s.map);
  put(w, s.scaffold);
  put(w, s.optimizer);
  put(w, s.tracks);
  put(w, s.origin);
  put(w, s.retired);
  put(w, s.lifted);
  put(w, s.poses);
  put(w, s.depths);
  put(w, s.masks);
  w.pod(s.next_track_id);
  put(w, s.trace);
}
void get(BinaryReader& r, ProgressiveState& s) {
  get(r, s.batches);
  get(r, s.frames);
  get(r, s.map);
  get(r, s.scaffold);
  get(r, s.optimizer);
  get(r, s.tracks);
  get(r, s.origin);
  get(r, s.retired);
  get(r, s.lifted);
  get(r, s.poses);
  get(r, s.depths);
  get(r, s.masks);
  s.next_track_id = r.pod<std::uint64_t>();
  get(r, s.trace);
}

void put(BinaryWriter& w, const Keyframe& k) {
  put(w, k.id);
  put(w, k.pose);
  put(w, k.disparity);
  put(w, k.valid);
  put(w, k.image);
  w.pod<std::uint8_t>(k.fixed_pose);
  w.pod<std::uint8_t>(k.fixed_disparity);
}
void get(BinaryReader& r, Keyframe& k) {
  get(r, k.id);
  get(r, k.pose);
  get(r, k.disparity);
  get(r, k.valid);
  get(r, k.image);
  k.fixed_pose = r.pod<std::uint8_t>() != 0;
  k.fixed_disparity = r.pod<std::uint8_t>() != 0;
}

void put(BinaryWriter& w, const FlowObservation& f) {
  put(w, f.source);
  put(w, f.target);
  put(w, f.predicted);
  put(w, f.confidence);
}
void get(BinaryReader& r, FlowObservation& f) {
  get(r, f.source);
  get(r, f.target);
  get(r, f.predicted);
  get(r, f.confidence);
}

void put(BinaryWriter& w, const FineMask& f) {
  put(w, f.frame);
  put(w, f.mask);
  put(w, f.object_ids);
}
void get(BinaryReader& r, FineMask& f) {
  get(r, f.frame);
  get(r, f.mask);
  get(r, f.object_ids);
}

void put(BinaryWriter& w, const MaskTrackState& s) {
  w.pod<std::uint64_t>(s.objects.size());
  for (const auto& [id, obj] : s.objects) {
    put(w, id);
    put(w, obj.frame);
    put(w, obj.mask);
    put(w, obj.empty_frames);
  }
  put(w, s.retired);
  put(w, s.next_id);
}
void get(BinaryReader& r, MaskTrackState& s) {
  s.objects.clear();
  const std::size_t n = r.count(1);
  for (std::size_t i = 0; i < n; ++i) {
    int id;
    TrackedObject obj;
    get(r, id);
    get(r, obj.frame);
    get(r, obj.mask);
    get(r, obj.empty_frames);
    s.objects[id] = std::move(obj);
  }
  get(r, s.retired);
  get(r, s.next_id);
}

void put(BinaryWriter& w, const FrontEnd& f) {
  put(w, f.graph.K);
  put(w, f.graph.keyframes);
  put(w, f.graph.edges);
  put(w, f.suppression);
  put(w, f.mask_state);
  put(w, f.fine);
  put(w, f.coarse);
  put(w, f.poses);
  put(w, f.depths);
  put(w, f.is_keyframe);
  put(w, f.frames);
  w.pod(f.quantile);
  put(w, f.fine_frames);
}
void get(BinaryReader& r, FrontEnd& f) {
  get(r, f.graph.K);
  get(r, f.graph.keyframes);
  get(r, f.graph.edges);
  get(r, f.suppression);
  get(r, f.mask_state);
  get(r, f.fine);
  get(r, f.coarse);
  get(r, f.poses);
  get(r, f.depths);
  get(r, f.is_keyframe);
  get(r, f.frames);
  f.quantile = r.pod<double>();
  get(r, f.fine_frames);
}

constexpr char kCheckpointMagic[4] = {'D', 'R', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::string frame_name(int t, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d.%s", t, ext);
  return buf;
}

}  // namespace

void write_image(const fs::path& path, const RgbImage& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.size() * 3);
  for (const Vec3& c : image.data)
    for (int k = 0; k < 3; ++k) out.push_back(char(to_byte(c[k])));
  write_bytes(path, out.data(), out.size());
}

RgbImage read_image(const fs::path& path) {
  const auto b = read_bytes(path);
  int w, h;
  const std::size_t pos = parse_netpbm(b, "P6", w, h, path);
  if (b.size() < pos + std::size_t(w) * h * 3) throw Error(ErrorCode::Io, path.string() + ": truncated pixel data");
  RgbImage img(w, h);
  for (std::size_t i = 0; i < img.size(); ++i)
    for (int k = 0; k < 3; ++k) img[i][k] = double(static_cast<unsigned char>(b[pos + 3 * i + std::size_t(k)])) / 255.0;
  return img;
}

void write_mask(const fs::path& path, const Mask& mask) {
  std::string out = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(mask.data.data()), mask.size());
  write_bytes(path, out.data(), out.size());
}

Mask read_mask(const fs::path& path) {
  const auto b = read_bytes(path);
  int w, h;
  const std::size_t pos = parse_netpbm(b, "P5", w, h, path);
  if (b.size() < pos + std::size_t(w) * h) throw Error(ErrorCode::Io, path.string() + ": truncated pixel data");
  Mask m(w, h);
  std::memcpy(m.data.data(), b.data() + pos, m.size());
  return m;
}

void write_depth(const fs::path& path, const ScalarField& depth) {
  std::vector<char> out(16 + depth.size() * 4);
  std::memcpy(out.data(), "DPTH", 4);
  const std::uint32_t hdr[3] = {std::uint32_t(depth.width), std::uint32_t(depth.height), 0};
  std::memcpy(out.data() + 4, hdr, 12);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const float f = std::isfinite(depth[i]) && depth[i] > 0 ? float(depth[i]) : 0.0f;
    std::memcpy(out.data() + 16 + 4 * i, &f, 4);
  }
  write_bytes(path, out.data(), out.size());
}

ScalarField read_depth(const fs::path& path) {
  const auto b = read_bytes(path);
  if (b.size() < 16 || std::memcmp(b.data(), "DPTH", 4) != 0)
    throw Error(ErrorCode::Io, path.string() + " is not a depth raster");
  std::uint32_t hdr[3];
  std::memcpy(hdr, b.data() + 4, 12);
  const std::size_t n = std::size_t(hdr[0]) * hdr[1];
  if (b.size() != 16 + 4 * n) throw Error(ErrorCode::Io, path.string() + ": size does not match header");
  ScalarField d{int(hdr[0]), int(hdr[1])};
  for (std::size_t i = 0; i < n; ++i) {
    float f;
    std::memcpy(&f, b.data() + 16 + 4 * i, 4);
    d[i] = f;
  }
  return d;
}

void Trajectory::validate() const {
  if (poses.empty()) throw Error(ErrorCode::EmptyInput, "empty trajectory");
  if (timestamps.size() != poses.size()) throw Error(ErrorCode::ShapeMismatch, "timestamps and poses differ in count");
  for (std::size_t i = 1; i < timestamps.size(); ++i)
    if (!(timestamps[i] > timestamps[i - 1]))
      throw Error(ErrorCode::Io, "trajectory timestamps not strictly increasing at entry " + std::to_string(i));
}

void write_trajectory(const fs::path& path, const Trajectory& tr) {
  tr.validate();
  std::ostringstream os;
  os << "# timestamp tx ty tz qx qy qz qw\n" << std::setprecision(17);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const RigidPose& p = tr.poses[i];
    os << tr.timestamps[i] << ' ' << p.translation.x() << ' ' << p.translation.y() << ' ' << p.translation.z() << ' '
       << p.rotation.x() << ' ' << p.rotation.y() << ' ' << p.rotation.z() << ' ' << p.rotation.w() << '\n';
  }
  write_text(path, os.str());
}

Trajectory read_trajectory(const fs::path& path) {
  std::istringstream in(read_text(path));
  Trajectory tr;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto c = line.find('#'); c != std::string::npos) line.resize(c);
    std::istringstream ls(line);
    double v[8];
    int n = 0;
    while (n < 8 && ls >> v[n]) ++n;
    if (n == 0 && ls.eof()) continue;
    std::string rest;
    if (n != 8 || (ls >> rest))
      throw Error(ErrorCode::Io, path.string() + ":" + std::to_string(lineno) + ": expected 8 numbers");
    tr.timestamps.push_back(v[0]);
    tr.poses.push_back({Quat(v[7], v[4], v[5], v[6]).normalized(), Vec3(v[1], v[2], v[3])});
  }
  tr.validate();
  return tr;
}

std::string read_text(const fs::path& path) {
  const auto b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

void write_text(const fs::path& path, const std::string& text) { write_bytes(path, text.data(), text.size()); }

std::vector<char> serialize_checkpoint(const Checkpoint& c) {
  BinaryWriter w;
  for (char ch : kCheckpointMagic) w.pod(ch);
  w.pod(kCheckpointVersion);
  put(w, c.K);
  put(w, c.timestamps);
  put(w, c.state);
  put(w, c.tracker);
  return w.bytes();
}

Checkpoint deserialize_checkpoint(std::vector<char> bytes) {
  BinaryReader r(std::move(bytes));
  for (char ch : kCheckpointMagic)
    if (r.pod<char>() != ch) throw Error(ErrorCode::Io, "not a checkpoint");
  if (r.pod<std::uint32_t>() != kCheckpointVersion) throw Error(ErrorCode::Io, "unsupported checkpoint version");
  Checkpoint c;
  get(r, c.K);
  get(r, c.timestamps);
  get(r, c.state);
  get(r, c.tracker);
  if (!r.done()) throw Error(ErrorCode::Io, "trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  const auto b = serialize_checkpoint(c);
  write_bytes(path, b.data(), b.size());
}

Checkpoint load_checkpoint(const fs::path& path) { return deserialize_checkpoint(read_bytes(path)); }

void save_dataset(const fs::path& dir, const Dataset& data, const std::string& scene_config) {
  write_text(dir / "scene.cfg", scene_config);
  write_trajectory(dir / "groundtruth.txt", {data.timestamps, data.poses});
  for (int t = 0; t < data.frames(); ++t) {
    write_image(dir / "rgb" / frame_name(t, "ppm"), data.images[std::size_t(t)]);
    write_depth(dir / "depth" / frame_name(t, "dpth"), data.depths[std::size_t(t)]);
    write_mask(dir / "labels" / frame_name(t, "pgm"), data.instances[std::size_t(t)]);
  }
}

Dataset load_dataset(const fs::path& dir, const std::function<SceneSpec(const std::string&)>& rebuild) {
  Dataset data;
  data.spec = rebuild(read_text(dir / "scene.cfg"));
  const Trajectory gt = read_trajectory(dir / "groundtruth.txt");
  if (int(gt.size()) != data.spec.frame_count)
    throw Error(ErrorCode::Io, "groundtruth.txt has " + std::to_string(gt.size()) + " poses, scene.cfg expects " +
                                   std::to_string(data.spec.frame_count));
  data.timestamps = gt.timestamps;
  data.poses = gt.poses;
  const PinholeIntrinsics& K = data.spec.K;
  for (int t = 0; t < data.spec.frame_count; ++t) {
    RgbImage img = read_image(dir / "rgb" / frame_name(t, "ppm"));
    ScalarField depth = read_depth(dir / "depth" / frame_name(t, "dpth"));
    Mask labels = read_mask(dir / "labels" / frame_name(t, "pgm"));
    if (!img.same_shape(K.width, K.height) || !depth.same_shape(K.width, K.height) ||
        !labels.same_shape(K.width, K.height))
      throw Error(ErrorCode::Io, "frame " + std::to_string(t) + " does not match the scene resolution");
    Mask dyn(K.width, K.height, 0);
    for (std::size_t i = 0; i < dyn.size(); ++i) dyn[i] = labels[i] > 0;
    data.images.push_back(std::move(img));
    data.depths.push_back(std::move(depth));
    data.instances.push_back(std::move(labels));
    data.dynamic_masks.push_back(std::move(dyn));
  }
  return data;
}

}  // namespace dynrecon
