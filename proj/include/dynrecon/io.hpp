#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "dynrecon/common.hpp"
#include "dynrecon/depth.hpp"
#include "dynrecon/geometry.hpp"
#include "dynrecon/progressive.hpp"
#include "dynrecon/synthetic.hpp"

namespace dynrecon {

namespace fs = std::filesystem;

/// 8-bit binary PPM (P6); channels are clamped to [0, 1] and rounded.
void write_image(const fs::path& path, const RgbImage& image);
RgbImage read_image(const fs::path& path);

/// 8-bit binary PGM (P5) holding the raw mask values.
void write_mask(const fs::path& path, const Mask& mask);
Mask read_mask(const fs::path& path);

/// "DPTH", u32 width, u32 height, u32 reserved, then width·height
/// little-endian float32, row-major. Invalid pixels are stored as 0.
void write_depth(const fs::path& path, const ScalarField& depth);
ScalarField read_depth(const fs::path& path);

struct Trajectory {
  std::vector<double> timestamps;  // seconds, strictly increasing
  std::vector<RigidPose> poses;

  std::size_t size() const { return poses.size(); }
  /// Throws EmptyInput / ShapeMismatch / Config on non-increasing stamps.
  void validate() const;
};

/// `timestamp tx ty tz qx qy qz qw` per line, `#` starts a comment.
void write_trajectory(const fs::path& path, const Trajectory& trajectory);
Trajectory read_trajectory(const fs::path& path);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

/// Little-endian binary stream for checkpoints.
class BinaryWriter {
 public:
  template <typename T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  template <typename T>
  void pods(const std::vector<T>& v) {
    pod<std::uint64_t>(v.size());
    for (const T& x : v) pod(x);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::vector<char> bytes) : buf_(std::move(bytes)) {}

  template <typename T>
  T pod() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  template <typename T>
  std::vector<T> pods() {
    const std::size_t n = count(sizeof(T));
    std::vector<T> v(n);
    for (T& x : v) x = pod<T>();
    return v;
  }
  std::string str() {
    const std::size_t n = count(1);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  /// Element count that fits in the remaining bytes at `min_size` each.
  std::size_t count(std::size_t min_size) {
    const auto n = pod<std::uint64_t>();
    if (min_size > 0 && n > (buf_.size() - pos_) / min_size) throw Error(ErrorCode::Io, "truncated checkpoint");
    return std::size_t(n);
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw Error(ErrorCode::Io, "truncated checkpoint");
  }
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

/// Everything a run needs to resume or render: intrinsics, timestamps,
/// mapper and tracker state.
struct Checkpoint {
  PinholeIntrinsics K;
  std::vector<double> timestamps;
  ProgressiveState state;
  FrontEnd tracker;
};

std::vector<char> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::vector<char> bytes);
void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const fs::path& path);

/// Dataset directory: scene.cfg, groundtruth.txt, rgb/, depth/, labels/
/// (one file per frame, six-digit index).
void save_dataset(const fs::path& dir, const Dataset& data, const std::string& scene_config);
/// Reloads rasters and poses from disk; the scene geometry behind the
/// oracles is rebuilt from scene.cfg by `rebuild`.
Dataset load_dataset(const fs::path& dir, const std::function<SceneSpec(const std::string& scene_config)>& rebuild);

}  // namespace dynrecon
