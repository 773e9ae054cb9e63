#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace dynrecon {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

enum class ErrorCode {
  NonPositiveDepth,
  NonPositiveDisparity,
  EmptyInput,
  AllZeroWeights,
  DegenerateConfiguration,
  InvalidIntrinsics,
  MissingEdge,
  NoConnectedEdges,
  SingularNormalEquations,
  MissingNeighbor,
  EvenKernel,
  OracleFailure,
  NoValidSamples,
  ConstantMonoDepth,
  InsufficientOverlap,
  NoVisibleTimestep,
  MissingUpdate,
  BehindCamera,
  StaleForwardState,
  NoStaticPixels,
  EmptyMask,
  NonFiniteLoss,
  MissingAnchor,
  InvalidSpec,
  InsufficientAssociations,
  ShapeMismatch,
  Io,
  Config,
};

const char* to_string(ErrorCode code);

/// Every module error surfaces as this exception; `code()` identifies the
/// failure class so callers can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 protected:
  struct Verbatim {};
  Error(ErrorCode code, const std::string& what, Verbatim) : std::runtime_error(what), code_(code) {}

 private:
  ErrorCode code_;
};

/// An Error tagged with the pipeline stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.code(), "[" + stage + "] " + cause.what(), Verbatim{}), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Row-major H×W grid. Pixel (x, y) has its center at integer coordinates.
template <typename T>
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(int w, int h, const T& fill = T{}) : width(w), height(h), data(std::size_t(w) * h, fill) {}

  T& operator()(int x, int y) { return data[std::size_t(y) * width + x]; }
  const T& operator()(int x, int y) const { return data[std::size_t(y) * width + x]; }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool same_shape(int w, int h) const { return width == w && height == h; }
  template <typename U>
  bool same_shape(const Raster<U>& o) const { return width == o.width && height == o.height; }

  bool operator==(const Raster&) const = default;
};

using Mask = Raster<std::uint8_t>;
using ScalarField = Raster<double>;
using RgbImage = Raster<Vec3>;

std::size_t count_nonzero(const Mask& m);

/// Number of worker threads. Honors DYNRECON_THREADS when set.
int worker_count();

/// Runs fn(i) for i in [0, n) on worker_count() threads with a static
/// round-robin partition; fn(i, worker) receives the worker index so
/// callers can keep per-worker accumulators and reduce them in order.
void parallel_for(std::size_t n, const std::function<void(std::size_t, int)>& fn);

}  // namespace dynrecon
