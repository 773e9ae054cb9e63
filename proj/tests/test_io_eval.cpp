#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "dynrecon/config.hpp"
#include "dynrecon/metrics.hpp"
#include "dynrecon/pipeline.hpp"
#include "test_support.hpp"

using namespace dynrecon;
using dynrecon::testing::random_pose;
using dynrecon::testing::random_quat;
using dynrecon::testing::random_vec3;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("dynrecon_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Trajectory random_trajectory(std::mt19937_64& rng, int n) {
  Trajectory tr;
  for (int i = 0; i < n; ++i) {
    tr.timestamps.push_back(0.1 * i);
    tr.poses.push_back(random_pose(rng, 2.0));
  }
  return tr;
}

RgbImage random_image(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(0, 1);
  RgbImage im(w, h);
  for (auto& p : im.data) p = {u(rng), u(rng), u(rng)};
  return im;
}

template <typename F>
ErrorCode code_of(F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::Io;
}

template <typename F>
std::string message_of(F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("ate: identical trajectories give zero") {
  std::mt19937_64 rng(1);
  const Trajectory gt = random_trajectory(rng, 10);
  const AteResult r = ate(gt, gt);
  CHECK(r.rmse < 1e-12);
  CHECK(r.matched == 10);
  CHECK(r.alignment.scale == doctest::Approx(1.0));
}

TEST_CASE("ate: invariant under a similarity of the estimate") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Trajectory gt = random_trajectory(rng, 12);
    SimilarityTransform s;
    s.scale = std::uniform_real_distribution<double>(0.3, 4.0)(rng);
    s.rotation = random_quat(rng);
    s.translation = random_vec3(rng, -5, 5);
    Trajectory est = gt;
    for (RigidPose& p : est.poses) p = s.apply(p);
    CHECK(ate_rmse(est, gt) < 1e-9);
  }
}

TEST_CASE("ate: one displaced position out of ten is bounded by offset/sqrt(10)") {
  std::mt19937_64 rng(3);
  const Trajectory gt = random_trajectory(rng, 10);
  Trajectory est = gt;
  est.poses[4].translation.x() += 0.3;
  const double r = ate_rmse(est, gt);
  CHECK(r > 0);
  CHECK(r <= 0.3 / std::sqrt(10.0) + 1e-12);
}

TEST_CASE("ate: association tolerance and too few pairs") {
  std::mt19937_64 rng(4);
  const Trajectory gt = random_trajectory(rng, 6);
  Trajectory est = gt;
  for (double& t : est.timestamps) t += 0.015;
  CHECK(ate(est, gt).matched == 6);
  for (double& t : est.timestamps) t += 0.01;  // 25 ms off
  CHECK(code_of([&] { ate(est, gt); }) == ErrorCode::InsufficientAssociations);

  Trajectory two{{0.0, 0.1}, {gt.poses[0], gt.poses[1]}};
  CHECK(code_of([&] { ate(two, two); }) == ErrorCode::InsufficientAssociations);

  const auto pairs = associate(std::vector<double>{0.0, 0.1, 0.2}, std::vector<double>{0.001, 0.205, 0.5});
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0] == std::pair<std::size_t, std::size_t>{0, 0});
  CHECK(pairs[1] == std::pair<std::size_t, std::size_t>{2, 1});
}

TEST_CASE("psnr: exact values, cap, mask and errors") {
  RgbImage a(10, 10, Vec3::Zero());
  RgbImage b = a;
  CHECK(psnr(a, b) == 100.0);

  // 12 channel values off by 0.5 over 300 channels: MSE = 3 / 300 = 0.01
  for (int i = 0; i < 4; ++i) b[std::size_t(i)] = Vec3::Constant(0.5);
  CHECK(psnr(a, b) == 20.0);
  CHECK(psnr(b, a) == 20.0);

  Mask m(10, 10, 0);
  m[50] = 1;
  CHECK(psnr(a, b, &m) == 100.0);
  m[0] = 1;  // one of two pixels off by 0.5: MSE = 0.125
  CHECK(psnr(a, b, &m) == doctest::Approx(10 * std::log10(8.0)).epsilon(1e-12));

  Mask empty(10, 10, 0);
  CHECK(code_of([&] { psnr(a, b, &empty); }) == ErrorCode::EmptyMask);
  CHECK(code_of([&] { psnr(a, RgbImage(9, 10)); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("ssim: identity, symmetry, ordering") {
  std::mt19937_64 rng(5);
  const RgbImage a = random_image(rng, 24, 20);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  RgbImage b = a, c = a;
  std::normal_distribution<double> n(0, 1);
  for (auto& p : b.data) p += 0.02 * Vec3(n(rng), n(rng), n(rng));
  for (auto& p : c.data) p += 0.2 * Vec3(n(rng), n(rng), n(rng));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  CHECK(ssim(a, b) < 1.0);
  CHECK(ssim(a, c) < ssim(a, b));
  CHECK(code_of([&] { ssim(RgbImage(8, 8), RgbImage(8, 8)); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("image, mask and depth files round trip") {
  TempDir dir("formats");
  std::mt19937_64 rng(6);

  RgbImage im(7, 5);
  for (std::size_t i = 0; i < im.size(); ++i) im[i] = Vec3(double(i % 256) / 255, double((3 * i) % 256) / 255, 1.0);
  write_image(dir.path / "a.ppm", im);
  const RgbImage back = read_image(dir.path / "a.ppm");
  REQUIRE(back.same_shape(im));
  for (std::size_t i = 0; i < im.size(); ++i) CHECK((back[i] - im[i]).norm() < 1e-12);

  Mask m(6, 4, 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::uint8_t((i * 37) % 256);
  write_mask(dir.path / "m.pgm", m);
  CHECK(read_mask(dir.path / "m.pgm") == m);

  ScalarField d(5, 3);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.5 + 0.25 * double(i);
  d[7] = 0;
  write_depth(dir.path / "d.dpth", d);
  CHECK(read_depth(dir.path / "d.dpth") == d);

  const std::string raw = read_text(dir.path / "d.dpth");
  REQUIRE(raw.size() == 16 + 4 * d.size());
  CHECK(raw.substr(0, 4) == "DPTH");
  std::uint32_t w, h;
  std::memcpy(&w, raw.data() + 4, 4);
  std::memcpy(&h, raw.data() + 8, 4);
  CHECK(w == 5);
  CHECK(h == 3);
  float first;
  std::memcpy(&first, raw.data() + 16, 4);
  CHECK(first == 0.5f);

  write_text(dir.path / "bad.dpth", "XXXX" + raw.substr(4));
  CHECK(code_of([&] { read_depth(dir.path / "bad.dpth"); }) == ErrorCode::Io);
  write_text(dir.path / "short.dpth", raw.substr(0, raw.size() - 1));
  CHECK(code_of([&] { read_depth(dir.path / "short.dpth"); }) == ErrorCode::Io);
  CHECK(code_of([&] { read_image(dir.path / "missing.ppm"); }) == ErrorCode::Io);
}

TEST_CASE("trajectory files: round trip, comments, malformed lines") {
  TempDir dir("trajectory");
  std::mt19937_64 rng(7);
  const Trajectory tr = random_trajectory(rng, 5);
  write_trajectory(dir.path / "t.txt", tr);
  const Trajectory back = read_trajectory(dir.path / "t.txt");
  REQUIRE(back.size() == tr.size());
  for (std::size_t i = 0; i < tr.size(); ++i) {
    CHECK(back.timestamps[i] == tr.timestamps[i]);
    CHECK(dynrecon::testing::pose_distance(back.poses[i], tr.poses[i]) < 1e-12);
  }

  write_text(dir.path / "c.txt",
             "# timestamp tx ty tz qx qy qz qw\n\n0.0 1 2 3 0 0 0 1  # first\n   \n0.5 0 0 0 0 0 1 0\n");
  const Trajectory c = read_trajectory(dir.path / "c.txt");
  REQUIRE(c.size() == 2);
  CHECK(c.poses[0].translation == Vec3(1, 2, 3));
  CHECK(c.poses[1].rotation.z() == doctest::Approx(1.0));

  write_text(dir.path / "short.txt", "0.0 1 2 3 0 0 0\n");
  CHECK(message_of([&] { read_trajectory(dir.path / "short.txt"); }).find(":1:") != std::string::npos);
  write_text(dir.path / "extra.txt", "0.0 1 2 3 0 0 0 1 9\n");
  CHECK(code_of([&] { read_trajectory(dir.path / "extra.txt"); }) == ErrorCode::Io);
  write_text(dir.path / "order.txt", "0.5 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 1\n");
  CHECK_THROWS_AS(read_trajectory(dir.path / "order.txt"), Error);
}

TEST_CASE("config: defaults round trip through text") {
  RunConfig c = default_run_config();
  set_config_value(c, "run.seed", "17");
  set_config_value(c, "loss.mask", "0.25");
  set_config_value(c, "run.mode", "rgb");
  const std::string text = config_text(c);
  RunConfig d = default_run_config();
  apply_config_text(d, text);
  CHECK(config_text(d) == text);
  CHECK(d.seed == 17);
  CHECK_FALSE(d.rgbd);
  CHECK_FALSE(d.tracker.rgbd);
  CHECK(d.mapper.seed == 17);

  for (const std::string& key : config_keys()) CHECK(text.find(key + " = ") != std::string::npos);
}

TEST_CASE("config: errors name the offending key") {
  RunConfig c = default_run_config();
  auto msg = message_of([&] { apply_config_text(c, "loss.rgb = abc\n"); });
  CHECK(msg.find("Config") == 0);
  CHECK(msg.find("'loss.rgb'") != std::string::npos);

  msg = message_of([&] { apply_config_text(c, "# fine\nloss.nosuch = 1\n"); });
  CHECK(msg.find("'loss.nosuch'") != std::string::npos);

  msg = message_of([&] { apply_config_text(c, "run.seed = 1\nrun.seed = 2\n"); });
  CHECK(msg.find("'run.seed'") != std::string::npos);

  msg = message_of([&] { apply_config_text(c, "run.mode = stereo\n"); });
  CHECK(msg.find("'run.mode'") != std::string::npos);

  msg = message_of([&] { apply_config_text(c, "scene.frames = 3.5\n"); });
  CHECK(msg.find("'scene.frames'") != std::string::npos);

  msg = message_of([&] { apply_config_text(c, "\njust some words\n"); });
  CHECK(msg.find("line 2") != std::string::npos);
}

TEST_CASE("train_split holds out the middle frame of every block") {
  const auto s = train_split(17, 8);
  for (int t = 0; t < 17; ++t) CHECK(bool(s[std::size_t(t)]) == (t % 8 != 4));
  const auto all = train_split(5, 0);
  CHECK(std::count(all.begin(), all.end(), 1) == 5);
}

TEST_CASE("report: metrics table and per-batch loss summary") {
  TempDir dir("report");
  CHECK(code_of([&] { report(dir.path); }) == ErrorCode::Io);

  write_text(dir.path / "metrics.txt", "ate_rmse = 0.5\ntrain_psnr = 31\nframe_000.psnr = 30\n");
  write_text(dir.path / "loss_trace.csv",
             "batch,step,rgb,depth,track,mask,arap,velocity,acceleration,total\n"
             "0,0,1,0,0,0,0,0,0,1\n0,1,0.5,0,0,0,0,0,0,0.5\n1,0,0.4,0,0,0,0,0,0,0.4\n");
  const std::string r = report(dir.path);
  CHECK(r.find("metric,value\nate_rmse,0.5\ntrain_psnr,31\n") == 0);
  CHECK(r.find("frame_000") == std::string::npos);
  CHECK(r.find("\n0,2,1,0.5,") != std::string::npos);
  CHECK(r.find("\n1,1,0.4,0.4,") != std::string::npos);

  write_text(dir.path / "loss_trace.csv", "batch,step\n");
  CHECK(code_of([&] { report(dir.path); }) == ErrorCode::Io);
}
