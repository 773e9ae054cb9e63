#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dynrecon/pipeline.hpp"

namespace py = pybind11;
using namespace dynrecon;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

RgbImage to_image(const Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw py::value_error("expected an H x W x 3 array");
  const int h = int(a.shape(0)), w = int(a.shape(1));
  RgbImage img(w, h);
  const double* p = a.data();
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = Vec3(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
  return img;
}

Array from_image(const RgbImage& img) {
  Array a({py::ssize_t(img.height), py::ssize_t(img.width), py::ssize_t(3)});
  double* p = a.mutable_data();
  for (std::size_t i = 0; i < img.size(); ++i)
    for (int c = 0; c < 3; ++c) p[3 * i + std::size_t(c)] = img[i][c];
  return a;
}

std::vector<Vec3> to_points(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw py::value_error("expected an N x 3 array");
  std::vector<Vec3> out(std::size_t(a.shape(0)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(a.at(i, 0), a.at(i, 1), a.at(i, 2));
  return out;
}

// rows of tx ty tz qx qy qz qw
Trajectory to_trajectory(const Array& stamps, const Array& poses) {
  if (stamps.ndim() != 1 || poses.ndim() != 2 || poses.shape(1) != 7 || poses.shape(0) != stamps.shape(0))
    throw py::value_error("expected N timestamps and an N x 7 pose array");
  Trajectory t;
  for (py::ssize_t i = 0; i < stamps.shape(0); ++i) {
    t.timestamps.push_back(stamps.at(i));
    RigidPose p;
    p.translation = Vec3(poses.at(i, 0), poses.at(i, 1), poses.at(i, 2));
    p.rotation = Quat(poses.at(i, 6), poses.at(i, 3), poses.at(i, 4), poses.at(i, 5)).normalized();
    t.poses.push_back(p);
  }
  return t;
}

py::tuple from_trajectory(const Trajectory& t) {
  Array stamps(py::ssize_t(t.size()));
  Array poses({py::ssize_t(t.size()), py::ssize_t(7)});
  for (std::size_t i = 0; i < t.size(); ++i) {
    stamps.mutable_at(i) = t.timestamps[i];
    const RigidPose& p = t.poses[i];
    const double row[7] = {p.translation.x(), p.translation.y(), p.translation.z(), p.rotation.x(),
                           p.rotation.y(),    p.rotation.z(),    p.rotation.w()};
    for (int k = 0; k < 7; ++k) poses.mutable_at(i, k) = row[k];
  }
  return py::make_tuple(stamps, poses);
}

RunConfig make_config(const std::string& text, const std::map<std::string, std::string>& overrides) {
  RunConfig c = default_run_config();
  apply_config_text(c, text);
  for (const auto& [k, v] : overrides) set_config_value(c, k, v);
  apply_config_text(c, "");
  return c;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["ate_rmse"] = m.ate;
  d["ate_scale"] = m.ate_scale;
  d["ate_matched"] = m.matched;
  d["train_psnr"] = m.train_psnr;
  d["train_ssim"] = m.train_ssim;
  d["heldout_psnr"] = m.heldout_psnr;
  d["heldout_ssim"] = m.heldout_ssim;
  d["train_views"] = m.train_views;
  d["heldout_views"] = m.heldout_views;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "online dynamic 3D reconstruction";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  m.def(
      "psnr", [](const Array& a, const Array& b) { return psnr(to_image(a), to_image(b)); }, py::arg("a"),
      py::arg("b"));
  m.def(
      "ssim", [](const Array& a, const Array& b) { return ssim(to_image(a), to_image(b)); }, py::arg("a"),
      py::arg("b"));
  m.def(
      "ate_rmse",
      [](const Array& est_t, const Array& est_p, const Array& gt_t, const Array& gt_p) {
        return ate_rmse(to_trajectory(est_t, est_p), to_trajectory(gt_t, gt_p));
      },
      py::arg("estimate_timestamps"), py::arg("estimate_poses"), py::arg("gt_timestamps"), py::arg("gt_poses"));
  m.def(
      "umeyama_align",
      [](const Array& src, const Array& dst) {
        const auto s = umeyama_align(to_points(src), to_points(dst));
        return py::make_tuple(s.scale, std::array<double, 4>{s.rotation.x(), s.rotation.y(), s.rotation.z(), s.rotation.w()},
                              std::array<double, 3>{s.translation.x(), s.translation.y(), s.translation.z()});
      },
      py::arg("source"), py::arg("target"), "(scale, quaternion xyzw, translation) mapping source onto target");

  m.def("default_config", [] { return config_text(default_run_config()); });
  m.def("config_keys", &config_keys);
  m.def(
      "resolve_config", [](const std::string& text, const std::map<std::string, std::string>& overrides) {
        return config_text(make_config(text, overrides));
      },
      py::arg("text") = "", py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "synthesize",
      [](const std::string& out, const std::string& text, const std::map<std::string, std::string>& overrides) {
        return synthesize(make_config(text, overrides), out).frames();
      },
      py::arg("out"), py::arg("config") = "", py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "run",
      [](const std::string& out, const std::string& text, const std::map<std::string, std::string>& overrides) {
        const RunConfig c = make_config(text, overrides);
        py::gil_scoped_release release;
        const Dataset data = load_or_generate(c);
        const RunResult r = run_pipeline(c, data, out);
        const Metrics mt = evaluate(make_checkpoint(data, r), data, train_split(data.frames(), c.holdout_every));
        write_text(fs::path(out) / "metrics.txt", metrics_text(mt));
        py::gil_scoped_acquire acquire;
        return metrics_dict(mt);
      },
      py::arg("out"), py::arg("config") = "", py::arg("overrides") = std::map<std::string, std::string>{},
      "tracks, reconstructs and evaluates; writes everything under `out`");

  m.def("report", [](const std::string& dir) { return report(dir); }, py::arg("run_dir"));

  m.def(
      "render",
      [](const std::string& checkpoint, const Array& stamps, const Array& poses) {
        const auto images = render_trajectory(load_checkpoint(checkpoint), to_trajectory(stamps, poses));
        py::list out;
        for (const auto& img : images) out.append(from_image(img));
        return out;
      },
      py::arg("checkpoint"), py::arg("timestamps"), py::arg("poses"));

  m.def("read_trajectory", [](const std::string& path) { return from_trajectory(read_trajectory(path)); });
  m.def("read_image", [](const std::string& path) { return from_image(read_image(path)); });
  m.def("read_depth", [](const std::string& path) {
    const ScalarField d = read_depth(path);
    Array a({py::ssize_t(d.height), py::ssize_t(d.width)});
    std::copy(d.data.begin(), d.data.end(), a.mutable_data());
    return a;
  });
  m.def("read_mask", [](const std::string& path) {
    const Mask k = read_mask(path);
    py::array_t<std::uint8_t> a({py::ssize_t(k.height), py::ssize_t(k.width)});
    std::copy(k.data.begin(), k.data.end(), a.mutable_data());
    return a;
  });
}
