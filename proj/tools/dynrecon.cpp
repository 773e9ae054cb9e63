// dynrecon command line: run | synth | eval | render | report

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "dynrecon/pipeline.hpp"

using namespace dynrecon;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool out_required) {
  app->add_option("--config", c.config, "flat section.key = value file");
  app->add_option("--seed", c.seed, "overrides run.seed");
  app->add_option("--mode", c.mode, "rgbd | rgb")->check(CLI::IsMember({"rgbd", "rgb"}));
  auto* o = app->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = default_run_config();
  if (!c.config.empty()) apply_config_text(cfg, read_text(c.config));
  if (c.seed) set_config_value(cfg, "run.seed", std::to_string(*c.seed));
  if (!c.mode.empty()) set_config_value(cfg, "run.mode", c.mode);
  apply_config_text(cfg, "");  // re-sync derived fields
  return cfg;
}

template <typename F>
void staged(const char* stage, F&& fn) {
  try {
    fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"online dynamic 3D reconstruction"};
  app.require_subcommand(1);

  Common run_opts, synth_opts, eval_opts, render_opts;
  std::string checkpoint, poses, run_dir;

  auto* run = app.add_subcommand("run", "track and reconstruct a sequence");
  add_common(run, run_opts, true);

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  add_common(synth, synth_opts, true);

  auto* eval = app.add_subcommand("eval", "ATE, PSNR and SSIM of a run against ground truth");
  add_common(eval, eval_opts, true);
  eval->add_option("--checkpoint", checkpoint, "defaults to the latest checkpoint under --out");

  auto* render = app.add_subcommand("render", "render views from a checkpoint and a trajectory file");
  add_common(render, render_opts, true);
  render->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  render->add_option("--poses", poses, "trajectory file")->required();

  auto* rep = app.add_subcommand("report", "summarize metrics and loss traces as CSV");
  rep->add_option("--out", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*run) {
      RunConfig cfg;
      Dataset data;
      staged("config", [&] { cfg = resolve(run_opts); });
      staged("input", [&] { data = load_or_generate(cfg); });
      const auto r = run_pipeline(cfg, data, run_opts.out, [](int b, const std::string& s, double ms) {
        std::fprintf(stderr, "batch=%d stage=%s ms=%.3f\n", b, s.c_str(), ms);
      });
      std::cout << "frames=" << r.state.frames << " batches=" << r.state.batches
                << " statics=" << r.state.map.statics.size() << " dynamics=" << r.state.map.dynamics.size()
                << " nodes=" << r.state.scaffold.nodes.size() << '\n';
    } else if (*synth) {
      RunConfig cfg;
      staged("config", [&] { cfg = resolve(synth_opts); });
      staged("synth", [&] {
        const Dataset d = synthesize(cfg, synth_opts.out);
        std::cout << "wrote " << d.frames() << " frames to " << synth_opts.out << '\n';
      });
    } else if (*eval) {
      RunConfig cfg;
      const fs::path dir = eval_opts.out;
      staged("config", [&] {
        if (eval_opts.config.empty() && fs::exists(dir / "run.cfg")) eval_opts.config = (dir / "run.cfg").string();
        cfg = resolve(eval_opts);
      });
      Dataset data;
      Checkpoint ck;
      staged("input", [&] {
        data = load_or_generate(cfg);
        ck = load_checkpoint(checkpoint.empty() ? latest_checkpoint(dir) : fs::path(checkpoint));
      });
      staged("eval", [&] {
        const std::string text = metrics_text(evaluate(ck, data, train_split(data.frames(), cfg.holdout_every)));
        write_text(dir / "metrics.txt", text);
        std::cout << text;
      });
    } else if (*render) {
      Checkpoint ck;
      Trajectory tr;
      staged("input", [&] {
        ck = load_checkpoint(checkpoint);
        tr = read_trajectory(poses);
      });
      staged("render", [&] {
        const auto images = render_trajectory(ck, tr);
        for (std::size_t i = 0; i < images.size(); ++i) {
          char name[32];
          std::snprintf(name, sizeof name, "render_%06zu.ppm", i);
          write_image(fs::path(render_opts.out) / name, images[i]);
        }
        std::cout << "rendered " << images.size() << " views to " << render_opts.out << '\n';
      });
    } else if (*rep) {
      staged("report", [&] { std::cout << report(run_dir); });
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: [internal] " << e.what() << '\n';
    return 1;
  }
  return 0;
}
