#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dynrecon/progressive.hpp"
#include "dynrecon/synthetic.hpp"

namespace dynrecon {

/// Everything a run depends on. Text form is a flat `section.key = value`
/// file; see config_text() for every key with its default.
struct RunConfig {
  std::string dataset;          // dataset directory; empty = generate the scene in memory
  DeskSceneParams scene;
  std::int64_t scene_seed = -1;  // < 0: use `seed`
  std::uint64_t seed = 0;
  bool rgbd = true;
  int holdout_every = 8;  // frame t is held out when t % n == n / 2; 0 keeps every frame
  FrontEndOptions tracker;
  ProgressiveOptions mapper;

  std::uint64_t effective_scene_seed() const { return scene_seed < 0 ? seed : std::uint64_t(scene_seed); }
};

/// Defaults used by the command line tool.
RunConfig default_run_config();

/// Applies `section.key = value` lines on top of `config`. Unknown keys,
/// malformed lines and unparsable values throw Config naming the key (or
/// the line when no key can be read).
void apply_config_text(RunConfig& config, const std::string& text);
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

/// Every key with its current value, one per line, with a short comment.
std::string config_text(const RunConfig& config);
/// Only the keys that define the synthetic scene (scene.*, noise.*).
std::string scene_config_text(const RunConfig& config);

std::vector<std::string> config_keys();

}  // namespace dynrecon
