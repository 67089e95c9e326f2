#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "magpath/channel.hpp"
#include "magpath/encoder.hpp"
#include "magpath/gltrans.hpp"
#include "magpath/mag.hpp"
#include "magpath/synth.hpp"

namespace magpath {

/// Everything a pipeline run depends on. Loaded from a key=value file; keys
/// not present keep their defaults.
struct ProjectConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path model_dir = "models";
  std::filesystem::path report_dir = "reports";
  std::uint64_t seed = 42;

  EncoderConfig encoder;
  std::uint64_t teacher_seed = 7;

  MagTrainConfig mag;
  std::size_t mag_pairs = 500;
  double mag_holdout = 0.1;  // patient fraction never seen by MAG training

  GLTransConfig glt;
  GLTransTrainConfig glt_train;

  SynthParams synth;
  CohortSpec cohort;
  TilingConfig tiling;
  std::size_t folds = 10;
  double train_ratio = 0.8, val_ratio = 0.1, test_ratio = 0.1;

  ChannelModel channel;
  double bytes_per_pixel = 3.0;
  double compression_ratio = 10.0;
  std::size_t bootstrap = 500;

  /// Propagates the master seed to every seeded stage.
  void set_seed(std::uint64_t s);
  void validate() const;
};

/// Defaults for the desk benchmark. Differs from the bare library defaults
/// in the MAG learning rate (see README).
ProjectConfig default_project_config();

/// Throws ConfigError on unknown keys or unparsable values.
void apply_setting(ProjectConfig& cfg, const std::string& key, const std::string& value);
ProjectConfig load_project_config(const std::filesystem::path& path);
/// Every key with its current value, one per line, in a fixed order.
std::string to_text(const ProjectConfig& cfg);

}  // namespace magpath
