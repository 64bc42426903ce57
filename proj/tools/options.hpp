#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tpmcf/config.hpp"

namespace tpmcf::cli {

/// Flags shared by every pipeline subcommand; values land directly in
/// `config` and are post-processed by resolve().
struct RunOptions {
  ExperimentConfig config;
  std::string config_file;
  std::string mask = "all";
  std::string mode = "full";
  std::optional<std::uint64_t> seed;
  std::string cache_dir;
  bool no_cache = false;
  std::string log_level = "warn";
};

void add_run_options(CLI::App& app, RunOptions& opts);

/// Applies every `key = value` of a flat config file to the options of
/// `app` that were not given on the command line. Unknown keys are a usage
/// error.
void apply_config_file(CLI::App& app, const std::string& path);

/// Applies mask/mode text, the single-seed override and the cache location
/// (flag, then TPMCF_CACHE_DIR, then ./.tpmcf-cache). Throws
/// InvalidParameter on bad values.
ExperimentConfig resolve(const RunOptions& opts);

/// Sets the spdlog level from text; unknown names are a usage error.
void apply_log_level(const std::string& level);

}  // namespace tpmcf::cli
