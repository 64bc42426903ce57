#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "tpmcf/dataset.hpp"
#include "tpmcf/features.hpp"
#include "tpmcf/gcmf.hpp"
#include "tpmcf/pte.hpp"

namespace tpmcf {

/// gcmf: spatial model alone; pte: temporal model on raw initial embeddings;
/// full: spatial embeddings feeding the temporal model.
enum class Mode { gcmf, pte, full };

std::string to_string(Mode mode);
Mode parse_mode(std::string_view text);

struct ExperimentConfig {
  /// Empty path means the synthetic generator below supplies the data.
  std::filesystem::path dataset;
  std::string qos = "rt";  // rt caps values at 20 s, tp is uncapped
  std::uint32_t n = 142;
  std::uint32_t m = 4500;
  std::uint32_t T = 64;
  double density = 0.1;
  double lambda = 0.1;
  std::size_t forest_trees = 100;
  std::size_t forest_subsample = 256;
  FeatureOptions features;
  GcmfConfig gcmf;
  PteConfig pte;
  Mode mode = Mode::full;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  SynthOptions synth;
  /// Empty disables on-disk caching of intermediate artifacts.
  std::filesystem::path cache_dir;

  bool synthetic() const noexcept { return dataset.empty(); }
  std::optional<double> value_cap() const;
  std::string dataset_name() const;
  /// Throws InvalidParameter describing the first bad field.
  void validate() const;
};

/// Small model sizes suitable for the synthetic generator on one CPU core.
ExperimentConfig desk_config();

nlohmann::json to_json(const ExperimentConfig& config);

}  // namespace tpmcf
