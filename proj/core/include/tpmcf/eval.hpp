#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "tpmcf/config.hpp"
#include "tpmcf/dataset.hpp"
#include "tpmcf/features.hpp"
#include "tpmcf/gcmf.hpp"
#include "tpmcf/graph.hpp"
#include "tpmcf/pte.hpp"

namespace tpmcf {

double mae(std::span<const double> actual, std::span<const double> predicted);
/// mae divided by the mean of `actual`.
double nmae(double mae_value, std::span<const double> actual);
double nmae_from_mean(double mae_value, double actual_mean);
/// ((m1 - m2) / m2) * 100
double performance_gain(double m1, double m2);
/// ((baseline - ours) / baseline) * 100
double improvement_over(double ours, double baseline);

struct StepMae {
  std::uint32_t t = 0;
  std::size_t count = 0;
  double mae = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double mae = 0.0;
  double nmae = 0.0;
  double baseline_mae = 0.0;  // predicting the train mean everywhere
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  std::size_t removed = 0;
  double latency = 0.0;  // seconds per predicted triple
  std::vector<StepMae> per_step;
  double abs_error_sum = 0.0;
  double actual_sum = 0.0;
  double baseline_abs_error_sum = 0.0;
};

struct EvalReport {
  std::string dataset;
  double density = 0.0;
  double lambda = 0.0;
  Mode mode = Mode::full;
  FeatureMask mask;
  /// Pooled over every seed's test entries.
  double mae = 0.0;
  double nmae = 0.0;
  double baseline_mae = 0.0;
  double seed_mean_mae = 0.0;
  double latency = 0.0;
  std::vector<StepMae> per_step;
  std::vector<SeedResult> seeds;
  ExperimentConfig config;
};

/// Latency is wall-clock dependent and left out unless asked for, so that
/// reports of identical runs compare equal byte for byte.
nlohmann::json to_json(const EvalReport& report, bool include_latency = false);
std::string csv_header();
std::string csv_row(const EvalReport& report);
/// "timestep,mae" rows.
void write_per_step_csv(const EvalReport& report, std::ostream& out);

/// The staged pipeline for one seed. Every stage is computed on first use
/// and memoised; with a cache directory set, expensive stages are also
/// stored on disk under a content hash of their inputs.
class Pipeline {
 public:
  Pipeline(ExperimentConfig config, std::uint64_t seed,
           std::shared_ptr<const QosTensor> raw = nullptr);

  const ExperimentConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }

  const QosTensor& raw();
  const FilterResult& filtered();
  const SplitAssignment& split();
  const QosTensor& train();
  const std::vector<InitialEmbedding>& features();
  const std::vector<NormalizedAdjacency>& adjacencies();
  const GcmfTrainResult& gcmf();
  /// Per-step inputs of the temporal model: GCMF embeddings (full) or the
  /// initial embeddings split into user and service rows (pte).
  const std::vector<SpatialEmbeddings>& temporal_inputs(Mode mode);
  const PteModel& pte(Mode mode);

  std::vector<double> predict(Mode mode, std::span<const Triple> triples);
  SeedResult evaluate(Mode mode);

 private:
  std::optional<std::filesystem::path> stage_dir(const std::string& key) const;
  std::string raw_key();
  std::string filter_key();
  std::string feature_key();
  std::string gcmf_key();
  std::string pte_key(Mode mode);

  ExperimentConfig config_;
  std::uint64_t seed_;
  std::shared_ptr<const QosTensor> raw_;
  std::optional<std::string> raw_key_;
  std::optional<FilterResult> filtered_;
  std::optional<SplitAssignment> split_;
  std::optional<QosTensor> train_;
  std::optional<std::vector<InitialEmbedding>> features_;
  std::optional<std::vector<NormalizedAdjacency>> adjacencies_;
  std::optional<GcmfTrainResult> gcmf_;
  std::optional<std::vector<SpatialEmbeddings>> raw_inputs_;
  std::optional<PteModel> pte_full_;
  std::optional<PteModel> pte_raw_;
};

/// True when the file starts with the tensor cache magic.
bool is_tensor_cache(const std::filesystem::path& path);

/// Loads (or synthesises) the dataset described by `config`. The dataset
/// path may name a WSDREAM text file (plain or gzip) or a tensor cache.
QosTensor load_dataset(const ExperimentConfig& config);

/// Runs every seed in `config.seeds` for `config.mode`.
EvalReport run_experiment(const ExperimentConfig& config);
EvalReport run_experiment(const ExperimentConfig& config, std::shared_ptr<const QosTensor> tensor);

/// Combines per-seed results into one report.
EvalReport make_report(const ExperimentConfig& config, Mode mode, std::vector<SeedResult> seeds);

/// Hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);
/// Hex SHA-256 of a file's contents.
std::string file_sha256(const std::filesystem::path& path);
/// Hex SHA-256 over a tensor's entries in canonical order.
std::string tensor_sha256(const QosTensor& tensor);

}  // namespace tpmcf
