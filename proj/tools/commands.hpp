#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "options.hpp"
#include "tpmcf/dataset.hpp"

namespace tpmcf::cli {

struct IngestOptions {
  std::string input;
  std::string output = "tensor.bin";
  std::string qos = "rt";
  std::uint32_t n = 142;
  std::uint32_t m = 4500;
  std::uint32_t T = 64;
  std::optional<std::uint64_t> seed;  // accepted for uniformity; ingest is deterministic
  std::string log_level = "warn";
};

struct OutliersOptions {
  RunOptions run;
  std::string output = "filtered.bin";
  std::string report = "outliers.json";
  bool scores = false;
};

struct StageOptions {
  RunOptions run;
  std::string output;
};

struct PredictOptions {
  RunOptions run;
  std::string triples;
  std::string output = "-";
};

struct EvaluateOptions {
  RunOptions run;
  std::string output = "-";
  std::string csv;
  std::string per_step_csv;
  bool timing = false;
};

struct AblateOptions {
  RunOptions run;
  std::string output = "-";
  std::vector<std::string> modes{"gcmf", "pte", "full"};
  std::vector<std::string> masks{"all", "stat", "qos", "corr", "stat+qos", "stat+corr", "qos+corr"};
};

struct SweepOptions {
  RunOptions run;
  std::string param;
  std::vector<double> values;
  std::string output = "-";
};

struct SynthCommandOptions {
  SynthOptions synth;
  std::string output;
  std::string planted;
  std::optional<std::uint64_t> seed;
  std::string log_level = "warn";
};

int run_ingest(const IngestOptions& o);
int run_outliers(const OutliersOptions& o);
int run_features(const StageOptions& o);
int run_train_gcmf(const StageOptions& o);
int run_train_pte(const StageOptions& o);
int run_predict(const PredictOptions& o);
int run_evaluate(const EvaluateOptions& o);
int run_ablate(const AblateOptions& o);
int run_sweep(const SweepOptions& o);
int run_synth(const SynthCommandOptions& o);

/// Reads "user service timestep" lines (whitespace or comma separated);
/// blank lines, '#' comments and a non-numeric header are skipped.
std::vector<Triple> read_triples(const std::string& path);

}  // namespace tpmcf::cli
