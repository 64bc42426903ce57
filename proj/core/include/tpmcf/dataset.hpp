#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace tpmcf {

/// (user, service, time-step) coordinate of one QoS observation.
struct Triple {
  std::uint32_t user = 0;
  std::uint32_t service = 0;
  std::uint32_t time = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
};

/// Canonical triple order used everywhere: time, then user, then service.
inline bool triple_less(const Triple& a, const Triple& b) {
  if (a.time != b.time) return a.time < b.time;
  if (a.user != b.user) return a.user < b.user;
  return a.service < b.service;
}

struct Entry {
  Triple at;
  double value = 0.0;

  friend bool operator==(const Entry&, const Entry&) = default;
};

/// Sparse n x m x T tensor of observed QoS values. Only strictly positive
/// values are stored; 0 is the "not observed" sentinel and never appears.
/// Entries are kept sorted in canonical triple order with one offset table per
/// time-step, so a time slice is a contiguous span.
class QosTensor {
 public:
  QosTensor() = default;
  QosTensor(std::uint32_t n, std::uint32_t m, std::uint32_t T);

  /// Validates ranges and positivity, sorts, and resolves duplicates (the
  /// entry appearing last in `entries` wins).
  static QosTensor from_entries(std::uint32_t n, std::uint32_t m, std::uint32_t T,
                                std::vector<Entry> entries);

  std::uint32_t users() const noexcept { return n_; }
  std::uint32_t services() const noexcept { return m_; }
  std::uint32_t time_steps() const noexcept { return T_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  std::span<const Entry> entries() const noexcept { return entries_; }
  std::span<const Entry> slice(std::uint32_t t) const;
  std::optional<double> find(const Triple& at) const;

  /// Copy keeping only the listed triples (which must be observed here).
  QosTensor restrict_to(std::span<const Triple> keep) const;
  /// Copy with the listed triples dropped.
  QosTensor without(std::span<const Triple> drop) const;

  std::vector<double> values() const;

  friend bool operator==(const QosTensor& a, const QosTensor& b) {
    return a.n_ == b.n_ && a.m_ == b.m_ && a.T_ == b.T_ && a.entries_ == b.entries_;
  }

 private:
  void rebuild_offsets();

  std::uint32_t n_ = 0;
  std::uint32_t m_ = 0;
  std::uint32_t T_ = 0;
  std::vector<Entry> entries_;
  std::vector<std::size_t> offsets_;  // size T+1
};

struct Summary {
  std::size_t count = 0;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double median = 0.0;
  double std = 0.0;  // population form
};

Summary summarize(std::span<const double> values);
Summary summarize(const QosTensor& tensor);
/// Empty input yields nullopt instead of throwing.
std::optional<Summary> try_summarize(const QosTensor& tensor);

struct LoadOptions {
  /// Lines whose value exceeds the cap are dropped (WSDREAM RT is capped at 20 s).
  std::optional<double> cap;
};

/// Reads whitespace-separated "user service timeslice value" lines, plain or
/// gzip-compressed. Non-positive values are unobserved and skipped.
QosTensor load_wsdream(const std::filesystem::path& path, std::uint32_t n, std::uint32_t m,
                       std::uint32_t T, const LoadOptions& options = {});

void save_wsdream(const QosTensor& tensor, const std::filesystem::path& path);

/// Flat little-endian cache: "TPMC", u32 version, u32 n, u32 m, u32 T,
/// u64 entry count, then (u32 user, u32 service, u32 time, f64 value) records.
void write_tensor_cache(const QosTensor& tensor, const std::filesystem::path& path);
QosTensor read_tensor_cache(const std::filesystem::path& path);

struct SplitAssignment {
  std::vector<Triple> train;
  std::vector<Triple> test;
  double density = 0.0;
  std::uint64_t seed = 0;
};

/// Per time-step, a uniform ceil(density * |observed at t|)-subset goes to train.
SplitAssignment split_train_test(const QosTensor& tensor, double density, std::uint64_t seed);

struct IsolationForestOptions {
  double lambda = 0.1;
  std::size_t trees = 100;
  std::size_t subsample = 256;
  std::uint64_t seed = 0;
};

struct OutlierReport {
  double lambda = 0.0;
  std::vector<Triple> removed;
  /// One (triple, score) per observed entry of the input, canonical order.
  std::vector<Triple> scored;
  std::vector<double> scores;
};

struct FilterResult {
  QosTensor filtered;
  OutlierReport report;
};

/// Average path-length normaliser c(psi) of an isolation tree.
double isolation_normalizer(std::size_t psi);

/// Anomaly scores 2^(-E[h(x)]/c(psi)) for each value, from a forest fit on
/// `values` themselves.
std::vector<double> isolation_scores(std::span<const double> values, std::size_t trees,
                                     std::size_t subsample, std::uint64_t seed);

/// Removes the ceil(lambda * |observed|) highest-scoring entries.
FilterResult isolation_forest_filter(const QosTensor& tensor, const IsolationForestOptions& options);

struct SynthOptions {
  std::uint32_t n = 40;
  std::uint32_t m = 120;
  std::uint32_t T = 32;
  std::uint32_t rank = 3;
  double density = 0.2;
  double noise = 0.0;
  double outlier_fraction = 0.0;
  /// Temporal modulation amplitudes are drawn from U(0, max_amplitude).
  double max_amplitude = 0.5;
  /// All latent factors set to 1 instead of U(0, 1).
  bool unit_factors = false;
  std::uint64_t seed = 0;
};

struct SynthFactors {
  std::vector<std::vector<double>> users;     // n x rank
  std::vector<std::vector<double>> services;  // m x rank
  std::vector<double> amplitude;              // per user
  std::vector<double> phase;                  // per service
};

/// q = <u_i, s_j> (1 + a_i sin(2 pi t / T + phi_j)) + noise, clipped positive.
QosTensor synth_tensor(const SynthOptions& options, SynthFactors* factors = nullptr,
                       std::vector<Triple>* planted = nullptr);

nlohmann::json to_json(const SplitAssignment& split);
nlohmann::json to_json(const OutlierReport& report, bool include_all_scores = false);
nlohmann::json to_json(const Summary& summary);

}  // namespace tpmcf
