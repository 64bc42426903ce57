#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tpmcf/dataset.hpp"
#include "tpmcf/features.hpp"
#include "tpmcf/graph.hpp"
#include "tpmcf/numcore.hpp"

namespace tpmcf {

/// Two graph-convolution units with shared weights. Unit 1 maps f -> f',
/// unit 2 maps f' -> f'; no bias terms.
struct GcmfModel {
  Matrix w1;  // f x f'
  Matrix w2;  // f' x f'
  double gamma_s = 0.5;

  static GcmfModel init(Eigen::Index input_width, Eigen::Index f_prime, double gamma_s, Rng& rng);
  Eigen::Index input_width() const noexcept { return w1.rows(); }
  Eigen::Index f_prime() const noexcept { return w1.cols(); }
};

/// Row-split of [F1 | F2]: columns [0, f') from unit 1, [f', 2f') from unit 2.
struct SpatialEmbeddings {
  std::uint32_t t = 0;
  Matrix users;     // n x 2f'
  Matrix services;  // m x 2f'
};

SpatialEmbeddings gcmf_forward(const GcmfModel& model, const NormalizedAdjacency& adjacency,
                               const Matrix& features, Eigen::Index users);

/// Inner product of the user and service spatial embeddings.
double gcmf_predict(const SpatialEmbeddings& embeddings, std::uint32_t user, std::uint32_t service);

struct GcmfGradients {
  Matrix w1;
  Matrix w2;
};

/// Summed Cauchy loss over `targets` (entries of one time-step); fills `grads`
/// when non-null.
double gcmf_loss_and_grad(const GcmfModel& model, const NormalizedAdjacency& adjacency, const Matrix& features,
                          Eigen::Index users, std::span<const Entry> targets, GcmfGradients* grads);

struct GcmfConfig {
  std::size_t f_prime = 64;
  double gamma_s = 0.5;
  AdamWConfig optimizer;
  std::size_t epochs = 100;
  /// Stop once the epoch loss improves by less than `min_rel_improvement`
  /// (relative) for `patience` consecutive epochs.
  std::size_t patience = 10;
  double min_rel_improvement = 1e-6;
  /// Independent (W1, W2) per time-step instead of one shared pair.
  bool per_time_step = false;
  std::uint64_t seed = 0;
};

struct GcmfTrainResult {
  std::vector<GcmfModel> models;  // one shared model, or one per time-step
  std::vector<SpatialEmbeddings> embeddings;
  std::vector<double> epoch_loss;

  const GcmfModel& model_for(std::uint32_t t) const { return models.size() == 1 ? models.front() : models.at(t); }
};

/// Fits on the train tensor's entries, one AdamW step per non-empty
/// time-step slice in ascending t, and returns embeddings for every step.
GcmfTrainResult train_gcmf(const QosTensor& train, std::span<const InitialEmbedding> features,
                           std::span<const NormalizedAdjacency> adjacencies, const GcmfConfig& config);

/// "GCMF", u32 version, u32 f, u32 f', f64 gamma_s, W1 and W2 as f64 blocks.
void save_gcmf(const GcmfModel& model, const std::filesystem::path& path);
GcmfModel load_gcmf(const std::filesystem::path& path);

/// "GCME", u32 version, u32 t, u32 n, u32 m, u32 width, users then services.
void save_spatial_embeddings(const SpatialEmbeddings& e, const std::filesystem::path& path);
SpatialEmbeddings load_spatial_embeddings(const std::filesystem::path& path);

}  // namespace tpmcf
