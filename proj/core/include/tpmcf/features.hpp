#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tpmcf/dataset.hpp"
#include "tpmcf/numcore.hpp"

namespace tpmcf {

/// Which of the three hand-crafted feature blocks enter the embedding.
struct FeatureMask {
  bool statistical = true;
  bool qos = true;
  bool correlation = true;

  bool empty() const noexcept { return !statistical && !qos && !correlation; }
  std::size_t width(std::size_t f_q, std::size_t f_c) const noexcept {
    return (statistical ? 5 : 0) + (qos ? f_q : 0) + (correlation ? f_c : 0);
  }
  /// List over {stat, qos, corr} separated by ',' or '+'; "all" selects every block.
  static FeatureMask parse(std::string_view text);
  std::string to_string() const;

  friend bool operator==(const FeatureMask&, const FeatureMask&) = default;
};

/// [min, max, median, mean, population std]; zeros for an empty profile.
std::array<double, 5> statistical_features(std::span<const double> profile);

struct MfOptions {
  std::size_t rank = 100;
  std::size_t iterations = 200;
  double reg = 0.01;
  double init_scale = 0.1;
  std::uint64_t seed = 0;
};

struct MfFactors {
  Matrix users;     // n x rank, non-negative
  Matrix services;  // m x rank, non-negative
  /// Objective after initialisation and after every iteration.
  std::vector<double> objective;
};

/// Sum over observed (q - <p_i, r_j>)^2 + reg (|P|^2 + |R|^2).
double mf_objective(std::span<const Entry> slice, const Matrix& users, const Matrix& services, double reg);
void mf_gradient(std::span<const Entry> slice, const Matrix& users, const Matrix& services, double reg,
                 Matrix& grad_users, Matrix& grad_services);

/// Non-negative factorisation of one time slice by projected gradient descent
/// with a backtracking step, so the objective never increases.
MfFactors qos_mf_features(std::span<const Entry> slice, std::uint32_t n, std::uint32_t m, const MfOptions& options);

struct CorrelationMatrices {
  Matrix users;     // n x n cosine similarities
  Matrix services;  // m x m
};

/// Cosine similarity of zero-imputed invocation profiles. A zero-norm profile
/// is 0 against everything and 1 on the diagonal.
CorrelationMatrices correlation_vectors(std::span<const Entry> slice, std::uint32_t n, std::uint32_t m);

/// input -> hidden (ReLU) -> code (linear) -> hidden (ReLU) -> input (linear),
/// trained on mean squared reconstruction error.
class Autoencoder {
 public:
  Autoencoder() = default;
  Autoencoder(Eigen::Index input_dim, Eigen::Index hidden, Eigen::Index code_dim, Rng& rng);

  Eigen::Index input_dim() const noexcept { return enc1_.rows(); }
  Eigen::Index code_dim() const noexcept { return enc2_.cols(); }
  Eigen::Index hidden_dim() const noexcept { return enc1_.cols(); }

  Matrix encode(const Matrix& x) const;
  Matrix reconstruct(const Matrix& x) const;
  double loss(const Matrix& x) const;
  /// MSE over all elements of the batch; gradients land in the grad buffers.
  double loss_and_grad(const Matrix& x);
  std::vector<ParamRef> parameters();

 private:
  Matrix enc1_, enc1_b_, enc2_, enc2_b_, dec1_, dec1_b_, dec2_, dec2_b_;
  Matrix g_enc1_, g_enc1_b_, g_enc2_, g_enc2_b_, g_dec1_, g_dec1_b_, g_dec2_, g_dec2_b_;
};

struct AutoencoderOptions {
  std::size_t code_dim = 50;
  std::size_t hidden = 256;
  std::size_t epochs = 100;
  std::size_t batch = 64;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct AutoencoderModel {
  Autoencoder net;
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;  // full-data MSE after each epoch
  double final_loss() const { return epoch_loss.empty() ? initial_loss : epoch_loss.back(); }
};

/// Rows of `vectors` are the training examples.
AutoencoderModel train_autoencoder(const Matrix& vectors, const AutoencoderOptions& options);

struct FeatureOptions {
  std::size_t f_q = 100;
  std::size_t f_c = 50;
  FeatureMask mask;
  MfOptions mf;
  AutoencoderOptions autoencoder;
  /// Pooled correlation rows are subsampled to at most this many per side.
  std::size_t autoencoder_max_rows = 4096;
  /// Rescale every column of the assembled embeddings to zero mean and unit
  /// variance, with statistics pooled over all nodes and time-steps.
  bool standardize = true;
  std::uint64_t seed = 0;
};

struct FeatureModels {
  std::vector<MfFactors> mf;  // per time-step; empty when the qos block is masked
  std::optional<AutoencoderModel> user_autoencoder;
  std::optional<AutoencoderModel> service_autoencoder;
};

struct InitialEmbedding {
  std::uint32_t t = 0;
  Matrix matrix;  // (n + m) x f; users first, then services
};

/// Trains the per-step MF factors and the two pooled autoencoders from
/// train-only data.
FeatureModels fit_feature_models(const QosTensor& train, const FeatureOptions& options);

InitialEmbedding build_initial_embedding(const QosTensor& train, std::uint32_t t, const FeatureModels& models,
                                         const FeatureOptions& options);

/// In-place column standardisation pooled over all embeddings; constant
/// columns are only centred.
void standardize_columns(std::span<InitialEmbedding> embeddings);

/// Restricts `tensor` to the train side of `split`, then fits models and
/// assembles the embedding for every time-step.
std::vector<InitialEmbedding> build_all_embeddings(const QosTensor& tensor, const SplitAssignment& split,
                                                   const FeatureOptions& options);

/// Cache format: "TPMF", u32 version, u32 t, u32 rows, u32 cols, f64 block.
void write_embedding_cache(const InitialEmbedding& e, const std::filesystem::path& path);
InitialEmbedding read_embedding_cache(const std::filesystem::path& path);

}  // namespace tpmcf
