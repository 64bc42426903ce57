#pragma once

// Temporal prediction: sliding-window input embeddings, stacked encoder
// blocks (multi-head attention + two Conv1D layers that treat time-steps as
// channels), global max pooling and a fully connected head.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tpmcf/dataset.hpp"
#include "tpmcf/gcmf.hpp"
#include "tpmcf/numcore.hpp"

namespace tpmcf {

inline constexpr double kLayerNormEpsilon = 1e-9;

struct PteConfig {
  std::size_t window = 8;
  std::size_t heads = 4;
  std::size_t d_k = 256;
  std::size_t d_v = 256;
  std::size_t blocks = 4;     // C1
  std::size_t fc_layers = 2;  // C2
  std::size_t fc_hidden = 64;
  std::size_t conv_channels = 4;
  std::size_t conv_width = 3;
  double dropout = 0.1;
  double gamma_t = 0.75;
  AdamWConfig optimizer;
  std::size_t epochs = 50;
  std::size_t batch = 256;
  /// Learning rate is multiplied by `plateau_factor` after
  /// `plateau_patience` epochs without a new best loss.
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 3;
  /// Left-pad windows that start before t = 0 by repeating the earliest row;
  /// when false such samples are skipped during training.
  bool pad_short_windows = true;
  std::uint64_t seed = 0;
};

struct InputEmbedding {
  Matrix matrix;  // window x width, oldest row first
  std::uint32_t user = 0;
  std::uint32_t service = 0;
  std::uint32_t t = 0;
};

/// Row r holds [users_k(i) | services_k(j)] for k = t - window + 1 + r.
/// `per_step[k]` must be the embeddings of time-step k.
InputEmbedding build_input_embedding(std::span<const SpatialEmbeddings> per_step, std::uint32_t user,
                                     std::uint32_t service, std::uint32_t t, std::size_t window,
                                     bool pad_short_windows = true);

struct SdpaResult {
  Matrix output;   // rows x d_v
  Matrix weights;  // row-stochastic attention matrix
};

/// softmax(Q K^T / sqrt(d_k)) V with a row-wise softmax.
SdpaResult sdpa(const Matrix& q, const Matrix& k, const Matrix& v);

/// Row-wise normalisation to zero mean, unit variance, then gain and bias.
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias);

struct PteBlockParams {
  std::vector<Matrix> wq;  // per head, width x d_k
  std::vector<Matrix> wk;  // per head, width x d_k
  std::vector<Matrix> wv;  // per head, width x d_v
  Matrix wl;               // (heads * d_v) x width
  Matrix ln1_gain, ln1_bias, ln2_gain, ln2_bias;  // 1 x width
  std::vector<Matrix> conv1;  // per tap, channels x window
  Matrix conv1_bias;          // channels x 1
  Matrix conv2;               // window x channels (kernel width 1)
  Matrix conv2_bias;          // window x 1
  double dropout = 0.0;

  static PteBlockParams init(std::size_t window, std::size_t width, std::size_t heads, std::size_t d_k,
                             std::size_t d_v, std::size_t channels, std::size_t conv_width, double dropout, Rng& rng);
  /// Every trainable tensor in checkpoint order.
  std::vector<Matrix*> tensors();
  std::size_t window() const noexcept { return static_cast<std::size_t>(conv2.rows()); }
  std::size_t width() const noexcept { return static_cast<std::size_t>(wl.cols()); }
};

Matrix mha_forward(const PteBlockParams& params, const Matrix& x);

/// Dropout between the two convolutions is applied only when `training` and
/// `rng` are both set.
Matrix pte_block_forward(const PteBlockParams& params, const Matrix& x, bool training = false, Rng* rng = nullptr);

struct DenseLayer {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
};

struct PteModel {
  std::size_t window = 8;
  std::size_t width = 0;
  double gamma_t = 0.75;
  std::vector<PteBlockParams> blocks;
  std::vector<DenseLayer> head;  // ReLU between layers, linear output of width 1

  static PteModel init(const PteConfig& config, std::size_t width, Rng& rng);
  std::vector<Matrix*> tensors();
};

/// A model of identical shape with every tensor zeroed, used as a gradient buffer.
PteModel zeros_like(const PteModel& model);
void set_zero(PteModel& model);
/// Pairs each trainable tensor with its counterpart in `grads`.
std::vector<ParamRef> parameter_refs(PteModel& model, PteModel& grads);

double tqp_forward(const PteModel& model, const Matrix& input);

/// Cauchy loss for one window; gradients are accumulated (added) into `grads`.
double tqp_loss_and_grad(const PteModel& model, const Matrix& input, double target, PteModel& grads,
                         bool training = false, Rng* rng = nullptr);

struct PteSample {
  std::uint32_t user = 0;
  std::uint32_t service = 0;
  std::uint32_t t = 0;
  double target = 0.0;
};

struct PteTrainResult {
  PteModel model;
  std::vector<double> epoch_loss;
  std::size_t skipped = 0;
};

/// Trains from windows assembled on the fly from per-step embeddings.
PteTrainResult train_pte(std::span<const SpatialEmbeddings> per_step, std::span<const PteSample> samples,
                         const PteConfig& config);

/// Trains from pre-built windows.
PteTrainResult train_pte(std::span<const InputEmbedding> windows, std::span<const double> targets,
                         const PteConfig& config);

/// Dropout disabled; one prediction per triple, in input order.
std::vector<double> predict(const PteModel& model, std::span<const SpatialEmbeddings> per_step,
                            std::span<const Triple> triples);

/// "PTEM", u32 version, u32 window, u32 f' (width / 4, 0 when width is not a
/// multiple of 4), u32 heads, d_k, d_v, C1, C2, f64 gamma_t, then u32 width,
/// u32 fc_hidden, u32 conv channels, u32 conv width, f64 dropout, then every
/// tensor in declaration order as little-endian f64.
void save_pte(const PteModel& model, const std::filesystem::path& path);
PteModel load_pte(const std::filesystem::path& path);

}  // namespace tpmcf
