#pragma once

// Dense numerics shared by every trainable component: matrix aliases, the
// Cauchy robust loss, AdamW and a central-difference gradient checker.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tpmcf {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Every stochastic routine takes one of these explicitly.
using Rng = std::mt19937_64;

/// Deterministic child seed for an independent random stream.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

/// Sum of log(1 + (r/gamma)^2) over the residuals.
double cauchy_loss(std::span<const double> residuals, double gamma);
double cauchy_loss(double residual, double gamma);

/// Derivative of log(1 + ((q - q_hat)/gamma)^2) with respect to the
/// prediction q_hat, where residual = q - q_hat. Bounded by 1/gamma.
double cauchy_loss_grad(double residual, double gamma);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamWState {
  Matrix first_moment;
  Matrix second_moment;
  std::uint64_t step = 0;
  AdamWConfig config;

  AdamWState() = default;
  AdamWState(Eigen::Index rows, Eigen::Index cols, const AdamWConfig& cfg);
};

/// One decoupled-weight-decay Adam update of `param` in place.
void adamw_step(Matrix& param, const Matrix& grad, AdamWState& state);

/// A named trainable tensor together with its gradient accumulator.
struct ParamRef {
  std::string name;
  Matrix* value;
  Matrix* grad;
};

/// AdamW over a fixed list of parameters; one state per parameter.
class AdamW {
 public:
  explicit AdamW(const AdamWConfig& config) : config_(config) {}

  void step(std::span<const ParamRef> params);
  void set_learning_rate(double lr);
  double learning_rate() const noexcept { return config_.lr; }
  std::uint64_t steps_taken() const noexcept { return states_.empty() ? 0 : states_.front().step; }

 private:
  AdamWConfig config_;
  std::vector<AdamWState> states_;
};

/// Central-difference check of an analytic gradient. Returns
/// max_k |a_k - n_k| / max(1, |a_k| + |n_k|).
double grad_check(const std::function<double(const Matrix&)>& loss, const Matrix& params,
                  const Matrix& analytic, double step = 1e-5);

/// Runs grad_check on every tensor of a model; `loss` must read the current
/// parameter values. Returns the worst error across tensors.
double grad_check_params(const std::function<double()>& loss, std::span<const ParamRef> params,
                         double step = 1e-5);

/// Uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))).
Matrix glorot_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng);

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi, Rng& rng);

/// Throws NumericInstability naming `what` if any entry is NaN or Inf.
void require_finite(const Matrix& m, const std::string& what);

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& what);

inline void relu_inplace(Matrix& m) { m = m.cwiseMax(0.0); }

}  // namespace tpmcf
