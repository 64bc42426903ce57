#include "tpmcf/numcore.hpp"

#include <algorithm>
#include <cmath>

#include "tpmcf/errors.hpp"

namespace tpmcf {

namespace {

void check_gamma(double gamma) {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) {
    throw InvalidParameter("cauchy scale gamma must be positive, got " + std::to_string(gamma));
  }
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double cauchy_loss(double residual, double gamma) {
  check_gamma(gamma);
  const double z = residual / gamma;
  return std::log1p(z * z);
}

double cauchy_loss(std::span<const double> residuals, double gamma) {
  check_gamma(gamma);
  double total = 0.0;
  for (double r : residuals) {
    const double z = r / gamma;
    total += std::log1p(z * z);
  }
  return total;
}

double cauchy_loss_grad(double residual, double gamma) {
  check_gamma(gamma);
  if (!std::isfinite(residual)) return 0.0;
  // -2r/(gamma^2 + r^2), written to stay finite for huge |r|
  const double a = std::abs(residual);
  if (a > gamma) {
    const double g = gamma / a;
    return -2.0 / (residual * (1.0 + g * g));
  }
  return -2.0 * residual / (gamma * gamma + residual * residual);
}

AdamWState::AdamWState(Eigen::Index rows, Eigen::Index cols, const AdamWConfig& cfg)
    : first_moment(Matrix::Zero(rows, cols)), second_moment(Matrix::Zero(rows, cols)), config(cfg) {}

void adamw_step(Matrix& param, const Matrix& grad, AdamWState& state) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols() ||
      state.first_moment.rows() != param.rows() || state.first_moment.cols() != param.cols() ||
      state.second_moment.rows() != param.rows() || state.second_moment.cols() != param.cols()) {
    throw DimensionError("adamw_step: parameter, gradient and optimizer state shapes differ");
  }
  const AdamWConfig& c = state.config;
  state.step += 1;
  state.first_moment = c.beta1 * state.first_moment + (1.0 - c.beta1) * grad;
  state.second_moment = c.beta2 * state.second_moment + (1.0 - c.beta2) * grad.cwiseAbs2();
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  const auto m_hat = state.first_moment.array() / bias1;
  const auto v_hat = state.second_moment.array() / bias2;
  param.array() -= c.lr * (m_hat / (v_hat.sqrt() + c.epsilon)) + c.lr * c.weight_decay * param.array();
}

void AdamW::step(std::span<const ParamRef> params) {
  if (states_.empty()) {
    states_.reserve(params.size());
    for (const auto& p : params) states_.emplace_back(p.value->rows(), p.value->cols(), config_);
  }
  if (states_.size() != params.size()) {
    throw DimensionError("AdamW: parameter list changed between steps");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    states_[k].config.lr = config_.lr;
    adamw_step(*params[k].value, *params[k].grad, states_[k]);
  }
}

void AdamW::set_learning_rate(double lr) { config_.lr = lr; }

double grad_check(const std::function<double(const Matrix&)>& loss, const Matrix& params,
                  const Matrix& analytic, double step) {
  if (!(step > 0.0)) throw InvalidParameter("grad_check: step must be positive");
  if (params.rows() != analytic.rows() || params.cols() != analytic.cols()) {
    throw DimensionError("grad_check: analytic gradient shape differs from parameters");
  }
  Matrix probe = params;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < probe.size(); ++k) {
    const double saved = probe.data()[k];
    probe.data()[k] = saved + step;
    const double up = loss(probe);
    probe.data()[k] = saved - step;
    const double down = loss(probe);
    probe.data()[k] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericInstability("grad_check: non-finite loss while probing entry " + std::to_string(k));
    }
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic.data()[k];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

double grad_check_params(const std::function<double()>& loss, std::span<const ParamRef> params,
                         double step) {
  double worst = 0.0;
  for (const auto& p : params) {
    Matrix& value = *p.value;
    const Matrix saved = value;
    const double err = grad_check(
        [&](const Matrix& probe) {
          value = probe;
          return loss();
        },
        saved, *p.grad, step);
    value = saved;
    worst = std::max(worst, err);
  }
  return worst;
}

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
  return m;
}

Matrix glorot_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return uniform_matrix(rows, cols, -limit, limit, rng);
}

void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw NumericInstability(what + " contains non-finite values");
}

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(what + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                         ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

}  // namespace tpmcf
