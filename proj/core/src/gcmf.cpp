#include "tpmcf/gcmf.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "tpmcf/binio.hpp"
#include "tpmcf/errors.hpp"

namespace tpmcf {

namespace {

constexpr std::uint32_t kGcmfVersion = 1;
constexpr std::uint32_t kEmbeddingVersion = 1;

Matrix relu_mask(const Matrix& pre) { return (pre.array() > 0.0).cast<double>().matrix(); }

void check_inputs(const GcmfModel& model, const NormalizedAdjacency& adjacency, const Matrix& features,
                  Eigen::Index users) {
  if (features.rows() != adjacency.size()) {
    throw DimensionError("gcmf: features have " + std::to_string(features.rows()) +
                         " rows but the adjacency has order " + std::to_string(adjacency.size()));
  }
  if (features.cols() != model.w1.rows()) {
    throw DimensionError("gcmf: W1 expects " + std::to_string(model.w1.rows()) + " input features, got " +
                         std::to_string(features.cols()));
  }
  if (model.w2.rows() != model.w1.cols() || model.w2.cols() != model.w1.cols()) {
    throw DimensionError("gcmf: W2 must be f' x f'");
  }
  if (users < 0 || users > features.rows()) throw DimensionError("gcmf: user count exceeds node count");
}

struct Forward {
  Matrix p0;  // A F0
  Matrix h1_pre;
  Matrix f1;
  Matrix p1;  // A F1
  Matrix h2_pre;
  Matrix f2;
};

Forward forward_cached(const GcmfModel& model, const SparseMatrix& adjacency, const Matrix& propagated) {
  Forward f;
  f.p0 = propagated;
  f.h1_pre.noalias() = f.p0 * model.w1;
  f.f1 = f.h1_pre.cwiseMax(0.0);
  f.p1 = adjacency * f.f1;
  f.h2_pre.noalias() = f.p1 * model.w2;
  f.f2 = f.h2_pre.cwiseMax(0.0);
  return f;
}

SpatialEmbeddings split_rows(const Forward& f, Eigen::Index users, std::uint32_t t) {
  const Eigen::Index fp = f.f1.cols();
  const Eigen::Index services = f.f1.rows() - users;
  SpatialEmbeddings e;
  e.t = t;
  e.users.resize(users, 2 * fp);
  e.users << f.f1.topRows(users), f.f2.topRows(users);
  e.services.resize(services, 2 * fp);
  e.services << f.f1.bottomRows(services), f.f2.bottomRows(services);
  return e;
}

double loss_and_grad_cached(const GcmfModel& model, const SparseMatrix& adjacency, const Matrix& propagated,
                            Eigen::Index users, std::span<const Entry> targets, GcmfGradients* grads) {
  const Forward f = forward_cached(model, adjacency, propagated);
  const Eigen::Index fp = model.f_prime();
  Matrix d_f1 = Matrix::Zero(f.f1.rows(), fp);
  Matrix d_f2 = Matrix::Zero(f.f2.rows(), fp);
  double loss = 0.0;
  for (const auto& e : targets) {
    const Eigen::Index u = e.at.user;
    const Eigen::Index s = users + e.at.service;
    const double pred = f.f1.row(u).dot(f.f1.row(s)) + f.f2.row(u).dot(f.f2.row(s));
    const double r = e.value - pred;
    loss += cauchy_loss(r, model.gamma_s);
    if (grads != nullptr) {
      const double g = cauchy_loss_grad(r, model.gamma_s);
      d_f1.row(u) += g * f.f1.row(s);
      d_f1.row(s) += g * f.f1.row(u);
      d_f2.row(u) += g * f.f2.row(s);
      d_f2.row(s) += g * f.f2.row(u);
    }
  }
  if (grads != nullptr) {
    const Matrix d_h2 = d_f2.cwiseProduct(relu_mask(f.h2_pre));
    grads->w2.noalias() = f.p1.transpose() * d_h2;
    // adjacency is symmetric, so A^T dP1 = A dP1
    d_f1 += adjacency * (d_h2 * model.w2.transpose());
    const Matrix d_h1 = d_f1.cwiseProduct(relu_mask(f.h1_pre));
    grads->w1.noalias() = f.p0.transpose() * d_h1;
  }
  return loss;
}

}  // namespace

GcmfModel GcmfModel::init(Eigen::Index input_width, Eigen::Index f_prime, double gamma_s, Rng& rng) {
  if (input_width <= 0 || f_prime <= 0) throw InvalidParameter("gcmf: widths must be positive");
  if (!(gamma_s > 0.0)) throw InvalidParameter("gcmf: gamma_s must be positive");
  GcmfModel m;
  m.w1 = glorot_uniform(input_width, f_prime, rng);
  m.w2 = glorot_uniform(f_prime, f_prime, rng);
  m.gamma_s = gamma_s;
  return m;
}

SpatialEmbeddings gcmf_forward(const GcmfModel& model, const NormalizedAdjacency& adjacency, const Matrix& features,
                               Eigen::Index users) {
  check_inputs(model, adjacency, features, users);
  const Matrix propagated = adjacency.matrix * features;
  return split_rows(forward_cached(model, adjacency.matrix, propagated), users, adjacency.t);
}

double gcmf_predict(const SpatialEmbeddings& embeddings, std::uint32_t user, std::uint32_t service) {
  if (user >= embeddings.users.rows() || service >= embeddings.services.rows()) {
    throw RangeError("gcmf_predict: index (" + std::to_string(user) + ", " + std::to_string(service) +
                     ") out of range");
  }
  return embeddings.users.row(user).dot(embeddings.services.row(service));
}

double gcmf_loss_and_grad(const GcmfModel& model, const NormalizedAdjacency& adjacency, const Matrix& features,
                          Eigen::Index users, std::span<const Entry> targets, GcmfGradients* grads) {
  check_inputs(model, adjacency, features, users);
  const Matrix propagated = adjacency.matrix * features;
  return loss_and_grad_cached(model, adjacency.matrix, propagated, users, targets, grads);
}

GcmfTrainResult train_gcmf(const QosTensor& train, std::span<const InitialEmbedding> features,
                           std::span<const NormalizedAdjacency> adjacencies, const GcmfConfig& config) {
  const std::uint32_t steps = train.time_steps();
  if (features.size() != steps || adjacencies.size() != steps) {
    throw DimensionError("train_gcmf: need features and adjacency for each of the " + std::to_string(steps) +
                         " time-steps");
  }
  if (steps == 0) throw EmptyInput("train_gcmf: no time-steps");
  const Eigen::Index users = train.users();
  const Eigen::Index width = features.front().matrix.cols();

  std::vector<Matrix> propagated;
  propagated.reserve(steps);
  for (std::uint32_t t = 0; t < steps; ++t) {
    const GcmfModel probe{Matrix::Zero(width, 1), Matrix::Zero(1, 1), config.gamma_s};
    check_inputs(probe, adjacencies[t], features[t].matrix, users);
    propagated.push_back(adjacencies[t].matrix * features[t].matrix);
  }

  Rng rng(config.seed);
  GcmfTrainResult result;
  const std::size_t model_count = config.per_time_step ? steps : 1;
  for (std::size_t k = 0; k < model_count; ++k) {
    result.models.push_back(GcmfModel::init(width, static_cast<Eigen::Index>(config.f_prime), config.gamma_s, rng));
  }
  std::vector<GcmfGradients> grads(model_count);
  std::vector<AdamW> optimizers(model_count, AdamW(config.optimizer));

  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::uint32_t t = 0; t < steps; ++t) {
      const auto targets = train.slice(t);
      if (targets.empty()) continue;
      const std::size_t k = config.per_time_step ? t : 0;
      GcmfModel& model = result.models[k];
      const double loss = loss_and_grad_cached(model, adjacencies[t].matrix, propagated[t], users, targets, &grads[k]);
      if (!std::isfinite(loss)) {
        throw NumericInstability("gcmf training diverged at epoch " + std::to_string(epoch + 1) + " (t=" +
                                 std::to_string(t) + ", lr=" + std::to_string(optimizers[k].learning_rate()) + ")");
      }
      epoch_loss += loss;
      const ParamRef params[] = {{"w1", &model.w1, &grads[k].w1}, {"w2", &model.w2, &grads[k].w2}};
      optimizers[k].step(params);
    }
    result.epoch_loss.push_back(epoch_loss);
    spdlog::debug("gcmf epoch {} loss {:.6f}", epoch + 1, epoch_loss);
    if (epoch_loss < best * (1.0 - config.min_rel_improvement)) {
      best = epoch_loss;
      stale = 0;
    } else if (++stale >= config.patience) {
      spdlog::debug("gcmf early stop after epoch {}", epoch + 1);
      break;
    }
  }
  for (const auto& m : result.models) {
    require_finite(m.w1, "gcmf W1");
    require_finite(m.w2, "gcmf W2");
  }

  result.embeddings.reserve(steps);
  for (std::uint32_t t = 0; t < steps; ++t) {
    const auto& model = result.model_for(t);
    result.embeddings.push_back(split_rows(forward_cached(model, adjacencies[t].matrix, propagated[t]), users, t));
  }
  return result;
}

void save_gcmf(const GcmfModel& model, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic("GCMF");
  w.u32(kGcmfVersion);
  w.u32(static_cast<std::uint32_t>(model.input_width()));
  w.u32(static_cast<std::uint32_t>(model.f_prime()));
  w.f64(model.gamma_s);
  w.block(model.w1);
  w.block(model.w2);
  w.finish();
}

GcmfModel load_gcmf(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("GCMF");
  if (r.u32() != kGcmfVersion) throw IoError("unsupported GCMF checkpoint version: " + path.string());
  const auto f = r.u32();
  const auto fp = r.u32();
  GcmfModel m;
  m.gamma_s = r.f64();
  m.w1 = r.block(f, fp);
  m.w2 = r.block(fp, fp);
  return m;
}

void save_spatial_embeddings(const SpatialEmbeddings& e, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic("GCME");
  w.u32(kEmbeddingVersion);
  w.u32(e.t);
  w.u32(static_cast<std::uint32_t>(e.users.rows()));
  w.u32(static_cast<std::uint32_t>(e.services.rows()));
  w.u32(static_cast<std::uint32_t>(e.users.cols()));
  w.block(e.users);
  w.block(e.services);
  w.finish();
}

SpatialEmbeddings load_spatial_embeddings(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("GCME");
  if (r.u32() != kEmbeddingVersion) throw IoError("unsupported embedding version: " + path.string());
  SpatialEmbeddings e;
  e.t = r.u32();
  const auto n = r.u32();
  const auto m = r.u32();
  const auto width = r.u32();
  e.users = r.block(n, width);
  e.services = r.block(m, width);
  return e;
}

}  // namespace tpmcf
