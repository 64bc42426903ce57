#include "tpmcf/features.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Sparse>
#include <spdlog/spdlog.h>

#include "tpmcf/binio.hpp"
#include "tpmcf/errors.hpp"

namespace tpmcf {

namespace {

constexpr std::uint32_t kEmbeddingCacheVersion = 1;

// derive_seed stream tags
constexpr std::uint64_t kStreamMf = 0x4d46;
constexpr std::uint64_t kStreamUserAe = 0x5541;
constexpr std::uint64_t kStreamServiceAe = 0x5341;
constexpr std::uint64_t kStreamAeRows = 0x5252;

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

SparseRowMatrix slice_matrix(std::span<const Entry> slice, std::uint32_t n, std::uint32_t m) {
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(slice.size());
  for (const auto& e : slice) trips.emplace_back(e.at.user, e.at.service, e.value);
  SparseRowMatrix q(n, m);
  q.setFromTriplets(trips.begin(), trips.end());
  return q;
}

Matrix cosine_from_gram(const Matrix& gram) {
  const Eigen::Index k = gram.rows();
  Vector norms(k);
  for (Eigen::Index a = 0; a < k; ++a) norms(a) = std::sqrt(std::max(gram(a, a), 0.0));
  Matrix out = Matrix::Zero(k, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = 0; b < k; ++b) {
      if (a == b) {
        out(a, b) = 1.0;
      } else if (norms(a) > 0.0 && norms(b) > 0.0) {
        out(a, b) = gram(a, b) / (norms(a) * norms(b));
      }
    }
  }
  return out;
}

// Sorted uniform choice of at most max_rows of `total` row indices.
std::vector<std::size_t> pick_rows(std::size_t total, std::size_t max_rows, std::uint64_t seed) {
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t keep = std::min(total, max_rows);
  if (keep < total) {
    Rng rng(seed);
    for (std::size_t a = 0; a < keep; ++a) {
      std::uniform_int_distribution<std::size_t> pick(a, total - 1);
      std::swap(order[a], order[pick(rng)]);
    }
    order.resize(keep);
    std::sort(order.begin(), order.end());
  }
  return order;
}

// Copies the picked rows that fall inside block [base, base + block.rows()).
void take_rows(const Matrix& block, std::size_t base, const std::vector<std::size_t>& picked, std::size_t& next,
               Matrix& out) {
  const std::size_t end = base + static_cast<std::size_t>(block.rows());
  for (; next < picked.size() && picked[next] < end; ++next) {
    out.row(static_cast<Eigen::Index>(next)) = block.row(static_cast<Eigen::Index>(picked[next] - base));
  }
}

}  // namespace

FeatureMask FeatureMask::parse(std::string_view text) {
  FeatureMask mask{false, false, false};
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find_first_of(",+", pos);
    auto tok = text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
    while (!tok.empty() && tok.back() == ' ') tok.remove_suffix(1);
    if (tok == "all") {
      mask = FeatureMask{};
    } else if (tok == "stat" || tok == "statistical") {
      mask.statistical = true;
    } else if (tok == "qos") {
      mask.qos = true;
    } else if (tok == "corr" || tok == "correlation") {
      mask.correlation = true;
    } else if (!tok.empty()) {
      throw InvalidParameter("unknown feature block '" + std::string(tok) + "' (expected stat, qos, corr)");
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (mask.empty()) throw InvalidParameter("feature mask selects no block");
  return mask;
}

std::string FeatureMask::to_string() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add(statistical, "stat");
  add(qos, "qos");
  add(correlation, "corr");
  return out;
}

std::array<double, 5> statistical_features(std::span<const double> profile) {
  if (profile.empty()) return {0.0, 0.0, 0.0, 0.0, 0.0};
  const Summary s = summarize(profile);
  return {s.min, s.max, s.median, s.mean, s.std};
}

double mf_objective(std::span<const Entry> slice, const Matrix& users, const Matrix& services, double reg) {
  double total = 0.0;
  for (const auto& e : slice) {
    const double r = e.value - users.row(e.at.user).dot(services.row(e.at.service));
    total += r * r;
  }
  return total + reg * (users.squaredNorm() + services.squaredNorm());
}

void mf_gradient(std::span<const Entry> slice, const Matrix& users, const Matrix& services, double reg,
                 Matrix& grad_users, Matrix& grad_services) {
  grad_users = 2.0 * reg * users;
  grad_services = 2.0 * reg * services;
  for (const auto& e : slice) {
    const double r = e.value - users.row(e.at.user).dot(services.row(e.at.service));
    grad_users.row(e.at.user) -= 2.0 * r * services.row(e.at.service);
    grad_services.row(e.at.service) -= 2.0 * r * users.row(e.at.user);
  }
}

MfFactors qos_mf_features(std::span<const Entry> slice, std::uint32_t n, std::uint32_t m, const MfOptions& options) {
  if (options.rank == 0 || options.rank > std::min(n, m)) {
    throw InvalidParameter("MF rank f_q=" + std::to_string(options.rank) + " must be in [1, min(n, m)=" +
                           std::to_string(std::min(n, m)) + "]");
  }
  const auto k = static_cast<Eigen::Index>(options.rank);
  MfFactors out;
  if (slice.empty()) {
    spdlog::warn("MF on an empty slice; returning zero factors");
    out.users = Matrix::Zero(n, k);
    out.services = Matrix::Zero(m, k);
    out.objective.push_back(0.0);
    return out;
  }
  Rng rng(options.seed);
  out.users = uniform_matrix(n, k, 0.0, options.init_scale, rng);
  out.services = uniform_matrix(m, k, 0.0, options.init_scale, rng);
  double current = mf_objective(slice, out.users, out.services, options.reg);
  out.objective.push_back(current);

  Matrix gu, gs;
  double step = 1e-2;
  for (std::size_t it = 0; it < options.iterations; ++it) {
    mf_gradient(slice, out.users, out.services, options.reg, gu, gs);
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries) {
      Matrix nu = (out.users - step * gu).cwiseMax(0.0);
      Matrix ns = (out.services - step * gs).cwiseMax(0.0);
      // Armijo condition for the projected step
      const double decrease = (gu.cwiseProduct(out.users - nu)).sum() + (gs.cwiseProduct(out.services - ns)).sum();
      const double candidate = mf_objective(slice, nu, ns, options.reg);
      if (candidate <= current - 1e-4 * decrease) {
        out.users = std::move(nu);
        out.services = std::move(ns);
        current = candidate;
        accepted = true;
        step *= 1.5;
        break;
      }
      step *= 0.5;
    }
    out.objective.push_back(current);
    if (!accepted) break;  // stationary to working precision
  }
  return out;
}

CorrelationMatrices correlation_vectors(std::span<const Entry> slice, std::uint32_t n, std::uint32_t m) {
  const SparseRowMatrix q = slice_matrix(slice, n, m);
  const Matrix user_gram = Matrix(q * q.transpose());
  const Matrix service_gram = Matrix(q.transpose() * q);
  return {cosine_from_gram(user_gram), cosine_from_gram(service_gram)};
}

Autoencoder::Autoencoder(Eigen::Index input_dim, Eigen::Index hidden, Eigen::Index code_dim, Rng& rng)
    : enc1_(glorot_uniform(input_dim, hidden, rng)),
      enc1_b_(Matrix::Zero(1, hidden)),
      enc2_(glorot_uniform(hidden, code_dim, rng)),
      enc2_b_(Matrix::Zero(1, code_dim)),
      dec1_(glorot_uniform(code_dim, hidden, rng)),
      dec1_b_(Matrix::Zero(1, hidden)),
      dec2_(glorot_uniform(hidden, input_dim, rng)),
      dec2_b_(Matrix::Zero(1, input_dim)) {
  g_enc1_ = Matrix::Zero(enc1_.rows(), enc1_.cols());
  g_enc1_b_ = Matrix::Zero(1, hidden);
  g_enc2_ = Matrix::Zero(enc2_.rows(), enc2_.cols());
  g_enc2_b_ = Matrix::Zero(1, code_dim);
  g_dec1_ = Matrix::Zero(dec1_.rows(), dec1_.cols());
  g_dec1_b_ = Matrix::Zero(1, hidden);
  g_dec2_ = Matrix::Zero(dec2_.rows(), dec2_.cols());
  g_dec2_b_ = Matrix::Zero(1, input_dim);
}

Matrix Autoencoder::encode(const Matrix& x) const {
  require_shape(x, x.rows(), input_dim(), "autoencoder input");
  const Matrix h = ((x * enc1_).rowwise() + enc1_b_.row(0)).cwiseMax(0.0);
  return (h * enc2_).rowwise() + enc2_b_.row(0);
}

Matrix Autoencoder::reconstruct(const Matrix& x) const {
  const Matrix z = encode(x);
  const Matrix h = ((z * dec1_).rowwise() + dec1_b_.row(0)).cwiseMax(0.0);
  return (h * dec2_).rowwise() + dec2_b_.row(0);
}

double Autoencoder::loss(const Matrix& x) const {
  if (x.size() == 0) return 0.0;
  return (reconstruct(x) - x).squaredNorm() / static_cast<double>(x.size());
}

double Autoencoder::loss_and_grad(const Matrix& x) {
  require_shape(x, x.rows(), input_dim(), "autoencoder input");
  const Matrix h1_pre = (x * enc1_).rowwise() + enc1_b_.row(0);
  const Matrix h1 = h1_pre.cwiseMax(0.0);
  const Matrix z = (h1 * enc2_).rowwise() + enc2_b_.row(0);
  const Matrix h2_pre = (z * dec1_).rowwise() + dec1_b_.row(0);
  const Matrix h2 = h2_pre.cwiseMax(0.0);
  const Matrix y = (h2 * dec2_).rowwise() + dec2_b_.row(0);

  const double scale = 1.0 / static_cast<double>(x.size());
  const Matrix dy = 2.0 * scale * (y - x);
  g_dec2_.noalias() = h2.transpose() * dy;
  g_dec2_b_ = dy.colwise().sum();
  Matrix dh2 = (dy * dec2_.transpose()).cwiseProduct((h2_pre.array() > 0.0).cast<double>().matrix());
  g_dec1_.noalias() = z.transpose() * dh2;
  g_dec1_b_ = dh2.colwise().sum();
  const Matrix dz = dh2 * dec1_.transpose();
  g_enc2_.noalias() = h1.transpose() * dz;
  g_enc2_b_ = dz.colwise().sum();
  Matrix dh1 = (dz * enc2_.transpose()).cwiseProduct((h1_pre.array() > 0.0).cast<double>().matrix());
  g_enc1_.noalias() = x.transpose() * dh1;
  g_enc1_b_ = dh1.colwise().sum();
  return (y - x).squaredNorm() * scale;
}

std::vector<ParamRef> Autoencoder::parameters() {
  return {{"enc1", &enc1_, &g_enc1_}, {"enc1_b", &enc1_b_, &g_enc1_b_}, {"enc2", &enc2_, &g_enc2_},
          {"enc2_b", &enc2_b_, &g_enc2_b_}, {"dec1", &dec1_, &g_dec1_}, {"dec1_b", &dec1_b_, &g_dec1_b_},
          {"dec2", &dec2_, &g_dec2_}, {"dec2_b", &dec2_b_, &g_dec2_b_}};
}

AutoencoderModel train_autoencoder(const Matrix& vectors, const AutoencoderOptions& options) {
  if (vectors.rows() < 2) throw InsufficientData("autoencoder needs at least 2 training vectors");
  if (options.code_dim == 0 || options.hidden == 0) throw InvalidParameter("autoencoder widths must be positive");
  if (options.batch == 0) throw InvalidParameter("autoencoder batch size must be positive");
  Rng rng(options.seed);
  AutoencoderModel model{Autoencoder(vectors.cols(), static_cast<Eigen::Index>(options.hidden),
                                     static_cast<Eigen::Index>(options.code_dim), rng),
                         0.0,
                         {}};
  model.initial_loss = model.net.loss(vectors);

  AdamWConfig cfg;
  cfg.lr = options.lr;
  cfg.weight_decay = options.weight_decay;
  AdamW opt(cfg);
  auto params = model.net.parameters();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(vectors.rows()));
  std::iota(order.begin(), order.end(), 0);
  Matrix batch;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      const std::size_t stop = std::min(order.size(), start + options.batch);
      batch.resize(static_cast<Eigen::Index>(stop - start), vectors.cols());
      for (std::size_t r = start; r < stop; ++r) batch.row(static_cast<Eigen::Index>(r - start)) = vectors.row(order[r]);
      const double l = model.net.loss_and_grad(batch);
      if (!std::isfinite(l)) {
        throw NumericInstability("autoencoder loss diverged at epoch " + std::to_string(epoch + 1));
      }
      opt.step(params);
    }
    model.epoch_loss.push_back(model.net.loss(vectors));
  }
  return model;
}

FeatureModels fit_feature_models(const QosTensor& train, const FeatureOptions& options) {
  if (options.mask.empty()) throw InvalidParameter("feature mask selects no block");
  const auto n = train.users();
  const auto m = train.services();
  FeatureModels models;
  if (options.mask.qos) {
    models.mf.reserve(train.time_steps());
    for (std::uint32_t t = 0; t < train.time_steps(); ++t) {
      MfOptions mf = options.mf;
      mf.rank = options.f_q;
      mf.seed = derive_seed(options.seed, kStreamMf + (static_cast<std::uint64_t>(t) << 16));
      models.mf.push_back(qos_mf_features(train.slice(t), n, m, mf));
    }
  }
  if (options.mask.correlation) {
    // pool rows across time-steps one slice at a time; a full stack of
    // m x m matrices does not fit in memory at dataset scale
    const std::uint64_t T = train.time_steps();
    const auto user_pick = pick_rows(T * n, options.autoencoder_max_rows, derive_seed(options.seed, kStreamAeRows));
    const auto service_pick =
        pick_rows(T * m, options.autoencoder_max_rows, derive_seed(options.seed, kStreamAeRows + 1));
    Matrix user_pool(static_cast<Eigen::Index>(user_pick.size()), n);
    Matrix service_pool(static_cast<Eigen::Index>(service_pick.size()), m);
    std::size_t user_next = 0;
    std::size_t service_next = 0;
    for (std::uint32_t t = 0; t < train.time_steps(); ++t) {
      const auto corr = correlation_vectors(train.slice(t), n, m);
      take_rows(corr.users, std::size_t{t} * n, user_pick, user_next, user_pool);
      take_rows(corr.services, std::size_t{t} * m, service_pick, service_next, service_pool);
    }
    AutoencoderOptions ae = options.autoencoder;
    ae.code_dim = options.f_c;
    ae.seed = derive_seed(options.seed, kStreamUserAe);
    models.user_autoencoder = train_autoencoder(user_pool, ae);
    ae.seed = derive_seed(options.seed, kStreamServiceAe);
    models.service_autoencoder = train_autoencoder(service_pool, ae);
  }
  return models;
}

InitialEmbedding build_initial_embedding(const QosTensor& train, std::uint32_t t, const FeatureModels& models,
                                         const FeatureOptions& options) {
  if (options.mask.empty()) throw InvalidParameter("feature mask selects no block");
  const auto n = static_cast<Eigen::Index>(train.users());
  const auto m = static_cast<Eigen::Index>(train.services());
  const auto width = static_cast<Eigen::Index>(options.mask.width(options.f_q, options.f_c));
  const auto slice = train.slice(t);

  InitialEmbedding out;
  out.t = t;
  out.matrix = Matrix::Zero(n + m, width);
  Eigen::Index col = 0;

  if (options.mask.statistical) {
    std::vector<std::vector<double>> user_profiles(static_cast<std::size_t>(n));
    std::vector<std::vector<double>> service_profiles(static_cast<std::size_t>(m));
    for (const auto& e : slice) {
      user_profiles[e.at.user].push_back(e.value);
      service_profiles[e.at.service].push_back(e.value);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto s = statistical_features(user_profiles[static_cast<std::size_t>(i)]);
      for (Eigen::Index c = 0; c < 5; ++c) out.matrix(i, col + c) = s[static_cast<std::size_t>(c)];
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto s = statistical_features(service_profiles[static_cast<std::size_t>(j)]);
      for (Eigen::Index c = 0; c < 5; ++c) out.matrix(n + j, col + c) = s[static_cast<std::size_t>(c)];
    }
    col += 5;
  }
  if (options.mask.qos) {
    if (models.mf.size() <= t) throw InvalidParameter("no MF factors for time-step " + std::to_string(t));
    const auto& mf = models.mf[t];
    const auto f_q = static_cast<Eigen::Index>(options.f_q);
    require_shape(mf.users, n, f_q, "MF user factors");
    require_shape(mf.services, m, f_q, "MF service factors");
    out.matrix.block(0, col, n, f_q) = mf.users;
    out.matrix.block(n, col, m, f_q) = mf.services;
    col += f_q;
  }
  if (options.mask.correlation) {
    if (!models.user_autoencoder || !models.service_autoencoder) {
      throw InvalidParameter("correlation block requested without trained autoencoders");
    }
    const auto f_c = static_cast<Eigen::Index>(options.f_c);
    const auto corr = correlation_vectors(slice, train.users(), train.services());
    out.matrix.block(0, col, n, f_c) = models.user_autoencoder->net.encode(corr.users);
    out.matrix.block(n, col, m, f_c) = models.service_autoencoder->net.encode(corr.services);
    col += f_c;
  }
  return out;
}

void standardize_columns(std::span<InitialEmbedding> embeddings) {
  if (embeddings.empty()) return;
  const Eigen::Index cols = embeddings.front().matrix.cols();
  RowVector sum = RowVector::Zero(cols);
  double rows = 0.0;
  for (const auto& e : embeddings) {
    require_shape(e.matrix, e.matrix.rows(), cols, "standardize_columns input");
    sum += e.matrix.colwise().sum();
    rows += static_cast<double>(e.matrix.rows());
  }
  if (rows == 0.0) return;
  const RowVector mean = sum / rows;
  RowVector sq = RowVector::Zero(cols);
  for (const auto& e : embeddings) sq += (e.matrix.rowwise() - mean).array().square().colwise().sum().matrix();
  RowVector scale(cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    const double sd = std::sqrt(sq(c) / rows);
    scale(c) = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  for (auto& e : embeddings) {
    e.matrix.rowwise() -= mean;
    e.matrix.array().rowwise() *= scale.array();
  }
}

std::vector<InitialEmbedding> build_all_embeddings(const QosTensor& tensor, const SplitAssignment& split,
                                                   const FeatureOptions& options) {
  const QosTensor train = tensor.restrict_to(split.train);
  const FeatureModels models = fit_feature_models(train, options);
  std::vector<InitialEmbedding> out;
  out.reserve(train.time_steps());
  for (std::uint32_t t = 0; t < train.time_steps(); ++t) out.push_back(build_initial_embedding(train, t, models, options));
  if (options.standardize) standardize_columns(out);
  return out;
}

void write_embedding_cache(const InitialEmbedding& e, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic("TPMF");
  w.u32(kEmbeddingCacheVersion);
  w.u32(e.t);
  w.u32(static_cast<std::uint32_t>(e.matrix.rows()));
  w.u32(static_cast<std::uint32_t>(e.matrix.cols()));
  w.block(e.matrix);
  w.finish();
}

InitialEmbedding read_embedding_cache(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("TPMF");
  if (r.u32() != kEmbeddingCacheVersion) throw IoError("unsupported embedding cache version: " + path.string());
  InitialEmbedding e;
  e.t = r.u32();
  const auto rows = r.u32();
  const auto cols = r.u32();
  e.matrix = r.block(rows, cols);
  return e;
}

}  // namespace tpmcf
