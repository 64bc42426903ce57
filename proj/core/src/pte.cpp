#include "tpmcf/pte.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <spdlog/spdlog.h>

#include "tpmcf/binio.hpp"
#include "tpmcf/errors.hpp"

namespace tpmcf {

namespace {

constexpr std::uint32_t kPteVersion = 1;

Matrix relu_mask(const Matrix& pre) { return (pre.array() > 0.0).cast<double>().matrix(); }

// Column shift used by the same-padded convolution: out(r, p) = x(r, p + offset).
Matrix shift_columns(const Matrix& x, Eigen::Index offset) {
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  const Eigen::Index cols = x.cols();
  if (offset >= 0) {
    if (offset < cols) out.leftCols(cols - offset) = x.rightCols(cols - offset);
  } else {
    const Eigen::Index o = -offset;
    if (o < cols) out.rightCols(cols - o) = x.leftCols(cols - o);
  }
  return out;
}

struct LayerNormCache {
  Matrix normalized;    // before gain/bias
  Vector inv_std;       // per row
};

Matrix layer_norm_cached(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const Eigen::Index d = x.cols();
  cache.normalized.resize(x.rows(), d);
  cache.inv_std.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const RowVector centered = x.row(r).array() - mean;
    const double var = centered.squaredNorm() / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    cache.inv_std(r) = inv;
    cache.normalized.row(r) = centered * inv;
  }
  Matrix y = cache.normalized.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

// Returns dL/dx; accumulates gain and bias gradients.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache, Matrix& d_gain,
                           Matrix& d_bias) {
  d_gain += dy.cwiseProduct(cache.normalized).colwise().sum();
  d_bias += dy.colwise().sum();
  const Matrix d_norm = dy.array().rowwise() * gain.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  const double d = static_cast<double>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = d_norm.row(r).sum() / d;
    const double mean_dn = d_norm.row(r).dot(cache.normalized.row(r)) / d;
    dx.row(r) = cache.inv_std(r) * (d_norm.row(r).array() - mean_d - cache.normalized.row(r).array() * mean_dn);
  }
  return dx;
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double peak = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - peak).exp();
    s.row(r) /= s.row(r).sum();
  }
}

struct HeadCache {
  Matrix q, k, v, weights;
};

struct BlockCache {
  Matrix x;
  std::vector<HeadCache> heads;
  Matrix concat;  // window x (heads * d_v)
  LayerNormCache ln1;
  Matrix y1;
  std::vector<Matrix> shifted;  // per tap
  Matrix hidden_pre;            // channels x width
  Matrix dropout_mask;          // scaled keep mask, or empty
  Matrix hidden;                // after ReLU and dropout
  LayerNormCache ln2;
};

Eigen::Index tap_offset(std::size_t tap, std::size_t taps) {
  return static_cast<Eigen::Index>(tap) - static_cast<Eigen::Index>((taps - 1) / 2);
}

Matrix mha_cached(const PteBlockParams& p, const Matrix& x, BlockCache* cache) {
  const std::size_t heads = p.wq.size();
  const Eigen::Index d_v = p.wv.front().cols();
  Matrix concat(x.rows(), static_cast<Eigen::Index>(heads) * d_v);
  if (cache != nullptr) cache->heads.resize(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Matrix q = x * p.wq[h];
    const Matrix k = x * p.wk[h];
    const Matrix v = x * p.wv[h];
    SdpaResult r = sdpa(q, k, v);
    concat.middleCols(static_cast<Eigen::Index>(h) * d_v, d_v) = r.output;
    if (cache != nullptr) cache->heads[h] = {q, k, v, std::move(r.weights)};
  }
  if (cache != nullptr) cache->concat = concat;
  return concat * p.wl;
}

Matrix block_forward(const PteBlockParams& p, const Matrix& x, bool training, Rng* rng, BlockCache* cache) {
  if (static_cast<std::size_t>(x.rows()) != p.window() || static_cast<std::size_t>(x.cols()) != p.width()) {
    throw DimensionError("pte block: input is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                         ", block expects " + std::to_string(p.window()) + "x" + std::to_string(p.width()));
  }
  BlockCache local;
  BlockCache& c = cache != nullptr ? *cache : local;
  c.x = x;
  const Matrix attended = mha_cached(p, x, &c);
  const Matrix y1 = layer_norm_cached(x + attended, p.ln1_gain, p.ln1_bias, c.ln1);
  c.y1 = y1;

  const std::size_t taps = p.conv1.size();
  c.shifted.resize(taps);
  Matrix hidden_pre = Matrix::Zero(p.conv1.front().rows(), y1.cols());
  for (std::size_t tap = 0; tap < taps; ++tap) {
    c.shifted[tap] = shift_columns(y1, tap_offset(tap, taps));
    hidden_pre.noalias() += p.conv1[tap] * c.shifted[tap];
  }
  hidden_pre.colwise() += p.conv1_bias.col(0);
  c.hidden_pre = hidden_pre;
  Matrix hidden = hidden_pre.cwiseMax(0.0);
  c.dropout_mask.resize(0, 0);
  if (training && rng != nullptr && p.dropout > 0.0) {
    std::bernoulli_distribution keep(1.0 - p.dropout);
    c.dropout_mask.resize(hidden.rows(), hidden.cols());
    const double scale = 1.0 / (1.0 - p.dropout);
    for (Eigen::Index k = 0; k < c.dropout_mask.size(); ++k) c.dropout_mask.data()[k] = keep(*rng) ? scale : 0.0;
    hidden = hidden.cwiseProduct(c.dropout_mask);
  }
  c.hidden = hidden;
  Matrix conv_out = p.conv2 * hidden;
  conv_out.colwise() += p.conv2_bias.col(0);
  return layer_norm_cached(y1 + conv_out, p.ln2_gain, p.ln2_bias, c.ln2);
}

// Accumulates parameter gradients into g, returns dL/dx.
Matrix block_backward(const PteBlockParams& p, const BlockCache& c, const Matrix& d_out, PteBlockParams& g) {
  const Matrix d_sum2 = layer_norm_backward(d_out, p.ln2_gain, c.ln2, g.ln2_gain, g.ln2_bias);
  Matrix d_y1 = d_sum2;

  // conv path
  g.conv2.noalias() += d_sum2 * c.hidden.transpose();
  g.conv2_bias += d_sum2.rowwise().sum();
  Matrix d_hidden = p.conv2.transpose() * d_sum2;
  if (c.dropout_mask.size() > 0) d_hidden = d_hidden.cwiseProduct(c.dropout_mask);
  const Matrix d_hidden_pre = d_hidden.cwiseProduct(relu_mask(c.hidden_pre));
  g.conv1_bias += d_hidden_pre.rowwise().sum();
  const std::size_t taps = p.conv1.size();
  for (std::size_t tap = 0; tap < taps; ++tap) {
    g.conv1[tap].noalias() += d_hidden_pre * c.shifted[tap].transpose();
    const Matrix d_shifted = p.conv1[tap].transpose() * d_hidden_pre;
    d_y1 += shift_columns(d_shifted, -tap_offset(tap, taps));
  }

  const Matrix d_sum1 = layer_norm_backward(d_y1, p.ln1_gain, c.ln1, g.ln1_gain, g.ln1_bias);
  Matrix d_x = d_sum1;

  // attention path
  g.wl.noalias() += c.concat.transpose() * d_sum1;
  const Matrix d_concat = d_sum1 * p.wl.transpose();
  const Eigen::Index d_v = p.wv.front().cols();
  for (std::size_t h = 0; h < p.wq.size(); ++h) {
    const HeadCache& hc = c.heads[h];
    const double scale = 1.0 / std::sqrt(static_cast<double>(hc.q.cols()));
    const Matrix d_head = d_concat.middleCols(static_cast<Eigen::Index>(h) * d_v, d_v);
    const Matrix d_v_mat = hc.weights.transpose() * d_head;
    const Matrix d_weights = d_head * hc.v.transpose();
    Matrix d_scores = d_weights;
    for (Eigen::Index r = 0; r < d_scores.rows(); ++r) {
      const double dot = d_weights.row(r).dot(hc.weights.row(r));
      d_scores.row(r) = hc.weights.row(r).array() * (d_weights.row(r).array() - dot);
    }
    const Matrix d_q = scale * d_scores * hc.k;
    const Matrix d_k = scale * d_scores.transpose() * hc.q;
    g.wq[h].noalias() += c.x.transpose() * d_q;
    g.wk[h].noalias() += c.x.transpose() * d_k;
    g.wv[h].noalias() += c.x.transpose() * d_v_mat;
    d_x.noalias() += d_q * p.wq[h].transpose();
    d_x.noalias() += d_k * p.wk[h].transpose();
    d_x.noalias() += d_v_mat * p.wv[h].transpose();
  }
  return d_x;
}

void check_model_input(const PteModel& model, const Matrix& input) {
  if (static_cast<std::size_t>(input.rows()) != model.window ||
      static_cast<std::size_t>(input.cols()) != model.width) {
    throw DimensionError("pte: window is " + std::to_string(input.rows()) + "x" + std::to_string(input.cols()) +
                         ", model expects " + std::to_string(model.window) + "x" + std::to_string(model.width));
  }
}

std::vector<Matrix*> block_tensors(PteBlockParams& b) {
  std::vector<Matrix*> out;
  for (auto& m : b.wq) out.push_back(&m);
  for (auto& m : b.wk) out.push_back(&m);
  for (auto& m : b.wv) out.push_back(&m);
  out.push_back(&b.wl);
  out.push_back(&b.ln1_gain);
  out.push_back(&b.ln1_bias);
  out.push_back(&b.ln2_gain);
  out.push_back(&b.ln2_bias);
  for (auto& m : b.conv1) out.push_back(&m);
  out.push_back(&b.conv1_bias);
  out.push_back(&b.conv2);
  out.push_back(&b.conv2_bias);
  return out;
}

}  // namespace

InputEmbedding build_input_embedding(std::span<const SpatialEmbeddings> per_step, std::uint32_t user,
                                     std::uint32_t service, std::uint32_t t, std::size_t window,
                                     bool pad_short_windows) {
  if (per_step.empty()) throw EmptyInput("build_input_embedding: no spatial embeddings");
  if (window == 0) throw InvalidParameter("build_input_embedding: window must be positive");
  if (t >= per_step.size()) throw RangeError("build_input_embedding: no embeddings for time-step " + std::to_string(t));
  const auto& last = per_step[t];
  if (user >= last.users.rows() || service >= last.services.rows()) {
    throw RangeError("build_input_embedding: index (" + std::to_string(user) + ", " + std::to_string(service) +
                     ") out of range");
  }
  const long first = static_cast<long>(t) - static_cast<long>(window) + 1;
  if (first < 0 && !pad_short_windows) {
    throw RangeError("build_input_embedding: window of " + std::to_string(window) + " does not fit before t=" +
                     std::to_string(t));
  }
  const Eigen::Index uw = last.users.cols();
  const Eigen::Index sw = last.services.cols();
  InputEmbedding out;
  out.user = user;
  out.service = service;
  out.t = t;
  out.matrix.resize(static_cast<Eigen::Index>(window), uw + sw);
  for (std::size_t r = 0; r < window; ++r) {
    const auto k = static_cast<std::size_t>(std::max(0L, first + static_cast<long>(r)));
    const auto& e = per_step[k];
    out.matrix.row(static_cast<Eigen::Index>(r)) << e.users.row(user), e.services.row(service);
  }
  return out;
}

SdpaResult sdpa(const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw DimensionError("sdpa: Q/K widths or K/V lengths disagree");
  }
  SdpaResult r;
  r.weights = (q * k.transpose()) / std::sqrt(static_cast<double>(q.cols()));
  softmax_rows(r.weights);
  r.output = r.weights * v;
  return r;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias) {
  require_shape(gain, 1, x.cols(), "layer_norm gain");
  require_shape(bias, 1, x.cols(), "layer_norm bias");
  LayerNormCache cache;
  return layer_norm_cached(x, gain, bias, cache);
}

PteBlockParams PteBlockParams::init(std::size_t window, std::size_t width, std::size_t heads, std::size_t d_k,
                                    std::size_t d_v, std::size_t channels, std::size_t conv_width, double dropout,
                                    Rng& rng) {
  if (window == 0 || width < 2 || heads == 0 || d_k == 0 || d_v == 0 || channels == 0 || conv_width == 0) {
    throw InvalidParameter("pte block: all dimensions must be positive (width >= 2)");
  }
  if (conv_width % 2 == 0) throw InvalidParameter("pte block: convolution width must be odd for same padding");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidParameter("pte block: dropout must be in [0, 1)");
  const auto T = static_cast<Eigen::Index>(window);
  const auto D = static_cast<Eigen::Index>(width);
  PteBlockParams p;
  for (std::size_t h = 0; h < heads; ++h) p.wq.push_back(glorot_uniform(D, static_cast<Eigen::Index>(d_k), rng));
  for (std::size_t h = 0; h < heads; ++h) p.wk.push_back(glorot_uniform(D, static_cast<Eigen::Index>(d_k), rng));
  for (std::size_t h = 0; h < heads; ++h) p.wv.push_back(glorot_uniform(D, static_cast<Eigen::Index>(d_v), rng));
  p.wl = glorot_uniform(static_cast<Eigen::Index>(heads * d_v), D, rng);
  p.ln1_gain = Matrix::Ones(1, D);
  p.ln1_bias = Matrix::Zero(1, D);
  p.ln2_gain = Matrix::Ones(1, D);
  p.ln2_bias = Matrix::Zero(1, D);
  const auto C = static_cast<Eigen::Index>(channels);
  // fan counts of a width-k kernel over T input channels
  const double limit1 = std::sqrt(6.0 / static_cast<double>((T + C) * static_cast<Eigen::Index>(conv_width)));
  for (std::size_t tap = 0; tap < conv_width; ++tap) p.conv1.push_back(uniform_matrix(C, T, -limit1, limit1, rng));
  p.conv1_bias = Matrix::Zero(C, 1);
  p.conv2 = glorot_uniform(T, C, rng);
  p.conv2_bias = Matrix::Zero(T, 1);
  p.dropout = dropout;
  return p;
}

std::vector<Matrix*> PteBlockParams::tensors() { return block_tensors(*this); }

Matrix mha_forward(const PteBlockParams& params, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != params.width() || params.wq.empty() ||
      x.cols() != params.wq.front().rows()) {
    throw DimensionError("mha: input width " + std::to_string(x.cols()) + " does not match projections");
  }
  return mha_cached(params, x, nullptr);
}

Matrix pte_block_forward(const PteBlockParams& params, const Matrix& x, bool training, Rng* rng) {
  return block_forward(params, x, training, rng, nullptr);
}

PteModel PteModel::init(const PteConfig& config, std::size_t width, Rng& rng) {
  if (config.fc_layers == 0) throw InvalidParameter("pte: at least one fully connected layer is required");
  if (!(config.gamma_t > 0.0)) throw InvalidParameter("pte: gamma_t must be positive");
  PteModel m;
  m.window = config.window;
  m.width = width;
  m.gamma_t = config.gamma_t;
  for (std::size_t b = 0; b < config.blocks; ++b) {
    m.blocks.push_back(PteBlockParams::init(config.window, width, config.heads, config.d_k, config.d_v,
                                            config.conv_channels, config.conv_width, config.dropout, rng));
  }
  std::size_t in = width;
  for (std::size_t l = 0; l < config.fc_layers; ++l) {
    const std::size_t out = l + 1 == config.fc_layers ? 1 : config.fc_hidden;
    m.head.push_back({glorot_uniform(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out), rng),
                      Matrix::Zero(1, static_cast<Eigen::Index>(out))});
    in = out;
  }
  return m;
}

std::vector<Matrix*> PteModel::tensors() {
  std::vector<Matrix*> out;
  for (auto& b : blocks) {
    auto bt = b.tensors();
    out.insert(out.end(), bt.begin(), bt.end());
  }
  for (auto& l : head) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

PteModel zeros_like(const PteModel& model) {
  PteModel z = model;
  set_zero(z);
  return z;
}

void set_zero(PteModel& model) {
  for (Matrix* t : model.tensors()) t->setZero();
}

std::vector<ParamRef> parameter_refs(PteModel& model, PteModel& grads) {
  auto values = model.tensors();
  auto gs = grads.tensors();
  if (values.size() != gs.size()) throw DimensionError("pte: gradient buffer does not match model");
  std::vector<ParamRef> out;
  out.reserve(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) out.push_back({"pte." + std::to_string(k), values[k], gs[k]});
  return out;
}

double tqp_forward(const PteModel& model, const Matrix& input) {
  check_model_input(model, input);
  Matrix x = input;
  for (const auto& b : model.blocks) x = block_forward(b, x, false, nullptr, nullptr);
  Matrix a = x.colwise().maxCoeff();
  for (std::size_t l = 0; l < model.head.size(); ++l) {
    a = a * model.head[l].weight + model.head[l].bias;
    if (l + 1 < model.head.size()) relu_inplace(a);
  }
  return a(0, 0);
}

double tqp_loss_and_grad(const PteModel& model, const Matrix& input, double target, PteModel& grads, bool training,
                         Rng* rng) {
  check_model_input(model, input);
  std::vector<BlockCache> caches(model.blocks.size());
  Matrix x = input;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) x = block_forward(model.blocks[b], x, training, rng, &caches[b]);

  // global max pool over time, remembering the winning row per column
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(x.cols()));
  Matrix pooled(1, x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    Eigen::Index best = 0;
    pooled(0, c) = x.col(c).maxCoeff(&best);
    argmax[static_cast<std::size_t>(c)] = best;
  }
  std::vector<Matrix> activations{pooled};
  std::vector<Matrix> pre;
  for (std::size_t l = 0; l < model.head.size(); ++l) {
    Matrix z = activations.back() * model.head[l].weight + model.head[l].bias;
    pre.push_back(z);
    if (l + 1 < model.head.size()) relu_inplace(z);
    activations.push_back(std::move(z));
  }
  const double prediction = activations.back()(0, 0);
  const double residual = target - prediction;
  const double loss = cauchy_loss(residual, model.gamma_t);

  Matrix d = Matrix::Constant(1, 1, cauchy_loss_grad(residual, model.gamma_t));
  for (std::size_t l = model.head.size(); l-- > 0;) {
    if (l + 1 < model.head.size()) d = d.cwiseProduct(relu_mask(pre[l]));
    grads.head[l].weight.noalias() += activations[l].transpose() * d;
    grads.head[l].bias += d;
    d = d * model.head[l].weight.transpose();
  }
  Matrix d_x = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) d_x(argmax[static_cast<std::size_t>(c)], c) = d(0, c);
  for (std::size_t b = model.blocks.size(); b-- > 0;) {
    d_x = block_backward(model.blocks[b], caches[b], d_x, grads.blocks[b]);
  }
  return loss;
}

namespace {

template <typename WindowAt>
PteTrainResult train_impl(std::size_t count, std::size_t width, const WindowAt& window_at,
                          const std::vector<double>& targets, const PteConfig& config) {
  if (count == 0) throw InsufficientData("train_pte: no training windows");
  if (config.batch == 0) throw InvalidParameter("train_pte: batch size must be positive");
  Rng rng(config.seed);
  PteTrainResult result;
  result.model = PteModel::init(config, width, rng);
  // start the output at the target median so early steps fit shape, not scale
  std::vector<double> sorted = targets;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
  result.model.head.back().bias(0, 0) = sorted[sorted.size() / 2];

  PteModel grads = zeros_like(result.model);
  auto params = parameter_refs(result.model, grads);
  AdamW optimizer(config.optimizer);
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);

  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < count; start += config.batch) {
      const std::size_t stop = std::min(count, start + config.batch);
      set_zero(grads);
      for (std::size_t a = start; a < stop; ++a) {
        const std::size_t k = order[a];
        epoch_loss += tqp_loss_and_grad(result.model, window_at(k), targets[k], grads, true, &rng);
      }
      if (!std::isfinite(epoch_loss)) {
        throw NumericInstability("pte training diverged at epoch " + std::to_string(epoch + 1) +
                                 " (lr=" + std::to_string(optimizer.learning_rate()) + ")");
      }
      optimizer.step(params);
    }
    result.epoch_loss.push_back(epoch_loss);
    spdlog::debug("pte epoch {} loss {:.6f} lr {:.2e}", epoch + 1, epoch_loss, optimizer.learning_rate());
    if (epoch_loss < best) {
      best = epoch_loss;
      since_best = 0;
    } else if (++since_best >= config.plateau_patience) {
      optimizer.set_learning_rate(optimizer.learning_rate() * config.plateau_factor);
      since_best = 0;
    }
  }
  for (Matrix* t : result.model.tensors()) require_finite(*t, "pte parameter");
  return result;
}

}  // namespace

PteTrainResult train_pte(std::span<const SpatialEmbeddings> per_step, std::span<const PteSample> samples,
                         const PteConfig& config) {
  if (per_step.empty()) throw EmptyInput("train_pte: no spatial embeddings");
  std::vector<PteSample> kept;
  kept.reserve(samples.size());
  std::size_t skipped = 0;
  for (const auto& s : samples) {
    if (!config.pad_short_windows && s.t + 1 < config.window) {
      ++skipped;
      continue;
    }
    kept.push_back(s);
  }
  std::vector<double> targets;
  targets.reserve(kept.size());
  for (const auto& s : kept) targets.push_back(s.target);
  const std::size_t width = static_cast<std::size_t>(per_step.front().users.cols() + per_step.front().services.cols());
  auto window_at = [&](std::size_t k) {
    const auto& s = kept[k];
    return build_input_embedding(per_step, s.user, s.service, s.t, config.window, config.pad_short_windows).matrix;
  };
  PteTrainResult r = train_impl(kept.size(), width, window_at, targets, config);
  r.skipped = skipped;
  return r;
}

PteTrainResult train_pte(std::span<const InputEmbedding> windows, std::span<const double> targets,
                         const PteConfig& config) {
  if (windows.size() != targets.size()) throw DimensionError("train_pte: windows and targets differ in count");
  if (windows.empty()) throw InsufficientData("train_pte: no training windows");
  const auto& first = windows.front().matrix;
  for (const auto& w : windows) {
    require_shape(w.matrix, first.rows(), first.cols(), "train_pte window");
  }
  if (static_cast<std::size_t>(first.rows()) != config.window) {
    throw DimensionError("train_pte: windows have " + std::to_string(first.rows()) + " rows, config window is " +
                         std::to_string(config.window));
  }
  const std::vector<double> t(targets.begin(), targets.end());
  auto window_at = [&](std::size_t k) -> const Matrix& { return windows[k].matrix; };
  return train_impl(windows.size(), static_cast<std::size_t>(first.cols()), window_at, t, config);
}

std::vector<double> predict(const PteModel& model, std::span<const SpatialEmbeddings> per_step,
                            std::span<const Triple> triples) {
  std::vector<double> out;
  out.reserve(triples.size());
  for (const auto& tr : triples) {
    const auto window = build_input_embedding(per_step, tr.user, tr.service, tr.time, model.window, true);
    out.push_back(tqp_forward(model, window.matrix));
  }
  return out;
}

void save_pte(const PteModel& model, const std::filesystem::path& path) {
  if (model.blocks.empty() && model.head.empty()) throw InvalidParameter("save_pte: empty model");
  PteModel copy = model;
  BinaryWriter w(path);
  w.magic("PTEM");
  w.u32(kPteVersion);
  w.u32(static_cast<std::uint32_t>(model.window));
  w.u32(static_cast<std::uint32_t>(model.width % 4 == 0 ? model.width / 4 : 0));
  const bool has_blocks = !model.blocks.empty();
  w.u32(has_blocks ? static_cast<std::uint32_t>(model.blocks.front().wq.size()) : 0);
  w.u32(has_blocks ? static_cast<std::uint32_t>(model.blocks.front().wq.front().cols()) : 0);
  w.u32(has_blocks ? static_cast<std::uint32_t>(model.blocks.front().wv.front().cols()) : 0);
  w.u32(static_cast<std::uint32_t>(model.blocks.size()));
  w.u32(static_cast<std::uint32_t>(model.head.size()));
  w.f64(model.gamma_t);
  w.u32(static_cast<std::uint32_t>(model.width));
  w.u32(model.head.size() > 1 ? static_cast<std::uint32_t>(model.head.front().weight.cols()) : 0);
  w.u32(has_blocks ? static_cast<std::uint32_t>(model.blocks.front().conv1.front().rows()) : 0);
  w.u32(has_blocks ? static_cast<std::uint32_t>(model.blocks.front().conv1.size()) : 0);
  w.f64(has_blocks ? model.blocks.front().dropout : 0.0);
  for (const Matrix* t : copy.tensors()) w.block(*t);
  w.finish();
}

PteModel load_pte(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("PTEM");
  if (r.u32() != kPteVersion) throw IoError("unsupported PTE checkpoint version: " + path.string());
  PteConfig cfg;
  cfg.window = r.u32();
  r.u32();  // f', implied by width
  cfg.heads = r.u32();
  cfg.d_k = r.u32();
  cfg.d_v = r.u32();
  cfg.blocks = r.u32();
  cfg.fc_layers = r.u32();
  cfg.gamma_t = r.f64();
  const std::size_t width = r.u32();
  cfg.fc_hidden = r.u32();
  cfg.conv_channels = r.u32();
  cfg.conv_width = r.u32();
  cfg.dropout = r.f64();
  if (cfg.blocks == 0) {
    cfg.heads = cfg.d_k = cfg.d_v = cfg.conv_channels = 1;
    cfg.conv_width = 1;
  }
  Rng scratch(0);
  PteModel model = PteModel::init(cfg, width, scratch);
  for (Matrix* t : model.tensors()) *t = r.block(t->rows(), t->cols());
  if (!r.at_end()) throw IoError("trailing bytes in PTE checkpoint: " + path.string());
  return model;
}

}  // namespace tpmcf
