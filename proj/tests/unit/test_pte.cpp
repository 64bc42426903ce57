#include <doctest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "tpmcf/errors.hpp"
#include "tpmcf/pte.hpp"

using namespace tpmcf;

namespace {

std::vector<SpatialEmbeddings> random_steps(std::uint32_t T, Eigen::Index n, Eigen::Index m, Eigen::Index half,
                                            std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SpatialEmbeddings> out(T);
  for (std::uint32_t t = 0; t < T; ++t) {
    out[t].t = t;
    out[t].users = uniform_matrix(n, half, -1.0, 1.0, rng);
    out[t].services = uniform_matrix(m, half, -1.0, 1.0, rng);
  }
  return out;
}

PteConfig micro_config() {
  PteConfig c;
  c.window = 2;
  c.heads = 1;
  c.d_k = 2;
  c.d_v = 2;
  c.blocks = 1;
  c.fc_layers = 2;
  c.fc_hidden = 3;
  c.conv_channels = 2;
  c.conv_width = 3;
  c.dropout = 0.0;
  return c;
}

Matrix row_mean_centered(const Matrix& x) { return x.colwise() - x.rowwise().mean(); }

}  // namespace

TEST_CASE("input embedding") {
  const auto steps = random_steps(10, 3, 4, 128, 1);
  SUBCASE("shape") {
    const auto e = build_input_embedding(steps, 1, 2, 9, 8);
    CHECK(e.matrix.rows() == 8);
    CHECK(e.matrix.cols() == 256);
  }
  SUBCASE("last row is the current step") {
    const auto e = build_input_embedding(steps, 1, 2, 9, 8);
    CHECK(e.matrix.block(7, 0, 1, 128) == steps[9].users.row(1));
    CHECK(e.matrix.block(7, 128, 1, 128) == steps[9].services.row(2));
    CHECK(e.matrix.block(0, 0, 1, 128) == steps[2].users.row(1));
  }
  SUBCASE("padding at the start") {
    const auto e = build_input_embedding(steps, 0, 3, 0, 8);
    for (Eigen::Index r = 0; r < 8; ++r) {
      CHECK(e.matrix.block(r, 0, 1, 128) == steps[0].users.row(0));
      CHECK(e.matrix.block(r, 128, 1, 128) == steps[0].services.row(3));
    }
    const auto e2 = build_input_embedding(steps, 0, 3, 2, 4);
    CHECK(e2.matrix.row(0) == e2.matrix.row(1));
    CHECK(e2.matrix.block(1, 0, 1, 128) == steps[0].users.row(0));
    CHECK(e2.matrix.block(2, 0, 1, 128) == steps[1].users.row(0));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(build_input_embedding(steps, 0, 0, 2, 4, false), RangeError);
    CHECK_THROWS_AS(build_input_embedding(steps, 3, 0, 2, 2), RangeError);
    CHECK_THROWS_AS(build_input_embedding(steps, 0, 0, 10, 2), RangeError);
    CHECK_THROWS_AS(build_input_embedding(steps, 0, 0, 5, 0), InvalidParameter);
  }
}

TEST_CASE("scaled dot-product attention") {
  Rng rng(2);
  SUBCASE("zero queries give uniform weights") {
    const Matrix v = uniform_matrix(5, 3, -1.0, 1.0, rng);
    const auto r = sdpa(Matrix::Zero(5, 4), uniform_matrix(5, 4, -1, 1, rng), v);
    CHECK((r.weights.array() - 0.2).abs().maxCoeff() < 1e-15);
    for (Eigen::Index i = 0; i < 5; ++i) CHECK((r.output.row(i) - v.colwise().mean()).norm() < 1e-14);
  }
  SUBCASE("single step returns V") {
    const Matrix v = uniform_matrix(1, 3, -1.0, 1.0, rng);
    CHECK(sdpa(uniform_matrix(1, 2, -1, 1, rng), uniform_matrix(1, 2, -1, 1, rng), v).output == v);
  }
  SUBCASE("hand softmax") {
    // d_k = 1: scores row 0 = q0 * [k0, k1] = [0, ln 3]
    Matrix q(2, 1), k(2, 1), v(2, 1);
    q << 1, 0;
    k << 0, std::log(3.0);
    v << 4, 8;
    const auto r = sdpa(q, k, v);
    CHECK(r.weights(0, 0) == doctest::Approx(0.25));
    CHECK(r.weights(0, 1) == doctest::Approx(0.75));
    CHECK(r.output(0, 0) == doctest::Approx(7.0));
  }
  SUBCASE("rows are stochastic, also for large scores") {
    for (double scale : {1.0, 30.0, 1e4}) {
      const auto r = sdpa(scale * uniform_matrix(8, 6, -1, 1, rng), uniform_matrix(8, 6, -1, 1, rng),
                          uniform_matrix(8, 3, -1, 1, rng));
      CHECK(r.weights.minCoeff() >= 0.0);
      CHECK((r.weights.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
      CHECK(r.output.allFinite());
    }
  }
  CHECK_THROWS_AS(sdpa(Matrix::Zero(2, 3), Matrix::Zero(2, 4), Matrix::Zero(2, 1)), DimensionError);
}

TEST_CASE("layer norm") {
  Rng rng(3);
  const Matrix x = uniform_matrix(6, 10, -5.0, 5.0, rng);
  const Matrix y = layer_norm(x, Matrix::Ones(1, 10), Matrix::Zero(1, 10));
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    CHECK(std::abs(y.row(r).mean()) < 1e-6);
    CHECK(std::abs(y.row(r).squaredNorm() / 10.0 - 1.0) < 1e-6);
  }
  // gain and bias act per column after normalisation
  Matrix gain = Matrix::Constant(1, 10, 2.0), bias = Matrix::Constant(1, 10, 1.0);
  const Matrix expect = ((2.0 * y).array() + 1.0).matrix();
  CHECK(layer_norm(x, gain, bias).isApprox(expect));
  // independent evaluation of one row
  const RowVector c = row_mean_centered(x).row(2);
  const double sd = std::sqrt(c.squaredNorm() / 10.0 + kLayerNormEpsilon);
  CHECK((y.row(2) - c / sd).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("multi-head attention and encoder block") {
  Rng rng(4);
  SUBCASE("reference shapes") {
    const auto p = PteBlockParams::init(8, 256, 4, 256, 256, 4, 3, 0.0, rng);
    const Matrix x = uniform_matrix(8, 256, -1, 1, rng);
    CHECK(p.wl.rows() == 1024);
    const Matrix out = mha_forward(p, x);
    CHECK(out.rows() == 8);
    CHECK(out.cols() == 256);
    CHECK(pte_block_forward(p, x).rows() == 8);
    CHECK(pte_block_forward(p, x).cols() == 256);
  }
  const auto base = PteBlockParams::init(5, 12, 3, 4, 5, 4, 3, 0.2, rng);
  const Matrix x = uniform_matrix(5, 12, -1, 1, rng);
  SUBCASE("zero input and zero output projection") {
    CHECK(mha_forward(base, Matrix::Zero(5, 12)).isZero());
    auto p = base;
    p.wl.setZero();
    CHECK(mha_forward(p, x).isZero());
  }
  SUBCASE("degenerate path is two layer norms") {
    auto p = base;
    for (auto* m : {&p.wl, &p.conv2, &p.conv1_bias, &p.conv2_bias}) m->setZero();
    for (auto& w : p.wq) w.setZero();
    for (auto& w : p.wk) w.setZero();
    for (auto& w : p.wv) w.setZero();
    for (auto& w : p.conv1) w.setZero();
    const Matrix ones = Matrix::Ones(1, 12), zeros = Matrix::Zero(1, 12);
    const Matrix expect = layer_norm(layer_norm(x, ones, zeros), ones, zeros);
    CHECK((pte_block_forward(p, x) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("inference ignores dropout and is repeatable") {
    Rng r1(1), r2(2);
    const Matrix a = pte_block_forward(base, x);
    CHECK(a == pte_block_forward(base, x));
    CHECK(a == pte_block_forward(base, x, false, &r1));
    const Matrix trained = pte_block_forward(base, x, true, &r2);
    CHECK(trained.rows() == 5);
    CHECK(trained != a);
  }
  SUBCASE("shape stays through a stack") {
    PteConfig c;
    c.window = 5;
    c.heads = 2;
    c.d_k = 3;
    c.d_v = 3;
    c.blocks = 4;
    auto model = PteModel::init(c, 12, rng);
    Matrix h = x;
    for (const auto& b : model.blocks) {
      h = pte_block_forward(b, h);
      CHECK(h.rows() == 5);
      CHECK(h.cols() == 12);
    }
  }
  SUBCASE("invalid dimensions") {
    CHECK_THROWS_AS(PteBlockParams::init(5, 12, 3, 4, 5, 4, 2, 0.0, rng), InvalidParameter);
    CHECK_THROWS_AS(PteBlockParams::init(5, 12, 3, 4, 5, 4, 3, 1.0, rng), InvalidParameter);
    CHECK_THROWS_AS(pte_block_forward(base, Matrix::Zero(4, 12)), DimensionError);
    CHECK_THROWS_AS(mha_forward(base, Matrix::Zero(5, 11)), DimensionError);
  }
}

TEST_CASE("prediction head") {
  Rng rng(5);
  PteConfig c = micro_config();
  c.window = 4;
  c.blocks = 4;
  auto model = PteModel::init(c, 6, rng);
  const Matrix x = uniform_matrix(4, 6, -1, 1, rng);

  SUBCASE("max pooling") {
    PteModel pool;
    pool.window = 4;
    pool.width = 6;
    for (Eigen::Index col = 0; col < 6; ++col) {
      pool.head = {{Matrix::Zero(6, 1), Matrix::Zero(1, 1)}};
      pool.head[0].weight(col, 0) = 1.0;
      CHECK(tqp_forward(pool, x) == x.col(col).maxCoeff());
    }
  }
  SUBCASE("zero head returns the bias") {
    auto m = model;
    for (auto& l : m.head) {
      l.weight.setZero();
      l.bias.setZero();
    }
    m.head.back().bias(0, 0) = 1.75;
    CHECK(tqp_forward(m, x) == 1.75);
    CHECK(tqp_forward(m, uniform_matrix(4, 6, -3, 3, rng)) == 1.75);
  }
  SUBCASE("every block matters") {
    auto fewer = model;
    fewer.blocks.pop_back();
    CHECK(tqp_forward(fewer, x) != tqp_forward(model, x));
    auto reordered = model;
    std::swap(reordered.blocks[0], reordered.blocks[1]);
    CHECK(tqp_forward(reordered, x) != tqp_forward(model, x));
  }
  CHECK_THROWS_AS(tqp_forward(model, Matrix::Zero(3, 6)), DimensionError);
}

TEST_CASE("pte gradients on a micro model") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    Rng rng(seed);
    auto model = PteModel::init(micro_config(), 4, rng);
    // break the symmetric initial state of the norms and biases
    for (Matrix* t : model.tensors()) *t += uniform_matrix(t->rows(), t->cols(), -0.3, 0.3, rng);
    const Matrix x = uniform_matrix(2, 4, -1, 1, rng);
    const double target = 0.7;
    auto grads = zeros_like(model);
    tqp_loss_and_grad(model, x, target, grads);
    const auto refs = parameter_refs(model, grads);
    const double err =
        grad_check_params([&] { return cauchy_loss(target - tqp_forward(model, x), model.gamma_t); }, refs);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("pte gradients with two blocks and two heads") {
  Rng rng(9);
  auto c = micro_config();
  c.window = 3;
  c.blocks = 2;
  c.heads = 2;
  auto model = PteModel::init(c, 6, rng);
  for (Matrix* t : model.tensors()) *t += uniform_matrix(t->rows(), t->cols(), -0.2, 0.2, rng);
  const Matrix x = uniform_matrix(3, 6, -1, 1, rng);
  auto grads = zeros_like(model);
  tqp_loss_and_grad(model, x, -0.4, grads);
  const auto refs = parameter_refs(model, grads);
  CHECK(grad_check_params([&] { return cauchy_loss(-0.4 - tqp_forward(model, x), model.gamma_t); }, refs) < 1e-4);
}

TEST_CASE("pte training") {
  const auto steps = random_steps(6, 4, 5, 2, 3);
  SUBCASE("constant targets are learned") {
    std::vector<PteSample> samples;
    for (std::uint32_t t = 0; t < 6; ++t)
      for (std::uint32_t i = 0; i < 4; ++i)
        for (std::uint32_t j = 0; j < 5; ++j) samples.push_back({i, j, t, 2.0});
    auto c = micro_config();
    c.window = 3;
    c.epochs = 30;
    c.batch = 16;
    c.optimizer.lr = 1e-2;
    const auto r = train_pte(steps, samples, c);
    std::vector<Triple> triples;
    for (const auto& s : samples) triples.push_back({s.user, s.service, s.t});
    const auto pred = predict(r.model, steps, triples);
    double err = 0.0;
    for (double p : pred) err += std::abs(p - 2.0);
    CHECK(err / static_cast<double>(pred.size()) < 0.05 * 2.0);
    CHECK(r.epoch_loss.size() == 30);
  }
  SUBCASE("short windows are skipped without padding") {
    std::vector<PteSample> samples{{0, 0, 0, 1.0}, {0, 0, 1, 1.0}, {1, 1, 4, 1.0}};
    auto c = micro_config();
    c.window = 3;
    c.epochs = 1;
    c.pad_short_windows = false;
    CHECK(train_pte(steps, samples, c).skipped == 2);
  }
  SUBCASE("prebuilt windows, determinism and prediction") {
    auto c = micro_config();
    c.window = 2;
    c.epochs = 3;
    c.batch = 4;
    c.dropout = 0.1;
    c.seed = 8;
    std::vector<InputEmbedding> windows;
    std::vector<double> targets;
    for (std::uint32_t t = 1; t < 6; ++t) {
      windows.push_back(build_input_embedding(steps, 1, 2, t, 2));
      targets.push_back(0.5 + 0.1 * t);
    }
    const auto a = train_pte(windows, targets, c);
    const auto b = train_pte(windows, targets, c);
    CHECK(a.epoch_loss == b.epoch_loss);
    const std::vector<Triple> one{{1, 2, 3}};
    const auto p1 = predict(a.model, steps, one);
    CHECK(p1.size() == 1);
    CHECK(p1 == predict(a.model, steps, one));
    CHECK(p1 == predict(b.model, steps, one));

    tpmcf::testing::TempDir dir;
    save_pte(a.model, dir / "pte.bin");
    const auto loaded = load_pte(dir / "pte.bin");
    CHECK(predict(loaded, steps, one) == p1);
    auto lt = const_cast<PteModel&>(loaded).tensors();
    auto at = const_cast<PteModel&>(a.model).tensors();
    REQUIRE(lt.size() == at.size());
    for (std::size_t k = 0; k < lt.size(); ++k) CHECK(*lt[k] == *at[k]);

    std::vector<double> wrong(3, 0.0);
    CHECK_THROWS_AS(train_pte(windows, wrong, c), DimensionError);
  }
  CHECK(PteConfig{}.gamma_t == 0.75);
}

TEST_CASE("window order matters without positional encoding") {
  Rng rng(12);
  PteConfig c = micro_config();
  c.window = 5;
  c.blocks = 2;
  c.heads = 2;
  auto model = PteModel::init(c, 8, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix x = uniform_matrix(5, 8, -1, 1, rng);
    Matrix reversed = x.colwise().reverse();
    CHECK(tqp_forward(model, reversed) != doctest::Approx(tqp_forward(model, x)).epsilon(1e-12));
  }
  // attention alone is permutation-equivariant; the convolutions break it
  const Matrix x = uniform_matrix(5, 8, -1, 1, rng);
  const Matrix reversed = x.colwise().reverse();
  const Matrix mha_x = mha_forward(model.blocks[0], x);
  CHECK((mha_forward(model.blocks[0], reversed) - Matrix(mha_x.colwise().reverse())).cwiseAbs().maxCoeff() < 1e-12);
}
