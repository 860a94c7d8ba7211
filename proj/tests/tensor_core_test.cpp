#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "bayesformer/autodiff.hpp"
#include "bayesformer/rng.hpp"
#include "gradcheck.hpp"

using namespace bayesformer;
using namespace bayesformer::ad;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.storage()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// Loss = <op(x), W> with random W, so every output entry gets a distinct
/// upstream gradient.
bftest::LossBuilder project(std::function<Var(const std::vector<Var>&)> op, Tensor weights) {
  return [op, weights](Tape&, const std::vector<Var>& v) { return weighted_sum(op(v), weights); };
}

void expect_grad_ok(const std::vector<Tensor>& in, std::function<Var(const std::vector<Var>&)> op,
                    Rng& rng, const char* name) {
  Tape probe;
  std::vector<Var> pv;
  for (const auto& t : in) pv.push_back(probe.leaf(t));
  const Tensor& out = op(pv).value();
  const Tensor w = random_tensor(out.rows(), out.cols(), rng, -1.0, 1.0);
  const auto res = bftest::grad_check(in, project(op, w));
  EXPECT_LT(res.max_rel_err, 1e-4) << name << ": " << res.worst;
}

std::shared_ptr<RowMask> causal_mask(std::size_t blocks, std::size_t len) {
  auto m = std::make_shared<RowMask>();
  m->rows = blocks * len;
  m->cols = len;
  m->valid.assign(m->rows * m->cols, 0);
  for (std::size_t r = 0; r < m->rows; ++r)
    for (std::size_t c = 0; c <= r % len; ++c) m->valid[r * len + c] = 1;
  return m;
}

}  // namespace

TEST(Softmax, UniformForEqualLogits) {
  const Tensor y = softmax(Tensor::row({0, 0, 0, 0}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, NoOverflowForLargeLogits) {
  const Tensor y = softmax(Tensor::row({1000, 1000}));
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Softmax, HandCase) {
  const Tensor y = softmax(Tensor::row({std::log(1.0), std::log(3.0)}));
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 1 + rng.below(30), c = 1 + rng.below(50);
    Tensor x = random_tensor(r, c, rng, -30, 30);
    Tensor shifted = x;
    const double k = 100.0 * rng.uniform() - 50.0;
    for (auto& v : shifted.storage()) v += k;
    const Tensor y = softmax(x), ys = softmax(shifted);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(y.at(i, j), 0.0);
        s += y.at(i, j);
        EXPECT_NEAR(y.at(i, j), ys.at(i, j), 1e-12);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, NonFiniteInputRejected) {
  Tape t;
  const Var x = t.constant(Tensor::row({0.0, 1.0}));
  // NaN cannot be put on a tape at all
  EXPECT_THROW(t.leaf(Tensor::row({std::nan(""), 0.0})), NumericError);
  EXPECT_NO_THROW(softmax_rows(x));
}

TEST(MaskedSoftmax, MaskedEntriesZeroAndAllMaskedRowRejected) {
  Tape t;
  auto m = causal_mask(1, 3);
  const Var y = masked_softmax_rows(t.constant(Tensor::matrix(3, 3, 1.0)), m);
  EXPECT_DOUBLE_EQ(y.value().at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(y.value().at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(y.value().at(1, 1), 0.5);
  auto empty = std::make_shared<RowMask>(*m);
  empty->valid[0] = 0;
  EXPECT_THROW(masked_softmax_rows(t.constant(Tensor::matrix(3, 3, 1.0)), empty), ContractError);
}

TEST(Gelu, ReferenceValues) {
  const Tensor y = gelu(Tensor::row({0.0, 1.0, 10.0}));
  EXPECT_EQ(y[0], 0.0);
  // 0.5 * (1 + erf(1/sqrt 2)) = Phi(1)
  EXPECT_NEAR(y[1], 0.8413447460685429, 1e-6);
  EXPECT_NEAR(y[2], 10.0, 1e-9);
}

TEST(Gelu, MonotoneOnGrid) {
  // GeLU dips below zero near x = -0.75; it is nondecreasing from there on.
  Tensor x = Tensor::matrix(1, 2001);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = -0.75 + 0.005 * static_cast<double>(i);
  const Tensor y = gelu(x);
  for (std::size_t i = 1; i < y.size(); ++i) EXPECT_GE(y[i], y[i - 1]);
}

TEST(Backward, SumOfSquares) {
  Tape t;
  const Var x = t.leaf(Tensor::row({1.0, 2.0}));
  const auto g = t.backward(sum(square(x)));
  EXPECT_DOUBLE_EQ(g.of(x)[0], 2.0);
  EXPECT_DOUBLE_EQ(g.of(x)[1], 4.0);
}

TEST(Backward, LogSumExpGradientIsSoftmax) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor(1, 7, rng, -5, 5);
    Tape t;
    const Var v = t.leaf(x);
    const auto g = t.backward(sum(logsumexp_rows(v)));
    const Tensor sm = softmax(x);
    const auto fd = bftest::grad_check({x}, [](Tape&, const std::vector<Var>& in) {
      return sum(logsumexp_rows(in[0]));
    });
    EXPECT_LT(fd.max_rel_err, 1e-5) << fd.worst;
    for (std::size_t j = 0; j < x.size(); ++j) EXPECT_NEAR(g.of(v)[j], sm[j], 1e-12);
  }
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  Tape t;
  const Var x = t.leaf(Tensor::row({1.0, -3.0, 2.0}));
  const Var c = t.constant(Tensor::scalar(5.0));
  const Var loss = add(scale(sum(x), 0.0), c);
  const auto g = t.backward(loss);
  const Tensor gx = g.of(x);
  for (double v : gx.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tape t;
  const Var x = t.leaf(Tensor::row({1.0, 2.0}));
  EXPECT_THROW(t.backward(square(x)), ContractError);
}

TEST(LayerNorm, ConstantRowCollapsesToBias) {
  Tape t;
  const Var y = layer_norm(t.constant(Tensor::row({1, 1, 1})), t.constant(Tensor::row({1, 1, 1})),
                           t.constant(Tensor::row({0, 0, 0})), 1e-5);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoPointHandCase) {
  Tape t;
  const double eps = 1e-5;
  const Var y = layer_norm(t.constant(Tensor::row({-1, 1})), t.constant(Tensor::row({1, 1})),
                           t.constant(Tensor::row({0, 0})), eps);
  // mean 0, variance 1: (x - 0) / sqrt(1 + eps)
  EXPECT_NEAR(y.value()[0], -1.0 / std::sqrt(1.0 + eps), 1e-15);
  EXPECT_NEAR(y.value()[1], 1.0 / std::sqrt(1.0 + eps), 1e-15);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-5);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  Tape t;
  const Var y = layer_norm(t.constant(Tensor::from_rows({{3, -2, 7}, {0.5, 0.1, 9}})),
                           t.constant(Tensor::row({0, 0, 0})), t.constant(Tensor::row({0.1, 0.2, 0.3})));
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_DOUBLE_EQ(y.value().at(r, 0), 0.1);
    EXPECT_DOUBLE_EQ(y.value().at(r, 2), 0.3);
  }
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  Rng rng(5);
  Tape t;
  const std::size_t C = 16;
  const Var y = layer_norm(t.constant(random_tensor(8, C, rng, -10, 10)), t.constant(Tensor::matrix(1, C, 1.0)),
                           t.constant(Tensor::matrix(1, C)), 1e-12);
  for (std::size_t r = 0; r < 8; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < C; ++c) m += y.value().at(r, c);
    m /= C;
    for (std::size_t c = 0; c < C; ++c) v += std::pow(y.value().at(r, c) - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / C, 1.0, 1e-9);
  }
}

TEST(LayerNorm, EmptyAxisRejected) {
  Tape t;
  EXPECT_THROW(layer_norm(t.constant(Tensor::matrix(2, 0)), t.constant(Tensor::matrix(1, 0)),
                          t.constant(Tensor::matrix(1, 0))),
               ContractError);
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ContractError);
  EXPECT_EQ(Tensor({2, 3}).size(), 6u);
}

// Every differentiable op against central differences (h = 1e-5, rtol 1e-4),
// 100+ random cases in total.
TEST(GradientCheck, AllOpsMatchFiniteDifferences) {
  Rng rng(2024);
  using V = std::vector<Var>;
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t r = 2 + rng.below(3), c = 2 + rng.below(3), k = 2 + rng.below(3);
    const Tensor a = random_tensor(r, c, rng), b = random_tensor(r, c, rng);
    const Tensor row = random_tensor(1, c, rng), col = random_tensor(r, 1, rng), s = random_tensor(1, 1, rng);
    const Tensor pos = random_tensor(r, c, rng, 0.2, 3.0);
    const Tensor bk = random_tensor(c, k, rng), bt = random_tensor(k, c, rng);

    expect_grad_ok({a, b}, [](const V& v) { return add(v[0], v[1]); }, rng, "add");
    expect_grad_ok({a, row}, [](const V& v) { return sub(v[0], v[1]); }, rng, "sub_row");
    expect_grad_ok({col, a}, [](const V& v) { return mul(v[0], v[1]); }, rng, "mul_col");
    expect_grad_ok({a, s}, [](const V& v) { return mul(v[0], v[1]); }, rng, "mul_scalar");
    expect_grad_ok({a, pos}, [](const V& v) { return div(v[0], v[1]); }, rng, "div");
    expect_grad_ok({a}, [](const V& v) { return scale(v[0], -1.7); }, rng, "scale");
    expect_grad_ok({a}, [](const V& v) { return exp(v[0]); }, rng, "exp");
    expect_grad_ok({pos}, [](const V& v) { return log(v[0]); }, rng, "log");
    expect_grad_ok({pos}, [](const V& v) { return sqrt(v[0]); }, rng, "sqrt");
    expect_grad_ok({a}, [](const V& v) { return square(v[0]); }, rng, "square");
    expect_grad_ok({a}, [](const V& v) { return softplus(v[0]); }, rng, "softplus");
    expect_grad_ok({a}, [](const V& v) { return sigmoid(v[0]); }, rng, "sigmoid");
    expect_grad_ok({a}, [](const V& v) { return tanh(v[0]); }, rng, "tanh");
    expect_grad_ok({a}, [](const V& v) { return gelu(v[0]); }, rng, "gelu");
    expect_grad_ok({a}, [](const V& v) { return mean(v[0]); }, rng, "mean");
    expect_grad_ok({a}, [](const V& v) { return sum_rows(v[0]); }, rng, "sum_rows");
    expect_grad_ok({a}, [](const V& v) { return sum_cols(v[0]); }, rng, "sum_cols");
    expect_grad_ok({a, bk}, [](const V& v) { return matmul(v[0], v[1]); }, rng, "matmul");
    expect_grad_ok({a, bt}, [](const V& v) { return matmul_nt(v[0], v[1]); }, rng, "matmul_nt");
    expect_grad_ok({a}, [](const V& v) { return transpose(v[0]); }, rng, "transpose");
    expect_grad_ok({a}, [r](const V& v) { return slice_rows(v[0], 1, r); }, rng, "slice_rows");
    expect_grad_ok({a}, [c](const V& v) { return slice_cols(v[0], 0, c - 1); }, rng, "slice_cols");
    expect_grad_ok({a, b}, [](const V& v) { return concat_rows({v[0], v[1]}); }, rng, "concat_rows");
    expect_grad_ok({a, col}, [](const V& v) { return concat_cols({v[0], v[1]}); }, rng, "concat_cols");
    expect_grad_ok({a}, [](const V& v) { return gather_rows(v[0], {1, 0, 1}); }, rng, "gather_rows");
    expect_grad_ok({a}, [r, c](const V& v) {
      std::vector<std::size_t> idx(r);
      for (std::size_t i = 0; i < r; ++i) idx[i] = i % c;
      return pick(v[0], idx);
    }, rng, "pick");
    expect_grad_ok({a}, [r, c](const V& v) { return reshape(v[0], 1, r * c); }, rng, "reshape");
    expect_grad_ok({a}, [](const V& v) { return softmax_rows(v[0]); }, rng, "softmax");
    expect_grad_ok({a}, [](const V& v) { return log_softmax_rows(v[0]); }, rng, "log_softmax");
    expect_grad_ok({a}, [](const V& v) { return logsumexp_rows(v[0]); }, rng, "logsumexp");
    expect_grad_ok({a, row, random_tensor(1, c, rng)},
                   [](const V& v) { return layer_norm(v[0], v[1], v[2], 1e-5); }, rng, "layer_norm");

    const std::size_t blocks = 2, len = 3, d = 2 + rng.below(3);
    const Tensor q = random_tensor(blocks * len, d, rng), kk = random_tensor(blocks * len, d, rng);
    const Tensor w = random_tensor(blocks * len, len, rng);
    auto mask = causal_mask(blocks, len);
    expect_grad_ok({q, kk}, [len](const V& v) { return block_matmul_nt(v[0], v[1], len); }, rng, "block_matmul_nt");
    expect_grad_ok({w, q}, [len](const V& v) { return block_matmul(v[0], v[1], len); }, rng, "block_matmul");
    expect_grad_ok({w}, [mask](const V& v) { return masked_softmax_rows(v[0], mask); }, rng, "masked_softmax");
  }
}

TEST(BlockMatmul, MatchesPerBlockProducts) {
  Rng rng(9);
  Tape t;
  const std::size_t len = 3;
  const Tensor q = random_tensor(2 * len, 4, rng), k = random_tensor(2 * len, 4, rng);
  const Var s = block_matmul_nt(t.constant(q), t.constant(k), len);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j) {
        double ref = 0;
        for (std::size_t d = 0; d < 4; ++d) ref += q.at(b * len + i, d) * k.at(b * len + j, d);
        EXPECT_NEAR(s.value().at(b * len + i, j), ref, 1e-12);
      }
}

TEST(Determinism, SameInputsSameBits) {
  auto run = [] {
    Rng rng(77);
    Tape t;
    const Var x = t.leaf(random_tensor(5, 6, rng));
    const Var w = t.leaf(random_tensor(6, 6, rng));
    return softmax_rows(gelu(matmul(x, w))).value().storage();
  };
  EXPECT_EQ(run(), run());
}
