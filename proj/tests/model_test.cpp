#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "bayesformer/attention.hpp"
#include "bayesformer/dropout.hpp"
#include "bayesformer/errors.hpp"
#include "bayesformer/model.hpp"
#include "bayesformer/special.hpp"
#include "test_util.hpp"

using namespace bayesformer;

namespace {

Tensor forward_output(const Transformer& m, const ModelInput& in, std::uint64_t seed = 1) {
  ad::Tape tape;
  Bound w = bind_all(tape, m.params(), false);
  Rng rng(seed);
  ForwardOptions opt;
  opt.rng = &rng;
  return m.forward(tape, w, in, opt).output.value();
}

}  // namespace

// ---- scaled dot-product attention -------------------------------------------------

TEST(ScaledDotAttention, HandCaseTwoTokens) {
  ad::Tape tape;
  // d_k = 1: scores are q_i k_j
  auto q = tape.constant(Tensor::from_rows({{1.0}, {0.0}}));
  auto k = tape.constant(Tensor::from_rows({{0.0}, {std::log(3.0)}}));
  auto v = tape.constant(Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}}));
  AttentionSettings s;
  auto out = scaled_dot_attention(q, k, v, 2, full_mask(1, 2), s);
  // row 0: softmax(0, ln 3) = (1/4, 3/4); row 1: uniform
  const Tensor& c = out.context.value();
  EXPECT_NEAR(c.at(0, 0), 0.25, 1e-14);
  EXPECT_NEAR(c.at(0, 1), 0.75, 1e-14);
  EXPECT_NEAR(c.at(1, 0), 0.5, 1e-14);
  EXPECT_NEAR(c.at(1, 1), 0.5, 1e-14);
  EXPECT_EQ(out.kl.item(), 0.0);
}

TEST(ScaledDotAttention, CausalMaskZeroesFutureKeys) {
  ad::Tape tape;
  Rng rng(3);
  Tensor qt = Tensor::matrix(3, 2), kt = Tensor::matrix(3, 2), vt = Tensor::matrix(3, 2);
  for (auto* t : {&qt, &kt, &vt}) {
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal();
  }
  AttentionSettings s;
  auto out = scaled_dot_attention(tape.constant(qt), tape.constant(kt), tape.constant(vt), 3, causal_mask(1, 3), s);
  const Tensor& w = out.weights.value();
  for (std::size_t r = 0; r < 3; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      if (c > r) EXPECT_EQ(w.at(r, c), 0.0);
      sum += w.at(r, c);
    }
    EXPECT_NEAR(sum, 1.0, 1e-14);
  }
  EXPECT_EQ(w.at(0, 0), 1.0);
}

// ---- attention rows -----------------------------------------------------------------

TEST(DirichletAttentionRow, SingleValidKeyIsDeterministic) {
  Rng rng(1);
  auto r = attn::dirichlet_attention_row({1.0, 0.0, 0.0}, 5.0, 10.0, {true, false, false}, rng);
  EXPECT_EQ(r.weights[0], 1.0);
  EXPECT_EQ(r.weights[1], 0.0);
  EXPECT_EQ(r.kl, 0.0);
}

TEST(DirichletAttentionRow, SharpnessEqualToPriorGivesZeroKl) {
  Rng rng(2);
  auto r = attn::dirichlet_attention_row({0.2, 0.3, 0.5}, 10.0, 10.0, {true, true, true}, rng);
  EXPECT_NEAR(r.kl, 0.0, 1e-12);
  EXPECT_NEAR(std::accumulate(r.weights.begin(), r.weights.end(), 0.0), 1.0, 1e-12);
}

TEST(DirichletAttentionRow, RejectsNonPositiveSharpness) {
  Rng rng(1);
  EXPECT_THROW(attn::dirichlet_attention_row({0.5, 0.5}, 0.0, 10.0, {true, true}, rng), DomainError);
  EXPECT_THROW(attn::dirichlet_attention_row({0.5, 0.5}, 1.0, -1.0, {true, true}, rng), DomainError);
}

TEST(GaussianAttentionRow, MaskedEntriesStayZero) {
  Rng rng(4);
  auto r = attn::gaussian_attention_row({0.1, 2.0, -1.0}, 0.0, {true, false, true}, rng);
  EXPECT_EQ(r.weights[1], 0.0);
  EXPECT_NEAR(r.weights[0] + r.weights[2], 1.0, 1e-14);
  EXPECT_GE(r.kl, 0.0);
}

TEST(AttentionMode, NamesRoundTrip) {
  for (auto m : {AttentionMode::deterministic, AttentionMode::gaussian, AttentionMode::gaussian_dd,
                 AttentionMode::dirichlet, AttentionMode::dirichlet_dd}) {
    EXPECT_EQ(attn::parse_mode(attn::mode_name(m)), m);
  }
  EXPECT_THROW(attn::parse_mode("softmax"), std::exception);
}

// ---- transformer ----------------------------------------------------------------------

TEST(Transformer, OutputShapes) {
  Rng rng(1);
  Transformer m(bftest::tiny_config(AttentionMode::deterministic));
  m.init(rng);
  auto in = bftest::tiny_input(rng, 3, 4);
  const Tensor out = forward_output(m, in);
  EXPECT_EQ(out.rows(), 12u);
  EXPECT_EQ(out.cols(), 2u);
  EXPECT_TRUE(out.all_finite());
}

TEST(Transformer, CausalityOfSequenceModel) {
  for (auto mode : {AttentionMode::deterministic, AttentionMode::dirichlet}) {
    Rng rng(5);
    Transformer m(bftest::tiny_config(mode));
    m.init(rng);
    auto in = bftest::tiny_input(rng, 1, 4);
    const Tensor base = forward_output(m, in);
    auto changed = in;
    changed.features[3] += 10.0;
    const Tensor after = forward_output(m, changed);
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(base.at(t, c), after.at(t, c)) << "position " << t;
    }
    EXPECT_NE(base.at(3, 0), after.at(3, 0));
  }
}

TEST(Transformer, ExamplesInBatchAreIndependent) {
  Rng rng(6);
  Transformer m(bftest::tiny_config(AttentionMode::deterministic));
  m.init(rng);
  auto in = bftest::tiny_input(rng, 2, 4);
  const Tensor both = forward_output(m, in);
  ModelInput first;
  first.batch = 1;
  first.len = 4;
  first.features = Tensor::matrix(4, 1);
  for (std::size_t i = 0; i < 4; ++i) first.features[i] = in.features[i];
  const Tensor one = forward_output(m, first);
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_NEAR(one[i], both[i], 1e-12);
}

class GradientCheck : public ::testing::TestWithParam<AttentionMode> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  Rng rng(11);
  Transformer m(bftest::tiny_config(GetParam()));
  m.init(rng);
  // move the attention posterior off its prior so the KL gradient is non-trivial
  for (const auto& n : m.params().names()) {
    if (!Transformer::is_attention_variational(n)) continue;
    Tensor& t = m.params().at(n);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += 0.3 * rng.normal();
  }
  auto in = bftest::tiny_input(rng, 1, 4);
  const auto r = bftest::grad_check(m, in, 42);
  EXPECT_GT(r.checked, 100u);
  EXPECT_LT(r.max_rel, 1e-4) << "worst entry " << r.worst;
}

INSTANTIATE_TEST_SUITE_P(SmoothModes, GradientCheck,
                         ::testing::Values(AttentionMode::deterministic, AttentionMode::gaussian,
                                           AttentionMode::gaussian_dd));

TEST(Transformer, ImageClassifierHeadStartsAtZero) {
  Rng rng(2);
  ModelConfig c = ModelConfig::mnist();
  Transformer m(c);
  m.init(rng);
  for (const auto& n : m.head_names()) {
    const Tensor& t = m.params().at(n);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], 0.0) << n;
  }
}

TEST(Transformer, WeightNamesExcludeLayerNormAndExtras) {
  Rng rng(2);
  Transformer m(bftest::tiny_config(AttentionMode::dirichlet_dd));
  m.init(rng);
  m.add_dropout_sites(0.1);
  for (const auto& n : m.weight_names()) {
    EXPECT_FALSE(Transformer::is_layer_norm(n)) << n;
    EXPECT_FALSE(Transformer::is_attention_variational(n)) << n;
    EXPECT_FALSE(Transformer::is_dropout(n)) << n;
  }
}

TEST(ModelConfig, ValidateRejectsBadHeads) {
  ModelConfig c = ModelConfig::toy();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ContractError);
  c = ModelConfig::mnist();
  c.patch_size = 5;
  EXPECT_THROW(c.validate(), ContractError);
}

// ---- concrete dropout ---------------------------------------------------------------

TEST(ConcreteDropout, IndicatorHandCases) {
  EXPECT_NEAR(concrete_drop_indicator(0.5, 0.5, 0.1), 0.5, 1e-15);
  // logit p + logit u = ln(0.1/0.9) + ln(0.9/0.1) = 0
  EXPECT_NEAR(concrete_drop_indicator(0.1, 0.9, 0.1), 0.5, 1e-12);
  EXPECT_LT(concrete_drop_indicator(0.1, 0.5, 0.1), 1e-9);
}

TEST(ConcreteDropout, ActivationIsApproximatelyUnbiased) {
  ad::Tape tape;
  Rng rng(9);
  const double p = 0.2;
  auto x = tape.constant(Tensor::matrix(1, 200000, 1.0));
  auto rho = tape.constant(std::log(p / (1.0 - p)));
  auto y = concrete_dropout(x, rho, 0.1, rng).value();
  double m = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) m += y[i];
  m /= static_cast<double>(y.size());
  // temperature 0.1 leaves a small relaxation bias
  EXPECT_NEAR(m, 1.0, 0.02);
}

TEST(ConcreteDropout, RegularizerHandCase) {
  ad::Tape tape;
  ConcreteDropoutSettings s;
  s.n_train = 10.0;
  s.length_scale = 0.5;
  const double p = 0.25;
  auto w = tape.constant(Tensor::from_rows({{1.0, 2.0}}));  // ||W||^2 = 5
  auto rho = tape.constant(std::log(p / (1.0 - p)));
  const double got = concrete_dropout_regularizer(w, rho, 3, s).item();
  const double expect = 0.25 / 10.0 * 5.0 / (1.0 - p) + 2.0 / 10.0 * 3.0 * (p * std::log(p) + (1 - p) * std::log(1 - p));
  EXPECT_NEAR(got, expect, 1e-13);
}

// ---- sampled attention properties ----------------------------------------------------

TEST(StochasticAttention, RowsAreProbabilityVectorsOverUnmaskedKeys) {
  for (auto mode : {AttentionMode::gaussian, AttentionMode::gaussian_dd, AttentionMode::dirichlet,
                    AttentionMode::dirichlet_dd}) {
    Rng rng(12);
    Transformer m(bftest::tiny_config(mode));
    m.init(rng);
    const auto in = bftest::tiny_input(rng, 3, 4);
    for (int rep = 0; rep < 20; ++rep) {
      ad::Tape tape;
      Bound w = bind_all(tape, m.params(), false);
      ForwardOptions opt;
      opt.rng = &rng;
      opt.keep_attention = true;
      const auto res = m.forward(tape, w, in, opt);
      ASSERT_FALSE(res.attention.empty());
      for (const Tensor& a : res.attention) {
        // causal blocks of 4: row r of a block may attend to keys 0..r
        for (std::size_t r = 0; r < a.rows(); ++r) {
          const std::size_t q = r % 4;
          double sum = 0.0;
          for (std::size_t c = 0; c < a.cols(); ++c) {
            const double v = a.at(r, c);
            if (c > q) {
              EXPECT_EQ(v, 0.0);
            } else {
              EXPECT_GE(v, 0.0);
            }
            sum += v;
          }
          EXPECT_NEAR(sum, 1.0, 1e-10) << attn::mode_name(mode);
        }
      }
    }
  }
}

TEST(DirichletAttentionRow, KlInvariantUnderJointPermutation) {
  const std::vector<double> A{0.1, 0.0, 0.25, 0.4, 0.25};
  const std::vector<bool> valid{true, false, true, true, true};
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> Ap(5);
  std::vector<bool> vp(5);
  for (std::size_t i = 0; i < 5; ++i) {
    Ap[i] = A[perm[i]];
    vp[i] = valid[perm[i]];
  }
  Rng r1(1), r2(2);
  const double k1 = attn::dirichlet_attention_row(A, 3.0, 10.0, valid, r1).kl;
  const double k2 = attn::dirichlet_attention_row(Ap, 3.0, 10.0, vp, r2).kl;
  EXPECT_GT(k1, 0.0);
  EXPECT_NEAR(k1, k2, 1e-12 * k1);
}

TEST(DirichletAttention, PriorEqualPosteriorGivesZeroTotalKl) {
  Rng rng(13);
  ModelConfig c = bftest::tiny_config(AttentionMode::dirichlet);
  Transformer m(c);
  m.init(rng);
  // posterior sharpness equal to the prior's
  for (const auto& n : m.params().names()) {
    if (n.find("sharpness_raw") != std::string::npos) {
      m.params().at(n)[0] = special::inverse_softplus(c.prior_sharpness);
    }
  }
  const auto in = bftest::tiny_input(rng, 2, 4);
  ad::Tape tape;
  Bound w = bind_all(tape, m.params(), false);
  ForwardOptions opt;
  opt.rng = &rng;
  EXPECT_NEAR(m.forward(tape, w, in, opt).attention_kl.item(), 0.0, 1e-10);
}

TEST(ConcreteDropout, FrozenAtZeroReproducesDeterministicForward) {
  Rng rng(14);
  Transformer plain(bftest::tiny_config(AttentionMode::deterministic));
  plain.init(rng);
  Transformer dropped = plain;
  dropped.add_dropout_sites(0.1);
  const auto in = bftest::tiny_input(rng, 2, 4);
  const Tensor base = forward_output(plain, in);

  ConcreteDropoutSettings s;
  s.frozen_zero = true;
  {
    ad::Tape tape;
    Bound w = bind_all(tape, dropped.params(), false);
    ForwardOptions opt;
    opt.rng = &rng;
    opt.dropout = &s;
    const Tensor out = dropped.forward(tape, w, in, opt).output.value();
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], base[i]);
  }
  // the same limit through the parameterisation: p = e^-800 underflows to 0
  for (const auto& n : dropped.params().names()) {
    if (Transformer::is_dropout(n)) dropped.params().at(n)[0] = -800.0;
  }
  s.frozen_zero = false;
  ad::Tape tape;
  Bound w = bind_all(tape, dropped.params(), false);
  ForwardOptions opt;
  opt.rng = &rng;
  opt.dropout = &s;
  const Tensor out = dropped.forward(tape, w, in, opt).output.value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], base[i]);
}
