#include <gtest/gtest.h>

#include "bayesformer/errors.hpp"
#include "bayesformer/optim.hpp"
#include "bayesformer/train.hpp"
#include "test_util.hpp"

using namespace bayesformer;

namespace {

data::DataBundle small_toy() { return data::toy_bundle(data::toy_split(data::Generator::m1, 5, 40, 8, 8)); }

ModelConfig small_config(AttentionMode mode = AttentionMode::deterministic) {
  ModelConfig c = bftest::tiny_config(mode);
  c.max_len = 32;
  return c;
}

TrainSettings quick(std::size_t epochs) {
  TrainSettings s;
  s.epochs = epochs;
  s.batch_size = 8;
  s.seed = 3;
  return s;
}

}  // namespace

TEST(KlAnneal, LinearRampThenFlat) {
  EXPECT_EQ(kl_anneal_weight(0, 100, 0.1, true), 0.0);
  EXPECT_DOUBLE_EQ(kl_anneal_weight(5, 100, 0.1, true), 0.5);
  EXPECT_EQ(kl_anneal_weight(10, 100, 0.1, true), 1.0);
  EXPECT_EQ(kl_anneal_weight(60, 100, 0.1, true), 1.0);
  EXPECT_EQ(kl_anneal_weight(0, 100, 0.1, false), 1.0);
}

TEST(TrainPoint, LossDecreasesAndRecordsSchedule) {
  const auto data = small_toy();
  Rng rng(1);
  Transformer m(small_config());
  m.init(rng);
  std::vector<double> hooked;
  const auto rep = train_point(m, data, quick(6), [&](std::size_t, double l) { hooked.push_back(l); });
  ASSERT_EQ(rep.train_loss.size(), 6u);
  EXPECT_EQ(hooked, rep.train_loss);
  EXPECT_LT(rep.train_loss.back(), rep.train_loss.front());
  EXPECT_EQ(rep.steps, 6u * 5u);
  EXPECT_EQ(rep.warmup_used, effective_warmup(4000, rep.steps));
  EXPECT_EQ(rep.val_nll.size(), 6u);
}

TEST(TrainPoint, SameSeedIsBitIdentical) {
  const auto data = small_toy();
  auto once = [&] {
    Rng rng(1);
    Transformer m(small_config(AttentionMode::dirichlet));
    m.init(rng);
    train_point(m, data, quick(2));
    return m.params();
  };
  const ParamStore a = once(), b = once();
  for (const auto& n : a.names()) {
    const Tensor& x = a.at(n);
    const Tensor& y = b.at(n);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(x[i], y[i]) << n;
  }
}

TEST(TrainPoint, EarlyStoppingKeepsBestEpoch) {
  const auto data = small_toy();
  Rng rng(1);
  Transformer m(small_config());
  m.init(rng);
  auto s = quick(4);
  s.early_stopping = true;
  s.patience = 100;
  const auto rep = train_point(m, data, s);
  ASSERT_EQ(rep.val_nll.size(), 4u);
  const auto best = std::min_element(rep.val_nll.begin(), rep.val_nll.end()) - rep.val_nll.begin();
  EXPECT_EQ(rep.best_epoch, static_cast<std::size_t>(best));
  ad::Tape tape;
  Rng eval_rng(0);
  const double now = mean_nll(m, bind_all(tape, m.params(), false), data, data::Split::val, eval_rng);
  EXPECT_NEAR(now, rep.val_nll[best], 1e-9);
}

TEST(TrainPoint, ExplodingSgdRaisesDivergence) {
  const auto data = small_toy();
  Rng rng(1);
  Transformer m(small_config());
  m.init(rng);
  auto s = quick(3);
  s.use_sgd = true;
  s.sgd_lr = 1e200;
  s.sgd_clip = 0.0;
  EXPECT_THROW(train_point(m, data, s), DivergenceError);
}

TEST(TrainVi, ObjectiveDecreasesAndPosteriorMoves) {
  const auto data = small_toy();
  Rng rng(2);
  Transformer m(small_config());
  m.init(rng);
  auto vs = bayes::init_variational(m, bayes::PriorSpec::default_for(m.config()), dist::Family::gaussian,
                                    bayes::Scope::all);
  const bayes::VariationalState before = vs;
  const auto rep = train_vi(m, vs, data, quick(6));
  EXPECT_LT(rep.train_loss.back(), rep.train_loss.front());
  double moved = 0.0;
  for (const auto& n : vs.names) {
    for (std::size_t i = 0; i < vs.rho.at(n).size(); ++i) moved += std::abs(vs.rho.at(n)[i] - before.rho.at(n)[i]);
  }
  EXPECT_GT(moved, 0.0);
}
