#include <gtest/gtest.h>

#include <cmath>

#include "bayesformer/errors.hpp"
#include "bayesformer/optim.hpp"

using namespace bayesformer;

TEST(LrSchedule, CrossoverAtWarmup) {
  const double w = 4000.0;
  EXPECT_NEAR(lr_schedule(4000, 64, 4000), std::pow(w, -0.5) * std::pow(64.0, -0.5), 1e-18);
}

TEST(LrSchedule, FirstStep) {
  EXPECT_NEAR(lr_schedule(1, 64, 4000), std::pow(64.0, -0.5) * std::pow(4000.0, -1.5), 1e-20);
  EXPECT_NEAR(lr_schedule(1, 64, 4000, 2.0), 2.0 * std::pow(64.0, -0.5) * std::pow(4000.0, -1.5), 1e-20);
}

TEST(LrSchedule, RisesThenDecays) {
  for (std::size_t s = 1; s < 100; ++s) EXPECT_LT(lr_schedule(s, 64, 100), lr_schedule(s + 1, 64, 100));
  for (std::size_t s = 100; s < 300; ++s) EXPECT_GT(lr_schedule(s, 64, 100), lr_schedule(s + 1, 64, 100));
}

TEST(LrSchedule, StepZeroIsContractError) { EXPECT_THROW(lr_schedule(0, 64, 4000), ContractError); }

TEST(EffectiveWarmup, ScalesShortRuns) {
  EXPECT_EQ(effective_warmup(4000, 8000), 4000u);
  EXPECT_EQ(effective_warmup(4000, 20000), 4000u);
  EXPECT_EQ(effective_warmup(4000, 2500), 1250u);
  EXPECT_EQ(effective_warmup(4000, 1), 1u);
}

namespace {

// Minimise (x - 3)^2 through the tape.
template <class Step>
double minimise(Step step, int iters) {
  Tensor x = Tensor::scalar(0.0);
  for (int i = 0; i < iters; ++i) {
    ad::Tape tape;
    auto v = tape.leaf(x);
    auto loss = ad::square(ad::add_scalar(v, -3.0));
    ad::Gradients g = tape.backward(loss);
    step(Leaves{{"x", v, &x}}, g);
  }
  return x.item();
}

}  // namespace

TEST(Adam, ConvergesOnQuadratic) {
  Adam adam;
  const double x = minimise([&](const Leaves& l, const ad::Gradients& g) { adam.step(l, g, 0.01); }, 3000);
  // a constant rate leaves an oscillation of about one step size
  EXPECT_NEAR(x, 3.0, 0.01);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // bias-corrected first step is lr * sign(g)
  Adam adam;
  const double x = minimise([&](const Leaves& l, const ad::Gradients& g) { adam.step(l, g, 0.01); }, 1);
  EXPECT_NEAR(x, 0.01, 1e-9);
}

TEST(Sgd, PlainStep) {
  const double x = minimise([](const Leaves& l, const ad::Gradients& g) { sgd_step(l, g, 0.1); }, 1);
  EXPECT_NEAR(x, 0.6, 1e-15);  // gradient -6
}

TEST(Sgd, ClipsGlobalNorm) {
  const double x = minimise([](const Leaves& l, const ad::Gradients& g) { sgd_step(l, g, 0.1, 1.0); }, 1);
  EXPECT_NEAR(x, 0.1, 1e-15);  // gradient rescaled to norm 1
  const double y = minimise([](const Leaves& l, const ad::Gradients& g) { sgd_step(l, g, 0.1, 100.0); }, 1);
  EXPECT_NEAR(y, 0.6, 1e-15);
}
