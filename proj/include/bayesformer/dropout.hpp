#pragma once

#include <cstddef>

#include "bayesformer/autodiff.hpp"
#include "bayesformer/rng.hpp"

// Concrete (relaxed Bernoulli) dropout with a learned drop probability
// p = sigmoid(rho) per site.

namespace bayesformer {

struct ConcreteDropoutSettings {
  double temperature = 0.1;
  double init_p = 0.1;
  double length_scale = 1e-4;
  /// Set by the trainer to the number of training examples.
  double n_train = 1.0;
  /// p held at exactly 0: the layer becomes the identity.
  bool frozen_zero = false;

  double weight_reg() const { return length_scale * length_scale / n_train; }
  double dropout_reg() const { return 2.0 / n_train; }
};

/// Relaxed drop indicator z = sigmoid((logit p + logit u) / tau).
double concrete_drop_indicator(double p, double u, double tau);

/// x * (1 - z) / (1 - p) with an independent z per entry. rho is (1,1).
ad::Var concrete_dropout(const ad::Var& x, const ad::Var& rho, double temperature, Rng& rng);

/// weight_reg * ||W||^2 / (1 - p) + dropout_reg * K * (p ln p + (1-p) ln(1-p)).
/// With the 1/(1-p) activation scaling above, the first term equals the
/// objective's (1-p) ||M||^2 for the unscaled weights M = W / (1-p).
ad::Var concrete_dropout_regularizer(const ad::Var& weight, const ad::Var& rho, std::size_t input_dim,
                                     const ConcreteDropoutSettings& s);

}  // namespace bayesformer
