#include "bayesformer/dropout.hpp"

#include <cmath>

#include "bayesformer/errors.hpp"

namespace bayesformer {

double concrete_drop_indicator(double p, double u, double tau) {
  if (!(tau > 0.0)) throw DomainError("concrete dropout: temperature must be > 0");
  const double t = (std::log(p) - std::log1p(-p) + std::log(u) - std::log1p(-u)) / tau;
  return 1.0 / (1.0 + std::exp(-t));
}

ad::Var concrete_dropout(const ad::Var& x, const ad::Var& rho, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw DomainError("concrete dropout: temperature must be > 0");
  BF_REQUIRE(rho.value().size() == 1, "concrete dropout: rho must be (1,1)");
  ad::Tape& t = *x.tape();
  Tensor lu = Tensor::matrix(x.rows(), x.cols());
  for (auto& v : lu.storage()) {
    const double u = rng.uniform_open();
    v = std::log(u) - std::log1p(-u);
  }
  // logit p = rho, so z = sigmoid((rho + logit u) / tau)
  const ad::Var z = ad::sigmoid(ad::scale(ad::add(rho, t.constant(std::move(lu))), 1.0 / temperature));
  const ad::Var keep = ad::add_scalar(ad::neg(z), 1.0);
  const ad::Var one_minus_p = ad::sigmoid(ad::neg(rho));
  return ad::div(ad::mul(x, keep), one_minus_p);
}

ad::Var concrete_dropout_regularizer(const ad::Var& weight, const ad::Var& rho, std::size_t input_dim,
                                     const ConcreteDropoutSettings& s) {
  const ad::Var p = ad::sigmoid(rho);
  const ad::Var one_minus_p = ad::sigmoid(ad::neg(rho));
  const ad::Var wterm = ad::scale(ad::div(ad::sum(ad::square(weight)), one_minus_p), s.weight_reg());
  // ln p = -softplus(-rho), ln(1-p) = -softplus(rho)
  const ad::Var neg_entropy = ad::neg(ad::add(ad::mul(p, ad::softplus(ad::neg(rho))),
                                              ad::mul(one_minus_p, ad::softplus(rho))));
  return ad::add(wterm, ad::scale(neg_entropy, s.dropout_reg() * static_cast<double>(input_dim)));
}

}  // namespace bayesformer
