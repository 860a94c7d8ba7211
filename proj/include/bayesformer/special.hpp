#pragma once

namespace bayesformer::special {

/// ln Gamma(x) for x > 0; DomainError otherwise.
double log_gamma(double x);

/// psi(x) = d/dx ln Gamma(x), x > 0. Upward recurrence to x >= 10, then the
/// asymptotic series.
double digamma(double x);

/// psi'(x), x > 0. Same scheme as digamma.
double trigamma(double x);

/// Both regularised incomplete gamma tails, each accurate in relative terms
/// on the side that is computed directly (series gives P, continued fraction
/// gives Q; the other is 1 minus it).
struct IncompleteGamma {
  double p;
  double q;
  bool p_direct;  // true when the series branch computed p
};
IncompleteGamma incomplete_gamma(double a, double x);

/// P(a, x) = gamma(a, x) / Gamma(a): the Gamma(a, 1) CDF at x.
double reg_lower_incomplete_gamma(double a, double x);

/// Upper tail Q(a, x) = 1 - P(a, x), computed without cancellation for x >= a + 1.
double reg_upper_incomplete_gamma(double a, double x);

/// log of the Gamma(a, 1) density at z > 0.
double gamma_log_density(double z, double a);

/// y such that softplus(y) = x, x > 0.
double inverse_softplus(double x);

}  // namespace bayesformer::special
