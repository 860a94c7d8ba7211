#include "bayesformer/special.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "bayesformer/errors.hpp"

namespace bayesformer::special {

namespace {

void require_positive(double x, const char* fn) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw DomainError(std::string(fn) + ": argument must be finite and > 0, got " +
                      std::to_string(x));
  }
}

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr int kMaxIter = 100000;

// Series for P(a, x), valid (and fast) for x < a + 1.
double lower_series(double a, double x) {
  if (x == 0.0) return 0.0;
  double ap = a;
  double del = 1.0 / a;
  double sum = del;
  for (int n = 0; n < kMaxIter; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * kEps) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Modified Lentz continued fraction for Q(a, x), x >= a + 1.
double upper_fraction(double a, double x) {
  constexpr double tiny = std::numeric_limits<double>::min() / kEps;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace

double log_gamma(double x) {
  require_positive(x, "log_gamma");
  return std::lgamma(x);
}

double digamma(double x) {
  require_positive(x, "digamma");
  double acc = 0.0;
  while (x < 10.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double r = 1.0 / (x * x);
  // Bernoulli-number tail: -sum B_2k / (2k x^2k)
  const double tail =
      r * (1.0 / 12 - r * (1.0 / 120 - r * (1.0 / 252 - r * (1.0 / 240 - r * (1.0 / 132 - r * (691.0 / 32760 - r / 12))))));
  return acc + std::log(x) - 0.5 / x - tail;
}

double trigamma(double x) {
  require_positive(x, "trigamma");
  double acc = 0.0;
  while (x < 10.0) {
    acc += 1.0 / (x * x);
    x += 1.0;
  }
  const double r = 1.0 / (x * x);
  const double tail =
      (1.0 / 6 - r * (1.0 / 30 - r * (1.0 / 42 - r * (1.0 / 30 - r * (5.0 / 66 - r * (691.0 / 2730 - r * 7.0 / 6)))))) /
      (x * x * x);
  return acc + 1.0 / x + 0.5 * r + tail;
}

IncompleteGamma incomplete_gamma(double a, double x) {
  require_positive(a, "incomplete_gamma");
  if (!(x >= 0.0)) {
    throw DomainError("incomplete_gamma: x must be >= 0, got " + std::to_string(x));
  }
  if (std::isinf(x)) return {1.0, 0.0, false};
  if (x < a + 1.0) {
    const double p = lower_series(a, x);
    return {p, 1.0 - p, true};
  }
  const double q = upper_fraction(a, x);
  return {1.0 - q, q, false};
}

double reg_lower_incomplete_gamma(double a, double x) { return incomplete_gamma(a, x).p; }

double reg_upper_incomplete_gamma(double a, double x) { return incomplete_gamma(a, x).q; }

double gamma_log_density(double z, double a) {
  require_positive(a, "gamma_log_density");
  if (!(z > 0.0)) throw DomainError("gamma_log_density: z must be > 0");
  return (a - 1.0) * std::log(z) - z - std::lgamma(a);
}

double inverse_softplus(double x) {
  if (!(x > 0.0)) throw DomainError("inverse_softplus: argument must be positive");
  return x > 30.0 ? x : std::log(std::expm1(x));
}

}  // namespace bayesformer::special
