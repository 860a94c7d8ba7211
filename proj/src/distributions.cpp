#include "bayesformer/distributions.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cctype>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "bayesformer/errors.hpp"
#include "bayesformer/special.hpp"

namespace bayesformer::dist {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

void check_unit(double u, const char* fn) {
  if (!(u > 0.0 && u < 1.0)) {
    throw DomainError(std::string(fn) + ": probability must lie in (0, 1), got " + std::to_string(u));
  }
}

void check_dof(Family f, double dof) {
  if (f == Family::student && !(dof > 0.0 && std::isfinite(dof))) {
    throw DomainError("student: degrees of freedom must be > 0");
  }
}

}  // namespace

std::string_view family_name(Family f) {
  switch (f) {
    case Family::gaussian: return "gaussian";
    case Family::laplace: return "laplace";
    case Family::logistic: return "logistic";
    case Family::cauchy: return "cauchy";
    case Family::student: return "student";
  }
  return "?";
}

Family parse_family(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  for (Family f : kAllFamilies) {
    if (family_name(f) == s) return f;
  }
  if (s == "normal") return Family::gaussian;
  throw ContractError("unknown distribution family '" + std::string(name) + "'");
}

double standard_log_pdf(Family f, double y, double dof) {
  switch (f) {
    case Family::gaussian: return -0.5 * y * y - kLogSqrt2Pi;
    case Family::laplace: return -std::fabs(y) - std::numbers::ln2;
    case Family::logistic: {
      const double a = std::fabs(y);
      return -a - 2.0 * std::log1p(std::exp(-a));
    }
    case Family::cauchy: return -std::log(std::numbers::pi) - std::log1p(y * y);
    case Family::student:
      return std::lgamma(0.5 * (dof + 1.0)) - std::lgamma(0.5 * dof) -
             0.5 * std::log(dof * std::numbers::pi) - 0.5 * (dof + 1.0) * std::log1p(y * y / dof);
  }
  return 0.0;
}

double standard_score(Family f, double y, double dof) {
  switch (f) {
    case Family::gaussian: return -y;
    case Family::laplace: return y > 0 ? -1.0 : (y < 0 ? 1.0 : 0.0);
    case Family::logistic: return -std::tanh(0.5 * y);
    case Family::cauchy: return -2.0 * y / (1.0 + y * y);
    case Family::student: return -(dof + 1.0) * y / (dof + y * y);
  }
  return 0.0;
}

double standard_cdf(Family f, double y, double dof) {
  switch (f) {
    case Family::gaussian: return 0.5 * std::erfc(-y / std::numbers::sqrt2);
    case Family::laplace: return y < 0 ? 0.5 * std::exp(y) : 1.0 - 0.5 * std::exp(-y);
    case Family::logistic: return 1.0 / (1.0 + std::exp(-y));
    case Family::cauchy: return 0.5 + std::atan(y) / std::numbers::pi;
    case Family::student:
      return boost::math::cdf(boost::math::students_t_distribution<double>(dof), y);
  }
  return 0.0;
}

double standard_quantile(Family f, double u, double dof) {
  check_unit(u, "quantile");
  switch (f) {
    case Family::gaussian: return boost::math::quantile(boost::math::normal_distribution<double>(), u);
    case Family::laplace: return u < 0.5 ? std::log(2.0 * u) : -std::log(2.0 * (1.0 - u));
    case Family::logistic: return std::log(u) - std::log1p(-u);
    case Family::cauchy: return std::tan(std::numbers::pi * (u - 0.5));
    case Family::student:
      return boost::math::quantile(boost::math::students_t_distribution<double>(dof), u);
  }
  return 0.0;
}

double standard_sample(Family f, double dof, Rng& rng) {
  if (f == Family::gaussian) return rng.normal();
  return standard_quantile(f, rng.uniform_open(), dof);
}

void LocScale::validate() const {
  if (!(scale > 0.0) || !std::isfinite(scale) || !std::isfinite(loc)) {
    throw DomainError(std::string(family_name(family)) + ": scale must be > 0 and parameters finite");
  }
  check_dof(family, dof);
}

double LocScale::log_pdf(double x) const {
  validate();
  return standard_log_pdf(family, (x - loc) / scale, dof) - std::log(scale);
}

double LocScale::cdf(double x) const {
  validate();
  return standard_cdf(family, (x - loc) / scale, dof);
}

double LocScale::quantile(double u) const {
  validate();
  return loc + scale * standard_quantile(family, u, dof);
}

double LocScale::sample(Rng& rng) const {
  validate();
  return loc + scale * standard_sample(family, dof, rng);
}

double kl_gaussian(double mq, double sq, double mp, double sp) {
  if (!(sq > 0.0 && sp > 0.0)) throw DomainError("kl_gaussian: scales must be > 0");
  const double r = sq / sp;
  const double d = (mq - mp) / sp;
  return 0.5 * (r * r + d * d - 1.0) - std::log(r);
}

// ---- Gamma ---------------------------------------------------------------

namespace {

void check_alpha(double alpha, const char* fn) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw DomainError(std::string(fn) + ": shape must be finite and > 0, got " + std::to_string(alpha));
  }
}

// Marsaglia & Tsang (2000), alpha >= 1.
double marsaglia_tsang(double alpha, Rng& rng) {
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform_open();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

}  // namespace

double sample_log_gamma(double alpha, Rng& rng) {
  check_alpha(alpha, "sample_gamma");
  if (alpha >= 1.0) return std::log(marsaglia_tsang(alpha, rng));
  const double boosted = marsaglia_tsang(alpha + 1.0, rng);
  const double u = rng.uniform_open();
  return std::log(boosted) + std::log(u) / alpha;
}

double sample_gamma(double alpha, Rng& rng) {
  check_alpha(alpha, "sample_gamma");
  if (alpha >= 1.0) return marsaglia_tsang(alpha, rng);
  return std::exp(sample_log_gamma(alpha, rng));
}

double implicit_gamma_grad(double z, double alpha, GammaGradDiagnostics* diag) {
  check_alpha(alpha, "implicit_gamma_grad");
  if (!(z > 0.0) || !std::isfinite(z)) {
    throw DomainError("implicit_gamma_grad: z must be finite and > 0, got " + std::to_string(z));
  }
  if (diag) ++diag->evaluations;
  const double log_q = special::gamma_log_density(z, alpha);
  const double q = std::exp(log_q);
  if (q == 0.0 || !std::isfinite(q)) {
    if (diag) ++diag->underflow;
    return 0.0;
  }
  // Differentiate the tail that the incomplete-gamma routine computes
  // directly at this point so that tiny tails keep their relative accuracy.
  const bool upper = !special::incomplete_gamma(alpha, z).p_direct;
  auto tail = [&](double a) {
    const auto ig = special::incomplete_gamma(a, z);
    return upper ? ig.q : ig.p;
  };
  double h = std::max(1e-5 * alpha, 1e-7);
  h = std::min(h, 0.5 * alpha);
  const double d1 = (tail(alpha + h) - tail(alpha - h)) / (2.0 * h);
  const double d2 = (tail(alpha + 0.5 * h) - tail(alpha - 0.5 * h)) / h;
  const double richardson = (4.0 * d2 - d1) / 3.0;
  const double dF = upper ? -richardson : richardson;
  return -dF / q;
}

double implicit_log_gamma_grad(double log_z, double alpha, GammaGradDiagnostics* diag) {
  const double z = std::exp(log_z);
  if (!(z >= std::numeric_limits<double>::min()) || !std::isfinite(z)) {
    if (diag) {
      ++diag->evaluations;
      ++diag->underflow;
    }
    return 0.0;
  }
  return implicit_gamma_grad(z, alpha, diag) / z;
}

// ---- Dirichlet -------------------------------------------------------------

void DirichletParams::validate() const {
  if (alpha.size() < 2) throw DomainError("dirichlet: dimension must be >= 2");
  for (double a : alpha) {
    if (!(a > 0.0) || !std::isfinite(a)) throw DomainError("dirichlet: concentrations must be > 0");
  }
}

double DirichletParams::total() const { return std::accumulate(alpha.begin(), alpha.end(), 0.0); }

namespace {

std::vector<double> normalise_log(const std::vector<double>& log_z) {
  const double m = *std::max_element(log_z.begin(), log_z.end());
  double s = 0.0;
  for (double l : log_z) s += std::exp(l - m);
  const double lse = m + std::log(s);
  std::vector<double> w(log_z.size());
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = std::exp(log_z[k] - lse);
  return w;
}

}  // namespace

std::vector<double> sample_dirichlet(const DirichletParams& params, Rng& rng) {
  params.validate();
  std::vector<double> log_z(params.alpha.size());
  for (std::size_t k = 0; k < log_z.size(); ++k) log_z[k] = sample_log_gamma(params.alpha[k], rng);
  return normalise_log(log_z);
}

DirichletDraw sample_dirichlet_pathwise(const DirichletParams& params, Rng& rng,
                                        GammaGradDiagnostics* diag) {
  params.validate();
  DirichletDraw d;
  const std::size_t K = params.alpha.size();
  d.log_gamma.resize(K);
  for (std::size_t k = 0; k < K; ++k) d.log_gamma[k] = sample_log_gamma(params.alpha[k], rng);
  d.weights = normalise_log(d.log_gamma);
  d.dlog_dalpha.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    d.dlog_dalpha[k] = implicit_log_gamma_grad(d.log_gamma[k], params.alpha[k], diag);
  }
  return d;
}

std::vector<double> dirichlet_pullback(const DirichletDraw& draw, const std::vector<double>& grad_w) {
  BF_REQUIRE(grad_w.size() == draw.weights.size(), "dirichlet_pullback: gradient size mismatch");
  double gbar = 0.0;
  for (std::size_t k = 0; k < grad_w.size(); ++k) gbar += grad_w[k] * draw.weights[k];
  std::vector<double> out(grad_w.size());
  for (std::size_t k = 0; k < grad_w.size(); ++k) {
    out[k] = draw.weights[k] * draw.dlog_dalpha[k] * (grad_w[k] - gbar);
  }
  return out;
}

double kl_dirichlet(const DirichletParams& p, const DirichletParams& q) {
  BF_REQUIRE(p.alpha.size() == q.alpha.size(), "kl_dirichlet: dimension mismatch");
  p.validate();
  q.validate();
  const double p0 = p.total(), q0 = q.total();
  const double psi0 = special::digamma(p0);
  double kl = std::lgamma(p0) - std::lgamma(q0);
  for (std::size_t k = 0; k < p.alpha.size(); ++k) {
    const double a = p.alpha[k], b = q.alpha[k];
    kl += std::lgamma(b) - std::lgamma(a) + (a - b) * (special::digamma(a) - psi0);
  }
  return kl;
}

DirichletKlGrad kl_dirichlet_grad(const DirichletParams& p, const DirichletParams& q) {
  BF_REQUIRE(p.alpha.size() == q.alpha.size(), "kl_dirichlet: dimension mismatch");
  p.validate();
  q.validate();
  const double p0 = p.total(), q0 = q.total();
  const double psi_p0 = special::digamma(p0);
  const double psi_q0 = special::digamma(q0);
  const double tri_p0 = special::trigamma(p0);
  DirichletKlGrad g;
  g.d_p.resize(p.alpha.size());
  g.d_q.resize(p.alpha.size());
  for (std::size_t k = 0; k < p.alpha.size(); ++k) {
    const double a = p.alpha[k], b = q.alpha[k];
    g.d_p[k] = (a - b) * special::trigamma(a) - (p0 - q0) * tri_p0;
    g.d_q[k] = special::digamma(b) - psi_q0 - special::digamma(a) + psi_p0;
  }
  return g;
}

double dirichlet_log_pdf(const DirichletParams& params, const std::vector<double>& x) {
  BF_REQUIRE(x.size() == params.alpha.size(), "dirichlet_log_pdf: dimension mismatch");
  double lp = std::lgamma(params.total());
  for (std::size_t k = 0; k < x.size(); ++k) {
    lp += (params.alpha[k] - 1.0) * std::log(x[k]) - std::lgamma(params.alpha[k]);
  }
  return lp;
}

// ---- Monte Carlo KL ------------------------------------------------------------

namespace {

struct Moments {
  double sum = 0.0, sumsq = 0.0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    sumsq += v * v;
    ++n;
  }
  McEstimate finish() const {
    McEstimate e;
    e.n = n;
    e.mean = sum / static_cast<double>(n);
    const double var = n > 1 ? (sumsq - sum * e.mean) / static_cast<double>(n - 1) : 0.0;
    e.std_error = std::sqrt(std::max(var, 0.0) / static_cast<double>(n));
    return e;
  }
};

void check_finite_term(double lq, double lp, const std::string& where) {
  if (!std::isfinite(lq) || !std::isfinite(lp)) {
    std::ostringstream os;
    os << "kl_monte_carlo: non-finite log density (log q = " << lq << ", log p = " << lp
       << ") at " << where;
    throw NumericError(os.str());
  }
}

}  // namespace

McEstimate kl_monte_carlo(const std::function<double(Rng&)>& sample_q,
                          const std::function<double(double)>& log_q,
                          const std::function<double(double)>& log_p, std::size_t n_samples,
                          Rng& rng) {
  BF_REQUIRE(n_samples >= 1, "kl_monte_carlo: n_samples must be >= 1");
  Moments m;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double w = sample_q(rng);
    const double lq = log_q(w), lp = log_p(w);
    check_finite_term(lq, lp, "w = " + std::to_string(w));
    m.add(lq - lp);
  }
  return m.finish();
}

McEstimate kl_monte_carlo_vec(const std::function<std::vector<double>(Rng&)>& sample_q,
                              const std::function<double(const std::vector<double>&)>& log_q,
                              const std::function<double(const std::vector<double>&)>& log_p,
                              std::size_t n_samples, Rng& rng) {
  BF_REQUIRE(n_samples >= 1, "kl_monte_carlo: n_samples must be >= 1");
  Moments m;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto w = sample_q(rng);
    const double lq = log_q(w), lp = log_p(w);
    check_finite_term(lq, lp, "sample " + std::to_string(i));
    m.add(lq - lp);
  }
  return m.finish();
}

}  // namespace bayesformer::dist
