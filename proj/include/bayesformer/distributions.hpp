#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "bayesformer/rng.hpp"

namespace bayesformer::dist {

// ---------------------------------------------------------------------------
// Location-scale families used for weight priors and posteriors.
// ---------------------------------------------------------------------------

enum class Family { gaussian, laplace, logistic, cauchy, student };

inline constexpr Family kAllFamilies[] = {Family::gaussian, Family::laplace, Family::logistic,
                                          Family::cauchy, Family::student};

std::string_view family_name(Family f);
/// Accepts "gaussian", "laplace", "logistic", "cauchy", "student" (case-insensitive).
Family parse_family(std::string_view name);

/// Standardised (loc 0, scale 1) density and friends. `dof` only matters for Student.
double standard_log_pdf(Family f, double y, double dof);
/// d/dy log f(y).
double standard_score(Family f, double y, double dof);
double standard_cdf(Family f, double y, double dof);
double standard_quantile(Family f, double u, double dof);
/// Draws a standard variate: Box-Muller for the Gaussian, inverse CDF of a
/// uniform otherwise.
double standard_sample(Family f, double dof, Rng& rng);

struct LocScale {
  Family family = Family::gaussian;
  double loc = 0.0;
  double scale = 1.0;
  double dof = 4.0;

  /// DomainError for scale <= 0 or dof <= 0.
  void validate() const;
  double log_pdf(double x) const;
  double cdf(double x) const;
  double quantile(double u) const;
  /// Reparameterised: loc + scale * eps.
  double sample(Rng& rng) const;
};

/// KL(N(mq, sq^2) || N(mp, sp^2)).
double kl_gaussian(double mq, double sq, double mp, double sp);

// ---------------------------------------------------------------------------
// Gamma / Dirichlet.
// ---------------------------------------------------------------------------

/// Counts implicit-gradient evaluations whose density underflowed to 0 and
/// were therefore clamped to a zero gradient.
struct GammaGradDiagnostics {
  std::size_t underflow = 0;
  std::size_t evaluations = 0;
};

/// Gamma(alpha, 1) draw. Marsaglia-Tsang for alpha >= 1; for alpha < 1 a
/// Gamma(alpha + 1) draw is boosted by u^(1/alpha).
double sample_gamma(double alpha, Rng& rng);
/// log of a Gamma(alpha, 1) draw, computed without forming tiny z values.
/// Consumes the same random numbers as sample_gamma.
double sample_log_gamma(double alpha, Rng& rng);

/// dz/dalpha = -(dF/dalpha)(z | alpha) / q_alpha(z) for z ~ Gamma(alpha, 1).
/// dF/dalpha is a central difference in alpha with step max(1e-5 alpha, 1e-7)
/// plus one Richardson extrapolation, taken on whichever CDF tail is small.
double implicit_gamma_grad(double z, double alpha, GammaGradDiagnostics* diag = nullptr);

/// d log z / d alpha, given log z. Returns 0 (and counts an underflow) when z
/// or its density is not representable.
double implicit_log_gamma_grad(double log_z, double alpha, GammaGradDiagnostics* diag = nullptr);

struct DirichletParams {
  std::vector<double> alpha;
  /// DomainError unless dimension >= 2 and every component is > 0 and finite.
  void validate() const;
  double total() const;
};

std::vector<double> sample_dirichlet(const DirichletParams& params, Rng& rng);

/// A Dirichlet draw together with what the pathwise gradient needs.
struct DirichletDraw {
  std::vector<double> weights;
  std::vector<double> log_gamma;     // log X_k of the underlying Gamma draws
  std::vector<double> dlog_dalpha;   // d log X_k / d alpha_k
};

DirichletDraw sample_dirichlet_pathwise(const DirichletParams& params, Rng& rng,
                                        GammaGradDiagnostics* diag = nullptr);

/// Pulls an upstream gradient on the weights back to the concentration:
/// dL/dalpha_k = w_k * dlog_dalpha_k * (g_k - sum_j g_j w_j).
std::vector<double> dirichlet_pullback(const DirichletDraw& draw, const std::vector<double>& grad_w);

/// Closed-form KL(Dir(p) || Dir(q)). ContractError on dimension mismatch.
double kl_dirichlet(const DirichletParams& p, const DirichletParams& q);

struct DirichletKlGrad {
  std::vector<double> d_p;  // dKL/dp_k
  std::vector<double> d_q;  // dKL/dq_k
};
DirichletKlGrad kl_dirichlet_grad(const DirichletParams& p, const DirichletParams& q);

// ---------------------------------------------------------------------------
// Monte Carlo KL.
// ---------------------------------------------------------------------------

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

/// Mean of log q(w) - log p(w) over n draws w ~ q. NumericError names the
/// offending value when either log density is not finite.
McEstimate kl_monte_carlo(const std::function<double(Rng&)>& sample_q,
                          const std::function<double(double)>& log_q,
                          const std::function<double(double)>& log_p, std::size_t n_samples,
                          Rng& rng);

/// Vector-valued variant (Dirichlet and other multivariate q/p).
McEstimate kl_monte_carlo_vec(const std::function<std::vector<double>(Rng&)>& sample_q,
                              const std::function<double(const std::vector<double>&)>& log_q,
                              const std::function<double(const std::vector<double>&)>& log_p,
                              std::size_t n_samples, Rng& rng);

/// log density of Dir(alpha) at a point of the open simplex.
double dirichlet_log_pdf(const DirichletParams& params, const std::vector<double>& x);

}  // namespace bayesformer::dist
