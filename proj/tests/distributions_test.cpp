#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include "bayesformer/distributions.hpp"
#include "bayesformer/errors.hpp"
#include "bayesformer/special.hpp"
#include "oracles.hpp"

using namespace bayesformer;
using namespace bayesformer::dist;

namespace {

struct SampleStats {
  double mean = 0, var = 0;
};

SampleStats stats(const std::vector<double>& xs) {
  SampleStats s;
  for (double x : xs) s.mean += x;
  s.mean /= xs.size();
  for (double x : xs) s.var += (x - s.mean) * (x - s.mean);
  s.var /= (xs.size() - 1);
  return s;
}

}  // namespace

// ---- Gamma sampling --------------------------------------------------------

TEST(SampleGamma, MomentsShapeThree) {
  Rng rng(1);
  std::vector<double> xs(1000000);
  for (auto& x : xs) x = sample_gamma(3.0, rng);
  const auto s = stats(xs);
  EXPECT_NEAR(s.mean, 3.0, 3.0 * std::sqrt(3.0 / xs.size()));
  // Var of the sample variance for Gamma(a): (mu4 - sigma^4)/n with mu4 = 3a(a+2)
  EXPECT_NEAR(s.var, 3.0, 3.0 * std::sqrt((3.0 * 3 * 5 - 9.0) / xs.size()));
}

TEST(SampleGamma, MomentsBoostPath) {
  Rng rng(2);
  std::vector<double> xs(1000000);
  for (auto& x : xs) x = sample_gamma(0.3, rng);
  const auto s = stats(xs);
  EXPECT_NEAR(s.mean, 0.3, 3.0 * std::sqrt(0.3 / xs.size()));
  EXPECT_NEAR(s.var, 0.3, 3.0 * std::sqrt((3.0 * 0.3 * 2.3 - 0.09) / xs.size()));
}

TEST(SampleGamma, Deterministic) {
  Rng a(99), b(99), c(100);
  std::vector<double> xa, xb, xc;
  for (int i = 0; i < 10; ++i) {
    xa.push_back(sample_gamma(1.7, a));
    xb.push_back(sample_gamma(1.7, b));
    xc.push_back(sample_gamma(1.7, c));
  }
  EXPECT_EQ(xa, xb);
  EXPECT_NE(xa, xc);
}

TEST(SampleGamma, LogAndLinearAgree) {
  Rng a(5), b(5);
  for (double alpha : {0.05, 0.7, 1.0, 4.2}) {
    for (int i = 0; i < 100; ++i) {
      const double z = sample_gamma(alpha, a);
      const double lz = sample_log_gamma(alpha, b);
      EXPECT_NEAR(std::log(z), lz, 1e-12 * std::max(1.0, std::fabs(lz)));
    }
  }
}

TEST(SampleGamma, DomainError) {
  Rng rng(0);
  EXPECT_THROW(sample_gamma(0.0, rng), DomainError);
  EXPECT_THROW(sample_gamma(-1.0, rng), DomainError);
}

// ---- implicit reparameterisation -------------------------------------------

TEST(ImplicitGammaGrad, MatchesInversionOracle) {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const double alpha = 0.05 + (50.0 - 0.05) * rng.uniform();
    const double z = sample_gamma(alpha, rng);
    const double g = implicit_gamma_grad(z, alpha);
    const double ref = bftest::gamma_inversion_grad(z, alpha);
    EXPECT_NEAR(g, ref, 1e-3 * std::fabs(ref)) << "alpha=" << alpha << " z=" << z;
  }
}

TEST(ImplicitGammaGrad, ModeRegionSlopeNearOne) {
  for (double alpha : {50.0, 200.0, 1000.0}) {
    EXPECT_NEAR(implicit_gamma_grad(alpha, alpha), 1.0, 0.1) << alpha;
  }
}

TEST(ImplicitGammaGrad, PositiveEverywhereTested) {
  Rng rng(23);
  for (int i = 0; i < 500; ++i) {
    const double alpha = std::exp(-3.0 + 7.0 * rng.uniform());
    const double z = sample_gamma(alpha, rng);
    if (z <= 0.0) continue;
    EXPECT_GT(implicit_gamma_grad(z, alpha), 0.0) << alpha << " " << z;
  }
}

TEST(ImplicitGammaGrad, UnderflowClampsAndCounts) {
  GammaGradDiagnostics diag;
  EXPECT_EQ(implicit_gamma_grad(1e5, 1.0, &diag), 0.0);
  EXPECT_EQ(diag.underflow, 1u);
  EXPECT_EQ(implicit_log_gamma_grad(-1e6, 1e-6, &diag), 0.0);
  EXPECT_EQ(diag.underflow, 2u);
}

TEST(ImplicitGammaGrad, DomainErrors) {
  EXPECT_THROW(implicit_gamma_grad(0.0, 1.0), DomainError);
  EXPECT_THROW(implicit_gamma_grad(1.0, 0.0), DomainError);
}

// ---- Dirichlet -------------------------------------------------------------

TEST(Dirichlet, SymmetricMeans) {
  Rng rng(3);
  const DirichletParams p{{0.7, 0.7, 0.7, 0.7}};
  const std::size_t n = 200000;
  std::vector<double> acc(4, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = sample_dirichlet(p, rng);
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_GE(w[k], 0.0);
      acc[k] += w[k];
      s += w[k];
    }
    ASSERT_NEAR(s, 1.0, 1e-12);
  }
  // Var(X_k) = a(a0 - a) / (a0^2 (a0 + 1))
  const double a0 = 2.8, var = 0.7 * 2.1 / (a0 * a0 * (a0 + 1));
  for (double m : acc) EXPECT_NEAR(m / n, 0.25, 3.0 * std::sqrt(var / n));
}

TEST(Dirichlet, AsymmetricMean) {
  Rng rng(4);
  const DirichletParams p{{2.0, 6.0}};
  const std::size_t n = 1000000;
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += sample_dirichlet(p, rng)[0];
  const double var = 2.0 * 6.0 / (64.0 * 9.0);
  EXPECT_NEAR(acc / n, 0.25, 3.0 * std::sqrt(var / n));
}

TEST(Dirichlet, PathwiseGradientOfMean) {
  // d/da1 E[X_1] = d/da1 (a1 / a0) = a2 / a0^2 = 6 / 64
  Rng rng(6);
  const DirichletParams p{{2.0, 6.0}};
  const std::size_t n = 200000;
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto draw = sample_dirichlet_pathwise(p, rng);
    acc += dirichlet_pullback(draw, {1.0, 0.0})[0];
  }
  EXPECT_NEAR(acc / n, 6.0 / 64.0, 0.02 * 6.0 / 64.0);
}

TEST(Dirichlet, ValidationErrors) {
  Rng rng(0);
  EXPECT_THROW(sample_dirichlet(DirichletParams{{1.0}}, rng), DomainError);
  EXPECT_THROW(sample_dirichlet(DirichletParams{{1.0, -1.0}}, rng), DomainError);
  EXPECT_THROW(kl_dirichlet(DirichletParams{{1.0, 1.0}}, DirichletParams{{1.0, 1.0, 1.0}}), ContractError);
}

TEST(KlDirichlet, ZeroForEqualAndHandCase) {
  const DirichletParams p{{1.3, 0.4, 7.0}};
  EXPECT_EQ(kl_dirichlet(p, p), 0.0);
  EXPECT_NEAR(kl_dirichlet(DirichletParams{{1.0, 1.0}}, DirichletParams{{2.0, 2.0}}), 2.0 - std::log(6.0), 1e-12);
}

TEST(KlDirichlet, HandCaseAgreesWithMonteCarlo) {
  Rng rng(8);
  const DirichletParams p{{1.0, 1.0}}, q{{2.0, 2.0}};
  const auto est = kl_monte_carlo_vec([&](Rng& r) { return sample_dirichlet(p, r); },
                                      [&](const std::vector<double>& x) { return dirichlet_log_pdf(p, x); },
                                      [&](const std::vector<double>& x) { return dirichlet_log_pdf(q, x); },
                                      1000000, rng);
  EXPECT_NEAR(est.mean, 2.0 - std::log(6.0), 3.0 * est.std_error);
}

TEST(KlDirichlet, NonNegativeOnRandomPairs) {
  Rng rng(10);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t K = 2 + rng.below(7);
    DirichletParams p, q;
    for (std::size_t k = 0; k < K; ++k) {
      p.alpha.push_back(std::exp(-3.0 + 6.0 * rng.uniform()));
      q.alpha.push_back(std::exp(-3.0 + 6.0 * rng.uniform()));
    }
    EXPECT_GE(kl_dirichlet(p, q), -1e-12);
  }
}

TEST(KlDirichlet, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    DirichletParams p, q;
    for (int k = 0; k < 4; ++k) {
      p.alpha.push_back(0.2 + 5.0 * rng.uniform());
      q.alpha.push_back(0.2 + 5.0 * rng.uniform());
    }
    const auto g = kl_dirichlet_grad(p, q);
    for (int k = 0; k < 4; ++k) {
      const double h = 1e-6;
      auto pp = p, pm = p, qp = q, qm = q;
      pp.alpha[k] += h;
      pm.alpha[k] -= h;
      qp.alpha[k] += h;
      qm.alpha[k] -= h;
      const double dp = (kl_dirichlet(pp, q) - kl_dirichlet(pm, q)) / (2 * h);
      const double dq = (kl_dirichlet(p, qp) - kl_dirichlet(p, qm)) / (2 * h);
      EXPECT_NEAR(g.d_p[k], dp, 1e-6 * std::max(1.0, std::fabs(dp)));
      EXPECT_NEAR(g.d_q[k], dq, 1e-6 * std::max(1.0, std::fabs(dq)));
    }
  }
}

// ---- location-scale families -------------------------------------------------

TEST(LocScale, ReferenceValues) {
  EXPECT_NEAR((LocScale{Family::gaussian, 0, 1}).log_pdf(0.0), -0.918938533204672742, 1e-14);
  EXPECT_NEAR((LocScale{Family::logistic, 0, 1}).quantile(0.5), 0.0, 1e-15);
  EXPECT_NEAR((LocScale{Family::cauchy, 0, 1}).quantile(0.75), 1.0, 1e-14);
}

TEST(LocScale, LaplaceVariance) {
  Rng rng(13);
  const LocScale lap{Family::laplace, 0.0, 1.0};
  std::vector<double> xs(1000000);
  for (auto& x : xs) x = lap.sample(rng);
  // Var(s^2) ~ (mu4 - sigma^4) / n with mu4 = 24 b^4
  EXPECT_NEAR(stats(xs).var, 2.0, 3.0 * std::sqrt(20.0 / xs.size()));
}

TEST(LocScale, DensitiesIntegrateToOne) {
  // x = loc + scale * sinh(t) on t in [-40, 40]; Simpson's rule. The kink of
  // the Laplace density sits on a panel boundary.
  for (Family f : kAllFamilies) {
    const LocScale d{f, 0.3, 1.7, 4.0};
    const int n = 40000;
    const double a = -40.0, h = 80.0 / n;
    double acc = 0;
    for (int i = 0; i <= n; ++i) {
      const double t = a + i * h;
      const double v = std::exp(d.log_pdf(d.loc + d.scale * std::sinh(t))) * d.scale * std::cosh(t);
      acc += (i == 0 || i == n ? 1.0 : (i % 2 ? 4.0 : 2.0)) * v;
    }
    EXPECT_NEAR(acc * h / 3.0, 1.0, 1e-6) << family_name(f);
  }
}

TEST(LocScale, QuantileCdfRoundTrip) {
  // A double CDF near 1 resolves x only to ~1e-8 standard units at 6 scales,
  // so the tolerance is stated in units of the scale.
  for (Family f : kAllFamilies) {
    for (const auto& [loc, sc] : {std::pair{0.0, 1.0}, std::pair{-0.4, 2.5}}) {
      const LocScale d{f, loc, sc, 4.0};
      const double span = (f == Family::student || f == Family::cauchy) ? 4.0 : 6.0;
      for (int i = -600; i <= 600; ++i) {
        const double x = d.loc + d.scale * span * i / 600.0;
        EXPECT_NEAR(d.quantile(d.cdf(x)), x, 1e-8 * sc) << family_name(f) << " x=" << x;
      }
    }
  }
}

TEST(LocScale, InvalidParameters) {
  Rng rng(0);
  EXPECT_THROW((LocScale{Family::gaussian, 0, 0}).log_pdf(0.0), DomainError);
  EXPECT_THROW((LocScale{Family::student, 0, 1, -1}).sample(rng), DomainError);
  EXPECT_THROW((LocScale{Family::laplace, 0, 1}).quantile(1.0), DomainError);
  EXPECT_THROW(parse_family("weibull"), ContractError);
  EXPECT_EQ(parse_family("Cauchy"), Family::cauchy);
}

TEST(LocScale, StreamsReproducible) {
  for (Family f : kAllFamilies) {
    const LocScale d{f, 0, 1, 4};
    Rng a(1), b(1), c(2);
    std::vector<double> xa, xb, xc;
    for (int i = 0; i < 10; ++i) {
      xa.push_back(d.sample(a));
      xb.push_back(d.sample(b));
      xc.push_back(d.sample(c));
    }
    EXPECT_EQ(xa, xb);
    EXPECT_NE(xa, xc);
  }
}

TEST(LocScale, ScoreMatchesDerivativeOfLogPdf) {
  for (Family f : kAllFamilies) {
    for (double y : {-3.1, -0.7, 0.4, 2.2}) {
      const double h = 1e-6;
      const double fd = (standard_log_pdf(f, y + h, 4) - standard_log_pdf(f, y - h, 4)) / (2 * h);
      EXPECT_NEAR(standard_score(f, y, 4), fd, 1e-7) << family_name(f);
    }
  }
}

// ---- Monte Carlo KL ------------------------------------------------------------

TEST(KlMonteCarlo, IdenticalDistributions) {
  Rng rng(1);
  const LocScale q{Family::gaussian, 0.5, 2.0};
  const auto e = kl_monte_carlo([&](Rng& r) { return q.sample(r); }, [&](double w) { return q.log_pdf(w); },
                                [&](double w) { return q.log_pdf(w); }, 1000, rng);
  EXPECT_LE(std::fabs(e.mean), 3.0 * e.std_error + 1e-15);
}

TEST(KlMonteCarlo, ShiftedGaussian) {
  Rng rng(2);
  const LocScale q{Family::gaussian, 0, 1}, p{Family::gaussian, 1, 1};
  const auto e = kl_monte_carlo([&](Rng& r) { return q.sample(r); }, [&](double w) { return q.log_pdf(w); },
                                [&](double w) { return p.log_pdf(w); }, 100000, rng);
  EXPECT_NEAR(e.mean, 0.5, 3.0 * e.std_error);
  EXPECT_NEAR(kl_gaussian(0, 1, 1, 1), 0.5, 1e-15);
}

TEST(KlMonteCarlo, GaussianAgainstCauchy) {
  // Quadrature reference (mpmath, 25 digits) for KL(N(0,1) || Cauchy(0,1)).
  Rng rng(3);
  const LocScale q{Family::gaussian, 0, 1}, p{Family::cauchy, 0, 1};
  const auto e = kl_monte_carlo([&](Rng& r) { return q.sample(r); }, [&](double w) { return q.log_pdf(w); },
                                [&](double w) { return p.log_pdf(w); }, 1000000, rng);
  EXPECT_NEAR(e.mean, 0.2592445324888623, 3.0 * e.std_error);
}

TEST(KlMonteCarlo, NonFiniteReported) {
  Rng rng(4);
  try {
    kl_monte_carlo([](Rng&) { return 1.0; }, [](double) { return 0.0; },
                   [](double) { return -INFINITY; }, 3, rng);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("log p = -inf"), std::string::npos) << e.what();
  }
  EXPECT_THROW(kl_monte_carlo([](Rng&) { return 1.0; }, [](double) { return 0.0; },
                              [](double) { return 0.0; }, 0, rng),
               ContractError);
}
