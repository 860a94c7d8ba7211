#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bayesformer/bayes.hpp"
#include "bayesformer/distributions.hpp"
#include "bayesformer/params.hpp"
#include "bayesformer/rng.hpp"

// Empirical weight-distribution study: per-tensor family fits, tail and
// modality summaries, replica covariance, and the priors derived from them.

namespace bayesformer::eval {

/// Degrees of freedom tried for the Student family.
inline constexpr double kStudentDofGrid[] = {1, 2, 4, 8, 16, 32};

struct FamilyFit {
  dist::LocScale dist;
  double log_likelihood = 0.0;
};

/// Maximum-likelihood fit of one family to pooled samples.
/// Gaussian and Laplace in closed form, logistic by Fisher scoring,
/// Student (best dof on the grid) and Cauchy by EM.
FamilyFit fit_family(std::span<const double> x, dist::Family f);
/// Fits in kAllFamilies order.
std::vector<FamilyFit> fit_all_families(std::span<const double> x);
/// Index of the highest log-likelihood; ties go to the earlier family.
std::size_t best_fit(const std::vector<FamilyFit>& fits);

double log_likelihood(std::span<const double> x, const dist::LocScale& d);

/// Sample excess kurtosis m4 / m2^2 - 3; *se receives sqrt(24 / n).
double excess_kurtosis(std::span<const double> x, double* se = nullptr);

/// (theoretical, empirical) quantile pairs at p = k / (n + 1), k = 1..n.
std::vector<std::pair<double, double>> qq_pairs(std::span<const double> x, const dist::LocScale& d,
                                                std::size_t n = 99);

struct Histogram {
  std::vector<double> edges;   // bins + 1
  std::vector<double> counts;
};

/// Histogram on fixed edges; values outside fall into the end bins.
Histogram histogram(std::span<const double> x, double lo, double hi, std::size_t bins);

struct CovarianceHistograms {
  Histogram empirical;  // off-diagonal replica covariances of the subsample
  Histogram reference;  // same from isotropic Gaussian draws with matched diagonal
  std::size_t dims = 0;
};

/// replicas[r] holds replica r's flattened tensor. A fixed subsample of
/// min(max_dims, size) coordinates is used. ContractError for fewer than 2
/// replicas.
CovarianceHistograms covariance_histograms(const std::vector<std::vector<double>>& replicas, Rng& rng,
                                           std::size_t max_dims = 200, std::size_t bins = 40);

/// Number of local maxima of a Gaussian KDE at Silverman's bandwidth times
/// each factor.
std::array<std::size_t, 3> kde_peaks(std::span<const double> x, std::array<double, 3> factors = {0.5, 1.0, 2.0},
                                     std::size_t max_points = 5000);

struct WeightStudyRecord {
  std::string tensor;
  std::size_t replicas = 0;
  std::size_t n = 0;                // pooled weights
  std::vector<FamilyFit> fits;      // kAllFamilies order
  std::size_t best = 0;
  double kurtosis = 0.0;
  double kurtosis_se = 0.0;
  std::vector<std::vector<std::pair<double, double>>> qq;  // per family
  CovarianceHistograms covariance;
  std::array<std::size_t, 3> kde_peaks{};
};

/// replicas[r] is the flattened tensor of replica r (equal lengths).
WeightStudyRecord study_tensor(const std::string& name, const std::vector<std::vector<double>>& replicas, Rng& rng);

/// One record per name, pooling each tensor across the replica parameter stores.
std::vector<WeightStudyRecord> weight_study(const std::vector<ParamStore>& replicas,
                                            const std::vector<std::string>& names, Rng& rng);

/// Pooled standard deviation below which a tensor is treated as constant.
inline constexpr double kDegenerateScale = 1e-8;

/// Best-fitting family and parameters per tensor; other tensors, and tensors
/// whose pooled sd is below kDegenerateScale, use fallback.
bayes::PriorSpec improved_prior_from_study(const std::vector<WeightStudyRecord>& records,
                                           const dist::LocScale& fallback);

/// fits.csv, qq.csv, covariance.csv and summary.csv under dir.
void write_study_csv(const std::filesystem::path& dir, const std::vector<WeightStudyRecord>& records);

}  // namespace bayesformer::eval
