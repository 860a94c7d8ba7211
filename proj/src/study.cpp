#include "bayesformer/study.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>

#include "bayesformer/errors.hpp"

namespace bayesformer::eval {

namespace {

double quantile_sorted(const std::vector<double>& s, double p) {
  const double h = (static_cast<double>(s.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

std::vector<double> sorted(std::span<const double> x) {
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  return s;
}

double mean_of(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

// EM for a Student t with fixed dof; loc/scale updated in place.
void student_em(std::span<const double> x, double dof, double& loc, double& scale) {
  const double n = static_cast<double>(x.size());
  for (int it = 0; it < 2000; ++it) {
    double sw = 0.0, swx = 0.0;
    const double s2 = scale * scale;
    for (double v : x) {
      const double d = v - loc;
      const double w = (dof + 1.0) / (dof + d * d / s2);
      sw += w;
      swx += w * v;
    }
    const double nloc = swx / sw;
    double ss = 0.0;
    for (double v : x) {
      const double d = v - loc;
      const double w = (dof + 1.0) / (dof + d * d / s2);
      ss += w * (v - nloc) * (v - nloc);
    }
    const double nscale = std::sqrt(ss / n);
    const bool done = std::abs(nloc - loc) < 1e-10 * scale && std::abs(nscale - scale) < 1e-10 * scale;
    loc = nloc;
    scale = nscale;
    if (done) break;
  }
}

}  // namespace

double log_likelihood(std::span<const double> x, const dist::LocScale& d) {
  d.validate();
  double ll = 0.0;
  for (double v : x) ll += dist::standard_log_pdf(d.family, (v - d.loc) / d.scale, d.dof);
  return ll - static_cast<double>(x.size()) * std::log(d.scale);
}

FamilyFit fit_family(std::span<const double> x, dist::Family f) {
  BF_REQUIRE(x.size() >= 2, "fit_family: need at least 2 samples");
  const double n = static_cast<double>(x.size());
  const std::vector<double> s = sorted(x);
  const double med = quantile_sorted(s, 0.5);
  const double iqr = quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
  dist::LocScale d;
  d.family = f;
  switch (f) {
    case dist::Family::gaussian: {
      const double m = mean_of(x);
      double v = 0.0;
      for (double a : x) v += (a - m) * (a - m);
      d.loc = m;
      d.scale = std::sqrt(v / n);
      break;
    }
    case dist::Family::laplace: {
      double a = 0.0;
      for (double v : x) a += std::abs(v - med);
      d.loc = med;
      d.scale = a / n;
      break;
    }
    case dist::Family::logistic: {
      const double m = mean_of(x);
      double v = 0.0;
      for (double a : x) v += (a - m) * (a - m);
      double loc = m, log_s = std::log(std::sqrt(v / n) * std::sqrt(3.0) / std::numbers::pi);
      const double info_ls = (std::numbers::pi * std::numbers::pi + 3.0) / 9.0;
      for (int it = 0; it < 500; ++it) {
        const double sc = std::exp(log_s);
        double g_mu = 0.0, g_ls = 0.0;
        for (double a : x) {
          const double y = (a - loc) / sc;
          const double t = std::tanh(0.5 * y);
          g_mu += t;
          g_ls += y * t;
        }
        g_mu /= sc;
        g_ls -= n;
        const double d_mu = 3.0 * sc * sc * g_mu / n;
        const double d_ls = g_ls / (n * info_ls);
        loc += d_mu;
        log_s += d_ls;
        if (std::abs(d_mu) < 1e-12 * sc && std::abs(d_ls) < 1e-12) break;
      }
      d.loc = loc;
      d.scale = std::exp(log_s);
      break;
    }
    case dist::Family::cauchy: {
      double loc = med, scale = std::max(iqr / 2.0, 1e-300);
      student_em(x, 1.0, loc, scale);
      d.loc = loc;
      d.scale = scale;
      break;
    }
    case dist::Family::student: {
      double best = -INFINITY;
      double loc = med, scale = std::max(iqr / 2.0, 1e-300);
      for (double dof : kStudentDofGrid) {
        student_em(x, dof, loc, scale);
        dist::LocScale c{dist::Family::student, loc, scale, dof};
        const double ll = log_likelihood(x, c);
        if (ll > best) {
          best = ll;
          d = c;
        }
      }
      break;
    }
  }
  if (!(d.scale > 0.0) || !std::isfinite(d.scale)) {
    throw NumericError("fit_family: degenerate " + std::string(dist::family_name(f)) + " fit (all samples equal?)");
  }
  FamilyFit out{d, log_likelihood(x, d)};
  if (!std::isfinite(out.log_likelihood)) throw NumericError("fit_family: non-finite log-likelihood");
  return out;
}

std::vector<FamilyFit> fit_all_families(std::span<const double> x) {
  std::vector<FamilyFit> out;
  for (auto f : dist::kAllFamilies) out.push_back(fit_family(x, f));
  return out;
}

std::size_t best_fit(const std::vector<FamilyFit>& fits) {
  BF_REQUIRE(!fits.empty(), "best_fit: no fits");
  std::size_t b = 0;
  for (std::size_t i = 1; i < fits.size(); ++i) {
    if (fits[i].log_likelihood > fits[b].log_likelihood) b = i;
  }
  return b;
}

double excess_kurtosis(std::span<const double> x, double* se) {
  BF_REQUIRE(x.size() >= 4, "excess_kurtosis: need at least 4 samples");
  const double m = mean_of(x);
  double m2 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d2 = (v - m) * (v - m);
    m2 += d2;
    m4 += d2 * d2;
  }
  const double n = static_cast<double>(x.size());
  m2 /= n;
  m4 /= n;
  if (se) *se = std::sqrt(24.0 / n);
  return m4 / (m2 * m2) - 3.0;
}

std::vector<std::pair<double, double>> qq_pairs(std::span<const double> x, const dist::LocScale& d, std::size_t n) {
  BF_REQUIRE(!x.empty() && n >= 1, "qq_pairs: empty input");
  const std::vector<double> s = sorted(x);
  std::vector<std::pair<double, double>> out;
  for (std::size_t k = 1; k <= n; ++k) {
    const double p = static_cast<double>(k) / static_cast<double>(n + 1);
    out.emplace_back(d.quantile(p), quantile_sorted(s, p));
  }
  return out;
}

Histogram histogram(std::span<const double> x, double lo, double hi, std::size_t bins) {
  BF_REQUIRE(bins >= 1 && hi > lo, "histogram: need hi > lo and at least one bin");
  Histogram h;
  h.counts.assign(bins, 0.0);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(lo + (hi - lo) * static_cast<double>(b) / bins);
  for (double v : x) {
    const double t = (v - lo) / (hi - lo) * static_cast<double>(bins);
    const auto b = static_cast<std::size_t>(std::clamp(t, 0.0, static_cast<double>(bins - 1)));
    h.counts[b] += 1.0;
  }
  return h;
}

CovarianceHistograms covariance_histograms(const std::vector<std::vector<double>>& replicas, Rng& rng,
                                           std::size_t max_dims, std::size_t bins) {
  BF_REQUIRE(replicas.size() >= 2, "covariance_histograms: need at least 2 replicas");
  const std::size_t R = replicas.size(), D = replicas[0].size();
  for (const auto& r : replicas) BF_REQUIRE(r.size() == D, "covariance_histograms: ragged replicas");
  CovarianceHistograms out;
  std::vector<std::size_t> idx(D);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = D; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  idx.resize(std::min(max_dims, D));
  const std::size_t d = idx.size();
  out.dims = d;
  if (d < 2) return out;

  auto offdiag = [R, d](const std::vector<std::vector<double>>& m) {
    std::vector<double> mean(d, 0.0);
    for (const auto& row : m) {
      for (std::size_t j = 0; j < d; ++j) mean[j] += row[j] / static_cast<double>(R);
    }
    std::vector<double> cov;
    cov.reserve(d * (d - 1) / 2);
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = a + 1; b < d; ++b) {
        double c = 0.0;
        for (const auto& row : m) c += (row[a] - mean[a]) * (row[b] - mean[b]);
        cov.push_back(c / static_cast<double>(R - 1));
      }
    }
    return cov;
  };

  std::vector<std::vector<double>> emp(R, std::vector<double>(d));
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < d; ++j) emp[r][j] = replicas[r][idx[j]];
  }
  std::vector<double> var(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t r = 0; r < R; ++r) m += emp[r][j];
    m /= static_cast<double>(R);
    for (std::size_t r = 0; r < R; ++r) var[j] += (emp[r][j] - m) * (emp[r][j] - m);
    var[j] /= static_cast<double>(R - 1);
  }
  std::vector<std::vector<double>> ref(R, std::vector<double>(d));
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < d; ++j) ref[r][j] = std::sqrt(var[j]) * rng.normal();
  }
  const std::vector<double> ce = offdiag(emp), cr = offdiag(ref);
  double lim = 0.0;
  for (double v : ce) lim = std::max(lim, std::abs(v));
  for (double v : cr) lim = std::max(lim, std::abs(v));
  if (lim == 0.0) lim = 1.0;
  out.empirical = histogram(ce, -lim, lim, bins);
  out.reference = histogram(cr, -lim, lim, bins);
  return out;
}

std::array<std::size_t, 3> kde_peaks(std::span<const double> x, std::array<double, 3> factors,
                                     std::size_t max_points) {
  BF_REQUIRE(x.size() >= 2, "kde_peaks: need at least 2 samples");
  std::vector<double> pts;
  const std::size_t stride = std::max<std::size_t>(1, x.size() / max_points);
  for (std::size_t i = 0; i < x.size(); i += stride) pts.push_back(x[i]);
  const std::vector<double> s = sorted(pts);
  const double n = static_cast<double>(s.size());
  const double m = mean_of(s);
  double v = 0.0;
  for (double a : s) v += (a - m) * (a - m);
  const double sd = std::sqrt(v / (n - 1.0));
  const double iqr = quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = sd > 0.0 ? sd : 1.0;
  const double h0 = 0.9 * spread * std::pow(n, -0.2);
  const double lo = quantile_sorted(s, 0.005), hi = quantile_sorted(s, 0.995);
  constexpr std::size_t G = 256;
  std::array<std::size_t, 3> out{};
  for (std::size_t k = 0; k < 3; ++k) {
    const double h = h0 * factors[k];
    std::vector<double> dens(G, 0.0);
    for (std::size_t g = 0; g < G; ++g) {
      const double at = lo + (hi - lo) * static_cast<double>(g) / (G - 1);
      // only points within 6 bandwidths matter
      auto a = std::lower_bound(s.begin(), s.end(), at - 6.0 * h);
      auto b = std::upper_bound(s.begin(), s.end(), at + 6.0 * h);
      for (auto it = a; it != b; ++it) {
        const double z = (*it - at) / h;
        dens[g] += std::exp(-0.5 * z * z);
      }
    }
    const double mx = *std::max_element(dens.begin(), dens.end());
    std::size_t peaks = 0;
    for (std::size_t g = 1; g + 1 < G; ++g) {
      if (dens[g] > dens[g - 1] && dens[g] >= dens[g + 1] && dens[g] > 1e-3 * mx) ++peaks;
    }
    out[k] = std::max<std::size_t>(peaks, 1);
  }
  return out;
}

WeightStudyRecord study_tensor(const std::string& name, const std::vector<std::vector<double>>& replicas, Rng& rng) {
  BF_REQUIRE(replicas.size() >= 2, "weight study: need at least 2 replicas (covariance undefined)");
  WeightStudyRecord rec;
  rec.tensor = name;
  rec.replicas = replicas.size();
  std::vector<double> pooled;
  for (const auto& r : replicas) pooled.insert(pooled.end(), r.begin(), r.end());
  rec.n = pooled.size();
  rec.fits = fit_all_families(pooled);
  rec.best = best_fit(rec.fits);
  rec.kurtosis = excess_kurtosis(pooled, &rec.kurtosis_se);
  for (const auto& f : rec.fits) rec.qq.push_back(qq_pairs(pooled, f.dist));
  rec.covariance = covariance_histograms(replicas, rng);
  rec.kde_peaks = kde_peaks(pooled);
  return rec;
}

std::vector<WeightStudyRecord> weight_study(const std::vector<ParamStore>& replicas,
                                            const std::vector<std::string>& names, Rng& rng) {
  BF_REQUIRE(replicas.size() >= 2, "weight study: need at least 2 replicas (covariance undefined)");
  std::vector<WeightStudyRecord> out;
  for (const auto& n : names) {
    std::vector<std::vector<double>> vals;
    for (const auto& p : replicas) vals.push_back(p.at(n).storage());
    out.push_back(study_tensor(n, vals, rng));
  }
  return out;
}

bayes::PriorSpec improved_prior_from_study(const std::vector<WeightStudyRecord>& records,
                                           const dist::LocScale& fallback) {
  bayes::PriorSpec s;
  s.fallback = fallback;
  for (const auto& r : records) {
    // tensors that never move (zero gradient) give no usable scale
    if (r.fits.at(0).dist.scale < kDegenerateScale) continue;
    s.per_tensor[r.tensor] = r.fits.at(r.best).dist;
  }
  return s;
}

void write_study_csv(const std::filesystem::path& dir, const std::vector<WeightStudyRecord>& records) {
  std::filesystem::create_directories(dir);
  auto open = [&dir](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw FormatError("cannot write '" + (dir / name).string() + "'");
    f << std::setprecision(17);
    return f;
  };
  std::ofstream fits = open("fits.csv");
  fits << "tensor,family,loc,scale,dof,log_likelihood,best\n";
  std::ofstream qq = open("qq.csv");
  qq << "tensor,family,k,theoretical,empirical\n";
  std::ofstream cov = open("covariance.csv");
  cov << "tensor,kind,bin_lo,bin_hi,count\n";
  std::ofstream sum = open("summary.csv");
  sum << "tensor,replicas,n,best_family,excess_kurtosis,kurtosis_se,kde_peaks_half,kde_peaks_silverman,"
         "kde_peaks_double\n";
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.fits.size(); ++i) {
      const auto& d = r.fits[i].dist;
      fits << r.tensor << ',' << dist::family_name(d.family) << ',' << d.loc << ',' << d.scale << ','
           << (d.family == dist::Family::student ? d.dof : (d.family == dist::Family::cauchy ? 1.0 : 0.0)) << ','
           << r.fits[i].log_likelihood << ',' << (i == r.best ? 1 : 0) << '\n';
      for (std::size_t k = 0; k < r.qq[i].size(); ++k) {
        qq << r.tensor << ',' << dist::family_name(d.family) << ',' << k + 1 << ',' << r.qq[i][k].first << ','
           << r.qq[i][k].second << '\n';
      }
    }
    auto dump = [&](const char* kind, const Histogram& h) {
      for (std::size_t b = 0; b < h.counts.size(); ++b) {
        cov << r.tensor << ',' << kind << ',' << h.edges[b] << ',' << h.edges[b + 1] << ',' << h.counts[b] << '\n';
      }
    };
    dump("empirical", r.covariance.empirical);
    dump("reference", r.covariance.reference);
    sum << r.tensor << ',' << r.replicas << ',' << r.n << ',' << dist::family_name(r.fits[r.best].dist.family)
        << ',' << r.kurtosis << ',' << r.kurtosis_se << ',' << r.kde_peaks[0] << ',' << r.kde_peaks[1] << ','
        << r.kde_peaks[2] << '\n';
  }
}

}  // namespace bayesformer::eval
