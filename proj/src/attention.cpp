#include "bayesformer/attention.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <memory>
#include <string>

#include "bayesformer/errors.hpp"
#include "bayesformer/special.hpp"

namespace bayesformer::attn {

using ad::MaskPtr;
using ad::NodeId;
using ad::Tape;
using ad::Var;

std::string_view mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::deterministic: return "deterministic";
    case AttentionMode::gaussian: return "gaussian";
    case AttentionMode::gaussian_dd: return "gaussian-dd";
    case AttentionMode::dirichlet: return "dirichlet";
    case AttentionMode::dirichlet_dd: return "dirichlet-dd";
  }
  return "?";
}

AttentionMode parse_mode(std::string_view name) {
  std::string s(name);
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::replace(s.begin(), s.end(), '_', '-');
  for (auto m : {AttentionMode::deterministic, AttentionMode::gaussian, AttentionMode::gaussian_dd,
                 AttentionMode::dirichlet, AttentionMode::dirichlet_dd}) {
    if (s == mode_name(m)) return m;
  }
  throw ContractError("unknown attention mode '" + std::string(name) + "'");
}

bool is_gaussian(AttentionMode m) {
  return m == AttentionMode::gaussian || m == AttentionMode::gaussian_dd;
}
bool is_dirichlet(AttentionMode m) {
  return m == AttentionMode::dirichlet || m == AttentionMode::dirichlet_dd;
}
bool is_data_dependent(AttentionMode m) {
  return m == AttentionMode::gaussian_dd || m == AttentionMode::dirichlet_dd;
}

namespace {

void check_mask(const Tensor& x, const MaskPtr& mask) {
  BF_REQUIRE(mask != nullptr, "attention: mask is required");
  BF_REQUIRE(mask->rows == x.rows() && mask->cols == x.cols(),
             "attention: mask is " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                 " but scores are " + x.shape_string());
}

Tensor mask_tensor(const ad::RowMask& m) {
  Tensor t = Tensor::matrix(m.rows, m.cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = m.valid[i] ? 1.0 : 0.0;
  return t;
}

}  // namespace

Sampled gaussian_attention(const Var& scores, const Var& log_var, const MaskPtr& mask, Rng& rng) {
  const Tensor& s = scores.value();
  check_mask(s, mask);
  const bool per_entry = log_var.value().same_shape(s);
  BF_REQUIRE(per_entry || log_var.value().size() == 1,
             "gaussian_attention: log_var must be (1,1) or match scores " + s.shape_string());
  Tape& t = *scores.tape();
  Tensor eps = Tensor::matrix(s.rows(), s.cols());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    if (mask->valid[i]) eps[i] = rng.normal();
  }
  const Var sigma = ad::exp(ad::scale(log_var, 0.5));
  const Var logits = ad::add(scores, ad::mul(sigma, t.constant(std::move(eps))));
  const Var weights = ad::masked_softmax_rows(logits, mask);
  // 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2) per valid logit
  const Var var_part = ad::sub(ad::add_scalar(ad::exp(log_var), -1.0), log_var);
  const Var per = ad::scale(ad::add(ad::square(scores), var_part), 0.5);
  const Var kl = ad::weighted_sum(per, mask_tensor(*mask));
  return {weights, kl};
}

namespace {

struct DirichletRowState {
  std::vector<std::size_t> keys;  // valid key columns
  std::vector<double> alpha;
  std::vector<double> log_gamma;
  std::vector<double> weights;
  std::vector<bool> alpha_floored;
  std::vector<bool> beta_floored;
  std::vector<double> d_p;  // dKL/dalpha
  std::vector<double> d_q;  // dKL/dbeta
};

struct DirichletState {
  std::vector<DirichletRowState> rows;
  double prior_sharpness = 0.0;
  dist::GammaGradDiagnostics* diag = nullptr;
};

}  // namespace

Sampled dirichlet_attention(const Var& probs, const Var& sharpness, const MaskPtr& mask,
                            double prior_sharpness, Rng& rng, dist::GammaGradDiagnostics* diag,
                            const LogGammaSampler* sampler) {
  const Tensor& A = probs.value();
  check_mask(A, mask);
  const Tensor& a = sharpness.value();
  const bool per_row = a.size() != 1;
  BF_REQUIRE(!per_row || (a.rows() == A.rows() && a.cols() == 1),
             "dirichlet_attention: sharpness must be (1,1) or (rows,1)");
  if (!(prior_sharpness > 0.0) || !std::isfinite(prior_sharpness)) {
    throw DomainError("dirichlet_attention: prior sharpness must be > 0");
  }
  Tape& t = *probs.tape();
  const std::size_t R = A.rows(), C = A.cols();
  auto st = std::make_shared<DirichletState>();
  st->prior_sharpness = prior_sharpness;
  st->diag = diag;
  st->rows.resize(R);
  Tensor w = Tensor::matrix(R, C);
  double kl_total = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    const double ar = per_row ? a[r] : a[0];
    if (!(ar > 0.0)) throw DomainError("dirichlet_attention: sharpness must be > 0, got " + std::to_string(ar));
    DirichletRowState& row = st->rows[r];
    for (std::size_t c = 0; c < C; ++c) {
      if ((*mask)(r, c)) row.keys.push_back(c);
    }
    if (row.keys.empty()) throw ContractError("dirichlet_attention: row " + std::to_string(r) + " has no valid position");
    if (row.keys.size() == 1) {
      w.at(r, row.keys[0]) = 1.0;
      continue;
    }
    const std::size_t K = row.keys.size();
    dist::DirichletParams p, q;
    p.alpha.resize(K);
    q.alpha.resize(K);
    row.alpha_floored.resize(K);
    row.beta_floored.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      const double Ak = A.at(r, row.keys[k]);
      const double al = ar * Ak, be = prior_sharpness * Ak;
      row.alpha_floored[k] = !(al > kConcentrationFloor);
      row.beta_floored[k] = !(be > kConcentrationFloor);
      p.alpha[k] = row.alpha_floored[k] ? kConcentrationFloor : al;
      q.alpha[k] = row.beta_floored[k] ? kConcentrationFloor : be;
    }
    row.log_gamma.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      row.log_gamma[k] = sampler ? (*sampler)(p.alpha[k], rng) : dist::sample_log_gamma(p.alpha[k], rng);
    }
    double m = *std::max_element(row.log_gamma.begin(), row.log_gamma.end());
    double s = 0.0;
    row.weights.resize(K);
    for (std::size_t k = 0; k < K; ++k) s += (row.weights[k] = std::exp(row.log_gamma[k] - m));
    for (std::size_t k = 0; k < K; ++k) {
      row.weights[k] /= s;
      w.at(r, row.keys[k]) = row.weights[k];
    }
    kl_total += dist::kl_dirichlet(p, q);
    const auto g = dist::kl_dirichlet_grad(p, q);
    row.d_p = g.d_p;
    row.d_q = g.d_q;
    row.alpha = std::move(p.alpha);
  }
  const NodeId iA = probs.id(), ia = sharpness.id();

  const Var weights = t.push(
      std::move(w), {probs, sharpness},
      [st, iA, ia, per_row](Tape& tp, const Tensor& g) {
        const Tensor& Av = tp.value(iA);
        const Tensor& av = tp.value(ia);
        const bool wantA = tp.requires_grad(iA), wanta = tp.requires_grad(ia);
        Tensor* gA = wantA ? &tp.grad(iA) : nullptr;
        Tensor* ga = wanta ? &tp.grad(ia) : nullptr;
        for (std::size_t r = 0; r < st->rows.size(); ++r) {
          const DirichletRowState& row = st->rows[r];
          const std::size_t K = row.keys.size();
          if (K < 2) continue;
          const double ar = per_row ? av[r] : av[0];
          double gbar = 0.0;
          for (std::size_t k = 0; k < K; ++k) gbar += g.at(r, row.keys[k]) * row.weights[k];
          for (std::size_t k = 0; k < K; ++k) {
            if (row.alpha_floored[k]) continue;
            const double dlog = dist::implicit_log_gamma_grad(row.log_gamma[k], row.alpha[k], st->diag);
            const double g_alpha = row.weights[k] * dlog * (g.at(r, row.keys[k]) - gbar);
            if (gA) gA->at(r, row.keys[k]) += g_alpha * ar;
            if (ga) (*ga)[per_row ? r : 0] += g_alpha * Av.at(r, row.keys[k]);
          }
        }
      },
      "dirichlet_attention");

  const Var kl = t.push(
      Tensor::scalar(kl_total), {probs, sharpness},
      [st, iA, ia, per_row](Tape& tp, const Tensor& g) {
        const Tensor& Av = tp.value(iA);
        const Tensor& av = tp.value(ia);
        Tensor* gA = tp.requires_grad(iA) ? &tp.grad(iA) : nullptr;
        Tensor* ga = tp.requires_grad(ia) ? &tp.grad(ia) : nullptr;
        const double g0 = g[0];
        for (std::size_t r = 0; r < st->rows.size(); ++r) {
          const DirichletRowState& row = st->rows[r];
          if (row.keys.size() < 2) continue;
          const double ar = per_row ? av[r] : av[0];
          for (std::size_t k = 0; k < row.keys.size(); ++k) {
            const std::size_t c = row.keys[k];
            if (!row.alpha_floored[k]) {
              if (gA) gA->at(r, c) += g0 * row.d_p[k] * ar;
              if (ga) (*ga)[per_row ? r : 0] += g0 * row.d_p[k] * Av.at(r, c);
            }
            if (!row.beta_floored[k] && gA) gA->at(r, c) += g0 * row.d_q[k] * st->prior_sharpness;
          }
        }
      },
      "dirichlet_attention_kl");
  return {weights, kl};
}

namespace {

ad::MaskPtr row_mask(const std::vector<bool>& valid) {
  auto m = std::make_shared<ad::RowMask>();
  m->rows = 1;
  m->cols = valid.size();
  m->valid.assign(valid.begin(), valid.end());
  return m;
}

}  // namespace

RowSample gaussian_attention_row(const std::vector<double>& mean_logits, double log_var,
                                 const std::vector<bool>& valid, Rng& rng) {
  BF_REQUIRE(mean_logits.size() == valid.size(), "gaussian_attention_row: mask size mismatch");
  Tape t;
  const auto out = gaussian_attention(t.constant(Tensor::row(mean_logits)), t.constant(log_var),
                                      row_mask(valid), rng);
  const auto& v = out.weights.value().storage();
  return {std::vector<double>(v.begin(), v.end()), out.kl.item()};
}

RowSample dirichlet_attention_row(const std::vector<double>& probs, double a, double prior_sharpness,
                                  const std::vector<bool>& valid, Rng& rng) {
  BF_REQUIRE(probs.size() == valid.size(), "dirichlet_attention_row: mask size mismatch");
  if (!(a > 0.0)) throw DomainError("dirichlet_attention_row: sharpness must be > 0");
  Tape t;
  const auto out = dirichlet_attention(t.constant(Tensor::row(probs)), t.constant(a), row_mask(valid),
                                       prior_sharpness, rng);
  const auto& v = out.weights.value().storage();
  return {std::vector<double>(v.begin(), v.end()), out.kl.item()};
}

}  // namespace bayesformer::attn
