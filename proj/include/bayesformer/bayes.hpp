#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "bayesformer/data.hpp"
#include "bayesformer/distributions.hpp"
#include "bayesformer/model.hpp"
#include "bayesformer/optim.hpp"
#include "bayesformer/params.hpp"

// Weight-space inference baselines: mean-field VI with location-scale
// priors/posteriors, linearised Laplace with a diagonal GGN, and the loss
// plumbing shared by every training method.

namespace bayesformer::bayes {

// ---- losses ----------------------------------------------------------------

struct BatchLoss {
  ad::Var nll;           // summed over examples (scored positions / real tokens)
  ad::Var attention_kl;  // summed over attention rows of the batch
  ad::Var dropout_reg;
  ad::Var output;
};

BatchLoss batch_loss(ad::Tape& tape, const Transformer& model, const Bound& w, const data::Batch& batch,
                     const ForwardOptions& opt);

/// Binds every model tensor as a trainable leaf (constant when !trainable).
Bound bind_model(ad::Tape& tape, Transformer& model, Leaves* leaves, bool trainable = true,
                 const std::string& key_prefix = "model/");

// ---- priors -------------------------------------------------------------------

/// Per-tensor prior; tensors without an entry use `fallback`.
struct PriorSpec {
  dist::LocScale fallback;
  std::map<std::string, dist::LocScale> per_tensor;

  const dist::LocScale& for_tensor(const std::string& name) const;
  /// JSON with doubles printed round-trip exact.
  std::string to_json() const;
  static PriorSpec from_json(const std::string& text);
  /// N(0, 1/hidden) in variance (or the given family with that scale).
  static PriorSpec default_for(const ModelConfig& cfg, dist::Family family = dist::Family::gaussian,
                               double scale = 0.0);
};

// ---- variational state ------------------------------------------------------------

enum class Scope { all, first_attention };

struct VariationalState {
  dist::Family family = dist::Family::gaussian;
  double dof = 4.0;  // Student posterior
  Scope scope = Scope::all;
  PriorSpec prior;
  std::vector<std::string> names;  // tensors with a posterior
  ParamStore loc;
  ParamStore rho;  // sigma = softplus(rho)
};

/// Posterior locations copied from the model's current tensors; sigma starts
/// at init_sigma_frac times each tensor's prior scale.
VariationalState init_variational(const Transformer& model, const PriorSpec& prior, dist::Family family,
                                  Scope scope, double init_sigma_frac = 0.01);

/// Variational parameters bound on one tape, reused by every MC draw.
struct VariationalBinding {
  std::map<std::string, ad::Var> loc, sigma;
  Bound base;  // out-of-scope tensors
  Leaves leaves;
};

/// Out-of-scope tensors are trainable point estimates for Scope::all
/// (LayerNorm affine and attention/dropout extras) and frozen constants for
/// Scope::first_attention.
VariationalBinding bind_variational(ad::Tape& tape, Transformer& model, VariationalState& vs,
                                    bool trainable = true);

/// One reparameterised weight draw w = loc + sigma * eps (eps by inverse CDF
/// for non-Gaussian families). If mc_kl is given it receives the
/// single-sample log q(w) - log p(w) summed over the tensors whose KL has no
/// closed form (see analytic_kl).
Bound draw_weights(ad::Tape& tape, const VariationalBinding& b, const VariationalState& vs, Rng& rng,
                   ad::Var* mc_kl = nullptr);

/// Posterior mean weights (no noise).
Bound mean_weights(ad::Tape& tape, const VariationalBinding& b);

/// Sum over entries of log density of x under loc + scale * standard(family).
/// loc and scale are (1,1) or shaped like x.
ad::Var log_density_sum(const ad::Var& x, const ad::Var& loc, const ad::Var& scale, dist::Family f, double dof);

/// Sum of KL(N(mu, sigma^2) || N(m, s^2)) over entries.
ad::Var gaussian_kl_sum(const ad::Var& mu, const ad::Var& sigma, double m, double s);

/// True when prior and posterior of `name` are both Gaussian.
bool analytic_kl(const VariationalState& vs, const std::string& name);

struct ElboTerms {
  /// (n_train / B * mean_s [NLL + attention KL] + kl_weight * KL) / n_train
  ad::Var loss;
  double kl = 0.0;  // weight-space KL estimate
  double nll = 0.0; // batch NLL averaged over MC draws
};

ElboTerms elbo(ad::Tape& tape, const Transformer& model, const VariationalBinding& b, const VariationalState& vs,
               const data::Batch& batch, std::size_t n_train, Rng& rng, std::size_t n_mc = 1,
               double kl_weight = 1.0);

// ---- Laplace -------------------------------------------------------------------

enum class LaplaceScope { last_layer, all };

/// How the loss curvature with respect to the network output is formed.
enum class OutputKind {
  gaussian_mean_var,  // columns (mean, raw variance) of the regression head
  softmax,            // logits with cross-entropy
  unit_gaussian,      // single column, fixed unit variance
};

struct LaplaceState {
  LaplaceScope scope = LaplaceScope::last_layer;
  double prior_precision = 1.0;
  std::vector<std::string> names;
  std::map<std::string, Tensor> curvature;  // diagonal GGN per in-scope tensor
  std::size_t clamped = 0;                  // negative diagonal entries set to 0
  std::size_t items = 0;

  /// 1 / (curvature + prior precision).
  Tensor posterior_variance(const std::string& name) const;
};

OutputKind output_kind(Task t);

/// Adds sum_rows weight_r * J_r^T H_r J_r (diagonal only) for `output` into
/// acc (one tensor per leaf). Returns the number of clamped entries.
std::size_t accumulate_diag_ggn(ad::Tape& tape, const ad::Var& output, const Tensor& row_weights, OutputKind kind,
                                const Leaves& leaves, std::vector<Tensor>& acc);

/// Diagonal GGN over the chosen scope, one example at a time. max_items = 0
/// uses every example.
LaplaceState fit_laplace(const Transformer& model, const std::vector<data::Batch>& items, LaplaceScope scope,
                         double prior_precision, std::size_t max_items = 0);

/// Weight perturbations delta_s ~ N(0, posterior variance), one per sample.
std::vector<std::map<std::string, Tensor>> laplace_perturbations(const LaplaceState& st, std::size_t n_samples,
                                                                 Rng& rng);

/// Linearised outputs f(theta*) + J delta_s for each perturbation, for a
/// single-example batch. Rows with zero weight keep the MAP output.
std::vector<Tensor> laplace_outputs(const Transformer& model, const LaplaceState& st, const data::Batch& item,
                                    const std::vector<std::map<std::string, Tensor>>& deltas);

}  // namespace bayesformer::bayes
