#pragma once

#include <functional>
#include <string_view>
#include <vector>

#include "bayesformer/autodiff.hpp"
#include "bayesformer/distributions.hpp"
#include "bayesformer/rng.hpp"

// Stochastic attention rows. Every op takes the (rows, keys) score matrix or
// the deterministic attention matrix plus a RowMask, and returns sampled
// attention weights together with the summed per-row KL penalty.

namespace bayesformer::attn {

enum class AttentionMode { deterministic, gaussian, gaussian_dd, dirichlet, dirichlet_dd };

std::string_view mode_name(AttentionMode m);
AttentionMode parse_mode(std::string_view name);
bool is_gaussian(AttentionMode m);
bool is_dirichlet(AttentionMode m);
bool is_data_dependent(AttentionMode m);

/// Floor applied to every Dirichlet concentration component.
inline constexpr double kConcentrationFloor = 1e-6;

/// Returns log X for X ~ Gamma(alpha, 1).
using LogGammaSampler = std::function<double(double alpha, Rng& rng)>;

struct Sampled {
  ad::Var weights;  // same shape as the input, masked entries exactly 0
  ad::Var kl;       // (1,1) sum of per-row KL terms
};

/// Logits ~ N(scores, exp(log_var)) per valid entry, then masked softmax.
/// log_var is (1,1) (one variance per layer) or (rows, keys) (amortised).
/// KL is against a N(0, 1) prior per valid logit.
Sampled gaussian_attention(const ad::Var& scores, const ad::Var& log_var, const ad::MaskPtr& mask,
                           Rng& rng);

/// Weights ~ Dir(alpha) per row with alpha = max(a * A_i, floor) over valid
/// keys. `probs` is the deterministic attention matrix A; `sharpness` is (1,1)
/// or (rows, 1). The prior is Dir(max(prior_sharpness * A_i, floor)).
/// Gradients reach A and a through the pathwise (implicit) Gamma gradients
/// and through both arguments of the KL. A row with a single valid key is
/// deterministic with zero KL.
/// `sampler`, when given, replaces dist::sample_log_gamma for the draws.
Sampled dirichlet_attention(const ad::Var& probs, const ad::Var& sharpness, const ad::MaskPtr& mask,
                            double prior_sharpness, Rng& rng, dist::GammaGradDiagnostics* diag = nullptr,
                            const LogGammaSampler* sampler = nullptr);

// Single-row forms over plain vectors; `valid` marks unmasked keys.

struct RowSample {
  std::vector<double> weights;
  double kl = 0.0;
};

RowSample gaussian_attention_row(const std::vector<double>& mean_logits, double log_var,
                                 const std::vector<bool>& valid, Rng& rng);

/// DomainError when a <= 0 or prior_sharpness <= 0.
RowSample dirichlet_attention_row(const std::vector<double>& probs, double a, double prior_sharpness,
                                  const std::vector<bool>& valid, Rng& rng);

}  // namespace bayesformer::attn
