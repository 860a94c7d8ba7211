#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bayesformer/attention.hpp"
#include "bayesformer/autodiff.hpp"
#include "bayesformer/distributions.hpp"
#include "bayesformer/dropout.hpp"
#include "bayesformer/params.hpp"
#include "bayesformer/rng.hpp"

// Post-LN transformer encoder (sequence tasks) and vision transformer
// (image classification) on the autodiff tape, with pluggable attention.

namespace bayesformer {

using attn::AttentionMode;

enum class Task { regression, tagging, classification };

std::string_view task_name(Task t);
Task parse_task(std::string_view name);

struct ModelConfig {
  std::size_t n_blocks = 1;
  std::size_t n_heads = 1;
  std::size_t hidden = 64;
  std::size_t ffn = 128;
  std::size_t patch_size = 4;    // classification only
  std::size_t image_side = 28;   // classification only
  std::size_t max_len = 28;      // longest sequence the blocks see (incl. class token)
  Task task = Task::regression;
  AttentionMode attention = AttentionMode::deterministic;
  std::size_t input_dim = 1;     // regression: features per step; tagging: vocabulary size
  std::size_t n_outputs = 2;     // regression: 2 (mean, variance); otherwise class count
  double prior_sharpness = 10.0;  // Dirichlet prior concentration multiplier
  double ln_eps = 1e-5;

  /// ContractError on inconsistent settings.
  void validate() const;

  static ModelConfig toy();
  static ModelConfig pos(std::size_t vocab, std::size_t n_tags);
  static ModelConfig mnist();
};

/// One minibatch in model layout. Positions are stacked example-major:
/// row b * len + t is position t of example b.
struct ModelInput {
  std::size_t batch = 0;
  std::size_t len = 0;                // positions per example (patches for images)
  Tensor features;                    // regression (B*len, input_dim); images (B*len, patch^2)
  std::vector<std::size_t> tokens;    // tagging (B*len)
  std::vector<std::uint8_t> valid;    // tagging (B*len): 0 marks padding
};

struct ForwardOptions {
  Rng* rng = nullptr;  // required by stochastic attention and dropout
  const ConcreteDropoutSettings* dropout = nullptr;
  dist::GammaGradDiagnostics* gamma_diag = nullptr;
  const attn::LogGammaSampler* log_gamma_sampler = nullptr;  // Dirichlet draws; null: library sampler
  bool keep_attention = false;
};

struct ForwardResult {
  /// regression (B*len, 2) raw head output; tagging (B*len, C) logits;
  /// classification (B, C) logits read from the class token.
  ad::Var output;
  ad::Var attention_kl;  // (1,1)
  ad::Var dropout_reg;   // (1,1)
  std::vector<Tensor> attention;  // per block and head when keep_attention
};

class Transformer {
 public:
  explicit Transformer(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// N(0, 1/fan_in) weights, zero biases, unit LayerNorm gains. The image
  /// classifier head starts at zero. Variational attention parameters start
  /// at the prior (sharpness = prior sharpness, log-variance 0).
  void init(Rng& rng);

  /// Adds one concrete-dropout logit per site (FFN input, FFN hidden, head input).
  void add_dropout_sites(double init_p);
  bool has_dropout() const { return has_dropout_; }

  ForwardResult forward(ad::Tape& tape, const Bound& w, const ModelInput& in,
                        const ForwardOptions& opt = {}) const;

  /// Sequence length the blocks see for `in` (adds the class token for images).
  std::size_t block_len(const ModelInput& in) const;

  static bool is_layer_norm(const std::string& name);
  static bool is_attention_variational(const std::string& name);
  static bool is_dropout(const std::string& name);

  /// Tensors eligible for weight-space inference (all but LayerNorm affine,
  /// attention posterior parameters and dropout logits).
  std::vector<std::string> weight_names() const;
  /// Projections of the first attention layer.
  std::vector<std::string> first_attention_names() const;
  std::vector<std::string> head_names() const;

 private:
  ad::Var embed(ad::Tape& tape, const Bound& w, const ModelInput& in) const;
  ad::Var block(std::size_t i, ad::Tape& tape, const Bound& w, const ad::Var& x, std::size_t len,
                const ad::MaskPtr& mask, const ForwardOptions& opt, ForwardResult& res) const;
  ad::Var dropout_site(const std::string& site, const ad::Var& x, const ad::Var& next_weight,
                       const Bound& w, const ForwardOptions& opt, ForwardResult& res) const;

  ModelConfig cfg_;
  ParamStore params_;
  bool has_dropout_ = false;
  double dropout_init_p_ = 0.1;
};

/// softmax(QK^T / sqrt(d_k)) V per example block, or a stochastic variant.
struct AttentionSettings {
  AttentionMode mode = AttentionMode::deterministic;
  ad::Var log_var;     // gaussian modes
  ad::Var sharpness;   // dirichlet modes, already positive
  double prior_sharpness = 10.0;
  Rng* rng = nullptr;
  dist::GammaGradDiagnostics* gamma_diag = nullptr;
  const attn::LogGammaSampler* log_gamma_sampler = nullptr;
};

struct AttentionOut {
  ad::Var context;
  ad::Var kl;
  ad::Var weights;
};

AttentionOut scaled_dot_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, std::size_t len,
                                  const ad::MaskPtr& mask, const AttentionSettings& s);

ad::MaskPtr causal_mask(std::size_t batch, std::size_t len);
ad::MaskPtr padding_mask(std::size_t batch, std::size_t len, const std::vector<std::uint8_t>& valid);
ad::MaskPtr full_mask(std::size_t batch, std::size_t len);

/// (len, hidden) sinusoidal encodings.
Tensor sinusoidal_positions(std::size_t len, std::size_t hidden);

/// 28x28 (or side x side) image -> (n_patches, patch^2); patches row-major,
/// pixels row-major within a patch. ContractError when side % patch != 0.
Tensor patchify(const Tensor& image, std::size_t side, std::size_t patch);

struct GaussianOutputs {
  ad::Var mean;
  ad::Var variance;  // softplus(raw) + 1e-6
};
GaussianOutputs regression_head(const ad::Var& raw);
inline constexpr double kVarianceFloor = 1e-6;

/// Sum over rows of weight_r * (0.5 ln(2 pi v_r) + (y_r - m_r)^2 / (2 v_r)).
ad::Var gaussian_nll(const ad::Var& raw, const Tensor& target, const Tensor& weight);

/// Sum over rows of -weight_r * log softmax(logits_r)[label_r].
ad::Var cross_entropy(const ad::Var& logits, const std::vector<std::size_t>& labels, const Tensor& weight);

}  // namespace bayesformer
