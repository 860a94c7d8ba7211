#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "bayesformer/bayes.hpp"
#include "bayesformer/data.hpp"
#include "bayesformer/model.hpp"

// Predictive distributions and the evaluation metrics built on them.

namespace bayesformer::eval {

struct GaussianPrediction {
  double mean = 0.0;
  double var = 1.0;
};

/// Per test item, the S per-sample predictions plus what they are scored against.
struct PredictiveSet {
  Task task = Task::regression;
  std::size_t samples = 0;
  std::vector<std::vector<std::vector<double>>> probs;  // item -> sample -> class probabilities
  std::vector<std::vector<GaussianPrediction>> gauss;   // item -> sample
  std::vector<std::size_t> labels;                      // classification / tagging
  std::vector<double> targets;                          // regression: realised next value
  std::vector<std::size_t> sequence;                    // regression: sequence index in the split
  std::vector<std::size_t> step;                        // regression: generated-step index

  std::size_t size() const { return task == Task::regression ? gauss.size() : probs.size(); }
  /// ContractError on ragged sample counts or invalid probability vectors.
  void validate() const;
};

/// Mean of the sample probability vectors.
std::vector<double> mixture_probs(const std::vector<std::vector<double>>& samples);
/// Moment-matched mixture: mean of means; mean of variances plus variance of means.
GaussianPrediction mixture_gaussian(const std::vector<GaussianPrediction>& samples);

/// Raw network outputs for S predictive samples of one batch.
using OutputSampler = std::function<std::vector<Tensor>(const data::Batch&, std::size_t S, Rng&)>;

/// Runs the sampler over a split. Regression items are the scored positions,
/// tagging items the real tokens, classification items the images.
/// max_items = 0 keeps the whole split.
PredictiveSet collect_predictive(const OutputSampler& sampler, const data::DataBundle& data, data::Split split,
                                 std::size_t S, Rng& rng, std::size_t batch_size = 32, std::size_t max_examples = 0);

// ---- samplers ---------------------------------------------------------------------

/// Forward passes of a point model; stochastic attention and (if `dropout`)
/// concrete dropout are resampled per draw. A fully deterministic model is
/// evaluated once and repeated.
OutputSampler point_sampler(const Transformer& model, const ConcreteDropoutSettings* dropout = nullptr);
/// Fresh weight draw from the variational posterior for every sample.
OutputSampler vi_sampler(const Transformer& model, const bayes::VariationalState& vs);
/// Linearised Laplace with perturbations drawn once (S of them) and shared
/// by every test item.
OutputSampler laplace_sampler(const Transformer& model, const bayes::LaplaceState& st, std::size_t S, Rng& rng);
/// One sample per member, ignoring S.
OutputSampler ensemble_sampler(const std::vector<const Transformer*>& members);

// ---- metrics -------------------------------------------------------------------

struct EceBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;
  double confidence = 0.0;
};

struct ClassificationMetrics {
  double log_likelihood = 0.0;  // mean log probability of the true label
  double accuracy = 0.0;
  double f1 = 0.0;              // support-weighted one-vs-rest F1
  double ece = 0.0;
  std::vector<EceBin> bins;
  std::size_t n = 0;
};

/// probs are mixture predictive vectors. ContractError for an empty set or a
/// label out of range.
ClassificationMetrics metrics_classification(const std::vector<std::vector<double>>& probs,
                                             const std::vector<std::size_t>& labels, std::size_t n_bins = 15);
ClassificationMetrics metrics_classification(const PredictiveSet& p, std::size_t n_bins = 15);

struct RegressionMetrics {
  double log_likelihood = 0.0;  // mean over sequences of the summed per-step log density
  double ll_per_token = 0.0;
  double mse = 0.0;             // predicted mean vs realised next value
  double expected_mse = 0.0;    // predicted mean vs true conditional mean
  double variance_mse = 0.0;    // predicted variance vs true conditional variance
  double variance_mse_residual = 0.0;  // predicted variance vs squared realised residual
  std::size_t sequences = 0;
};

/// per_sequence[i][t] is the mixture prediction for generated step t of seqs[i].
/// ContractError when the generator metadata is missing or lengths disagree.
RegressionMetrics metrics_regression(const std::vector<std::vector<GaussianPrediction>>& per_sequence,
                                     const std::vector<data::ToySequence>& seqs);
RegressionMetrics metrics_regression(const PredictiveSet& p, const std::vector<data::ToySequence>& seqs);

double entropy(const std::vector<double>& probs);

/// Mean predictive entropy (nats) over `batch` for each of n_draws prior
/// draws. With a weight prior every weight tensor is drawn from it and
/// attention is deterministic. Without one (prior == nullptr) the weights are
/// re-initialised per draw, the zero classifier head included (it gets the
/// dense N(0, 1/hidden) initialisation), and the model's attention mode
/// supplies the remaining randomness; attention parameters start at their
/// prior.
std::vector<double> prior_predictive_entropy(const ModelConfig& cfg, const bayes::PriorSpec* prior,
                                             const data::Batch& batch, std::size_t n_draws, Rng& rng);

}  // namespace bayesformer::eval
