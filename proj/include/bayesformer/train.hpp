#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bayesformer/bayes.hpp"
#include "bayesformer/data.hpp"
#include "bayesformer/model.hpp"

// Minibatch training loops: point estimates (MLE, variational attention,
// concrete dropout) and mean-field VI over weights.

namespace bayesformer {

struct TrainSettings {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double base_lr = 1.0;
  std::size_t warmup = 4000;  // nominal; see effective_warmup
  std::size_t d_model = 0;    // 0: the model's hidden size
  std::uint64_t seed = 0;     // shuffling and stochastic layers
  bool kl_anneal = true;      // VI: linear ramp of the KL weight
  double anneal_fraction = 0.1;
  std::size_t n_mc = 1;       // VI samples per step
  bool use_sgd = false;       // plain SGD with a constant rate instead of Adam
  double sgd_lr = 0.002;
  double sgd_clip = 5.0;      // global gradient-norm clip for SGD; 0 disables
  bool early_stopping = false;
  std::size_t patience = 10;
  std::size_t val_every = 1;  // epochs between validation passes; 0 disables
};

struct TrainReport {
  std::vector<double> train_loss;  // mean training objective per epoch
  std::vector<double> val_nll;     // mean validation NLL per example, per validation pass
  std::size_t steps = 0;
  std::size_t warmup_used = 0;
  std::size_t best_epoch = 0;  // zero-based; early stopping only
  double seconds = 0.0;
};

/// Called after every epoch with (epoch, mean training loss).
using EpochHook = std::function<void(std::size_t, double)>;

/// Trains every model tensor on mean NLL per example plus (per example)
/// attention KL and the concrete-dropout regulariser when present.
/// DivergenceError on a non-finite loss or gradient.
TrainReport train_point(Transformer& model, const data::DataBundle& data, const TrainSettings& s,
                        const EpochHook& hook = {});

/// Mean-field VI on the ELBO (per training example). KL weight ramps from 0
/// to 1 over the first anneal_fraction of steps when kl_anneal is set.
TrainReport train_vi(Transformer& model, bayes::VariationalState& vs, const data::DataBundle& data,
                     const TrainSettings& s, const EpochHook& hook = {});

/// Mean NLL per example of `split` under one forward pass per batch
/// (stochastic layers sampled with rng).
double mean_nll(const Transformer& model, const Bound& w, const data::DataBundle& data, data::Split split,
                Rng& rng, std::size_t batch_size = 64);

/// Linear KL-weight ramp: min(1, step / (fraction * total)); 1 when disabled.
double kl_anneal_weight(std::size_t step, std::size_t total, double fraction, bool enabled);

}  // namespace bayesformer
