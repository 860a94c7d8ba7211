#include "bayesformer/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "bayesformer/errors.hpp"
#include "bayesformer/optim.hpp"

namespace bayesformer {

namespace {

struct Clock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

void check_gradients(const Leaves& leaves, const ad::Gradients& g, std::size_t epoch, std::size_t step,
                     double last_loss) {
  for (const auto& leaf : leaves) {
    if (!g.has(leaf.var)) continue;
    if (!g.of(leaf.var).all_finite()) {
      throw DivergenceError("non-finite gradient for '" + leaf.key + "' at epoch " + std::to_string(epoch) +
                                ", step " + std::to_string(step),
                            epoch, step, last_loss);
    }
  }
}

// Runs the shared epoch/step loop. step_fn returns the loss value of one step.
template <class StepFn, class ValFn, class SnapFn, class RestoreFn>
TrainReport run_loop(const data::DataBundle& data, const TrainSettings& s, std::size_t d_model, StepFn step_fn,
                     ValFn val_fn, SnapFn snapshot, RestoreFn restore, const EpochHook& hook) {
  BF_REQUIRE(s.epochs >= 1 && s.batch_size >= 1, "train: epochs and batch size must be >= 1");
  const std::size_t n = data.size(data::Split::train);
  BF_REQUIRE(n >= 1, "train: empty training split");
  Clock clock;
  data::BatchIterator it(n, s.batch_size, s.seed ^ 0x5DEECE66DULL);
  const std::size_t total = s.epochs * it.batches_per_epoch();
  TrainReport rep;
  rep.warmup_used = effective_warmup(s.warmup, total);

  double last = 0.0;
  double best_val = INFINITY;
  std::size_t since_best = 0;
  for (std::size_t e = 0; e < s.epochs; ++e) {
    double acc = 0.0;
    std::size_t nb = 0;
    for (const auto& idx : it.epoch(e)) {
      ++rep.steps;
      const double lr = s.use_sgd ? s.sgd_lr : lr_schedule(rep.steps, d_model, rep.warmup_used, s.base_lr);
      double loss;
      try {
        loss = step_fn(data.batch(data::Split::train, idx), rep.steps, total, lr, e, last);
      } catch (const DivergenceError&) {
        throw;
      } catch (const NumericError& err) {
        throw DivergenceError(std::string(err.what()) + " (epoch " + std::to_string(e) + ", step " +
                                  std::to_string(rep.steps) + ", last finite loss " + std::to_string(last) + ")",
                              e, rep.steps, last);
      }
      last = loss;
      acc += loss;
      ++nb;
    }
    rep.train_loss.push_back(acc / static_cast<double>(nb));
    if (hook) hook(e, rep.train_loss.back());
    if (s.val_every > 0 && (e + 1) % s.val_every == 0 && data.size(data::Split::val) > 0) {
      const double v = val_fn();
      rep.val_nll.push_back(v);
      if (s.early_stopping) {
        if (v < best_val) {
          best_val = v;
          rep.best_epoch = e;
          since_best = 0;
          snapshot();
        } else if (++since_best >= s.patience) {
          break;
        }
      }
    }
  }
  if (s.early_stopping && std::isfinite(best_val)) restore();
  rep.seconds = clock.seconds();
  return rep;
}

}  // namespace

double kl_anneal_weight(std::size_t step, std::size_t total, double fraction, bool enabled) {
  if (!enabled || fraction <= 0.0) return 1.0;
  const double ramp = fraction * static_cast<double>(total);
  if (ramp <= 0.0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / ramp);
}

double mean_nll(const Transformer& model, const Bound& w, const data::DataBundle& data, data::Split split,
                Rng& rng, std::size_t batch_size) {
  const std::size_t n = data.size(split);
  BF_REQUIRE(n >= 1, "mean_nll: empty split");
  ForwardOptions opt;
  opt.rng = &rng;
  double total = 0.0;
  for (std::size_t b0 = 0; b0 < n; b0 += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b0; i < std::min(n, b0 + batch_size); ++i) idx.push_back(i);
    ad::Tape tape;
    // rebinding keeps the caller's tape untouched
    Bound local;
    for (const auto& name : model.params().names()) local.set(name, tape.constant(w(name).value()));
    total += bayes::batch_loss(tape, model, local, data.batch(split, idx), opt).nll.item();
  }
  return total / static_cast<double>(n);
}

TrainReport train_point(Transformer& model, const data::DataBundle& data, const TrainSettings& s,
                        const EpochHook& hook) {
  Rng rng(s.seed);
  Adam adam;
  ConcreteDropoutSettings cds;
  cds.n_train = static_cast<double>(data.size(data::Split::train));
  const std::size_t d_model = s.d_model ? s.d_model : model.config().hidden;
  ParamStore best = model.params();

  auto step = [&](const data::Batch& batch, std::size_t stepno, std::size_t, double lr, std::size_t e,
                  double last) {
    ad::Tape tape;
    Leaves leaves;
    Bound w = bayes::bind_model(tape, model, &leaves);
    ForwardOptions opt;
    opt.rng = &rng;
    opt.dropout = model.has_dropout() ? &cds : nullptr;
    bayes::BatchLoss bl = bayes::batch_loss(tape, model, w, batch, opt);
    ad::Var loss = ad::scale(ad::add(bl.nll, bl.attention_kl), 1.0 / static_cast<double>(batch.examples));
    loss = ad::add(loss, bl.dropout_reg);
    ad::Gradients g = tape.backward(loss);
    check_gradients(leaves, g, e, stepno, last);
    if (s.use_sgd) {
      sgd_step(leaves, g, lr, s.sgd_clip);
    } else {
      adam.step(leaves, g, lr);
    }
    return loss.item();
  };
  auto val = [&]() {
    ad::Tape tape;
    Bound w = bayes::bind_model(tape, model, nullptr, false);
    Rng vr(s.seed + 17);
    return mean_nll(model, w, data, data::Split::val, vr);
  };
  return run_loop(
      data, s, d_model, step, val, [&] { best = model.params(); }, [&] { model.params() = best; }, hook);
}

TrainReport train_vi(Transformer& model, bayes::VariationalState& vs, const data::DataBundle& data,
                     const TrainSettings& s, const EpochHook& hook) {
  Rng rng(s.seed);
  Adam adam;
  const std::size_t n_train = data.size(data::Split::train);
  const std::size_t d_model = s.d_model ? s.d_model : model.config().hidden;
  ParamStore best_model = model.params(), best_loc = vs.loc, best_rho = vs.rho;

  auto step = [&](const data::Batch& batch, std::size_t stepno, std::size_t total, double lr, std::size_t e,
                  double last) {
    ad::Tape tape;
    bayes::VariationalBinding b = bayes::bind_variational(tape, model, vs);
    const double klw = kl_anneal_weight(stepno, total, s.anneal_fraction, s.kl_anneal);
    bayes::ElboTerms t = bayes::elbo(tape, model, b, vs, batch, n_train, rng, s.n_mc, klw);
    ad::Gradients g = tape.backward(t.loss);
    check_gradients(b.leaves, g, e, stepno, last);
    adam.step(b.leaves, g, lr);
    return t.loss.item();
  };
  auto val = [&]() {
    ad::Tape tape;
    bayes::VariationalBinding b = bayes::bind_variational(tape, model, vs, false);
    Rng vr(s.seed + 17);
    return mean_nll(model, bayes::mean_weights(tape, b), data, data::Split::val, vr);
  };
  auto snap = [&] {
    best_model = model.params();
    best_loc = vs.loc;
    best_rho = vs.rho;
  };
  auto restore = [&] {
    model.params() = best_model;
    vs.loc = best_loc;
    vs.rho = best_rho;
  };
  return run_loop(data, s, d_model, step, val, snap, restore, hook);
}

}  // namespace bayesformer
