#include "bayesformer/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <string>

#include "bayesformer/errors.hpp"

namespace bayesformer::eval {

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

Bound bind_constants(ad::Tape& tape, const ParamStore& p) {
  Bound b;
  for (const auto& n : p.names()) b.set(n, tape.constant(p.at(n)));
  return b;
}

std::vector<double> softmax_row(const Tensor& logits, std::size_t r) {
  const std::size_t c = logits.cols();
  std::vector<double> p(logits.data() + r * c, logits.data() + (r + 1) * c);
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (auto& v : p) z += (v = std::exp(v - mx));
  for (auto& v : p) v /= z;
  return p;
}

}  // namespace

void PredictiveSet::validate() const {
  if (task == Task::regression) {
    BF_REQUIRE(targets.size() == gauss.size() && sequence.size() == gauss.size() && step.size() == gauss.size(),
               "PredictiveSet: regression metadata size mismatch");
    for (const auto& item : gauss) {
      BF_REQUIRE(item.size() == samples, "PredictiveSet: ragged sample count");
      for (const auto& g : item) BF_REQUIRE(g.var > 0.0 && std::isfinite(g.mean), "PredictiveSet: bad Gaussian");
    }
    return;
  }
  BF_REQUIRE(labels.size() == probs.size(), "PredictiveSet: one label per item");
  for (const auto& item : probs) {
    BF_REQUIRE(item.size() == samples, "PredictiveSet: ragged sample count");
    for (const auto& p : item) {
      double s = 0.0;
      for (double v : p) {
        BF_REQUIRE(v >= 0.0, "PredictiveSet: negative probability");
        s += v;
      }
      BF_REQUIRE(std::abs(s - 1.0) < 1e-9, "PredictiveSet: probabilities do not sum to 1");
    }
  }
}

std::vector<double> mixture_probs(const std::vector<std::vector<double>>& samples) {
  BF_REQUIRE(!samples.empty(), "mixture_probs: no samples");
  std::vector<double> m(samples[0].size(), 0.0);
  for (const auto& s : samples) {
    BF_REQUIRE(s.size() == m.size(), "mixture_probs: class count mismatch");
    for (std::size_t c = 0; c < m.size(); ++c) m[c] += s[c];
  }
  for (auto& v : m) v /= static_cast<double>(samples.size());
  return m;
}

GaussianPrediction mixture_gaussian(const std::vector<GaussianPrediction>& samples) {
  BF_REQUIRE(!samples.empty(), "mixture_gaussian: no samples");
  const double S = static_cast<double>(samples.size());
  double mean = 0.0, var = 0.0;
  for (const auto& g : samples) {
    mean += g.mean;
    var += g.var;
  }
  mean /= S;
  var /= S;
  double spread = 0.0;
  for (const auto& g : samples) spread += (g.mean - mean) * (g.mean - mean);
  return {mean, var + spread / S};
}

PredictiveSet collect_predictive(const OutputSampler& sampler, const data::DataBundle& data, data::Split split,
                                 std::size_t S, Rng& rng, std::size_t batch_size, std::size_t max_examples) {
  BF_REQUIRE(S >= 1, "collect_predictive: S must be >= 1");
  BF_REQUIRE(batch_size >= 1, "collect_predictive: batch size must be >= 1");
  std::size_t n = data.size(split);
  if (max_examples) n = std::min(n, max_examples);
  BF_REQUIRE(n >= 1, "collect_predictive: empty split");
  PredictiveSet ps;
  ps.task = data.task;
  ps.samples = 0;
  for (std::size_t b0 = 0; b0 < n; b0 += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b0; i < std::min(n, b0 + batch_size); ++i) idx.push_back(i);
    const data::Batch batch = data.batch(split, idx);
    const std::vector<Tensor> outs = sampler(batch, S, rng);
    BF_REQUIRE(!outs.empty(), "collect_predictive: sampler returned nothing");
    if (ps.samples == 0) ps.samples = outs.size();
    BF_REQUIRE(outs.size() == ps.samples, "collect_predictive: sampler changed its sample count");
    const std::size_t rows = outs[0].rows();
    const std::size_t L = batch.input.len;
    for (std::size_t r = 0; r < rows; ++r) {
      if (batch.weights[r] == 0.0) continue;
      if (data.task == Task::regression) {
        std::vector<GaussianPrediction> item;
        for (const auto& o : outs) item.push_back({o.at(r, 0), softplus(o.at(r, 1)) + kVarianceFloor});
        ps.gauss.push_back(std::move(item));
        ps.targets.push_back(batch.targets[r]);
        ps.sequence.push_back(idx[r / L]);
        ps.step.push_back(r % L + 1 - data::kSeedValues);
      } else {
        std::vector<std::vector<double>> item;
        for (const auto& o : outs) item.push_back(softmax_row(o, r));
        ps.probs.push_back(std::move(item));
        ps.labels.push_back(batch.labels[r]);
      }
    }
  }
  return ps;
}

// ---- samplers ---------------------------------------------------------------------

OutputSampler point_sampler(const Transformer& model, const ConcreteDropoutSettings* dropout) {
  const bool stochastic = model.config().attention != AttentionMode::deterministic ||
                          (dropout != nullptr && model.has_dropout() && !dropout->frozen_zero);
  return [&model, dropout, stochastic](const data::Batch& batch, std::size_t S, Rng& rng) {
    std::vector<Tensor> outs;
    ad::Tape tape;
    const Bound w = bind_constants(tape, model.params());
    ForwardOptions opt;
    opt.rng = &rng;
    opt.dropout = dropout;
    for (std::size_t s = 0; s < S; ++s) {
      if (!stochastic && s > 0) {
        outs.push_back(outs[0]);
        continue;
      }
      outs.push_back(model.forward(tape, w, batch.input, opt).output.value());
    }
    return outs;
  };
}

OutputSampler vi_sampler(const Transformer& model, const bayes::VariationalState& vs) {
  return [&model, &vs](const data::Batch& batch, std::size_t S, Rng& rng) {
    std::vector<Tensor> outs;
    for (std::size_t s = 0; s < S; ++s) {
      ad::Tape tape;
      Bound w;
      for (const auto& n : model.params().names()) {
        if (!vs.loc.has(n)) w.set(n, tape.constant(model.params().at(n)));
      }
      for (const auto& n : vs.names) {
        const Tensor& loc = vs.loc.at(n);
        const Tensor& rho = vs.rho.at(n);
        Tensor x(loc.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
          x[i] = loc[i] + softplus(rho[i]) * dist::standard_sample(vs.family, vs.dof, rng);
        }
        w.set(n, tape.constant(std::move(x)));
      }
      ForwardOptions opt;
      opt.rng = &rng;
      outs.push_back(model.forward(tape, w, batch.input, opt).output.value());
    }
    return outs;
  };
}

OutputSampler laplace_sampler(const Transformer& model, const bayes::LaplaceState& st, std::size_t S, Rng& rng) {
  auto deltas = std::make_shared<std::vector<std::map<std::string, Tensor>>>(bayes::laplace_perturbations(st, S, rng));
  return [&model, &st, deltas](const data::Batch& batch, std::size_t, Rng&) {
    return bayes::laplace_outputs(model, st, batch, *deltas);
  };
}

OutputSampler ensemble_sampler(const std::vector<const Transformer*>& members) {
  BF_REQUIRE(!members.empty(), "ensemble_sampler: no members");
  return [members](const data::Batch& batch, std::size_t, Rng& rng) {
    std::vector<Tensor> outs;
    for (const Transformer* m : members) {
      ad::Tape tape;
      const Bound w = bind_constants(tape, m->params());
      ForwardOptions opt;
      opt.rng = &rng;
      outs.push_back(m->forward(tape, w, batch.input, opt).output.value());
    }
    return outs;
  };
}

// ---- metrics -------------------------------------------------------------------

ClassificationMetrics metrics_classification(const std::vector<std::vector<double>>& probs,
                                             const std::vector<std::size_t>& labels, std::size_t n_bins) {
  BF_REQUIRE(!probs.empty(), "metrics_classification: empty prediction set");
  BF_REQUIRE(probs.size() == labels.size(), "metrics_classification: one label per item");
  BF_REQUIRE(n_bins >= 1, "metrics_classification: need at least one bin");
  const std::size_t C = probs[0].size();
  const std::size_t n = probs.size();
  ClassificationMetrics m;
  m.n = n;
  m.bins.resize(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    m.bins[b].lo = static_cast<double>(b) / static_cast<double>(n_bins);
    m.bins[b].hi = static_cast<double>(b + 1) / static_cast<double>(n_bins);
  }
  std::vector<double> tp(C, 0.0), fp(C, 0.0), fn(C, 0.0), support(C, 0.0);
  std::size_t correct = 0;
  double ll = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = probs[i];
    BF_REQUIRE(p.size() == C, "metrics_classification: class count mismatch");
    const std::size_t y = labels[i];
    if (y >= C) {
      throw ContractError("metrics_classification: label " + std::to_string(y) + " out of range for " +
                          std::to_string(C) + " classes");
    }
    const std::size_t pred = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    const double conf = p[pred];
    ll += std::log(std::max(p[y], 1e-300));
    const bool ok = pred == y;
    correct += ok;
    support[y] += 1.0;
    if (ok) {
      tp[y] += 1.0;
    } else {
      fp[pred] += 1.0;
      fn[y] += 1.0;
    }
    const std::size_t b = std::min(n_bins - 1, static_cast<std::size_t>(conf * static_cast<double>(n_bins)));
    m.bins[b].count += 1;
    m.bins[b].accuracy += ok ? 1.0 : 0.0;
    m.bins[b].confidence += conf;
  }
  const double N = static_cast<double>(n);
  m.log_likelihood = ll / N;
  m.accuracy = static_cast<double>(correct) / N;
  double f1 = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    const double den = 2.0 * tp[c] + fp[c] + fn[c];
    if (support[c] > 0.0 && den > 0.0) f1 += support[c] / N * (2.0 * tp[c] / den);
  }
  m.f1 = f1;
  double ece = 0.0;
  for (auto& b : m.bins) {
    if (b.count == 0) continue;
    b.accuracy /= static_cast<double>(b.count);
    b.confidence /= static_cast<double>(b.count);
    ece += static_cast<double>(b.count) / N * std::abs(b.accuracy - b.confidence);
  }
  m.ece = ece;
  return m;
}

ClassificationMetrics metrics_classification(const PredictiveSet& p, std::size_t n_bins) {
  BF_REQUIRE(p.task != Task::regression, "metrics_classification: regression predictive set");
  std::vector<std::vector<double>> mix;
  mix.reserve(p.probs.size());
  for (const auto& item : p.probs) mix.push_back(mixture_probs(item));
  return metrics_classification(mix, p.labels, n_bins);
}

RegressionMetrics metrics_regression(const std::vector<std::vector<GaussianPrediction>>& per_sequence,
                                     const std::vector<data::ToySequence>& seqs) {
  BF_REQUIRE(!per_sequence.empty(), "metrics_regression: no sequences");
  BF_REQUIRE(per_sequence.size() <= seqs.size(), "metrics_regression: more predictions than sequences");
  RegressionMetrics m;
  double ll = 0.0, mse = 0.0, emse = 0.0, vmse = 0.0, vres = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < per_sequence.size(); ++i) {
    const auto& s = seqs[i];
    const auto& pred = per_sequence[i];
    if (s.true_mean.empty() || s.true_var.size() != s.true_mean.size()) {
      throw ContractError("metrics_regression: sequence " + std::to_string(i) + " has no generator metadata");
    }
    BF_REQUIRE(pred.size() == s.steps(), "metrics_regression: one prediction per generated step");
    BF_REQUIRE(s.values.size() == data::kSeedValues + s.steps(), "metrics_regression: malformed sequence");
    for (std::size_t t = 0; t < pred.size(); ++t) {
      const double y = s.values[data::kSeedValues + t];
      const double mu = pred[t].mean, v = pred[t].var;
      ll += -0.5 * std::log(2.0 * std::numbers::pi * v) - (y - mu) * (y - mu) / (2.0 * v);
      mse += (mu - y) * (mu - y);
      emse += (mu - s.true_mean[t]) * (mu - s.true_mean[t]);
      vmse += (v - s.true_var[t]) * (v - s.true_var[t]);
      const double r2 = (y - mu) * (y - mu);
      vres += (v - r2) * (v - r2);
      ++tokens;
    }
  }
  const double T = static_cast<double>(tokens);
  m.sequences = per_sequence.size();
  m.log_likelihood = ll / static_cast<double>(m.sequences);
  m.ll_per_token = ll / T;
  m.mse = mse / T;
  m.expected_mse = emse / T;
  m.variance_mse = vmse / T;
  m.variance_mse_residual = vres / T;
  return m;
}

RegressionMetrics metrics_regression(const PredictiveSet& p, const std::vector<data::ToySequence>& seqs) {
  BF_REQUIRE(p.task == Task::regression, "metrics_regression: classification predictive set");
  std::map<std::size_t, std::map<std::size_t, GaussianPrediction>> by_seq;
  for (std::size_t i = 0; i < p.gauss.size(); ++i) by_seq[p.sequence[i]][p.step[i]] = mixture_gaussian(p.gauss[i]);
  std::vector<std::vector<GaussianPrediction>> per;
  for (const auto& [seq, steps] : by_seq) {
    BF_REQUIRE(seq == per.size(), "metrics_regression: predictive set must cover a prefix of the split");
    std::vector<GaussianPrediction> row;
    for (const auto& kv : steps) row.push_back(kv.second);
    per.push_back(std::move(row));
  }
  return metrics_regression(per, seqs);
}

double entropy(const std::vector<double>& probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

std::vector<double> prior_predictive_entropy(const ModelConfig& cfg, const bayes::PriorSpec* prior,
                                             const data::Batch& batch, std::size_t n_draws, Rng& rng) {
  BF_REQUIRE(cfg.task == Task::classification, "prior_predictive_entropy: classification task required");
  ModelConfig c = cfg;
  if (prior) c.attention = AttentionMode::deterministic;
  Transformer model(c);
  Rng init_rng = rng.split();
  model.init(init_rng);
  const auto names = model.weight_names();
  std::vector<double> out;
  out.reserve(n_draws);
  for (std::size_t d = 0; d < n_draws; ++d) {
    if (prior) {
      for (const auto& n : names) {
        const dist::LocScale& p = prior->for_tensor(n);
        for (auto& v : model.params().at(n).storage()) v = p.sample(rng);
      }
    } else {
      Rng r = rng.split();
      model.init(r);
      // a zero head would make every draw exactly uniform
      const double sd = 1.0 / std::sqrt(static_cast<double>(c.hidden));
      for (auto& v : model.params().at("head.w").storage()) v = sd * r.normal();
    }
    ad::Tape tape;
    const Bound w = bind_constants(tape, model.params());
    ForwardOptions opt;
    opt.rng = &rng;
    const Tensor logits = model.forward(tape, w, batch.input, opt).output.value();
    double h = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r) h += entropy(softmax_row(logits, r));
    out.push_back(h / static_cast<double>(logits.rows()));
  }
  return out;
}

}  // namespace bayesformer::eval
