#pragma once

// Small fixtures shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <string>

#include "bayesformer/model.hpp"
#include "bayesformer/params.hpp"
#include "bayesformer/rng.hpp"

namespace bftest {

using namespace bayesformer;

/// One block, hidden 8, regression head, four positions.
inline ModelConfig tiny_config(AttentionMode mode) {
  ModelConfig c = ModelConfig::toy();
  c.hidden = 8;
  c.ffn = 16;
  c.max_len = 4;
  c.attention = mode;
  return c;
}

inline ModelInput tiny_input(Rng& rng, std::size_t batch = 1, std::size_t len = 4) {
  ModelInput in;
  in.batch = batch;
  in.len = len;
  in.features = Tensor::matrix(batch * len, 1);
  for (std::size_t i = 0; i < in.features.size(); ++i) in.features[i] = rng.normal();
  return in;
}

/// sum(output * probe) + attention KL, with the stochastic layers driven by
/// a fresh Rng(seed) so repeated evaluations see the same noise.
struct ProbeLoss {
  const Transformer* model;
  ModelInput input;
  Tensor probe;
  std::uint64_t seed;

  double value(const ParamStore& p) const {
    ad::Tape tape;
    Bound w = bind_all(tape, p, false);
    Rng rng(seed);
    ForwardOptions opt;
    opt.rng = &rng;
    auto r = model->forward(tape, w, input, opt);
    return ad::add(ad::weighted_sum(r.output, probe), r.attention_kl).item();
  }
};

struct GradCheckResult {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Central differences against the tape gradient for every parameter entry.
/// Relative error |a - n| / max(|a|, |n|); pairs where both are below
/// `floor` count as agreeing (they carry no relative information).
inline GradCheckResult grad_check(Transformer& model, const ModelInput& in, std::uint64_t seed, double h = 1e-6,
                                  double floor = 1e-8) {
  Rng probe_rng(seed + 1000);
  ProbeLoss f{&model, in, {}, seed};
  {
    ad::Tape tape;
    Bound w = bind_all(tape, model.params(), false);
    Rng rng(seed);
    ForwardOptions opt;
    opt.rng = &rng;
    auto r = model.forward(tape, w, in, opt);
    f.probe = Tensor::matrix(r.output.rows(), r.output.cols());
    for (std::size_t i = 0; i < f.probe.size(); ++i) f.probe[i] = probe_rng.normal();
  }
  ad::Tape tape;
  Bound w = bind_all(tape, model.params(), true);
  Rng rng(seed);
  ForwardOptions opt;
  opt.rng = &rng;
  auto r = model.forward(tape, w, in, opt);
  ad::Var loss = ad::add(ad::weighted_sum(r.output, f.probe), r.attention_kl);
  ad::Gradients g = tape.backward(loss);

  GradCheckResult res;
  ParamStore p = model.params();
  for (const auto& name : p.names()) {
    const Tensor analytic = g.of(w(name));
    Tensor& t = p.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x0 = t[i];
      const double step = h * std::max(1.0, std::abs(x0));
      t[i] = x0 + step;
      const double up = f.value(p);
      t[i] = x0 - step;
      const double down = f.value(p);
      t[i] = x0;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      ++res.checked;
      if (scale < floor) continue;
      const double rel = std::abs(a - numeric) / scale;
      if (rel > res.max_rel) {
        res.max_rel = rel;
        res.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace bftest
