#pragma once

// Central finite-difference oracle shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bayesformer/autodiff.hpp"

namespace bftest {

using bayesformer::Tensor;
using bayesformer::ad::Tape;
using bayesformer::ad::Var;

struct GradCheck {
  double max_rel_err = 0.0;
  std::string worst;  // "input i, entry j: analytic a vs numeric n"
  std::size_t checked = 0;
};

/// Relative error with a floor so entries whose gradient is ~0 compare absolutely.
inline double rel_err(double a, double n, double floor = 1e-3) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor});
}

using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double eval_loss(const std::vector<Tensor>& inputs, const LossBuilder& build) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  return build(tape, vars).item();
}

/// Compares reverse-mode gradients of `build` against central differences
/// with step h for every entry of every input.
inline GradCheck grad_check(const std::vector<Tensor>& inputs, const LossBuilder& build,
                            double h = 1e-5, double floor = 1e-3) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  const Var loss = build(tape, vars);
  const auto grads = tape.backward(loss);
  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = grads.of(vars[i]);
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      auto plus = inputs, minus = inputs;
      plus[i][j] += h;
      minus[i][j] -= h;
      const double numeric = (eval_loss(plus, build) - eval_loss(minus, build)) / (2.0 * h);
      const double e = rel_err(analytic[j], numeric, floor);
      ++out.checked;
      if (e > out.max_rel_err) {
        out.max_rel_err = e;
        out.worst = "input " + std::to_string(i) + ", entry " + std::to_string(j) + ": analytic " +
                    std::to_string(analytic[j]) + " vs numeric " + std::to_string(numeric);
      }
    }
  }
  return out;
}

}  // namespace bftest
