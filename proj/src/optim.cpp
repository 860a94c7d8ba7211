#include "bayesformer/optim.hpp"

#include <algorithm>
#include <cmath>

#include "bayesformer/errors.hpp"

namespace bayesformer {

double lr_schedule(std::size_t step, std::size_t d_model, std::size_t warmup, double base) {
  BF_REQUIRE(step >= 1, "lr_schedule: step must be >= 1");
  BF_REQUIRE(warmup >= 1 && d_model >= 1, "lr_schedule: warmup and d_model must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return base * std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

std::size_t effective_warmup(std::size_t nominal, std::size_t total_steps) {
  if (total_steps >= 8000) return nominal;
  const double w = static_cast<double>(nominal) * static_cast<double>(total_steps) / 8000.0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(w)));
}

void Adam::step(const Leaves& leaves, const ad::Gradients& g, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
  for (const auto& leaf : leaves) {
    if (!g.has(leaf.var)) continue;
    const Tensor grad = g.of(leaf.var);
    Tensor& p = *leaf.value;
    auto& st = state_[leaf.key];
    if (st.m.size() != p.size()) {
      st.m.assign(p.size(), 0.0);
      st.v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      st.m[i] = s_.beta1 * st.m[i] + (1.0 - s_.beta1) * grad[i];
      st.v[i] = s_.beta2 * st.v[i] + (1.0 - s_.beta2) * grad[i] * grad[i];
      p[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + s_.eps);
    }
  }
}

void sgd_step(const Leaves& leaves, const ad::Gradients& g, double lr, double max_norm) {
  double factor = 1.0;
  if (max_norm > 0.0) {
    double sq = 0.0;
    for (const auto& leaf : leaves) {
      if (!g.has(leaf.var)) continue;
      const Tensor grad = g.of(leaf.var);
      for (std::size_t i = 0; i < grad.size(); ++i) sq += grad[i] * grad[i];
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) factor = max_norm / norm;
  }
  lr *= factor;
  for (const auto& leaf : leaves) {
    if (!g.has(leaf.var)) continue;
    const Tensor grad = g.of(leaf.var);
    Tensor& p = *leaf.value;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * grad[i];
  }
}

}  // namespace bayesformer
