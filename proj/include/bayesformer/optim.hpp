#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "bayesformer/autodiff.hpp"
#include "bayesformer/tensor.hpp"

namespace bayesformer {

/// A trainable leaf on the current tape and the storage it was read from.
struct LeafRef {
  std::string key;
  ad::Var var;
  Tensor* value = nullptr;
};
using Leaves = std::vector<LeafRef>;

/// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5) * base. ContractError for step 0.
double lr_schedule(std::size_t step, std::size_t d_model, std::size_t warmup, double base = 1.0);

/// Warmup actually used for a run of `total_steps`: the nominal warmup,
/// scaled by total_steps / 8000 when the run is shorter than 8000 steps.
std::size_t effective_warmup(std::size_t nominal, std::size_t total_steps);

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

class Adam {
 public:
  explicit Adam(AdamSettings s = {}) : s_(s) {}
  void step(const Leaves& leaves, const ad::Gradients& g, double lr);
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamSettings s_;
  std::unordered_map<std::string, Moments> state_;
  std::size_t t_ = 0;
};

/// Plain stochastic gradient descent. With max_norm > 0 the gradient is
/// rescaled so its global L2 norm is at most max_norm.
void sgd_step(const Leaves& leaves, const ad::Gradients& g, double lr, double max_norm = 0.0);

}  // namespace bayesformer
