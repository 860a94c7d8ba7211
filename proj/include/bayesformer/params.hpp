#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "bayesformer/autodiff.hpp"
#include "bayesformer/tensor.hpp"

namespace bayesformer {

/// Named parameter tensors in insertion order.
class ParamStore {
 public:
  /// ContractError if the name already exists.
  Tensor& add(const std::string& name, Tensor value);
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t total_size() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Tape handles for every parameter used by one forward pass.
class Bound {
 public:
  void set(const std::string& name, ad::Var v) { vars_[name] = v; }
  /// ContractError naming the parameter if it was never bound.
  const ad::Var& operator()(const std::string& name) const;
  bool has(const std::string& name) const { return vars_.count(name) != 0; }

 private:
  std::unordered_map<std::string, ad::Var> vars_;
};

/// Binds every tensor as a leaf; `trainable` false makes them constants.
Bound bind_all(ad::Tape& tape, const ParamStore& params, bool trainable = true);

}  // namespace bayesformer
