#include "bayesformer/params.hpp"

#include "bayesformer/errors.hpp"

namespace bayesformer {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  BF_REQUIRE(!has(name), "parameter '" + name + "' already exists");
  index_[name] = names_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
  return values_.back();
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  BF_REQUIRE(it != index_.end(), "unknown parameter '" + name + "'");
  return values_[it->second];
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  BF_REQUIRE(it != index_.end(), "unknown parameter '" + name + "'");
  return values_[it->second];
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

const ad::Var& Bound::operator()(const std::string& name) const {
  auto it = vars_.find(name);
  BF_REQUIRE(it != vars_.end(), "parameter '" + name + "' is not bound");
  return it->second;
}

Bound bind_all(ad::Tape& tape, const ParamStore& params, bool trainable) {
  Bound b;
  for (const auto& n : params.names()) b.set(n, tape.leaf(params.at(n), trainable));
  return b;
}

}  // namespace bayesformer
