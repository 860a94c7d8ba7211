#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bayesformer {

/// Argument outside the mathematical domain of a function (x <= 0 for lgamma, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Violated API precondition: shape mismatch, non-scalar loss, empty dataset.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite value produced or consumed by a numeric routine.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss or gradient; carries where it happened.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::size_t epoch, std::size_t step, double last_loss)
      : NumericError(what), epoch(epoch), step(step), last_loss(last_loss) {}
  std::size_t epoch;
  std::size_t step;
  double last_loss;  // last finite training loss
};

/// Malformed binary input (IDX, tensor containers, toy caches).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input (CoNLL-U, config files).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define BF_REQUIRE(cond, msg)                                  \
  do {                                                         \
    if (!(cond)) throw ::bayesformer::ContractError(msg);      \
  } while (0)

}  // namespace bayesformer
