#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "bayesformer/tensor.hpp"

// Define-by-run reverse-mode differentiation over dense matrices.
//
// A Tape owns every value produced during one forward pass. Ops append nodes
// in evaluation order, so the node index is already a topological order and
// backward() is a single reverse sweep. Every value pushed onto the tape is
// checked for NaN/Inf; the first offending op throws NumericError.

namespace bayesformer::ad {

using NodeId = std::size_t;
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  NodeId id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Gradient of a scalar loss with respect to every node on the tape.
class Gradients {
 public:
  /// d loss / d v. Nodes the loss does not depend on get zeros of v's shape.
  Tensor of(const Var& v) const;
  bool has(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<std::vector<std::size_t>> shapes_;
};

/// Receives the output gradient of a node and accumulates into its inputs.
using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(double v) { return leaf(Tensor::scalar(v), false); }

  /// Appends an op result. `backward` is only invoked when some input
  /// requires a gradient; `name` is used in non-finite diagnostics.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward, const char* name);
  Var push(Tensor value, const std::vector<Var>& inputs, BackwardFn backward, const char* name);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator for `id`; only meaningful inside a BackwardFn.
  /// Returns a zero-initialised buffer on first access.
  Tensor& grad(NodeId id);
  bool wants_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  /// Reverse sweep from a 1x1 loss. Throws ContractError for a non-scalar loss.
  Gradients backward(const Var& loss);

  /// Same sweep but seeded with an arbitrary output gradient (used for
  /// Jacobian rows and vector-Jacobian products).
  Gradients backward(const Var& output, const Tensor& seed);

 private:
  struct Node {
    Tensor value;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool in_backward_ = false;
};

/// Validity mask for attention rows: valid[r * cols + c] != 0 when query r may
/// attend to key c. Shared between the forward value and backward closures.
struct RowMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> valid;

  bool operator()(std::size_t r, std::size_t c) const { return valid[r * cols + c] != 0; }
  std::size_t count_row(std::size_t r) const;
};
using MaskPtr = std::shared_ptr<const RowMask>;

// ---- elementwise & broadcasting -------------------------------------------
// Binary ops broadcast either operand along a dimension of extent 1
// ((1,1), (1,n), (m,1) against (m,n)).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
/// Exact GeLU: 0.5 x (1 + erf(x / sqrt 2)).
Var gelu(const Var& a);

// ---- reductions ----------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // (m,n) -> (m,1)
Var sum_cols(const Var& a);  // (m,n) -> (1,n)
/// Weighted sum of all entries with constant weights of the same shape.
Var weighted_sum(const Var& a, const Tensor& weights);

// ---- linear algebra --------------------------------------------------------
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
/// Block-diagonal a*b^T: a, b are (blocks*len, d); result (blocks*len, len)
/// where row r holds scores against the keys of r's own block.
Var block_matmul_nt(const Var& a, const Var& b, std::size_t len);
/// Block-diagonal product: w (blocks*len, len) times v (blocks*len, d).
Var block_matmul(const Var& w, const Var& v, std::size_t len);

// ---- shape -----------------------------------------------------------------
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// Rows `index[i]` of `table`; gradient scatter-adds back.
Var gather_rows(const Var& table, const std::vector<std::size_t>& index);
/// out[i] = a(i, index[i]) as an (m,1) column.
Var pick(const Var& a, const std::vector<std::size_t>& index);
/// Treats the (rows*cols) data of `a` as shape (r, c).
Var reshape(const Var& a, std::size_t r, std::size_t c);

// ---- row-wise probability ops ---------------------------------------------
/// Softmax along the last axis with max subtraction.
Var softmax_rows(const Var& a);
/// Softmax over the valid entries of each row; masked entries are exactly 0.
/// A row with no valid entry is a ContractError.
Var masked_softmax_rows(const Var& a, const MaskPtr& mask);
Var log_softmax_rows(const Var& a);
Var logsumexp_rows(const Var& a);  // (m,n) -> (m,1)

/// Normalisation over the last axis, then gain * xhat + bias with (1,n)
/// gain and bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// Plain-tensor helpers for code paths that never need gradients.
Tensor softmax(const Tensor& x);
Tensor gelu(const Tensor& x);

}  // namespace bayesformer::ad
