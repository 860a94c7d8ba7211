#include "bayesformer/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace bayesformer::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }
MutMap as_mat(Tensor& t) { return MutMap(t.data(), t.rows(), t.cols()); }

Tape& tape_of(const Var& a) {
  BF_REQUIRE(a.valid(), "autodiff: use of an empty Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  BF_REQUIRE(b.tape() == &t, "autodiff: operands live on different tapes");
  return t;
}

std::size_t bdim(std::size_t x, std::size_t y, const char* op) {
  if (x == y || y == 1) return x;
  if (x == 1) return y;
  throw ContractError(std::string("autodiff: ") + op + ": incompatible broadcast extents " +
                      std::to_string(x) + " and " + std::to_string(y));
}

/// Elementwise op with derivative df evaluated at the input.
template <class F, class DF>
Var unary(const Var& a, const char* name, F f, DF df) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const NodeId ia = a.id();
  return t.push(std::move(y), {a},
                [ia, df](Tape& tp, const Tensor& g) {
                  const Tensor& xv = tp.value(ia);
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t i = 0; i < xv.size(); ++i) ga[i] += g[i] * df(xv[i]);
                },
                name);
}

enum class BinOp { add, sub, mul, div };

Var binary(const Var& a, const Var& b, BinOp op, const char* name) {
  Tape& t = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t R = bdim(x.rows(), y.rows(), name);
  const std::size_t C = bdim(x.cols(), y.cols(), name);
  const bool xr = x.rows() == 1, xc = x.cols() == 1, yr = y.rows() == 1, yc = y.cols() == 1;
  Tensor out = Tensor::matrix(R, C);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const double u = x.at(xr ? 0 : r, xc ? 0 : c);
      const double v = y.at(yr ? 0 : r, yc ? 0 : c);
      double o = 0.0;
      switch (op) {
        case BinOp::add: o = u + v; break;
        case BinOp::sub: o = u - v; break;
        case BinOp::mul: o = u * v; break;
        case BinOp::div: o = u / v; break;
      }
      out.at(r, c) = o;
    }
  }
  const NodeId ia = a.id(), ib = b.id();
  return t.push(
      std::move(out), {a, b},
      [=](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(ia);
        const Tensor& yv = tp.value(ib);
        const bool need_a = tp.requires_grad(ia), need_b = tp.requires_grad(ib);
        Tensor* ga = need_a ? &tp.grad(ia) : nullptr;
        Tensor* gb = need_b ? &tp.grad(ib) : nullptr;
        for (std::size_t r = 0; r < R; ++r) {
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t ar = xr ? 0 : r, ac = xc ? 0 : c, br = yr ? 0 : r, bc = yc ? 0 : c;
            const double go = g.at(r, c);
            const double u = xv.at(ar, ac);
            const double v = yv.at(br, bc);
            double du = 0.0, dv = 0.0;
            switch (op) {
              case BinOp::add: du = go; dv = go; break;
              case BinOp::sub: du = go; dv = -go; break;
              case BinOp::mul: du = go * v; dv = go * u; break;
              case BinOp::div: du = go / v; dv = -go * u / (v * v); break;
            }
            if (ga) ga->at(ar, ac) += du;
            if (gb) gb->at(br, bc) += dv;
          }
        }
      },
      name);
}

void check_row_mask(const Tensor& x, const MaskPtr& mask) {
  BF_REQUIRE(mask != nullptr, "masked_softmax: null mask");
  BF_REQUIRE(mask->rows == x.rows() && mask->cols == x.cols(),
             "masked_softmax: mask shape does not match scores " + x.shape_string());
}

}  // namespace

// ---- Var / Gradients / Tape ---------------------------------------------------

const Tensor& Var::value() const {
  BF_REQUIRE(tape_ != nullptr, "autodiff: value() on an empty Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ != nullptr && tape_->requires_grad(id_); }

Tensor Gradients::of(const Var& v) const {
  BF_REQUIRE(v.id() < shapes_.size(), "gradients: Var is not from this tape");
  if (!grads_[v.id()].storage().empty()) return grads_[v.id()];
  return Tensor(shapes_[v.id()]);
}

bool Gradients::has(const Var& v) const {
  return v.id() < grads_.size() && !grads_[v.id()].storage().empty();
}

std::size_t RowMask::count_row(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols; ++c) n += valid[r * cols + c] != 0;
  return n;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("autodiff: non-finite leaf value");
  nodes_.push_back(Node{std::move(value), nullptr, requires_grad});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward,
               const char* name) {
  bool rg = false;
  for (const Var& v : inputs) rg = rg || v.requires_grad();
  if (!value.all_finite()) {
    throw NumericError(std::string("autodiff: op '") + name + "' produced a non-finite value");
  }
  nodes_.push_back(Node{std::move(value), rg ? std::move(backward) : nullptr, rg});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(Tensor value, const std::vector<Var>& inputs, BackwardFn backward,
               const char* name) {
  bool rg = false;
  for (const Var& v : inputs) rg = rg || v.requires_grad();
  if (!value.all_finite()) {
    throw NumericError(std::string("autodiff: op '") + name + "' produced a non-finite value");
  }
  nodes_.push_back(Node{std::move(value), rg ? std::move(backward) : nullptr, rg});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(NodeId id) {
  BF_REQUIRE(in_backward_, "autodiff: grad() outside of backward()");
  Tensor& g = grads_[id];
  if (g.storage().empty()) g = Tensor(nodes_[id].value.shape());
  return g;
}

Gradients Tape::backward(const Var& loss) {
  BF_REQUIRE(loss.tape() == this, "autodiff: loss is not on this tape");
  BF_REQUIRE(loss.value().size() == 1,
             "autodiff: backward() needs a scalar loss, got " + loss.value().shape_string());
  return backward(loss, Tensor(loss.value().shape(), 1.0));
}

Gradients Tape::backward(const Var& output, const Tensor& seed) {
  BF_REQUIRE(output.tape() == this, "autodiff: output is not on this tape");
  BF_REQUIRE(seed.size() == output.value().size(), "autodiff: seed shape mismatch");
  grads_.assign(nodes_.size(), Tensor());
  in_backward_ = true;
  grads_[output.id()] = Tensor(output.value().shape(), seed.storage());
  for (std::size_t k = output.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.requires_grad || !n.backward || grads_[k].storage().empty()) continue;
    // closures only write to inputs (ids < k) and grads_ never reallocates here
    const Tensor& g = grads_[k];
    n.backward(*this, g);
  }
  in_backward_ = false;
  Gradients out;
  out.grads_ = std::move(grads_);
  out.shapes_.reserve(nodes_.size());
  for (const Node& n : nodes_) out.shapes_.push_back(n.value.shape());
  grads_.clear();
  return out;
}

// ---- elementwise ---------------------------------------------------------------

Var add(const Var& a, const Var& b) { return binary(a, b, BinOp::add, "add"); }
Var sub(const Var& a, const Var& b) { return binary(a, b, BinOp::sub, "sub"); }
Var mul(const Var& a, const Var& b) { return binary(a, b, BinOp::mul, "mul"); }
Var div(const Var& a, const Var& b) { return binary(a, b, BinOp::div, "div"); }

Var scale(const Var& a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; }, [c](double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp(const Var& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); },
               [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  return unary(a, "sqrt", [](double x) { return std::sqrt(x); },
               [](double x) { return 0.5 / std::sqrt(x); });
}

namespace {
double softplus_d(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid_d(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
double gelu_d(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
}  // namespace

Var softplus(const Var& a) { return unary(a, "softplus", softplus_d, sigmoid_d); }

Var sigmoid(const Var& a) {
  return unary(a, "sigmoid", sigmoid_d, [](double x) {
    const double s = sigmoid_d(x);
    return s * (1.0 - s);
  });
}

Var tanh(const Var& a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); },
               [](double x) {
                 const double t = std::tanh(x);
                 return 1.0 - t * t;
               });
}

Var gelu(const Var& a) { return unary(a, "gelu", gelu_d, gelu_grad); }

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_d(x[i]);
  return y;
}

// ---- reductions ---------------------------------------------------------------

Var sum(const Var& a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const NodeId ia = a.id();
  return t.push(Tensor::scalar(s), {a},
                [ia](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad(ia);
                  for (double& v : ga.storage()) v += g[0];
                },
                "sum");
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var sum_rows(const Var& a) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor out = Tensor::matrix(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out[r] += x.at(r, c);
  const NodeId ia = a.id();
  return t.push(std::move(out), {a},
                [ia](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t r = 0; r < ga.rows(); ++r)
                    for (std::size_t c = 0; c < ga.cols(); ++c) ga.at(r, c) += g[r];
                },
                "sum_rows");
}

Var sum_cols(const Var& a) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor out = Tensor::matrix(1, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out[c] += x.at(r, c);
  const NodeId ia = a.id();
  return t.push(std::move(out), {a},
                [ia](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t r = 0; r < ga.rows(); ++r)
                    for (std::size_t c = 0; c < ga.cols(); ++c) ga.at(r, c) += g[c];
                },
                "sum_cols");
}

Var weighted_sum(const Var& a, const Tensor& weights) {
  Tape& t = tape_of(a);
  BF_REQUIRE(weights.size() == a.value().size(), "weighted_sum: weight shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * a.value()[i];
  const NodeId ia = a.id();
  return t.push(Tensor::scalar(s), {a},
                [ia, weights](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t i = 0; i < weights.size(); ++i) ga[i] += g[0] * weights[i];
                },
                "weighted_sum");
}

// ---- linear algebra -------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  BF_REQUIRE(x.cols() == y.rows(), "matmul: inner dimensions " + x.shape_string() + " x " +
                                       y.shape_string());
  Tensor out = Tensor::matrix(x.rows(), y.cols());
  as_mat(out).noalias() = as_mat(x) * as_mat(y);
  const NodeId ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b},
                [ia, ib](Tape& tp, const Tensor& g) {
                  if (tp.requires_grad(ia)) as_mat(tp.grad(ia)).noalias() += as_mat(g) * as_mat(tp.value(ib)).transpose();
                  if (tp.requires_grad(ib)) as_mat(tp.grad(ib)).noalias() += as_mat(tp.value(ia)).transpose() * as_mat(g);
                },
                "matmul");
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  BF_REQUIRE(x.cols() == y.cols(), "matmul_nt: inner dimensions " + x.shape_string() + " x " +
                                       y.shape_string() + "^T");
  Tensor out = Tensor::matrix(x.rows(), y.rows());
  as_mat(out).noalias() = as_mat(x) * as_mat(y).transpose();
  const NodeId ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b},
                [ia, ib](Tape& tp, const Tensor& g) {
                  if (tp.requires_grad(ia)) as_mat(tp.grad(ia)).noalias() += as_mat(g) * as_mat(tp.value(ib));
                  if (tp.requires_grad(ib)) as_mat(tp.grad(ib)).noalias() += as_mat(g).transpose() * as_mat(tp.value(ia));
                },
                "matmul_nt");
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor out = Tensor::matrix(x.cols(), x.rows());
  as_mat(out) = as_mat(x).transpose();
  const NodeId ia = a.id();
  return t.push(std::move(out), {a},
                [ia](Tape& tp, const Tensor& g) { as_mat(tp.grad(ia)) += as_mat(g).transpose(); },
                "transpose");
}

Var block_matmul_nt(const Var& a, const Var& b, std::size_t len) {
  Tape& t = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  BF_REQUIRE(len > 0 && x.rows() % len == 0, "block_matmul_nt: rows not a multiple of block length");
  BF_REQUIRE(x.rows() == y.rows() && x.cols() == y.cols(), "block_matmul_nt: operand shapes differ");
  const std::size_t blocks = x.rows() / len;
  const auto d = static_cast<Eigen::Index>(x.cols());
  const auto L = static_cast<Eigen::Index>(len);
  Tensor out = Tensor::matrix(x.rows(), len);
  for (std::size_t k = 0; k < blocks; ++k) {
    const auto off = static_cast<Eigen::Index>(k * len);
    as_mat(out).middleRows(off, L).noalias() =
        as_mat(x).middleRows(off, L) * as_mat(y).middleRows(off, L).transpose();
  }
  (void)d;
  const NodeId ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b},
                [ia, ib, blocks, L](Tape& tp, const Tensor& g) {
                  const bool na = tp.requires_grad(ia), nb = tp.requires_grad(ib);
                  for (std::size_t k = 0; k < blocks; ++k) {
                    const auto off = static_cast<Eigen::Index>(k) * L;
                    auto gk = as_mat(g).middleRows(off, L);
                    if (na) as_mat(tp.grad(ia)).middleRows(off, L).noalias() += gk * as_mat(tp.value(ib)).middleRows(off, L);
                    if (nb) as_mat(tp.grad(ib)).middleRows(off, L).noalias() += gk.transpose() * as_mat(tp.value(ia)).middleRows(off, L);
                  }
                },
                "block_matmul_nt");
}

Var block_matmul(const Var& w, const Var& v, std::size_t len) {
  Tape& t = tape_of(w, v);
  const Tensor& x = w.value();
  const Tensor& y = v.value();
  BF_REQUIRE(len > 0 && x.cols() == len && x.rows() % len == 0,
             "block_matmul: weights must be (blocks*len, len)");
  BF_REQUIRE(y.rows() == x.rows(), "block_matmul: value rows differ from weight rows");
  const std::size_t blocks = x.rows() / len;
  const auto L = static_cast<Eigen::Index>(len);
  Tensor out = Tensor::matrix(x.rows(), y.cols());
  for (std::size_t k = 0; k < blocks; ++k) {
    const auto off = static_cast<Eigen::Index>(k) * L;
    as_mat(out).middleRows(off, L).noalias() =
        as_mat(x).middleRows(off, L) * as_mat(y).middleRows(off, L);
  }
  const NodeId iw = w.id(), iv = v.id();
  return t.push(std::move(out), {w, v},
                [iw, iv, blocks, L](Tape& tp, const Tensor& g) {
                  const bool nw = tp.requires_grad(iw), nv = tp.requires_grad(iv);
                  for (std::size_t k = 0; k < blocks; ++k) {
                    const auto off = static_cast<Eigen::Index>(k) * L;
                    auto gk = as_mat(g).middleRows(off, L);
                    if (nw) as_mat(tp.grad(iw)).middleRows(off, L).noalias() += gk * as_mat(tp.value(iv)).middleRows(off, L).transpose();
                    if (nv) as_mat(tp.grad(iv)).middleRows(off, L).noalias() += as_mat(tp.value(iw)).middleRows(off, L).transpose() * gk;
                  }
                },
                "block_matmul");
}

// ---- shape ----------------------------------------------------------------------

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  BF_REQUIRE(begin <= end && end <= x.rows(), "slice_rows: range out of bounds");
  const std::size_t c = x.cols();
  Tensor out = Tensor::matrix(end - begin, c);
  std::copy(x.data() + begin * c, x.data() + end * c, out.data());
  const NodeId ia = a.id();
  return t.push(std::move(out), {a},
                [ia, begin, c](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
                },
                "slice_rows");
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  BF_REQUIRE(begin <= end && end <= x.cols(), "slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  Tensor out = Tensor::matrix(x.rows(), w);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < w; ++c) out.at(r, c) = x.at(r, begin + c);
  const NodeId ia = a.id();
  return t.push(std::move(out), {a},
                [ia, begin, w](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < w; ++c) ga.at(r, begin + c) += g.at(r, c);
                },
                "slice_cols");
}

Var concat_rows(const std::vector<Var>& parts) {
  BF_REQUIRE(!parts.empty(), "concat_rows: no inputs");
  Tape& t = tape_of(parts.front());
  const std::size_t c = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    BF_REQUIRE(p.tape() == &t, "concat_rows: operands live on different tapes");
    BF_REQUIRE(p.cols() == c, "concat_rows: column counts differ");
    rows += p.rows();
  }
  Tensor out = Tensor::matrix(rows, c);
  std::vector<NodeId> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off * c);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
  }
  return t.push(std::move(out), parts,
                [ids, offsets, c](Tape& tp, const Tensor& g) {
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (!tp.requires_grad(ids[k])) continue;
                    Tensor& gk = tp.grad(ids[k]);
                    for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[offsets[k] * c + i];
                  }
                },
                "concat_rows");
}

Var concat_cols(const std::vector<Var>& parts) {
  BF_REQUIRE(!parts.empty(), "concat_cols: no inputs");
  Tape& t = tape_of(parts.front());
  const std::size_t r = parts.front().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    BF_REQUIRE(p.tape() == &t, "concat_cols: operands live on different tapes");
    BF_REQUIRE(p.rows() == r, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Tensor out = Tensor::matrix(r, cols);
  std::vector<NodeId> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out.at(i, off + j) = v.at(i, j);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += v.cols();
  }
  return t.push(std::move(out), parts,
                [ids, offsets](Tape& tp, const Tensor& g) {
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (!tp.requires_grad(ids[k])) continue;
                    Tensor& gk = tp.grad(ids[k]);
                    for (std::size_t i = 0; i < gk.rows(); ++i)
                      for (std::size_t j = 0; j < gk.cols(); ++j) gk.at(i, j) += g.at(i, offsets[k] + j);
                  }
                },
                "concat_cols");
}

Var gather_rows(const Var& table, const std::vector<std::size_t>& index) {
  Tape& t = tape_of(table);
  const Tensor& x = table.value();
  const std::size_t c = x.cols();
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    BF_REQUIRE(index[i] < x.rows(), "gather_rows: index out of range");
    std::copy(x.data() + index[i] * c, x.data() + (index[i] + 1) * c, out.data() + i * c);
  }
  const NodeId ia = table.id();
  return t.push(std::move(out), {table},
                [ia, index, c](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t i = 0; i < index.size(); ++i)
                    for (std::size_t j = 0; j < c; ++j) ga[index[i] * c + j] += g[i * c + j];
                },
                "gather_rows");
}

Var pick(const Var& a, const std::vector<std::size_t>& index) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  BF_REQUIRE(index.size() == x.rows(), "pick: need one index per row");
  Tensor out = Tensor::matrix(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    BF_REQUIRE(index[r] < x.cols(), "pick: column index out of range");
    out[r] = x.at(r, index[r]);
  }
  const NodeId ia = a.id();
  return t.push(std::move(out), {a},
                [ia, index](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t r = 0; r < index.size(); ++r) ga.at(r, index[r]) += g[r];
                },
                "pick");
}

Var reshape(const Var& a, std::size_t r, std::size_t c) {
  Tape& t = tape_of(a);
  BF_REQUIRE(r * c == a.value().size(), "reshape: element count changes");
  Tensor out({r, c}, a.value().storage());
  const NodeId ia = a.id();
  return t.push(std::move(out), {a},
                [ia](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                },
                "reshape");
}

// ---- row-wise probability ops ----------------------------------------------

Tensor softmax(const Tensor& x) {
  Tensor y(x.shape());
  const std::size_t R = x.rows(), C = x.cols();
  for (std::size_t r = 0; r < R; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) m = std::max(m, x.at(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += (y.at(r, c) = std::exp(x.at(r, c) - m));
    for (std::size_t c = 0; c < C; ++c) y.at(r, c) /= s;
  }
  return y;
}

namespace {
// dL/dx = y * (g - sum(g*y)) row by row; shared by the plain and masked forms.
BackwardFn softmax_backward(NodeId ia, NodeId iy) {
  return [ia, iy](Tape& tp, const Tensor& g) {
    const Tensor& y = tp.value(iy);
    Tensor& ga = tp.grad(ia);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g.at(r, c) * y.at(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
    }
  };
}
}  // namespace

Var softmax_rows(const Var& a) {
  Tape& t = tape_of(a);
  const NodeId ia = a.id();
  const NodeId iy = t.size();
  for (double v : a.value().values()) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  }
  return t.push(softmax(a.value()), {a}, softmax_backward(ia, iy), "softmax");
}

Var masked_softmax_rows(const Var& a, const MaskPtr& mask) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  check_row_mask(x, mask);
  const std::size_t R = x.rows(), C = x.cols();
  Tensor y(x.shape());
  for (std::size_t r = 0; r < R; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      if (!(*mask)(r, c)) continue;
      if (!std::isfinite(x.at(r, c))) throw NumericError("softmax: non-finite input");
      m = std::max(m, x.at(r, c));
    }
    if (m == -std::numeric_limits<double>::infinity()) {
      throw ContractError("masked_softmax: row " + std::to_string(r) + " has no valid position");
    }
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      if ((*mask)(r, c)) s += (y.at(r, c) = std::exp(x.at(r, c) - m));
    }
    for (std::size_t c = 0; c < C; ++c) y.at(r, c) /= s;
  }
  const NodeId ia = a.id();
  const NodeId iy = t.size();
  return t.push(std::move(y), {a}, softmax_backward(ia, iy), "masked_softmax");
}

Var logsumexp_rows(const Var& a) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor out = Tensor::matrix(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < x.cols(); ++c) m = std::max(m, x.at(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += std::exp(x.at(r, c) - m);
    out[r] = m + std::log(s);
  }
  const NodeId ia = a.id();
  const NodeId io = t.size();
  return t.push(std::move(out), {a},
                [ia, io](Tape& tp, const Tensor& g) {
                  const Tensor& xv = tp.value(ia);
                  const Tensor& lse = tp.value(io);
                  Tensor& ga = tp.grad(ia);
                  for (std::size_t r = 0; r < xv.rows(); ++r)
                    for (std::size_t c = 0; c < xv.cols(); ++c)
                      ga.at(r, c) += g[r] * std::exp(xv.at(r, c) - lse[r]);
                },
                "logsumexp");
}

Var log_softmax_rows(const Var& a) { return sub(a, logsumexp_rows(a)); }

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  Tape& t = tape_of(x, gain);
  BF_REQUIRE(bias.tape() == &t, "layer_norm: operands live on different tapes");
  BF_REQUIRE(eps > 0.0, "layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  BF_REQUIRE(C > 0, "layer_norm: zero-length normalisation axis");
  BF_REQUIRE(gain.value().size() == C && bias.value().size() == C,
             "layer_norm: gain/bias length must equal the last axis");
  // normalised rows and per-row 1/sigma are kept for backward
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(R);
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < R; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += xv.at(r, c);
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (xv.at(r, c) - mu) * (xv.at(r, c) - mu);
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < C; ++c) {
      const double h = (xv.at(r, c) - mu) * is;
      xhat->at(r, c) = h;
      out.at(r, c) = gv[c] * h + bv[c];
    }
  }
  const NodeId ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.push(std::move(out), {x, gain, bias},
                [=](Tape& tp, const Tensor& g) {
                  const Tensor& gv2 = tp.value(ig);
                  if (tp.requires_grad(ig)) {
                    Tensor& gg = tp.grad(ig);
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t c = 0; c < C; ++c) gg[c] += g.at(r, c) * xhat->at(r, c);
                  }
                  if (tp.requires_grad(ib)) {
                    Tensor& gb = tp.grad(ib);
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t c = 0; c < C; ++c) gb[c] += g.at(r, c);
                  }
                  if (tp.requires_grad(ix)) {
                    Tensor& gx = tp.grad(ix);
                    const double n = static_cast<double>(C);
                    for (std::size_t r = 0; r < R; ++r) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t c = 0; c < C; ++c) {
                        const double dh = g.at(r, c) * gv2[c];
                        s1 += dh;
                        s2 += dh * xhat->at(r, c);
                      }
                      for (std::size_t c = 0; c < C; ++c) {
                        const double dh = g.at(r, c) * gv2[c];
                        gx.at(r, c) += (*inv_std)[r] * (dh - s1 / n - xhat->at(r, c) * s2 / n);
                      }
                    }
                  }
                },
                "layer_norm");
}

}  // namespace bayesformer::ad
