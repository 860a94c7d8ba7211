#include "bayesformer/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <memory>
#include <numbers>

#include "bayesformer/errors.hpp"
#include "bayesformer/special.hpp"

namespace bayesformer {

using ad::Tape;
using ad::Var;

std::string_view task_name(Task t) {
  switch (t) {
    case Task::regression: return "regression";
    case Task::tagging: return "tagging";
    case Task::classification: return "classification";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  for (auto t : {Task::regression, Task::tagging, Task::classification}) {
    if (name == task_name(t)) return t;
  }
  throw ContractError("unknown task '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  BF_REQUIRE(n_blocks >= 1, "model: n_blocks must be >= 1");
  BF_REQUIRE(n_heads >= 1, "model: n_heads must be >= 1");
  BF_REQUIRE(hidden >= 1 && hidden % n_heads == 0,
             "model: hidden " + std::to_string(hidden) + " not divisible by n_heads " + std::to_string(n_heads));
  BF_REQUIRE(ffn >= 1, "model: ffn width must be >= 1");
  BF_REQUIRE(max_len >= 1, "model: max_len must be >= 1");
  BF_REQUIRE(input_dim >= 1 && n_outputs >= 1, "model: input_dim and n_outputs must be >= 1");
  if (task == Task::regression) BF_REQUIRE(n_outputs == 2, "model: regression head has 2 outputs");
  if (task == Task::classification) {
    BF_REQUIRE(patch_size >= 1 && image_side % patch_size == 0,
               "model: image side " + std::to_string(image_side) + " not divisible by patch " +
                   std::to_string(patch_size));
    const std::size_t n = (image_side / patch_size) * (image_side / patch_size) + 1;
    BF_REQUIRE(max_len >= n, "model: max_len must cover patches plus class token");
  }
  BF_REQUIRE(prior_sharpness > 0.0, "model: prior sharpness must be > 0");
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.n_blocks = 1;
  c.n_heads = 1;
  c.hidden = 64;
  c.ffn = 128;
  c.max_len = 28;
  c.task = Task::regression;
  c.input_dim = 1;
  c.n_outputs = 2;
  return c;
}

ModelConfig ModelConfig::pos(std::size_t vocab, std::size_t n_tags) {
  ModelConfig c;
  c.n_blocks = 1;
  c.n_heads = 1;
  c.hidden = 32;
  c.ffn = 64;
  c.max_len = 40;
  c.task = Task::tagging;
  c.input_dim = vocab;
  c.n_outputs = n_tags;
  return c;
}

ModelConfig ModelConfig::mnist() {
  ModelConfig c;
  c.n_blocks = 2;
  c.n_heads = 1;
  c.hidden = 32;
  c.ffn = 64;
  c.patch_size = 4;
  c.image_side = 28;
  c.max_len = 50;
  c.task = Task::classification;
  c.input_dim = 16;
  c.n_outputs = 10;
  return c;
}

namespace {

std::string bname(std::size_t i, const char* leaf) { return "blocks." + std::to_string(i) + "." + leaf; }

Tensor gaussian_init(std::size_t r, std::size_t c, double sd, Rng& rng) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.storage()) v = sd * rng.normal();
  return t;
}

Var linear(const Var& x, const Var& w, const Var& b) { return ad::add(ad::matmul(x, w), b); }

Tensor tiled_positions(std::size_t batch, std::size_t len, std::size_t hidden) {
  const Tensor pe = sinusoidal_positions(len, hidden);
  Tensor out = Tensor::matrix(batch * len, hidden);
  for (std::size_t b = 0; b < batch; ++b) std::copy(pe.storage().begin(), pe.storage().end(), out.data() + b * pe.size());
  return out;
}

std::size_t amort_width(const ModelConfig& c) {
  return attn::is_gaussian(c.attention) ? c.max_len : 1;
}

}  // namespace

Transformer::Transformer(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(0);
  init(rng);
}

void Transformer::init(Rng& rng) {
  const std::size_t H = cfg_.hidden;
  ParamStore p;
  auto dense = [&](const std::string& w, const std::string& b, std::size_t in, std::size_t out) {
    p.add(w, gaussian_init(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    p.add(b, Tensor::matrix(1, out));
  };
  switch (cfg_.task) {
    case Task::regression:
      dense("embed.w", "embed.b", cfg_.input_dim, H);
      break;
    case Task::tagging:
      p.add("embed.table", gaussian_init(cfg_.input_dim, H, 1.0, rng));
      break;
    case Task::classification:
      dense("patch.w", "patch.b", cfg_.patch_size * cfg_.patch_size, H);
      p.add("cls", Tensor::matrix(1, H));
      p.add("pos", gaussian_init(cfg_.max_len, H, 0.02, rng));
      break;
  }
  for (std::size_t i = 0; i < cfg_.n_blocks; ++i) {
    dense(bname(i, "attn.wq"), bname(i, "attn.bq"), H, H);
    dense(bname(i, "attn.wk"), bname(i, "attn.bk"), H, H);
    dense(bname(i, "attn.wv"), bname(i, "attn.bv"), H, H);
    dense(bname(i, "attn.wo"), bname(i, "attn.bo"), H, H);
    p.add(bname(i, "ln1.g"), Tensor::matrix(1, H, 1.0));
    p.add(bname(i, "ln1.b"), Tensor::matrix(1, H));
    dense(bname(i, "ffn.w1"), bname(i, "ffn.b1"), H, cfg_.ffn);
    dense(bname(i, "ffn.w2"), bname(i, "ffn.b2"), cfg_.ffn, H);
    p.add(bname(i, "ln2.g"), Tensor::matrix(1, H, 1.0));
    p.add(bname(i, "ln2.b"), Tensor::matrix(1, H));
    if (cfg_.attention == AttentionMode::gaussian) p.add(bname(i, "attn.log_var"), Tensor::matrix(1, 1));
    if (cfg_.attention == AttentionMode::dirichlet) {
      p.add(bname(i, "attn.sharpness_raw"), Tensor::matrix(1, 1, special::inverse_softplus(cfg_.prior_sharpness)));
    }
    if (attn::is_data_dependent(cfg_.attention)) {
      dense(bname(i, "amort.w1"), bname(i, "amort.b1"), H, H);
      const std::size_t out = amort_width(cfg_);
      p.add(bname(i, "amort.w2"), Tensor::matrix(H, out));
      const double b0 = attn::is_dirichlet(cfg_.attention) ? special::inverse_softplus(cfg_.prior_sharpness) : 0.0;
      p.add(bname(i, "amort.b2"), Tensor::matrix(1, out, b0));
    }
  }
  if (cfg_.task == Task::classification) {
    p.add("head.w", Tensor::matrix(H, cfg_.n_outputs));
    p.add("head.b", Tensor::matrix(1, cfg_.n_outputs));
  } else {
    dense("head.w", "head.b", H, cfg_.n_outputs);
  }
  params_ = std::move(p);
  const bool had_dropout = has_dropout_;
  has_dropout_ = false;
  if (had_dropout) add_dropout_sites(dropout_init_p_);
}

void Transformer::add_dropout_sites(double init_p) {
  BF_REQUIRE(init_p > 0.0 && init_p < 1.0, "dropout: initial p must lie in (0, 1)");
  const double rho = std::log(init_p) - std::log1p(-init_p);
  for (std::size_t i = 0; i < cfg_.n_blocks; ++i) {
    params_.add("dropout." + bname(i, "ffn_in"), Tensor::scalar(rho));
    params_.add("dropout." + bname(i, "ffn_hidden"), Tensor::scalar(rho));
  }
  params_.add("dropout.head_in", Tensor::scalar(rho));
  has_dropout_ = true;
  dropout_init_p_ = init_p;
}

bool Transformer::is_layer_norm(const std::string& n) {
  return n.find(".ln1.") != std::string::npos || n.find(".ln2.") != std::string::npos;
}

bool Transformer::is_attention_variational(const std::string& n) {
  return n.find("attn.log_var") != std::string::npos || n.find("attn.sharpness_raw") != std::string::npos ||
         n.find(".amort.") != std::string::npos;
}

bool Transformer::is_dropout(const std::string& n) { return n.rfind("dropout.", 0) == 0; }

std::vector<std::string> Transformer::weight_names() const {
  std::vector<std::string> out;
  for (const auto& n : params_.names()) {
    if (!is_layer_norm(n) && !is_attention_variational(n) && !is_dropout(n)) out.push_back(n);
  }
  return out;
}

std::vector<std::string> Transformer::first_attention_names() const {
  std::vector<std::string> out;
  for (const char* leaf : {"attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo"}) {
    out.push_back(bname(0, leaf));
  }
  return out;
}

std::vector<std::string> Transformer::head_names() const { return {"head.w", "head.b"}; }

std::size_t Transformer::block_len(const ModelInput& in) const {
  return cfg_.task == Task::classification ? in.len + 1 : in.len;
}

ad::MaskPtr causal_mask(std::size_t batch, std::size_t len) {
  auto m = std::make_shared<ad::RowMask>();
  m->rows = batch * len;
  m->cols = len;
  m->valid.assign(m->rows * len, 0);
  for (std::size_t r = 0; r < m->rows; ++r) {
    for (std::size_t c = 0; c <= r % len; ++c) m->valid[r * len + c] = 1;
  }
  return m;
}

ad::MaskPtr padding_mask(std::size_t batch, std::size_t len, const std::vector<std::uint8_t>& valid) {
  BF_REQUIRE(valid.size() == batch * len, "padding_mask: valid flags must cover batch * len");
  auto m = std::make_shared<ad::RowMask>();
  m->rows = batch * len;
  m->cols = len;
  m->valid.assign(m->rows * len, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t c = 0; c < len; ++c) any = any || valid[b * len + c];
    BF_REQUIRE(any, "padding_mask: example " + std::to_string(b) + " has no valid token");
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t c = 0; c < len; ++c) m->valid[(b * len + t) * len + c] = valid[b * len + c];
    }
  }
  return m;
}

ad::MaskPtr full_mask(std::size_t batch, std::size_t len) {
  auto m = std::make_shared<ad::RowMask>();
  m->rows = batch * len;
  m->cols = len;
  m->valid.assign(m->rows * len, 1);
  return m;
}

Tensor sinusoidal_positions(std::size_t len, std::size_t hidden) {
  Tensor pe = Tensor::matrix(len, hidden);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i < hidden; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(hidden));
      pe.at(t, i) = i % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq);
    }
  }
  return pe;
}

Tensor patchify(const Tensor& image, std::size_t side, std::size_t patch) {
  BF_REQUIRE(patch >= 1 && side % patch == 0,
             "patchify: side " + std::to_string(side) + " not divisible by patch " + std::to_string(patch));
  BF_REQUIRE(image.size() == side * side, "patchify: image has " + std::to_string(image.size()) +
                                              " pixels, expected " + std::to_string(side * side));
  const std::size_t per = side / patch;
  Tensor out = Tensor::matrix(per * per, patch * patch);
  for (std::size_t pr = 0; pr < per; ++pr) {
    for (std::size_t pc = 0; pc < per; ++pc) {
      for (std::size_t i = 0; i < patch; ++i) {
        for (std::size_t j = 0; j < patch; ++j) {
          out.at(pr * per + pc, i * patch + j) = image[(pr * patch + i) * side + pc * patch + j];
        }
      }
    }
  }
  return out;
}

AttentionOut scaled_dot_attention(const Var& q, const Var& k, const Var& v, std::size_t len,
                                  const ad::MaskPtr& mask, const AttentionSettings& s) {
  BF_REQUIRE(q.rows() == k.rows() && k.rows() == v.rows() && q.cols() == k.cols(),
             "attention: Q " + q.value().shape_string() + ", K " + k.value().shape_string() + ", V " +
                 v.value().shape_string() + " are incompatible");
  Tape& t = *q.tape();
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  const Var scores = ad::scale(ad::block_matmul_nt(q, k, len), inv);
  AttentionOut out;
  switch (s.mode) {
    case AttentionMode::deterministic:
      out.weights = ad::masked_softmax_rows(scores, mask);
      out.kl = t.constant(0.0);
      break;
    case AttentionMode::gaussian:
    case AttentionMode::gaussian_dd: {
      BF_REQUIRE(s.rng != nullptr, "attention: stochastic mode needs an Rng");
      auto r = attn::gaussian_attention(scores, s.log_var, mask, *s.rng);
      out.weights = r.weights;
      out.kl = r.kl;
      break;
    }
    case AttentionMode::dirichlet:
    case AttentionMode::dirichlet_dd: {
      BF_REQUIRE(s.rng != nullptr, "attention: stochastic mode needs an Rng");
      const Var probs = ad::masked_softmax_rows(scores, mask);
      auto r = attn::dirichlet_attention(probs, s.sharpness, mask, s.prior_sharpness, *s.rng, s.gamma_diag,
                                           s.log_gamma_sampler);
      out.weights = r.weights;
      out.kl = r.kl;
      break;
    }
  }
  out.context = ad::block_matmul(out.weights, v, len);
  return out;
}

Var Transformer::embed(Tape& tape, const Bound& w, const ModelInput& in) const {
  const std::size_t B = in.batch, L = in.len, H = cfg_.hidden;
  BF_REQUIRE(B >= 1 && L >= 1, "forward: empty batch");
  switch (cfg_.task) {
    case Task::regression: {
      BF_REQUIRE(in.features.rows() == B * L && in.features.cols() == cfg_.input_dim,
                 "forward: regression features must be (" + std::to_string(B * L) + ", " +
                     std::to_string(cfg_.input_dim) + "), got " + in.features.shape_string());
      BF_REQUIRE(L <= cfg_.max_len, "forward: sequence longer than max_len");
      const Var x = linear(tape.constant(in.features), w("embed.w"), w("embed.b"));
      return ad::add(x, tape.constant(tiled_positions(B, L, H)));
    }
    case Task::tagging: {
      BF_REQUIRE(in.tokens.size() == B * L, "forward: token ids must cover batch * len");
      BF_REQUIRE(L <= cfg_.max_len, "forward: sequence longer than max_len");
      for (auto id : in.tokens) BF_REQUIRE(id < cfg_.input_dim, "forward: token id out of vocabulary");
      const Var x = ad::gather_rows(w("embed.table"), in.tokens);
      return ad::add(x, tape.constant(tiled_positions(B, L, H)));
    }
    case Task::classification: {
      const std::size_t pp = cfg_.patch_size * cfg_.patch_size;
      BF_REQUIRE(in.features.rows() == B * L && in.features.cols() == pp,
                 "forward: patches must be (" + std::to_string(B * L) + ", " + std::to_string(pp) + "), got " +
                     in.features.shape_string());
      BF_REQUIRE(L + 1 <= cfg_.max_len, "forward: too many patches for max_len");
      const Var patches = linear(tape.constant(in.features), w("patch.w"), w("patch.b"));
      const Var stack = ad::concat_rows({w("cls"), patches});
      std::vector<std::size_t> idx(B * (L + 1)), pos(B * (L + 1));
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t <= L; ++t) {
          idx[b * (L + 1) + t] = t == 0 ? 0 : 1 + b * L + (t - 1);
          pos[b * (L + 1) + t] = t;
        }
      }
      return ad::add(ad::gather_rows(stack, idx), ad::gather_rows(w("pos"), pos));
    }
  }
  throw ContractError("forward: unknown task");
}

Var Transformer::dropout_site(const std::string& site, const Var& x, const Var& next_weight, const Bound& w,
                              const ForwardOptions& opt, ForwardResult& res) const {
  if (!has_dropout_ || opt.dropout == nullptr || opt.dropout->frozen_zero) return x;
  BF_REQUIRE(opt.rng != nullptr, "forward: concrete dropout needs an Rng");
  const Var rho = w("dropout." + site);
  const Var reg = concrete_dropout_regularizer(next_weight, rho, x.cols(), *opt.dropout);
  res.dropout_reg = ad::add(res.dropout_reg, reg);
  return concrete_dropout(x, rho, opt.dropout->temperature, *opt.rng);
}

Var Transformer::block(std::size_t i, Tape& tape, const Bound& w, const Var& x, std::size_t len,
                       const ad::MaskPtr& mask, const ForwardOptions& opt, ForwardResult& res) const {
  const Var q = linear(x, w(bname(i, "attn.wq")), w(bname(i, "attn.bq")));
  const Var k = linear(x, w(bname(i, "attn.wk")), w(bname(i, "attn.bk")));
  const Var v = linear(x, w(bname(i, "attn.wv")), w(bname(i, "attn.bv")));

  AttentionSettings s;
  s.mode = cfg_.attention;
  s.prior_sharpness = cfg_.prior_sharpness;
  s.rng = opt.rng;
  s.gamma_diag = opt.gamma_diag;
  s.log_gamma_sampler = opt.log_gamma_sampler;
  if (cfg_.attention == AttentionMode::gaussian) s.log_var = w(bname(i, "attn.log_var"));
  if (cfg_.attention == AttentionMode::dirichlet) s.sharpness = ad::softplus(w(bname(i, "attn.sharpness_raw")));
  if (attn::is_data_dependent(cfg_.attention)) {
    const Var hidden = ad::gelu(linear(x, w(bname(i, "amort.w1")), w(bname(i, "amort.b1"))));
    const Var out = linear(hidden, w(bname(i, "amort.w2")), w(bname(i, "amort.b2")));
    if (attn::is_gaussian(cfg_.attention)) {
      s.log_var = out.cols() == len ? out : ad::slice_cols(out, 0, len);
    } else {
      s.sharpness = ad::softplus(out);
    }
  }

  const std::size_t nh = cfg_.n_heads, dk = cfg_.hidden / nh;
  std::vector<Var> heads;
  for (std::size_t h = 0; h < nh; ++h) {
    const auto cols = [&](const Var& m) { return nh == 1 ? m : ad::slice_cols(m, h * dk, (h + 1) * dk); };
    AttentionOut a = scaled_dot_attention(cols(q), cols(k), cols(v), len, mask, s);
    res.attention_kl = ad::add(res.attention_kl, a.kl);
    if (opt.keep_attention) res.attention.push_back(a.weights.value());
    heads.push_back(a.context);
  }
  const Var ctx = nh == 1 ? heads[0] : ad::concat_cols(heads);
  const Var attn_out = linear(ctx, w(bname(i, "attn.wo")), w(bname(i, "attn.bo")));
  const Var x1 = ad::layer_norm(ad::add(x, attn_out), w(bname(i, "ln1.g")), w(bname(i, "ln1.b")), cfg_.ln_eps);

  const Var f_in = dropout_site(bname(i, "ffn_in"), x1, w(bname(i, "ffn.w1")), w, opt, res);
  Var f = ad::gelu(linear(f_in, w(bname(i, "ffn.w1")), w(bname(i, "ffn.b1"))));
  f = dropout_site(bname(i, "ffn_hidden"), f, w(bname(i, "ffn.w2")), w, opt, res);
  const Var f_out = linear(f, w(bname(i, "ffn.w2")), w(bname(i, "ffn.b2")));
  (void)tape;
  return ad::layer_norm(ad::add(x1, f_out), w(bname(i, "ln2.g")), w(bname(i, "ln2.b")), cfg_.ln_eps);
}

ForwardResult Transformer::forward(Tape& tape, const Bound& w, const ModelInput& in,
                                   const ForwardOptions& opt) const {
  ForwardResult res;
  res.attention_kl = tape.constant(0.0);
  res.dropout_reg = tape.constant(0.0);
  Var h = embed(tape, w, in);
  const std::size_t L = block_len(in);
  ad::MaskPtr mask;
  switch (cfg_.task) {
    case Task::regression: mask = causal_mask(in.batch, L); break;
    case Task::tagging: mask = padding_mask(in.batch, L, in.valid); break;
    case Task::classification: mask = full_mask(in.batch, L); break;
  }
  for (std::size_t i = 0; i < cfg_.n_blocks; ++i) h = block(i, tape, w, h, L, mask, opt, res);
  if (cfg_.task == Task::classification) {
    std::vector<std::size_t> cls(in.batch);
    for (std::size_t b = 0; b < in.batch; ++b) cls[b] = b * L;
    h = ad::gather_rows(h, cls);
  }
  h = dropout_site("head_in", h, w("head.w"), w, opt, res);
  res.output = linear(h, w("head.w"), w("head.b"));
  return res;
}

GaussianOutputs regression_head(const Var& raw) {
  BF_REQUIRE(raw.cols() == 2, "regression_head: expected 2 columns, got " + raw.value().shape_string());
  return {ad::slice_cols(raw, 0, 1), ad::add_scalar(ad::softplus(ad::slice_cols(raw, 1, 2)), kVarianceFloor)};
}

Var gaussian_nll(const Var& raw, const Tensor& target, const Tensor& weight) {
  BF_REQUIRE(target.rows() == raw.rows() && target.cols() == 1 && weight.same_shape(target),
             "gaussian_nll: target/weight must be (" + std::to_string(raw.rows()) + ", 1)");
  const auto g = regression_head(raw);
  Tape& t = *raw.tape();
  const Var resid = ad::sub(t.constant(target), g.mean);
  const Var nll = ad::add(ad::scale(ad::log(ad::scale(g.variance, 2.0 * std::numbers::pi)), 0.5),
                          ad::div(ad::square(resid), ad::scale(g.variance, 2.0)));
  return ad::weighted_sum(nll, weight);
}

Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels, const Tensor& weight) {
  BF_REQUIRE(labels.size() == logits.rows() && weight.size() == logits.rows(),
             "cross_entropy: labels/weights must have one entry per row");
  for (auto l : labels) BF_REQUIRE(l < logits.cols(), "cross_entropy: label out of range");
  const Var lp = ad::pick(ad::log_softmax_rows(logits), labels);
  return ad::neg(ad::weighted_sum(lp, weight.reshaped({logits.rows(), 1})));
}

}  // namespace bayesformer
