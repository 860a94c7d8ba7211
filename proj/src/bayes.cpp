#include "bayesformer/bayes.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <nlohmann/json.hpp>
#include <set>

#include "bayesformer/errors.hpp"
#include "bayesformer/special.hpp"

namespace bayesformer::bayes {

using ad::Tape;
using ad::Var;
using nlohmann::json;

// ---- losses ----------------------------------------------------------------

BatchLoss batch_loss(Tape& tape, const Transformer& model, const Bound& w, const data::Batch& batch,
                     const ForwardOptions& opt) {
  ForwardResult fr = model.forward(tape, w, batch.input, opt);
  BatchLoss out;
  out.output = fr.output;
  out.attention_kl = fr.attention_kl;
  out.dropout_reg = fr.dropout_reg;
  if (model.config().task == Task::regression) {
    out.nll = gaussian_nll(fr.output, batch.targets, batch.weights);
  } else {
    out.nll = cross_entropy(fr.output, batch.labels, batch.weights);
  }
  return out;
}

Bound bind_model(Tape& tape, Transformer& model, Leaves* leaves, bool trainable, const std::string& key_prefix) {
  Bound b;
  for (const auto& name : model.params().names()) {
    Tensor& t = model.params().at(name);
    Var v = tape.leaf(t, trainable);
    b.set(name, v);
    if (leaves && trainable) leaves->push_back({key_prefix + name, v, &t});
  }
  return b;
}

// ---- priors -------------------------------------------------------------------

const dist::LocScale& PriorSpec::for_tensor(const std::string& name) const {
  auto it = per_tensor.find(name);
  return it == per_tensor.end() ? fallback : it->second;
}

namespace {

json to_json_obj(const dist::LocScale& p) {
  json j{{"family", std::string(dist::family_name(p.family))}, {"loc", p.loc}, {"scale", p.scale}};
  if (p.family == dist::Family::student) j["dof"] = p.dof;
  return j;
}

dist::LocScale from_json_obj(const json& j) {
  if (!j.is_object()) throw FormatError("prior entry must be an object");
  dist::LocScale p;
  try {
    p.family = dist::parse_family(j.at("family").get<std::string>());
    p.loc = j.value("loc", 0.0);
    p.scale = j.at("scale").get<double>();
    p.dof = j.value("dof", 4.0);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad prior entry: ") + e.what());
  }
  p.validate();
  return p;
}

}  // namespace

std::string PriorSpec::to_json() const {
  json j;
  j["default"] = to_json_obj(fallback);
  json t = json::object();
  for (const auto& [name, p] : per_tensor) t[name] = to_json_obj(p);
  j["tensors"] = t;
  return j.dump(2);
}

PriorSpec PriorSpec::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("prior file is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("default")) throw FormatError("prior file needs a \"default\" entry");
  PriorSpec s;
  s.fallback = from_json_obj(j["default"]);
  if (j.contains("tensors")) {
    for (const auto& [name, v] : j["tensors"].items()) s.per_tensor[name] = from_json_obj(v);
  }
  return s;
}

PriorSpec PriorSpec::default_for(const ModelConfig& cfg, dist::Family family, double scale) {
  PriorSpec s;
  s.fallback.family = family;
  s.fallback.loc = 0.0;
  s.fallback.scale = scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  s.fallback.validate();
  return s;
}

// ---- variational ------------------------------------------------------------------

VariationalState init_variational(const Transformer& model, const PriorSpec& prior, dist::Family family,
                                  Scope scope, double init_sigma_frac) {
  BF_REQUIRE(init_sigma_frac > 0.0, "init_variational: init_sigma_frac must be positive");
  VariationalState vs;
  vs.family = family;
  vs.scope = scope;
  vs.prior = prior;
  vs.names = scope == Scope::all ? model.weight_names() : model.first_attention_names();
  for (const auto& n : vs.names) {
    const Tensor& w = model.params().at(n);
    vs.loc.add(n, w);
    const double sigma = init_sigma_frac * prior.for_tensor(n).scale;
    vs.rho.add(n, Tensor(w.shape(), special::inverse_softplus(sigma)));
  }
  return vs;
}

VariationalBinding bind_variational(Tape& tape, Transformer& model, VariationalState& vs, bool trainable) {
  VariationalBinding b;
  const std::set<std::string> in_scope(vs.names.begin(), vs.names.end());
  for (const auto& name : model.params().names()) {
    if (in_scope.count(name)) continue;
    Tensor& t = model.params().at(name);
    const bool train = trainable && vs.scope == Scope::all;
    Var v = tape.leaf(t, train);
    b.base.set(name, v);
    if (train) b.leaves.push_back({"model/" + name, v, &t});
  }
  for (const auto& name : vs.names) {
    Tensor& loc = vs.loc.at(name);
    Tensor& rho = vs.rho.at(name);
    Var l = tape.leaf(loc, trainable);
    Var r = tape.leaf(rho, trainable);
    b.loc[name] = l;
    b.sigma[name] = ad::softplus(r);
    if (trainable) {
      b.leaves.push_back({"loc/" + name, l, &loc});
      b.leaves.push_back({"rho/" + name, r, &rho});
    }
  }
  return b;
}

bool analytic_kl(const VariationalState& vs, const std::string& name) {
  return vs.family == dist::Family::gaussian && vs.prior.for_tensor(name).family == dist::Family::gaussian;
}

Bound draw_weights(Tape& tape, const VariationalBinding& b, const VariationalState& vs, Rng& rng, Var* mc_kl) {
  Bound w = b.base;
  Var kl;
  for (const auto& name : vs.names) {
    const Var& loc = b.loc.at(name);
    const Var& sigma = b.sigma.at(name);
    Tensor eps(loc.value().shape());
    for (auto& e : eps.storage()) e = dist::standard_sample(vs.family, vs.dof, rng);
    Var x = ad::add(loc, ad::mul(sigma, tape.constant(std::move(eps))));
    w.set(name, x);
    if (mc_kl && !analytic_kl(vs, name)) {
      const dist::LocScale& p = vs.prior.for_tensor(name);
      Var lq = log_density_sum(x, loc, sigma, vs.family, vs.dof);
      Var lp = log_density_sum(x, tape.constant(p.loc), tape.constant(p.scale), p.family, p.dof);
      Var term = ad::sub(lq, lp);
      kl = kl.valid() ? ad::add(kl, term) : term;
    }
  }
  if (mc_kl) *mc_kl = kl.valid() ? kl : tape.constant(0.0);
  return w;
}

Bound mean_weights(Tape&, const VariationalBinding& b) {
  Bound w = b.base;
  for (const auto& [name, v] : b.loc) w.set(name, v);
  return w;
}

Var log_density_sum(const Var& x, const Var& loc, const Var& scale, dist::Family f, double dof) {
  const Tensor& xv = x.value();
  const Tensor& lv = loc.value();
  const Tensor& sv = scale.value();
  const bool loc_b = lv.size() == 1, scale_b = sv.size() == 1;
  BF_REQUIRE(loc_b || lv.same_shape(xv), "log_density_sum: loc must be (1,1) or match x");
  BF_REQUIRE(scale_b || sv.same_shape(xv), "log_density_sum: scale must be (1,1) or match x");
  const std::size_t n = xv.size();
  auto score = std::make_shared<std::vector<double>>(n);
  auto ys = std::make_shared<std::vector<double>>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = scale_b ? sv[0] : sv[i];
    if (!(s > 0.0)) throw DomainError("log_density_sum: scale must be positive");
    const double y = (xv[i] - (loc_b ? lv[0] : lv[i])) / s;
    (*ys)[i] = y;
    (*score)[i] = dist::standard_score(f, y, dof);
    total += dist::standard_log_pdf(f, y, dof) - std::log(s);
  }
  const auto xi = x.id(), li = loc.id(), si = scale.id();
  Tape& tape = *x.tape();
  return tape.push(
      Tensor::scalar(total), {x, loc, scale},
      [xi, li, si, score, ys, loc_b, scale_b](Tape& tp, const Tensor& g) {
        const double go = g[0];
        const Tensor& sv = tp.value(si);
        const std::size_t n = score->size();
        const bool want_x = tp.requires_grad(xi), want_l = tp.requires_grad(li), want_s = tp.requires_grad(si);
        Tensor* gx = want_x ? &tp.grad(xi) : nullptr;
        Tensor* gl = want_l ? &tp.grad(li) : nullptr;
        Tensor* gs = want_s ? &tp.grad(si) : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
          const double s = scale_b ? sv[0] : sv[i];
          const double d = go * (*score)[i] / s;
          if (gx) (*gx)[i] += d;
          if (gl) (*gl)[loc_b ? 0 : i] -= d;
          if (gs) (*gs)[scale_b ? 0 : i] += -go * (1.0 + (*ys)[i] * (*score)[i]) / s;
        }
      },
      "log_density_sum");
}

Var gaussian_kl_sum(const Var& mu, const Var& sigma, double m, double s) {
  BF_REQUIRE(s > 0.0, "gaussian_kl_sum: prior scale must be positive");
  const double inv = 1.0 / (s * s);
  const double n = static_cast<double>(mu.value().size());
  // 0.5 * sum((sigma^2 + (mu - m)^2) / s^2 - 1 - ln sigma^2 + ln s^2)
  Var quad = ad::sum(ad::add(ad::square(sigma), ad::square(ad::add_scalar(mu, -m))));
  Var logs = ad::sum(ad::log(sigma));
  Var v = ad::sub(ad::scale(quad, 0.5 * inv), logs);
  return ad::add_scalar(v, n * (std::log(s) - 0.5));
}

ElboTerms elbo(Tape& tape, const Transformer& model, const VariationalBinding& b, const VariationalState& vs,
               const data::Batch& batch, std::size_t n_train, Rng& rng, std::size_t n_mc, double kl_weight) {
  BF_REQUIRE(n_mc >= 1, "elbo: need at least one MC sample");
  BF_REQUIRE(n_train >= 1 && batch.examples >= 1, "elbo: empty batch or training set");
  const double N = static_cast<double>(n_train);
  const double data_scale = N / static_cast<double>(batch.examples);

  Var data_term, kl_term;
  double nll_acc = 0.0;
  ForwardOptions opt;
  opt.rng = &rng;
  for (std::size_t s = 0; s < n_mc; ++s) {
    Var mc;
    Bound w;
    try {
      w = draw_weights(tape, b, vs, rng, &mc);
    } catch (const NumericError& e) {
      throw NumericError(std::string("elbo: KL term: ") + e.what());
    }
    BatchLoss bl;
    try {
      bl = batch_loss(tape, model, w, batch, opt);
    } catch (const NumericError& e) {
      throw NumericError(std::string("elbo: data term: ") + e.what());
    }
    nll_acc += bl.nll.item();
    Var d = ad::add(bl.nll, bl.attention_kl);
    data_term = data_term.valid() ? ad::add(data_term, d) : d;
    kl_term = kl_term.valid() ? ad::add(kl_term, mc) : mc;
  }
  const double inv_mc = 1.0 / static_cast<double>(n_mc);
  Var kl = ad::scale(kl_term, inv_mc);
  try {
    for (const auto& name : vs.names) {
      if (!analytic_kl(vs, name)) continue;
      const dist::LocScale& p = vs.prior.for_tensor(name);
      kl = ad::add(kl, gaussian_kl_sum(b.loc.at(name), b.sigma.at(name), p.loc, p.scale));
    }
  } catch (const NumericError& e) {
    throw NumericError(std::string("elbo: KL term: ") + e.what());
  }
  Var total = ad::add(ad::scale(data_term, data_scale * inv_mc), ad::scale(kl, kl_weight));
  ElboTerms out;
  out.loss = ad::scale(total, 1.0 / N);
  out.kl = kl.item();
  out.nll = nll_acc * inv_mc;
  return out;
}

// ---- Laplace -------------------------------------------------------------------

Tensor LaplaceState::posterior_variance(const std::string& name) const {
  auto it = curvature.find(name);
  if (it == curvature.end()) throw ContractError("laplace: no curvature for '" + name + "'");
  Tensor v = it->second;
  for (auto& x : v.storage()) x = 1.0 / (x + prior_precision);
  return v;
}

OutputKind output_kind(Task t) {
  return t == Task::regression ? OutputKind::gaussian_mean_var : OutputKind::softmax;
}

namespace {

Tensor unit_seed(std::size_t rows, std::size_t cols, std::size_t r, std::size_t c) {
  Tensor s = Tensor::matrix(rows, cols);
  s.at(r, c) = 1.0;
  return s;
}

std::vector<std::string> laplace_names(const Transformer& model, LaplaceScope scope) {
  return scope == LaplaceScope::last_layer ? model.head_names() : model.weight_names();
}

// Binds copies of the model tensors; the in-scope ones become leaves.
Bound bind_copy(Tape& tape, const Transformer& model, const std::vector<std::string>& names, Leaves& leaves) {
  const std::set<std::string> in_scope(names.begin(), names.end());
  Bound b;
  for (const auto& name : model.params().names()) {
    const bool train = in_scope.count(name) != 0;
    Var v = tape.leaf(model.params().at(name), train);
    b.set(name, v);
    if (train) leaves.push_back({name, v, nullptr});
  }
  return b;
}

}  // namespace

std::size_t accumulate_diag_ggn(Tape& tape, const Var& output, const Tensor& row_weights, OutputKind kind,
                                const Leaves& leaves, std::vector<Tensor>& acc) {
  BF_REQUIRE(acc.size() == leaves.size(), "accumulate_diag_ggn: one accumulator per leaf");
  const Tensor& out = output.value();
  const std::size_t rows = out.rows(), cols = out.cols();
  BF_REQUIRE(row_weights.size() == rows, "accumulate_diag_ggn: one weight per output row");
  if (kind == OutputKind::gaussian_mean_var) BF_REQUIRE(cols == 2, "gaussian_mean_var needs 2 output columns");
  if (kind == OutputKind::unit_gaussian) BF_REQUIRE(cols == 1, "unit_gaussian needs 1 output column");

  std::size_t clamped = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double wr = row_weights[r];
    if (wr == 0.0) continue;
    if (kind == OutputKind::softmax) {
      std::vector<double> logits(out.data() + r * cols, out.data() + (r + 1) * cols);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      std::vector<Tensor> s1(leaves.size()), s2(leaves.size());
      for (std::size_t k = 0; k < leaves.size(); ++k) {
        s1[k] = Tensor(leaves[k].var.value().shape());
        s2[k] = Tensor(leaves[k].var.value().shape());
      }
      for (std::size_t c = 0; c < cols; ++c) {
        const double p = logits[c] / z;
        ad::Gradients g = tape.backward(output, unit_seed(rows, cols, r, c));
        for (std::size_t k = 0; k < leaves.size(); ++k) {
          const Tensor j = g.of(leaves[k].var);
          for (std::size_t i = 0; i < j.size(); ++i) {
            s1[k][i] += p * j[i];
            s2[k][i] += p * j[i] * j[i];
          }
        }
      }
      for (std::size_t k = 0; k < leaves.size(); ++k) {
        for (std::size_t i = 0; i < acc[k].size(); ++i) {
          double h = s2[k][i] - s1[k][i] * s1[k][i];
          if (h < 0.0) {
            h = 0.0;
            ++clamped;
          }
          acc[k][i] += wr * h;
        }
      }
      continue;
    }
    std::vector<std::pair<std::size_t, double>> cols_h;
    if (kind == OutputKind::unit_gaussian) {
      cols_h.push_back({0, 1.0});
    } else {
      const double raw = out.at(r, 1);
      const double v = (raw > 30.0 ? raw : std::log1p(std::exp(raw))) + kVarianceFloor;
      const double sg = 1.0 / (1.0 + std::exp(-raw));
      cols_h.push_back({0, 1.0 / v});
      cols_h.push_back({1, sg * sg / (2.0 * v * v)});
    }
    for (const auto& [c, h] : cols_h) {
      ad::Gradients g = tape.backward(output, unit_seed(rows, cols, r, c));
      for (std::size_t k = 0; k < leaves.size(); ++k) {
        const Tensor j = g.of(leaves[k].var);
        for (std::size_t i = 0; i < j.size(); ++i) acc[k][i] += wr * h * j[i] * j[i];
      }
    }
  }
  return clamped;
}

LaplaceState fit_laplace(const Transformer& model, const std::vector<data::Batch>& items, LaplaceScope scope,
                         double prior_precision, std::size_t max_items) {
  BF_REQUIRE(prior_precision > 0.0, "fit_laplace: prior precision must be positive");
  BF_REQUIRE(!items.empty(), "fit_laplace: no training items");
  BF_REQUIRE(!attn::is_gaussian(model.config().attention) && !attn::is_dirichlet(model.config().attention),
             "fit_laplace: needs deterministic attention");
  LaplaceState st;
  st.scope = scope;
  st.prior_precision = prior_precision;
  st.names = laplace_names(model, scope);
  const std::size_t used = max_items == 0 ? items.size() : std::min(max_items, items.size());
  const OutputKind kind = output_kind(model.config().task);

  std::vector<Tensor> acc;
  for (const auto& n : st.names) acc.emplace_back(model.params().at(n).shape());
  for (std::size_t it = 0; it < used; ++it) {
    Tape tape;
    Leaves leaves;
    Bound w = bind_copy(tape, model, st.names, leaves);
    ForwardResult fr = model.forward(tape, w, items[it].input);
    st.clamped += accumulate_diag_ggn(tape, fr.output, items[it].weights, kind, leaves, acc);
  }
  // curvature of a subset stands in for the full training sum
  const double factor = static_cast<double>(items.size()) / static_cast<double>(used);
  for (std::size_t k = 0; k < st.names.size(); ++k) {
    for (auto& v : acc[k].storage()) v *= factor;
    st.curvature[st.names[k]] = std::move(acc[k]);
  }
  st.items = used;
  return st;
}

std::vector<std::map<std::string, Tensor>> laplace_perturbations(const LaplaceState& st, std::size_t n_samples,
                                                                 Rng& rng) {
  std::vector<std::map<std::string, Tensor>> out(n_samples);
  std::map<std::string, Tensor> sd;
  for (const auto& n : st.names) {
    Tensor v = st.posterior_variance(n);
    for (auto& x : v.storage()) x = std::sqrt(x);
    sd[n] = std::move(v);
  }
  for (auto& m : out) {
    for (const auto& n : st.names) {
      Tensor d(sd[n].shape());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = sd[n][i] * rng.normal();
      m[n] = std::move(d);
    }
  }
  return out;
}

std::vector<Tensor> laplace_outputs(const Transformer& model, const LaplaceState& st, const data::Batch& item,
                                    const std::vector<std::map<std::string, Tensor>>& deltas) {
  Tape tape;
  Leaves leaves;
  Bound w = bind_copy(tape, model, st.names, leaves);
  ForwardResult fr = model.forward(tape, w, item.input);
  const Tensor& f0 = fr.output.value();
  std::vector<Tensor> out(deltas.size(), f0);
  const std::size_t rows = f0.rows(), cols = f0.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    if (item.weights[r] == 0.0) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      ad::Gradients g = tape.backward(fr.output, unit_seed(rows, cols, r, c));
      for (const auto& leaf : leaves) {
        const Tensor j = g.of(leaf.var);
        for (std::size_t s = 0; s < deltas.size(); ++s) {
          const Tensor& d = deltas[s].at(leaf.key);
          double dot = 0.0;
          for (std::size_t i = 0; i < j.size(); ++i) dot += j[i] * d[i];
          out[s].at(r, c) += dot;
        }
      }
    }
  }
  return out;
}

}  // namespace bayesformer::bayes
