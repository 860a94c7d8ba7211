#include "bayesformer/experiment.hpp"

#include <algorithm>
#include <array>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "bayesformer/errors.hpp"
#include "bayesformer/io.hpp"

#ifndef BAYESFORMER_CODE_HASH
#define BAYESFORMER_CODE_HASH "unknown"
#endif

namespace bayesformer::experiment {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- names ----------------------------------------------------------------------

std::string_view dataset_name(Dataset d) {
  switch (d) {
    case Dataset::m1: return "m1";
    case Dataset::m2: return "m2";
    case Dataset::pos: return "pos";
    case Dataset::mnist: return "mnist";
  }
  return "?";
}

Dataset parse_dataset(std::string_view s) {
  for (auto d : kAllDatasets) {
    if (dataset_name(d) == s) return d;
  }
  throw ParseError("unknown dataset '" + std::string(s) + "' (expected m1, m2, pos or mnist)");
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::mle: return "mle";
    case Method::ensemble: return "ensemble";
    case Method::vi: return "vi";
    case Method::subnet_vi: return "subnet-vi";
    case Method::laplace: return "laplace";
    case Method::final_laplace: return "final-laplace";
    case Method::concrete_dropout: return "concrete-dropout";
    case Method::gauss_attn: return "gauss-attn";
    case Method::gauss_attn_dd: return "gauss-attn-dd";
    case Method::dir_attn: return "dir-attn";
    case Method::dir_attn_dd: return "dir-attn-dd";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  for (auto m : kAllMethods) {
    if (method_name(m) == s) return m;
  }
  throw ParseError("unknown method '" + std::string(s) + "'");
}

AttentionMode method_attention(Method m) {
  switch (m) {
    case Method::gauss_attn: return AttentionMode::gaussian;
    case Method::gauss_attn_dd: return AttentionMode::gaussian_dd;
    case Method::dir_attn: return AttentionMode::dirichlet;
    case Method::dir_attn_dd: return AttentionMode::dirichlet_dd;
    default: return AttentionMode::deterministic;
  }
}

namespace {

bool is_toy(Dataset d) { return d == Dataset::m1 || d == Dataset::m2; }
bool is_vi(Method m) { return m == Method::vi || m == Method::subnet_vi; }
bool is_laplace(Method m) { return m == Method::laplace || m == Method::final_laplace; }

// ---- config fields ---------------------------------------------------------------

std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw ParseError("config key '" + key + "': bad value '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ParseError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  bool hashed = true;
};

#define BF_SIZE(sec, name)                                                                     \
  Field {                                                                                      \
    sec, #name, [](const ExperimentConfig& c) { return std::to_string(c.name); },              \
        [](ExperimentConfig& c, const std::string& v) { c.name = parse_number<std::size_t>(#name, v); } \
  }
#define BF_U64(sec, name)                                                                      \
  Field {                                                                                      \
    sec, #name, [](const ExperimentConfig& c) { return std::to_string(c.name); },              \
        [](ExperimentConfig& c, const std::string& v) { c.name = parse_number<std::uint64_t>(#name, v); } \
  }
#define BF_DOUBLE(sec, name)                                                                   \
  Field {                                                                                      \
    sec, #name, [](const ExperimentConfig& c) { return fmt_double(c.name); },                  \
        [](ExperimentConfig& c, const std::string& v) { c.name = parse_number<double>(#name, v); } \
  }
#define BF_BOOL(sec, name)                                                                     \
  Field {                                                                                      \
    sec, #name, [](const ExperimentConfig& c) { return std::string(c.name ? "true" : "false"); }, \
        [](ExperimentConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }       \
  }
#define BF_STRING(sec, name)                                                                   \
  Field {                                                                                      \
    sec, #name, [](const ExperimentConfig& c) { return c.name; },                              \
        [](ExperimentConfig& c, const std::string& v) { c.name = v; }                          \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v{
        Field{"experiment", "dataset", [](const ExperimentConfig& c) { return std::string(dataset_name(c.dataset)); },
              [](ExperimentConfig& c, const std::string& s) { c.dataset = parse_dataset(s); }},
        Field{"experiment", "method", [](const ExperimentConfig& c) { return std::string(method_name(c.method)); },
              [](ExperimentConfig& c, const std::string& s) { c.method = parse_method(s); }},
        BF_U64("experiment", seed),
        BF_U64("experiment", data_seed),
        BF_STRING("experiment", out_dir),
        BF_DOUBLE("model", prior_sharpness),
        BF_SIZE("train", epochs),
        BF_SIZE("train", batch_size),
        BF_DOUBLE("train", base_lr),
        BF_SIZE("train", warmup),
        BF_SIZE("train", d_model),
        BF_BOOL("train", early_stopping),
        BF_SIZE("train", patience),
        BF_STRING("bayes", prior_family),
        BF_DOUBLE("bayes", prior_scale),
        BF_STRING("bayes", prior_file),
        BF_STRING("bayes", posterior_family),
        BF_BOOL("bayes", kl_anneal),
        BF_DOUBLE("bayes", anneal_fraction),
        BF_BOOL("bayes", vi_warm_start),
        BF_SIZE("bayes", n_mc),
        BF_SIZE("bayes", samples),
        BF_SIZE("bayes", ensemble_members),
        BF_DOUBLE("bayes", laplace_prior_precision),
        BF_SIZE("bayes", laplace_max_items),
        BF_STRING("data", data_dir),
        BF_SIZE("data", max_train),
        BF_SIZE("data", max_val),
        BF_SIZE("data", max_test),
        BF_BOOL("data", synthetic_images),
        BF_SIZE("eval", ece_bins),
        BF_SIZE("study", study_replicas),
        BF_SIZE("study", study_epochs),
        BF_DOUBLE("study", sgd_lr),
    };
    for (auto& x : v) {
      // output location and the data root do not change results
      if (std::string(x.key) == "out_dir" || std::string(x.key) == "data_dir") x.hashed = false;
    }
    return v;
  }();
  return f;
}

#undef BF_SIZE
#undef BF_U64
#undef BF_DOUBLE
#undef BF_BOOL
#undef BF_STRING

struct Clock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw FormatError("cannot write '" + p.string() + "'");
  out << text;
}

template <class T>
void truncate(std::vector<T>& v, std::size_t n) {
  if (n && v.size() > n) v.resize(n);
}

}  // namespace

// ---- config ------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig c = *this;
  if (c.epochs == 0) c.epochs = c.dataset == Dataset::mnist ? 150 : 100;
  if (c.samples == 0) c.samples = is_toy(c.dataset) ? 30 : 10;
  if (c.study_epochs == 0) c.study_epochs = c.epochs;
  if (c.data_dir.empty()) {
    const char* env = std::getenv("BAYESFORMER_DATA_DIR");
    c.data_dir = env ? env : "data";
  }
  return c;
}

void ExperimentConfig::validate() const {
  BF_REQUIRE(batch_size >= 1, "config: batch_size must be >= 1");
  BF_REQUIRE(warmup >= 1, "config: warmup must be >= 1");
  BF_REQUIRE(base_lr > 0.0, "config: base_lr must be positive");
  BF_REQUIRE(n_mc >= 1, "config: n_mc must be >= 1");
  BF_REQUIRE(ensemble_members >= 1, "config: ensemble_members must be >= 1");
  BF_REQUIRE(ece_bins >= 1, "config: ece_bins must be >= 1");
  BF_REQUIRE(prior_sharpness > 0.0, "config: prior_sharpness must be positive");
  BF_REQUIRE(anneal_fraction >= 0.0 && anneal_fraction <= 1.0, "config: anneal_fraction must lie in [0, 1]");
  BF_REQUIRE(prior_scale >= 0.0, "config: prior_scale must be >= 0");
  BF_REQUIRE(laplace_prior_precision >= 0.0, "config: laplace_prior_precision must be >= 0");
  BF_REQUIRE(sgd_lr > 0.0, "config: sgd_lr must be positive");
  try {
    dist::parse_family(prior_family);
    dist::parse_family(posterior_family);
  } catch (const std::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  BF_REQUIRE(!synthetic_images || dataset == Dataset::mnist, "config: synthetic_images only applies to mnist");
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentConfig c;
  std::set<std::string> seen;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ParseError(source + ": key '" + section + "' must live inside a [section]");
    }
    for (const auto& [key, value] : body) {
      const Field* f = nullptr;
      for (const auto& x : fields()) {
        if (section == x.section && key == x.key) f = &x;
      }
      if (!f) throw ParseError(source + ": unknown key '" + key + "' in section [" + section + "]");
      f->set(c, value.data());
      seen.insert(section + "." + key);
    }
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) { return parse_config(read_text(path), path.string()); }

std::string to_ini(const ExperimentConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ParseError("override '" + assignment + "': expected section.key=value");
  }
  const std::string section = assignment.substr(0, dot), key = assignment.substr(dot + 1, eq - dot - 1);
  for (const auto& f : fields()) {
    if (section == f.section && key == f.key) {
      f.set(cfg, assignment.substr(eq + 1));
      return;
    }
  }
  throw ParseError("override '" + assignment + "': unknown key");
}

std::string config_hash(const ExperimentConfig& cfg) {
  const ExperimentConfig r = cfg.resolved();
  std::string s;
  for (const auto& f : fields()) {
    if (f.hashed) s += std::string(f.section) + "." + f.key + "=" + f.get(r) + "\n";
  }
  // an improved-prior file is part of the configuration by content
  if (!r.prior_file.empty() && fs::exists(r.prior_file)) s += "prior_file_hash=" + io::file_hash(r.prior_file);
  return io::fnv1a_hex(s);
}

std::string code_hash() { return BAYESFORMER_CODE_HASH; }

json error_json(const std::exception& e) {
  json j{{"error", e.what()}, {"code_hash", code_hash()}};
  if (dynamic_cast<const DivergenceError*>(&e)) {
    const auto& d = static_cast<const DivergenceError&>(e);
    j["type"] = "divergence";
    j["epoch"] = d.epoch;
    j["step"] = d.step;
    j["last_loss"] = std::isfinite(d.last_loss) ? json(d.last_loss) : json(nullptr);
  } else if (dynamic_cast<const ParseError*>(&e)) {
    j["type"] = "parse";
  } else if (dynamic_cast<const FormatError*>(&e)) {
    j["type"] = "format";
  } else if (dynamic_cast<const ContractError*>(&e)) {
    j["type"] = "contract";
  } else if (dynamic_cast<const DomainError*>(&e)) {
    j["type"] = "domain";
  } else if (dynamic_cast<const NumericError*>(&e)) {
    j["type"] = "numeric";
  } else {
    j["type"] = "runtime";
  }
  return j;
}

// ---- data and model ------------------------------------------------------------------

namespace {

fs::path find_with_suffix(const fs::path& dir, const std::string& suffix) {
  if (!fs::is_directory(dir)) return {};
  std::vector<fs::path> hits;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    if (n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0) {
      hits.push_back(e.path());
    }
  }
  std::sort(hits.begin(), hits.end());
  return hits.empty() ? fs::path{} : hits.front();
}

std::array<fs::path, 3> pos_files(const ExperimentConfig& cfg) {
  fs::path dir = fs::path(cfg.data_dir) / "pos";
  if (!fs::is_directory(dir)) dir = cfg.data_dir;
  std::array<fs::path, 3> out{find_with_suffix(dir, "-ud-train.conllu"), find_with_suffix(dir, "-ud-dev.conllu"),
                              find_with_suffix(dir, "-ud-test.conllu")};
  for (const auto& p : out) {
    if (p.empty()) {
      throw FormatError("POS data not found: expected *-ud-train.conllu, *-ud-dev.conllu and *-ud-test.conllu in '" +
                        dir.string() + "'");
    }
  }
  return out;
}

// content hashes of the external files a run read; synthetic data has none
json data_file_hashes(const ExperimentConfig& cfg) {
  json out = json::object();
  if (cfg.dataset == Dataset::pos) {
    for (const auto& p : pos_files(cfg)) out[p.filename().string()] = io::file_hash(p);
  } else if (cfg.dataset == Dataset::mnist && !cfg.synthetic_images) {
    fs::path dir = fs::path(cfg.data_dir) / "mnist";
    if (!data::mnist_available(dir)) dir = cfg.data_dir;
    for (const auto& e : fs::directory_iterator(dir)) {
      const std::string n = e.path().filename().string();
      if (e.is_regular_file() && n.find("-ubyte") != std::string::npos) out[n] = io::file_hash(e.path());
    }
  }
  return out;
}

}  // namespace

data::DataBundle load_data(const ExperimentConfig& cfg_in) {
  const ExperimentConfig cfg = cfg_in.resolved();
  data::DataBundle d;
  switch (cfg.dataset) {
    case Dataset::m1:
    case Dataset::m2: {
      const auto g = cfg.dataset == Dataset::m1 ? data::Generator::m1 : data::Generator::m2;
      d = data::toy_bundle(data::toy_split(g, cfg.data_seed));
      break;
    }
    case Dataset::pos: {
      const auto [tr, dv, te] = pos_files(cfg);
      auto train = data::parse_conllu(tr), val = data::parse_conllu(dv), test = data::parse_conllu(te);
      truncate(train, cfg.max_train);
      truncate(val, cfg.max_val);
      truncate(test, cfg.max_test);
      d = data::tagging_bundle(train, val, test);
      break;
    }
    case Dataset::mnist: {
      if (cfg.synthetic_images) {
        Rng rng(cfg.data_seed);
        data::ImageSplit s;
        s.train = data::synthetic_images(cfg.max_train ? cfg.max_train : 2000, rng);
        s.val = data::synthetic_images(cfg.max_val ? cfg.max_val : 500, rng);
        s.test = data::synthetic_images(cfg.max_test ? cfg.max_test : 1000, rng);
        d = data::image_bundle(std::move(s));
        break;
      }
      fs::path dir = fs::path(cfg.data_dir) / "mnist";
      if (!data::mnist_available(dir)) dir = cfg.data_dir;
      if (!data::mnist_available(dir)) {
        throw FormatError("MNIST files not found under '" + cfg.data_dir +
                          "' (expected train-images-idx3-ubyte etc.; set synthetic_images = true for the stand-in)");
      }
      data::ImageSplit s = data::load_mnist_dir(dir);
      truncate(s.train, cfg.max_train);
      truncate(s.val, cfg.max_val);
      truncate(s.test, cfg.max_test);
      d = data::image_bundle(std::move(s));
      break;
    }
  }
  if (is_toy(cfg.dataset)) {
    for (int k = 0; k < 3; ++k) truncate(d.toy[k], k == 0 ? cfg.max_train : (k == 1 ? cfg.max_val : cfg.max_test));
  }
  return d;
}

ModelConfig model_config(const ExperimentConfig& cfg, const data::DataBundle& data) {
  ModelConfig m;
  switch (cfg.dataset) {
    case Dataset::m1:
    case Dataset::m2: m = ModelConfig::toy(); break;
    case Dataset::pos: m = ModelConfig::pos(data.vocab, data.n_tags); break;
    case Dataset::mnist: m = ModelConfig::mnist(); break;
  }
  m.attention = method_attention(cfg.method);
  m.prior_sharpness = cfg.prior_sharpness;
  m.validate();
  return m;
}

// ---- report ------------------------------------------------------------------------

json RunReport::to_json() const {
  json j;
  j["dataset"] = std::string(dataset_name(config.dataset));
  j["method"] = std::string(method_name(config.method));
  j["config_hash"] = config_hash;
  j["code_hash"] = code_hash;
  j["config_ini"] = to_ini(config);
  json c = json::object();
  for (const auto& f : fields()) c[f.section][f.key] = f.get(config);
  j["config"] = c;
  j["seed"] = config.seed;
  j["data_seed"] = config.data_seed;
  j["wall_seconds"] = wall_seconds;
  j["metrics"] = metrics;
  json bins = json::array();
  for (const auto& b : ece_bins) {
    bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"accuracy", b.accuracy},
                    {"confidence", b.confidence}});
  }
  j["ece_bins"] = bins;
  j["val_curve"] = val_curve;
  j["train_loss"] = train_loss;
  j["notes"] = notes;
  j["optimizer"] = {{"name", "adam"}, {"beta1", AdamSettings{}.beta1}, {"beta2", AdamSettings{}.beta2},
                    {"eps", AdamSettings{}.eps}};
  j["environment"] = {{"compiler", __VERSION__}, {"cxx_standard", static_cast<long>(__cplusplus)}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  j["column"] = column_label(j);
  return j;
}

namespace {

void write_metrics_csv(const fs::path& path, const RunReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "metric,value,bin_lo,bin_hi,count,accuracy,confidence\n";
  for (const auto& [k, v] : r.metrics) os << k << ',' << v << ",,,,,\n";
  for (const auto& b : r.ece_bins) {
    os << "ece_bin,," << b.lo << ',' << b.hi << ',' << b.count << ',' << b.accuracy << ',' << b.confidence << '\n';
  }
  write_text(path, os.str());
}

TrainSettings train_settings(const ExperimentConfig& cfg) {
  TrainSettings s;
  s.epochs = cfg.epochs;
  s.batch_size = cfg.batch_size;
  s.base_lr = cfg.base_lr;
  s.warmup = cfg.warmup;
  s.d_model = cfg.d_model;
  s.seed = cfg.seed;
  s.kl_anneal = cfg.kl_anneal;
  s.anneal_fraction = cfg.anneal_fraction;
  s.n_mc = cfg.n_mc;
  s.early_stopping = cfg.early_stopping;
  s.patience = cfg.patience;
  return s;
}

EpochHook epoch_logger(std::ostream* log, const std::string& what) {
  if (!log) return {};
  return [log, what](std::size_t e, double loss) {
    (*log) << what << " epoch " << e + 1 << " loss " << loss << '\n';
    log->flush();
  };
}

bayes::PriorSpec prior_for(const ExperimentConfig& cfg, const ModelConfig& mc) {
  if (!cfg.prior_file.empty()) return bayes::PriorSpec::from_json(read_text(cfg.prior_file));
  return bayes::PriorSpec::default_for(mc, dist::parse_family(cfg.prior_family), cfg.prior_scale);
}

double laplace_precision(const ExperimentConfig& cfg, const ModelConfig& mc) {
  return cfg.laplace_prior_precision > 0.0 ? cfg.laplace_prior_precision : static_cast<double>(mc.hidden);
}

// Everything needed to evaluate a finished run.
struct Trained {
  std::vector<std::unique_ptr<Transformer>> models;  // one, or the ensemble survivors
  std::optional<bayes::VariationalState> vs;
  std::optional<bayes::LaplaceState> laplace;
  ConcreteDropoutSettings dropout;
  TrainReport train;
};

std::unique_ptr<Transformer> fresh_model(const ExperimentConfig& cfg, const ModelConfig& mc, std::uint64_t seed) {
  auto m = std::make_unique<Transformer>(mc);
  Rng r(seed);
  m->init(r);
  if (cfg.method == Method::concrete_dropout) m->add_dropout_sites(ConcreteDropoutSettings{}.init_p);
  return m;
}

std::string metadata(const ExperimentConfig& cfg, const json& more = json::object()) {
  json j{{"config_hash", config_hash(cfg)}, {"code_hash", code_hash()}, {"config_ini", to_ini(cfg)}};
  for (const auto& [k, v] : more.items()) j[k] = v;
  return j.dump();
}

std::vector<data::Batch> laplace_items(const ExperimentConfig& cfg, const data::DataBundle& data) {
  std::size_t n = data.size(data::Split::train);
  if (cfg.laplace_max_items) n = std::min(n, cfg.laplace_max_items);
  // spread the subset over the whole split
  const std::size_t total = data.size(data::Split::train);
  std::vector<data::Batch> items;
  for (std::size_t i = 0; i < n; ++i) items.push_back(data.batch(data::Split::train, {i * total / n}));
  return items;
}

Trained train_method(const ExperimentConfig& cfg, const data::DataBundle& data, const ModelConfig& mc,
                     std::ostream* log, std::vector<std::string>& notes) {
  Trained t;
  t.dropout.n_train = static_cast<double>(data.size(data::Split::train));
  const TrainSettings ts = train_settings(cfg);
  switch (cfg.method) {
    case Method::ensemble: {
      for (std::size_t k = 0; k < cfg.ensemble_members; ++k) {
        const std::uint64_t seed = cfg.seed * 1000003ULL + k;
        auto m = fresh_model(cfg, mc, seed);
        TrainSettings s = ts;
        s.seed = seed;
        try {
          TrainReport r = train_point(*m, data, s, epoch_logger(log, "member " + std::to_string(k)));
          if (k == 0) t.train = r;
          t.models.push_back(std::move(m));
        } catch (const DivergenceError& e) {
          notes.push_back("ensemble member " + std::to_string(k) + " diverged: " + e.what());
          if (log) (*log) << notes.back() << '\n';
        }
      }
      if (t.models.empty()) throw DivergenceError("every ensemble member diverged", 0, 0, NAN);
      break;
    }
    case Method::vi:
    case Method::subnet_vi: {
      auto m = fresh_model(cfg, mc, cfg.seed);
      if (cfg.method == Method::subnet_vi || cfg.vi_warm_start) {
        train_point(*m, data, ts, epoch_logger(log, "warm-up"));
      }
      const bayes::PriorSpec prior = prior_for(cfg, mc);
      const auto scope = cfg.method == Method::subnet_vi ? bayes::Scope::first_attention : bayes::Scope::all;
      bayes::VariationalState vs = bayes::init_variational(*m, prior, dist::parse_family(cfg.posterior_family), scope);
      t.train = train_vi(*m, vs, data, ts, epoch_logger(log, "vi"));
      t.vs = std::move(vs);
      t.models.push_back(std::move(m));
      break;
    }
    default: {
      auto m = fresh_model(cfg, mc, cfg.seed);
      t.train = train_point(*m, data, ts, epoch_logger(log, "train"));
      if (is_laplace(cfg.method)) {
        const auto scope = cfg.method == Method::laplace ? bayes::LaplaceScope::all : bayes::LaplaceScope::last_layer;
        t.laplace = bayes::fit_laplace(*m, laplace_items(cfg, data), scope, laplace_precision(cfg, mc));
        if (t.laplace->clamped) {
          notes.push_back("laplace: " + std::to_string(t.laplace->clamped) + " negative curvature entries clamped");
        }
      }
      t.models.push_back(std::move(m));
      break;
    }
  }
  return t;
}

void save_trained(const ExperimentConfig& cfg, const Trained& t, const fs::path& dir) {
  fs::create_directories(dir);
  if (cfg.method == Method::ensemble) {
    for (std::size_t k = 0; k < t.models.size(); ++k) {
      io::write_container(dir / ("member_" + std::to_string(k) + ".bftc"),
                          io::from_params(t.models[k]->params(), "model", metadata(cfg, {{"member", k}})));
    }
  } else {
    io::write_container(dir / "model.bftc", io::from_params(t.models[0]->params(), "model", metadata(cfg)));
  }
  if (t.vs) {
    io::Container c{"posterior",
                    metadata(cfg, {{"family", std::string(dist::family_name(t.vs->family))},
                                   {"dof", t.vs->dof},
                                   {"scope", t.vs->scope == bayes::Scope::all ? "all" : "first-attention"},
                                   {"prior", json::parse(t.vs->prior.to_json())}}),
                    {}};
    for (const auto& n : t.vs->names) {
      c.tensors.emplace_back("loc/" + n, t.vs->loc.at(n));
      c.tensors.emplace_back("rho/" + n, t.vs->rho.at(n));
    }
    io::write_container(dir / "posterior.bftc", c);
  }
  if (t.laplace) {
    io::Container c{"laplace",
                    metadata(cfg, {{"prior_precision", t.laplace->prior_precision},
                                   {"scope", t.laplace->scope == bayes::LaplaceScope::all ? "all" : "last-layer"},
                                   {"clamped", t.laplace->clamped},
                                   {"items", t.laplace->items}}),
                    {}};
    for (const auto& n : t.laplace->names) c.tensors.emplace_back("curvature/" + n, t.laplace->curvature.at(n));
    io::write_container(dir / "laplace.bftc", c);
  }
}

void check_provenance(const ExperimentConfig& cfg, const io::Container& c, const fs::path& file) {
  json meta;
  try {
    meta = json::parse(c.metadata);
  } catch (const json::exception&) {
    throw FormatError("'" + file.string() + "' has unreadable metadata");
  }
  const std::string want = config_hash(cfg);
  const std::string got = meta.value("config_hash", std::string());
  if (got != want) {
    throw ContractError("provenance mismatch: '" + file.string() + "' was produced under config hash " + got +
                        ", this config hashes to " + want);
  }
}

Trained load_trained(const ExperimentConfig& cfg, const ModelConfig& mc, const fs::path& dir) {
  Trained t;
  std::vector<fs::path> files;
  if (cfg.method == Method::ensemble) {
    for (std::size_t k = 0;; ++k) {
      const fs::path p = dir / ("member_" + std::to_string(k) + ".bftc");
      if (!fs::exists(p)) break;
      files.push_back(p);
    }
  } else {
    files.push_back(dir / "model.bftc");
  }
  if (files.empty() || !fs::exists(files[0])) throw FormatError("no model container in '" + dir.string() + "'");
  for (const auto& f : files) {
    const io::Container c = io::read_container(f);
    check_provenance(cfg, c, f);
    auto m = fresh_model(cfg, mc, 0);
    io::load_params(m->params(), c);
    t.models.push_back(std::move(m));
  }
  if (is_vi(cfg.method)) {
    const fs::path p = dir / "posterior.bftc";
    const io::Container c = io::read_container(p);
    check_provenance(cfg, c, p);
    const json meta = json::parse(c.metadata);
    const bayes::PriorSpec prior = bayes::PriorSpec::from_json(meta.at("prior").dump());
    const auto scope = cfg.method == Method::subnet_vi ? bayes::Scope::first_attention : bayes::Scope::all;
    bayes::VariationalState vs =
        bayes::init_variational(*t.models[0], prior, dist::parse_family(meta.at("family").get<std::string>()), scope);
    io::load_params(vs.loc, c, "loc/");
    io::load_params(vs.rho, c, "rho/");
    t.vs = std::move(vs);
  }
  if (is_laplace(cfg.method)) {
    const fs::path p = dir / "laplace.bftc";
    const io::Container c = io::read_container(p);
    check_provenance(cfg, c, p);
    const json meta = json::parse(c.metadata);
    bayes::LaplaceState st;
    st.scope = cfg.method == Method::laplace ? bayes::LaplaceScope::all : bayes::LaplaceScope::last_layer;
    st.prior_precision = meta.at("prior_precision").get<double>();
    st.clamped = meta.value("clamped", std::size_t{0});
    st.items = meta.value("items", std::size_t{0});
    st.names = st.scope == bayes::LaplaceScope::all ? t.models[0]->weight_names() : t.models[0]->head_names();
    for (const auto& n : st.names) st.curvature[n] = c.get("curvature/" + n);
    t.laplace = std::move(st);
  }
  return t;
}

void evaluate_trained(const ExperimentConfig& cfg, const data::DataBundle& data, Trained& t, RunReport& rep) {
  Rng rng(cfg.seed ^ 0xE7A1C0DEULL);
  eval::OutputSampler sampler;
  std::size_t batch = 32;
  std::vector<const Transformer*> members;
  for (const auto& m : t.models) members.push_back(m.get());
  if (cfg.method == Method::ensemble) {
    sampler = eval::ensemble_sampler(members);
  } else if (t.vs) {
    sampler = eval::vi_sampler(*t.models[0], *t.vs);
  } else if (t.laplace) {
    sampler = eval::laplace_sampler(*t.models[0], *t.laplace, cfg.samples, rng);
    batch = 1;
  } else {
    sampler = eval::point_sampler(*t.models[0], cfg.method == Method::concrete_dropout ? &t.dropout : nullptr);
  }
  const eval::PredictiveSet ps = eval::collect_predictive(sampler, data, data::Split::test, cfg.samples, rng, batch);
  ps.validate();
  rep.metrics["predictive_samples"] = static_cast<double>(ps.samples);
  rep.metrics["test_items"] = static_cast<double>(ps.size());
  if (data.task == Task::regression) {
    const eval::RegressionMetrics m = eval::metrics_regression(ps, data.toy[2]);
    rep.metrics["log_likelihood"] = m.log_likelihood;
    rep.metrics["ll_per_token"] = m.ll_per_token;
    rep.metrics["mse"] = m.mse;
    rep.metrics["expected_mse"] = m.expected_mse;
    rep.metrics["variance_mse"] = m.variance_mse;
    rep.metrics["variance_mse_residual"] = m.variance_mse_residual;
    rep.metrics["sequences"] = static_cast<double>(m.sequences);
  } else {
    const eval::ClassificationMetrics m = eval::metrics_classification(ps, cfg.ece_bins);
    rep.metrics["log_likelihood"] = m.log_likelihood;
    rep.metrics["accuracy"] = m.accuracy;
    rep.metrics["f1"] = m.f1;
    rep.metrics["ece"] = m.ece;
    rep.ece_bins = m.bins;
    if (data.task == Task::classification) {
      std::vector<std::pair<double, std::size_t>> h;
      for (std::size_t i = 0; i < ps.probs.size(); ++i) h.emplace_back(eval::entropy(eval::mixture_probs(ps.probs[i])), i);
      std::stable_sort(h.begin(), h.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      json hi = json::array(), lo = json::array();
      for (std::size_t k = 0; k < std::min<std::size_t>(4, h.size()); ++k) {
        hi.push_back({{"index", h[k].second}, {"entropy", h[k].first}});
        lo.push_back({{"index", h[h.size() - 1 - k].second}, {"entropy", h[h.size() - 1 - k].first}});
      }
      rep.extra["highest_entropy_test_items"] = hi;
      rep.extra["lowest_entropy_test_items"] = lo;
    }
  }
  if (t.vs) {
    rep.extra["posterior"] = {{"family", std::string(dist::family_name(t.vs->family))},
                              {"prior", json::parse(t.vs->prior.to_json())}};
  }
  if (t.laplace) {
    rep.extra["laplace"] = {{"prior_precision", t.laplace->prior_precision},
                            {"clamped", t.laplace->clamped},
                            {"items", t.laplace->items}};
  }
  if (cfg.method == Method::concrete_dropout) {
    json ps_json = json::object();
    for (const auto& n : t.models[0]->params().names()) {
      if (Transformer::is_dropout(n)) ps_json[n] = 1.0 / (1.0 + std::exp(-t.models[0]->params().at(n)[0]));
    }
    rep.extra["dropout_p"] = ps_json;
  }
  if (cfg.method == Method::ensemble) rep.extra["ensemble_members"] = t.models.size();
}

void write_outputs(const RunReport& rep, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "report.json", rep.to_json().dump(2) + "\n");
  write_metrics_csv(dir / "metrics.csv", rep);
}

}  // namespace

RunReport run(const ExperimentConfig& cfg_in, std::ostream* log) {
  const ExperimentConfig cfg = cfg_in.resolved();
  cfg.validate();
  Clock clock;
  const data::DataBundle data = load_data(cfg);
  const ModelConfig mc = model_config(cfg, data);
  RunReport rep;
  rep.config = cfg;
  rep.config_hash = config_hash(cfg);
  rep.code_hash = code_hash();
  Trained t = train_method(cfg, data, mc, log, rep.notes);
  rep.train_loss = t.train.train_loss;
  rep.val_curve = t.train.val_nll;
  rep.extra["warmup_used"] = t.train.warmup_used;
  rep.extra["train_steps"] = t.train.steps;
  rep.extra["train_examples"] = data.size(data::Split::train);
  if (auto files = data_file_hashes(cfg); !files.empty()) rep.extra["data_files"] = std::move(files);
  save_trained(cfg, t, cfg.out_dir);
  evaluate_trained(cfg, data, t, rep);
  rep.wall_seconds = clock.seconds();
  write_outputs(rep, cfg.out_dir);
  return rep;
}

RunReport evaluate_run(const ExperimentConfig& cfg_in, const fs::path& run_dir, std::ostream* log) {
  const ExperimentConfig cfg = cfg_in.resolved();
  cfg.validate();
  Clock clock;
  const data::DataBundle data = load_data(cfg);
  const ModelConfig mc = model_config(cfg, data);
  Trained t = load_trained(cfg, mc, run_dir);
  t.dropout.n_train = static_cast<double>(data.size(data::Split::train));
  RunReport rep;
  rep.config = cfg;
  rep.config_hash = config_hash(cfg);
  rep.code_hash = code_hash();
  rep.notes.push_back("re-evaluated from '" + run_dir.string() + "'");
  rep.extra["re_evaluated_from"] = run_dir.string();
  if (log) (*log) << "evaluating " << run_dir.string() << '\n';
  evaluate_trained(cfg, data, t, rep);
  rep.wall_seconds = clock.seconds();
  write_outputs(rep, cfg.out_dir);
  return rep;
}

// ---- weight study ----------------------------------------------------------------------

std::vector<eval::WeightStudyRecord> run_weight_study(const ExperimentConfig& cfg_in, std::ostream* log) {
  const ExperimentConfig cfg = cfg_in.resolved();
  cfg.validate();
  BF_REQUIRE(cfg.study_replicas >= 2, "weight study: need at least 2 replicas (covariance undefined)");
  const data::DataBundle data = load_data(cfg);
  ModelConfig mc = model_config(cfg, data);
  mc.attention = AttentionMode::deterministic;
  const fs::path dir = fs::path(cfg.out_dir) / "study";
  fs::create_directories(dir);
  std::vector<ParamStore> replicas;
  std::vector<std::string> names;
  for (std::size_t r = 0; r < cfg.study_replicas; ++r) {
    const std::uint64_t seed = cfg.seed * 1000003ULL + 7919ULL * (r + 1);
    Transformer m(mc);
    Rng init(seed);
    m.init(init);
    TrainSettings s = train_settings(cfg);
    s.epochs = cfg.study_epochs;
    s.seed = seed;
    s.use_sgd = true;
    s.sgd_lr = cfg.sgd_lr;
    s.val_every = 0;
    train_point(m, data, s, epoch_logger(log, "replica " + std::to_string(r)));
    if (log) (*log) << "replica " << r + 1 << "/" << cfg.study_replicas << " trained\n";
    io::write_container(dir / ("replica_" + std::to_string(r) + ".bftc"),
                        io::from_params(m.params(), "model", metadata(cfg, {{"replica", r}})));
    if (names.empty()) names = m.weight_names();
    replicas.push_back(m.params());
  }
  Rng rng(cfg.seed ^ 0x57D1ULL);
  auto records = eval::weight_study(replicas, names, rng);
  eval::write_study_csv(dir, records);
  const bayes::PriorSpec fallback = bayes::PriorSpec::default_for(mc);
  const bayes::PriorSpec improved = eval::improved_prior_from_study(records, fallback.fallback);
  write_text(fs::path(cfg.out_dir) / "improved_prior.json", improved.to_json() + "\n");
  return records;
}

bayes::PriorSpec improved_prior_from_csv(const fs::path& fits_csv, const dist::LocScale& fallback) {
  std::ifstream in(fits_csv);
  if (!in) throw FormatError("cannot open '" + fits_csv.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line.rfind("tensor,family,loc,scale,dof,log_likelihood,best", 0) != 0) {
    throw ParseError(fits_csv.string() + ":1: unexpected header");
  }
  bayes::PriorSpec s;
  s.fallback = fallback;
  std::map<std::string, double> gaussian_scale;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (cols.size() != 7) throw ParseError(fits_csv.string() + ":" + std::to_string(lineno) + ": expected 7 columns");
    if (cols[1] == "gaussian") gaussian_scale[cols[0]] = std::stod(cols[3]);
    if (cols[6] != "1") continue;
    dist::LocScale d;
    try {
      d.family = dist::parse_family(cols[1]);
      d.loc = std::stod(cols[2]);
      d.scale = std::stod(cols[3]);
      if (d.family == dist::Family::student) d.dof = std::stod(cols[4]);
      d.validate();
    } catch (const std::exception& e) {
      throw ParseError(fits_csv.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    s.per_tensor[cols[0]] = d;
  }
  // same rule as improved_prior_from_study: constant tensors keep the fallback
  for (const auto& [name, sd] : gaussian_scale) {
    if (sd < eval::kDegenerateScale) s.per_tensor.erase(name);
  }
  return s;
}

// ---- prior entropy ---------------------------------------------------------------------

EntropySummary summarize_entropy(std::vector<double> draws, std::size_t n_classes) {
  BF_REQUIRE(!draws.empty(), "summarize_entropy: no draws");
  EntropySummary s;
  const double n = static_cast<double>(draws.size());
  s.mean = std::accumulate(draws.begin(), draws.end(), 0.0) / n;
  double v = 0.0;
  for (double d : draws) v += (d - s.mean) * (d - s.mean);
  s.sd = draws.size() > 1 ? std::sqrt(v / (n - 1.0)) : 0.0;
  s.uniform_bound = std::log(static_cast<double>(n_classes));
  s.draws = std::move(draws);
  return s;
}

EntropySummary run_prior_entropy(const ExperimentConfig& cfg_in, const bayes::PriorSpec* prior, std::size_t draws,
                                 std::size_t images, const fs::path& out_csv) {
  const ExperimentConfig cfg = cfg_in.resolved();
  cfg.validate();
  BF_REQUIRE(cfg.dataset == Dataset::mnist, "prior-entropy: needs the image classification dataset");
  BF_REQUIRE(prior != nullptr || method_attention(cfg.method) != AttentionMode::deterministic,
             "prior-entropy: without a weight prior the method must use variational attention");
  ExperimentConfig c = cfg;
  if (c.max_train == 0 || c.max_train > images) c.max_train = images;
  const data::DataBundle data = load_data(c);
  const ModelConfig mc = model_config(cfg, data);
  const std::size_t n = std::min(images, data.size(data::Split::train));
  const data::Batch batch = data.batch(data::Split::train, data::iota(n));
  Rng rng(cfg.seed ^ 0xE27ULL);
  EntropySummary s = summarize_entropy(eval::prior_predictive_entropy(mc, prior, batch, draws, rng), mc.n_outputs);
  std::ostringstream os;
  os << std::setprecision(17) << "draw,mean_entropy_nats,uniform_bound_nats\n";
  for (std::size_t i = 0; i < s.draws.size(); ++i) os << i << ',' << s.draws[i] << ',' << s.uniform_bound << '\n';
  write_text(out_csv, os.str());
  return s;
}

// ---- synthetic data cache ---------------------------------------------------------------

bool generate_data(data::Generator g, std::size_t n, std::uint64_t seed, const fs::path& path, std::size_t seq_len) {
  BF_REQUIRE(n >= 1, "generate-data: n must be >= 1");
  Rng rng(seed);
  const auto seqs = data::generate(g, n, seq_len, rng);
  const data::ToyCacheHeader h{g, n, seq_len, seed};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  data::save_toy_cache(tmp, h, seqs);
  if (fs::exists(path) && io::file_hash(path) == io::file_hash(tmp)) {
    fs::remove(tmp);
    return false;
  }
  fs::rename(tmp, path);
  return true;
}

// ---- report aggregation ---------------------------------------------------------------

std::string column_label(const json& r) {
  const Method m = parse_method(r.at("method").get<std::string>());
  auto fam = [&r]() {
    std::string f = r.at("config").at("bayes").at("posterior_family").get<std::string>();
    std::string label = std::string(dist::family_name(dist::parse_family(f)));
    label[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(label[0])));
    return label;
  };
  const bool improved = !r.at("config").at("bayes").at("prior_file").get<std::string>().empty();
  switch (m) {
    case Method::mle: return "MLE";
    case Method::ensemble: return "Ensemble";
    case Method::vi: return fam() + " VI" + (improved ? " (improved prior)" : "");
    case Method::subnet_vi: return "Subnet " + fam() + " VI" + (improved ? " (improved prior)" : "");
    case Method::laplace: return "Laplace";
    case Method::final_laplace: return "Final Laplace";
    case Method::concrete_dropout: return "Concrete DP";
    case Method::gauss_attn: return "Gauss. Attention";
    case Method::gauss_attn_dd: return "Gauss. DD Attention";
    case Method::dir_attn: return "Dir. Attention";
    case Method::dir_attn_dd: return "Dir. DD Attention";
  }
  return "?";
}

std::map<std::string, std::map<std::string, std::map<std::string, TableCell>>> write_report(
    const std::vector<fs::path>& roots, const fs::path& out_csv) {
  static const std::vector<std::string> kMainColumns = {"MLE",           "Ensemble",    "Gaussian VI",
                                                        "Laplace",       "Final Laplace", "Concrete DP",
                                                        "Gauss. Attention", "Dir. Attention"};
  static const std::vector<std::pair<std::string, std::string>> kToyRows = {
      {"Log-like.", "log_likelihood"}, {"Var. MSE", "variance_mse"}, {"MSE", "mse"}};
  static const std::vector<std::pair<std::string, std::string>> kClassRows = {
      {"Log-like.", "log_likelihood"}, {"Acc.", "accuracy"}, {"F1", "f1"}, {"ECE", "ece"}};

  // dataset -> metric label -> column -> values
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> values;
  std::vector<fs::path> files;
  for (const auto& root : roots) {
    if (fs::is_regular_file(root)) {
      files.push_back(root);
      continue;
    }
    if (!fs::is_directory(root)) throw FormatError("report: '" + root.string() + "' does not exist");
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file() && e.path().filename() == "report.json") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  BF_REQUIRE(!files.empty(), "report: no report.json found");
  std::set<std::string> extra_columns;
  for (const auto& f : files) {
    json r;
    try {
      r = json::parse(read_text(f));
    } catch (const json::exception& e) {
      throw FormatError("report: '" + f.string() + "' is not valid JSON: " + e.what());
    }
    // a re-evaluation repeats its training run
    if (r.contains("re_evaluated_from")) continue;
    const std::string ds = r.at("dataset").get<std::string>();
    const std::string col = column_label(r);
    if (std::find(kMainColumns.begin(), kMainColumns.end(), col) == kMainColumns.end()) extra_columns.insert(col);
    const auto& rows = is_toy(parse_dataset(ds)) ? kToyRows : kClassRows;
    for (const auto& [label, key] : rows) {
      if (r.at("metrics").contains(key)) values[ds][label][col].push_back(r["metrics"][key].get<double>());
    }
  }

  std::map<std::string, std::map<std::string, std::map<std::string, TableCell>>> cells;
  for (const auto& [ds, rows] : values) {
    for (const auto& [label, cols] : rows) {
      for (const auto& [col, v] : cols) {
        TableCell c;
        c.k = v.size();
        c.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(c.k);
        double ss = 0.0;
        for (double x : v) ss += (x - c.mean) * (x - c.mean);
        c.se = c.k > 1 ? std::sqrt(ss / static_cast<double>(c.k - 1)) / std::sqrt(static_cast<double>(c.k)) : 0.0;
        cells[ds][label][col] = c;
      }
    }
  }

  auto emit = [&](const fs::path& path, const std::vector<std::string>& columns) {
    std::ostringstream os;
    os << "Dataset,Metric";
    for (const auto& c : columns) os << ',' << c;
    os << '\n';
    std::ostringstream counts;
    counts << "Dataset,Column,runs\n";
    for (auto d : kAllDatasets) {
      const std::string ds(dataset_name(d));
      if (!cells.count(ds)) continue;
      const auto& rows = is_toy(d) ? kToyRows : kClassRows;
      for (const auto& [label, key] : rows) {
        std::string upper = ds;
        for (auto& ch : upper) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        os << upper << ',' << label;
        for (const auto& c : columns) {
          os << ',';
          auto it = cells[ds][label].find(c);
          if (it == cells[ds][label].end()) continue;
          char buf[96];
          std::snprintf(buf, sizeof buf, "%.4f ± %.4f", it->second.mean, it->second.se);
          os << buf;
        }
        os << '\n';
      }
      for (const auto& c : columns) {
        const auto& first = cells[ds][rows.front().first];
        auto it = first.find(c);
        if (it != first.end()) counts << ds << ',' << c << ',' << it->second.k << '\n';
      }
    }
    write_text(path, os.str());
    return counts.str();
  };
  std::string counts = emit(out_csv, kMainColumns);
  if (!extra_columns.empty()) {
    const fs::path extra = out_csv.parent_path() / (out_csv.stem().string() + "_extra" + out_csv.extension().string());
    const std::string c2 = emit(extra, std::vector<std::string>(extra_columns.begin(), extra_columns.end()));
    counts += c2.substr(c2.find('\n') + 1);
  }
  write_text(out_csv.parent_path() / (out_csv.stem().string() + "_counts.csv"), counts);
  return cells;
}

}  // namespace bayesformer::experiment
