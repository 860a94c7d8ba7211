#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "bayesformer/errors.hpp"
#include "bayesformer/experiment.hpp"
#include "bayesformer/io.hpp"

using namespace bayesformer;
using namespace bayesformer::experiment;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bf_experiment_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

ExperimentConfig tiny_run(const fs::path& out, Method m = Method::mle) {
  ExperimentConfig c;
  c.dataset = Dataset::m1;
  c.method = m;
  c.epochs = 1;
  c.max_train = 16;
  c.max_val = 4;
  c.max_test = 4;
  c.samples = 3;
  c.ensemble_members = 2;
  c.out_dir = out.string();
  c.data_dir = out.parent_path().string();
  return c;
}

}  // namespace

TEST(Names, RoundTrip) {
  for (auto d : kAllDatasets) EXPECT_EQ(parse_dataset(dataset_name(d)), d);
  for (auto m : kAllMethods) EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_EQ(method_name(Method::subnet_vi), "subnet-vi");
  EXPECT_THROW(parse_method("bayes-by-magic"), ParseError);
  EXPECT_THROW(parse_dataset("cifar"), ParseError);
}

TEST(Config, IniRoundTrip) {
  ExperimentConfig c;
  c.dataset = Dataset::mnist;
  c.method = Method::dir_attn_dd;
  c.seed = 12345678901234ULL;
  c.prior_sharpness = 0.1 + 0.2;
  c.anneal_fraction = 1.0 / 3.0;
  c.posterior_family = "student";
  c.synthetic_images = true;
  const ExperimentConfig back = parse_config(to_ini(c));
  EXPECT_EQ(to_ini(back), to_ini(c));
  EXPECT_EQ(back.prior_sharpness, c.prior_sharpness);
  EXPECT_EQ(back.anneal_fraction, c.anneal_fraction);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, UnknownKeyNamesKeyAndSection) {
  try {
    parse_config("[train]\nepochs = 3\nlearning_rat = 0.1\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("learning_rat"), std::string::npos) << msg;
    EXPECT_NE(msg.find("train"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_config("[train]\nepochs = three\n"), ParseError);
  EXPECT_THROW(parse_config("[bogus]\nx = 1\n"), ParseError);
}

TEST(Config, ResolvedDefaults) {
  ExperimentConfig c;
  EXPECT_EQ(c.resolved().epochs, 100u);
  EXPECT_EQ(c.resolved().samples, 30u);
  c.dataset = Dataset::mnist;
  EXPECT_EQ(c.resolved().epochs, 150u);
  EXPECT_EQ(c.resolved().samples, 10u);
  EXPECT_EQ(c.resolved().study_epochs, 150u);
}

TEST(Config, ValidateRejectsNonsense) {
  ExperimentConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = ExperimentConfig{};
  c.ensemble_members = 0;
  c.method = Method::ensemble;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Config, OverrideAppliesOneKey) {
  ExperimentConfig c;
  apply_override(c, "train.epochs=7");
  apply_override(c, "bayes.posterior_family=laplace");
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_EQ(c.posterior_family, "laplace");
  EXPECT_THROW(apply_override(c, "train.nope=1"), ParseError);
  EXPECT_THROW(apply_override(c, "epochs"), ParseError);
}

TEST(ConfigHash, ExcludesOutputLocationOnly) {
  ExperimentConfig a;
  ExperimentConfig b = a;
  b.out_dir = "elsewhere";
  b.data_dir = "/some/data";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
  b = a;
  b.prior_sharpness = std::nextafter(10.0, 11.0);
  EXPECT_NE(config_hash(a), config_hash(b));
  // unset defaults hash like their resolved values
  b = a;
  b.epochs = 100;
  EXPECT_EQ(config_hash(a), config_hash(b));
}

TEST(ConfigHash, TracksPriorFileContent) {
  const fs::path dir = scratch("prior_hash");
  const fs::path f = dir / "prior.json";
  ExperimentConfig c;
  c.method = Method::vi;
  c.prior_file = f.string();
  std::ofstream(f) << R"({"default": {"family": "gaussian", "loc": 0, "scale": 1, "dof": 4}})";
  const std::string h1 = config_hash(c);
  std::ofstream(f) << R"({"default": {"family": "gaussian", "loc": 0, "scale": 2, "dof": 4}})";
  EXPECT_NE(config_hash(c), h1);
}

TEST(ShippedConfigs, AllParseAndValidate) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(fs::path(BF_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".ini") continue;
    SCOPED_TRACE(e.path().string());
    const ExperimentConfig c = load_config(e.path());
    EXPECT_NO_THROW(c.resolved().validate());
    EXPECT_EQ(e.path().parent_path().filename().string(), dataset_name(c.dataset));
    EXPECT_EQ(e.path().stem().string(), method_name(c.method));
    ++n;
  }
  EXPECT_EQ(n, std::size(kAllDatasets) * std::size(kAllMethods));
}

TEST(ErrorJson, DivergenceCarriesLocation) {
  const auto j = error_json(DivergenceError("loss is nan", 3, 41, 2.5));
  EXPECT_EQ(j["type"], "divergence");
  EXPECT_EQ(j["epoch"], 3);
  EXPECT_EQ(j["step"], 41);
  EXPECT_EQ(j["last_loss"], 2.5);
  EXPECT_EQ(error_json(ParseError("x"))["type"], "parse");
  EXPECT_EQ(error_json(FormatError("x"))["type"], "format");
  EXPECT_EQ(error_json(ContractError("x"))["type"], "contract");
}

TEST(EntropySummary, SampleMoments) {
  const auto s = summarize_entropy({1.0, 2.0, 3.0}, 10);
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.sd, 1.0);
  EXPECT_DOUBLE_EQ(s.uniform_bound, std::log(10.0));
}

TEST(GenerateData, SecondCallIsANoOp) {
  const fs::path f = scratch("gen") / "m2.bftd";
  EXPECT_TRUE(generate_data(data::Generator::m2, 10, 4, f));
  const auto first = slurp(f);
  const auto stamp = fs::last_write_time(f);
  EXPECT_FALSE(generate_data(data::Generator::m2, 10, 4, f));
  EXPECT_EQ(slurp(f), first);
  EXPECT_EQ(fs::last_write_time(f), stamp);
  EXPECT_TRUE(generate_data(data::Generator::m2, 10, 5, f));
  EXPECT_NE(slurp(f), first);
}

TEST(ColumnLabel, MapsMethods) {
  auto report = [](Method m, const std::string& fam, const std::string& prior) {
    nlohmann::json j;
    j["method"] = std::string(method_name(m));
    j["config"]["bayes"]["posterior_family"] = fam;
    j["config"]["bayes"]["prior_file"] = prior;
    return j;
  };
  EXPECT_EQ(column_label(report(Method::mle, "gaussian", "")), "MLE");
  EXPECT_EQ(column_label(report(Method::vi, "gaussian", "")), "Gaussian VI");
  EXPECT_EQ(column_label(report(Method::vi, "laplace", "p.json")), "Laplace VI (improved prior)");
  EXPECT_EQ(column_label(report(Method::subnet_vi, "student", "")), "Subnet Student VI");
  EXPECT_EQ(column_label(report(Method::concrete_dropout, "gaussian", "")), "Concrete DP");
  EXPECT_EQ(column_label(report(Method::dir_attn, "gaussian", "")), "Dir. Attention");
  EXPECT_EQ(column_label(report(Method::gauss_attn_dd, "gaussian", "")), "Gauss. DD Attention");
}

TEST(Report, MeanAndStandardErrorOverSeeds) {
  const fs::path dir = scratch("report");
  const double ll[] = {-1.0, -2.0, -4.0};
  for (int s = 0; s < 3; ++s) {
    RunReport r;
    r.config.method = Method::dir_attn;
    r.config.seed = static_cast<std::uint64_t>(s);
    r.metrics["log_likelihood"] = ll[s];
    r.metrics["mse"] = 0.5;
    fs::create_directories(dir / std::to_string(s));
    std::ofstream(dir / std::to_string(s) / "report.json") << r.to_json().dump();
  }
  const auto cells = write_report({dir}, dir / "table.csv");
  const auto& c = cells.at("m1").at("Log-like.").at("Dir. Attention");
  EXPECT_EQ(c.k, 3u);
  EXPECT_DOUBLE_EQ(c.mean, -7.0 / 3.0);
  const double sd = std::sqrt(((4.0 / 3) * (4.0 / 3) + (1.0 / 3) * (1.0 / 3) + (5.0 / 3) * (5.0 / 3)) / 2.0);
  EXPECT_NEAR(c.se, sd / std::sqrt(3.0), 1e-14);
  EXPECT_EQ(cells.at("m1").at("MSE").at("Dir. Attention").se, 0.0);
  const std::string table = slurp(dir / "table.csv");
  EXPECT_NE(table.find("M1,Log-like.,"), std::string::npos) << table;
  EXPECT_NE(table.find("-2.3333 ± 0.8819"), std::string::npos) << table;
}

TEST(Run, DeterministicAndProvenanceGuarded) {
  const fs::path base = scratch("run");
  const ExperimentConfig a = tiny_run(base / "a");
  const ExperimentConfig b = tiny_run(base / "b");
  const RunReport ra = run(a);
  const RunReport rb = run(b);
  EXPECT_EQ(ra.config_hash, rb.config_hash);
  EXPECT_EQ(ra.metrics, rb.metrics);
  EXPECT_TRUE(fs::exists(base / "a" / "report.json"));
  EXPECT_TRUE(fs::exists(base / "a" / "metrics.csv"));
  EXPECT_TRUE(std::isfinite(ra.metrics.at("log_likelihood")));

  const RunReport again = evaluate_run(a, base / "a");
  EXPECT_EQ(again.metrics.at("log_likelihood"), ra.metrics.at("log_likelihood"));

  ExperimentConfig other = a;
  other.seed = 9;
  EXPECT_THROW(evaluate_run(other, base / "a"), ContractError);
}

TEST(Run, EveryMethodProducesFiniteMetrics) {
  const fs::path base = scratch("methods");
  for (auto m : kAllMethods) {
    SCOPED_TRACE(std::string(method_name(m)));
    ExperimentConfig c = tiny_run(base / std::string(method_name(m)), m);
    c.laplace_max_items = 4;
    const RunReport r = run(c);
    for (const auto& [k, v] : r.metrics) EXPECT_TRUE(std::isfinite(v)) << k;
    EXPECT_EQ(column_label(r.to_json()).empty(), false);
  }
}

namespace {

struct ScratchCleanup : ::testing::Environment {
  void TearDown() override {
    fs::remove_all(fs::temp_directory_path() / ("bf_experiment_test_" + std::to_string(::getpid())));
  }
};

const auto* const kCleanup = ::testing::AddGlobalTestEnvironment(new ScratchCleanup);

}  // namespace
