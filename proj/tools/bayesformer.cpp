// Command-line front end: bayesformer <subcommand> [options]
// Exit codes: 0 success, 1 usage, 2 runtime failure.

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bayesformer/errors.hpp"
#include "bayesformer/experiment.hpp"

namespace fs = std::filesystem;
namespace ex = bayesformer::experiment;
using nlohmann::json;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c, bool config_required = true) {
  auto* opt = app->add_option("--config", c.config, "experiment INI file");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  app->add_option("--seed", c.seeds, "seed (repeat for several runs)");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--set", c.overrides, "override, e.g. train.epochs=5");
  app->add_flag("--quiet", c.quiet, "no progress output");
}

ex::ExperimentConfig load(const Common& c, std::optional<std::uint64_t> seed) {
  ex::ExperimentConfig cfg = ex::load_config(c.config);
  for (const auto& o : c.overrides) ex::apply_override(cfg, o);
  if (seed) cfg.seed = *seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

void report_error(const std::exception& e, const std::string& out_dir) {
  const json j = ex::error_json(e);
  std::cerr << j.dump() << '\n';
  if (out_dir.empty()) return;
  try {
    fs::create_directories(out_dir);
    std::ofstream(fs::path(out_dir) / "error.json") << j.dump(2) << '\n';
  } catch (...) {
    // the message already went to stderr
  }
}

void print_summary(const ex::RunReport& r) {
  json j{{"out_dir", r.config.out_dir}, {"config_hash", r.config_hash}, {"metrics", r.metrics},
         {"wall_seconds", r.wall_seconds}};
  std::cout << j.dump() << std::endl;
}

// One run per seed; with jobs > 1 the runs go to forked worker processes.
int cmd_train(const Common& c, std::size_t jobs) {
  std::vector<std::optional<std::uint64_t>> seeds;
  for (auto s : c.seeds) seeds.emplace_back(s);
  if (seeds.empty()) seeds.emplace_back(std::nullopt);
  const bool several = seeds.size() > 1;

  auto one = [&](std::optional<std::uint64_t> seed) -> int {
    ex::ExperimentConfig cfg = load(c, seed);
    if (several) cfg.out_dir = (fs::path(cfg.out_dir) / ("seed_" + std::to_string(*seed))).string();
    try {
      const ex::RunReport r = ex::run(cfg, c.quiet ? nullptr : &std::cerr);
      print_summary(r);
      return 0;
    } catch (const std::exception& e) {
      report_error(e, cfg.out_dir);
      return kRuntime;
    }
  };

  if (jobs <= 1 || !several) {
    int rc = 0;
    for (const auto& s : seeds) rc = std::max(rc, one(s));
    return rc;
  }
  int rc = 0;
  std::size_t next = 0, running = 0;
  while (next < seeds.size() || running > 0) {
    while (running < jobs && next < seeds.size()) {
      std::cout.flush();
      std::cerr.flush();
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        int code = kRuntime;
        try {
          code = one(seeds[next]);
        } catch (const std::exception& e) {
          report_error(e, "");
        }
        std::cout.flush();
        _exit(code);
      }
      ++next;
      ++running;
    }
    int status = 0;
    if (wait(&status) > 0) {
      --running;
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) rc = kRuntime;
    }
  }
  return rc;
}

int run_guarded(const std::string& out_dir, const std::function<void()>& f) {
  try {
    f();
    return 0;
  } catch (const std::exception& e) {
    report_error(e, out_dir);
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformers with weight-space and attention-space uncertainty"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "write a synthetic sequence cache");
  std::string gen_name;
  std::size_t gen_n = 960, gen_len = 24;
  std::uint64_t gen_seed = 1;
  std::string gen_out;
  gen->add_option("generator", gen_name, "m1 or m2")->required()->check(CLI::IsMember({"m1", "m2"}));
  gen->add_option("--n", gen_n, "number of sequences")->check(CLI::PositiveNumber);
  gen->add_option("--len", gen_len, "sequence length")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "cache file (default: <data dir>/<gen>_n<N>_seed<S>.bftd)");

  Common train_c;
  std::size_t jobs = 1;
  auto* train = app.add_subcommand("train", "train and evaluate one configuration");
  add_common(train, train_c);
  train->add_option("--jobs", jobs, "parallel worker processes for several seeds")->check(CLI::PositiveNumber);

  Common eval_c;
  std::string run_dir;
  auto* evaluate = app.add_subcommand("evaluate", "re-evaluate saved artifacts");
  add_common(evaluate, eval_c);
  evaluate->add_option("--run", run_dir, "directory of a finished train run")->required()->check(CLI::ExistingDirectory);

  Common study_c;
  std::size_t replicas = 0;
  auto* study = app.add_subcommand("weight-study", "train SGD replicas and study the weight distributions");
  add_common(study, study_c);
  study->add_option("--replicas", replicas, "number of replicas (default from config)");

  Common ip_c;
  std::string fits;
  std::string ip_out;
  auto* improved = app.add_subcommand("improved-priors", "turn study fits into a per-tensor prior file");
  add_common(improved, ip_c);
  improved->add_option("--fits", fits, "study/fits.csv")->required()->check(CLI::ExistingFile);

  Common pe_c;
  std::string prior_file;
  bool attention_prior = false;
  std::size_t draws = 20, images = 64;
  auto* entropy = app.add_subcommand("prior-entropy", "predictive entropy of prior draws on image inputs");
  add_common(entropy, pe_c);
  auto* pf = entropy->add_option("--prior", prior_file, "per-tensor prior JSON")->check(CLI::ExistingFile);
  auto* ap = entropy->add_flag("--attention-prior", attention_prior, "use the method's attention prior instead");
  pf->excludes(ap);
  entropy->add_option("--draws", draws, "prior draws")->check(CLI::PositiveNumber);
  entropy->add_option("--images", images, "images per draw")->check(CLI::PositiveNumber);

  std::vector<std::string> roots;
  std::string table_out = "table.csv";
  auto* report = app.add_subcommand("report", "merge run reports into a results table");
  report->add_option("--runs", roots, "run directories or report.json files")->required();
  report->add_option("--out", table_out, "output CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc == 0) return 0;
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (*gen) {
      return run_guarded("", [&] {
        fs::path out = gen_out;
        if (out.empty()) {
          const char* env = std::getenv("BAYESFORMER_DATA_DIR");
          out = fs::path(env ? env : "data") /
                (gen_name + "_n" + std::to_string(gen_n) + "_seed" + std::to_string(gen_seed) + ".bftd");
        }
        const bool wrote =
            ex::generate_data(bayesformer::data::parse_generator(gen_name), gen_n, gen_seed, out, gen_len);
        std::cout << json{{"path", out.string()}, {"written", wrote}}.dump() << std::endl;
      });
    }
    if (*train) return cmd_train(train_c, jobs);
    if (*evaluate) {
      if (eval_c.seeds.size() > 1) throw CLI::ValidationError("--seed", "evaluate takes at most one seed");
      std::optional<std::uint64_t> seed;
      if (!eval_c.seeds.empty()) seed = eval_c.seeds[0];
      const ex::ExperimentConfig cfg = load(eval_c, seed);
      return run_guarded(cfg.out_dir, [&] {
        print_summary(ex::evaluate_run(cfg, run_dir, eval_c.quiet ? nullptr : &std::cerr));
      });
    }
    if (*study) {
      std::optional<std::uint64_t> seed;
      if (!study_c.seeds.empty()) seed = study_c.seeds[0];
      ex::ExperimentConfig cfg = load(study_c, seed);
      if (replicas) cfg.study_replicas = replicas;
      return run_guarded(cfg.out_dir, [&] {
        const auto records = ex::run_weight_study(cfg, study_c.quiet ? nullptr : &std::cerr);
        json j = json::array();
        for (const auto& r : records) {
          j.push_back({{"tensor", r.tensor},
                       {"best", std::string(bayesformer::dist::family_name(r.fits[r.best].dist.family))},
                       {"excess_kurtosis", r.kurtosis}});
        }
        std::cout << j.dump() << std::endl;
      });
    }
    if (*improved) {
      const ex::ExperimentConfig cfg = load(ip_c, std::nullopt);
      return run_guarded("", [&] {
        const auto data = ex::load_data(cfg);
        const auto mc = ex::model_config(cfg, data);
        const auto fallback = bayesformer::bayes::PriorSpec::default_for(mc).fallback;
        const auto spec = ex::improved_prior_from_csv(fits, fallback);
        const fs::path out = ip_c.out.empty() ? fs::path("improved_prior.json") : fs::path(ip_c.out);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        std::ofstream(out) << spec.to_json() << '\n';
        std::cout << json{{"path", out.string()}, {"tensors", spec.per_tensor.size()}}.dump() << std::endl;
      });
    }
    if (*entropy) {
      if (prior_file.empty() && !attention_prior) {
        throw CLI::RequiredError("one of --prior or --attention-prior");
      }
      std::optional<std::uint64_t> seed;
      if (!pe_c.seeds.empty()) seed = pe_c.seeds[0];
      const ex::ExperimentConfig cfg = load(pe_c, seed);
      return run_guarded(cfg.out_dir, [&] {
        std::optional<bayesformer::bayes::PriorSpec> prior;
        if (!prior_file.empty()) {
          std::ifstream in(prior_file);
          std::stringstream ss;
          ss << in.rdbuf();
          prior = bayesformer::bayes::PriorSpec::from_json(ss.str());
        }
        const auto s = ex::run_prior_entropy(cfg, prior ? &*prior : nullptr, draws, images,
                                             fs::path(cfg.resolved().out_dir) / "entropy.csv");
        std::cout << json{{"mean", s.mean}, {"sd", s.sd}, {"uniform_bound", s.uniform_bound}, {"draws", s.draws.size()}}
                         .dump()
                  << std::endl;
      });
    }
    if (*report) {
      return run_guarded("", [&] {
        std::vector<fs::path> paths(roots.begin(), roots.end());
        const auto cells = ex::write_report(paths, table_out);
        std::cout << json{{"path", table_out}, {"datasets", cells.size()}}.dump() << std::endl;
      });
    }
  } catch (const CLI::Error& e) {
    std::cerr << e.what() << '\n' << app.help();
    return kUsage;
  } catch (const std::exception& e) {
    // config loading failures land here
    report_error(e, "");
    return kRuntime;
  }
  std::cerr << app.help();
  return kUsage;
}
