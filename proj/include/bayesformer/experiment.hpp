#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "bayesformer/bayes.hpp"
#include "bayesformer/data.hpp"
#include "bayesformer/eval.hpp"
#include "bayesformer/model.hpp"
#include "bayesformer/study.hpp"
#include "bayesformer/train.hpp"

// Configuration, orchestration and report files for complete experiments.

namespace bayesformer::experiment {

enum class Dataset { m1, m2, pos, mnist };
enum class Method {
  mle,
  ensemble,
  vi,
  subnet_vi,
  laplace,
  final_laplace,
  concrete_dropout,
  gauss_attn,
  gauss_attn_dd,
  dir_attn,
  dir_attn_dd,
};

inline constexpr Dataset kAllDatasets[] = {Dataset::m1, Dataset::m2, Dataset::pos, Dataset::mnist};
inline constexpr Method kAllMethods[] = {Method::mle,           Method::ensemble,      Method::vi,
                                         Method::subnet_vi,     Method::laplace,       Method::final_laplace,
                                         Method::concrete_dropout, Method::gauss_attn, Method::gauss_attn_dd,
                                         Method::dir_attn,      Method::dir_attn_dd};

std::string_view dataset_name(Dataset d);
Dataset parse_dataset(std::string_view s);
std::string_view method_name(Method m);  // "subnet-vi", "dir-attn-dd", ...
Method parse_method(std::string_view s);
/// Attention mode a method trains with.
AttentionMode method_attention(Method m);

struct ExperimentConfig {
  Dataset dataset = Dataset::m1;
  Method method = Method::mle;
  std::uint64_t seed = 0;       // initialisation, shuffling, sampling
  std::uint64_t data_seed = 1;  // synthetic data
  std::string out_dir = "runs/out";

  // model
  double prior_sharpness = 10.0;

  // training
  std::size_t epochs = 0;  // 0: 100 for sequence tasks, 150 for images
  std::size_t batch_size = 32;
  double base_lr = 1.0;
  std::size_t warmup = 4000;
  std::size_t d_model = 0;  // 0: hidden size
  bool early_stopping = false;
  std::size_t patience = 10;

  // weight-space inference
  std::string prior_family = "gaussian";
  double prior_scale = 0.0;  // 0: 1 / sqrt(hidden)
  std::string prior_file;    // per-tensor prior JSON (improved priors)
  std::string posterior_family = "gaussian";
  bool kl_anneal = true;
  double anneal_fraction = 0.1;
  bool vi_warm_start = false;  // posterior locations from an MLE warm-up
  std::size_t n_mc = 1;
  std::size_t samples = 0;  // predictive samples; 0: 30 toy, 10 otherwise
  std::size_t ensemble_members = 5;
  double laplace_prior_precision = 0.0;  // 0: hidden size
  std::size_t laplace_max_items = 0;     // 0: whole training split

  // data
  std::string data_dir;  // empty: $BAYESFORMER_DATA_DIR
  std::size_t max_train = 0;  // 0: whole split
  std::size_t max_val = 0;
  std::size_t max_test = 0;
  bool synthetic_images = false;  // stand-in images instead of MNIST files

  // evaluation
  std::size_t ece_bins = 15;

  // weight study
  std::size_t study_replicas = 30;
  std::size_t study_epochs = 0;  // 0: same as epochs
  double sgd_lr = 0.002;

  /// Defaults filled in (epochs, samples, data_dir, ...).
  ExperimentConfig resolved() const;
  /// ContractError on invalid combinations or values.
  void validate() const;
};

/// INI text with sections [experiment] [model] [train] [bayes] [data] [eval]
/// [study]. ParseError names the offending key or line.
ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
std::string to_ini(const ExperimentConfig& cfg);
/// Applies one "section.key=value" override; ParseError on unknown keys.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);
/// Hash of every result-affecting setting (out_dir excluded).
std::string config_hash(const ExperimentConfig& cfg);
/// Content hash of the library sources this binary was built from.
std::string code_hash();

/// Structured description of a failure, written as error.json by the CLI.
nlohmann::json error_json(const std::exception& e);

data::DataBundle load_data(const ExperimentConfig& cfg);
ModelConfig model_config(const ExperimentConfig& cfg, const data::DataBundle& data);

struct RunReport {
  ExperimentConfig config;
  std::string config_hash;
  std::string code_hash;
  double wall_seconds = 0.0;
  std::map<std::string, double> metrics;
  std::vector<eval::EceBin> ece_bins;
  std::vector<double> val_curve;
  std::vector<double> train_loss;
  std::vector<std::string> notes;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
};

/// Trains and evaluates one configuration and writes report.json,
/// metrics.csv and the model containers to cfg.out_dir. `log` may be null.
RunReport run(const ExperimentConfig& cfg, std::ostream* log = nullptr);

/// Re-evaluates the artifacts in run_dir. Refuses (ContractError) when they
/// were produced under a different config hash.
RunReport evaluate_run(const ExperimentConfig& cfg, const std::filesystem::path& run_dir,
                       std::ostream* log = nullptr);

/// Trains cfg.study_replicas models with SGD and studies every weight tensor.
/// Writes study/*.csv, replica containers and improved_prior.json under out_dir.
std::vector<eval::WeightStudyRecord> run_weight_study(const ExperimentConfig& cfg, std::ostream* log = nullptr);

/// Reads study/fits.csv (best rows) into a prior spec with the given fallback.
bayes::PriorSpec improved_prior_from_csv(const std::filesystem::path& fits_csv, const dist::LocScale& fallback);

struct EntropySummary {
  std::vector<double> draws;
  double mean = 0.0;
  double sd = 0.0;
  double uniform_bound = 0.0;  // ln(n_classes)
};
EntropySummary summarize_entropy(std::vector<double> draws, std::size_t n_classes);
/// prior == nullptr uses the model's attention prior (cfg.method must be an
/// attention method); otherwise draws weights from the given prior.
EntropySummary run_prior_entropy(const ExperimentConfig& cfg, const bayes::PriorSpec* prior, std::size_t draws,
                                 std::size_t images, const std::filesystem::path& out_csv);

/// Writes the generator cache unless an identical file already exists.
/// Returns true when the file was (re)written.
bool generate_data(data::Generator g, std::size_t n, std::uint64_t seed, const std::filesystem::path& path,
                   std::size_t seq_len = 24);

struct TableCell {
  double mean = 0.0;
  double se = 0.0;
  std::size_t k = 0;
};

/// Table column label of a run: "MLE", "Gaussian VI", "Dir. Attention", ...
std::string column_label(const nlohmann::json& report);

/// Collects report.json files below each root and writes a results table
/// CSV (rows dataset x metric, columns methods, "mean ± SE" over runs).
/// Columns outside the main set go to <stem>_extra.csv and run counts per
/// cell to <stem>_counts.csv. Returns the cells.
std::map<std::string, std::map<std::string, std::map<std::string, TableCell>>> write_report(
    const std::vector<std::filesystem::path>& roots, const std::filesystem::path& out_csv);

}  // namespace bayesformer::experiment
