#pragma once

// Experiment description, data provisioning and the training loop behind
// `relflat train`.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relflat/data.hpp"
#include "relflat/errors.hpp"
#include "relflat/flatness.hpp"
#include "relflat/model.hpp"
#include "relflat/optim.hpp"

namespace relflat {

struct DatasetSpec {
  std::string kind = "two_moons";  // two_moons | csv | idx
  // two_moons
  std::size_t n_train = 200;
  std::size_t n_val = 200;
  std::size_t n_test = 1000;
  double noise = 0.3;
  // csv / idx
  std::string train_path;
  std::string test_path;
  std::string train_labels_path;  // idx only
  std::string test_labels_path;   // idx only
  std::size_t limit = 0;          // keep the first `limit` rows of each file (0 = all)
  double val_fraction = 0.0;      // carve a validation split from train (csv / idx)
  // all kinds
  double label_noise = 0.0;  // training labels only
  bool standardize = true;
  std::optional<std::uint64_t> seed;  // defaults to the run seed
};

struct RunConfig {
  DatasetSpec dataset;
  MlpSpec model;
  OptimConfig optim;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  bool drop_last = false;
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  FlatnessMode kappa_mode = FlatnessMode::kNeuronwise;  // per-epoch full-set kappa column
  std::size_t kappa_samples = 100;                      // when kappa_mode is trace-hutchinson
  bool per_step_rows = false;
  bool record_step_time = false;  // step_ms column is written as 0 unless set

  void validate() const;
};

// Strict parsing: unknown keys and type errors throw ConfigError naming the
// field path (e.g. "optim.schedule.factor").
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
// Fully resolved form: every default written out explicitly.
nlohmann::json to_json(const RunConfig& cfg);

MlpSpec parse_model_spec(const nlohmann::json& j, const std::string& path);
nlohmann::json to_json(const MlpSpec& spec);

struct DataSplits {
  Dataset train;
  Dataset val;  // may be empty (size 0) when the spec asks for none
  Dataset test;
};

DataSplits load_data(const DatasetSpec& spec, std::uint64_t seed);

struct MetricsRow {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double train_loss = 0.0;
  std::optional<double> test_loss;
  std::optional<double> test_acc;
  std::optional<double> kappa;
  double lr = 0.0;
  double step_ms = 0.0;
  double loss_evals = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,step,train_loss,test_loss,test_acc,kappa,lr,step_ms,loss_evals";
std::string format_metrics_row(const MetricsRow& row);
std::string metrics_csv(const std::vector<MetricsRow>& rows);

struct RunResult {
  ModelState final_state;
  std::vector<MetricsRow> rows;  // epoch rows interleaved with step rows when enabled
  double final_kappa = 0.0;      // full-set kappa of the final model (kappa_mode)
  double val_accuracy = 0.0;
  double val_loss = 0.0;
  double test_accuracy = 0.0;
  std::uint64_t steps = 0;
};

// Raised when training produces a non-finite value.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(std::uint64_t step, const std::string& what)
      : NumericError("non-finite value at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

RunResult run_training(const RunConfig& cfg);
RunResult run_training(const RunConfig& cfg, const DataSplits& data);

// run_training plus output files in cfg.output_dir: metrics.csv,
// model.ckpt.json, config.resolved.json.
RunResult train_to_directory(const RunConfig& cfg);

// Replaces cfg.seed with RELFLAT_SEED when that variable is set.
void apply_seed_override(RunConfig& cfg);

enum class DataRole { kTrain, kTest };

// Dataset named on the command line:
//   run.json                          the train or test split of a run config
//   idx:<images>,<labels>             an IDX pair
//   two_moons:n=<n>,noise=<s>,seed=<k> generated points
//   <path>                            a CSV file
Dataset load_data_argument(const std::string& arg, DataRole role);

// Full-set kappa of `state` on `data` in the given mode.
KappaReport dataset_kappa(const ModelState& state, const Dataset& data, FlatnessMode mode, std::size_t samples,
                          RngStream rng);

}  // namespace relflat
