#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "relflat/errors.hpp"
#include "relflat/run.hpp"

using nlohmann::json;
using relflat::RunConfig;

namespace {

json tiny_config() {
  return json::parse(R"({
    "dataset": {"kind": "two_moons", "n_train": 40, "n_val": 20, "n_test": 40, "noise": 0.2},
    "model": {"widths": [2, 6, 2], "activation": "tanh", "loss": "cross_entropy"},
    "optim": {"lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4,
              "schedule": {"kind": "cosine"},
              "regularizer": {"kind": "none"}},
    "epochs": 3,
    "batch_size": 16,
    "seed": 5
  })");
}

std::string config_error(const json& j) {
  try {
    relflat::parse_run_config(j);
  } catch (const relflat::ConfigError& e) {
    return e.what();
  }
  return "";
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("relflat_run_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(RunConfig, ParsesTinyConfig) {
  const RunConfig c = relflat::parse_run_config(tiny_config());
  EXPECT_EQ(c.epochs, 3u);
  EXPECT_EQ(c.model.widths, (std::vector<std::size_t>{2, 6, 2}));
  EXPECT_EQ(c.optim.schedule.kind, relflat::ScheduleKind::kCosine);
  EXPECT_EQ(c.dataset.n_train, 40u);
}

TEST(RunConfig, UnknownKeyNamesPath) {
  json j = tiny_config();
  j["optim"]["schedule"]["facter"] = 0.1;
  EXPECT_NE(config_error(j).find("optim.schedule.facter"), std::string::npos) << config_error(j);
  j = tiny_config();
  j["epochz"] = 1;
  EXPECT_NE(config_error(j).find("epochz"), std::string::npos);
}

TEST(RunConfig, TypeErrorNamesPath) {
  json j = tiny_config();
  j["optim"]["lr"] = "fast";
  EXPECT_NE(config_error(j).find("optim.lr"), std::string::npos) << config_error(j);
  j = tiny_config();
  j["model"]["activation"] = "swish";
  EXPECT_NE(config_error(j).find("model.activation"), std::string::npos) << config_error(j);
}

TEST(RunConfig, MissingModelIsError) {
  json j = tiny_config();
  j.erase("model");
  EXPECT_NE(config_error(j).find("model"), std::string::npos);
}

TEST(RunConfig, InvalidValuesAreConfigErrors) {
  json j = tiny_config();
  j["optim"]["regularizer"] = {{"kind", "fam"}, {"samples", 0}, {"mode", "trace-hutchinson"}};
  EXPECT_FALSE(config_error(j).empty());
  j = tiny_config();
  j["optim"]["regularizer"] = {{"kind", "sam"}, {"rho", -1.0}};
  EXPECT_FALSE(config_error(j).empty());
}

TEST(RunConfig, ResolvedFormRoundTrips) {
  json j = tiny_config();
  j["optim"]["regularizer"] = {{"kind", "fam"}, {"lambda", 0.2}};
  const RunConfig c = relflat::parse_run_config(j);
  const json resolved = relflat::to_json(c);
  EXPECT_EQ(resolved["optim"]["regularizer"]["samples"], 1);
  EXPECT_EQ(resolved["optim"]["regularizer"]["mode"], "neuronwise");
  const json again = relflat::to_json(relflat::parse_run_config(resolved));
  EXPECT_EQ(resolved.dump(), again.dump());
}

TEST(RunTraining, OneRowPerEpochWithHeader) {
  RunConfig c = relflat::parse_run_config(tiny_config());
  const auto r = relflat::run_training(c);
  ASSERT_EQ(r.rows.size(), 3u);
  const std::string csv = relflat::metrics_csv(r.rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), relflat::kMetricsHeader);
  EXPECT_EQ(r.rows.back().step, 9u);  // ceil(40 / 16) = 3 steps per epoch
  EXPECT_EQ(r.rows[0].step_ms, 0.0);
  EXPECT_EQ(r.rows[0].loss_evals, 1.0);
  EXPECT_GT(r.final_kappa, 0.0);
}

TEST(RunTraining, OutputFilesAreByteIdenticalAcrossRuns) {
  json j = tiny_config();
  j["optim"]["regularizer"] = {{"kind", "fam"}, {"lambda", 0.1}, {"mode", "trace-hutchinson"}, {"samples", 2}};
  RunConfig a = relflat::parse_run_config(j), b = a;
  a.output_dir = temp_dir("det_a").string();
  b.output_dir = temp_dir("det_b").string();
  relflat::train_to_directory(a);
  relflat::train_to_directory(b);
  for (const char* f : {"metrics.csv", "model.ckpt.json"})
    EXPECT_EQ(slurp(std::filesystem::path(a.output_dir) / f), slurp(std::filesystem::path(b.output_dir) / f)) << f;
  std::filesystem::remove_all(a.output_dir);
  std::filesystem::remove_all(b.output_dir);
}

TEST(RunTraining, ZeroLambdaMatchesNoRegularizer) {
  RunConfig none = relflat::parse_run_config(tiny_config());
  json j = tiny_config();
  j["optim"]["regularizer"] = {{"kind", "fam"}, {"lambda", 0.0}};
  RunConfig fam = relflat::parse_run_config(j);
  const auto a = relflat::run_training(none), b = relflat::run_training(fam);
  EXPECT_EQ(relflat::checkpoint_to_string(a.final_state), relflat::checkpoint_to_string(b.final_state));
}

TEST(RunTraining, SamRecordsTwoLossEvaluations) {
  json j = tiny_config();
  j["optim"]["regularizer"] = {{"kind", "sam"}, {"rho", 0.05}};
  const auto r = relflat::run_training(relflat::parse_run_config(j));
  for (const auto& row : r.rows) EXPECT_EQ(row.loss_evals, 2.0);
}

TEST(RunTraining, PerStepRows) {
  json j = tiny_config();
  j["per_step_rows"] = true;
  const auto r = relflat::run_training(relflat::parse_run_config(j));
  EXPECT_EQ(r.rows.size(), 3u * 3u + 3u);
}

TEST(RunTraining, DivergenceIsReported) {
  json j = tiny_config();
  j["optim"]["lr"] = 1e200;
  j["optim"]["schedule"] = {{"kind", "constant"}};
  EXPECT_THROW(relflat::run_training(relflat::parse_run_config(j)), relflat::TrainingDiverged);
}

TEST(RunTraining, WidthMismatchIsConfigError) {
  json j = tiny_config();
  j["model"]["widths"] = {3, 4, 2};
  EXPECT_THROW(relflat::run_training(relflat::parse_run_config(j)), relflat::ConfigError);
}

TEST(SeedOverride, EnvironmentReplacesSeed) {
  RunConfig c = relflat::parse_run_config(tiny_config());
  ::setenv("RELFLAT_SEED", "17", 1);
  relflat::apply_seed_override(c);
  EXPECT_EQ(c.seed, 17u);
  ::setenv("RELFLAT_SEED", "x1", 1);
  EXPECT_THROW(relflat::apply_seed_override(c), relflat::ConfigError);
  ::unsetenv("RELFLAT_SEED");
}

TEST(LoadData, TwoMoonsArgument) {
  const auto ds = relflat::load_data_argument("two_moons:n=20,noise=0.1,seed=3", relflat::DataRole::kTest);
  EXPECT_EQ(ds.size(), 20u);
  EXPECT_EQ(ds.num_classes, 2u);
}

TEST(LoadData, SplitsAreDisjointStreams) {
  const RunConfig c = relflat::parse_run_config(tiny_config());
  const auto splits = relflat::load_data(c.dataset, c.seed);
  EXPECT_EQ(splits.train.size(), 40u);
  EXPECT_EQ(splits.val.size(), 20u);
  EXPECT_EQ(splits.test.size(), 40u);
  EXPECT_NE(splits.train.x[0], splits.test.x[0]);
}
