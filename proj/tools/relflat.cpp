// relflat: train, evaluate, measure flatness, check gradients and benchmark
// the flatness modes. Exit codes: 0 success, 1 other error, 2 invalid
// config, 3 non-finite value during training, 4 dense mode over the
// capacity cap, 5 gradient-check tolerance breach.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "relflat/bench.hpp"
#include "relflat/errors.hpp"
#include "relflat/flatness.hpp"
#include "relflat/gradcheck.hpp"
#include "relflat/model.hpp"
#include "relflat/run.hpp"

namespace {

using namespace relflat;

enum ExitCode { kOk = 0, kOther = 1, kBadConfig = 2, kNonFinite = 3, kOverCap = 4, kGradcheckBreach = 5 };

int cmd_train(const std::string& config_path) {
  RunConfig cfg = load_run_config(config_path);
  apply_seed_override(cfg);
  const RunResult result = train_to_directory(cfg);
  std::printf("trained %zu epochs (%llu steps): test_acc=%.4f val_acc=%.4f kappa=%.6g -> %s\n", cfg.epochs,
              static_cast<unsigned long long>(result.steps), result.test_accuracy, result.val_accuracy,
              result.final_kappa, cfg.output_dir.c_str());
  return kOk;
}

int cmd_flatness(const std::string& ckpt, const std::string& data, const std::string& mode, std::size_t samples,
                 std::uint64_t seed) {
  const ModelState state = load_checkpoint(ckpt);
  const Dataset ds = load_data_argument(data, DataRole::kTrain);
  FlatnessMode m;
  try {
    m = parse_flatness_mode(mode);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("--mode: ") + e.what());
  }
  if (samples == 0) throw ConfigError("--samples: must be at least 1");
  const std::size_t layer_params = state.flatness_weight().numel();
  if (m != FlatnessMode::kTraceHutchinson && layer_params > ad::kDefaultDenseCap)
    throw CapacityError("flatness layer has " + std::to_string(layer_params) + " parameters, over the dense cap of " +
                        std::to_string(ad::kDefaultDenseCap) + "; use --mode trace-hutchinson");
  const KappaReport report = dataset_kappa(state, ds, m, samples, RngStream(seed, kHutchinsonStream));
  std::cout << to_json(report) << '\n';
  return kOk;
}

int cmd_gradcheck(const std::string& config_path) {
  const GradcheckConfig cfg = config_path.empty() ? default_gradcheck_config() : load_gradcheck_config(config_path);
  const GradcheckReport report = run_gradcheck(cfg);
  std::cout << report.to_text();
  if (report.passed()) return kOk;
  const SectionResult* worst = report.worst();
  std::cerr << "error: tolerance breach in '" << worst->name << "' at " << worst->worst.to_string() << '\n';
  return kGradcheckBreach;
}

int cmd_bench(const std::string& sizes, const std::vector<std::string>& modes, std::size_t repeats,
              std::size_t samples, std::size_t batch, std::uint64_t seed, const std::string& out_path) {
  BenchConfig cfg;
  if (!modes.empty()) {
    cfg.modes.clear();
    for (const auto& m : modes) cfg.modes.push_back(parse_flatness_mode(m));
  }
  cfg.sizes = parse_bench_sizes(sizes);
  cfg.repeats = repeats;
  cfg.samples = samples;
  cfg.batch_size = batch;
  cfg.seed = seed;
  const auto rows = run_bench(cfg);
  const std::string csv = bench_csv(rows);
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    std::ofstream(out_path) << csv;
  }
  const std::size_t per_size = cfg.modes.size();
  for (std::size_t i = per_size; i < rows.size(); ++i) {
    const BenchRow& a = rows[i - per_size];
    const BenchRow& b = rows[i];
    std::fprintf(stderr, "%s %s -> %s: median x%.2f, per doubling of d*m x%.2f\n", to_string(b.mode).c_str(),
                 a.size.to_string().c_str(), b.size.to_string().c_str(), b.median_ms / a.median_ms,
                 ratio_per_doubling(a, b));
  }
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data) {
  const ModelState state = load_checkpoint(ckpt);
  const Dataset ds = load_data_argument(data, DataRole::kTest);
  const Evaluation ev = evaluate(state, ds.x, ds.y);
  nlohmann::json j;
  j["n"] = ds.size();
  j["loss"] = ev.loss;
  j["accuracy"] = ev.accuracy;
  std::cout << j.dump() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relative flatness measurement and flatness-aware training"};
  app.require_subcommand(1);

  std::string train_config;
  auto* train = app.add_subcommand("train", "Train a model from a JSON run config");
  train->add_option("config", train_config, "Run config (JSON)")->required();

  std::string ckpt, data, mode = "neuronwise";
  std::size_t samples = 100;
  std::uint64_t seed = 0;
  auto* flatness = app.add_subcommand("flatness", "Measure kappa of a checkpoint on a dataset (full set)");
  flatness->add_option("checkpoint", ckpt, "Checkpoint (JSON)")->required();
  flatness->add_option("data", data, "run.json | idx:<images>,<labels> | two_moons:n=..,noise=..,seed=.. | file.csv")
      ->required();
  flatness->add_option("--mode", mode, "neuronwise | trace-exact | trace-hutchinson")->capture_default_str();
  flatness->add_option("--samples", samples, "Hutchinson probes V")->capture_default_str();
  flatness->add_option("--seed", seed, "Probe seed")->capture_default_str();

  std::string gradcheck_config;
  auto* gradcheck = app.add_subcommand("gradcheck", "Check the flatness-aware gradient against its oracles");
  gradcheck->add_option("config", gradcheck_config, "Gradcheck config (JSON); defaults to a 2-3-2 tanh net");

  std::string sizes = "8x8,16x16,32x32", bench_out;
  std::size_t repeats = 5, bench_samples = 10, bench_batch = 256;
  std::uint64_t bench_seed = 0;
  std::vector<std::string> bench_modes;
  auto* bench = app.add_subcommand("bench", "Time the flatness modes across layer sizes (CSV)");
  bench->add_option("--sizes", sizes, "Comma separated DxM layer sizes")->capture_default_str();
  bench->add_option("--modes", bench_modes, "Modes to time (default: all three)")->delimiter(',');
  bench->add_option("--repeats", repeats, "Repeats per (size, mode)")->capture_default_str();
  bench->add_option("--samples", bench_samples, "Hutchinson probes V")->capture_default_str();
  bench->add_option("--batch", bench_batch, "Batch size")->capture_default_str();
  bench->add_option("--seed", bench_seed, "Seed")->capture_default_str();
  bench->add_option("--out", bench_out, "Write the CSV here instead of stdout");

  std::string eval_ckpt, eval_data;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("checkpoint", eval_ckpt, "Checkpoint (JSON)")->required();
  eval->add_option("data", eval_data, "run.json (test split) | idx:.. | two_moons:.. | file.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) return cmd_train(train_config);
    if (*flatness) return cmd_flatness(ckpt, data, mode, samples, seed);
    if (*gradcheck) return cmd_gradcheck(gradcheck_config);
    if (*bench) return cmd_bench(sizes, bench_modes, repeats, bench_samples, bench_batch, bench_seed, bench_out);
    if (*eval) return cmd_eval(eval_ckpt, eval_data);
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid config: " << e.what() << '\n';
    return kBadConfig;
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNonFinite;
  } catch (const CapacityError& e) {
    std::cerr << "error: dense mode over cap: " << e.what() << '\n';
    return kOverCap;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}
