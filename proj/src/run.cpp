#include "relflat/run.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "relflat/errors.hpp"

namespace relflat {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kInitStream = 0x696e6974ULL;
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kKappaStream = 0x6b617070ULL;
constexpr std::uint64_t kLabelNoiseStream = 0x6c6e6f69ULL;

// Reads a JSON object while tracking which keys were consumed, so that
// leftovers can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <class T>
  T get(const char* key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(j_.at(key), key);
  }

  template <class T>
  std::optional<T> get_optional(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return std::nullopt;
    return convert<T>(j_.at(key), key);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(path(key.c_str()) + ": unknown key");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  template <class T>
  T convert(const json& v, const char* key) const {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path(key) + ": expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path(key) + ": expected a string");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path(key) + ": expected a number");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError(path(key) + ": expected a non-negative integer");
    } else {
      if (!v.is_array()) throw ConfigError(path(key) + ": expected an array");
    }
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path(key) + ": wrong element type");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
auto rethrow_with_path(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace

MlpSpec parse_model_spec(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  MlpSpec s;
  s.widths = r.get<std::vector<std::size_t>>("widths", {});
  const auto act = r.get<std::string>("activation", "tanh");
  s.activation = rethrow_with_path(r.path("activation"), [&] { return parse_activation(act); });
  const auto loss = r.get<std::string>("loss", "cross_entropy");
  s.loss = rethrow_with_path(r.path("loss"), [&] { return parse_loss(loss); });
  s.flatness_layer = r.get<std::size_t>("flatness_layer", 0);
  if (const json* b = r.child("use_bias")) {
    if (b->is_boolean()) {
      s.use_bias.clear();
      if (!b->get<bool>()) s.use_bias.assign(s.widths.empty() ? 0 : s.widths.size() - 1, false);
    } else if (b->is_array()) {
      for (const auto& v : *b) {
        if (!v.is_boolean()) throw ConfigError(r.path("use_bias") + ": expected booleans");
        s.use_bias.push_back(v.get<bool>());
      }
    } else {
      throw ConfigError(r.path("use_bias") + ": expected a boolean or a list of booleans");
    }
  }
  r.finish();
  try {
    s.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return s;
}

json to_json(const MlpSpec& spec) {
  json j;
  j["widths"] = spec.widths;
  j["activation"] = to_string(spec.activation);
  j["loss"] = to_string(spec.loss);
  j["flatness_layer"] = spec.flatness_index();
  std::vector<bool> bias;
  for (std::size_t k = 1; k <= spec.num_layers(); ++k) bias.push_back(spec.has_bias(k));
  j["use_bias"] = bias;
  return j;
}

namespace {

DatasetSpec parse_dataset(const json& j) {
  ObjectReader r(j, "dataset");
  DatasetSpec d;
  d.kind = r.get<std::string>("kind", d.kind);
  if (d.kind != "two_moons" && d.kind != "csv" && d.kind != "idx")
    throw ConfigError("dataset.kind: unknown dataset '" + d.kind + "' (two_moons | csv | idx)");
  d.n_train = r.get<std::size_t>("n_train", d.n_train);
  d.n_val = r.get<std::size_t>("n_val", d.n_val);
  d.n_test = r.get<std::size_t>("n_test", d.n_test);
  d.noise = r.get<double>("noise", d.noise);
  d.train_path = r.get<std::string>("train", d.train_path);
  d.test_path = r.get<std::string>("test", d.test_path);
  d.train_labels_path = r.get<std::string>("train_labels", d.train_labels_path);
  d.test_labels_path = r.get<std::string>("test_labels", d.test_labels_path);
  d.limit = r.get<std::size_t>("limit", d.limit);
  d.val_fraction = r.get<double>("val_fraction", d.val_fraction);
  d.label_noise = r.get<double>("label_noise", d.label_noise);
  d.standardize = r.get<bool>("standardize", d.standardize);
  d.seed = r.get_optional<std::uint64_t>("seed");
  r.finish();
  if (d.kind != "two_moons" && d.train_path.empty()) throw ConfigError("dataset.train: required for " + d.kind);
  if (d.kind == "idx" && d.train_labels_path.empty()) throw ConfigError("dataset.train_labels: required for idx");
  if (d.kind == "idx" && !d.test_path.empty() && d.test_labels_path.empty())
    throw ConfigError("dataset.test_labels: required when dataset.test is an idx file");
  if (!(d.label_noise >= 0.0 && d.label_noise <= 1.0)) throw ConfigError("dataset.label_noise: must lie in [0, 1]");
  if (!(d.val_fraction >= 0.0 && d.val_fraction < 1.0)) throw ConfigError("dataset.val_fraction: must lie in [0, 1)");
  if (!(d.noise >= 0.0)) throw ConfigError("dataset.noise: must be non-negative");
  if (d.kind == "two_moons" && (d.n_train % 2 || d.n_val % 2 || d.n_test % 2 || d.n_train == 0 || d.n_test == 0))
    throw ConfigError("dataset: two_moons sizes must be even (n_train and n_test positive)");
  return d;
}

json to_json(const DatasetSpec& d, std::uint64_t run_seed) {
  json j;
  j["kind"] = d.kind;
  if (d.kind == "two_moons") {
    j["n_train"] = d.n_train;
    j["n_val"] = d.n_val;
    j["n_test"] = d.n_test;
    j["noise"] = d.noise;
  } else {
    j["train"] = d.train_path;
    j["test"] = d.test_path;
    if (d.kind == "idx") {
      j["train_labels"] = d.train_labels_path;
      j["test_labels"] = d.test_labels_path;
    }
    j["limit"] = d.limit;
    j["val_fraction"] = d.val_fraction;
  }
  j["label_noise"] = d.label_noise;
  j["standardize"] = d.standardize;
  j["seed"] = d.seed.value_or(run_seed);
  return j;
}

Schedule parse_schedule(const json& j) {
  ObjectReader r(j, "optim.schedule");
  Schedule s;
  const auto kind = r.get<std::string>("kind", "constant");
  s.kind = rethrow_with_path(r.path("kind"), [&] { return parse_schedule_kind(kind); });
  if (s.kind == ScheduleKind::kMultistep) {
    s.milestones = r.get<std::vector<double>>("milestones", {0.3, 0.6, 0.8});
    s.factor = r.get<double>("factor", 0.2);
  }
  r.finish();
  rethrow_with_path("optim.schedule", [&] {
    s.validate();
    return 0;
  });
  return s;
}

void parse_regularizer(const json& j, OptimConfig& o) {
  ObjectReader r(j, "optim.regularizer");
  const auto kind = r.get<std::string>("kind", "none");
  o.regularizer = rethrow_with_path(r.path("kind"), [&] { return parse_regularizer_kind(kind); });
  if (o.regularizer == RegularizerKind::kFam) {
    o.fam.lambda = r.get<double>("lambda", 0.1);
    const auto mode = r.get<std::string>("mode", "neuronwise");
    o.fam.mode = rethrow_with_path(r.path("mode"), [&] { return parse_flatness_mode(mode); });
    o.fam.samples = r.get<std::size_t>("samples", 1);
    const auto hb = r.get<std::string>("hessian_batch", "minibatch");
    o.fam.hessian_batch = rethrow_with_path(r.path("hessian_batch"), [&] { return parse_hessian_batch(hb); });
    o.fam.dense_cap = r.get<std::size_t>("dense_cap", ad::kDefaultDenseCap);
  } else if (o.regularizer == RegularizerKind::kSam) {
    o.rho = r.get<double>("rho", 0.05);
  }
  r.finish();
}

OptimConfig parse_optim(const json& j) {
  ObjectReader r(j, "optim");
  OptimConfig o;
  o.lr = r.get<double>("lr", 0.03);
  o.momentum = r.get<double>("momentum", 0.9);
  o.weight_decay = r.get<double>("weight_decay", 5e-4);
  if (const json* s = r.child("schedule")) o.schedule = parse_schedule(*s);
  if (const json* reg = r.child("regularizer")) parse_regularizer(*reg, o);
  r.finish();
  rethrow_with_path("optim", [&] {
    o.validate();
    return 0;
  });
  return o;
}

json to_json(const OptimConfig& o) {
  json j;
  j["lr"] = o.lr;
  j["momentum"] = o.momentum;
  j["weight_decay"] = o.weight_decay;
  json s;
  s["kind"] = to_string(o.schedule.kind);
  if (o.schedule.kind == ScheduleKind::kMultistep) {
    s["milestones"] = o.schedule.milestones;
    s["factor"] = o.schedule.factor;
  }
  j["schedule"] = s;
  json reg;
  reg["kind"] = to_string(o.regularizer);
  if (o.regularizer == RegularizerKind::kFam) {
    reg["lambda"] = o.fam.lambda;
    reg["mode"] = to_string(o.fam.mode);
    reg["samples"] = o.fam.samples;
    reg["hessian_batch"] = to_string(o.fam.hessian_batch);
    reg["dense_cap"] = o.fam.dense_cap;
  } else if (o.regularizer == RegularizerKind::kSam) {
    reg["rho"] = o.rho;
  }
  j["regularizer"] = reg;
  return j;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  optim.validate();
  if (epochs == 0) throw ConfigError("epochs: must be at least 1");
  if (batch_size == 0) throw ConfigError("batch_size: must be at least 1");
  if (kappa_samples == 0) throw ConfigError("kappa_samples: must be at least 1");
  const std::size_t layer_params = model.widths[model.flatness_index()] * model.widths[model.flatness_index() - 1];
  if (kappa_mode != FlatnessMode::kTraceHutchinson && layer_params > ad::kDefaultDenseCap)
    throw ConfigError("kappa_mode: dense mode over a " + std::to_string(layer_params) +
                      "-parameter layer exceeds the cap; use trace-hutchinson");
  if (optim.regularizer == RegularizerKind::kFam && optim.fam.dense() && layer_params > optim.fam.dense_cap)
    throw ConfigError("optim.regularizer.mode: dense mode over a " + std::to_string(layer_params) +
                      "-parameter layer exceeds dense_cap; use trace-hutchinson");
}

RunConfig parse_run_config(const json& j) {
  ObjectReader r(j, "");
  RunConfig c;
  if (const json* d = r.child("dataset")) c.dataset = parse_dataset(*d);
  const json* m = r.child("model");
  if (!m) throw ConfigError("model: required");
  c.model = parse_model_spec(*m, "model");
  if (const json* o = r.child("optim")) c.optim = parse_optim(*o);
  c.epochs = r.get<std::size_t>("epochs", c.epochs);
  c.batch_size = r.get<std::size_t>("batch_size", c.batch_size);
  c.drop_last = r.get<bool>("drop_last", c.drop_last);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  c.output_dir = r.get<std::string>("output_dir", c.output_dir);
  const auto km = r.get<std::string>("kappa_mode", "neuronwise");
  c.kappa_mode = rethrow_with_path("kappa_mode", [&] { return parse_flatness_mode(km); });
  c.kappa_samples = r.get<std::size_t>("kappa_samples", c.kappa_samples);
  c.per_step_rows = r.get<bool>("per_step_rows", c.per_step_rows);
  c.record_step_time = r.get<bool>("record_step_time", c.record_step_time);
  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  json j;
  j["dataset"] = to_json(c.dataset, c.seed);
  j["model"] = to_json(c.model);
  j["optim"] = to_json(c.optim);
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["drop_last"] = c.drop_last;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["kappa_mode"] = to_string(c.kappa_mode);
  j["kappa_samples"] = c.kappa_samples;
  j["per_step_rows"] = c.per_step_rows;
  j["record_step_time"] = c.record_step_time;
  return j;
}

// --- data -------------------------------------------------------------------

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k) { return RngStream(seed, k).next_u64(); }

Dataset truncate_rows(const Dataset& ds, std::size_t limit) {
  if (limit == 0 || limit >= ds.size()) return ds;
  std::vector<std::size_t> idx(limit);
  for (std::size_t i = 0; i < limit; ++i) idx[i] = i;
  return ds.subset(idx);
}

}  // namespace

DataSplits load_data(const DatasetSpec& spec, std::uint64_t run_seed) {
  const std::uint64_t seed = spec.seed.value_or(run_seed);
  DataSplits out;
  if (spec.kind == "two_moons") {
    out.train = gen_two_moons(spec.n_train, spec.noise, derive_seed(seed, 1));
    if (spec.n_val > 0) out.val = gen_two_moons(spec.n_val, spec.noise, derive_seed(seed, 2));
    out.test = gen_two_moons(spec.n_test, spec.noise, derive_seed(seed, 3));
  } else {
    Dataset train;
    std::optional<Dataset> test;
    if (spec.kind == "csv") {
      train = read_csv(spec.train_path);
      if (!spec.test_path.empty()) test = read_csv(spec.test_path);
    } else {
      train = read_idx(spec.train_path, spec.train_labels_path);
      if (!spec.test_path.empty()) test = read_idx(spec.test_path, spec.test_labels_path);
    }
    train = truncate_rows(train, spec.limit);
    if (!test) {
      auto [a, b] = split_dataset(train, 0.8, derive_seed(seed, 4));
      train = std::move(a);
      test = std::move(b);
    } else {
      test = truncate_rows(*test, spec.limit);
    }
    if (spec.val_fraction > 0.0) {
      auto [a, b] = split_dataset(train, 1.0 - spec.val_fraction, derive_seed(seed, 5));
      train = std::move(a);
      out.val = std::move(b);
    }
    const std::size_t classes = std::max(train.num_classes, test->num_classes);
    train.num_classes = classes;
    test->num_classes = classes;
    if (out.val.x.rank() == 2 && out.val.size() > 0) out.val.num_classes = classes;
    out.train = std::move(train);
    out.test = std::move(*test);
  }
  if (spec.label_noise > 0.0) {
    RngStream rng(seed, kLabelNoiseStream);
    flip_labels(out.train, spec.label_noise, rng);
  }
  if (spec.standardize) {
    const Standardizer s = Standardizer::fit(out.train);
    s.apply(out.train);
    if (out.val.x.rank() == 2 && out.val.size() > 0) s.apply(out.val);
    s.apply(out.test);
  }
  return out;
}

// --- metrics ------------------------------------------------------------------

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

bool has_rows(const Dataset& ds) { return ds.x.rank() == 2 && ds.size() > 0; }

}  // namespace

std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream os;
  os << r.epoch << ',' << r.step << ',' << num(r.train_loss) << ',' << opt_num(r.test_loss) << ','
     << opt_num(r.test_acc) << ',' << opt_num(r.kappa) << ',' << num(r.lr) << ',' << num(r.step_ms) << ','
     << num(r.loss_evals);
  return os.str();
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (const auto& r : rows) {
    out += format_metrics_row(r);
    out += '\n';
  }
  return out;
}

KappaReport dataset_kappa(const ModelState& state, const Dataset& data, FlatnessMode mode, std::size_t samples,
                          RngStream rng) {
  const LossRecord rec = forward_loss(state, data.x, data.y);
  FlatnessConfig cfg;
  cfg.mode = mode;
  cfg.samples = samples;
  cfg.rng = rng;
  return measure_kappa(rec.loss, rec.params.weights[state.spec.flatness_index() - 1], cfg);
}

// --- training loop ------------------------------------------------------------

RunResult run_training(const RunConfig& cfg) { return run_training(cfg, load_data(cfg.dataset, cfg.seed)); }

RunResult run_training(const RunConfig& cfg, const DataSplits& data) {
  cfg.validate();
  const MlpSpec& spec = cfg.model;
  if (data.train.features() != spec.widths.front())
    throw ConfigError("model.widths: input width " + std::to_string(spec.widths.front()) + " does not match " +
                      std::to_string(data.train.features()) + " features");
  if (spec.loss == LossKind::kCrossEntropy && spec.widths.back() < data.train.num_classes)
    throw ConfigError("model.widths: " + std::to_string(spec.widths.back()) + " outputs for " +
                      std::to_string(data.train.num_classes) + " classes");

  RngStream init_rng(cfg.seed, kInitStream);
  RunResult result;
  result.final_state = init_model(spec, init_rng);
  ModelState& state = result.final_state;
  OptimState opt = OptimState::for_model(state);
  OptimConfig optim = cfg.optim;
  optim.fam.rng = RngStream(cfg.seed, kHutchinsonStream);
  BatchPlan plan{cfg.batch_size, RngStream(cfg.seed, kShuffleStream), cfg.drop_last};
  const bool full_set = optim.regularizer == RegularizerKind::kFam && optim.fam.hessian_batch == HessianBatch::kFullSet;
  const RngStream kappa_rng(cfg.seed, kKappaStream);

  using Clock = std::chrono::steady_clock;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.epoch = epoch;
    const double lr = lr_at(optim.schedule, optim.lr, static_cast<double>(epoch), static_cast<double>(cfg.epochs));
    double ms_total = 0.0, evals_total = 0.0;
    std::size_t steps_in_epoch = 0;
    for (const Batch& b : batches(data.train, plan, epoch)) {
      ++step;
      const auto t0 = Clock::now();
      StepStats stats;
      try {
        stats = train_step(state, b.x, b.y, opt, optim, lr, full_set ? &data.train.x : nullptr,
                           full_set ? &data.train.y : nullptr);
      } catch (const NumericError& e) {
        throw TrainingDiverged(step, e.what());
      }
      if (!std::isfinite(stats.loss)) throw TrainingDiverged(step, "loss");
      const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      ms_total += ms;
      evals_total += static_cast<double>(stats.loss_evals);
      ++steps_in_epoch;
      if (cfg.per_step_rows) {
        MetricsRow row;
        row.epoch = epoch + 1;
        row.step = step;
        row.train_loss = stats.loss;
        row.kappa = stats.kappa;
        row.lr = lr;
        row.step_ms = cfg.record_step_time ? ms : 0.0;
        row.loss_evals = static_cast<double>(stats.loss_evals);
        result.rows.push_back(row);
      }
    }
    MetricsRow row;
    row.epoch = epoch + 1;
    row.step = step;
    try {
      row.train_loss = evaluate(state, data.train.x, data.train.y).loss;
      const Evaluation test = evaluate(state, data.test.x, data.test.y);
      row.test_loss = test.loss;
      row.test_acc = test.accuracy;
      row.kappa = dataset_kappa(state, data.train, cfg.kappa_mode, cfg.kappa_samples, kappa_rng.fork(epoch)).kappa;
    } catch (const NumericError& e) {
      throw TrainingDiverged(step, e.what());
    }
    row.lr = lr;
    const double denom = static_cast<double>(std::max<std::size_t>(steps_in_epoch, 1));
    row.step_ms = cfg.record_step_time ? ms_total / denom : 0.0;
    row.loss_evals = evals_total / denom;
    result.rows.push_back(row);
    result.final_kappa = *row.kappa;
    result.test_accuracy = *row.test_acc;
  }
  result.steps = step;
  if (has_rows(data.val)) {
    const Evaluation val = evaluate(state, data.val.x, data.val.y);
    result.val_accuracy = val.accuracy;
    result.val_loss = val.loss;
  }
  return result;
}

RunResult train_to_directory(const RunConfig& cfg) {
  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "config.resolved.json");
    out << to_json(cfg).dump(2) << '\n';
  }
  RunResult result = run_training(cfg);
  {
    std::ofstream out(dir / "metrics.csv", std::ios::binary);
    out << metrics_csv(result.rows);
  }
  save_checkpoint(result.final_state, dir / "model.ckpt.json");
  return result;
}

void apply_seed_override(RunConfig& cfg) {
  const char* env = std::getenv("RELFLAT_SEED");
  if (!env || !*env) return;
  std::uint64_t seed = 0;
  const std::string_view text(env);
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), seed);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw ConfigError("RELFLAT_SEED: expected a non-negative integer, got '" + std::string(text) + "'");
  cfg.seed = seed;
}

Dataset load_data_argument(const std::string& arg, DataRole role) {
  const std::filesystem::path path(arg);
  if (path.extension() == ".json") {
    RunConfig cfg = load_run_config(path);
    apply_seed_override(cfg);
    DataSplits splits = load_data(cfg.dataset, cfg.seed);
    return role == DataRole::kTrain ? std::move(splits.train) : std::move(splits.test);
  }
  if (arg.rfind("idx:", 0) == 0) {
    const std::string rest = arg.substr(4);
    const auto comma = rest.find(',');
    if (comma == std::string::npos) throw ConfigError("data: expected idx:<images>,<labels>");
    return read_idx(rest.substr(0, comma), rest.substr(comma + 1));
  }
  if (arg.rfind("two_moons:", 0) == 0 || arg == "two_moons") {
    std::size_t n = 200;
    double noise = 0.3;
    std::uint64_t seed = 0;
    std::string_view rest = arg.size() > 10 ? std::string_view(arg).substr(10) : std::string_view();
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const std::string_view item = rest.substr(0, comma);
      const auto eq = item.find('=');
      if (eq == std::string_view::npos) throw ConfigError("data: expected key=value in '" + arg + "'");
      const std::string key(item.substr(0, eq));
      const std::string value(item.substr(eq + 1));
      try {
        if (key == "n")
          n = std::stoull(value);
        else if (key == "noise")
          noise = std::stod(value);
        else if (key == "seed")
          seed = std::stoull(value);
        else
          throw ConfigError("data: unknown two_moons key '" + key + "'");
      } catch (const std::logic_error&) {
        throw ConfigError("data: bad value for two_moons key '" + key + "'");
      }
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    return gen_two_moons(n, noise, seed);
  }
  return read_csv(path);
}

}  // namespace relflat
