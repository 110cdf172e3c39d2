#include "relflat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "relflat/errors.hpp"
#include "relflat/run.hpp"

namespace relflat {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kGradcheckStream = 0x67726164ULL;
constexpr double kKinkMargin = 1e-2;
constexpr std::size_t kMaxResamples = 1000;

Gradients zeros_like(const ModelState& state) {
  Gradients g;
  for (const auto& w : state.weights) g.weights.push_back(Tensor::zeros(w.shape()));
  for (const auto& b : state.biases) {
    if (b)
      g.biases.emplace_back(Tensor::zeros(b->shape()));
    else
      g.biases.emplace_back(std::nullopt);
  }
  return g;
}

Gradients combine(const Gradients& a, const Gradients& b, double ca, double cb) {
  Gradients out;
  for (std::size_t k = 0; k < a.weights.size(); ++k)
    out.weights.push_back(add(scale(a.weights[k], ca), scale(b.weights[k], cb)));
  for (std::size_t k = 0; k < a.biases.size(); ++k) {
    if (a.biases[k])
      out.biases.emplace_back(add(scale(*a.biases[k], ca), scale(*b.biases[k], cb)));
    else
      out.biases.emplace_back(std::nullopt);
  }
  return out;
}

Gradients scaled(const Gradients& a, double c) { return combine(a, a, c, 0.0); }

// Visit every entry of two equally shaped gradient sets.
template <class F>
void for_each_entry(const Gradients& a, const Gradients& b, F&& f) {
  if (a.weights.size() != b.weights.size() || a.biases.size() != b.biases.size())
    throw DimensionError("gradient sets have different layer counts");
  for (std::size_t k = 0; k < a.weights.size(); ++k) {
    if (!(a.weights[k].shape() == b.weights[k].shape())) throw DimensionError("gradient shapes differ");
    for (std::size_t i = 0; i < a.weights[k].numel(); ++i)
      f(ParamIndex{k + 1, false, i}, a.weights[k][i], b.weights[k][i]);
  }
  for (std::size_t k = 0; k < a.biases.size(); ++k) {
    if (bool(a.biases[k]) != bool(b.biases[k])) throw DimensionError("bias presence differs");
    if (!a.biases[k]) continue;
    for (std::size_t i = 0; i < a.biases[k]->numel(); ++i)
      f(ParamIndex{k + 1, true, i}, (*a.biases[k])[i], (*b.biases[k])[i]);
  }
}

void merge(std::vector<SectionResult>& into, const SectionResult& r) {
  for (auto& s : into) {
    if (s.name == r.name) {
      if (r.max_rel_error > s.max_rel_error) s = r;
      return;
    }
  }
  into.push_back(r);
}

Tensor random_normal(RngStream& rng, std::size_t rows, std::size_t cols, double sd) {
  Tensor t = Tensor::zeros(Shape::matrix(rows, cols));
  for (auto& v : t.data()) v = sd * rng.normal();
  return t;
}

struct Draw {
  ModelState state;
  Tensor x;
  Tensor y;
};

Draw draw_case(const GradcheckConfig& cfg, RngStream& rng) {
  const MlpSpec& spec = cfg.model;
  Draw d;
  d.state = init_model(spec, rng);
  for (auto& b : d.state.biases)
    if (b)
      for (auto& v : b->data()) v = 0.5 * rng.normal();
  d.x = random_normal(rng, cfg.batch_size, spec.widths.front(), 1.0);
  const std::size_t q = spec.widths.back();
  if (spec.loss == LossKind::kCrossEntropy) {
    d.y = Tensor::zeros(Shape::vector(cfg.batch_size));
    for (auto& v : d.y.data()) v = static_cast<double>(rng.below(q));
  } else {
    d.y = random_normal(rng, cfg.batch_size, q, 1.0);
  }
  return d;
}

}  // namespace

void GradcheckConfig::validate() const {
  model.validate();
  if (!(lambda >= 0.0)) throw ConfigError("fam.lambda: must be non-negative");
  if (samples == 0) throw ConfigError("fam.samples: must be at least 1");
  if (batch_size == 0) throw ConfigError("batch_size: must be at least 1");
  if (configs == 0) throw ConfigError("configs: must be at least 1");
  if (!(step > 0.0)) throw ConfigError("step: must be positive");
  if (!(oracle_step > 0.0)) throw ConfigError("oracle_step: must be positive");
  if (!(tolerance > 0.0)) throw ConfigError("tolerance: must be positive");
  if (!(oracle_tolerance > 0.0)) throw ConfigError("oracle_tolerance: must be positive");
  for (std::size_t k = 1; k <= model.num_layers(); ++k)
    if (model.widths[k] * model.widths[k - 1] > kOracleLayerCap)
      throw ConfigError("model.widths: layer " + std::to_string(k) + " exceeds the oracle cap of " +
                        std::to_string(kOracleLayerCap) + " parameters");
}

GradcheckConfig default_gradcheck_config() {
  GradcheckConfig c;
  c.model.widths = {2, 3, 2};
  c.model.activation = Activation::kTanh;
  c.model.loss = LossKind::kCrossEntropy;
  return c;
}

GradcheckConfig parse_gradcheck_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected an object");
  GradcheckConfig c = default_gradcheck_config();
  auto number = [&](const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    return v.get<double>();
  };
  auto count = [&](const json& v, const std::string& path) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ConfigError(path + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "model") {
      c.model = parse_model_spec(v, "model");
    } else if (key == "fam") {
      if (!v.is_object()) throw ConfigError("fam: expected an object");
      for (const auto& [fk, fv] : v.items()) {
        const std::string path = "fam." + fk;
        if (fk == "lambda") {
          c.lambda = number(fv, path);
        } else if (fk == "mode") {
          if (!fv.is_string()) throw ConfigError(path + ": expected a string");
          try {
            c.mode = parse_flatness_mode(fv.get<std::string>());
          } catch (const ConfigError& e) {
            throw ConfigError(path + ": " + e.what());
          }
        } else if (fk == "samples") {
          c.samples = count(fv, path);
        } else {
          throw ConfigError(path + ": unknown key");
        }
      }
    } else if (key == "batch_size") {
      c.batch_size = count(v, key);
    } else if (key == "configs") {
      c.configs = count(v, key);
    } else if (key == "seed") {
      c.seed = count(v, key);
    } else if (key == "step") {
      c.step = number(v, key);
    } else if (key == "oracle_step") {
      c.oracle_step = number(v, key);
    } else if (key == "tolerance") {
      c.tolerance = number(v, key);
    } else if (key == "oracle_tolerance") {
      c.oracle_tolerance = number(v, key);
    } else {
      throw ConfigError(key + ": unknown key");
    }
  }
  c.validate();
  return c;
}

GradcheckConfig load_gradcheck_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_gradcheck_config(j);
}

std::string ParamIndex::to_string() const {
  return "layer " + std::to_string(layer) + (bias ? " bias" : " weight") + " index " + std::to_string(index);
}

bool GradcheckReport::passed() const {
  return std::all_of(sections.begin(), sections.end(), [](const SectionResult& s) { return s.passed(); });
}

const SectionResult* GradcheckReport::worst() const {
  const SectionResult* best = nullptr;
  for (const auto& s : sections)
    if (!best || s.max_rel_error / s.tolerance > best->max_rel_error / best->tolerance) best = &s;
  return best;
}

std::string GradcheckReport::to_text() const {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific;
  for (const auto& w : warnings) os << "warning: " << w << '\n';
  for (const auto& s : sections)
    os << (s.passed() ? "PASS " : "FAIL ") << s.name << ": max rel. error " << s.max_rel_error << " (tolerance "
       << s.tolerance << ", worst at " << s.worst.to_string() << ")\n";
  os << (passed() ? "gradcheck passed" : "gradcheck FAILED") << " over " << configs << " configuration(s)\n";
  return os.str();
}

SectionResult compare_gradients(const std::string& name, const Gradients& computed, const Gradients& reference,
                                double tolerance) {
  double ref_norm = 0.0;
  for_each_entry(computed, reference, [&](const ParamIndex&, double, double b) {
    ref_norm = std::max(ref_norm, std::abs(b));
  });
  SectionResult r;
  r.name = name;
  r.tolerance = tolerance;
  double worst = -1.0;
  for_each_entry(computed, reference, [&](const ParamIndex& at, double a, double b) {
    const double diff = std::abs(a - b);
    if (diff > worst) {
      worst = diff;
      r.worst = at;
    }
  });
  r.max_rel_error = ref_norm > 0.0 ? worst / ref_norm : std::max(worst, 0.0);
  return r;
}

Gradients finite_difference_gradient(const std::function<double(const ModelState&)>& f, const ModelState& state,
                                     double step) {
  Gradients g = zeros_like(state);
  ModelState probe = state;
  auto central = [&](double& slot) {
    const double saved = slot;
    slot = saved + step;
    const double plus = f(probe);
    slot = saved - step;
    const double minus = f(probe);
    slot = saved;
    return (plus - minus) / (2.0 * step);
  };
  for (std::size_t k = 0; k < probe.weights.size(); ++k)
    for (std::size_t i = 0; i < probe.weights[k].numel(); ++i) g.weights[k][i] = central(probe.weights[k][i]);
  for (std::size_t k = 0; k < probe.biases.size(); ++k)
    if (probe.biases[k])
      for (std::size_t i = 0; i < probe.biases[k]->numel(); ++i) (*g.biases[k])[i] = central((*probe.biases[k])[i]);
  return g;
}

double min_hidden_preactivation(const ModelState& state, const Tensor& x) {
  double smallest = std::numeric_limits<double>::infinity();
  Tensor h = x;
  for (std::size_t k = 0; k + 1 < state.weights.size(); ++k) {
    Tensor z = matmul(h, transpose(state.weights[k]));
    if (state.biases[k])
      for (std::size_t r = 0; r < z.rows(); ++r)
        for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += (*state.biases[k])[c];
    for (double v : z.data()) smallest = std::min(smallest, std::abs(v));
    for (auto& v : z.data()) {
      switch (state.spec.activation) {
        case Activation::kTanh: v = std::tanh(v); break;
        case Activation::kRelu: v = std::max(v, 0.0); break;
        case Activation::kSoftplus: v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); break;
      }
    }
    h = std::move(z);
  }
  return smallest;
}

GradcheckReport run_gradcheck(const GradcheckConfig& cfg) {
  cfg.validate();
  GradcheckReport report;
  report.configs = cfg.configs;
  const bool relu = cfg.model.activation == Activation::kRelu;
  const bool oracle = cfg.mode == FlatnessMode::kNeuronwise;
  if (relu)
    report.warnings.push_back("relu activation: draws with a hidden pre-activation within " +
                              std::to_string(kKinkMargin) + " of the kink are resampled (kink sampling excluded)");
  if (!oracle)
    report.warnings.push_back("closed-form oracle sections apply to neuronwise mode only; running the "
                              "finite-difference section");
  if (cfg.lambda == 0.0) report.warnings.push_back("lambda = 0: the kappa-gradient sections compare zero with zero");

  const RngStream root(cfg.seed, kGradcheckStream);
  for (std::size_t c = 0; c < cfg.configs; ++c) {
    RngStream rng = root.fork(c);
    Draw d = draw_case(cfg, rng);
    if (relu) {
      std::size_t tries = 0;
      while (min_hidden_preactivation(d.state, d.x) < kKinkMargin) {
        if (++tries > kMaxResamples) throw NumericError("gradcheck: could not draw a relu case away from the kinks");
        d = draw_case(cfg, rng);
      }
    }
    FlatnessConfig fam;
    fam.mode = cfg.mode;
    fam.lambda = cfg.lambda;
    fam.samples = cfg.samples;
    fam.rng = RngStream(cfg.seed, kHutchinsonStream).fork(c);

    // Probes are replayed from the same stream position on every evaluation,
    // so the Hutchinson objective is a deterministic function of the weights.
    auto objective = [&](const ModelState& s) {
      FlatnessConfig local = fam;
      const LossRecord rec = forward_loss(s, d.x, d.y);
      return fam_objective(rec, s.spec, local).value().item();
    };
    FlatnessConfig local = fam;
    const Gradients computed = fam_gradient(d.state, d.x, d.y, local);
    const Gradients fd = finite_difference_gradient(objective, d.state, cfg.step);
    merge(report.sections, compare_gradients("objective vs finite differences", computed, fd, cfg.tolerance));

    if (!oracle) continue;
    FlatnessConfig kc = fam;
    const Gradients full = kappa_gradient(d.state, d.x, d.y, kc, GramTreatment::kDifferentiate);
    const Gradients fixed = kappa_gradient(d.state, d.x, d.y, kc, GramTreatment::kHoldFixed);
    const Lemma1Terms terms = lemma1_oracle(d.state, d.x, d.y, cfg.oracle_step);
    const double lam = cfg.lambda;
    merge(report.sections, compare_gradients("kappa gradient vs closed-form oracle", scaled(full, lam),
                                             scaled(terms.total(), lam), cfg.oracle_tolerance));
    Gradients first = zeros_like(d.state);
    first.weights[terms.flatness_layer - 1] = terms.term_one;
    merge(report.sections, compare_gradients("gram term vs closed-form first term",
                                             scaled(combine(full, fixed, 1.0, -1.0), lam), scaled(first, lam),
                                             cfg.tolerance));
    Gradients second;
    second.weights = terms.term_two_weights;
    second.biases = terms.term_two_biases;
    merge(report.sections, compare_gradients("trace term vs closed-form second term", scaled(fixed, lam),
                                             scaled(second, lam), cfg.oracle_tolerance));
  }
  return report;
}

}  // namespace relflat
