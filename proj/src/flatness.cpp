#include "relflat/flatness.hpp"

#include <chrono>

#include <nlohmann/json.hpp>

#include "relflat/errors.hpp"

namespace relflat {

std::string to_string(FlatnessMode mode) {
  switch (mode) {
    case FlatnessMode::kNeuronwise: return "neuronwise";
    case FlatnessMode::kTraceExact: return "trace-exact";
    case FlatnessMode::kTraceHutchinson: return "trace-hutchinson";
  }
  return "?";
}

std::string to_string(HessianBatch batch) {
  return batch == HessianBatch::kMinibatch ? "minibatch" : "full-set";
}

FlatnessMode parse_flatness_mode(const std::string& s) {
  if (s == "neuronwise") return FlatnessMode::kNeuronwise;
  if (s == "trace-exact") return FlatnessMode::kTraceExact;
  if (s == "trace-hutchinson") return FlatnessMode::kTraceHutchinson;
  throw ConfigError("unknown flatness mode '" + s + "' (neuronwise | trace-exact | trace-hutchinson)");
}

HessianBatch parse_hessian_batch(const std::string& s) {
  if (s == "minibatch") return HessianBatch::kMinibatch;
  if (s == "full-set") return HessianBatch::kFullSet;
  throw ConfigError("unknown hessian batch '" + s + "' (minibatch | full-set)");
}

void FlatnessConfig::validate() const {
  if (samples == 0) throw ConfigError("hutchinson samples V must be at least 1");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

nlohmann::json matrix_json(const Tensor& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < t.cols(); ++j) row.push_back(t(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

void require_matrix_layer(const ad::Var& w) {
  if (w.shape().rank != 2) throw RankError("flatness layer must be a matrix, got " + to_string(w.shape()));
}

void require_dense(const ad::Var& w, std::size_t cap) {
  if (w.value().numel() > cap)
    throw CapacityError("layer with " + std::to_string(w.value().numel()) +
                        " parameters exceeds the dense-Hessian cap of " + std::to_string(cap) +
                        "; use trace-hutchinson");
}

}  // namespace

std::string to_json(const KappaReport& report) {
  nlohmann::json j;
  j["mode"] = to_string(report.mode);
  j["kappa"] = report.kappa;
  j["trace_total"] = report.trace_total;
  if (report.gram) j["gram"] = matrix_json(*report.gram);
  if (report.pair_traces) j["pair_traces"] = matrix_json(*report.pair_traces);
  j["wall_time_ms"] = report.wall_ms;
  return j.dump(2);
}

Tensor block_traces(const Tensor& hessian, std::size_t d, std::size_t m) {
  if (hessian.rank() != 2 || hessian.rows() != d * m || hessian.cols() != d * m)
    throw DimensionError("block_traces: Hessian " + to_string(hessian.shape()) + " is not " +
                         std::to_string(d * m) + " square");
  Tensor traces(Shape::matrix(d, d));
  for (std::size_t s = 0; s < d; ++s)
    for (std::size_t s2 = 0; s2 < d; ++s2) {
      double tr = 0.0;
      for (std::size_t t = 0; t < m; ++t) tr += hessian(s * m + t, s2 * m + t);
      traces(s, s2) = tr;
    }
  return traces;
}

Tensor gram_matrix(const Tensor& w) { return matmul(w, transpose(w)); }

KappaReport kappa_neuronwise(const ad::Var& loss, const ad::Var& w, std::size_t cap) {
  require_matrix_layer(w);
  require_dense(w, cap);
  const auto start = Clock::now();
  const Tensor h = ad::layer_hessian(loss, w, cap);
  const std::size_t d = w.shape().rows(), m = w.shape().cols();
  KappaReport r;
  r.mode = FlatnessMode::kNeuronwise;
  r.pair_traces = block_traces(h, d, m);
  r.gram = gram_matrix(w.value());
  r.kappa = dot(*r.gram, *r.pair_traces);
  for (std::size_t s = 0; s < d; ++s) r.trace_total += (*r.pair_traces)(s, s);
  r.wall_ms = elapsed_ms(start);
  return r;
}

double hutchinson_trace(const std::function<Tensor(const Tensor&)>& matvec, Shape shape,
                        std::size_t samples, RngStream& rng) {
  if (samples == 0) throw ConfigError("hutchinson samples V must be at least 1");
  double total = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const Tensor v = rademacher(rng, shape);
    total += dot(v, matvec(v));
  }
  return total / static_cast<double>(samples);
}

KappaReport kappa_trace(const ad::Var& loss, const ad::Var& w, FlatnessConfig& cfg) {
  cfg.validate();
  require_matrix_layer(w);
  const auto start = Clock::now();
  KappaReport r;
  r.mode = cfg.mode;
  switch (cfg.mode) {
    case FlatnessMode::kNeuronwise:
      throw ConfigError("kappa_trace called with neuronwise mode");
    case FlatnessMode::kTraceExact: {
      require_dense(w, cfg.dense_cap);
      const Tensor h = ad::layer_hessian(loss, w, cfg.dense_cap);
      for (std::size_t i = 0; i < h.rows(); ++i) r.trace_total += h(i, i);
      break;
    }
    case FlatnessMode::kTraceHutchinson: {
      ad::Graph& g = loss.graph();
      const std::size_t mark = g.size();
      const ad::Var targets[] = {w};
      const ad::Var gradient = ad::grad_recorded(loss, targets)[0];
      r.trace_total = hutchinson_trace(
          [&](const Tensor& v) { return ad::hvp_from_gradient(gradient, w, v); }, w.shape(), cfg.samples,
          cfg.rng);
      g.truncate(mark);
      break;
    }
  }
  r.kappa = frobenius_norm_sq(w.value()) * r.trace_total;
  r.wall_ms = elapsed_ms(start);
  return r;
}

KappaReport measure_kappa(const ad::Var& loss, const ad::Var& w, FlatnessConfig& cfg) {
  if (cfg.mode == FlatnessMode::kNeuronwise) return kappa_neuronwise(loss, w, cfg.dense_cap);
  return kappa_trace(loss, w, cfg);
}

KappaTerm kappa_term(const ad::Var& loss, const ad::Var& w, FlatnessConfig& cfg, GramTreatment gram) {
  cfg.validate();
  require_matrix_layer(w);
  ad::Graph& g = loss.graph();
  const std::size_t d = w.shape().rows(), m = w.shape().cols();
  const ad::Var targets[] = {w};
  const ad::Var gradient = ad::grad_recorded(loss, targets)[0];
  KappaTerm term;

  switch (cfg.mode) {
    case FlatnessMode::kNeuronwise: {
      require_dense(w, cfg.dense_cap);
      // column[s](s', 0) accumulates Tr(H_{s,s'}) over t.
      std::vector<ad::Var> column(d);
      for (std::size_t s = 0; s < d; ++s) {
        for (std::size_t t = 0; t < m; ++t) {
          // Row (s,t) of the Hessian, laid out like w.
          const ad::Var row = ad::grad_recorded(ad::entry(gradient, s, t), targets)[0];
          const ad::Var piece = ad::slice(row, 0, d, t, 1);
          column[s] = t == 0 ? piece : column[s] + piece;
        }
      }
      const ad::Var gm = gram == GramTreatment::kDifferentiate ? ad::matmul(w, ad::transpose(w))
                                                               : g.constant(gram_matrix(w.value()));
      for (std::size_t s = 0; s < d; ++s) {
        const ad::Var contribution = ad::dot(ad::slice(gm, 0, d, s, 1), column[s]);
        const ad::Var diag = ad::entry(column[s], s, 0);
        term.kappa = s == 0 ? contribution : term.kappa + contribution;
        term.trace = s == 0 ? diag : term.trace + diag;
      }
      return term;
    }
    case FlatnessMode::kTraceExact: {
      require_dense(w, cfg.dense_cap);
      for (std::size_t s = 0; s < d; ++s)
        for (std::size_t t = 0; t < m; ++t) {
          const ad::Var row = ad::grad_recorded(ad::entry(gradient, s, t), targets)[0];
          const ad::Var diag = ad::entry(row, s, t);
          term.trace = (s == 0 && t == 0) ? diag : term.trace + diag;
        }
      break;
    }
    case FlatnessMode::kTraceHutchinson: {
      for (std::size_t i = 0; i < cfg.samples; ++i) {
        const Tensor v = rademacher(cfg.rng, w.shape());
        const ad::Var hv = ad::hvp_from_gradient_recorded(gradient, w, v);
        const ad::Var quad = ad::dot(hv, g.constant(v));
        term.trace = i == 0 ? quad : term.trace + quad;
      }
      term.trace = ad::scale(term.trace, 1.0 / static_cast<double>(cfg.samples));
      break;
    }
  }
  const ad::Var norm = gram == GramTreatment::kDifferentiate ? ad::dot(w, w)
                                                             : g.constant(frobenius_norm_sq(w.value()));
  term.kappa = norm * term.trace;
  return term;
}

ad::Var fam_objective(const ad::Var& loss, const ad::Var& w, FlatnessConfig& cfg) {
  cfg.validate();
  if (cfg.lambda == 0.0) return loss;
  const KappaTerm term = kappa_term(loss, w, cfg);
  return loss + ad::scale(term.kappa, cfg.lambda);
}

ad::Var fam_objective(const LossRecord& record, const MlpSpec& spec, FlatnessConfig& cfg) {
  return fam_objective(record.loss, record.params.weights[spec.flatness_index() - 1], cfg);
}

std::vector<Tensor> Gradients::flat() const {
  std::vector<Tensor> out = weights;
  for (const auto& b : biases)
    if (b) out.push_back(*b);
  return out;
}

double Gradients::norm_sq() const {
  double s = 0.0;
  for (const auto& t : flat()) s += frobenius_norm_sq(t);
  return s;
}

namespace {

Gradients unflatten(const BoundParams& params, std::vector<Tensor> flat) {
  Gradients out;
  std::size_t k = 0;
  for (std::size_t i = 0; i < params.weights.size(); ++i) out.weights.push_back(std::move(flat[k++]));
  for (const auto& b : params.biases) {
    if (b)
      out.biases.emplace_back(std::move(flat[k++]));
    else
      out.biases.emplace_back(std::nullopt);
  }
  return out;
}

}  // namespace

Gradients loss_gradient(const ModelState& state, const Tensor& x, const Tensor& y) {
  const LossRecord rec = forward_loss(state, x, y);
  const auto targets = rec.params.all();
  Gradients out = unflatten(rec.params, ad::grad(rec.loss, targets));
  out.loss = rec.loss.value().item();
  return out;
}

Gradients fam_gradient(const ModelState& state, const Tensor& x, const Tensor& y, FlatnessConfig& cfg,
                       const Tensor* kx, const Tensor* ky) {
  cfg.validate();
  if (cfg.lambda == 0.0) return loss_gradient(state, x, y);
  const LossRecord rec = forward_loss(state, x, y);
  const ad::Var kloss = (kx && ky) ? loss_on(rec.params, state.spec, *kx, *ky) : rec.loss;
  const ad::Var& w = rec.params.weights[state.spec.flatness_index() - 1];
  const KappaTerm term = kappa_term(kloss, w, cfg);
  const ad::Var objective = rec.loss + ad::scale(term.kappa, cfg.lambda);
  const auto targets = rec.params.all();
  Gradients out = unflatten(rec.params, ad::grad(objective, targets));
  out.loss = rec.loss.value().item();
  out.kappa = term.kappa.value().item();
  return out;
}

Gradients kappa_gradient(const ModelState& state, const Tensor& x, const Tensor& y, FlatnessConfig& cfg,
                         GramTreatment gram) {
  const LossRecord rec = forward_loss(state, x, y);
  const ad::Var& w = rec.params.weights[state.spec.flatness_index() - 1];
  const KappaTerm term = kappa_term(rec.loss, w, cfg, gram);
  const auto targets = rec.params.all();
  Gradients out = unflatten(rec.params, ad::grad(term.kappa, targets));
  out.loss = term.kappa.value().item();
  out.kappa = out.loss;
  return out;
}

// --- closed-form oracle ------------------------------------------------------

Gradients Lemma1Terms::total() const {
  Gradients out;
  out.weights = term_two_weights;
  out.biases = term_two_biases;
  out.weights[flatness_layer - 1] = add(out.weights[flatness_layer - 1], term_one);
  return out;
}

namespace {

Tensor pair_traces_at(const ModelState& state, const Tensor& x, const Tensor& y) {
  const LossRecord rec = forward_loss(state, x, y);
  const std::size_t l = state.spec.flatness_index();
  const ad::Var& w = rec.params.weights[l - 1];
  const Tensor h = ad::layer_hessian(rec.loss, w, w.value().numel());
  return block_traces(h, w.shape().rows(), w.shape().cols());
}

// sum_{s,s'} G_{s,s'} * dT_{s,s'}/dp by central differences in p.
double term_two_entry(ModelState& probe, Tensor& param, std::size_t i, const Tensor& gram, const Tensor& x,
                      const Tensor& y, double step) {
  const double saved = param[i];
  param[i] = saved + step;
  const Tensor plus = pair_traces_at(probe, x, y);
  param[i] = saved - step;
  const Tensor minus = pair_traces_at(probe, x, y);
  param[i] = saved;
  return (dot(gram, plus) - dot(gram, minus)) / (2.0 * step);
}

}  // namespace

Lemma1Terms lemma1_oracle(const ModelState& state, const Tensor& x, const Tensor& y, double step,
                          std::size_t layer_cap) {
  state.validate();
  for (std::size_t k = 0; k < state.weights.size(); ++k)
    if (state.weights[k].numel() > layer_cap)
      throw CapacityError("lemma1_oracle: layer " + std::to_string(k + 1) + " has " +
                          std::to_string(state.weights[k].numel()) + " parameters, cap is " +
                          std::to_string(layer_cap));
  const std::size_t l = state.spec.flatness_index();
  const Tensor& wl = state.weights[l - 1];
  const Tensor traces = pair_traces_at(state, x, y);
  const Tensor gram = gram_matrix(wl);

  Lemma1Terms out;
  out.flatness_layer = l;
  // Row i: 2 sum_s w_s Tr(H_{s,i}); traces are symmetric so this is 2 T w.
  out.term_one = scale(matmul(transpose(traces), wl), 2.0);

  ModelState probe = state;
  for (std::size_t k = 0; k < probe.weights.size(); ++k) {
    Tensor grad(probe.weights[k].shape());
    for (std::size_t i = 0; i < grad.numel(); ++i)
      grad[i] = term_two_entry(probe, probe.weights[k], i, gram, x, y, step);
    out.term_two_weights.push_back(std::move(grad));
  }
  for (std::size_t k = 0; k < probe.biases.size(); ++k) {
    if (!probe.biases[k]) {
      out.term_two_biases.emplace_back(std::nullopt);
      continue;
    }
    Tensor grad(probe.biases[k]->shape());
    for (std::size_t i = 0; i < grad.numel(); ++i)
      grad[i] = term_two_entry(probe, *probe.biases[k], i, gram, x, y, step);
    out.term_two_biases.emplace_back(std::move(grad));
  }
  return out;
}

}  // namespace relflat
