#include "relflat/optim.hpp"

#include <cmath>
#include <numbers>

#include "relflat/errors.hpp"

namespace relflat {

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::kConstant: return "constant";
    case ScheduleKind::kCosine: return "cosine";
    case ScheduleKind::kMultistep: return "multistep";
  }
  return "?";
}

std::string to_string(RegularizerKind kind) {
  switch (kind) {
    case RegularizerKind::kNone: return "none";
    case RegularizerKind::kFam: return "fam";
    case RegularizerKind::kSam: return "sam";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "constant") return ScheduleKind::kConstant;
  if (s == "cosine") return ScheduleKind::kCosine;
  if (s == "multistep") return ScheduleKind::kMultistep;
  throw ConfigError("unknown schedule '" + s + "' (constant | cosine | multistep)");
}

RegularizerKind parse_regularizer_kind(const std::string& s) {
  if (s == "none") return RegularizerKind::kNone;
  if (s == "fam") return RegularizerKind::kFam;
  if (s == "sam") return RegularizerKind::kSam;
  throw ConfigError("unknown regularizer '" + s + "' (none | fam | sam)");
}

void Schedule::validate() const {
  if (kind != ScheduleKind::kMultistep) return;
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (!(milestones[i] > 0.0 && milestones[i] < 1.0))
      throw ConfigError("multistep milestones must be fractions in (0, 1)");
    if (i && !(milestones[i] > milestones[i - 1]))
      throw ConfigError("multistep milestones must be strictly increasing");
  }
  if (!(factor > 0.0)) throw ConfigError("multistep factor must be positive");
}

double lr_at(const Schedule& schedule, double lr0, double t, double T) {
  if (!(T > 0.0)) throw RangeError("schedule horizon must be positive");
  if (t < 0.0 || t > T) throw RangeError("schedule time " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  switch (schedule.kind) {
    case ScheduleKind::kConstant:
      return lr0;
    case ScheduleKind::kCosine:
      return lr0 * (1.0 + std::cos(std::numbers::pi * t / T)) / 2.0;
    case ScheduleKind::kMultistep: {
      double lr = lr0;
      for (double m : schedule.milestones)
        if (t >= m * T) lr *= schedule.factor;
      return lr;
    }
  }
  return lr0;
}

void OptimConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  schedule.validate();
  if (regularizer == RegularizerKind::kFam) fam.validate();
  if (regularizer == RegularizerKind::kSam && !(rho > 0.0)) throw ConfigError("sam rho must be positive");
}

OptimState OptimState::for_model(const ModelState& state) {
  OptimState opt;
  for (const auto& w : state.weights) opt.weight_velocity.push_back(Tensor::zeros(w.shape()));
  for (const auto& b : state.biases) {
    if (b)
      opt.bias_velocity.emplace_back(Tensor::zeros(b->shape()));
    else
      opt.bias_velocity.emplace_back(std::nullopt);
  }
  return opt;
}

namespace {

void update(Tensor& w, const Tensor& g, Tensor& v, const OptimConfig& cfg, double lr) {
  if (!(g.shape() == w.shape()) || !(v.shape() == w.shape()))
    throw DimensionError("sgd_step: gradient " + to_string(g.shape()) + " does not match weight " +
                         to_string(w.shape()));
  auto wd = w.data();
  auto gd = g.data();
  auto vd = v.data();
  for (std::size_t i = 0; i < wd.size(); ++i) {
    vd[i] = cfg.momentum * vd[i] + (gd[i] + cfg.weight_decay * wd[i]);
    wd[i] -= lr * vd[i];
  }
  require_finite(w, "sgd_step");
}

}  // namespace

void sgd_step(ModelState& state, const Gradients& grads, OptimState& opt, const OptimConfig& cfg, double lr) {
  if (grads.weights.size() != state.weights.size() || grads.biases.size() != state.biases.size())
    throw DimensionError("sgd_step: gradient list does not match the model layers");
  for (std::size_t k = 0; k < state.weights.size(); ++k)
    update(state.weights[k], grads.weights[k], opt.weight_velocity[k], cfg, lr);
  for (std::size_t k = 0; k < state.biases.size(); ++k) {
    if (!state.biases[k]) continue;
    if (!grads.biases[k]) throw DimensionError("sgd_step: missing bias gradient");
    update(*state.biases[k], *grads.biases[k], *opt.bias_velocity[k], cfg, lr);
  }
  ++opt.step;
}

StepStats baseline_step(ModelState& state, const Tensor& x, const Tensor& y, OptimState& opt,
                        const OptimConfig& cfg, double lr) {
  const std::uint64_t before = loss_evaluations();
  const Gradients g = loss_gradient(state, x, y);
  sgd_step(state, g, opt, cfg, lr);
  return {g.loss, std::nullopt, loss_evaluations() - before};
}

StepStats fam_step(ModelState& state, const Tensor& x, const Tensor& y, OptimState& opt, OptimConfig& cfg,
                   double lr, const Tensor* kx, const Tensor* ky) {
  if (cfg.regularizer != RegularizerKind::kFam) throw ConfigError("fam_step needs the fam regularizer");
  const std::uint64_t before = loss_evaluations();
  const Gradients g = fam_gradient(state, x, y, cfg.fam, kx, ky);
  sgd_step(state, g, opt, cfg, lr);
  return {g.loss, g.kappa, loss_evaluations() - before};
}

std::optional<Gradients> sam_perturbation(const Gradients& g, double rho) {
  const double norm = std::sqrt(g.norm_sq());
  if (norm == 0.0) return std::nullopt;
  Gradients eps;
  const double c = rho / norm;
  for (const auto& w : g.weights) eps.weights.push_back(scale(w, c));
  for (const auto& b : g.biases) {
    if (b)
      eps.biases.emplace_back(scale(*b, c));
    else
      eps.biases.emplace_back(std::nullopt);
  }
  return eps;
}

StepStats sam_step(ModelState& state, const Tensor& x, const Tensor& y, OptimState& opt, const OptimConfig& cfg,
                   double lr) {
  if (cfg.regularizer != RegularizerKind::kSam) throw ConfigError("sam_step needs the sam regularizer");
  const std::uint64_t before = loss_evaluations();
  const Gradients g1 = loss_gradient(state, x, y);
  const auto eps = sam_perturbation(g1, cfg.rho);
  StepStats stats;
  stats.loss = g1.loss;
  if (!eps) {
    stats.perturbation_skipped = true;
    sgd_step(state, g1, opt, cfg, lr);
    stats.loss_evals = loss_evaluations() - before;
    return stats;
  }
  stats.perturbation_norm = std::sqrt(eps->norm_sq());
  ModelState perturbed = state;
  for (std::size_t k = 0; k < perturbed.weights.size(); ++k)
    perturbed.weights[k] = add(perturbed.weights[k], eps->weights[k]);
  for (std::size_t k = 0; k < perturbed.biases.size(); ++k)
    if (perturbed.biases[k]) perturbed.biases[k] = add(*perturbed.biases[k], *eps->biases[k]);
  const Gradients g2 = loss_gradient(perturbed, x, y);
  sgd_step(state, g2, opt, cfg, lr);
  stats.loss_evals = loss_evaluations() - before;
  return stats;
}

StepStats train_step(ModelState& state, const Tensor& x, const Tensor& y, OptimState& opt, OptimConfig& cfg,
                     double lr, const Tensor* kx, const Tensor* ky) {
  switch (cfg.regularizer) {
    case RegularizerKind::kNone: return baseline_step(state, x, y, opt, cfg, lr);
    case RegularizerKind::kFam: return fam_step(state, x, y, opt, cfg, lr, kx, ky);
    case RegularizerKind::kSam: return sam_step(state, x, y, opt, cfg, lr);
  }
  return {};
}

}  // namespace relflat
