#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "relflat/flatness.hpp"
#include "relflat/model.hpp"

namespace relflat {

enum class ScheduleKind { kConstant, kCosine, kMultistep };
enum class RegularizerKind { kNone, kFam, kSam };

std::string to_string(ScheduleKind kind);
std::string to_string(RegularizerKind kind);
ScheduleKind parse_schedule_kind(const std::string& s);
RegularizerKind parse_regularizer_kind(const std::string& s);

struct Schedule {
  ScheduleKind kind = ScheduleKind::kConstant;
  std::vector<double> milestones;  // fractions of the total, strictly increasing
  double factor = 0.1;

  void validate() const;
};

// Learning rate at time t of a horizon T (0 <= t <= T).
//   cosine:    lr0 * (1 + cos(pi t / T)) / 2
//   multistep: lr0 * factor^(number of milestones m with t >= m T)
double lr_at(const Schedule& schedule, double lr0, double t, double T);

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;
  Schedule schedule;
  RegularizerKind regularizer = RegularizerKind::kNone;
  FlatnessConfig fam;
  double rho = 0.05;

  void validate() const;
};

struct OptimState {
  std::vector<Tensor> weight_velocity;
  std::vector<std::optional<Tensor>> bias_velocity;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;

  static OptimState for_model(const ModelState& state);
};

struct StepStats {
  double loss = 0.0;
  std::optional<double> kappa;
  std::uint64_t loss_evals = 0;
  double perturbation_norm = 0.0;  // SAM only
  bool perturbation_skipped = false;
};

// v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * v
void sgd_step(ModelState& state, const Gradients& grads, OptimState& opt, const OptimConfig& cfg, double lr);

StepStats baseline_step(ModelState& state, const Tensor& x, const Tensor& y, OptimState& opt,
                        const OptimConfig& cfg, double lr);
// kx/ky give the Hessian batch in full-set mode.
StepStats fam_step(ModelState& state, const Tensor& x, const Tensor& y, OptimState& opt, OptimConfig& cfg,
                   double lr, const Tensor* kx = nullptr, const Tensor* ky = nullptr);
// Ascent to w + rho g/||g|| (global L2 norm), descent with the gradient
// taken there. Momentum buffers only see the descent gradient.
StepStats sam_step(ModelState& state, const Tensor& x, const Tensor& y, OptimState& opt, const OptimConfig& cfg,
                   double lr);

// Dispatch on cfg.regularizer.
StepStats train_step(ModelState& state, const Tensor& x, const Tensor& y, OptimState& opt, OptimConfig& cfg,
                     double lr, const Tensor* kx = nullptr, const Tensor* ky = nullptr);

// The SAM ascent vector rho * g / ||g||; empty optional when ||g|| = 0.
std::optional<Gradients> sam_perturbation(const Gradients& g, double rho);

}  // namespace relflat
