#pragma once

// Relative flatness of one weight layer and the flatness-aware objective.
//
// For a layer w in R^{d x m} with rows w_s, the neuronwise measure is
//
//   kappa(w) = sum_{s,s'} <w_s, w_s'> * Tr(H_{s,s'}),
//   Tr(H_{s,s'}) = sum_t d^2 loss / (dw_{s,t} dw_{s',t}),
//
// and the simplified measure is ||w||_F^2 * Tr(H), where H is the Hessian of
// the loss with respect to the flattened layer. Training minimizes
// loss + lambda * kappa; its gradient is obtained by differentiating the
// recorded kappa term once more (third derivatives of the loss).

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "relflat/autodiff.hpp"
#include "relflat/model.hpp"
#include "relflat/rng.hpp"

namespace relflat {

enum class FlatnessMode { kNeuronwise, kTraceExact, kTraceHutchinson };
enum class HessianBatch { kMinibatch, kFullSet };

std::string to_string(FlatnessMode mode);
std::string to_string(HessianBatch batch);
FlatnessMode parse_flatness_mode(const std::string& s);
HessianBatch parse_hessian_batch(const std::string& s);

// Stream id reserved for Rademacher probes.
inline constexpr std::uint64_t kHutchinsonStream = 0x4875746368ULL;

struct FlatnessConfig {
  FlatnessMode mode = FlatnessMode::kNeuronwise;
  double lambda = 0.0;
  std::size_t samples = 1;  // Hutchinson probes V
  HessianBatch hessian_batch = HessianBatch::kMinibatch;
  RngStream rng{0, kHutchinsonStream};
  std::size_t dense_cap = ad::kDefaultDenseCap;

  // Throws ConfigError for V = 0 or a negative lambda.
  void validate() const;
  bool dense() const { return mode != FlatnessMode::kTraceHutchinson; }
};

struct KappaReport {
  FlatnessMode mode = FlatnessMode::kNeuronwise;
  double kappa = 0.0;
  double trace_total = 0.0;          // Tr(H), exact or estimated
  std::optional<Tensor> pair_traces;  // d x d, Tr(H_{s,s'})
  std::optional<Tensor> gram;         // d x d, <w_s, w_s'>
  double wall_ms = 0.0;
};

std::string to_json(const KappaReport& report);

// d x d matrix of block traces Tr(H_{s,s'}) from a dense (dm x dm) Hessian.
Tensor block_traces(const Tensor& hessian, std::size_t d, std::size_t m);
// Row Gram matrix w w^T.
Tensor gram_matrix(const Tensor& w);

KappaReport kappa_neuronwise(const ad::Var& loss, const ad::Var& w, std::size_t cap = ad::kDefaultDenseCap);
// Trace-based measure; cfg.mode selects exact or Hutchinson. Hutchinson
// probes are drawn from (and advance) cfg.rng.
KappaReport kappa_trace(const ad::Var& loss, const ad::Var& w, FlatnessConfig& cfg);
// Dispatch on cfg.mode.
KappaReport measure_kappa(const ad::Var& loss, const ad::Var& w, FlatnessConfig& cfg);

// (1/V) sum_i v_i^T A v_i over Rademacher v_i shaped like `shape`.
double hutchinson_trace(const std::function<Tensor(const Tensor&)>& matvec, Shape shape,
                        std::size_t samples, RngStream& rng);

// How the Gram factor of kappa enters the recorded term: differentiated
// normally, or treated as a constant (leaving only the Hessian-trace part
// of the gradient).
enum class GramTreatment { kDifferentiate, kHoldFixed };

struct KappaTerm {
  ad::Var kappa;
  ad::Var trace;
};

// Recorded kappa (generation 2) ready for one more differentiation.
KappaTerm kappa_term(const ad::Var& loss, const ad::Var& w, FlatnessConfig& cfg,
                     GramTreatment gram = GramTreatment::kDifferentiate);

// loss + lambda * kappa. At lambda = 0 the loss Var itself is returned.
ad::Var fam_objective(const ad::Var& loss, const ad::Var& w, FlatnessConfig& cfg);
ad::Var fam_objective(const LossRecord& record, const MlpSpec& spec, FlatnessConfig& cfg);

struct Gradients {
  std::vector<Tensor> weights;
  std::vector<std::optional<Tensor>> biases;
  double loss = 0.0;
  std::optional<double> kappa;

  // Weights then present biases, the order of BoundParams::all().
  std::vector<Tensor> flat() const;
  double norm_sq() const;
};

// Plain gradient of the mean loss.
Gradients loss_gradient(const ModelState& state, const Tensor& x, const Tensor& y);

// Gradient of loss + lambda * kappa over every parameter. kappa's Hessian is
// taken on (kx, ky) when given (full-set mode), otherwise on the batch.
Gradients fam_gradient(const ModelState& state, const Tensor& x, const Tensor& y, FlatnessConfig& cfg,
                       const Tensor* kx = nullptr, const Tensor* ky = nullptr);

// Gradient of kappa alone via nested differentiation (loss field holds kappa).
Gradients kappa_gradient(const ModelState& state, const Tensor& x, const Tensor& y, FlatnessConfig& cfg,
                         GramTreatment gram = GramTreatment::kDifferentiate);

// Closed-form gradient of the neuronwise kappa, split into its two parts:
//   term one  = [2 sum_s w_s Tr(H_{s,i})]_i, added to the flatness layer;
//   term two  = d/dW of sum_{s,s'} <w_s,w_s'> Tr(H_{s,s'}) with the Gram
//               matrix held fixed, for every parameter.
// Term two uses central differences of dense autodiff Hessians in every
// parameter and is meant for tiny models: each layer must have at most
// `layer_cap` parameters.
struct Lemma1Terms {
  Tensor term_one;
  std::vector<Tensor> term_two_weights;
  std::vector<std::optional<Tensor>> term_two_biases;
  std::size_t flatness_layer = 0;

  Gradients total() const;
};

inline constexpr std::size_t kOracleLayerCap = 512;

Lemma1Terms lemma1_oracle(const ModelState& state, const Tensor& x, const Tensor& y, double step = 1e-4,
                          std::size_t layer_cap = kOracleLayerCap);

}  // namespace relflat
