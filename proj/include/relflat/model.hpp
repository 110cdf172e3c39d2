#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "relflat/autodiff.hpp"
#include "relflat/rng.hpp"
#include "relflat/tensor.hpp"

namespace relflat {

enum class Activation { kTanh, kRelu, kSoftplus };
enum class LossKind { kCrossEntropy, kMse };

std::string to_string(Activation a);
std::string to_string(LossKind l);
Activation parse_activation(const std::string& s);
LossKind parse_loss(const std::string& s);

// Layer k (1-based) maps n_{k-1} inputs to n_k outputs through a weight
// matrix of shape n_k x n_{k-1}: row s holds the incoming weights of
// output neuron s. The flatness layer selects one of these matrices;
// the default is the output matrix L, fed by the penultimate layer.
struct MlpSpec {
  std::vector<std::size_t> widths;
  Activation activation = Activation::kTanh;
  LossKind loss = LossKind::kCrossEntropy;
  std::size_t flatness_layer = 0;  // 0 selects the default (L)
  std::vector<bool> use_bias;      // one flag per layer; empty means all true

  std::size_t num_layers() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t flatness_index() const { return flatness_layer == 0 ? num_layers() : flatness_layer; }
  bool has_bias(std::size_t layer) const { return use_bias.empty() || use_bias[layer - 1]; }
  // Throws ValidationError on an unusable description.
  void validate() const;
};

struct ModelState {
  MlpSpec spec;
  std::vector<Tensor> weights;                // weights[k-1] is layer k
  std::vector<std::optional<Tensor>> biases;  // shape 1 x n_k when present

  void validate() const;
  const Tensor& flatness_weight() const { return weights[spec.flatness_index() - 1]; }
  std::size_t parameter_count() const;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
ModelState init_model(const MlpSpec& spec, RngStream& rng);

// Model parameters recorded as leaves of one graph.
struct BoundParams {
  std::shared_ptr<ad::Graph> graph;
  std::vector<ad::Var> weights;
  std::vector<std::optional<ad::Var>> biases;

  // Weights in layer order, followed by the present biases in layer order.
  std::vector<ad::Var> all() const;
};

BoundParams bind(const ModelState& state, std::shared_ptr<ad::Graph> graph = ad::Graph::create());

ad::Var forward_logits(const BoundParams& params, const MlpSpec& spec, const Tensor& x);
// Mean per-example loss over the batch. Class targets are a length-B
// vector of indices; regression targets are B x n_L (or length B when
// n_L = 1). Mean squared error averages over every output entry.
ad::Var loss_on(const BoundParams& params, const MlpSpec& spec, const Tensor& x, const Tensor& y);

struct LossRecord {
  BoundParams params;
  ad::Var loss;
};

// Loss recorded on a fresh graph with every parameter as a target.
LossRecord forward_loss(const ModelState& state, const Tensor& x, const Tensor& y);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;  // fraction in [0, 1]; 0 for regression
};

Evaluation evaluate(const ModelState& state, const Tensor& x, const Tensor& y);

// Number of loss evaluations (loss_on calls) made on this thread so far.
std::uint64_t loss_evaluations();

std::string checkpoint_to_string(const ModelState& state);
ModelState checkpoint_from_string(const std::string& text);
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace relflat
