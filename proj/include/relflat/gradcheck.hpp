#pragma once

// Finite-difference and closed-form checks of the flatness-aware gradient,
// behind `relflat gradcheck`.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relflat/flatness.hpp"
#include "relflat/model.hpp"

namespace relflat {

struct GradcheckConfig {
  MlpSpec model;
  double lambda = 0.1;
  FlatnessMode mode = FlatnessMode::kNeuronwise;
  std::size_t samples = 1;
  std::size_t batch_size = 8;
  std::size_t configs = 1;  // random (model, batch) draws
  std::uint64_t seed = 0;
  double step = 1e-5;           // central-difference step of the objective check
  double oracle_step = 1e-4;    // central-difference step inside the closed-form oracle
  double tolerance = 1e-4;      // objective check and the isolated first term
  double oracle_tolerance = 1e-3;  // closed-form total vs nested autodiff

  void validate() const;
};

GradcheckConfig default_gradcheck_config();  // 2-3-2 tanh
GradcheckConfig parse_gradcheck_config(const nlohmann::json& j);
GradcheckConfig load_gradcheck_config(const std::filesystem::path& path);

// Location of one parameter entry: layer is 1-based.
struct ParamIndex {
  std::size_t layer = 0;
  bool bias = false;
  std::size_t index = 0;

  std::string to_string() const;
};

struct SectionResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  ParamIndex worst;
  bool passed() const { return max_rel_error < tolerance; }
};

struct GradcheckReport {
  std::vector<SectionResult> sections;  // worst over all configs, per section
  std::vector<std::string> warnings;
  std::size_t configs = 0;

  bool passed() const;
  // Section with the largest error-to-tolerance ratio.
  const SectionResult* worst() const;
  std::string to_text() const;
};

// max |a - b| / max(||b||_inf, tiny) over every parameter; the absolute
// difference when the reference is identically zero.
SectionResult compare_gradients(const std::string& name, const Gradients& computed, const Gradients& reference,
                                double tolerance);

// Central differences of f over every weight and present bias.
Gradients finite_difference_gradient(const std::function<double(const ModelState&)>& f, const ModelState& state,
                                     double step);

// Smallest |pre-activation| over the hidden layers for inputs x.
double min_hidden_preactivation(const ModelState& state, const Tensor& x);

GradcheckReport run_gradcheck(const GradcheckConfig& cfg);

}  // namespace relflat
