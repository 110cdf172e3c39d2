#include "relflat/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "relflat/errors.hpp"

namespace relflat {

namespace {

thread_local std::uint64_t g_loss_evaluations = 0;

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kSoftplus: return "softplus";
  }
  return "?";
}

std::string to_string(LossKind l) { return l == LossKind::kCrossEntropy ? "cross_entropy" : "mse"; }

Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  if (s == "softplus") return Activation::kSoftplus;
  throw ConfigError("unknown activation '" + s + "' (tanh | relu | softplus)");
}

LossKind parse_loss(const std::string& s) {
  if (s == "cross_entropy") return LossKind::kCrossEntropy;
  if (s == "mse") return LossKind::kMse;
  throw ConfigError("unknown loss '" + s + "' (cross_entropy | mse)");
}

void MlpSpec::validate() const {
  if (widths.size() < 3)
    throw ValidationError("an MLP needs at least 2 weight layers (3 widths), got " +
                          std::to_string(widths.size()) + " widths");
  for (std::size_t w : widths)
    if (w == 0) throw ValidationError("layer widths must be positive");
  const std::size_t L = num_layers();
  if (flatness_index() < 1 || flatness_index() > L)
    throw ValidationError("flatness_layer " + std::to_string(flatness_layer) + " outside [1, " +
                          std::to_string(L) + "]");
  if (!use_bias.empty() && use_bias.size() != L)
    throw ValidationError("use_bias has " + std::to_string(use_bias.size()) + " entries for " +
                          std::to_string(L) + " layers");
  if (loss == LossKind::kCrossEntropy && widths.back() < 2)
    throw ValidationError("cross_entropy needs at least 2 output classes");
}

void ModelState::validate() const {
  spec.validate();
  const std::size_t L = spec.num_layers();
  if (weights.size() != L) throw ValidationError("expected " + std::to_string(L) + " weight matrices");
  if (biases.size() != L) throw ValidationError("expected " + std::to_string(L) + " bias entries");
  for (std::size_t k = 1; k <= L; ++k) {
    const Shape want = Shape::matrix(spec.widths[k], spec.widths[k - 1]);
    if (!(weights[k - 1].shape() == want))
      throw ValidationError("layer " + std::to_string(k) + " weight has shape " +
                            to_string(weights[k - 1].shape()) + ", widths require " + to_string(want));
    if (spec.has_bias(k) != biases[k - 1].has_value())
      throw ValidationError("layer " + std::to_string(k) + " bias presence disagrees with use_bias");
    if (biases[k - 1] && !(biases[k - 1]->shape() == Shape::matrix(1, spec.widths[k])))
      throw ValidationError("layer " + std::to_string(k) + " bias has shape " +
                            to_string(biases[k - 1]->shape()));
  }
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += w.numel();
  for (const auto& b : biases)
    if (b) n += b->numel();
  return n;
}

ModelState init_model(const MlpSpec& spec, RngStream& rng) {
  spec.validate();
  ModelState state;
  state.spec = spec;
  for (std::size_t k = 1; k <= spec.num_layers(); ++k) {
    const std::size_t fan_in = spec.widths[k - 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w(Shape::matrix(spec.widths[k], fan_in));
    for (double& v : w.data()) v = rng.uniform(-bound, bound);
    state.weights.push_back(std::move(w));
    if (spec.has_bias(k))
      state.biases.emplace_back(Tensor::zeros(Shape::matrix(1, spec.widths[k])));
    else
      state.biases.emplace_back(std::nullopt);
  }
  return state;
}

std::vector<ad::Var> BoundParams::all() const {
  std::vector<ad::Var> out = weights;
  for (const auto& b : biases)
    if (b) out.push_back(*b);
  return out;
}

BoundParams bind(const ModelState& state, std::shared_ptr<ad::Graph> graph) {
  BoundParams p;
  p.graph = std::move(graph);
  for (const auto& w : state.weights) p.weights.push_back(p.graph->parameter(w));
  for (const auto& b : state.biases) {
    if (b)
      p.biases.emplace_back(p.graph->parameter(*b));
    else
      p.biases.emplace_back(std::nullopt);
  }
  return p;
}

ad::Var forward_logits(const BoundParams& params, const MlpSpec& spec, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != spec.widths.front())
    throw DimensionError("input " + to_string(x.shape()) + " does not match input width " +
                         std::to_string(spec.widths.front()));
  if (x.rows() == 0) throw DimensionError("empty batch");
  ad::Graph& g = *params.graph;
  const std::size_t B = x.rows();
  const ad::Var ones = g.constant(Tensor::ones(Shape::matrix(B, 1)));
  ad::Var h = g.constant(x);
  const std::size_t L = spec.num_layers();
  for (std::size_t k = 1; k <= L; ++k) {
    ad::Var z = ad::matmul(h, ad::transpose(params.weights[k - 1]));
    if (params.biases[k - 1]) z = z + ad::matmul(ones, *params.biases[k - 1]);
    if (k == L) {
      h = z;
    } else {
      switch (spec.activation) {
        case Activation::kTanh: h = ad::tanh(z); break;
        case Activation::kRelu: h = ad::relu(z); break;
        case Activation::kSoftplus: h = ad::softplus(z); break;
      }
    }
  }
  return h;
}

ad::Var loss_on(const BoundParams& params, const MlpSpec& spec, const Tensor& x, const Tensor& y) {
  const ad::Var logits = forward_logits(params, spec, x);
  ad::Graph& g = *params.graph;
  const std::size_t B = x.rows();
  const std::size_t C = spec.widths.back();
  ++g_loss_evaluations;

  if (spec.loss == LossKind::kMse) {
    if (y.numel() != B * C)
      throw DimensionError("mse targets " + to_string(y.shape()) + " do not match " +
                           std::to_string(B) + "x" + std::to_string(C) + " outputs");
    return ad::mean(ad::square(logits - g.constant(y.reshaped(Shape::matrix(B, C)))));
  }

  if (y.numel() != B)
    throw DimensionError("class targets " + to_string(y.shape()) + " do not match batch " +
                         std::to_string(B));
  // Log-sum-exp with a constant per-row shift; the shift cancels exactly in
  // every derivative.
  const Tensor& z = logits.value();
  Tensor shift(Shape::matrix(B, C));
  Tensor onehot(Shape::matrix(B, C));
  double shift_total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    double m = z(i, 0);
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, z(i, c));
    for (std::size_t c = 0; c < C; ++c) shift(i, c) = m;
    shift_total += m;
    const double label = y[i];
    const auto cls = static_cast<std::size_t>(label);
    if (label < 0 || static_cast<double>(cls) != label || cls >= C)
      throw ValidationError("class label " + std::to_string(label) + " outside [0, " +
                            std::to_string(C) + ")");
    onehot(i, cls) = 1.0;
  }
  const ad::Var e = ad::exp(logits - g.constant(std::move(shift)));
  const ad::Var row_sums = ad::matmul(e, g.constant(Tensor::ones(Shape::matrix(C, 1))));
  const ad::Var lse_total = ad::sum(ad::log(row_sums)) + g.constant(shift_total);
  const ad::Var picked = ad::dot(logits, g.constant(std::move(onehot)));
  return ad::scale(lse_total - picked, 1.0 / static_cast<double>(B));
}

LossRecord forward_loss(const ModelState& state, const Tensor& x, const Tensor& y) {
  LossRecord rec;
  rec.params = bind(state);
  rec.loss = loss_on(rec.params, state.spec, x, y);
  return rec;
}

Evaluation evaluate(const ModelState& state, const Tensor& x, const Tensor& y) {
  const std::uint64_t saved = g_loss_evaluations;
  const LossRecord rec = forward_loss(state, x, y);
  g_loss_evaluations = saved;  // evaluation is not a training-step evaluation
  Evaluation ev;
  ev.loss = rec.loss.value().item();
  if (state.spec.loss == LossKind::kCrossEntropy) {
    const BoundParams params = bind(state);
    const Tensor z = forward_logits(params, state.spec, x).value();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < z.cols(); ++c)
        if (z(i, c) > z(i, best)) best = c;
      if (static_cast<double>(best) == y[i]) ++correct;
    }
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(z.rows());
  }
  return ev;
}

std::uint64_t loss_evaluations() { return g_loss_evaluations; }

// --- checkpoints -----------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "relflat-ckpt-v1";

void write_number(std::ostream& os, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  os << buf;
}

void write_array(std::ostream& os, const Tensor& t) {
  os << '[';
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (i) os << ',';
    write_number(os, t[i]);
  }
  os << ']';
}

template <class T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw FormatError("checkpoint: missing field " + where + key);
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("checkpoint: field " + where + key + " has the wrong type");
  }
}

Tensor read_matrix(const nlohmann::json& j, std::size_t rows, std::size_t cols, const std::string& where) {
  if (!j.is_array()) throw FormatError("checkpoint: field " + where + " is not an array");
  if (j.size() != rows * cols)
    throw ValidationError("checkpoint: field " + where + " has " + std::to_string(j.size()) +
                          " values, widths require " + std::to_string(rows * cols));
  std::vector<double> values;
  values.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) throw FormatError("checkpoint: non-numeric entry in " + where);
    values.push_back(v.get<double>());
  }
  return Tensor::matrix(rows, cols, std::move(values));
}

}  // namespace

std::string checkpoint_to_string(const ModelState& state) {
  state.validate();
  const MlpSpec& s = state.spec;
  std::ostringstream os;
  os << "{\n  \"format\": \"" << kCheckpointFormat << "\",\n";
  os << "  \"spec\": {\"widths\": [";
  for (std::size_t i = 0; i < s.widths.size(); ++i) os << (i ? "," : "") << s.widths[i];
  os << "], \"activation\": \"" << to_string(s.activation) << "\", \"loss\": \"" << to_string(s.loss)
     << "\", \"flatness_layer\": " << s.flatness_index() << ", \"use_bias\": [";
  for (std::size_t k = 1; k <= s.num_layers(); ++k) os << (k > 1 ? "," : "") << (s.has_bias(k) ? "true" : "false");
  os << "]},\n  \"weights\": [\n";
  for (std::size_t k = 0; k < state.weights.size(); ++k) {
    os << "    ";
    write_array(os, state.weights[k]);
    os << (k + 1 < state.weights.size() ? ",\n" : "\n");
  }
  os << "  ],\n  \"biases\": ";
  bool any_bias = false;
  for (const auto& b : state.biases) any_bias = any_bias || b.has_value();
  if (!any_bias) {
    os << "null\n";
  } else {
    os << "[\n";
    for (std::size_t k = 0; k < state.biases.size(); ++k) {
      os << "    ";
      if (state.biases[k])
        write_array(os, *state.biases[k]);
      else
        os << "null";
      os << (k + 1 < state.biases.size() ? ",\n" : "\n");
    }
    os << "  ]\n";
  }
  os << "}\n";
  return os.str();
}

ModelState checkpoint_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint: invalid JSON: ") + e.what());
  }
  if (field<std::string>(j, "format", "") != kCheckpointFormat)
    throw FormatError("checkpoint: field format is not " + std::string(kCheckpointFormat));
  const auto& js = j.at("spec");
  ModelState state;
  MlpSpec& s = state.spec;
  s.widths = field<std::vector<std::size_t>>(js, "widths", "spec.");
  s.activation = parse_activation(field<std::string>(js, "activation", "spec."));
  s.loss = parse_loss(field<std::string>(js, "loss", "spec."));
  s.flatness_layer = field<std::size_t>(js, "flatness_layer", "spec.");
  s.use_bias = field<std::vector<bool>>(js, "use_bias", "spec.");
  s.validate();

  const std::size_t L = s.num_layers();
  if (!j.contains("weights") || !j["weights"].is_array())
    throw FormatError("checkpoint: missing field weights");
  if (j["weights"].size() != L)
    throw ValidationError("checkpoint: " + std::to_string(j["weights"].size()) +
                          " weight matrices for widths declaring " + std::to_string(L));
  for (std::size_t k = 1; k <= L; ++k)
    state.weights.push_back(read_matrix(j["weights"][k - 1], s.widths[k], s.widths[k - 1],
                                        "weights[" + std::to_string(k - 1) + "]"));
  if (!j.contains("biases")) throw FormatError("checkpoint: missing field biases");
  const auto& jb = j["biases"];
  if (jb.is_null()) {
    state.biases.assign(L, std::nullopt);
  } else {
    if (!jb.is_array() || jb.size() != L)
      throw ValidationError("checkpoint: biases must list one entry per layer");
    for (std::size_t k = 1; k <= L; ++k) {
      if (jb[k - 1].is_null())
        state.biases.emplace_back(std::nullopt);
      else
        state.biases.emplace_back(read_matrix(jb[k - 1], 1, s.widths[k], "biases[" + std::to_string(k - 1) + "]"));
    }
  }
  state.validate();
  return state;
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  const std::string text = checkpoint_to_string(state);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << text;
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace relflat
