// Python bindings: models as checkpoints in memory, flatness measurement,
// flatness-aware gradients, training from a JSON config and the gradient
// check. Arrays cross the boundary as float64 numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "relflat/data.hpp"
#include "relflat/errors.hpp"
#include "relflat/flatness.hpp"
#include "relflat/gradcheck.hpp"
#include "relflat/model.hpp"
#include "relflat/optim.hpp"
#include "relflat/run.hpp"

namespace py = pybind11;
using namespace relflat;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  const auto* p = a.data();
  std::vector<double> v(p, p + a.size());
  if (a.ndim() == 1) return Tensor::vector(std::move(v));
  if (a.ndim() == 2) return Tensor::matrix(std::size_t(a.shape(0)), std::size_t(a.shape(1)), std::move(v));
  throw DimensionError("expected a 1-d or 2-d array, got " + std::to_string(a.ndim()) + " dimensions");
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape;
  if (t.rank() >= 1) shape.push_back(py::ssize_t(t.rows()));
  if (t.rank() == 2) shape.push_back(py::ssize_t(t.cols()));
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict gradients_to_dict(const Gradients& g) {
  py::list weights, biases;
  for (const auto& w : g.weights) weights.append(to_array(w));
  for (const auto& b : g.biases) biases.append(b ? py::object(to_array(*b)) : py::object(py::none()));
  py::dict d;
  d["weights"] = weights;
  d["biases"] = biases;
  d["loss"] = g.loss;
  d["kappa"] = g.kappa ? py::object(py::float_(*g.kappa)) : py::object(py::none());
  return d;
}

FlatnessConfig flatness_config(const std::string& mode, double lambda, std::size_t samples, std::uint64_t seed) {
  FlatnessConfig cfg;
  cfg.mode = parse_flatness_mode(mode);
  cfg.lambda = lambda;
  cfg.samples = samples;
  cfg.rng = RngStream(seed, kHutchinsonStream);
  cfg.validate();
  return cfg;
}

py::dict report_to_dict(const KappaReport& r) {
  py::dict d;
  d["mode"] = to_string(r.mode);
  d["kappa"] = r.kappa;
  d["trace"] = r.trace_total;
  d["pair_traces"] = r.pair_traces ? py::object(to_array(*r.pair_traces)) : py::object(py::none());
  d["gram"] = r.gram ? py::object(to_array(*r.gram)) : py::object(py::none());
  return d;
}

py::dict row_to_dict(const MetricsRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? py::object(py::float_(*v)) : py::object(py::none()); };
  py::dict d;
  d["epoch"] = r.epoch;
  d["step"] = r.step;
  d["train_loss"] = r.train_loss;
  d["test_loss"] = opt(r.test_loss);
  d["test_acc"] = opt(r.test_acc);
  d["kappa"] = opt(r.kappa);
  d["lr"] = r.lr;
  d["loss_evals"] = r.loss_evals;
  return d;
}

}  // namespace

PYBIND11_MODULE(_relflat, m) {
  m.doc() = "Relative flatness of neural network layers and flatness-aware training";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<CapacityError>(m, "CapacityError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());

  py::class_<ModelState>(m, "Model")
      .def(py::init([](std::vector<std::size_t> widths, const std::string& activation, const std::string& loss,
                       std::size_t flatness_layer, bool bias, std::uint64_t seed) {
             MlpSpec spec;
             spec.widths = std::move(widths);
             spec.activation = parse_activation(activation);
             spec.loss = parse_loss(loss);
             spec.flatness_layer = flatness_layer;
             if (!bias) spec.use_bias.assign(spec.widths.size() - 1, false);
             spec.validate();
             RngStream rng(seed, 0);
             return init_model(spec, rng);
           }),
           py::arg("widths"), py::arg("activation") = "tanh", py::arg("loss") = "cross_entropy",
           py::arg("flatness_layer") = 0, py::arg("bias") = true, py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return load_checkpoint(path); }, py::arg("path"))
      .def_static("from_json", &checkpoint_from_string, py::arg("text"))
      .def("save", [](const ModelState& s, const std::string& path) { save_checkpoint(s, path); }, py::arg("path"))
      .def("to_json", &checkpoint_to_string)
      .def_property_readonly("widths", [](const ModelState& s) { return s.spec.widths; })
      .def_property_readonly("flatness_layer", [](const ModelState& s) { return s.spec.flatness_index(); })
      .def_property_readonly("parameter_count", &ModelState::parameter_count)
      .def(
          "weight", [](const ModelState& s, std::size_t layer) {
            if (layer < 1 || layer > s.weights.size()) throw RangeError("layer out of range");
            return to_array(s.weights[layer - 1]);
          },
          py::arg("layer"))
      .def(
          "set_weight",
          [](ModelState& s, std::size_t layer, const Array& w) {
            if (layer < 1 || layer > s.weights.size()) throw RangeError("layer out of range");
            Tensor t = to_tensor(w);
            if (!(t.shape() == s.weights[layer - 1].shape()))
              throw DimensionError("weight shape " + to_string(t.shape()) + " does not match " +
                                   to_string(s.weights[layer - 1].shape()));
            s.weights[layer - 1] = std::move(t);
          },
          py::arg("layer"), py::arg("w"))
      .def(
          "loss", [](const ModelState& s, const Array& x, const Array& y) {
            return forward_loss(s, to_tensor(x), to_tensor(y)).loss.value().item();
          },
          py::arg("x"), py::arg("y"))
      .def(
          "evaluate",
          [](const ModelState& s, const Array& x, const Array& y) {
            const Evaluation e = evaluate(s, to_tensor(x), to_tensor(y));
            return py::dict(py::arg("loss") = e.loss, py::arg("accuracy") = e.accuracy);
          },
          py::arg("x"), py::arg("y"))
      .def(
          "gradient", [](const ModelState& s, const Array& x, const Array& y) {
            return gradients_to_dict(loss_gradient(s, to_tensor(x), to_tensor(y)));
          },
          py::arg("x"), py::arg("y"));

  m.def(
      "kappa",
      [](const ModelState& s, const Array& x, const Array& y, const std::string& mode, std::size_t samples,
         std::uint64_t seed) {
        FlatnessConfig cfg = flatness_config(mode, 0.0, samples, seed);
        const LossRecord rec = forward_loss(s, to_tensor(x), to_tensor(y));
        return report_to_dict(measure_kappa(rec.loss, rec.params.weights[s.spec.flatness_index() - 1], cfg));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("mode") = "neuronwise", py::arg("samples") = 100,
      py::arg("seed") = 0, "Relative flatness of the model's flatness layer on (x, y).");

  m.def(
      "fam_gradient",
      [](const ModelState& s, const Array& x, const Array& y, double lam, const std::string& mode,
         std::size_t samples, std::uint64_t seed) {
        FlatnessConfig cfg = flatness_config(mode, lam, samples, seed);
        return gradients_to_dict(fam_gradient(s, to_tensor(x), to_tensor(y), cfg));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("lam") = 0.1, py::arg("mode") = "neuronwise",
      py::arg("samples") = 1, py::arg("seed") = 0, "Gradient of loss + lam * kappa over every parameter.");

  m.def(
      "two_moons",
      [](std::size_t n, double noise, std::uint64_t seed) {
        const Dataset ds = gen_two_moons(n, noise, seed);
        return py::make_tuple(to_array(ds.x), to_array(ds.y));
      },
      py::arg("n"), py::arg("noise") = 0.3, py::arg("seed") = 0);

  m.def(
      "train",
      [](const std::string& config_json, bool write_outputs) {
        RunConfig cfg;
        try {
          cfg = parse_run_config(nlohmann::json::parse(config_json));
        } catch (const nlohmann::json::parse_error& e) {
          throw ConfigError(std::string("config: ") + e.what());
        }
        RunResult r;
        {
          py::gil_scoped_release release;
          r = write_outputs ? train_to_directory(cfg) : run_training(cfg);
        }
        py::list rows;
        for (const auto& row : r.rows) rows.append(row_to_dict(row));
        py::dict d;
        d["model"] = r.final_state;
        d["rows"] = rows;
        d["kappa"] = r.final_kappa;
        d["test_accuracy"] = r.test_accuracy;
        d["val_accuracy"] = r.val_accuracy;
        d["steps"] = r.steps;
        d["resolved_config"] = to_json(cfg).dump();
        return d;
      },
      py::arg("config_json"), py::arg("write_outputs") = false, "Train from a JSON run config string.");

  m.def(
      "gradcheck",
      [](const std::string& config_json) {
        const GradcheckConfig cfg =
            config_json.empty() ? default_gradcheck_config() : parse_gradcheck_config(nlohmann::json::parse(config_json));
        const GradcheckReport rep = run_gradcheck(cfg);
        py::list sections;
        for (const auto& s : rep.sections)
          sections.append(py::dict(py::arg("name") = s.name, py::arg("max_rel_error") = s.max_rel_error,
                                   py::arg("tolerance") = s.tolerance, py::arg("passed") = s.passed(),
                                   py::arg("worst") = s.worst.to_string()));
        return py::dict(py::arg("passed") = rep.passed(), py::arg("sections") = sections,
                        py::arg("warnings") = rep.warnings);
      },
      py::arg("config_json") = "", "Check the flatness-aware gradient; returns a report dict.");

  m.def(
      "lr_at",
      [](const std::string& kind, double lr0, double t, double T, std::vector<double> milestones, double factor) {
        Schedule s{parse_schedule_kind(kind), std::move(milestones), factor};
        s.validate();
        return lr_at(s, lr0, t, T);
      },
      py::arg("kind"), py::arg("lr0"), py::arg("t"), py::arg("T"), py::arg("milestones") = std::vector<double>{},
      py::arg("factor") = 0.1);
}
