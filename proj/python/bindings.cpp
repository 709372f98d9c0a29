#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "msda/commands.hpp"
#include "msda/discrepancy.hpp"
#include "msda/disentangle.hpp"

namespace py = pybind11;
using namespace msda;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                         const char* name) {
  if (a.ndim() != 2) throw std::invalid_argument(std::string(name) + " must be a 2-D array");
  const std::size_t r = static_cast<std::size_t>(a.shape(0));
  const std::size_t c = static_cast<std::size_t>(a.shape(1));
  std::vector<double> data(r * c);
  std::memcpy(data.data(), a.data(), r * c * sizeof(double));
  return Tensor::from({r, c}, std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  const std::size_t r = t.shape()[0], c = t.shape()[1];
  py::array_t<double> out({r, c});
  std::memcpy(out.mutable_data(), t.data().data(), r * c * sizeof(double));
  return out;
}

double py_mmd2(const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
               const py::array_t<double, py::array::c_style | py::array::forcecast>& y,
               bool take_sqrt) {
  Tensor d = mmd2(tensor_from_array(x, "x"), tensor_from_array(y, "y"));
  if (take_sqrt) d = sqrt_eps(d, 1e-12);
  return d.value();
}

double py_estimate_entropy(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
    std::size_t n_mixture, int steps, double lr, std::uint64_t seed) {
  const Tensor h = tensor_from_array(x, "x");
  EntropyEstimatorConfig cfg;
  cfg.embed_dim = h.shape()[1];
  cfg.n_identities = 1;
  cfg.n_mixture = n_mixture;
  cfg.cond_hidden = 16;
  cfg.fit_lr = lr;
  Rng rng(seed);
  EntropyEstimator est = EntropyEstimator::init(cfg, rng);
  est.seed_means(h);
  const std::vector<int> ids(h.shape()[0], 0);
  for (int i = 0; i < steps; ++i) estimator_fit_step(est, h, ids);
  return marginal_entropy(est, h).value();
}

BenchmarkSpec spec_from_kwargs(const py::kwargs& kwargs) {
  BenchmarkSpec s;
  for (const auto& item : kwargs) {
    const std::string key = py::cast<std::string>(item.first);
    if (key == "n_classes")
      s.n_classes = py::cast<std::size_t>(item.second);
    else if (key == "n_sources")
      s.n_sources = py::cast<std::size_t>(item.second);
    else if (key == "n_targets")
      s.n_targets = py::cast<std::size_t>(item.second);
    else if (key == "samples_per_subject")
      s.samples_per_subject = py::cast<std::size_t>(item.second);
    else if (key == "d_v")
      s.d_v = py::cast<std::size_t>(item.second);
    else if (key == "d_p")
      s.d_p = py::cast<std::size_t>(item.second);
    else if (key == "n_groups")
      s.n_groups = py::cast<std::size_t>(item.second);
    else if (key == "shift_strength")
      s.shift_strength = py::cast<double>(item.second);
    else if (key == "identity_leak")
      s.identity_leak = py::cast<double>(item.second);
    else if (key == "noise_reliable")
      s.noise_reliable = py::cast<double>(item.second);
    else if (key == "noise_unreliable")
      s.noise_unreliable = py::cast<double>(item.second);
    else if (key == "seed")
      s.seed = py::cast<std::uint64_t>(item.second);
    else
      throw std::invalid_argument("generate_benchmark: unknown keyword " + key);
  }
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "multimodal multi-source domain adaptation core";

  py::class_<SubjectDataset>(m, "Subject")
      .def_property_readonly("subject_id", [](const SubjectDataset& s) { return s.subject_id; })
      .def_property_readonly("role", [](const SubjectDataset& s) { return role_name(s.role); })
      .def_property_readonly("identity", [](const SubjectDataset& s) { return s.identity; })
      .def_property_readonly("labels", [](const SubjectDataset& s) { return s.labels; })
      .def_property_readonly("visual", [](const SubjectDataset& s) { return array_from_tensor(s.visual); })
      .def_property_readonly("physio", [](const SubjectDataset& s) { return array_from_tensor(s.physio); })
      .def("__len__", &SubjectDataset::size)
      .def("__repr__", [](const SubjectDataset& s) {
        return "<Subject " + s.subject_id + ", " + std::to_string(s.size()) + " samples>";
      });

  m.def(
      "generate_benchmark",
      [](const py::kwargs& kwargs) { return generate_benchmark(spec_from_kwargs(kwargs)); },
      "Synthetic multimodal multi-subject benchmark; keywords mirror the config schema.");

  m.def("read_dataset", &read_dataset, py::arg("dir"));

  m.def("mmd2", &py_mmd2, py::arg("x"), py::arg("y"), py::arg("take_sqrt") = false,
        "Squared MMD between two sample matrices under the multi-scale Gaussian kernel.");

  m.def("estimate_entropy", &py_estimate_entropy, py::arg("x"), py::arg("n_mixture") = 10,
        py::arg("steps") = 300, py::arg("lr") = 0.01, py::arg("seed") = 0,
        "Fit the mixture estimator to x and return its marginal entropy estimate.");

  m.def(
      "run_command",
      [](const std::string& command, const std::string& config_json) {
        return run_command(command, parse_config_text(config_json));
      },
      py::arg("command"), py::arg("config_json"),
      "Run one pipeline command (gen-data, train-source, select, adapt, evaluate, baseline, "
      "ablate, export-embeddings) from a JSON config string.");
}
