#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sublaplace/bandit.hpp"
#include "sublaplace/error.hpp"
#include "sublaplace/laplace.hpp"
#include "sublaplace/runner.hpp"
#include "sublaplace/select.hpp"
#include "sublaplace/theory.hpp"

namespace py = pybind11;
using namespace sublaplace;

namespace {

// FullPosterior keeps a pointer to its system, so the binding owns both.
struct OwnedFullPosterior {
  explicit OwnedFullPosterior(LaplaceSystem s) : sys(std::move(s)), post(sys) {}
  LaplaceSystem sys;
  FullPosterior post;
};

py::dict variance_dict(const PredictiveVariance& v) {
  py::dict d;
  d["epistemic"] = v.epistemic;
  d["total"] = v.total;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<SelectionError>(m, "SelectionError", base.ptr());
  py::register_exception<CapacityError>(m, "CapacityError", base.ptr());
  py::register_exception<IngestError>(m, "IngestError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());
  py::register_exception<ConstructionError>(m, "ConstructionError", base.ptr());
  py::register_exception<PreconditionError>(m, "PreconditionError", base.ptr());
  py::register_exception<AgentFault>(m, "AgentFault", base.ptr());

  py::enum_<Likelihood>(m, "Likelihood")
      .value("Regression", Likelihood::Regression)
      .value("BinaryClassification", Likelihood::BinaryClassification);

  py::class_<Mlp>(m, "Mlp")
      .def_static("initialize",
                  [](std::vector<Index> widths, std::uint64_t seed) { return Mlp::initialize(widths, seed); },
                  py::arg("widths"), py::arg("seed") = 0)
      .def_static("count_params", [](std::vector<Index> widths) { return Mlp::count_params(widths); })
      .def_property_readonly("num_params", &Mlp::num_params)
      .def_property_readonly("input_dim", &Mlp::input_dim)
      .def_property_readonly("theta", &Mlp::theta)
      .def("with_theta", &Mlp::with_theta)
      .def("forward", [](const Mlp& self, const Vector& x) { return self.forward(x); })
      .def("forward_batch", &Mlp::forward_batch)
      .def("param_gradient", [](const Mlp& self, const Vector& x) { return self.param_gradient(x); })
      .def("jacobian", [](const Mlp& self, const Matrix& x) { return jacobian(self, x); })
      .def("to_text", [](const Mlp& self) { return serialize_model(self); })
      .def_static("from_text", &deserialize_model);

  py::class_<LaplaceSystem>(m, "LaplaceSystem")
      .def_readonly("jacobian", &LaplaceSystem::jacobian)
      .def_readonly("prior_diag", &LaplaceSystem::prior_diag)
      .def_readonly("noise_var", &LaplaceSystem::noise_var)
      .def_property_readonly("num_params", &LaplaceSystem::num_params)
      .def("diag_precision", [](const LaplaceSystem& s) { return diag_precision(s); })
      .def("dense_precision", [](const LaplaceSystem& s) { return dense_precision(s); })
      .def("full_variance", [](const LaplaceSystem& s, const Vector& g) {
        return variance_dict(full_predictive_variance(s, g));
      })
      .def("subset_variance", [](const LaplaceSystem& s, std::vector<Index> idx, const Vector& g) {
        return variance_dict(subset_predictive_variance(s, idx, g));
      });

  m.def("system_from_gradients",
        [](RowMatrix g, const Vector& outputs, Likelihood lik, double noise_var, Vector prior) {
          return system_from_gradients(std::move(g), outputs, lik, noise_var, std::move(prior));
        },
        py::arg("gradients"), py::arg("outputs"), py::arg("likelihood"), py::arg("noise_var"), py::arg("prior_diag"));
  m.def("build_system", &build_system, py::arg("model"), py::arg("x"), py::arg("likelihood"), py::arg("noise_var"),
        py::arg("prior_diag"));

  py::class_<OwnedFullPosterior>(m, "FullPosterior")
      .def(py::init<LaplaceSystem>())
      .def("variance", [](const OwnedFullPosterior& f, const Vector& g) { return variance_dict(f.post.variance(g)); });

  m.def("select_gradient_laplace", [](const Matrix& gradients, Index k) {
    return select_gradient_laplace(gradient_summary_from_rows(gradients), k).indices;
  });
  m.def("select_subnet_diagonal", [](const Vector& diag, Index k) { return select_subnet_diagonal(diag, k).indices; });
  m.def("select_greedy_laplace", [](const LaplaceSystem& sys, Index k) {
    return select_greedy_laplace(sys, gradient_summary_from_rows(sys.jacobian), k).indices;
  });
  m.def("select_last_k", [](const Mlp& model, Index k) { return select_last_k(model, k).indices; });
  m.def("select_neural_linear", [](const Mlp& model) { return select_neural_linear(model).indices; });

  py::class_<IpvInstance>(m, "IpvInstance")
      .def(py::init([](Matrix lambda, Vector prior, double noise_var, double n) {
             IpvInstance inst{std::move(lambda), std::move(prior), noise_var, n};
             inst.validate();
             return inst;
           }),
           py::arg("lambda_"), py::arg("prior_diag"), py::arg("noise_var") = 1.0, py::arg("n") = 1.0)
      .def_readonly("lambda_", &IpvInstance::lambda)
      .def_readonly("prior_diag", &IpvInstance::prior_diag)
      .def_readonly("noise_var", &IpvInstance::noise_var)
      .def_readonly("n", &IpvInstance::n);
  m.def("ipv", [](const IpvInstance& inst, std::vector<Index> s) { return ipv(inst, s); });
  m.def("ipv_full", &ipv_full);
  m.def("dis", [](const IpvInstance& inst, std::vector<Index> s) { return dis(inst, s); });

  const auto report = [](const TheoremReport& r) { return py::module_::import("json").attr("loads")(to_json(r).dump()); };
  m.def("verify_theorem1", [report](const IpvInstance& inst) { return report(verify_theorem1(inst)); });
  m.def("verify_theorem2", [report](const IpvInstance& inst, Index k) { return report(verify_theorem2(inst, k)); });
  m.def("verify_theorem3", [report](const IpvInstance& inst, Index k, double eps) {
    return report(verify_theorem3(inst, k, eps));
  });
  m.def("ranking_recovered", &ranking_recovered);

  m.def("wheel_context", [](std::uint64_t seed, long round) {
    WheelConfig cfg;
    cfg.seed = seed;
    return Vector(WheelEnvironment(cfg).context(round));
  });
  m.def("wheel_arm_mean", [](const Vector& x, int arm, double delta) {
    WheelConfig cfg;
    cfg.delta = delta;
    return arm_mean(cfg, Context(x[0], x[1]), arm);
  }, py::arg("x"), py::arg("arm"), py::arg("delta") = 0.95);

  m.def("config_hash", [](const std::string& json_text) {
    return config_hash(parse_config(nlohmann::ordered_json::parse(json_text)));
  });
  m.def("run_experiment",
        [](const std::string& json_text, std::optional<std::filesystem::path> out, int jobs) {
          ExperimentConfig cfg = parse_config(nlohmann::ordered_json::parse(json_text));
          RunOptions opts;
          opts.output_dir = std::move(out);
          opts.jobs = jobs;
          RunOutcome r;
          {
            py::gil_scoped_release release;
            r = run_experiment(std::move(cfg), opts);
          }
          py::dict d;
          d["exit_code"] = r.exit_code;
          std::vector<std::string> files;
          for (const auto& f : r.files) files.push_back(f.string());
          d["files"] = files;
          return d;
        },
        py::arg("config_json"), py::arg("output_dir") = py::none(), py::arg("jobs") = 1);
}
