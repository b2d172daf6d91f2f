// Python bindings for the dilation library: chain construction, builtin
// systems, presampled noise, pathwise runs, the second-moment pipeline, and
// the experiment driver. Schemes and noise laws are passed as strings.

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "stochdil/experiments.hpp"
#include "stochdil/lindblad.hpp"
#include "stochdil/trajectory.hpp"

namespace py = pybind11;
using namespace stochdil;

namespace {

LinearSdeSystem make_system(const std::string& name, double sigma, int n_grid) {
  if (name == "example3d") return make_example3d(sigma);
  if (name == "random_b_weak2") return make_random_b_weak2();
  if (name == "spde_adr") return make_spde_adr(n_grid);
  throw ContractViolation("unknown builtin system: " + name);
}

}  // namespace

PYBIND11_MODULE(_stochdil, m) {
  m.doc() = "ancilla-chain dilation of linear stochastic differential equations";

  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<RefreshFailure>(m, "RefreshFailure", PyExc_RuntimeError);

  // --- chain and readout ----------------------------------------------------

  py::class_<SbpChain>(m, "SbpChain")
      .def_readonly("M", &SbpChain::M)
      .def_readonly("h", &SbpChain::h)
      .def_readonly("theta", &SbpChain::theta)
      .def_readonly("p", &SbpChain::p)
      .def_readonly("w", &SbpChain::w)
      .def_readonly("f", &SbpChain::f)
      .def_readonly("r", &SbpChain::r)
      .def_readonly("Z", &SbpChain::Z)
      .def_readonly("alpha", &SbpChain::alpha)
      .def_readonly("F", &SbpChain::F)
      .def_readonly("F_closed", &SbpChain::F_closed)
      .def("generator", &SbpChain::generator, py::arg("use_closure"),
           py::return_value_policy::copy)
      .def("__repr__", [](const SbpChain& c) {
        return "SbpChain(M=" + std::to_string(c.M) + ", h=" + std::to_string(c.h) + ")";
      });

  py::class_<Readout>(m, "Readout")
      .def_readonly("j_star", &Readout::j_star)
      .def_readonly("p_star", &Readout::p_star)
      .def_readonly("l", &Readout::l)
      .def_readonly("beta", &Readout::beta)
      .def_readonly("P_star", &Readout::P_star)
      .def_readonly("P_win", &Readout::P_win);

  py::class_<LightConeEstimate>(m, "LightConeEstimate")
      .def_readonly("K_max", &LightConeEstimate::K_max)
      .def_readonly("T", &LightConeEstimate::T)
      .def_readonly("m", &LightConeEstimate::m)
      .def_readonly("rho", &LightConeEstimate::rho)
      .def_readonly("feasible", &LightConeEstimate::feasible)
      .def_readonly("bound", &LightConeEstimate::bound);

  m.def("build_chain", &build_chain, py::arg("M"), py::arg("h"), py::arg("theta") = 2.0);
  m.def("closed_form_generator", &closed_form_generator, py::arg("M"), py::arg("h"));
  m.def("make_readout", &make_readout, py::arg("chain"), py::arg("p_star"));
  m.def("moment_check", &moment_check, py::arg("chain"), py::arg("readout"),
        py::arg("use_closure"), py::arg("k_max"));
  m.def("pauli_xy_check", py::overload_cast<const SbpChain&>(&pauli_xy_check),
        py::arg("chain"));
  m.def("lightcone", &lightcone, py::arg("system"), py::arg("chain"), py::arg("readout"),
        py::arg("T"));

  // --- systems ----------------------------------------------------------------

  py::class_<LinearSdeSystem>(m, "LinearSdeSystem")
      .def_readonly("name", &LinearSdeSystem::name)
      .def_readonly("dim", &LinearSdeSystem::dim)
      .def_readonly("channels", &LinearSdeSystem::channels)
      .def_readonly("x0", &LinearSdeSystem::x0)
      .def_readonly("horizon", &LinearSdeSystem::horizon)
      .def_readonly("autonomous", &LinearSdeSystem::autonomous)
      .def("A", [](const LinearSdeSystem& s, double t) { return s.A(t); }, py::arg("t"))
      .def("B",
           [](const LinearSdeSystem& s, int j, double t) {
             if (j < 0 || j >= s.channels)
               throw ContractViolation("channel index out of range");
             return s.B[static_cast<size_t>(j)](t);
           },
           py::arg("j"), py::arg("t"))
      .def("__repr__", [](const LinearSdeSystem& s) {
        return "LinearSdeSystem(name=" + s.name + ", dim=" + std::to_string(s.dim) +
               ", channels=" + std::to_string(s.channels) + ")";
      });

  m.def("make_system", &make_system, py::arg("name"), py::arg("sigma") = 1.0,
        py::arg("n_grid") = 16);
  m.def("system_from_json", &system_from_json, py::arg("text"));
  m.def("builtin_names", &builtin_names);
  m.def("second_moment_solve", &second_moment_solve, py::arg("system"), py::arg("Sigma0"),
        py::arg("t0"), py::arg("t1"), py::arg("steps"));
  m.def("growth_envelope", &growth_envelope, py::arg("system"), py::arg("x0"),
        py::arg("T"), py::arg("nodes") = 129);
  m.def(
      "structure_report",
      [](const LinearSdeSystem& sys, const std::vector<double>& ts) {
        const StructureReport rep = structure(sys, ts);
        py::dict d;
        d["t"] = rep.t;
        d["gamma"] = rep.gamma;
        d["K_max"] = rep.K_max;
        return d;
      },
      py::arg("system"), py::arg("t_samples"));

  // --- noise and pathwise runs -------------------------------------------------

  py::class_<NoisePath>(m, "NoisePath")
      .def_readonly("steps", &NoisePath::steps)
      .def_readonly("channels", &NoisePath::channels)
      .def_readonly("dt", &NoisePath::dt)
      .def_property_readonly("law", [](const NoisePath& n) { return to_string(n.law); })
      .def_readonly("seed", &NoisePath::seed)
      .def_readonly("stream", &NoisePath::stream)
      .def_readonly("xi1", &NoisePath::xi1)
      .def_readonly("xi2", &NoisePath::xi2)
      .def_readonly("dW", &NoisePath::dW);

  m.def(
      "presample",
      [](int steps, double dt, int channels, const std::string& law, uint64_t seed,
         uint64_t stream) {
        return presample(steps, dt, channels, noise_law_from_string(law), seed, stream);
      },
      py::arg("steps"), py::arg("dt"), py::arg("channels"), py::arg("law") = "gaussian",
      py::arg("seed") = 0, py::arg("stream") = 0);

  py::class_<SegmentOptions>(m, "SegmentOptions")
      .def(py::init<>())
      .def_readwrite("T", &SegmentOptions::T)
      .def_readwrite("dt", &SegmentOptions::dt)
      .def_readwrite("tau", &SegmentOptions::tau)
      .def_readwrite("refresh", &SegmentOptions::refresh)
      .def_readwrite("use_closure", &SegmentOptions::use_closure)
      .def_readwrite("fold_qm", &SegmentOptions::fold_qm)
      .def_readwrite("p_star", &SegmentOptions::p_star)
      .def_property(
          "mode",
          [](const SegmentOptions& o) {
            return o.mode == ReadoutMode::lh ? std::string("lh") : std::string("site");
          },
          [](SegmentOptions& o, const std::string& v) {
            if (v == "lh")
              o.mode = ReadoutMode::lh;
            else if (v == "site")
              o.mode = ReadoutMode::site;
            else
              throw ContractViolation("mode must be 'lh' or 'site'");
          })
      .def_readwrite("record_path", &SegmentOptions::record_path);

  py::class_<WeightedState>(m, "WeightedState")
      .def_readonly("phi", &WeightedState::phi)
      .def_readonly("lam", &WeightedState::lambda)
      .def_readonly("g", &WeightedState::g);

  py::class_<SegmentedRun>(m, "SegmentedRun")
      .def_readonly("state", &SegmentedRun::state)
      .def_readonly("q", &SegmentedRun::q)
      .def_readonly("Gamma1", &SegmentedRun::Gamma1)
      .def_readonly("Gamma2", &SegmentedRun::Gamma2)
      .def_readonly("oaa_cost", &SegmentedRun::oaa_cost)
      .def_readonly("tau", &SegmentedRun::tau)
      .def_readonly("readout", &SegmentedRun::readout)
      .def_readonly("path", &SegmentedRun::path);

  m.def(
      "run_segmented",
      [](const LinearSdeSystem& sys, const SbpChain& chain, const std::string& scheme,
         const NoisePath& noise, const SegmentOptions& opt) {
        return run_segmented(sys, chain, scheme_from_string(scheme), noise, opt);
      },
      py::arg("system"), py::arg("chain"), py::arg("scheme"), py::arg("noise"),
      py::arg("options") = SegmentOptions());

  m.def(
      "classical_path",
      [](const LinearSdeSystem& sys, const std::string& scheme, const NoisePath& noise,
         double T, double dt) {
        return classical_path(sys, scheme_from_string(scheme), noise, T, dt);
      },
      py::arg("system"), py::arg("scheme"), py::arg("noise"), py::arg("T"), py::arg("dt"));

  py::class_<EnsembleEstimate>(m, "EnsembleEstimate")
      .def_readonly("mean", &EnsembleEstimate::mean)
      .def_readonly("std_error", &EnsembleEstimate::std_error)
      .def_readonly("n_samples", &EnsembleEstimate::n_samples);

  m.def(
      "ensemble_run",
      [](const LinearSdeSystem& sys, const SbpChain* chain, const std::string& scheme,
         double T, double dt, int n_samples, const std::function<double(const CVector&)>& f,
         const std::string& law, uint64_t seed, const SegmentOptions& opt) {
        return ensemble_run(sys, chain, scheme_from_string(scheme), T, dt, n_samples, f,
                            noise_law_from_string(law), seed, opt);
      },
      py::arg("system"), py::arg("chain").none(true), py::arg("scheme"), py::arg("T"),
      py::arg("dt"), py::arg("n_samples"), py::arg("f"), py::arg("law") = "rademacher",
      py::arg("seed") = 0, py::arg("options") = SegmentOptions());

  m.def("functional_component", &functional_component, py::arg("index"));
  m.def("functional_squared_norm", &functional_squared_norm);
  m.def("functional_cos_affine_quadratic", &functional_cos_affine_quadratic,
        py::arg("lin"), py::arg("quad"));

  // --- second-moment pipeline ---------------------------------------------------

  py::class_<SegmentRecord>(m, "SegmentRecord")
      .def_readonly("m", &SegmentRecord::m)
      .def_readonly("g", &SegmentRecord::g)
      .def_readonly("q_win", &SegmentRecord::q_win)
      .def_readonly("q_tilde", &SegmentRecord::q_tilde)
      .def_readonly("lam", &SegmentRecord::lambda)
      .def_readonly("trace_defect", &SegmentRecord::trace_defect)
      .def_readonly("min_eig", &SegmentRecord::min_eig);

  py::class_<MomentLedger>(m, "MomentLedger")
      .def_readonly("lambda_L", &MomentLedger::lambda_L)
      .def_readonly("Lambda_T", &MomentLedger::Lambda_T)
      .def_readonly("Gamma", &MomentLedger::Gamma)
      .def_readonly("g", &MomentLedger::g)
      .def_readonly("q_win", &MomentLedger::q_win)
      .def_readonly("q_tilde", &MomentLedger::q_tilde);

  py::class_<PipelineOptions>(m, "PipelineOptions")
      .def(py::init<>())
      .def_readwrite("use_closure", &PipelineOptions::use_closure)
      .def_readwrite("p_star", &PipelineOptions::p_star)
      .def_readwrite("steps", &PipelineOptions::steps)
      .def_readwrite("Sigma0", &PipelineOptions::Sigma0);

  py::class_<PipelineResult>(m, "PipelineResult")
      .def_readonly("mu_hat", &PipelineResult::mu_hat)
      .def_readonly("tau", &PipelineResult::tau)
      .def_readonly("steps_per_segment", &PipelineResult::steps_per_segment)
      .def_readonly("sigma0_scale", &PipelineResult::sigma0_scale)
      .def_readonly("sigma_L", &PipelineResult::sigma_L)
      .def_readonly("ledger", &PipelineResult::ledger)
      .def_readonly("segments", &PipelineResult::segments);

  m.def("segment_pipeline", &segment_pipeline, py::arg("system"), py::arg("chain"),
        py::arg("T"), py::arg("tau"), py::arg("O"),
        py::arg("options") = PipelineOptions());
  m.def("covariance_lightcone_bound", &covariance_lightcone_bound, py::arg("chain"),
        py::arg("readout"), py::arg("Sigma_T"), py::arg("lightcone"), py::arg("C"));

  // --- experiments ----------------------------------------------------------------

  py::class_<SlopeFit>(m, "SlopeFit")
      .def_readonly("x", &SlopeFit::x)
      .def_readonly("y", &SlopeFit::y)
      .def_readonly("slope", &SlopeFit::slope)
      .def_readonly("intercept", &SlopeFit::intercept)
      .def_readonly("r2", &SlopeFit::r2);

  m.def("fit_slope", &fit_slope, py::arg("x"), py::arg("y"));

  py::class_<InvariantCheck>(m, "InvariantCheck")
      .def_readonly("name", &InvariantCheck::name)
      .def_readonly("value", &InvariantCheck::value)
      .def_readonly("tol", &InvariantCheck::tol)
      .def_readonly("pass_", &InvariantCheck::pass);

  m.def("run_invariant_battery", &run_invariant_battery, py::arg("seed") = 2026);

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def_readwrite("experiment", &ExperimentConfig::experiment)
      .def_readwrite("builtin", &ExperimentConfig::builtin)
      .def_readwrite("sigma", &ExperimentConfig::sigma)
      .def_readwrite("n_grid", &ExperimentConfig::n_grid)
      .def_readwrite("M", &ExperimentConfig::M)
      .def_readwrite("h", &ExperimentConfig::h)
      .def_readwrite("p_star", &ExperimentConfig::p_star)
      .def_readwrite("use_mlc", &ExperimentConfig::use_mlc)
      .def_readwrite("scheme", &ExperimentConfig::scheme)
      .def_readwrite("dt", &ExperimentConfig::dt)
      .def_readwrite("tau", &ExperimentConfig::tau)
      .def_readwrite("T", &ExperimentConfig::T)
      .def_readwrite("n_samples", &ExperimentConfig::n_samples)
      .def_readwrite("n_paths", &ExperimentConfig::n_paths)
      .def_readwrite("n_ref", &ExperimentConfig::n_ref)
      .def_readwrite("dt_ref", &ExperimentConfig::dt_ref)
      .def_readwrite("rk4_steps", &ExperimentConfig::rk4_steps)
      .def_readwrite("dilated", &ExperimentConfig::dilated)
      .def_readwrite("seed", &ExperimentConfig::seed)
      .def_readwrite("threads", &ExperimentConfig::threads)
      .def_readwrite("out_prefix", &ExperimentConfig::out_prefix);

  m.def("config_from_json", &config_from_json, py::arg("text"));
  m.def("config_echo_json", &config_echo_json, py::arg("config"));
  m.def("experiment_names", &experiment_names);
  m.def("run_experiment", &run_experiment, py::arg("config"), py::arg("out_dir"),
        py::call_guard<py::gil_scoped_release>());
}
