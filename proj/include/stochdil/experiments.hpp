#pragma once

#include "stochdil/lindblad.hpp"
#include "stochdil/trajectory.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stochdil {

// Configuration problem, annotated with the offending field (or the line for
// document-level parse failures). Maps to process exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Fully resolved experiment description: parsing applies per-experiment
// defaults first, then the document's overrides, then validates ranges and
// the dt | tau | T divisibility chain.
struct ExperimentConfig {
  std::string experiment;  // pathwise3d | weak2conv | spde_moment | lightcone_decay | invariants
  std::string builtin;     // system name, defaulted per experiment
  double sigma = 1.0;      // example3d noise strength
  int n_grid = 16;         // spde_adr grid size
  int M = 0;               // chain sites minus one
  double h = 1.0;          // chain grid spacing
  double p_star = 0.1;     // readout target
  bool use_mlc = true;     // boundary closure on the chain generator
  std::string scheme = "weak1";
  double dt = 0.0;
  double tau = 0.0;        // 0 = auto (1/K_max for the moment pipeline)
  double T = 0.0;          // 0 = auto where the experiment defines a horizon rule
  long n_samples = 0;      // Monte Carlo batch size
  int n_paths = 0;         // trajectory count for path ensembles
  long n_ref = 1000000;    // reference Euler-Maruyama sample count (weak2conv)
  double dt_ref = 1.0 / 4096.0;  // reference step
  int rk4_steps = 0;       // 0 = default density in the moment pipeline
  bool dilated = false;    // weak2conv: also run the dilated measurement route
  uint64_t seed = 2026;
  int threads = 1;
  std::string out_prefix;  // output file stem, defaulted to the experiment name
};

// Parses and validates a JSON config. Accepts either a bare config object or
// a summary document carrying the resolved config under a "config" key, so
// an emitted summary reproduces its own run.
ExperimentConfig config_from_json(const std::string& text);

// Resolved configuration as a JSON object (the "config" block of summaries).
std::string config_echo_json(const ExperimentConfig& cfg);

std::vector<std::string> experiment_names();

// Least-squares line fit with the coefficient of determination; the
// convergence studies pass log-log coordinates. Requires at least 4 points.
struct SlopeFit {
  std::vector<double> x;
  std::vector<double> y;
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

SlopeFit fit_slope(const std::vector<double>& x, const std::vector<double>& y);

// One entry of the invariant battery run by the `invariants` experiment.
struct InvariantCheck {
  std::string name;
  double value = 0.0;
  double tol = 0.0;
  bool pass = false;
};

std::vector<InvariantCheck> run_invariant_battery(uint64_t seed);

// Executes the configured experiment, writing CSV data and a JSON summary
// under out_dir (created if missing). Returns the process exit code: 0 on
// success, 1 when the invariant battery reports a failure.
int run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

}  // namespace stochdil
