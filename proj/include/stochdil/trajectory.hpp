#pragma once

#include "stochdil/dilation.hpp"
#include "stochdil/noise.hpp"
#include "stochdil/sde_model.hpp"

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace stochdil {

// Raised when an ancilla refresh finds (almost) no weight left inside the
// prefront window -- the segment length or chain geometry is infeasible.
struct RefreshFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Scheme { weak1, weak2, weak2_measurement };

Scheme scheme_from_string(const std::string& name);
std::string to_string(Scheme scheme);

// Unnormalized trajectory state psi = sqrt(lambda) * phi with ||phi|| = 1.
// lambda is the running product of the segment growth factors g_m (the
// initial norm of the state is tracked separately by the driver).
struct WeightedState {
  CVector phi;
  double lambda = 1.0;
  std::vector<double> g;
};

// Midpoint-frozen coefficients of the weak order-2 step, plus the interaction
// blocks G_1..G_3 of its two-qubit weak-measurement realization.
struct Weak2Midpoint {
  double dt = 0;
  CMatrix A_mid;
  CMatrix V_mid;
  CMatrix Vdot_mid;
  CMatrix B_mid;  // (A V + Vdot + V A) / 2
  CMatrix C_mid;  // (A V - Vdot - V A) / (2 sqrt(3))
  CMatrix G1;     // sqrt(dt) V + dt^{3/2} (B + V V^dag V / 6)
  CMatrix G2;     // dt / sqrt(2) * V^2
  CMatrix G3;     // dt^{3/2} C
  bool noise_block = false;  // A_mid = -V_mid^dag V_mid / 2 by construction
};

// Evaluate the midpoint operators at t_n + dt/2. With noise_block set, the
// drift is replaced by -V^dag V/2 (the form required by the two-qubit
// realization; any Hamiltonian part must then be split off by the caller).
// vdot may be empty: autonomous coefficients use zero, otherwise a central
// difference with step min(1e-6, dt/100).
Weak2Midpoint make_weak2_midpoint(const MatrixProvider& A, const MatrixProvider& V,
                                  const MatrixProvider& vdot, double t_n, double dt,
                                  bool autonomous, bool noise_block = false);
Weak2Midpoint make_weak2_midpoint(const LinearSdeSystem& sys, double t_n, double dt,
                                  bool noise_block = false);

// One weak order-1 splitting step: e^{-i Htilde dt} followed by the channel
// maps (I - dt/2 V_j^dag V_j + xi_j V_j) applied for j = 1..J in order.
// xi_j are the scaled increments (Rademacher signs times sqrt(dt)).
CVector weak1_step(const CVector& psi, const CMatrix& Htilde,
                   const std::vector<CMatrix>& V, double dt, const RVector& xi);

// Same step with the drift propagator e^{-i Htilde dt} already computed;
// this is what the run loops use for autonomous systems.
CVector weak1_step_with(const CVector& psi, const CMatrix& propagator,
                        const std::vector<CMatrix>& V, double dt, const RVector& xi);

// Single-channel Kraus branch of the one-qubit interaction circuit:
// U = exp(sqrt(dt) [[0, -V^dag], [V, 0]]) on ancilla (x) system, then the
// s-conditioned X-basis unitary on the ancilla and postselection on |0>.
// The uniform 1/sqrt(2) from the Hadamard is absorbed so V = 0 gives the
// identity map.
CVector interaction_step(const CVector& psi, const CMatrix& V, double dt, int s);

// Matrix form of the weak order-2 step,
// F2 = I + dt A + dt^2/2 A^2 + sqrt(dt) xi1 (V + dt B) + dt^{3/2} xi2 C
//      + dt/2 xi3 V^2  with xi3 = xi1^2 - 1.
CVector weak2_matrix_step(const CVector& psi, const Weak2Midpoint& mid, double dt,
                          double xi1, double xi2);

// Two-qubit weak-measurement realization of the same step: the effective map
// <m(xi1,xi2)| e^{Omega} |00> / <m|00> on the system, with Omega built from
// the blocks G_1..G_3 (requires the noise-block midpoint).
CVector weak2_measurement_step(const CVector& psi, const Weak2Midpoint& mid, double dt,
                               double xi1, double xi2);

// Weight of psi outside the r_h ancilla mode, relative to ||psi||^2.
double off_mode_weight(const CVector& psi, const SbpChain& chain);

struct SegmentOptions {
  double T = 1.0;
  double dt = 1e-3;
  double tau = 0.0;          // <= 0: default 1/K_max rounded down to a dt multiple
  bool refresh = true;
  bool use_closure = true;
  bool fold_qm = false;      // fold window weights q_m into lambda
  double p_star = 0.1;
  ReadoutMode mode = ReadoutMode::lh;
  bool record_path = false;  // keep the reconstructed system vector per step
};

struct SegmentedRun {
  WeightedState state;          // phi at time T, lambda = prod g_m (and q_m if folded)
  std::vector<double> q;        // window weight per refresh
  double Gamma1 = 0;            // sum g_m^{-1/2}
  double Gamma2 = 0;            // sum g_m^{-1}
  double oaa_cost = 0;          // sum q_m^{-1/2}, the amplitude-amplification budget
  double tau = 0;               // segment length actually used
  CVector readout;              // ||psi_0|| sqrt(lambda) times the projected state
  CMatrix path;                 // dim x (steps+1) reconstructed path if recorded
};

// Dilated pathwise run: r_h (x) x0 evolved with the chosen scheme, segment
// growth factors harvested every tau, optional ancilla refresh (window
// projection, Householder reset to r_h).
SegmentedRun run_segmented(const LinearSdeSystem& sys, const SbpChain& chain,
                           Scheme scheme, const NoisePath& noise,
                           const SegmentOptions& opt);

// Reference iterate of the underlying SDE with the same presampled noise:
// weak-1 splitting (propagator e^{dt L}, then the channel maps) or the
// midpoint weak-2 step, directly on the system variables. Column n holds
// X at t_n = n dt.
CMatrix classical_path(const LinearSdeSystem& sys, Scheme scheme, const NoisePath& noise,
                       double T, double dt);

struct EnsembleEstimate {
  double mean = 0;
  double std_error = 0;
  int n_samples = 0;
};

// Monte Carlo estimate of E[f(X_T)] over independent noise streams
// (stream = sample index under the given seed). With a chain the samples run
// through the dilated simulation and its readout; without one they use the
// classical iterate. Reduction order is fixed (sample order).
EnsembleEstimate ensemble_run(const LinearSdeSystem& sys, const SbpChain* chain,
                              Scheme scheme, double T, double dt, int n_samples,
                              const std::function<double(const CVector&)>& f,
                              NoiseLaw law, uint64_t seed, SegmentOptions opt = {});

// Built-in smooth functionals for ensemble estimates.
std::function<double(const CVector&)> functional_component(int index);
std::function<double(const CVector&)> functional_squared_norm();
// cos( sum_i lin_i Re x_i + sum_i quad_i (Re x_i)^2 )
std::function<double(const CVector&)> functional_cos_affine_quadratic(const RVector& lin,
                                                                      const RVector& quad);

}  // namespace stochdil
