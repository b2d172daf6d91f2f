// Linear Ito SDE problems dX = A(t)X dt + sum_j B_j(t)X dW^j, their
// structural quantities (L, H, K, growth bounds), and classical reference
// solvers used as oracles by the dilated routes.
#pragma once

#include "stochdil/common.hpp"
#include "stochdil/noise.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace stochdil {

using MatrixProvider = std::function<CMatrix(double)>;
using VectorProvider = std::function<CVector(double)>;

struct LinearSdeSystem {
  std::string name;
  int dim = 0;
  int channels = 0;
  MatrixProvider A;
  std::vector<MatrixProvider> B;  // one per channel
  // Optional affine terms; when present the system is inhomogeneous and can
  // be reduced to a homogeneous one via homogenize().
  VectorProvider D;               // additive drift
  std::vector<VectorProvider> C;  // additive noise per channel (may be empty)
  // Optional analytic time derivatives (midpoint weak-2 needs dV/dt); when
  // absent a central finite difference is substituted and flagged.
  MatrixProvider Adot;
  std::vector<MatrixProvider> Bdot;
  double coeff_bound = 0.0;  // uniform bound on the coefficients; recorded only
  bool autonomous = false;   // enables one-time operator evaluation in loops

  CVector x0;
  double horizon = 1.0;

  bool has_additive() const { return static_cast<bool>(D) || !C.empty(); }
  bool has_analytic_derivatives() const { return static_cast<bool>(Adot); }
};

// Evaluates B'_j(t); uses the analytic provider when present, otherwise a
// central difference with the given step (callers pass min(1e-6, dt/100)).
CMatrix bdot_eval(const LinearSdeSystem& sys, int channel, double t, double fd_step = 1e-6);

struct StructureReport {
  std::vector<double> t;
  std::vector<CMatrix> L;      // L(t) = A + 1/2 sum_j B_j^† B_j
  std::vector<CMatrix> H;      // Hermitian part pair: L = -iH + K
  std::vector<CMatrix> K;
  std::vector<double> gamma;   // largest eigenvalue of K(t)
  double K_max = 0.0;          // sup over samples of ||K(t)||_2
};

// Augments an affine system (additive D and/or C_j) with a constant unit
// component: A' = [[A, D],[0,0]], B'_j = [[B_j, C_j],[0,0]], x0' = (x0, 1).
LinearSdeSystem homogenize(const LinearSdeSystem& sys);

StructureReport structure(const LinearSdeSystem& sys, const std::vector<double>& t_samples);

// Uniform sampling grid used for sup-norm estimates of K(t).
std::vector<double> uniform_grid(double t0, double t1, int n);

// d/dt Sigma = A Sigma + Sigma A^† + sum_j B_j Sigma B_j^†.
CMatrix second_moment_rhs(const LinearSdeSystem& sys, const CMatrix& Sigma, double t);

// RK4 solution of the second-moment ODE from t0 to t1.
CMatrix second_moment_solve(const LinearSdeSystem& sys, CMatrix Sigma, double t0, double t1,
                            int steps);

// Euler--Maruyama with presampled Gaussian increments:
//   X_{n+1} = X_n + (A X_n + D) dt + sum_j (B_j X_n + C_j) dW^j_n.
CVector em_reference(const LinearSdeSystem& sys, const CVector& x0, double T, double dt,
                     const NoisePath& noise);

// exp(2 int_0^T gamma(s) ds) * ||x0||^2 via trapezoid quadrature of gamma.
double growth_envelope(const LinearSdeSystem& sys, const CVector& x0, double T,
                       int nodes = 129);

// Builtin problems used throughout the experiments.
LinearSdeSystem make_example3d(double sigma = 1.0);
LinearSdeSystem make_random_b_weak2();
LinearSdeSystem make_spde_adr(int n_grid = 16);

// Loads a problem from a JSON document: either {"builtin": name, ...options}
// or an explicit {"dim", "channels", "A", "B", "x0", "T"} description where
// matrices are nested arrays and entries are numbers or [re, im] pairs.
LinearSdeSystem system_from_json(const std::string& json_text);
std::vector<std::string> builtin_names();

}  // namespace stochdil
