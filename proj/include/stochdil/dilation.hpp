// SBP tight-binding ancilla chain, moment-matching vectors, boundary closure,
// dilated operators, light-cone estimate, and readout projections.
#pragma once

#include "stochdil/common.hpp"
#include "stochdil/sde_model.hpp"

#include <functional>

namespace stochdil {

// Geometrically graded chain on sites 0..M with p_j = exp(-h(M-j)).  The
// generator F is assembled twice: constructively from the SBP triple
// (W, Q, D) and from the closed-form nearest-neighbor entries f_j; the two
// must agree entrywise, which build_chain enforces.
struct SbpChain {
  int M = 0;
  double h = 0.0;
  double theta = 2.0;
  RVector p;    // grid values p_j
  RVector w;    // trapezoid quadrature weights
  RMatrix W;    // diag(w)
  RMatrix Q;    // skew-symmetric-up-to-boundary difference stencil
  RMatrix D;    // W^{-1} Q
  RMatrix F_w;  // split form 1/2 (P D + D P) - 1/2 W^{-1} B P
  RMatrix F;    // symmetrized generator W^{1/2} F_w W^{-1/2}
  RVector f;    // off-diagonal entries, f(j) couples sites j and j+1
  RVector r;    // reference mode, unit norm
  double Z = 0.0;      // normalizer, Z^2 = sum_j w_j
  double alpha = 0.0;  // boundary closure strength (= e^h/(e^h - 1))
  RMatrix F_closed;    // F + alpha |M><M|

  const RMatrix& generator(bool use_closure) const { return use_closure ? F_closed : F; }
};

SbpChain build_chain(int M, double h, double theta = 2.0);

// Closed-form tridiagonal generator from the f_j formula alone (no SBP
// scaffolding); valid for M >= 2, used for cross-checks and tiny chains.
RMatrix closed_form_generator(int M, double h);

struct Readout {
  int j_star = 0;
  double p_star = 0.0;  // actual grid value p_{j_star}
  RVector l;            // evaluation functional, supported on sites 0..j_star
  double beta = 0.0;    // ||l||
  double P_star = 0.0;  // sum_{j<=j*} w_j
  double P_win = 0.0;   // window weight of the reference mode
};

// Selects j_star as the grid site with p_j nearest the target (ties toward
// the smaller index) and builds l_j = (Z/P_*) sqrt(w_j) on the window.
Readout make_readout(const SbpChain& chain, double p_star_target);

// max over 0 <= k <= k_max of |<l|(theta F)^k|r> - 1| by iterated matvecs.
double moment_check(const SbpChain& chain, const Readout& readout, bool use_closure,
                    int k_max);

struct DilatedOperators {
  int ancilla_dim = 0;  // M + 1
  int system_dim = 0;
  int dim = 0;  // (M+1) * N
  bool use_closure = false;
  std::function<CMatrix(double)> Htilde;        // I (x) H + i theta F (x) K
  std::vector<std::function<CMatrix(double)>> V;  // I (x) B_j
  std::function<CMatrix(double)> V0;            // -i Htilde - 1/2 sum V^† V
};

DilatedOperators dilate(const LinearSdeSystem& sys, const SbpChain& chain, bool use_closure);

struct LightConeEstimate {
  double K_max = 0.0;
  double T = 0.0;
  int m = 0;           // distance M - j_star from the truncated boundary
  double rho = 0.0;    // e * theta * K_max * T / (4 m sinh(h/2))
  bool feasible = false;
  double bound = 0.0;  // rho^{2m} / (1 - rho^2), infinite when rho >= 1
};

LightConeEstimate lightcone(const LinearSdeSystem& sys, const SbpChain& chain,
                            const Readout& readout, double T);

enum class ReadoutMode { lh, site };

// lh mode: (<l| ⊗ I) psi; site mode: block j_star divided by <j_star|r>.
CVector project_readout(const CVector& psi, const SbpChain& chain, const Readout& readout,
                        ReadoutMode mode);

// Frobenius distance between i F and the single-excitation restriction of the
// (M+1)-qubit hopping operator -1/2 sum_j f_j (X_j Y_{j+1} - Y_j X_{j+1}).
double pauli_xy_check(const RVector& f, const RMatrix& F);
double pauli_xy_check(const SbpChain& chain);

}  // namespace stochdil
