#pragma once

#include "stochdil/common.hpp"

namespace stochdil {

// Split of a generator L into L = -iH + K with both H and K Hermitian:
// K = (L + L^dag)/2 is the symmetric (dissipative) part, H = i(L - L^dag)/2
// the Hamiltonian part.
struct HermitianSplit {
  CMatrix H;
  CMatrix K;
};

HermitianSplit hermitian_split(const CMatrix& L);

// Exponential of an anti-Hermitian matrix S, computed through the
// eigendecomposition of the Hermitian matrix iS, so the result is unitary to
// rounding. Throws ContractViolation if S is not anti-Hermitian within tol
// (relative Frobenius) or if the unitarity postcondition fails.
CMatrix expm_skew(const CMatrix& S, double tol = 1e-12);

// Exponential of a general square matrix by scaling-and-squaring with a
// Taylor kernel. Used where the generator has a Hermitian component (the
// closure term), so the spectral route through expm_skew does not apply.
CMatrix expm_dense(const CMatrix& A);

// Kronecker product with the first factor major: (A (x) B)(e_i (x) e_j) equals
// A e_i (x) B e_j, and the composite row index is i * B.rows() + j. Throughout
// the library the ancilla chain is the first (major) factor.
CMatrix kron(const CMatrix& A, const CMatrix& B);
RMatrix kron(const RMatrix& A, const RMatrix& B);

// Unit basis vector e_j in dimension n.
CVector basis_vector(int n, int j);

// Default fixed-step density for RK4 integrations: 200 steps per unit time,
// never fewer than 1.
int default_rk4_steps(double t0, double t1);

// Classical fixed-step RK4 for dy/dt = rhs(t, y) on any Eigen-style state.
template <class State, class Rhs>
State rk4_propagate(State y, double t0, double t1, int steps, Rhs&& rhs) {
  if (steps < 1) throw ContractViolation("rk4_propagate: steps must be >= 1");
  const double dt = (t1 - t0) / steps;
  for (int n = 0; n < steps; ++n) {
    const double t = t0 + n * dt;
    const State k1 = rhs(t, y);
    const State k2 = rhs(t + 0.5 * dt, State(y + (0.5 * dt) * k1));
    const State k3 = rhs(t + 0.5 * dt, State(y + (0.5 * dt) * k2));
    const State k4 = rhs(t + dt, State(y + dt * k3));
    y += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return y;
}

}  // namespace stochdil
