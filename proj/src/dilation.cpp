#include "stochdil/dilation.hpp"

#include "stochdil/numerics.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace stochdil {

RMatrix closed_form_generator(int M, double h) {
  if (M < 2) throw ContractViolation("closed_form_generator: need M >= 2");
  const double c = 1.0 / (4.0 * std::sinh(h / 2.0));
  RMatrix F = RMatrix::Zero(M + 1, M + 1);
  for (int j = 0; j < M; ++j) {
    double fj = c;
    if (j == 0) fj = c * std::sqrt(1.0 + std::exp(-h));
    if (j == M - 1) fj = c * std::sqrt(1.0 + std::exp(h));
    F(j, j + 1) = fj;
    F(j + 1, j) = -fj;
  }
  return F;
}

SbpChain build_chain(int M, double h, double theta) {
  if (M < 4) throw ContractViolation("build_chain: need M >= 4 (two bulk sites)");
  if (!(h > 0)) throw ContractViolation("build_chain: h must be positive");
  if (!(theta > 0)) throw ContractViolation("build_chain: theta must be positive");

  SbpChain chain;
  chain.M = M;
  chain.h = h;
  chain.theta = theta;

  // Geometric grid and trapezoid weights.
  chain.p.resize(M + 1);
  for (int j = 0; j <= M; ++j) chain.p(j) = std::exp(-h * (M - j));
  RVector spacing(M);  // h_j = p_{j+1} - p_j
  for (int j = 0; j < M; ++j) spacing(j) = chain.p(j + 1) - chain.p(j);
  chain.w.resize(M + 1);
  chain.w(0) = 0.5 * spacing(0);
  for (int j = 1; j < M; ++j) chain.w(j) = 0.5 * (spacing(j - 1) + spacing(j));
  chain.w(M) = 0.5 * spacing(M - 1);

  // Constructive SBP path: centered stencil Q, derivative D = W^{-1} Q,
  // split form F_w, then the similarity transform that symmetrizes it.
  chain.W = RMatrix(chain.w.asDiagonal());
  chain.Q = RMatrix::Zero(M + 1, M + 1);
  for (int j = 0; j < M; ++j) {
    chain.Q(j, j + 1) = 0.5;
    chain.Q(j + 1, j) = -0.5;
  }
  chain.Q(0, 0) = -0.5;
  chain.Q(M, M) = 0.5;

  const RVector inv_w = chain.w.cwiseInverse();
  chain.D = inv_w.asDiagonal() * chain.Q;
  RMatrix B = RMatrix::Zero(M + 1, M + 1);  // boundary matrix Q + Q^T
  B(0, 0) = -1.0;
  B(M, M) = 1.0;
  const RMatrix P = RMatrix(chain.p.asDiagonal());
  chain.F_w = 0.5 * (P * chain.D + chain.D * P) - 0.5 * (inv_w.asDiagonal() * (B * P));
  const RVector sqrt_w = chain.w.cwiseSqrt();
  chain.F = sqrt_w.asDiagonal() * chain.F_w * sqrt_w.cwiseInverse().asDiagonal();

  // Cross-check against the closed-form entries; both paths must agree or an
  // index convention has drifted somewhere.
  const RMatrix F_ref = closed_form_generator(M, h);
  if ((chain.F - F_ref).cwiseAbs().maxCoeff() > 1e-12) {
    std::ostringstream msg;
    msg << "build_chain: constructive and closed-form generators disagree by "
        << (chain.F - F_ref).cwiseAbs().maxCoeff();
    throw ContractViolation(msg.str());
  }
  chain.f.resize(M);
  for (int j = 0; j < M; ++j) chain.f(j) = chain.F(j, j + 1);

  // Reference mode and the boundary closure that makes it an exact
  // eigenvector of theta*F at the truncated edge.
  chain.Z = std::sqrt(chain.w.sum());
  chain.r = sqrt_w / chain.Z;
  const RVector Fr = chain.F * chain.r;
  chain.alpha = 1.0 / theta - Fr(M) / chain.r(M);
  chain.F_closed = chain.F;
  chain.F_closed(M, M) += chain.alpha;
  return chain;
}

Readout make_readout(const SbpChain& chain, double p_star_target) {
  if (!(p_star_target > 0)) throw ContractViolation("make_readout: p_star must be positive");
  Readout out;
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int j = 0; j <= chain.M; ++j) {
    const double dist = std::abs(chain.p(j) - p_star_target);
    if (dist < best_dist) {  // strict: ties resolve to the smaller index
      best = j;
      best_dist = dist;
    }
  }
  out.j_star = best;
  out.p_star = chain.p(best);
  out.P_star = chain.w.head(best + 1).sum();
  out.l = RVector::Zero(chain.M + 1);
  for (int j = 0; j <= best; ++j) out.l(j) = (chain.Z / out.P_star) * std::sqrt(chain.w(j));
  out.beta = out.l.norm();
  out.P_win = chain.r.head(best + 1).squaredNorm();
  return out;
}

double moment_check(const SbpChain& chain, const Readout& readout, bool use_closure,
                    int k_max) {
  if (k_max < 0) throw ContractViolation("moment_check: k_max must be nonnegative");
  const RMatrix& F = chain.generator(use_closure);
  RVector v = chain.r;
  double worst = std::abs(readout.l.dot(v) - 1.0);
  for (int k = 1; k <= k_max; ++k) {
    v = chain.theta * (F * v);
    worst = std::max(worst, std::abs(readout.l.dot(v) - 1.0));
  }
  return worst;
}

DilatedOperators dilate(const LinearSdeSystem& sys, const SbpChain& chain, bool use_closure) {
  DilatedOperators ops;
  ops.ancilla_dim = chain.M + 1;
  ops.system_dim = sys.dim;
  ops.dim = ops.ancilla_dim * sys.dim;
  ops.use_closure = use_closure;

  const CMatrix F = chain.generator(use_closure).cast<Complex>();
  const CMatrix IA = CMatrix::Identity(ops.ancilla_dim, ops.ancilla_dim);
  const double theta = chain.theta;
  const LinearSdeSystem base = sys;

  auto assemble_h = [base, F, IA, theta](double t) {
    CMatrix L = base.A(t);
    for (int j = 0; j < base.channels; ++j) {
      const CMatrix Bj = base.B[j](t);
      L += 0.5 * (Bj.adjoint() * Bj);
    }
    const HermitianSplit split = hermitian_split(L);
    return CMatrix(kron(IA, split.H) + kI * theta * kron(F, split.K));
  };
  auto assemble_v = [base, IA](int j, double t) { return CMatrix(kron(IA, base.B[j](t))); };

  if (sys.autonomous) {
    const CMatrix H0 = assemble_h(0.0);
    ops.Htilde = [H0](double) { return H0; };
    std::vector<CMatrix> V0s;
    CMatrix drift = -kI * H0;
    for (int j = 0; j < sys.channels; ++j) {
      const CMatrix Vj = assemble_v(j, 0.0);
      drift -= 0.5 * (Vj.adjoint() * Vj);
      V0s.push_back(Vj);
    }
    for (int j = 0; j < sys.channels; ++j) {
      const CMatrix Vj = V0s[j];
      ops.V.push_back([Vj](double) { return Vj; });
    }
    ops.V0 = [drift](double) { return drift; };
  } else {
    ops.Htilde = assemble_h;
    for (int j = 0; j < sys.channels; ++j)
      ops.V.push_back([assemble_v, j](double t) { return assemble_v(j, t); });
    const int channels = sys.channels;
    ops.V0 = [assemble_h, assemble_v, channels](double t) {
      CMatrix drift = -kI * assemble_h(t);
      for (int j = 0; j < channels; ++j) {
        const CMatrix Vj = assemble_v(j, t);
        drift -= 0.5 * (Vj.adjoint() * Vj);
      }
      return drift;
    };
  }
  return ops;
}

LightConeEstimate lightcone(const LinearSdeSystem& sys, const SbpChain& chain,
                            const Readout& readout, double T) {
  LightConeEstimate est;
  est.T = T;
  est.m = chain.M - readout.j_star;
  est.K_max = structure(sys, uniform_grid(0.0, T, 256)).K_max;
  if (est.m < 1) {
    est.rho = std::numeric_limits<double>::infinity();
    est.feasible = false;
    est.bound = std::numeric_limits<double>::infinity();
    return est;
  }
  est.rho =
      std::exp(1.0) * chain.theta * est.K_max * T / (4.0 * est.m * std::sinh(chain.h / 2.0));
  est.feasible = est.rho < 1.0;
  est.bound = est.feasible
                  ? std::pow(est.rho, 2 * est.m) / (1.0 - est.rho * est.rho)
                  : std::numeric_limits<double>::infinity();
  return est;
}

CVector project_readout(const CVector& psi, const SbpChain& chain, const Readout& readout,
                        ReadoutMode mode) {
  const int sites = chain.M + 1;
  if (psi.size() % sites != 0)
    throw ContractViolation("project_readout: state dimension is not a multiple of M+1");
  const int n = static_cast<int>(psi.size()) / sites;
  if (mode == ReadoutMode::site) return psi.segment(readout.j_star * n, n) / chain.r(readout.j_star);
  CVector out = CVector::Zero(n);
  for (int j = 0; j <= readout.j_star; ++j) out += readout.l(j) * psi.segment(j * n, n);
  return out;
}

double pauli_xy_check(const RVector& f, const RMatrix& F) {
  const int sites = static_cast<int>(F.rows());
  if (f.size() != sites - 1) throw ContractViolation("pauli_xy_check: f/F size mismatch");
  if (sites > 10) throw ContractViolation("pauli_xy_check: chain too large for statevector");
  const int dim = 1 << sites;

  CMatrix X(2, 2), Y(2, 2);
  X << 0, 1, 1, 0;
  Y << 0, Complex(0, -1), Complex(0, 1), 0;

  // -1/2 sum_j f_j (X_j Y_{j+1} - Y_j X_{j+1}) with qubit 0 as the first
  // tensor factor (most significant bit).
  CMatrix op = CMatrix::Zero(dim, dim);
  for (int j = 0; j + 1 < sites; ++j) {
    const CMatrix pair = kron(X, Y) - kron(Y, X);
    const CMatrix left = CMatrix::Identity(1 << j, 1 << j);
    const int rest = sites - 2 - j;
    const CMatrix right = CMatrix::Identity(1 << rest, 1 << rest);
    op -= 0.5 * f(j) * kron(left, kron(pair, right));
  }

  // Restrict to the single-excitation sector: site j <-> only qubit j set.
  CMatrix restricted(sites, sites);
  for (int a = 0; a < sites; ++a)
    for (int b = 0; b < sites; ++b)
      restricted(a, b) = op(1 << (sites - 1 - a), 1 << (sites - 1 - b));
  return (restricted - kI * F.cast<Complex>()).norm();
}

double pauli_xy_check(const SbpChain& chain) { return pauli_xy_check(chain.f, chain.F); }

}  // namespace stochdil
