// Deterministic second-moment evolution of the dilated system: the density
// generator in adjoint form, segment-wise RK4 with a positivity guard, the
// window recovery map, and the weighted segment pipeline with its ledger.
#include "stochdil/lindblad.hpp"

#include "stochdil/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

namespace stochdil {

namespace {

// tr(A B) without forming the product.
Complex trace_product(const CMatrix& A, const CMatrix& B) {
  return A.cwiseProduct(B.transpose()).sum();
}

// Spectral norm through the singular values (the matrices here are small).
double spectral_norm(const CMatrix& A) {
  if (A.size() == 0) return 0.0;
  return A.jacobiSvd().singularValues()(0);
}

// Shared RK4 core: integrate, re-Hermitize, and check positivity; one retry
// with the step count doubled before giving up.
CMatrix evolve_core(const CMatrix& rho, double t_m, double tau, int steps,
                    const std::function<CMatrix(double, const CMatrix&)>& rhs,
                    double* min_eig_out) {
  auto run = [&](int n) {
    CMatrix out = rk4_propagate(rho, t_m, t_m + tau, n, rhs);
    return CMatrix(0.5 * (out + out.adjoint().eval()));
  };
  auto min_eig = [](const CMatrix& m) {
    Eigen::SelfAdjointEigenSolver<CMatrix> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
  };
  CMatrix out = run(steps);
  double lo = min_eig(out);
  if (lo < -1e-6) {
    out = run(2 * steps);
    lo = min_eig(out);
    if (lo < -1e-6)
      throw ContractViolation("evolve_segment: positivity violated beyond -1e-6 after retry");
  }
  if (min_eig_out) *min_eig_out = lo;
  return out;
}

}  // namespace

CMatrix lindblad_rhs(const CMatrix& rho, double t, const DilatedOperators& ops) {
  if (rho.rows() != rho.cols() || rho.rows() != ops.dim)
    throw ContractViolation("lindblad_rhs: rho must be square with the dilated dimension");
  const CMatrix Ht = ops.Htilde(t);
  // Adjoint form: for Hermitian Htilde this is the plain commutator.
  CMatrix out = -kI * (Ht * rho) + kI * (rho * Ht.adjoint());
  for (const auto& Vp : ops.V) {
    const CMatrix V = Vp(t);
    const CMatrix X = V * rho;
    out.noalias() += X * V.adjoint();
    const CMatrix G = V.adjoint() * V;
    out.noalias() -= 0.5 * (G * rho);
    out.noalias() -= 0.5 * (rho * G);
  }
  return out;
}

CMatrix evolve_segment(const CMatrix& rho, double t_m, double tau,
                       const DilatedOperators& ops, int steps) {
  if (rho.rows() != rho.cols() || rho.rows() != ops.dim)
    throw ContractViolation("evolve_segment: rho must be square with the dilated dimension");
  if (tau < 0.0) throw ContractViolation("evolve_segment: tau must be nonnegative");
  if (tau == 0.0) return rho;
  if (steps < 1) throw ContractViolation("evolve_segment: steps must be >= 1");
  return evolve_core(
      rho, t_m, tau, steps,
      [&](double t, const CMatrix& r) { return lindblad_rhs(r, t, ops); }, nullptr);
}

CMatrix StructuredLindblad::rhs(const CMatrix& rho) const {
  const int dim = block * N;
  if (rho.rows() != dim || rho.cols() != dim)
    throw ContractViolation("StructuredLindblad::rhs: dimension mismatch");
  // Column-major storage makes (I (x) X) rho a single wide product on the
  // N-row slab view of rho.
  auto block_left = [&](const CMatrix& X, const CMatrix& m) {
    CMatrix out(dim, dim);
    Eigen::Map<const CMatrix> in(m.data(), N, block * dim);
    Eigen::Map<CMatrix> o(out.data(), N, block * dim);
    o.noalias() = X * in;
    return out;
  };
  // (Fhat (x) I) m: the chain generator is tridiagonal (the closure only adds
  // a diagonal corner), so each block row mixes at most three neighbors.
  auto chain_left = [&](const CMatrix& m) {
    CMatrix out = CMatrix::Zero(dim, dim);
    for (int a = 0; a < block; ++a)
      for (int c = std::max(0, a - 1); c <= std::min(block - 1, a + 1); ++c) {
        const double fac = Fhat(a, c);
        if (fac != 0.0) out.middleRows(a * N, N).noalias() += fac * m.middleRows(c * N, N);
      }
    return out;
  };
  // -i Htilde rho = -i (I (x) H) rho + theta (Fhat (x) K) rho; the adjoint
  // pair is formed by symmetry, which assumes a Hermitian rho (every RK4
  // stage preserves Hermiticity, so this holds throughout the integration).
  const CMatrix acc = -kI * block_left(H, rho) + theta * chain_left(block_left(K, rho));
  CMatrix out = acc + acc.adjoint().eval();
  for (const auto& Bj : B) {
    const CMatrix X = block_left(Bj, rho);
    // V rho V^dag = ((I (x) B) ((I (x) B) rho)^dag)^dag
    const CMatrix Y = block_left(Bj, CMatrix(X.adjoint()));
    out.noalias() += Y.adjoint();
  }
  if (!B.empty()) {
    const CMatrix Z = block_left(G, rho);
    out.noalias() -= 0.5 * Z;
    out.noalias() -= 0.5 * Z.adjoint().eval();
  }
  return out;
}

StructuredLindblad make_structured(const LinearSdeSystem& sys, const SbpChain& chain,
                                   bool use_closure) {
  if (!sys.autonomous)
    throw ContractViolation("make_structured: requires an autonomous system");
  if (sys.has_additive())
    throw ContractViolation("make_structured: homogenize the system first");
  StructuredLindblad s;
  s.N = sys.dim;
  s.block = chain.M + 1;
  s.theta = chain.theta;
  s.alpha = use_closure ? chain.alpha : 0.0;
  s.Fhat = chain.generator(use_closure);
  const StructureReport rep = structure(sys, {0.0});
  s.H = rep.H[0];
  s.K = rep.K[0];
  s.G = CMatrix::Zero(sys.dim, sys.dim);
  for (int j = 0; j < sys.channels; ++j) {
    s.B.push_back(sys.B[j](0.0));
    s.G += s.B.back().adjoint() * s.B.back();
  }
  return s;
}

CMatrix recover_sigma(const CMatrix& rho, const Readout& ro) {
  const int block = static_cast<int>(ro.l.size());
  if (block <= 0 || ro.j_star >= block)
    throw ContractViolation("recover_sigma: malformed readout");
  if (rho.rows() != rho.cols() || rho.rows() % block != 0)
    throw ContractViolation("recover_sigma: rho dimension is not a multiple of the chain size");
  const int N = static_cast<int>(rho.rows()) / block;
  CMatrix sigma = CMatrix::Zero(N, N);
  for (int a = 0; a <= ro.j_star; ++a)
    for (int b = 0; b <= ro.j_star; ++b)
      sigma.noalias() += (ro.l(a) * ro.l(b)) * rho.block(a * N, b * N, N, N);
  return sigma;
}

double observable(const CMatrix& rho, const Readout& ro, const CMatrix& O) {
  const CMatrix sigma = recover_sigma(rho, ro);
  if (O.rows() != sigma.rows() || O.cols() != sigma.cols())
    throw ContractViolation("observable: O must match the system dimension");
  if ((O - O.adjoint()).norm() > 1e-12 * std::max(1.0, O.norm()))
    throw ContractViolation("observable: O must be Hermitian");
  const double via_sigma = (sigma * O).trace().real();
  // Independent route through the assembled projector.
  const CMatrix ll = (ro.l * ro.l.transpose()).cast<Complex>();
  const double via_proj = trace_product(rho, kron(ll, O)).real();
  if (std::abs(via_sigma - via_proj) > 1e-10 * std::max(1.0, std::abs(via_sigma)))
    throw ContractViolation("observable: projector and recovery paths disagree");
  return via_proj;
}

PipelineResult segment_pipeline(const LinearSdeSystem& sys, const SbpChain& chain,
                                double T, double tau, const CMatrix& O,
                                const PipelineOptions& opt) {
  if (T <= 0.0) throw ContractViolation("segment_pipeline: T must be positive");
  if (O.rows() != sys.dim || O.cols() != sys.dim)
    throw ContractViolation("segment_pipeline: O must match the system dimension");
  if ((O - O.adjoint()).norm() > 1e-12 * std::max(1.0, O.norm()))
    throw ContractViolation("segment_pipeline: O must be Hermitian");

  // Segment length: default 1/K_max capped at the horizon.
  const StructureReport rep = structure(sys, uniform_grid(0.0, T, 256));
  if (tau <= 0.0) tau = (rep.K_max <= 1e-12) ? T : std::min(T, 1.0 / rep.K_max);
  tau = std::min(tau, T);
  const int L = static_cast<int>(std::ceil(T / tau - 1e-9));

  // Generator access: block-structured fast path for autonomous systems, the
  // dense provider route otherwise.
  std::optional<StructuredLindblad> fast;
  std::optional<DilatedOperators> ops;
  if (sys.autonomous)
    fast.emplace(make_structured(sys, chain, opt.use_closure));
  else
    ops.emplace(dilate(sys, chain, opt.use_closure));
  const Readout ro = make_readout(chain, opt.p_star);

  // Step count: 200 per unit of tau times a coarse coefficient bound.
  int steps = opt.steps;
  if (steps <= 0) {
    double coeff = 0.0;
    const std::vector<double> grid =
        sys.autonomous ? std::vector<double>{0.0} : uniform_grid(0.0, T, 64);
    for (double t : grid) {
      double c = spectral_norm(sys.A(t));
      for (int j = 0; j < sys.channels; ++j) {
        const double b = spectral_norm(sys.B[j](t));
        c += b * b;
      }
      coeff = std::max(coeff, c);
    }
    steps = std::max(100, static_cast<int>(std::ceil(200.0 * tau * coeff)));
  }

  // Seed covariance, rescaled to unit trace with the scale entering the ledger.
  CMatrix Sigma0 = opt.Sigma0.size() > 0 ? opt.Sigma0
                                         : CMatrix(sys.x0 * sys.x0.adjoint());
  if (Sigma0.rows() != sys.dim || Sigma0.cols() != sys.dim)
    throw ContractViolation("segment_pipeline: Sigma0 must match the system dimension");
  const double scale = Sigma0.trace().real();
  if (!(scale > 0.0))
    throw ContractViolation("segment_pipeline: Sigma0 must have positive trace");
  CMatrix sigma = Sigma0 / scale;
  sigma = 0.5 * (sigma + sigma.adjoint().eval());

  const RMatrix rr = chain.r * chain.r.transpose();
  const CMatrix rr_c = rr.cast<Complex>();
  // Constant projector for the independently computed normalized window
  // weight q_tilde (g_m = beta^2 q_tilde).
  const RVector l_tilde = ro.l / ro.beta;
  const CMatrix P_tilde =
      kron(CMatrix((l_tilde * l_tilde.transpose()).cast<Complex>()),
           CMatrix(CMatrix::Identity(sys.dim, sys.dim)));

  PipelineResult res;
  res.tau = tau;
  res.steps_per_segment = steps;
  res.sigma0_scale = scale;
  double lambda = scale;
  double Gamma = 0.0;
  double t_cur = 0.0;
  for (int m = 0; m < L; ++m) {
    const double seg_end = std::min(T, (m + 1) * tau);
    const double seg_tau = seg_end - t_cur;
    const CMatrix rho = kron(rr_c, sigma);
    double lo = 0.0;
    const CMatrix rho2 =
        sys.autonomous
            ? evolve_core(
                  rho, t_cur, seg_tau, steps,
                  [&](double, const CMatrix& r) { return fast->rhs(r); }, &lo)
            : evolve_core(
                  rho, t_cur, seg_tau, steps,
                  [&](double t, const CMatrix& r) { return lindblad_rhs(r, t, *ops); }, &lo);

    const CMatrix Sig = recover_sigma(rho2, ro);
    const double g = Sig.trace().real();
    if (!(g > 1e-14))
      throw ContractViolation("segment_pipeline: degenerate covariance (g_m <= 0)");
    const int N = sys.dim;
    double q_win = 0.0;
    for (int a = 0; a <= ro.j_star; ++a)
      q_win += rho2.block(a * N, a * N, N, N).trace().real();
    const double q_tilde = trace_product(rho2, P_tilde).real();
    // On the factored manifold tr rho' equals g_m when the closure feeds the
    // growth; the open chain is exactly trace preserving.
    const double tr_full = rho2.trace().real();
    const double defect =
        opt.use_closure ? std::abs(tr_full - g) / g : std::abs(tr_full - 1.0);

    sigma = Sig / g;
    sigma = 0.5 * (sigma + sigma.adjoint().eval());
    lambda *= g;
    Gamma += 1.0 / std::sqrt(g);
    res.segments.push_back({m, g, q_win, q_tilde, lambda, defect, lo});
    res.ledger.g.push_back(g);
    res.ledger.q_win.push_back(q_win);
    res.ledger.q_tilde.push_back(q_tilde);
    t_cur = seg_end;
  }
  res.sigma_L = sigma;
  res.ledger.lambda_L = lambda;
  res.ledger.Lambda_T = lambda;  // tr Sigma_T with tr sigma_L = 1
  res.ledger.Gamma = Gamma;
  res.mu_hat = lambda * (sigma * O).trace().real();
  return res;
}

double covariance_lightcone_bound(const SbpChain& chain, const Readout& ro,
                                  const CMatrix& Sigma_T, const LightConeEstimate& lc,
                                  double C) {
  if (C < 0.0)
    throw ContractViolation("covariance_lightcone_bound: C must be nonnegative");
  if (!lc.feasible || lc.rho >= 1.0)
    throw ContractViolation("covariance_lightcone_bound: infeasible ratio (rho >= 1)");
  if (ro.j_star >= chain.r.size())
    throw ContractViolation("covariance_lightcone_bound: readout outside the chain");
  const double gamma = chain.r(ro.j_star);
  const double trS = std::max(0.0, Sigma_T.trace().real());
  // X = C rho^{2m} / (1 - rho^2); the estimate carries rho^{2m} / (1 - rho^2).
  const double X = C * lc.bound;
  return 2.0 * std::abs(gamma) * std::sqrt(trS) * std::sqrt(X) + X;
}

}  // namespace stochdil
