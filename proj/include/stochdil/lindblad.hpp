#pragma once

#include "stochdil/dilation.hpp"
#include "stochdil/sde_model.hpp"

#include <vector>

namespace stochdil {

// Density-operator generator of the dilated evolution,
//   rhs = -i (Htilde rho - rho Htilde^dag) + sum_j V_j rho V_j^dag
//         - {V_j^dag V_j, rho} / 2.
// For a Hermitian Htilde (open chain) this is the textbook Lindblad form and
// is exactly trace preserving. With the closure on, Htilde gains a Hermitian
// part and the adjoint form above is the correct ensemble mean of the
// trajectory step; the trace then grows at rate
//   tr(rhs) = 2 theta alpha tr(K rho_MM),
// which is the growth the lambda ledger accounts for.
CMatrix lindblad_rhs(const CMatrix& rho, double t, const DilatedOperators& ops);

// Fixed-step RK4 evolution of rho over [t_m, t_m + tau]. If the result's
// smallest eigenvalue drops below -1e-6 the step count is doubled and the
// segment rerun once; a second violation fails. The output is re-Hermitized
// (the generator preserves Hermiticity; this removes rounding drift).
CMatrix evolve_segment(const CMatrix& rho, double t_m, double tau,
                       const DilatedOperators& ops, int steps);

// Autonomous fast path: the same generator evaluated block-wise through the
// Kronecker structure Htilde = I (x) H + i theta F (x) K, V_j = I (x) B_j,
// so the cost per call is a handful of tall dense products instead of
// full-dimension matrix algebra.
struct StructuredLindblad {
  int N = 0;            // system dimension
  int block = 0;        // ancilla dimension M + 1
  double theta = 0;
  double alpha = 0;     // closure strength (0 when the closure is off)
  RMatrix Fhat;         // chain generator, including the closure corner
  CMatrix H, K;         // Hermitian split of the system generator
  CMatrix G;            // sum_j B_j^dag B_j
  std::vector<CMatrix> B;

  CMatrix rhs(const CMatrix& rho) const;
};

StructuredLindblad make_structured(const LinearSdeSystem& sys, const SbpChain& chain,
                                   bool use_closure);

// (<l_h| (x) I) rho (|l_h> (x) I): the recovered system second moment.
CMatrix recover_sigma(const CMatrix& rho, const Readout& ro);

// tr(rho (Pi_lh (x) O)) for Hermitian O, cross-checked against
// tr(recover_sigma(rho) O) to 1e-10.
double observable(const CMatrix& rho, const Readout& ro, const CMatrix& O);

struct SegmentRecord {
  int m = 0;
  double g = 0;             // tr(rho' (Pi_lh (x) I))
  double q_win = 0;         // window weight tr(Pi_win rho')
  double q_tilde = 0;       // normalized-functional weight, g = beta^2 q_tilde
  double lambda = 0;        // ledger after this segment
  double trace_defect = 0;  // |tr rho' - 1| open chain, |tr rho' - g|/g closed
  double min_eig = 0;
};

struct MomentLedger {
  double lambda_L = 1;          // product of the g_m times the input scale
  double Lambda_T = 0;          // tr Sigma_T = lambda_L
  double Gamma = 0;             // sum g_m^{-1/2}
  std::vector<double> g;
  std::vector<double> q_win;
  std::vector<double> q_tilde;
};

struct PipelineOptions {
  bool use_closure = true;
  double p_star = 5e-6;
  int steps = 0;        // RK4 steps per segment; 0 = max(100, ceil(200 tau coeff))
  CMatrix Sigma0;       // empty = x0 x0^dag; rescaled to unit trace on input
};

struct PipelineResult {
  double mu_hat = 0;            // lambda_L tr(sigma_L O)
  double tau = 0;
  int steps_per_segment = 0;
  double sigma0_scale = 1;      // tr Sigma0 folded into the ledger
  CMatrix sigma_L;              // normalized final covariance
  MomentLedger ledger;
  std::vector<SegmentRecord> segments;
};

// Segment-wise second-moment pipeline: seed rho_m = |r_h><r_h| (x) sigma_m,
// evolve for tau, harvest g_m, renormalize, reseed (the idealized refresh),
// and accumulate the ledger. tau <= 0 selects 1/K_max rounded down to a
// positive value; the last segment is shortened to land on T.
PipelineResult segment_pipeline(const LinearSdeSystem& sys, const SbpChain& chain,
                                double T, double tau, const CMatrix& O,
                                const PipelineOptions& opt = {});

// Trace-norm bound on the covariance block error at the readout site,
//   2 |gamma| sqrt(tr Sigma_T) sqrt(X) + X,  X = C rho^{2m} / (1 - rho^2),
// with gamma the r_h amplitude at j_star and C supplied by the caller.
double covariance_lightcone_bound(const SbpChain& chain, const Readout& ro,
                                  const CMatrix& Sigma_T, const LightConeEstimate& lc,
                                  double C);

}  // namespace stochdil
