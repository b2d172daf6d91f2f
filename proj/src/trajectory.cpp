#include "stochdil/trajectory.hpp"

#include "stochdil/noise.hpp"
#include "stochdil/numerics.hpp"

#include <cmath>

namespace stochdil {

NoiseLaw noise_law_from_string(const std::string& name) {
  if (name == "rademacher") return NoiseLaw::rademacher;
  if (name == "three_point") return NoiseLaw::three_point;
  if (name == "gaussian") return NoiseLaw::gaussian;
  throw ContractViolation("unknown noise law: " + name);
}

std::string to_string(NoiseLaw law) {
  switch (law) {
    case NoiseLaw::rademacher: return "rademacher";
    case NoiseLaw::three_point: return "three_point";
    case NoiseLaw::gaussian: return "gaussian";
  }
  return "?";
}

NoisePath presample(int steps, double dt, int channels, NoiseLaw law, uint64_t seed,
                    uint64_t stream) {
  if (steps < 1) throw ContractViolation("presample: need at least one step");
  if (channels < 1) throw ContractViolation("presample: need at least one channel");
  if (!(dt > 0)) throw ContractViolation("presample: dt must be positive");

  NoisePath path;
  path.steps = steps;
  path.channels = channels;
  path.dt = dt;
  path.law = law;
  path.seed = seed;
  path.stream = stream;
  path.xi1.resize(steps, channels);
  path.xi2.setZero(steps, channels);

  CounterRng rng(seed, stream);
  const bool wants_xi2 = law != NoiseLaw::rademacher;
  for (int n = 0; n < steps; ++n)
    for (int j = 0; j < channels; ++j) {
      switch (law) {
        case NoiseLaw::rademacher: path.xi1(n, j) = rng.rademacher(); break;
        case NoiseLaw::three_point: path.xi1(n, j) = rng.three_point(); break;
        case NoiseLaw::gaussian: path.xi1(n, j) = rng.gaussian(); break;
      }
      if (wants_xi2)
        path.xi2(n, j) = law == NoiseLaw::three_point ? rng.three_point() : rng.gaussian();
    }

  // Derived increments and iterated integrals shared by the integrators.
  const double rt = std::sqrt(dt);
  path.dW = rt * path.xi1;
  path.dZ = 0.5 * dt * rt * (path.xi1 + path.xi2 / std::sqrt(3.0));
  path.xi3 = path.xi1.array().square().matrix() - RMatrix::Ones(steps, channels);
  path.I11 = 0.5 * dt * path.xi3;
  path.I10 = dt * path.dW - path.dZ;
  return path;
}

Scheme scheme_from_string(const std::string& name) {
  if (name == "weak1") return Scheme::weak1;
  if (name == "weak2") return Scheme::weak2;
  if (name == "weak2_measurement") return Scheme::weak2_measurement;
  throw ContractViolation("unknown scheme: " + name);
}

std::string to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::weak1: return "weak1";
    case Scheme::weak2: return "weak2";
    case Scheme::weak2_measurement: return "weak2_measurement";
  }
  return "?";
}

namespace {

// e^G through the spectral route when G is anti-Hermitian (open-chain
// generators), the Taylor route otherwise (the closure adds a Hermitian
// part).
CMatrix exp_generator(const CMatrix& G) {
  if ((G + G.adjoint()).norm() <= 1e-12 * std::max(1.0, G.norm())) return expm_skew(G);
  return expm_dense(G);
}

int checked_step_count(double T, double dt) {
  if (!(dt > 0) || !(T > 0)) throw ContractViolation("T and dt must be positive");
  const auto n = static_cast<long long>(std::llround(T / dt));
  if (n < 1 || std::abs(n * dt - T) > 1e-9 * std::max(1.0, T))
    throw ContractViolation("T must be an integer multiple of dt");
  return static_cast<int>(n);
}

void check_noise(const NoisePath& noise, double dt, int channels, int steps) {
  if (std::abs(noise.dt - dt) > 1e-12)
    throw ContractViolation("noise path was sampled at a different dt");
  if (noise.channels != channels) throw ContractViolation("noise path channel count mismatch");
  if (noise.steps < steps) throw ContractViolation("noise path shorter than the run");
}

}  // namespace

Weak2Midpoint make_weak2_midpoint(const MatrixProvider& A, const MatrixProvider& V,
                                  const MatrixProvider& vdot, double t_n, double dt,
                                  bool autonomous, bool noise_block) {
  if (!(dt > 0)) throw ContractViolation("make_weak2_midpoint: dt must be positive");
  Weak2Midpoint mid;
  mid.dt = dt;
  mid.noise_block = noise_block;
  const double tm = t_n + 0.5 * dt;
  mid.V_mid = V(tm);
  mid.A_mid = noise_block ? CMatrix(-0.5 * mid.V_mid.adjoint() * mid.V_mid) : A(tm);
  if (autonomous) {
    mid.Vdot_mid = CMatrix::Zero(mid.V_mid.rows(), mid.V_mid.cols());
  } else if (vdot) {
    mid.Vdot_mid = vdot(tm);
  } else {
    const double fd = std::min(1e-6, dt / 100.0);
    mid.Vdot_mid = (V(tm + fd) - V(tm - fd)) / (2.0 * fd);
  }
  mid.B_mid = 0.5 * (mid.A_mid * mid.V_mid + mid.Vdot_mid + mid.V_mid * mid.A_mid);
  mid.C_mid = (mid.A_mid * mid.V_mid - mid.Vdot_mid - mid.V_mid * mid.A_mid) /
              (2.0 * std::sqrt(3.0));
  const double rt = std::sqrt(dt);
  mid.G1 = rt * mid.V_mid +
           dt * rt * (mid.B_mid + (mid.V_mid * mid.V_mid.adjoint() * mid.V_mid) / 6.0);
  mid.G2 = (dt / std::sqrt(2.0)) * (mid.V_mid * mid.V_mid);
  mid.G3 = dt * rt * mid.C_mid;
  return mid;
}

Weak2Midpoint make_weak2_midpoint(const LinearSdeSystem& sys, double t_n, double dt,
                                  bool noise_block) {
  if (sys.channels != 1)
    throw ContractViolation("weak-2 midpoint requires a single noise channel");
  const double fd = std::min(1e-6, dt / 100.0);
  MatrixProvider vdot;
  if (!sys.autonomous)
    vdot = [&sys, fd](double t) { return bdot_eval(sys, 0, t, fd); };
  return make_weak2_midpoint(sys.A, sys.B[0], vdot, t_n, dt, sys.autonomous, noise_block);
}

CVector weak1_step_with(const CVector& psi, const CMatrix& propagator,
                        const std::vector<CMatrix>& V, double dt, const RVector& xi) {
  if (static_cast<int>(V.size()) != xi.size())
    throw ContractViolation("weak1_step: one increment per channel required");
  CVector cur = propagator * psi;
  for (size_t j = 0; j < V.size(); ++j) {
    const CVector w = V[j] * cur;
    cur += -0.5 * dt * (V[j].adjoint() * w) + xi(static_cast<int>(j)) * w;
  }
  return cur;
}

CVector weak1_step(const CVector& psi, const CMatrix& Htilde,
                   const std::vector<CMatrix>& V, double dt, const RVector& xi) {
  return weak1_step_with(psi, exp_generator(CMatrix(-kI * dt * Htilde)), V, dt, xi);
}

CVector interaction_step(const CVector& psi, const CMatrix& V, double dt, int s) {
  if (s != 1 && s != -1) throw ContractViolation("interaction_step: s must be +1 or -1");
  const int n = static_cast<int>(psi.size());
  if (V.rows() != n || V.cols() != n)
    throw ContractViolation("interaction_step: dimension mismatch");
  const double rt = std::sqrt(dt);
  CMatrix omega = CMatrix::Zero(2 * n, 2 * n);
  omega.topRightCorner(n, n) = -rt * V.adjoint();
  omega.bottomLeftCorner(n, n) = rt * V;
  CVector in = CVector::Zero(2 * n);
  in.head(n) = psi;
  const CVector out = expm_skew(omega) * in;
  // <0| W_s^dag picks (top + s bottom)/sqrt(2); the sqrt(2) is absorbed.
  return out.head(n) + static_cast<double>(s) * out.tail(n);
}

CVector weak2_matrix_step(const CVector& psi, const Weak2Midpoint& mid, double dt,
                          double xi1, double xi2) {
  const double xi3 = xi1 * xi1 - 1.0;
  const double rt = std::sqrt(dt);
  const CVector a1 = mid.A_mid * psi;
  const CVector v1 = mid.V_mid * psi;
  return psi + dt * a1 + 0.5 * dt * dt * (mid.A_mid * a1) +
         rt * xi1 * (v1 + dt * (mid.B_mid * psi)) + dt * rt * xi2 * (mid.C_mid * psi) +
         0.5 * dt * xi3 * (mid.V_mid * v1);
}

namespace {

// Interaction generator of the two-qubit realization, ancilla basis ordered
// {|00>, |10>, |01>, |11>} as the major factor.
CMatrix weak2_omega(const Weak2Midpoint& mid) {
  const int n = static_cast<int>(mid.G1.rows());
  CMatrix omega = CMatrix::Zero(4 * n, 4 * n);
  const CMatrix* blocks[3] = {&mid.G1, &mid.G2, &mid.G3};
  for (int a = 1; a <= 3; ++a) {
    omega.block(a * n, 0, n, n) = *blocks[a - 1];
    omega.block(0, a * n, n, n) = -blocks[a - 1]->adjoint();
  }
  return omega;
}

// <m(xi1,xi2)| applied to the ancilla blocks of a 4n vector; the positive
// normalization of |m> cancels against the same factor in <m|00>.
CVector measurement_combine(const CVector& out, int n, double xi1, double xi2) {
  const double xi3 = xi1 * xi1 - 1.0;
  return out.head(n) + xi1 * out.segment(n, n) +
         (xi3 / std::sqrt(2.0)) * out.segment(2 * n, n) + xi2 * out.tail(n);
}

}  // namespace

CVector weak2_measurement_step(const CVector& psi, const Weak2Midpoint& mid, double dt,
                               double xi1, double xi2) {
  if (!mid.noise_block)
    throw ContractViolation("weak2_measurement_step needs the noise-block midpoint");
  if (std::abs(mid.dt - dt) > 1e-12)
    throw ContractViolation("weak2_measurement_step: dt mismatch with the midpoint");
  const int n = static_cast<int>(psi.size());
  CVector in = CVector::Zero(4 * n);
  in.head(n) = psi;
  return measurement_combine(expm_skew(weak2_omega(mid)) * in, n, xi1, xi2);
}

double off_mode_weight(const CVector& psi, const SbpChain& chain) {
  const int block = chain.M + 1;
  if (psi.size() % block != 0)
    throw ContractViolation("off_mode_weight: state dimension not divisible by the chain");
  const int n = static_cast<int>(psi.size()) / block;
  Eigen::Map<const Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      Psi(psi.data(), block, n);
  const double total = psi.squaredNorm();
  if (total == 0.0) return 0.0;
  const double on_mode = (chain.r.cast<Complex>().transpose() * Psi).squaredNorm();
  return std::max(0.0, total - on_mode) / total;
}

namespace {

struct SegmentEngine {
  Scheme scheme;
  double dt;
  bool autonomous;
  const DilatedOperators* ops;
  std::vector<CMatrix> Vmats;   // weak1 channels at t=0 when autonomous
  CMatrix propagator;           // weak1: e^{-i Htilde dt}; weak2m: half step
  Weak2Midpoint mid;            // weak2 / weak2_measurement (autonomous)
  CMatrix U_meas;               // e^{Omega} for the measurement step

  CVector advance(const CVector& psi, int n, const NoisePath& noise) const {
    const double t = n * dt;
    switch (scheme) {
      case Scheme::weak1: {
        const RVector xi = noise.dW.row(n);
        if (autonomous) return weak1_step_with(psi, propagator, Vmats, dt, xi);
        std::vector<CMatrix> V(ops->V.size());
        for (size_t j = 0; j < V.size(); ++j) V[j] = ops->V[j](t);
        return weak1_step(psi, ops->Htilde(t), V, dt, xi);
      }
      case Scheme::weak2: {
        if (autonomous) return weak2_matrix_step(psi, mid, dt, noise.xi1(n, 0), noise.xi2(n, 0));
        const Weak2Midpoint m =
            make_weak2_midpoint(ops->V0, ops->V[0], MatrixProvider(), t, dt, false, false);
        return weak2_matrix_step(psi, m, dt, noise.xi1(n, 0), noise.xi2(n, 0));
      }
      case Scheme::weak2_measurement: {
        // Strang sandwich: half a drift step, the noise-block measurement
        // map, half a drift step; keeps the weak order at two.
        const int dim = static_cast<int>(psi.size());
        if (autonomous) {
          CVector cur = propagator * psi;
          CVector in = CVector::Zero(4 * dim);
          in.head(dim) = cur;
          cur = measurement_combine(U_meas * in, dim, noise.xi1(n, 0), noise.xi2(n, 0));
          return propagator * cur;
        }
        const CMatrix half =
            exp_generator(CMatrix(-kI * (0.5 * dt) * ops->Htilde(t + 0.5 * dt)));
        const Weak2Midpoint m =
            make_weak2_midpoint(ops->V0, ops->V[0], MatrixProvider(), t, dt, false, true);
        const CVector cur =
            weak2_measurement_step(CVector(half * psi), m, dt, noise.xi1(n, 0), noise.xi2(n, 0));
        return half * cur;
      }
    }
    throw ContractViolation("unreachable scheme");
  }
};

}  // namespace

SegmentedRun run_segmented(const LinearSdeSystem& sys, const SbpChain& chain,
                           Scheme scheme, const NoisePath& noise,
                           const SegmentOptions& opt) {
  const int n_steps = checked_step_count(opt.T, opt.dt);
  check_noise(noise, opt.dt, sys.channels, n_steps);
  if (scheme != Scheme::weak1) {
    if (sys.channels != 1)
      throw ContractViolation("weak-2 schemes support a single noise channel");
    if (noise.law == NoiseLaw::rademacher)
      throw ContractViolation("weak-2 schemes need a law with fourth-moment match");
  }

  // Segment length: default 1/K_max rounded down to a step multiple.
  double tau = opt.tau;
  if (tau <= 0) {
    const StructureReport rep = structure(sys, uniform_grid(0.0, opt.T, 256));
    tau = rep.K_max > 1e-12 ? 1.0 / rep.K_max : opt.T;
  }
  tau = std::min(tau, opt.T);
  int k = static_cast<int>(std::floor(tau / opt.dt + 1e-9));
  if (opt.tau > 0 && std::abs(k * opt.dt - opt.tau) > 1e-12 * std::max(1.0, opt.tau))
    throw ContractViolation("tau must be an integer multiple of dt");
  k = std::max(k, 1);
  tau = k * opt.dt;

  const DilatedOperators ops = dilate(sys, chain, opt.use_closure);
  const Readout ro = make_readout(chain, opt.p_star);
  const int N = sys.dim;
  const int block = chain.M + 1;

  SegmentEngine engine;
  engine.scheme = scheme;
  engine.dt = opt.dt;
  engine.autonomous = sys.autonomous;
  engine.ops = &ops;
  if (sys.autonomous) {
    switch (scheme) {
      case Scheme::weak1:
        engine.propagator = exp_generator(CMatrix(-kI * opt.dt * ops.Htilde(0.0)));
        for (const auto& v : ops.V) engine.Vmats.push_back(v(0.0));
        break;
      case Scheme::weak2:
        engine.mid =
            make_weak2_midpoint(ops.V0, ops.V[0], MatrixProvider(), 0.0, opt.dt, true, false);
        break;
      case Scheme::weak2_measurement:
        engine.propagator = exp_generator(CMatrix(-kI * (0.5 * opt.dt) * ops.Htilde(0.0)));
        engine.mid =
            make_weak2_midpoint(ops.V0, ops.V[0], MatrixProvider(), 0.0, opt.dt, true, true);
        engine.U_meas = expm_skew(weak2_omega(engine.mid));
        break;
    }
  }

  // Initial product state r_h (x) x0.
  CVector phi = kron(CMatrix(chain.r.cast<Complex>()), CMatrix(sys.x0));
  const double norm0 = phi.norm();
  if (!(norm0 > 0)) throw ContractViolation("run_segmented: zero initial state");
  phi /= norm0;

  // Householder reflection taking the normalized window part of r_h back to
  // r_h itself (the refresh isometry W_win on the ancilla alone).
  RVector r_win = chain.r;
  r_win.tail(chain.M - ro.j_star).setZero();
  r_win /= r_win.norm();
  RVector householder = r_win - chain.r;
  const bool reflect = householder.norm() > 1e-14;
  if (reflect) householder /= householder.norm();

  SegmentedRun run;
  run.tau = tau;
  run.state.lambda = 1.0;
  if (opt.record_path) {
    run.path.resize(N, n_steps + 1);
    run.path.col(0) = norm0 * project_readout(phi, chain, ro, opt.mode);
  }

  int n = 0;
  while (n < n_steps) {
    const int seg = std::min(k, n_steps - n);
    CVector cur = phi;
    for (int i = 0; i < seg; ++i) {
      cur = engine.advance(cur, n + i, noise);
      if (opt.record_path)
        run.path.col(n + i + 1) =
            norm0 * std::sqrt(run.state.lambda) * project_readout(cur, chain, ro, opt.mode);
    }
    n += seg;
    const double g = cur.squaredNorm();
    if (!(g > 0)) throw ContractViolation("run_segmented: segment growth factor vanished");
    run.state.g.push_back(g);
    run.state.lambda *= g;
    phi = cur / std::sqrt(g);

    if (opt.refresh) {
      double q = 0;
      for (int a = 0; a <= ro.j_star; ++a) q += phi.segment(a * N, N).squaredNorm();
      if (q < 1e-6)
        throw RefreshFailure("ancilla refresh: window weight " + std::to_string(q) +
                             " below 1e-6");
      for (int a = ro.j_star + 1; a < block; ++a) phi.segment(a * N, N).setZero();
      phi /= std::sqrt(q);
      run.q.push_back(q);
      if (opt.fold_qm) run.state.lambda *= q;
      if (reflect) {
        Eigen::Map<Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
            Psi(phi.data(), block, N);
        const Eigen::RowVectorXcd overlap = householder.cast<Complex>().transpose() * Psi;
        Psi.noalias() -= 2.0 * (householder.cast<Complex>() * overlap);
      }
    }
  }

  for (double g : run.state.g) {
    run.Gamma1 += 1.0 / std::sqrt(g);
    run.Gamma2 += 1.0 / g;
  }
  for (double q : run.q) run.oaa_cost += 1.0 / std::sqrt(q);
  run.state.phi = phi;
  run.readout =
      norm0 * std::sqrt(run.state.lambda) * project_readout(phi, chain, ro, opt.mode);
  return run;
}

CMatrix classical_path(const LinearSdeSystem& sys, Scheme scheme, const NoisePath& noise,
                       double T, double dt) {
  const int n_steps = checked_step_count(T, dt);
  check_noise(noise, dt, sys.channels, n_steps);
  if (scheme == Scheme::weak2_measurement)
    throw ContractViolation("classical_path supports the weak1 and weak2 schemes");
  if (scheme == Scheme::weak2 && sys.channels != 1)
    throw ContractViolation("weak-2 schemes support a single noise channel");

  // Drift semigroup generator of the splitting: L = A + sum B^dag B / 2.
  const auto full_L = [&sys](double t) {
    CMatrix L = sys.A(t);
    for (const auto& b : sys.B) {
      const CMatrix Bt = b(t);
      L += 0.5 * Bt.adjoint() * Bt;
    }
    return L;
  };

  CMatrix path(sys.dim, n_steps + 1);
  CVector x = sys.x0;
  path.col(0) = x;

  if (scheme == Scheme::weak1) {
    CMatrix P;
    std::vector<CMatrix> Bmats;
    if (sys.autonomous) {
      P = expm_dense(CMatrix(dt * full_L(0.0)));
      for (const auto& b : sys.B) Bmats.push_back(b(0.0));
    }
    for (int nstep = 0; nstep < n_steps; ++nstep) {
      const double t = nstep * dt;
      if (!sys.autonomous) {
        P = expm_dense(CMatrix(dt * full_L(t)));
        Bmats.clear();
        for (const auto& b : sys.B) Bmats.push_back(b(t));
      }
      x = P * x;
      for (int j = 0; j < sys.channels; ++j) {
        const CVector w = Bmats[j] * x;
        x += -0.5 * dt * (Bmats[j].adjoint() * w) + noise.dW(nstep, j) * w;
      }
      path.col(nstep + 1) = x;
    }
    return path;
  }

  Weak2Midpoint mid;
  if (sys.autonomous) mid = make_weak2_midpoint(sys, 0.0, dt);
  for (int nstep = 0; nstep < n_steps; ++nstep) {
    if (!sys.autonomous) mid = make_weak2_midpoint(sys, nstep * dt, dt);
    x = weak2_matrix_step(x, mid, dt, noise.xi1(nstep, 0), noise.xi2(nstep, 0));
    path.col(nstep + 1) = x;
  }
  return path;
}

EnsembleEstimate ensemble_run(const LinearSdeSystem& sys, const SbpChain* chain,
                              Scheme scheme, double T, double dt, int n_samples,
                              const std::function<double(const CVector&)>& f,
                              NoiseLaw law, uint64_t seed, SegmentOptions opt) {
  if (n_samples < 1) throw ContractViolation("ensemble_run: need at least one sample");
  const int n_steps = checked_step_count(T, dt);
  opt.T = T;
  opt.dt = dt;
  opt.record_path = false;

  double sum = 0, sumsq = 0;
  for (int i = 0; i < n_samples; ++i) {
    const NoisePath noise =
        presample(n_steps, dt, sys.channels, law, seed, static_cast<uint64_t>(i));
    CVector x;
    if (chain)
      x = run_segmented(sys, *chain, scheme, noise, opt).readout;
    else
      x = classical_path(sys, scheme, noise, T, dt).col(n_steps);
    const double v = f(x);
    sum += v;
    sumsq += v * v;
  }
  EnsembleEstimate est;
  est.n_samples = n_samples;
  est.mean = sum / n_samples;
  if (n_samples > 1) {
    const double var = std::max(0.0, sumsq - n_samples * est.mean * est.mean) /
                       (n_samples - 1);
    est.std_error = std::sqrt(var / n_samples);
  }
  return est;
}

std::function<double(const CVector&)> functional_component(int index) {
  return [index](const CVector& x) {
    if (index < 0 || index >= x.size())
      throw ContractViolation("functional_component: index out of range");
    return x(index).real();
  };
}

std::function<double(const CVector&)> functional_squared_norm() {
  return [](const CVector& x) { return x.squaredNorm(); };
}

std::function<double(const CVector&)> functional_cos_affine_quadratic(const RVector& lin,
                                                                       const RVector& quad) {
  return [lin, quad](const CVector& x) {
    if (lin.size() != x.size() || quad.size() != x.size())
      throw ContractViolation("functional_cos_affine_quadratic: size mismatch");
    double arg = 0;
    for (int i = 0; i < x.size(); ++i) {
      const double re = x(i).real();
      arg += lin(i) * re + quad(i) * re * re;
    }
    return std::cos(arg);
  };
}

}  // namespace stochdil
