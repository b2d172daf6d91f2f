#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stochdil/numerics.hpp"
#include "stochdil/rng.hpp"
#include "stochdil/trajectory.hpp"

#include <cmath>
#include <vector>

using namespace stochdil;

namespace {

CVector random_cvector(int n, uint64_t seed) {
  CounterRng rng(seed);
  CVector v(n);
  for (int i = 0; i < n; ++i) v(i) = Complex(rng.gaussian(), rng.gaussian());
  return v;
}

CMatrix random_cmatrix(int n, uint64_t seed) {
  CounterRng rng(seed);
  CMatrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = Complex(rng.gaussian(), rng.gaussian());
  return m;
}

LinearSdeSystem scalar_system(double a, double b) {
  LinearSdeSystem sys;
  sys.name = "scalar";
  sys.dim = 1;
  sys.channels = 1;
  sys.A = [a](double) { return CMatrix(a * CMatrix::Ones(1, 1)); };
  sys.B.push_back([b](double) { return CMatrix(b * CMatrix::Ones(1, 1)); });
  sys.autonomous = true;
  sys.x0 = CVector::Ones(1);
  return sys;
}

// A = -iH - B^dag B / 2 gives K = 0: the SSE preserves the mean-square norm.
LinearSdeSystem norm_preserving_system() {
  LinearSdeSystem sys;
  sys.dim = 2;
  sys.channels = 1;
  CMatrix H(2, 2), B(2, 2);
  H << 1, 0, 0, -1;
  B << 0, 0.6, 0.6, 0;
  const CMatrix A = -kI * H - 0.5 * (B.adjoint() * B);
  sys.A = [A](double) { return A; };
  sys.B.push_back([B](double) { return B; });
  sys.autonomous = true;
  sys.x0 = CVector(2);
  sys.x0 << Complex(1, 0), Complex(0, 1);
  sys.x0.normalize();
  return sys;
}

double fit_slope(const std::vector<double>& logx, const std::vector<double>& logy) {
  const auto n = static_cast<double>(logx.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < logx.size(); ++i) {
    sx += logx[i];
    sy += logy[i];
    sxx += logx[i] * logx[i];
    sxy += logx[i] * logy[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

TEST_CASE("presample: laws, derived integrals, and determinism") {
  const int n = 100000;
  const double dt = 0.01;

  SUBCASE("rademacher") {
    const NoisePath path = presample(n, dt, 1, NoiseLaw::rademacher, 4);
    double mean = 0;
    for (int i = 0; i < n; ++i) {
      CHECK(path.xi1(i, 0) * path.xi1(i, 0) == 1.0);
      mean += path.xi1(i, 0);
    }
    mean /= n;
    CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
    CHECK(path.xi2.norm() == 0.0);
    for (int i = 0; i < n; ++i) {
      const double x3 = path.xi3(i, 0);
      CHECK((x3 == 0.0));  // xi1^2 = 1 always
    }
  }

  SUBCASE("three-point moments and support") {
    const NoisePath path = presample(n, dt, 1, NoiseLaw::three_point, 6);
    double m1 = 0, m2 = 0, m3 = 0, m4 = 0;
    const double r3 = std::sqrt(3.0);
    for (int i = 0; i < n; ++i) {
      const double x = path.xi1(i, 0);
      CHECK((x == 0.0 || x == r3 || x == -r3));
      const double x3 = path.xi3(i, 0);
      // xi3 = xi1^2 - 1 hits {-1, 2} up to the rounding in squaring sqrt(3)
      CHECK((x3 == -1.0 || std::abs(x3 - 2.0) < 1e-15));
      m1 += x;
      m2 += x * x;
      m3 += x * x * x;
      m4 += x * x * x * x;
    }
    const double rn = std::sqrt(static_cast<double>(n));
    // sigmas of the power sums: sd(x)=1, sd(x^2)=sqrt(2), sd(x^3)=3, sd(x^4)=sqrt(18)
    CHECK(std::abs(m1 / n) < 3.0 * 1.0 / rn);
    CHECK(std::abs(m2 / n - 1.0) < 3.0 * std::sqrt(2.0) / rn);
    CHECK(std::abs(m3 / n) < 3.0 * 3.0 / rn);
    CHECK(std::abs(m4 / n - 3.0) < 3.0 * std::sqrt(18.0) / rn);
  }

  SUBCASE("gaussian (dW, dZ) covariance") {
    const NoisePath path = presample(n, dt, 1, NoiseLaw::gaussian, 7);
    double cww = 0, cwz = 0, czz = 0;
    for (int i = 0; i < n; ++i) {
      cww += path.dW(i, 0) * path.dW(i, 0);
      cwz += path.dW(i, 0) * path.dZ(i, 0);
      czz += path.dZ(i, 0) * path.dZ(i, 0);
    }
    cww /= n;
    cwz /= n;
    czz /= n;
    const double rn = std::sqrt(static_cast<double>(n));
    // estimator sigmas: sqrt(2) dt, sqrt(7/3)/2 dt^2, sqrt(2)/3 dt^3
    CHECK(std::abs(cww - dt) < 3.0 * std::sqrt(2.0) * dt / rn);
    CHECK(std::abs(cwz - 0.5 * dt * dt) < 3.0 * 0.5 * std::sqrt(7.0 / 3.0) * dt * dt / rn);
    CHECK(std::abs(czz - dt * dt * dt / 3.0) <
          3.0 * std::sqrt(2.0) / 3.0 * dt * dt * dt / rn);
  }

  SUBCASE("derived columns follow their definitions") {
    const NoisePath path = presample(50, dt, 2, NoiseLaw::three_point, 8);
    const double rt = std::sqrt(dt);
    for (int i = 0; i < 50; ++i)
      for (int j = 0; j < 2; ++j) {
        const double x1 = path.xi1(i, j), x2 = path.xi2(i, j);
        CHECK(path.dW(i, j) == rt * x1);
        CHECK(path.dZ(i, j) == doctest::Approx(0.5 * dt * rt * (x1 + x2 / std::sqrt(3.0)))
                                   .epsilon(1e-15));
        CHECK(path.xi3(i, j) == doctest::Approx(x1 * x1 - 1.0).epsilon(1e-15));
        CHECK(path.I11(i, j) == doctest::Approx(0.5 * dt * (x1 * x1 - 1.0)).epsilon(1e-15));
        CHECK(path.I10(i, j) ==
              doctest::Approx(dt * path.dW(i, j) - path.dZ(i, j)).epsilon(1e-15));
      }
  }

  SUBCASE("replay and stream separation") {
    const NoisePath a = presample(64, dt, 3, NoiseLaw::gaussian, 9, 2);
    const NoisePath b = presample(64, dt, 3, NoiseLaw::gaussian, 9, 2);
    const NoisePath c = presample(64, dt, 3, NoiseLaw::gaussian, 9, 3);
    CHECK((a.xi1 - b.xi1).norm() == 0.0);
    CHECK((a.xi2 - b.xi2).norm() == 0.0);
    CHECK((a.xi1 - c.xi1).norm() > 0.0);
  }

  CHECK_THROWS_AS(presample(0, dt, 1, NoiseLaw::gaussian, 1), ContractViolation);
  CHECK_THROWS_AS(noise_law_from_string("cauchy"), ContractViolation);
  CHECK(noise_law_from_string("three_point") == NoiseLaw::three_point);
  CHECK(to_string(NoiseLaw::gaussian) == "gaussian");
  CHECK(scheme_from_string("weak2") == Scheme::weak2);
  CHECK(to_string(Scheme::weak2_measurement) == "weak2_measurement");
  CHECK_THROWS_AS(scheme_from_string("euler"), ContractViolation);
}

TEST_CASE("weak1_step: identity, scalar expansion, channel order") {
  const double dt = 1e-2;

  // Free case: no Hamiltonian, zero channel.
  const CVector psi = random_cvector(3, 41);
  std::vector<CMatrix> zero{CMatrix::Zero(3, 3)};
  RVector xi0(1);
  xi0 << std::sqrt(dt);
  CHECK((weak1_step(psi, CMatrix::Zero(3, 3), zero, dt, xi0) - psi).norm() == 0.0);

  // Scalar channel: 1 - dt b^2/2 + xi b.
  const double b = 0.7;
  CVector one = CVector::Ones(1);
  std::vector<CMatrix> chan{CMatrix(b * CMatrix::Ones(1, 1))};
  RVector xi(1);
  xi << -std::sqrt(dt);
  const CVector out = weak1_step(one, CMatrix::Zero(1, 1), chan, dt, xi);
  CHECK(std::abs(out(0) - (1.0 - 0.5 * dt * b * b - std::sqrt(dt) * b)) < 1e-15);

  // Two non-commuting channels; channel 1 acts before channel 2.
  CMatrix V1(2, 2), V2(2, 2);
  V1 << 0, 1, 0, 0;
  V2 << 0.5, 0, 0, -0.5;
  const CVector p2 = random_cvector(2, 43);
  RVector xis(2);
  xis << 0.1, -0.2;
  const auto channel = [dt](const CMatrix& V, double x, const CVector& v) {
    return CVector(v - 0.5 * dt * (V.adjoint() * (V * v)) + x * (V * v));
  };
  const CVector manual = channel(V2, xis(1), channel(V1, xis(0), p2));
  const CVector got = weak1_step(p2, CMatrix::Zero(2, 2), {V1, V2}, dt, xis);
  CHECK((got - manual).norm() < 1e-14);

  CHECK_THROWS_AS(weak1_step(p2, CMatrix::Zero(2, 2), {V1, V2}, dt, xi0), ContractViolation);
}

TEST_CASE("weak1_step keeps dilated product states on the manifold") {
  const LinearSdeSystem sys = make_example3d();
  const SbpChain chain = build_chain(64, 1.0);
  const DilatedOperators ops = dilate(sys, chain, true);
  const double dt = 1e-3;

  const CMatrix P = expm_dense(CMatrix(-kI * dt * ops.Htilde(0.0)));
  std::vector<CMatrix> V;
  for (const auto& v : ops.V) V.push_back(v(0.0));

  CVector x = sys.x0;
  CVector psi = kron(CMatrix(chain.r.cast<Complex>()), CMatrix(sys.x0));
  const NoisePath noise = presample(20, dt, 3, NoiseLaw::rademacher, 11);
  const Readout ro = make_readout(chain, 0.1);
  for (int n = 0; n < 20; ++n) {
    psi = weak1_step_with(psi, P, V, dt, RVector(noise.dW.row(n)));
    CHECK(off_mode_weight(psi, chain) <= 1e-12);
    // classical iterate: drift semigroup then the three channel maps
    CMatrix Lfull = sys.A(0.0);
    for (const auto& bp : sys.B) {
      const CMatrix Bm = bp(0.0);
      Lfull += 0.5 * Bm.adjoint() * Bm;
    }
    x = expm_dense(CMatrix(dt * Lfull)) * x;
    for (int j = 0; j < 3; ++j) {
      const CMatrix Bm = sys.B[j](0.0);
      const CVector w = Bm * x;
      x += -0.5 * dt * (Bm.adjoint() * w) + noise.dW(n, j) * w;
    }
    const CVector projected = project_readout(psi, chain, ro, ReadoutMode::lh);
    CHECK((projected - x).norm() <= 1e-10 * x.norm());
  }
}

TEST_CASE("interaction_step: identity at V=0 and 3/2-order agreement with weak-1") {
  const CVector psi = random_cvector(3, 47).normalized();
  CHECK((interaction_step(psi, CMatrix::Zero(3, 3), 0.01, 1) - psi).norm() < 1e-13);
  CHECK((interaction_step(psi, CMatrix::Zero(3, 3), 0.01, -1) - psi).norm() < 1e-13);
  CHECK_THROWS_AS(interaction_step(psi, CMatrix::Zero(3, 3), 0.01, 0), ContractViolation);

  const CMatrix V = random_cmatrix(3, 53);
  for (int s : {1, -1}) {
    std::vector<double> lx, ly;
    for (int k = 4; k <= 10; ++k) {
      const double dt = std::pow(2.0, -k);
      RVector xi(1);
      xi << s * std::sqrt(dt);
      const CVector a = interaction_step(psi, V, dt, s);
      const CVector b = weak1_step(psi, CMatrix::Zero(3, 3), {V}, dt, xi);
      lx.push_back(std::log2(dt));
      ly.push_back(std::log2((a - b).norm()));
    }
    CHECK(fit_slope(lx, ly) >= 1.4);
  }
}

TEST_CASE("weak2 midpoint: coefficients, finite differences, noise-block form") {
  const double dt = 1e-2;
  const CMatrix A0 = random_cmatrix(3, 59);
  const CMatrix B0 = random_cmatrix(3, 61);

  // Autonomous: Vdot = 0 and the B/C combinations follow their definitions.
  const Weak2Midpoint mid = make_weak2_midpoint(
      [&](double) { return A0; }, [&](double) { return B0; }, MatrixProvider(), 0.3, dt,
      true, false);
  CHECK(mid.Vdot_mid.norm() == 0.0);
  CHECK((mid.B_mid - 0.5 * (A0 * B0 + B0 * A0)).norm() < 1e-14 * mid.B_mid.norm());
  CHECK((mid.C_mid - (A0 * B0 - B0 * A0) / (2 * std::sqrt(3.0))).norm() <
        1e-14 * std::max(1.0, mid.C_mid.norm()));
  const CMatrix g1_expect =
      std::sqrt(dt) * B0 + dt * std::sqrt(dt) * (mid.B_mid + (B0 * B0.adjoint() * B0) / 6.0);
  CHECK((mid.G1 - g1_expect).norm() < 1e-14 * g1_expect.norm());
  CHECK((mid.G2 - (dt / std::sqrt(2.0)) * B0 * B0).norm() < 1e-14 * mid.G2.norm());
  CHECK((mid.G3 - dt * std::sqrt(dt) * mid.C_mid).norm() <
        1e-14 * std::max(1.0, mid.G3.norm()));

  // Time-dependent V without an analytic derivative: central difference.
  const Weak2Midpoint fd = make_weak2_midpoint(
      [&](double) { return A0; }, [&](double t) { return CMatrix(std::cos(t) * B0); },
      MatrixProvider(), 0.3, dt, false, false);
  const double tm = 0.3 + 0.5 * dt;
  CHECK((fd.Vdot_mid + std::sin(tm) * B0).norm() < 1e-7 * B0.norm());

  // Noise-block mode pins the drift to -V^dag V / 2 exactly.
  const Weak2Midpoint nb = make_weak2_midpoint(
      [&](double) { return A0; }, [&](double) { return B0; }, MatrixProvider(), 0.0, dt,
      true, true);
  CHECK((nb.A_mid + 0.5 * B0.adjoint() * B0).norm() == 0.0);
  CHECK(nb.noise_block);
}

TEST_CASE("weak2_matrix_step: deterministic part and 9-point mean") {
  const double dt = 0.05;
  const CMatrix A0 = random_cmatrix(3, 67);
  const CMatrix V0 = random_cmatrix(3, 71);
  const CVector psi = random_cvector(3, 73);
  const Weak2Midpoint mid = make_weak2_midpoint(
      [&](double) { return A0; }, [&](double) { return V0; }, MatrixProvider(), 0.0, dt,
      true, false);

  // xi1 = xi2 = 0 means xi3 = -1: the -dt/2 V^2 term must appear.
  const CMatrix F0 = CMatrix::Identity(3, 3) + dt * A0 + 0.5 * dt * dt * A0 * A0 -
                     0.5 * dt * V0 * V0;
  CHECK((weak2_matrix_step(psi, mid, dt, 0.0, 0.0) - F0 * psi).norm() <
        1e-13 * (F0 * psi).norm());

  // Scalar autonomous system: the 9-point mean is 1 + a dt + a^2 dt^2 / 2.
  const double a = -0.4, b = 0.8;
  const Weak2Midpoint ms = make_weak2_midpoint(
      [&](double) { return CMatrix(a * CMatrix::Ones(1, 1)); },
      [&](double) { return CMatrix(b * CMatrix::Ones(1, 1)); }, MatrixProvider(), 0.0, dt,
      true, false);
  const double vals[3] = {0.0, std::sqrt(3.0), -std::sqrt(3.0)};
  const double probs[3] = {2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0};
  Complex mean = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const CVector o = weak2_matrix_step(CVector::Ones(1), ms, dt, vals[i], vals[j]);
      mean += probs[i] * probs[j] * o(0);
    }
  CHECK(std::abs(mean - (1.0 + a * dt + 0.5 * a * a * dt * dt)) < 1e-14);
}

TEST_CASE("weak2_measurement_step matches the cos/sinc column formula") {
  const double dt = 0.05;
  const CMatrix V = random_cmatrix(3, 79);
  const CVector psi = random_cvector(3, 83).normalized();
  const Weak2Midpoint mid = make_weak2_midpoint(
      MatrixProvider(), [&](double) { return V; }, MatrixProvider(), 0.0, dt, true, true);

  CHECK_THROWS_AS(weak2_measurement_step(psi, make_weak2_midpoint(
                                                  [&](double) { return CMatrix(V * V); },
                                                  [&](double) { return V; }, MatrixProvider(),
                                                  0.0, dt, true, false),
                                         dt, 1.0, 0.0),
                  ContractViolation);

  // Independent route: U (|00> (x) psi) = [cos(R) psi; G_a sinc(R) psi] with
  // R = (G1'G1 + G2'G2 + G3'G3)^{1/2}, evaluated spectrally.
  const CMatrix R2 = mid.G1.adjoint() * mid.G1 + mid.G2.adjoint() * mid.G2 +
                     mid.G3.adjoint() * mid.G3;
  Eigen::SelfAdjointEigenSolver<CMatrix> es(R2);
  REQUIRE(es.info() == Eigen::Success);
  CVector cosv(3), sincv(3);
  for (int i = 0; i < 3; ++i) {
    const double r = std::sqrt(std::max(0.0, es.eigenvalues()(i)));
    cosv(i) = std::cos(r);
    sincv(i) = r > 1e-30 ? std::sin(r) / r : 1.0;
  }
  const CMatrix cosR = es.eigenvectors() * cosv.asDiagonal() * es.eigenvectors().adjoint();
  const CMatrix sincR = es.eigenvectors() * sincv.asDiagonal() * es.eigenvectors().adjoint();

  const double r3 = std::sqrt(3.0);
  for (double xi1 : {0.0, r3, -r3})
    for (double xi2 : {0.0, r3, -r3}) {
      const double xi3 = xi1 * xi1 - 1.0;
      const CVector oracle = cosR * psi + xi1 * (mid.G1 * (sincR * psi)) +
                             (xi3 / std::sqrt(2.0)) * (mid.G2 * (sincR * psi)) +
                             xi2 * (mid.G3 * (sincR * psi));
      const CVector got = weak2_measurement_step(psi, mid, dt, xi1, xi2);
      CHECK((got - oracle).norm() < 1e-12);
    }

  // V = 0 collapses the circuit to the identity.
  const Weak2Midpoint empty = make_weak2_midpoint(
      MatrixProvider(), [&](double) { return CMatrix(CMatrix::Zero(3, 3)); },
      MatrixProvider(), 0.0, dt, true, true);
  CHECK((weak2_measurement_step(psi, empty, dt, r3, -r3) - psi).norm() < 1e-14);
}

TEST_CASE("off_mode_weight measures the ancilla leakage exactly") {
  const SbpChain chain = build_chain(16, 1.0);
  const CVector x = random_cvector(2, 89);
  const CVector on = kron(CMatrix(chain.r.cast<Complex>()), CMatrix(x));
  CHECK(off_mode_weight(on, chain) < 1e-15);

  // e_M (x) x has overlap r_M with the mode.
  CVector off = CVector::Zero(17 * 2);
  off.segment(16 * 2, 2) = x;
  const double rM = chain.r(16);
  CHECK(off_mode_weight(off, chain) == doctest::Approx(1.0 - rM * rM).epsilon(1e-12));

  CHECK_THROWS_AS(off_mode_weight(random_cvector(33, 1), chain), ContractViolation);
}

TEST_CASE("run_segmented: quiet system gives unit growth everywhere") {
  LinearSdeSystem sys;
  sys.dim = 2;
  sys.channels = 1;
  sys.A = [](double) { return CMatrix(CMatrix::Zero(2, 2)); };
  sys.B.push_back([](double) { return CMatrix(CMatrix::Zero(2, 2)); });
  sys.autonomous = true;
  sys.x0 = CVector(2);
  sys.x0 << 0.6, Complex(0, 0.8);

  const SbpChain chain = build_chain(16, 1.0);
  SegmentOptions opt;
  opt.T = 0.4;
  opt.dt = 0.01;
  opt.tau = 0.1;
  opt.p_star = 0.1;
  const NoisePath noise = presample(40, opt.dt, 1, NoiseLaw::rademacher, 13);
  const SegmentedRun run = run_segmented(sys, chain, Scheme::weak1, noise, opt);

  REQUIRE(run.state.g.size() == 4);
  for (double g : run.state.g) CHECK(g == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(run.state.lambda == doctest::Approx(1.0).epsilon(1e-13));
  const Readout ro = make_readout(chain, 0.1);
  REQUIRE(run.q.size() == 4);
  for (double q : run.q) CHECK(q == doctest::Approx(ro.P_win).epsilon(1e-12));
  CHECK((run.readout - sys.x0).norm() < 1e-12);
  CHECK(run.Gamma1 == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(run.Gamma2 == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(run.oaa_cost == doctest::Approx(4.0 / std::sqrt(ro.P_win)).epsilon(1e-12));
}

TEST_CASE("run_segmented reproduces the classical weak-1 iterate pathwise") {
  const LinearSdeSystem sys = make_example3d();
  const SbpChain chain = build_chain(64, 1.0);
  const double T = 0.2, dt = 1e-3;
  const NoisePath noise = presample(200, dt, 3, NoiseLaw::rademacher, 17);
  const CMatrix ref = classical_path(sys, Scheme::weak1, noise, T, dt);

  SegmentOptions opt;
  opt.T = T;
  opt.dt = dt;
  opt.refresh = false;
  opt.record_path = true;
  const SegmentedRun run = run_segmented(sys, chain, Scheme::weak1, noise, opt);
  double worst = 0;
  for (int n = 0; n <= 200; ++n)
    worst = std::max(worst, (run.path.col(n) - ref.col(n)).norm() / ref.col(n).norm());
  CHECK(worst <= 1e-9);
  CHECK((run.readout - ref.col(200)).norm() <= 1e-9 * ref.col(200).norm());

  // Default segment length: 1/K_max rounded down to a dt multiple.
  CHECK(run.tau == doctest::Approx(0.132).epsilon(1e-12));

  // With refresh on, a deep window keeps the reconstruction intact.
  SegmentOptions deep = opt;
  deep.refresh = true;
  deep.record_path = false;
  deep.p_star = 5e-6;
  const SegmentedRun ref_run = run_segmented(sys, chain, Scheme::weak1, noise, deep);
  CHECK(!ref_run.q.empty());
  const Readout ro = make_readout(chain, 5e-6);
  for (double q : ref_run.q) CHECK(q == doctest::Approx(ro.P_win).epsilon(1e-3));
  CHECK((ref_run.readout - ref.col(200)).norm() <= 1e-8 * ref.col(200).norm());

  // Folding the window weights multiplies lambda by prod q_m.
  SegmentOptions folded = deep;
  folded.fold_qm = true;
  const SegmentedRun fold_run = run_segmented(sys, chain, Scheme::weak1, noise, folded);
  double qprod = 1;
  for (double q : ref_run.q) qprod *= q;
  CHECK(fold_run.state.lambda ==
        doctest::Approx(ref_run.state.lambda * qprod).epsilon(1e-12));

  // lambda is the product of the recorded growth factors.
  double gprod = 1;
  for (double g : run.state.g) gprod *= g;
  CHECK(run.state.lambda == doctest::Approx(gprod).epsilon(1e-10));
}

TEST_CASE("run_segmented guards: tau grid, law, channels, window failure") {
  const LinearSdeSystem sys = make_example3d();
  const SbpChain chain = build_chain(32, 1.0);
  const NoisePath noise = presample(100, 1e-3, 3, NoiseLaw::rademacher, 19);

  SegmentOptions opt;
  opt.T = 0.1;
  opt.dt = 1e-3;
  opt.tau = 0.0123457;  // not a step multiple
  CHECK_THROWS_AS(run_segmented(sys, chain, Scheme::weak1, noise, opt), ContractViolation);

  opt.tau = 0.05;
  CHECK_THROWS_AS(run_segmented(sys, chain, Scheme::weak2, noise, opt), ContractViolation);

  // Window beyond the light cone: the refresh finds almost nothing inside.
  LinearSdeSystem quiet;
  quiet.dim = 1;
  quiet.channels = 1;
  quiet.A = [](double) { return CMatrix(CMatrix::Zero(1, 1)); };
  quiet.B.push_back([](double) { return CMatrix(CMatrix::Zero(1, 1)); });
  quiet.autonomous = true;
  quiet.x0 = CVector::Ones(1);
  const SbpChain deep_chain = build_chain(64, 1.0);
  SegmentOptions deep;
  deep.T = 0.01;
  deep.dt = 1e-3;
  deep.tau = 0.01;
  deep.p_star = 1e-7;  // j* = 48: the window mass of r_h is ~3e-7
  const NoisePath n1 = presample(10, 1e-3, 1, NoiseLaw::rademacher, 23);
  CHECK_THROWS_AS(run_segmented(quiet, deep_chain, Scheme::weak1, n1, deep), RefreshFailure);
}

TEST_CASE("run_segmented weak-2 schemes track the classical weak-2 iterate") {
  const LinearSdeSystem sys = make_random_b_weak2();
  const SbpChain chain = build_chain(64, 1.0);
  const double T = 0.01, dt = 1e-3;
  const NoisePath noise = presample(10, dt, 1, NoiseLaw::three_point, 29);
  const CMatrix ref = classical_path(sys, Scheme::weak2, noise, T, dt);

  SegmentOptions opt;
  opt.T = T;
  opt.dt = dt;
  opt.refresh = false;
  const SegmentedRun mat = run_segmented(sys, chain, Scheme::weak2, noise, opt);
  CHECK((mat.readout - ref.col(10)).norm() <= 1e-10 * ref.col(10).norm());

  // The measurement realization differs per step by O(dt^{5/2}).
  const SegmentedRun meas =
      run_segmented(sys, chain, Scheme::weak2_measurement, noise, opt);
  CHECK((meas.readout - ref.col(10)).norm() <= 1e-4 * ref.col(10).norm());
  CHECK((meas.readout - ref.col(10)).norm() > 0.0);
}

TEST_CASE("classical_path matches hand-rolled recursions") {
  const double dt = 0.01, T = 0.05;

  // Scalar weak-1 splitting.
  const LinearSdeSystem gbm = scalar_system(0.3, 0.5);
  const NoisePath noise = presample(5, dt, 1, NoiseLaw::rademacher, 31);
  const CMatrix path = classical_path(gbm, Scheme::weak1, noise, T, dt);
  Complex x = 1.0;
  const double growth = std::exp(dt * (0.3 + 0.5 * 0.5 * 0.5));
  for (int n = 0; n < 5; ++n) {
    x *= growth;
    x *= 1.0 - 0.5 * dt * 0.25 + noise.dW(n, 0) * 0.5;
    CHECK(std::abs(path(0, n + 1) - x) < 1e-14 * std::abs(x));
  }

  // Scalar weak-2 against the explicit F2 formula.
  const NoisePath n3 = presample(5, dt, 1, NoiseLaw::three_point, 37);
  const CMatrix p2 = classical_path(gbm, Scheme::weak2, n3, T, dt);
  Complex y = 1.0;
  for (int n = 0; n < 5; ++n) {
    const double xi1 = n3.xi1(n, 0), xi2 = n3.xi2(n, 0), xi3 = xi1 * xi1 - 1.0;
    const double a = 0.3, b = 0.5;
    const double Bm = a * b, Cm = 0.0;
    y *= 1.0 + a * dt + 0.5 * a * a * dt * dt +
         std::sqrt(dt) * xi1 * (b + dt * Bm) + dt * std::sqrt(dt) * xi2 * Cm +
         0.5 * dt * xi3 * b * b;
    CHECK(std::abs(p2(0, n + 1) - y) < 1e-13 * std::abs(y));
  }

  CHECK_THROWS_AS(classical_path(gbm, Scheme::weak2_measurement, noise, T, dt),
                  ContractViolation);
}

TEST_CASE("ensemble_run: constants, moments, and dilated/direct agreement") {
  const LinearSdeSystem gbm = scalar_system(0.1, 0.3);

  const EnsembleEstimate c = ensemble_run(
      gbm, nullptr, Scheme::weak1, 0.25, 0.05, 32, [](const CVector&) { return 1.0; },
      NoiseLaw::rademacher, 101);
  CHECK(c.mean == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(c.std_error == 0.0);
  CHECK(c.n_samples == 32);

  // Second moment of geometric Brownian motion: e^{(2a+b^2)T}.
  const double T = 0.5;
  const EnsembleEstimate m2 = ensemble_run(
      gbm, nullptr, Scheme::weak1, T, T / 256, 4000, functional_squared_norm(),
      NoiseLaw::rademacher, 103);
  const double target = std::exp((2 * 0.1 + 0.09) * T);
  CHECK(std::abs(m2.mean - target) < 3 * m2.std_error + 1e-3);

  // Same seed, same scheme: the dilated readout agrees with the classical
  // iterate sample by sample, so the estimates coincide.
  const LinearSdeSystem sys = make_random_b_weak2();
  const SbpChain chain = build_chain(64, 1.0);
  SegmentOptions opt;
  opt.refresh = false;
  const EnsembleEstimate direct = ensemble_run(
      sys, nullptr, Scheme::weak1, 0.1, 0.01, 40, functional_squared_norm(),
      NoiseLaw::rademacher, 107);
  const EnsembleEstimate dilated = ensemble_run(
      sys, &chain, Scheme::weak1, 0.1, 0.01, 40, functional_squared_norm(),
      NoiseLaw::rademacher, 107, opt);
  CHECK(dilated.mean == doctest::Approx(direct.mean).epsilon(1e-8));
  CHECK(dilated.std_error == doctest::Approx(direct.std_error).epsilon(1e-6));
}

TEST_CASE("ensemble_run preserves the mean-square norm when K = 0") {
  const LinearSdeSystem sys = norm_preserving_system();
  const EnsembleEstimate est = ensemble_run(
      sys, nullptr, Scheme::weak1, 1.0, 0.01, 10000, functional_squared_norm(),
      NoiseLaw::rademacher, 109);
  CHECK(std::abs(est.mean - 1.0) < 3 * est.std_error + 5e-4);
  CHECK(est.std_error > 0.0);
}

TEST_CASE("builtin functionals evaluate their formulas") {
  CVector x(3);
  x << Complex(1.0, 0.5), Complex(-2.0, 1.0), Complex(0.25, 0.0);
  CHECK(functional_component(1)(x) == -2.0);
  CHECK_THROWS_AS(functional_component(5)(x), ContractViolation);
  CHECK(functional_squared_norm()(x) == doctest::Approx(x.squaredNorm()).epsilon(1e-15));

  RVector lin(3), quad(3);
  lin << 1, 1, 0;
  quad << 0, 0, 1;
  const double arg = 1.0 + (-2.0) + 0.25 * 0.25;
  CHECK(functional_cos_affine_quadratic(lin, quad)(x) ==
        doctest::Approx(std::cos(arg)).epsilon(1e-15));
  CHECK_THROWS_AS(functional_cos_affine_quadratic(RVector::Ones(2), RVector::Ones(2))(x),
                  ContractViolation);
}
