#include "stochdil/sde_model.hpp"

#include "stochdil/numerics.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace stochdil {

namespace {

void check_square(const CMatrix& m, int dim, const char* what) {
  if (m.rows() != dim || m.cols() != dim) {
    std::ostringstream msg;
    msg << what << " provider returned " << m.rows() << "x" << m.cols() << ", expected " << dim
        << "x" << dim;
    throw ContractViolation(msg.str());
  }
}

CMatrix zero_matrix(int dim) { return CMatrix::Zero(dim, dim); }

}  // namespace

CMatrix bdot_eval(const LinearSdeSystem& sys, int channel, double t, double fd_step) {
  if (channel < 0 || channel >= sys.channels) throw ContractViolation("bdot_eval: bad channel");
  if (static_cast<int>(sys.Bdot.size()) > channel && sys.Bdot[channel])
    return sys.Bdot[channel](t);
  if (sys.autonomous) return zero_matrix(sys.dim);
  const double s = fd_step;
  return (sys.B[channel](t + s) - sys.B[channel](t - s)) / (2.0 * s);
}

LinearSdeSystem homogenize(const LinearSdeSystem& sys) {
  if (!sys.has_additive())
    throw ContractViolation("homogenize: system has no additive terms D or C_j");
  const int n = sys.dim;
  LinearSdeSystem out;
  out.name = sys.name + "_hom";
  out.dim = n + 1;
  out.channels = sys.channels;
  out.autonomous = sys.autonomous;
  out.coeff_bound = sys.coeff_bound;

  const auto lift = [n](const CMatrix& block, const CVector& add) {
    CMatrix m = CMatrix::Zero(n + 1, n + 1);
    m.topLeftCorner(n, n) = block;
    m.topRightCorner(n, 1) = add;
    return m;  // bottom row stays zero so the last component is conserved
  };
  const LinearSdeSystem base = sys;
  out.A = [base, lift, n](double t) {
    const CVector add = base.D ? base.D(t) : CVector(CVector::Zero(n));
    return lift(base.A(t), add);
  };
  for (int j = 0; j < sys.channels; ++j) {
    out.B.push_back([base, lift, n, j](double t) {
      const bool has_c = static_cast<int>(base.C.size()) > j && base.C[j];
      const CVector add = has_c ? base.C[j](t) : CVector(CVector::Zero(n));
      return lift(base.B[j](t), add);
    });
  }
  out.x0 = CVector(n + 1);
  out.x0.head(n) = sys.x0;
  out.x0(n) = 1.0;
  out.horizon = sys.horizon;
  return out;
}

StructureReport structure(const LinearSdeSystem& sys, const std::vector<double>& t_samples) {
  if (t_samples.empty()) throw ContractViolation("structure: empty sample grid");
  StructureReport rep;
  rep.t = t_samples;
  for (double t : t_samples) {
    const CMatrix A = sys.A(t);
    check_square(A, sys.dim, "A");
    CMatrix L = A;
    for (int j = 0; j < sys.channels; ++j) {
      const CMatrix Bj = sys.B[j](t);
      check_square(Bj, sys.dim, "B");
      L += 0.5 * (Bj.adjoint() * Bj);
    }
    const HermitianSplit split = hermitian_split(L);
    Eigen::SelfAdjointEigenSolver<CMatrix> es(split.K);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    rep.L.push_back(L);
    rep.H.push_back(split.H);
    rep.K.push_back(split.K);
    rep.gamma.push_back(hi);
    rep.K_max = std::max(rep.K_max, std::max(std::abs(lo), std::abs(hi)));
  }
  return rep;
}

std::vector<double> uniform_grid(double t0, double t1, int n) {
  if (n < 2) throw ContractViolation("uniform_grid: need at least two nodes");
  std::vector<double> t(n);
  for (int i = 0; i < n; ++i) t[i] = t0 + (t1 - t0) * static_cast<double>(i) / (n - 1);
  return t;
}

CMatrix second_moment_rhs(const LinearSdeSystem& sys, const CMatrix& Sigma, double t) {
  check_square(Sigma, sys.dim, "Sigma");
  if ((Sigma - Sigma.adjoint()).norm() > 1e-9 * std::max(1.0, Sigma.norm()))
    throw ContractViolation("second_moment_rhs: Sigma is not Hermitian");
  const CMatrix A = sys.A(t);
  CMatrix rhs = A * Sigma + Sigma * A.adjoint();
  for (int j = 0; j < sys.channels; ++j) {
    const CMatrix Bj = sys.B[j](t);
    rhs += Bj * Sigma * Bj.adjoint();
  }
  return rhs;
}

CMatrix second_moment_solve(const LinearSdeSystem& sys, CMatrix Sigma, double t0, double t1,
                            int steps) {
  auto rhs = [&sys](double t, const CMatrix& S) {
    // Re-symmetrize drift inputs so rounding cannot trip the Hermiticity gate.
    const CMatrix Sh = 0.5 * (S + S.adjoint());
    return second_moment_rhs(sys, Sh, t);
  };
  Sigma = rk4_propagate(Sigma, t0, t1, steps, rhs);
  return 0.5 * (Sigma + Sigma.adjoint());
}

CVector em_reference(const LinearSdeSystem& sys, const CVector& x0, double T, double dt,
                     const NoisePath& noise) {
  if (noise.law != NoiseLaw::gaussian)
    throw ContractViolation("em_reference: needs Gaussian increments");
  if (std::abs(noise.dt - dt) > 1e-12 * std::max(1.0, std::abs(dt)))
    throw ContractViolation("em_reference: noise step mismatch");
  const int steps = static_cast<int>(std::llround(T / dt));
  if (std::abs(steps * dt - T) > 1e-9 * std::max(1.0, T))
    throw ContractViolation("em_reference: T is not a multiple of dt");
  if (noise.steps < steps || noise.channels < sys.channels)
    throw ContractViolation("em_reference: noise path too short");

  // Autonomous systems: evaluate the coefficients once outside the loop.
  CMatrix A0;
  std::vector<CMatrix> B0(sys.channels);
  CVector D0;
  std::vector<CVector> C0(sys.channels);
  const bool frozen = sys.autonomous;
  if (frozen) {
    A0 = sys.A(0.0);
    for (int j = 0; j < sys.channels; ++j) B0[j] = sys.B[j](0.0);
    if (sys.D) D0 = sys.D(0.0);
    for (int j = 0; j < sys.channels; ++j)
      if (static_cast<int>(sys.C.size()) > j && sys.C[j]) C0[j] = sys.C[j](0.0);
  }

  CVector x = x0;
  for (int n = 0; n < steps; ++n) {
    const double t = n * dt;
    const CMatrix A = frozen ? A0 : sys.A(t);
    CVector incr = A * x * dt;
    if (sys.D) incr += (frozen ? D0 : sys.D(t)) * dt;
    for (int j = 0; j < sys.channels; ++j) {
      const CMatrix Bj = frozen ? B0[j] : sys.B[j](t);
      CVector diff = Bj * x;
      if (static_cast<int>(sys.C.size()) > j && sys.C[j]) diff += frozen ? C0[j] : sys.C[j](t);
      incr += diff * noise.dW(n, j);
    }
    x += incr;
  }
  return x;
}

double growth_envelope(const LinearSdeSystem& sys, const CVector& x0, double T, int nodes) {
  const int n = std::max(nodes, 101);
  const StructureReport rep = structure(sys, uniform_grid(0.0, T, n));
  double integral = 0.0;
  const double dt = T / (n - 1);
  for (int i = 0; i + 1 < n; ++i) integral += 0.5 * dt * (rep.gamma[i] + rep.gamma[i + 1]);
  return std::exp(2.0 * integral) * x0.squaredNorm();
}

LinearSdeSystem make_example3d(double sigma) {
  // Three-dimensional test system: non-normal upper-triangular drift with
  // three identical isotropic noise channels of total strength sigma.
  LinearSdeSystem sys;
  sys.name = "example3d";
  sys.dim = 3;
  sys.channels = 3;
  CMatrix A(3, 3);
  A << -1, 10, 0, 0, -1, 10, 0, 0, -1;
  const CMatrix Bj = (sigma / std::sqrt(3.0)) * CMatrix::Identity(3, 3);
  sys.A = [A](double) { return A; };
  for (int j = 0; j < 3; ++j) sys.B.push_back([Bj](double) { return Bj; });
  sys.autonomous = true;
  sys.coeff_bound = A.operatorNorm() + 3 * Bj.operatorNorm();
  sys.x0 = CVector::Ones(3);
  sys.horizon = 1.0;
  return sys;
}

LinearSdeSystem make_random_b_weak2() {
  // Noise-block form A = -1/2 B^† B (so K = 0) with a fixed random B;
  // the standard single-channel benchmark for the weak-2 scheme.
  LinearSdeSystem sys;
  sys.name = "random_b_weak2";
  sys.dim = 3;
  sys.channels = 1;
  CMatrix B(3, 3);
  B << -0.79312248, 0.24057128, -1.89632635,  //
      1.39577171, 0.63829474, -0.29204749,    //
      -0.31194933, 0.30383537, -0.2676603;
  const CMatrix A = -0.5 * (B.adjoint() * B);
  sys.A = [A](double) { return A; };
  sys.B.push_back([B](double) { return B; });
  sys.autonomous = true;
  sys.coeff_bound = A.operatorNorm() + B.operatorNorm();
  sys.x0 = CVector::Ones(3);
  sys.horizon = 1.0;
  return sys;
}

LinearSdeSystem make_spde_adr(int n_grid) {
  // Advection-diffusion-reaction SPDE on (0, 2*pi), periodic, semi-discretized
  // with central differences:
  //   du = [(eps + s1^2 cos^2 x / 2) u_xx + (beta sin x - s1^2 sin(2x)/4) u_x] dt
  //        + s1 cos(x) u_x dW^1 + s2 u dW^2,     u(x, 0) = sin(x).
  if (n_grid < 8 || n_grid % 2 != 0)
    throw ContractViolation("make_spde_adr: grid must be even and at least 8");
  const double eps = 0.1, beta = 0.5, s1 = 0.5, s2 = 0.3;
  const int n = n_grid;
  const double dx = 2.0 * M_PI / n;
  RVector x(n);
  for (int i = 0; i < n; ++i) x(i) = i * dx;

  RMatrix D1 = RMatrix::Zero(n, n), D2 = RMatrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    const int ip = (i + 1) % n, im = (i + n - 1) % n;
    D1(i, ip) = 1.0 / (2.0 * dx);
    D1(i, im) = -1.0 / (2.0 * dx);
    D2(i, ip) = 1.0 / (dx * dx);
    D2(i, im) = 1.0 / (dx * dx);
    D2(i, i) = -2.0 / (dx * dx);
  }

  RVector diff_coef(n), adv_coef(n), b1_coef(n);
  for (int i = 0; i < n; ++i) {
    diff_coef(i) = eps + 0.5 * s1 * s1 * std::cos(x(i)) * std::cos(x(i));
    adv_coef(i) = beta * std::sin(x(i)) - 0.25 * s1 * s1 * std::sin(2.0 * x(i));
    b1_coef(i) = s1 * std::cos(x(i));
  }
  const CMatrix A =
      (diff_coef.asDiagonal() * D2 + adv_coef.asDiagonal() * D1).cast<Complex>();
  const CMatrix B1 = (b1_coef.asDiagonal() * D1).cast<Complex>();
  const CMatrix B2 = s2 * CMatrix::Identity(n, n);

  LinearSdeSystem sys;
  sys.name = "spde_adr";
  sys.dim = n;
  sys.channels = 2;
  sys.A = [A](double) { return A; };
  sys.B.push_back([B1](double) { return B1; });
  sys.B.push_back([B2](double) { return B2; });
  sys.autonomous = true;
  sys.coeff_bound = A.operatorNorm() + B1.operatorNorm() + B2.operatorNorm();
  sys.x0 = CVector(n);
  for (int i = 0; i < n; ++i) sys.x0(i) = std::sin(x(i));
  sys.horizon = 1.0;
  return sys;
}

std::vector<std::string> builtin_names() { return {"example3d", "random_b_weak2", "spde_adr"}; }

namespace {

Complex parse_entry(const nlohmann::json& e, const char* field) {
  if (e.is_number()) return Complex(e.get<double>(), 0.0);
  if (e.is_array() && e.size() == 2 && e[0].is_number() && e[1].is_number())
    return Complex(e[0].get<double>(), e[1].get<double>());
  throw ContractViolation(std::string(field) + ": entries must be numbers or [re, im] pairs");
}

CMatrix parse_matrix(const nlohmann::json& m, int dim, const char* field) {
  if (!m.is_array() || static_cast<int>(m.size()) != dim)
    throw ContractViolation(std::string(field) + ": expected " + std::to_string(dim) + " rows");
  CMatrix out(dim, dim);
  for (int i = 0; i < dim; ++i) {
    const auto& row = m[i];
    if (!row.is_array() || static_cast<int>(row.size()) != dim)
      throw ContractViolation(std::string(field) + ": row " + std::to_string(i) +
                              " has wrong length");
    for (int j = 0; j < dim; ++j) out(i, j) = parse_entry(row[j], field);
  }
  return out;
}

CVector parse_vector(const nlohmann::json& v, const char* field) {
  if (!v.is_array()) throw ContractViolation(std::string(field) + ": expected an array");
  CVector out(v.size());
  for (int i = 0; i < static_cast<int>(v.size()); ++i) out(i) = parse_entry(v[i], field);
  return out;
}

}  // namespace

LinearSdeSystem system_from_json(const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& err) {
    throw ContractViolation(std::string("system JSON: ") + err.what());
  }

  LinearSdeSystem sys;
  if (doc.contains("builtin")) {
    const std::string name = doc["builtin"].get<std::string>();
    if (name == "example3d")
      sys = make_example3d(doc.value("sigma", 1.0));
    else if (name == "random_b_weak2")
      sys = make_random_b_weak2();
    else if (name == "spde_adr")
      sys = make_spde_adr(doc.value("n_grid", 16));
    else
      throw ContractViolation("unknown builtin system: " + name);
  } else {
    if (!doc.contains("dim") || !doc.contains("channels"))
      throw ContractViolation("system JSON: need dim and channels (or a builtin name)");
    sys.dim = doc["dim"].get<int>();
    sys.channels = doc["channels"].get<int>();
    if (sys.dim < 1 || sys.channels < 0)
      throw ContractViolation("system JSON: dim/channels out of range");
    sys.name = doc.value("name", std::string("custom"));
    const CMatrix A = parse_matrix(doc.at("A"), sys.dim, "A");
    sys.A = [A](double) { return A; };
    if (!doc.contains("B") || static_cast<int>(doc["B"].size()) != sys.channels)
      throw ContractViolation("system JSON: B must list one matrix per channel");
    for (int j = 0; j < sys.channels; ++j) {
      const CMatrix Bj = parse_matrix(doc["B"][j], sys.dim, "B");
      sys.B.push_back([Bj](double) { return Bj; });
    }
    sys.autonomous = true;
    sys.x0 = CVector::Ones(sys.dim);
  }
  if (doc.contains("x0")) {
    sys.x0 = parse_vector(doc["x0"], "x0");
    if (sys.x0.size() != sys.dim) throw ContractViolation("x0: wrong length");
  }
  if (doc.contains("T")) {
    sys.horizon = doc["T"].get<double>();
    if (!(sys.horizon > 0)) throw ContractViolation("T: must be positive");
  }
  return sys;
}

}  // namespace stochdil
