#include "stochdil/numerics.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace stochdil {

HermitianSplit hermitian_split(const CMatrix& L) {
  if (L.rows() != L.cols()) throw ContractViolation("hermitian_split: matrix must be square");
  HermitianSplit out;
  out.K = 0.5 * (L + L.adjoint());
  out.H = 0.5 * kI * (L - L.adjoint());
  return out;
}

CMatrix expm_skew(const CMatrix& S, double tol) {
  if (S.rows() != S.cols()) throw ContractViolation("expm_skew: matrix must be square");
  const double scale = std::max(1.0, S.norm());
  if ((S + S.adjoint()).norm() > tol * scale)
    throw ContractViolation("expm_skew: input is not anti-Hermitian");
  // S = -i (iS) with iS Hermitian, so e^S = V e^{-i lambda} V^dag.
  Eigen::SelfAdjointEigenSolver<CMatrix> es(kI * S);
  if (es.info() != Eigen::Success) throw ContractViolation("expm_skew: eigendecomposition failed");
  const CVector phases =
      ((-kI) * es.eigenvalues().cast<Complex>().array()).exp().matrix();
  CMatrix U = es.eigenvectors() * phases.asDiagonal() * es.eigenvectors().adjoint();
  const double dim = static_cast<double>(S.rows());
  if ((U.adjoint() * U - CMatrix::Identity(S.rows(), S.cols())).norm() > 1e-12 * std::max(1.0, dim))
    throw ContractViolation("expm_skew: result failed the unitarity check");
  return U;
}

CMatrix expm_dense(const CMatrix& A) {
  if (A.rows() != A.cols()) throw ContractViolation("expm_dense: matrix must be square");
  // Halve until the norm is comfortably inside the Taylor radius, sum the
  // series to machine precision, then square back up.
  int squarings = 0;
  double norm = A.norm();
  while (norm > 0.25) {
    norm /= 2;
    ++squarings;
  }
  const CMatrix S = A / std::pow(2.0, squarings);
  CMatrix term = CMatrix::Identity(A.rows(), A.cols());
  CMatrix result = term;
  for (int k = 1; k <= 30; ++k) {
    term = (S * term) / static_cast<double>(k);
    result += term;
    if (term.norm() < 1e-18 * std::max(1.0, result.norm())) break;
  }
  for (int k = 0; k < squarings; ++k) result = result * result;
  return result;
}

namespace {
template <class Mat>
Mat kron_impl(const Mat& A, const Mat& B) {
  Mat out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return out;
}
}  // namespace

CMatrix kron(const CMatrix& A, const CMatrix& B) { return kron_impl(A, B); }
RMatrix kron(const RMatrix& A, const RMatrix& B) { return kron_impl(A, B); }

CVector basis_vector(int n, int j) {
  if (j < 0 || j >= n) throw ContractViolation("basis_vector: index out of range");
  CVector e = CVector::Zero(n);
  e(j) = 1.0;
  return e;
}

int default_rk4_steps(double t0, double t1) {
  const double span = std::abs(t1 - t0);
  return std::max(1, static_cast<int>(std::ceil(200.0 * span)));
}

}  // namespace stochdil
