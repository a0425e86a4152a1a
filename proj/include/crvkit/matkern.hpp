#ifndef CRVKIT_MATKERN_HPP
#define CRVKIT_MATKERN_HPP

// Dense symmetric-matrix kernels and the tail probabilities the test
// statistics need. Eigen does the decompositions; the tail functions are
// self-contained (continued fractions, no external special-function dep).

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "crvkit/error.hpp"

namespace crvkit {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Symmetric matrix wrapper: symmetrizes on construction so downstream
// eigendecompositions never see the skew part of accumulated roundoff.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(const MatrixXd& a) {
    if (a.rows() != a.cols())
      throw Error(ErrorCode::InvalidInput, "SymMatrix requires a square matrix, got " +
                                               std::to_string(a.rows()) + "x" +
                                               std::to_string(a.cols()));
    if (!a.allFinite())
      throw Error(ErrorCode::InvalidInput, "SymMatrix requires finite entries");
    m_ = 0.5 * (a + a.transpose());
  }
  Index dim() const { return m_.rows(); }
  const MatrixXd& mat() const { return m_; }
  double operator()(Index i, Index j) const { return m_(i, j); }

 private:
  MatrixXd m_;
};

struct EigenPair {
  VectorXd values;   // descending
  MatrixXd vectors;  // columns aligned with values
};

inline EigenPair sym_eigen(const SymMatrix& a) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(a.mat());
  if (es.info() != Eigen::Success)
    throw Error(ErrorCode::InvalidInput, "symmetric eigendecomposition failed to converge");
  // Eigen returns ascending order; flip to descending.
  const Index n = a.dim();
  EigenPair out;
  out.values = es.eigenvalues().reverse();
  out.vectors.resize(n, n);
  for (Index j = 0; j < n; ++j) out.vectors.col(j) = es.eigenvectors().col(n - 1 - j);
  return out;
}

inline double default_rank_tol(Index dim) {
  return static_cast<double>(dim) * std::numeric_limits<double>::epsilon();
}

// Moore-Penrose inverse square root of a PSD matrix: eigenvalues at or below
// rank_tol * lambda_max are treated as zero, anything materially negative is
// rejected.
inline SymMatrix pinv_sqrt_psd(const SymMatrix& a, double rank_tol = -1.0) {
  const Index n = a.dim();
  if (n == 0) return SymMatrix(MatrixXd::Zero(0, 0));
  if (rank_tol < 0) rank_tol = default_rank_tol(n);
  EigenPair ep = sym_eigen(a);
  const double lmax = std::max(ep.values(0), 0.0);
  const double cut = rank_tol * lmax;
  VectorXd d = VectorXd::Zero(n);
  for (Index i = 0; i < n; ++i) {
    const double lam = ep.values(i);
    if (lam < -std::max(cut, rank_tol))
      throw Error(ErrorCode::NotPSD, "matrix has eigenvalue " + std::to_string(lam) +
                                         " below the PSD tolerance");
    if (lam > cut && lam > 0.0) d(i) = 1.0 / std::sqrt(lam);
  }
  return SymMatrix(ep.vectors * d.asDiagonal() * ep.vectors.transpose());
}

// Symmetric PSD square root (same rank handling); used for simulation draws.
inline SymMatrix sqrt_psd(const SymMatrix& a, double rank_tol = -1.0) {
  const Index n = a.dim();
  if (n == 0) return SymMatrix(MatrixXd::Zero(0, 0));
  if (rank_tol < 0) rank_tol = default_rank_tol(n);
  EigenPair ep = sym_eigen(a);
  const double lmax = std::max(ep.values(0), 0.0);
  const double cut = rank_tol * lmax;
  VectorXd d = VectorXd::Zero(n);
  for (Index i = 0; i < n; ++i) {
    const double lam = ep.values(i);
    if (lam < -std::max(cut, rank_tol))
      throw Error(ErrorCode::NotPSD, "matrix has eigenvalue " + std::to_string(lam) +
                                         " below the PSD tolerance");
    if (lam > cut && lam > 0.0) d(i) = std::sqrt(lam);
  }
  return SymMatrix(ep.vectors * d.asDiagonal() * ep.vectors.transpose());
}

// Upper-triangular Cholesky factor D with a = D' D (strictly PD input).
inline MatrixXd chol_upper(const SymMatrix& a) {
  Eigen::LLT<MatrixXd> llt(a.mat());
  if (llt.info() != Eigen::Success)
    throw Error(ErrorCode::NotPD, "Cholesky factorization failed; matrix is not positive definite");
  // LLT gives a = L L'; with D = L' we get a = D' D and D upper-triangular.
  return llt.matrixL().transpose();
}

namespace detail {

// Continued fraction for the regularized incomplete beta (Lentz's method,
// DLMF 8.17.22 coefficient pattern).
inline double betacf(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-12;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) return h;
  }
  throw Error(ErrorCode::InvalidInput, "incomplete beta continued fraction did not converge");
}

inline double ibeta_reg(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0))
    throw Error(ErrorCode::InvalidInput, "incomplete beta requires positive shape parameters");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lnfront =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(lnfront);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

// Regularized upper incomplete gamma Q(a, x): series for P when x < a+1,
// continued fraction for Q otherwise.
inline double gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0)
    throw Error(ErrorCode::InvalidInput, "incomplete gamma requires a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  const double lnpre = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int n = 0; n < 1000; ++n) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) return 1.0 - sum * std::exp(lnpre);
    }
    throw Error(ErrorCode::InvalidInput, "incomplete gamma series did not converge");
  }
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= 1000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) return h * std::exp(lnpre);
  }
  throw Error(ErrorCode::InvalidInput, "incomplete gamma continued fraction did not converge");
}

}  // namespace detail

// Upper tail P(F > x) for an F(d1, d2) variate, via the incomplete beta:
// P(F > x) = I_y(d2/2, d1/2) with y = d2 / (d2 + d1 x).
inline double f_sf(double x, double d1, double d2) {
  if (!(d1 > 0.0) || !(d2 > 0.0) || !std::isfinite(d1) || !std::isfinite(d2))
    throw Error(ErrorCode::InvalidInput, "f_sf requires positive finite degrees of freedom");
  if (!(x >= 0.0) || !std::isfinite(x))
    throw Error(ErrorCode::InvalidInput, "f_sf requires a finite nonnegative statistic");
  if (x == 0.0) return 1.0;
  const double y = d2 / (d2 + d1 * x);
  return detail::ibeta_reg(0.5 * d2, 0.5 * d1, y);
}

// Upper tail P(X > x) for chi-square with k degrees of freedom.
inline double chi2_sf(double x, double k) {
  if (!(k > 0.0) || !std::isfinite(k))
    throw Error(ErrorCode::InvalidInput, "chi2_sf requires positive degrees of freedom");
  if (!(x >= 0.0) || !std::isfinite(x))
    throw Error(ErrorCode::InvalidInput, "chi2_sf requires a finite nonnegative statistic");
  return detail::gamma_q(0.5 * k, 0.5 * x);
}

// Two-sided t(df) p-value at |t|; equals the F(1, df) upper tail at t^2.
inline double t_two_sided(double t, double df) {
  const double t2 = t * t;
  if (t2 == 0.0) return 1.0;
  return f_sf(t2, 1.0, df);
}

}  // namespace crvkit

#endif
