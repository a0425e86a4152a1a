#ifndef CRVKIT_INFERENCE_HPP
#define CRVKIT_INFERENCE_HPP

// Wald tests of linear hypotheses on the focal coefficients, with
// small-sample reference distributions. Single constraints use Satterthwaite
// degrees of freedom estimated under the working covariance model; joint
// constraints use a Hotelling-style F approximation whose degrees of freedom
// match the mean and total variance of the standardized sandwich. Both
// reduce to quadratic forms in the vectors
//
//   p_si = (I - H_X)_i' A_i W_i Rdd_i M (C' g_s),
//
// g_s being the columns of the symmetric G^{-1/2}. The projector is applied
// in the factored per-cluster form from the estimator; the stacked N x N
// matrix is never built.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "crvkit/crve.hpp"

namespace crvkit {

enum class TestMethod { AHT, Standard, Chi2 };

inline const char* test_method_name(TestMethod m) {
  switch (m) {
    case TestMethod::AHT: return "AHT";
    case TestMethod::Standard: return "Standard";
    case TestMethod::Chi2: return "Chi2";
  }
  return "Unknown";
}

struct TestResult {
  TestMethod method = TestMethod::AHT;
  double Q = 0.0;
  Index q = 0;
  double df_num = 0.0;
  double df_denom = 0.0;  // eta - q + 1 (AHT), m - 1 (Standard), infinity (Chi2)
  double eta = std::numeric_limits<double>::quiet_NaN();  // AHT only
  double Fstat = 0.0;
  double p = 1.0;
};

// Denominator-degree-of-freedom working pieces, returned so callers can
// report or audit them. p_vectors[s][i] is the stacked N-vector p_si; the
// vectors are only materialized on request (they are q*m*N doubles).
struct DofContext {
  std::vector<std::vector<VectorXd>> p_vectors;
  SymMatrix G;          // variance of C beta-hat under the working model
  SymMatrix Ghalf_inv;  // symmetric inverse square root of G
};

struct AhtDof {
  double eta = 0.0;
  DofContext context;
};

struct DfOptions {
  bool keep_p_vectors = false;
  // Experimental: build the p vectors from the projector onto the
  // cluster-varying columns only, ignoring the within-cluster fixed effects.
  // Kept for comparison runs; the full projector is the supported form.
  bool varying_projector_only = false;
};

// Variance condition-number guard shared by the Wald solve and G^{-1/2}:
// past this the quadratic form is numerically meaningless.
inline constexpr double kVarianceConditionLimit = 1e12;

namespace detail {

struct EigenChecked {
  VectorXd values;   // ascending, all positive
  MatrixXd vectors;
};

inline EigenChecked spd_eigen_or_throw(const MatrixXd& a, const std::string& what) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (a + a.transpose()));
  if (es.info() != Eigen::Success)
    throw Error(ErrorCode::InvalidInput, what + ": eigendecomposition failed to converge");
  const VectorXd& lam = es.eigenvalues();
  const double lmax = lam(lam.size() - 1);
  const double lmin = lam(0);
  if (!(lmax > 0.0) || !(lmin > 0.0) || lmax / lmin >= kVarianceConditionLimit)
    throw Error(ErrorCode::DegenerateVariance, what);
  return {lam, es.eigenvectors()};
}

// Cached row blocks of the factored residual projector, so repeated adjoint
// applications do not rebuild the per-cluster helper matrices.
struct AdjointCache {
  std::vector<MatrixXd> b;  // b_mat(k)
  std::vector<MatrixXd> j;  // j_mat(k)
  std::vector<Index> offset;
  Index N = 0;
};

inline AdjointCache make_adjoint_cache(const AbsorbedDesign& ad) {
  AdjointCache c;
  const Index m = ad.m();
  c.b.resize(m);
  c.j.resize(m);
  c.offset.resize(m);
  for (Index k = 0; k < m; ++k) {
    c.b[k] = ad.b_mat(k);
    c.j[k] = ad.j_mat(k);
    c.offset[k] = c.N;
    c.N += ad.blocks[k].n();
  }
  return c;
}

// out = stacked (I - H_X)_i' u, or (I - H_U)_i' u with U the cluster-varying
// columns when varying_only is set.
inline void stacked_adjoint(const AbsorbedDesign& ad, const AdjointCache& c, Index i,
                            const VectorXd& u, bool varying_only, VectorXd& out) {
  out.resize(c.N);
  const Index m = ad.m();
  if (varying_only) {
    const VectorXd w = ad.gram_inv_varying * (ad.blocks[i].varying.transpose() * u);
    for (Index k = 0; k < m; ++k) {
      auto seg = out.segment(c.offset[k], ad.blocks[k].n());
      seg.noalias() = -(ad.design.clusters[k].W * (ad.blocks[k].varying * w));
      if (k == i) seg += u;
    }
  } else {
    const VectorXd u2 = ad.project_within_adjoint(i, u);
    const VectorXd w = c.j[i].transpose() * u;
    for (Index k = 0; k < m; ++k) {
      auto seg = out.segment(c.offset[k], ad.blocks[k].n());
      seg.noalias() = -(c.b[k] * w);
      if (k == i) seg += u2;
    }
  }
}

inline void check_adjustments(const AbsorbedDesign& ad, const std::vector<MatrixXd>& A) {
  if (static_cast<Index>(A.size()) != ad.m())
    throw Error(ErrorCode::InvalidInput, "adjustment matrix count mismatch");
  for (Index i = 0; i < ad.m(); ++i)
    if (A[i].rows() != ad.blocks[i].n() || A[i].cols() != ad.blocks[i].n())
      throw Error(ErrorCode::InvalidInput, "adjustment matrix dimension mismatch in cluster '" +
                                               ad.design.clusters[i].id + "'");
}

inline void check_sigma_blocks(const AbsorbedDesign& ad, const std::vector<SymMatrix>& sigma) {
  if (static_cast<Index>(sigma.size()) != ad.m())
    throw Error(ErrorCode::InvalidInput, "covariance block count mismatch");
  for (Index i = 0; i < ad.m(); ++i)
    if (sigma[i].dim() != ad.blocks[i].n())
      throw Error(ErrorCode::InvalidInput, "covariance block dimension mismatch in cluster '" +
                                               ad.design.clusters[i].id + "'");
}

// Columns of the stacked p matrix, one per (constraint column s, cluster i),
// laid out s-major: column s*m + i holds p_si. vmat holds M C' G^{-1/2}
// (or M c for the single-contrast case).
inline MatrixXd p_matrix(const FitResult& fit, const std::vector<MatrixXd>& A,
                         const MatrixXd& vmat, bool varying_only, const AdjointCache& cache) {
  const AbsorbedDesign& ad = fit.absorbed;
  const Index m = ad.m();
  const Index q = vmat.cols();
  MatrixXd p(cache.N, q * m);
  VectorXd col;
  for (Index i = 0; i < m; ++i) {
    const MatrixXd u = A[i] * (ad.blocks[i].w_focal * vmat);  // n_i x q
    for (Index s = 0; s < q; ++s) {
      stacked_adjoint(ad, cache, i, u.col(s), varying_only, col);
      p.col(s * m + i) = col;
    }
  }
  return p;
}

// Block-diagonal product Sigma * P, per cluster.
inline MatrixXd sigma_times(const AdjointCache& cache, const std::vector<SymMatrix>& sigma,
                            const MatrixXd& p) {
  MatrixXd out(p.rows(), p.cols());
  for (std::size_t k = 0; k < sigma.size(); ++k)
    out.middleRows(cache.offset[k], sigma[k].dim()).noalias() =
        sigma[k].mat() * p.middleRows(cache.offset[k], sigma[k].dim());
  return out;
}

inline std::vector<SymMatrix> residual_outer_blocks(const FitResult& fit) {
  bool any = false;
  std::vector<SymMatrix> sigma;
  sigma.reserve(fit.residuals.size());
  for (const VectorXd& e : fit.residuals) {
    if (e.cwiseAbs().maxCoeff() > 0.0) any = true;
    sigma.emplace_back(MatrixXd(e * e.transpose()));
  }
  if (!any)
    throw Error(ErrorCode::Underdetermined,
                "residuals are identically zero; empirical degrees of freedom are undefined");
  return sigma;
}

inline const std::vector<SymMatrix>& stored_working(const RobustVariance& v) {
  if (v.working.empty())
    throw Error(ErrorCode::InvalidInput,
                "variance estimate carries no working covariance blocks; pass them explicitly");
  return v.working;
}

}  // namespace detail

// Q = (C beta - d)' (C V C')^{-1} (C beta - d), solved through the
// eigendecomposition so near-singular variance is rejected rather than
// amplified.
inline double wald_statistic(const VectorXd& beta, const SymMatrix& v, const Constraint& con) {
  con.validate(beta.size());
  if (v.dim() != beta.size())
    throw Error(ErrorCode::InvalidInput, "variance dimension does not match the coefficients");
  const MatrixXd cvc = con.C * v.mat() * con.C.transpose();
  const detail::EigenChecked eig = detail::spd_eigen_or_throw(
      cvc, "constraint variance C V C' is singular or too ill-conditioned to invert");
  const VectorXd z = con.C * beta - con.d;
  const VectorXd proj = eig.vectors.transpose() * z;
  double q = 0.0;
  for (Index k = 0; k < proj.size(); ++k) q += proj(k) * proj(k) / eig.values(k);
  return q;
}

inline double wald(const FitResult& fit, const RobustVariance& v, const Constraint& con) {
  return wald_statistic(fit.beta, v.V, con);
}

// Satterthwaite degrees of freedom for a single contrast c under a given
// error covariance: with K = sum_i p_i p_i', the quadratic form c'Vc has
// mean tr(K Sigma) and variance 2 tr((K Sigma)^2) under normal errors, and
// nu = 2 mean^2 / variance = tr(K Sigma)^2 / tr((K Sigma)^2).
inline double satterthwaite_df_with(const FitResult& fit, const std::vector<MatrixXd>& adjustments,
                                    const std::vector<SymMatrix>& sigma, const VectorXd& c,
                                    const DfOptions& opts = {}) {
  const AbsorbedDesign& ad = fit.absorbed;
  detail::check_adjustments(ad, adjustments);
  detail::check_sigma_blocks(ad, sigma);
  if (c.size() != ad.r())
    throw Error(ErrorCode::InvalidInput, "contrast has " + std::to_string(c.size()) +
                                             " entries for " + std::to_string(ad.r()) +
                                             " focal coefficients");
  if (!c.allFinite()) throw Error(ErrorCode::InvalidInput, "contrast has non-finite entries");
  const detail::AdjointCache cache = detail::make_adjoint_cache(ad);
  const MatrixXd vmat = ad.gram_inv_focal * c;
  const MatrixXd p = detail::p_matrix(fit, adjustments, vmat, opts.varying_projector_only, cache);
  const MatrixXd sp = detail::sigma_times(cache, sigma, p);
  MatrixXd gram = p.transpose() * sp;
  gram = 0.5 * (gram + gram.transpose());
  const double num = gram.trace();
  const double den = gram.squaredNorm();
  if (!(den > 0.0))
    throw Error(ErrorCode::Underdetermined,
                "contrast variance vanishes under the given covariance; degrees of freedom "
                "are undefined");
  return num * num / den;
}

inline double satterthwaite_df(const FitResult& fit, const RobustVariance& v,
                               const std::vector<SymMatrix>& phi, const VectorXd& c,
                               const DfOptions& opts = {}) {
  return satterthwaite_df_with(fit, v.adjustments, phi, c, opts);
}

// Convenience: reuse the working covariance the adjustments were built from.
inline double satterthwaite_df(const FitResult& fit, const RobustVariance& v, const VectorXd& c,
                               const DfOptions& opts = {}) {
  return satterthwaite_df_with(fit, v.adjustments, detail::stored_working(v), c, opts);
}

// Plug-in variant with e_i e_i' in place of the working blocks. Known to be
// very conservative; exposed for comparison, not recommended.
inline double empirical_satterthwaite_df(const FitResult& fit, const RobustVariance& v,
                                         const VectorXd& c, const DfOptions& opts = {}) {
  return satterthwaite_df_with(fit, v.adjustments, detail::residual_outer_blocks(fit), c, opts);
}

// Degrees of freedom for the Hotelling-style F approximation: eta matches
// the mean and total variance of Omega = G^{-1/2} C V C' G^{-1/2} to a
// Wishart with identity scale, where G is the variance of C beta-hat under
// the given covariance. The denominator runs in fixed i-major order so
// repeated runs reduce identically.
inline AhtDof aht_df_with(const FitResult& fit, const std::vector<MatrixXd>& adjustments,
                          const std::vector<SymMatrix>& sigma, const Constraint& con,
                          const DfOptions& opts = {}) {
  const AbsorbedDesign& ad = fit.absorbed;
  detail::check_adjustments(ad, adjustments);
  detail::check_sigma_blocks(ad, sigma);
  con.validate(ad.r());
  const Index q = con.q();
  const Index m = ad.m();
  const MatrixXd g = con.C * true_variance(fit, sigma).mat() * con.C.transpose();
  const detail::EigenChecked eig = detail::spd_eigen_or_throw(
      g, "variance of the constraint under the working model is singular");
  MatrixXd ghalf_inv = eig.vectors;
  for (Index k = 0; k < q; ++k) ghalf_inv.col(k) *= 1.0 / std::sqrt(eig.values(k));
  ghalf_inv = ghalf_inv * eig.vectors.transpose();

  const detail::AdjointCache cache = detail::make_adjoint_cache(ad);
  const MatrixXd vmat = ad.gram_inv_focal * (con.C.transpose() * ghalf_inv);
  const MatrixXd p = detail::p_matrix(fit, adjustments, vmat, opts.varying_projector_only, cache);
  const MatrixXd sp = detail::sigma_times(cache, sigma, p);
  MatrixXd gram = p.transpose() * sp;
  gram = 0.5 * (gram + gram.transpose());

  double den = 0.0;
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j)
      for (Index s = 0; s < q; ++s)
        for (Index t = 0; t < q; ++t)
          den += gram(s * m + i, t * m + j) * gram(t * m + i, s * m + j) +
                 gram(s * m + i, s * m + j) * gram(t * m + i, t * m + j);
  if (!(den > 0.0))
    throw Error(ErrorCode::Underdetermined,
                "total variance of the standardized sandwich vanishes; degrees of freedom "
                "are undefined");

  AhtDof out;
  out.eta = static_cast<double>(q) * static_cast<double>(q + 1) / den;
  out.context.G = SymMatrix(g);
  out.context.Ghalf_inv = SymMatrix(ghalf_inv);
  if (opts.keep_p_vectors) {
    out.context.p_vectors.resize(q);
    for (Index s = 0; s < q; ++s) {
      out.context.p_vectors[s].resize(m);
      for (Index i = 0; i < m; ++i) out.context.p_vectors[s][i] = p.col(s * m + i);
    }
  }
  return out;
}

inline AhtDof aht_df(const FitResult& fit, const RobustVariance& v,
                     const std::vector<SymMatrix>& phi, const Constraint& con,
                     const DfOptions& opts = {}) {
  return aht_df_with(fit, v.adjustments, phi, con, opts);
}

inline AhtDof aht_df(const FitResult& fit, const RobustVariance& v, const Constraint& con,
                     const DfOptions& opts = {}) {
  return aht_df_with(fit, v.adjustments, detail::stored_working(v), con, opts);
}

inline AhtDof empirical_aht_df(const FitResult& fit, const RobustVariance& v,
                               const Constraint& con, const DfOptions& opts = {}) {
  return aht_df_with(fit, v.adjustments, detail::residual_outer_blocks(fit), con, opts);
}

namespace detail {

inline void check_test_inputs(double q_stat, Index q) {
  if (!(q_stat >= 0.0) || !std::isfinite(q_stat))
    throw Error(ErrorCode::InvalidInput, "Wald statistic must be finite and nonnegative");
  if (q < 1) throw Error(ErrorCode::InvalidInput, "constraint dimension must be at least 1");
}

}  // namespace detail

// ((eta - q + 1) / (eta q)) Q against F(q, eta - q + 1).
inline TestResult aht_test(double Q, Index q, double eta) {
  detail::check_test_inputs(Q, q);
  if (!std::isfinite(eta))
    throw Error(ErrorCode::InvalidInput, "degrees of freedom parameter must be finite");
  const double dfd = eta - static_cast<double>(q) + 1.0;
  if (!(dfd > 0.0))
    throw Error(ErrorCode::DegreesOfFreedomTooSmall,
                "denominator degrees of freedom eta - q + 1 = " + std::to_string(dfd) +
                    " are not positive (eta = " + std::to_string(eta) + ", q = " +
                    std::to_string(q) + ")");
  TestResult r;
  r.method = TestMethod::AHT;
  r.Q = Q;
  r.q = q;
  r.df_num = static_cast<double>(q);
  r.df_denom = dfd;
  r.eta = eta;
  r.Fstat = dfd / (eta * static_cast<double>(q)) * Q;
  r.p = f_sf(r.Fstat, r.df_num, r.df_denom);
  return r;
}

// Q/q against F(q, m - 1): the conventional large-sample-with-correction
// comparison test.
inline TestResult standard_test(double Q, Index q, Index m) {
  detail::check_test_inputs(Q, q);
  if (m < 2) throw Error(ErrorCode::InvalidInput, "standard test needs at least two clusters");
  TestResult r;
  r.method = TestMethod::Standard;
  r.Q = Q;
  r.q = q;
  r.df_num = static_cast<double>(q);
  r.df_denom = static_cast<double>(m - 1);
  r.Fstat = Q / static_cast<double>(q);
  r.p = f_sf(r.Fstat, r.df_num, r.df_denom);
  return r;
}

// Q against the chi-squared upper tail: the asymptotic comparison test.
inline TestResult chi2_test(double Q, Index q) {
  detail::check_test_inputs(Q, q);
  TestResult r;
  r.method = TestMethod::Chi2;
  r.Q = Q;
  r.q = q;
  r.df_num = static_cast<double>(q);
  r.df_denom = std::numeric_limits<double>::infinity();
  r.Fstat = Q / static_cast<double>(q);
  r.p = chi2_sf(Q, static_cast<double>(q));
  return r;
}

}  // namespace crvkit

#endif
