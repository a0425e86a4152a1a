#ifndef CRVKIT_CRVE_HPP
#define CRVKIT_CRVE_HPP

// Cluster-robust variance estimators. CR0/CR1/CR1S scale the residual outer
// products; CR3 applies the jackknife-style leverage inverse; CR2 is the
// bias-reduced linearization: per-cluster adjustment matrices A_i chosen so
// that the estimator is exactly unbiased when the errors follow the working
// covariance. A_i = D_i' B_i^{+1/2} D_i with Phi_i = D_i' D_i and B_i the
// working covariance of the cluster's residuals, pseudo-inverted because
// absorbed fixed effects make B_i rank deficient by construction.

#include <vector>

#include "crvkit/estimator.hpp"

namespace crvkit {

enum class CRKind { CR0, CR1, CR1S, CR2, CR3 };

inline const char* cr_kind_name(CRKind k) {
  switch (k) {
    case CRKind::CR0: return "CR0";
    case CRKind::CR1: return "CR1";
    case CRKind::CR1S: return "CR1S";
    case CRKind::CR2: return "CR2";
    case CRKind::CR3: return "CR3";
  }
  return "?";
}

struct AdjustmentKind {
  CRKind kind = CRKind::CR2;
  WorkingModel working;  // CR2 only
  // Require weights proportional to the inverse working covariance and use
  // the cluster-varying-column form of B_i (errors with ShortcutInvalid when
  // the proportionality does not hold).
  bool use_absorbed_shortcut = false;
  // Replication-only variant of the CR1S small-sample factor that counts the
  // focal columns alone.
  bool absorbed_p_for_cr1s = false;

  static AdjustmentKind cr0() { return {CRKind::CR0, {}, false, false}; }
  static AdjustmentKind cr1() { return {CRKind::CR1, {}, false, false}; }
  static AdjustmentKind cr1s(bool absorbed_p = false) {
    return {CRKind::CR1S, {}, false, absorbed_p};
  }
  static AdjustmentKind cr2(WorkingModel wm = WorkingModel::identity(), bool shortcut = false) {
    return {CRKind::CR2, std::move(wm), shortcut, false};
  }
  static AdjustmentKind cr3() { return {CRKind::CR3, {}, false, false}; }
};

struct RobustVariance {
  SymMatrix V;
  AdjustmentKind kind;
  std::vector<MatrixXd> meat;         // per-cluster focal-space contributions
  std::vector<MatrixXd> adjustments;  // A_i
  std::vector<SymMatrix> working;     // Phi blocks the adjustments were built from (CR2)
};

// Rank tolerance for pseudo-inverting B_i: structural zeros of B_i land near
// 1e-12 of the top eigenvalue after the factored quadratic-form arithmetic,
// genuine eigenvalues sit far above 1e-8, and both CR2 routes must agree on
// the kept eigenspace.
inline constexpr double kCr2RankTol = 1e-8;
// Leave-one-cluster-out identification threshold on the unweighted gram.
inline constexpr double kIdentificationTol = 1e-8;

namespace detail {

// W_i = c I with a single c across clusters (the scale drops out of every
// projection, so this is the regime where the identity-working shortcut is
// exact).
inline bool weights_scalar_identity(const ClusteredDesign& d) {
  double c = d.clusters.front().W(0, 0);
  for (const auto& blk : d.clusters) {
    const Index n = blk.n();
    if ((blk.W - c * MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() > 1e-14 * std::fabs(c))
      return false;
  }
  return c > 0.0;
}

inline void check_shortcut_proportionality(const ClusteredDesign& d,
                                           const std::vector<SymMatrix>& phi) {
  const MatrixXd wp0 = d.clusters.front().W * phi.front().mat();
  const double kappa = wp0.trace() / static_cast<double>(d.clusters.front().n());
  const double tol = 1e-8 * std::max(1.0, std::fabs(kappa));
  for (Index i = 0; i < d.m(); ++i) {
    const Index n = d.clusters[i].n();
    const MatrixXd wp = d.clusters[i].W * phi[i].mat();
    if ((wp - kappa * MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() > tol)
      throw Error(ErrorCode::ShortcutInvalid,
                  "absorbed shortcut requires weights proportional to the inverse working "
                  "covariance; violated in cluster '" +
                      d.clusters[i].id + "'");
  }
}

// Identification condition: every leave-one-cluster-out gram of the
// cluster-varying columns must keep full rank, otherwise the cluster's
// adjustment does not exist for arbitrary weighting.
inline void check_cluster_identification(const AbsorbedDesign& ad) {
  const Index d = ad.r() + ad.s_kept();
  if (d == 0) return;
  MatrixXd total = MatrixXd::Zero(d, d);
  std::vector<MatrixXd> own(ad.m());
  for (Index i = 0; i < ad.m(); ++i) {
    own[i] = ad.blocks[i].varying.transpose() * ad.blocks[i].varying;
    total += own[i];
  }
  for (Index i = 0; i < ad.m(); ++i) {
    EigenPair ep = sym_eigen(SymMatrix(MatrixXd(total - own[i])));
    const double top = ep.values(0);
    if (!(top > 0.0) || ep.values(d - 1) <= kIdentificationTol * top)
      throw Error(ErrorCode::ClusterIdentification,
                  "covariates not identified when cluster '" + ad.design.clusters[i].id +
                      "' is left out; the bias-reduced adjustment does not exist");
  }
}

struct AdjustmentBundle {
  std::vector<MatrixXd> A;
  std::vector<SymMatrix> phi;  // CR2 only
};

inline AdjustmentBundle build_adjustments(const FitResult& fit, const AdjustmentKind& kind) {
  const AbsorbedDesign& ad = fit.absorbed;
  const ClusteredDesign& d = ad.design;
  const Index m = d.m();
  AdjustmentBundle out;
  out.A.resize(m);
  switch (kind.kind) {
    case CRKind::CR0:
    case CRKind::CR1:
    case CRKind::CR1S: {
      double c = 1.0;
      if (kind.kind == CRKind::CR1) {
        if (m < 2) throw Error(ErrorCode::InvalidInput, "CR1 needs at least two clusters");
        c = std::sqrt(static_cast<double>(m) / static_cast<double>(m - 1));
      } else if (kind.kind == CRKind::CR1S) {
        const double n = static_cast<double>(d.total_rows());
        const double p = static_cast<double>(kind.absorbed_p_for_cr1s ? d.r : d.p());
        if (m < 2 || !(n > p))
          throw Error(ErrorCode::InvalidInput, "CR1S needs at least two clusters and N > p");
        c = std::sqrt(m * n / ((m - 1) * (n - p)));
      }
      for (Index i = 0; i < m; ++i)
        out.A[i] = c * MatrixXd::Identity(d.clusters[i].n(), d.clusters[i].n());
      break;
    }
    case CRKind::CR3: {
      for (Index i = 0; i < m; ++i) {
        const AbsorbedBlock& b = ad.blocks[i];
        const Index n = b.n();
        MatrixXd ih = MatrixXd::Identity(n, n) - b.j_focal * b.w_focal.transpose();
        Eigen::FullPivLU<MatrixXd> lu(ih);
        if (!lu.isInvertible())
          throw Error(ErrorCode::NotPD, "CR3 leverage adjustment is singular in cluster '" +
                                            d.clusters[i].id + "'");
        out.A[i] = lu.inverse();
      }
      break;
    }
    case CRKind::CR2: {
      out.phi = working_covariance(kind.working, d);
      check_cluster_identification(ad);
      bool shortcut = kind.use_absorbed_shortcut;
      if (shortcut)
        check_shortcut_proportionality(d, out.phi);
      else if (kind.working.kind == WorkingModel::Kind::Identity && weights_scalar_identity(d))
        shortcut = true;  // identity closed form, exact here
      if (shortcut) {
        // B_i from the cluster-varying columns plus a local within-FE
        // correction. The naive varying-only form keeps unit eigenvalues on
        // the within-FE span that the full residual projector kills; those
        // components never touch residuals or focal contractions, but the
        // general path is the reference, so subtract them to keep the two
        // routes identical entrywise.
        const Index q = ad.r() + ad.s_kept();
        MatrixXd gsum = MatrixXd::Zero(q, q);
        std::vector<MatrixXd> ub(m), jv(m);
        for (Index i = 0; i < m; ++i) {
          ub[i] = d.clusters[i].W * ad.blocks[i].varying;
          jv[i] = ad.blocks[i].varying * ad.gram_inv_varying;
          gsum.noalias() += ub[i].transpose() * out.phi[i].mat() * ub[i];
        }
        for (Index i = 0; i < m; ++i) {
          const AbsorbedBlock& blk = ad.blocks[i];
          const MatrixXd d_i = chol_upper(out.phi[i]);
          const MatrixXd t2 = jv[i] * (ub[i].transpose() * out.phi[i].mat());
          MatrixXd mid = out.phi[i].mat() - t2 - t2.transpose();
          mid.noalias() += jv[i] * gsum * jv[i].transpose();
          if (blk.within.cols() > 0) {
            const MatrixXd tw = blk.within * blk.gram_inv_within;
            const MatrixXd ht_phi = tw * (blk.w_within.transpose() * out.phi[i].mat());
            mid -= ht_phi + ht_phi.transpose();
            mid.noalias() +=
                tw * (blk.w_within.transpose() * out.phi[i].mat() * blk.w_within) * tw.transpose();
          }
          const SymMatrix b(MatrixXd(d_i * mid * d_i.transpose()));
          out.A[i] = d_i.transpose() * pinv_sqrt_psd(b, kCr2RankTol).mat() * d_i;
        }
      } else {
        const MatrixXd pooled = ad.pooled_cross_gram(out.phi);
        for (Index i = 0; i < m; ++i) {
          const MatrixXd d_i = chol_upper(out.phi[i]);
          const MatrixXd mid = ad.residual_quad_block(i, out.phi[i], pooled);
          const SymMatrix b(MatrixXd(d_i * mid * d_i.transpose()));
          out.A[i] = d_i.transpose() * pinv_sqrt_psd(b, kCr2RankTol).mat() * d_i;
        }
      }
      break;
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<MatrixXd> adjustment_matrices(const FitResult& fit, const AdjustmentKind& kind) {
  return detail::build_adjustments(fit, kind).A;
}

// Assemble the sandwich from precomputed adjustment matrices (the adjustments
// depend only on the design and working model, not on the outcome, so
// repeated fits over fresh outcomes can reuse them).
inline RobustVariance vcov_with_adjustments(const FitResult& fit, const AdjustmentKind& kind,
                                            std::vector<MatrixXd> adjustments,
                                            std::vector<SymMatrix> working) {
  const AbsorbedDesign& ad = fit.absorbed;
  const Index m = ad.m();
  if (static_cast<Index>(adjustments.size()) != m)
    throw Error(ErrorCode::InvalidInput, "adjustment count mismatch");
  RobustVariance rv;
  rv.kind = kind;
  rv.meat.resize(m);
  MatrixXd total = MatrixXd::Zero(ad.r(), ad.r());
  for (Index i = 0; i < m; ++i) {
    const VectorXd g = ad.blocks[i].w_focal.transpose() * (adjustments[i] * fit.residuals[i]);
    rv.meat[i] = g * g.transpose();
    total += rv.meat[i];
  }
  rv.V = SymMatrix(MatrixXd(ad.gram_inv_focal * total * ad.gram_inv_focal));
  rv.adjustments = std::move(adjustments);
  rv.working = std::move(working);
  return rv;
}

inline RobustVariance vcov(const FitResult& fit, const AdjustmentKind& kind) {
  detail::AdjustmentBundle bundle = detail::build_adjustments(fit, kind);
  return vcov_with_adjustments(fit, kind, std::move(bundle.A), std::move(bundle.phi));
}

// Sandwich matrix alone, with the adjustments borrowed rather than moved into
// a RobustVariance: the replicate loop of a simulation evaluates thousands of
// outcomes against adjustment matrices that never change.
inline SymMatrix vcov_matrix_with_adjustments(const FitResult& fit,
                                              const std::vector<MatrixXd>& adjustments) {
  const AbsorbedDesign& ad = fit.absorbed;
  if (static_cast<Index>(adjustments.size()) != ad.m())
    throw Error(ErrorCode::InvalidInput, "adjustment count mismatch");
  MatrixXd total = MatrixXd::Zero(ad.r(), ad.r());
  for (Index i = 0; i < ad.m(); ++i) {
    const VectorXd g = ad.blocks[i].w_focal.transpose() * (adjustments[i] * fit.residuals[i]);
    total.noalias() += g * g.transpose();
  }
  return SymMatrix(MatrixXd(ad.gram_inv_focal * total * ad.gram_inv_focal));
}

// Expectation of the sandwich when the errors truly have covariance blocks
// sigma: replaces each residual outer product with its exact expectation
// under the full-model residual projector.
inline SymMatrix expected_vcov(const FitResult& fit, const AdjustmentKind& kind,
                               const std::vector<SymMatrix>& sigma) {
  const AbsorbedDesign& ad = fit.absorbed;
  detail::AdjustmentBundle bundle = detail::build_adjustments(fit, kind);
  const MatrixXd pooled = ad.pooled_cross_gram(sigma);
  MatrixXd total = MatrixXd::Zero(ad.r(), ad.r());
  for (Index i = 0; i < ad.m(); ++i) {
    const MatrixXd mid = ad.residual_quad_block(i, sigma[i], pooled);
    const MatrixXd aw = bundle.A[i].transpose() * ad.blocks[i].w_focal;
    total.noalias() += aw.transpose() * mid * aw;
  }
  return SymMatrix(MatrixXd(ad.gram_inv_focal * total * ad.gram_inv_focal));
}

}  // namespace crvkit

#endif
