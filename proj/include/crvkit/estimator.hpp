#ifndef CRVKIT_ESTIMATOR_HPP
#define CRVKIT_ESTIMATOR_HPP

// Weighted least squares with fixed-effect absorption. The fixed effects are
// swept out in two stages: within-cluster columns first (block by block),
// then the between-cluster columns globally; the focal coefficients and their
// sandwich pieces never require forming the stacked N x N projector. All
// residual-projector algebra is exposed in factored per-cluster form:
//
//   row block i of (I - H_X) applied to block k is
//     delta_ik * P_i - J_i * b_k
//   with P_i the within-FE projector, J_i = [S_i M_S, R_i M_R] built from the
//   absorbed blocks, and b_k = [S_k' W_k; R_k' W_k].
//
// That identity is what residual_quad_block / residual_adjoint implement; it
// holds because the absorbed focal and between blocks are W-orthogonal to the
// within columns, so the trailing within projector collapses.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "crvkit/model_frame.hpp"

namespace crvkit {

namespace detail {

// Greedy selection of linearly independent columns from a PSD Gram matrix,
// processed in input order (outer-product Cholesky with drop on small pivot).
// ref_diag carries the squared column norms before any absorption; a column
// already swept to roundoff relative to its original size must be dropped
// even though its own Gram diagonal is then pure noise.
inline std::vector<Index> independent_columns(const MatrixXd& gram, const VectorXd& ref_diag,
                                              double rel_tol = 1e-10) {
  const Index d = gram.rows();
  MatrixXd g = gram;
  std::vector<Index> kept;
  for (Index j = 0; j < d; ++j) {
    const double ref = ref_diag(j);
    const double res = g(j, j);
    if (ref > 0.0 && res > rel_tol * ref) {
      kept.push_back(j);
      const VectorXd c = g.col(j);
      g -= c * c.transpose() / res;
    }
  }
  return kept;
}

inline std::vector<Index> independent_columns(const MatrixXd& gram, double rel_tol = 1e-10) {
  return independent_columns(gram, gram.diagonal(), rel_tol);
}

inline MatrixXd select_columns(const MatrixXd& a, const std::vector<Index>& idx) {
  MatrixXd out(a.rows(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Index>(j)) = a.col(idx[j]);
  return out;
}

inline MatrixXd sym_inverse_spd(const MatrixXd& gram, ErrorCode code, const std::string& what) {
  Eigen::LLT<MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) throw Error(code, what);
  MatrixXd inv = llt.solve(MatrixXd::Identity(gram.rows(), gram.cols()));
  return 0.5 * (inv + inv.transpose());
}

}  // namespace detail

struct AbsorbedBlock {
  // data blocks after absorption; `focal` and `between` are W-orthogonal
  MatrixXd focal;    // focal covariates, within and between effects swept out
  MatrixXd between;  // kept between-FE columns, within effects swept out
  MatrixXd varying;  // [within-swept focal, between]: the cluster-varying columns
  VectorXd outcome;

  // within-FE projector P = I - within * gram_inv_within * w_within'
  MatrixXd within;           // kept local within-FE columns (n_i x t_i)
  MatrixXd w_within;         // W_i * within
  MatrixXd gram_inv_within;  // (within' W within)^{-1}

  // cached sandwich pieces
  MatrixXd w_focal;    // W_i * focal
  MatrixXd w_between;  // W_i * between
  MatrixXd j_between;  // between * gram_inv_between
  MatrixXd j_focal;    // focal * gram_inv_focal

  Index rows = 0;
  Index n() const { return rows; }
};

class AbsorbedDesign {
 public:
  ClusteredDesign design;  // owned copy
  std::vector<AbsorbedBlock> blocks;
  MatrixXd gram_inv_focal;    // (focal' W focal)^{-1} pooled
  MatrixXd gram_inv_between;  // kept between columns
  MatrixXd gram_inv_varying;  // pooled over `varying`
  std::vector<Index> kept_between;           // indices into the original between columns
  std::vector<std::string> dropped_columns;  // rank-deficient absorbed columns, by name

  Index m() const { return design.m(); }
  Index r() const { return design.r; }
  Index s_kept() const { return static_cast<Index>(kept_between.size()); }

  // (I - H_T)_i v
  VectorXd project_within(Index i, const VectorXd& v) const {
    const AbsorbedBlock& b = blocks[i];
    if (b.within.cols() == 0) return v;
    return v - b.within * (b.gram_inv_within * (b.w_within.transpose() * v));
  }
  MatrixXd project_within(Index i, const MatrixXd& v) const {
    const AbsorbedBlock& b = blocks[i];
    if (b.within.cols() == 0) return v;
    return v - b.within * (b.gram_inv_within * (b.w_within.transpose() * v));
  }
  // (I - H_T)_i' v
  VectorXd project_within_adjoint(Index i, const VectorXd& v) const {
    const AbsorbedBlock& b = blocks[i];
    if (b.within.cols() == 0) return v;
    return v - b.w_within * (b.gram_inv_within * (b.within.transpose() * v));
  }

  // stacked [between, focal] helper blocks
  MatrixXd j_mat(Index i) const {
    const AbsorbedBlock& b = blocks[i];
    MatrixXd j(b.n(), s_kept() + r());
    j.leftCols(s_kept()) = b.j_between;
    j.rightCols(r()) = b.j_focal;
    return j;
  }
  MatrixXd b_mat(Index i) const {  // b_i' as an n_i x (s + r) block
    const AbsorbedBlock& b = blocks[i];
    MatrixXd bt(b.n(), s_kept() + r());
    bt.leftCols(s_kept()) = b.w_between;
    bt.rightCols(r()) = b.w_focal;
    return bt;
  }

  // pooled middle gram sum_k b_k Sigma_k b_k'
  MatrixXd pooled_cross_gram(const std::vector<SymMatrix>& sigma) const {
    check_sigma(sigma);
    const Index d = s_kept() + r();
    MatrixXd g = MatrixXd::Zero(d, d);
    for (Index k = 0; k < m(); ++k) {
      const MatrixXd bt = b_mat(k);
      g.noalias() += bt.transpose() * sigma[k].mat() * bt;
    }
    return 0.5 * (g + g.transpose());
  }

  // (I - H_X)_i Sigma (I - H_X)_i', without materializing the stacked matrix
  MatrixXd residual_quad_block(Index i, const SymMatrix& sigma_i, const MatrixXd& pooled) const {
    const AbsorbedBlock& b = blocks[i];
    if (sigma_i.dim() != b.n())
      throw Error(ErrorCode::InvalidInput, "covariance block dimension mismatch");
    const MatrixXd ps = project_within(i, sigma_i.mat());  // P Sigma
    MatrixXd psp = ps;
    if (b.within.cols() > 0)
      psp.noalias() -= (ps * b.w_within) * b.gram_inv_within * b.within.transpose();
    const MatrixXd j = j_mat(i);
    const MatrixXd bt = b_mat(i);
    const MatrixXd t2 = ps * bt * j.transpose();
    MatrixXd mid = psp - t2 - t2.transpose();
    mid.noalias() += j * pooled * j.transpose();
    return mid;
  }

  // (I - H_X)_i' v returned as per-cluster blocks (an N-vector in pieces)
  std::vector<VectorXd> residual_adjoint(Index i, const VectorXd& v) const {
    const VectorXd u = project_within_adjoint(i, v);
    const VectorXd w = j_mat(i).transpose() * v;
    std::vector<VectorXd> out(m());
    for (Index k = 0; k < m(); ++k) {
      out[k] = -(b_mat(k) * w);
      if (k == i) out[k] += u;
    }
    return out;
  }

  // absorb a fresh outcome through the stored projections
  std::vector<VectorXd> absorb_outcome(const std::vector<VectorXd>& y) const {
    if (static_cast<Index>(y.size()) != m())
      throw Error(ErrorCode::InvalidInput, "outcome block count mismatch");
    std::vector<VectorXd> yt(y.size());
    VectorXd coef_rhs = VectorXd::Zero(s_kept());
    for (Index i = 0; i < m(); ++i) {
      if (y[i].size() != blocks[i].n())
        throw Error(ErrorCode::InvalidInput, "outcome block size mismatch");
      yt[i] = project_within(i, y[i]);
      coef_rhs.noalias() += blocks[i].w_between.transpose() * yt[i];
    }
    const VectorXd coef = gram_inv_between * coef_rhs;
    for (Index i = 0; i < m(); ++i) yt[i].noalias() -= blocks[i].between * coef;
    return yt;
  }

 private:
  void check_sigma(const std::vector<SymMatrix>& sigma) const {
    if (static_cast<Index>(sigma.size()) != m())
      throw Error(ErrorCode::InvalidInput, "covariance block count mismatch");
    for (Index i = 0; i < m(); ++i)
      if (sigma[i].dim() != blocks[i].n())
        throw Error(ErrorCode::InvalidInput, "covariance block dimension mismatch in cluster '" +
                                                 design.clusters[i].id + "'");
  }
};

inline AbsorbedDesign absorb(const ClusteredDesign& input) {
  input.validate();
  AbsorbedDesign ad;
  ad.design = input;
  const ClusteredDesign& d = ad.design;
  const Index m = d.m();
  ad.blocks.resize(m);

  // Stage 1: within-cluster columns, swept per cluster.
  for (Index i = 0; i < m; ++i) {
    const ClusterBlock& c = d.clusters[i];
    AbsorbedBlock& b = ad.blocks[i];
    b.rows = c.n();
    std::vector<Index> local;
    for (Index j = 0; j < d.t; ++j)
      if (c.T.col(j).cwiseAbs().maxCoeff() > 0.0) local.push_back(j);
    MatrixXd tloc(c.n(), static_cast<Index>(local.size()));
    for (std::size_t j = 0; j < local.size(); ++j) tloc.col(static_cast<Index>(j)) = c.T.col(local[j]);
    const MatrixXd wt = c.W * tloc;
    const std::vector<Index> kept = detail::independent_columns(tloc.transpose() * wt);
    for (std::size_t j = 0; j < local.size(); ++j) {
      if (std::find(kept.begin(), kept.end(), static_cast<Index>(j)) == kept.end()) {
        const Index g = local[j];
        ad.dropped_columns.push_back(g < static_cast<Index>(d.t_column_names.size())
                                         ? d.t_column_names[g]
                                         : "T" + std::to_string(g));
      }
    }
    b.within = detail::select_columns(tloc, kept);
    b.w_within = c.W * b.within;
    if (!kept.empty())
      b.gram_inv_within = detail::sym_inverse_spd(
          b.within.transpose() * b.w_within, ErrorCode::InvalidInput,
          "within-FE gram not invertible in cluster '" + c.id + "'");
    else
      b.gram_inv_within.resize(0, 0);
  }

  // Stage 2: between columns, swept globally after the within pass.
  std::vector<MatrixXd> s_swept(m);
  {
    MatrixXd gram = MatrixXd::Zero(d.s, d.s);
    VectorXd ref = VectorXd::Zero(d.s);
    for (Index i = 0; i < m; ++i) {
      s_swept[i] = ad.project_within(i, d.clusters[i].S);
      gram.noalias() += s_swept[i].transpose() * d.clusters[i].W * s_swept[i];
      ref += (d.clusters[i].S.transpose() * d.clusters[i].W * d.clusters[i].S).diagonal();
    }
    ad.kept_between = detail::independent_columns(gram, ref);
    for (Index j = 0; j < d.s; ++j)
      if (std::find(ad.kept_between.begin(), ad.kept_between.end(), j) == ad.kept_between.end())
        ad.dropped_columns.push_back(j < static_cast<Index>(d.s_column_names.size())
                                         ? d.s_column_names[j]
                                         : "S" + std::to_string(j));
    MatrixXd kept_gram(ad.s_kept(), ad.s_kept());
    for (Index a = 0; a < ad.s_kept(); ++a)
      for (Index b = 0; b < ad.s_kept(); ++b) kept_gram(a, b) = gram(ad.kept_between[a], ad.kept_between[b]);
    ad.gram_inv_between = ad.s_kept() > 0
                              ? detail::sym_inverse_spd(kept_gram, ErrorCode::InvalidInput,
                                                        "between-FE gram not invertible")
                              : MatrixXd(0, 0);
  }

  // Focal columns: sweep within, then the kept between columns.
  std::vector<MatrixXd> r_swept(m);
  MatrixXd cross = MatrixXd::Zero(ad.s_kept(), d.r);
  for (Index i = 0; i < m; ++i) {
    const ClusterBlock& c = d.clusters[i];
    AbsorbedBlock& b = ad.blocks[i];
    r_swept[i] = ad.project_within(i, c.R);
    b.between = detail::select_columns(s_swept[i], ad.kept_between);
    b.w_between = c.W * b.between;
    cross.noalias() += b.w_between.transpose() * r_swept[i];
  }
  const MatrixXd coef = ad.s_kept() > 0 ? MatrixXd(ad.gram_inv_between * cross)
                                        : MatrixXd::Zero(0, d.r);
  MatrixXd gram_focal = MatrixXd::Zero(d.r, d.r);
  for (Index i = 0; i < m; ++i) {
    AbsorbedBlock& b = ad.blocks[i];
    b.focal = r_swept[i];
    if (ad.s_kept() > 0) b.focal.noalias() -= b.between * coef;
    b.w_focal = d.clusters[i].W * b.focal;
    b.varying.resize(b.n(), d.r + ad.s_kept());
    b.varying.leftCols(d.r) = r_swept[i];
    b.varying.rightCols(ad.s_kept()) = b.between;
    gram_focal.noalias() += b.focal.transpose() * b.w_focal;
  }

  {
    VectorXd ref = VectorXd::Zero(d.r);
    for (Index i = 0; i < m; ++i)
      ref += (d.clusters[i].R.transpose() * d.clusters[i].W * d.clusters[i].R).diagonal();
    const std::vector<Index> kept = detail::independent_columns(gram_focal, ref);
    if (static_cast<Index>(kept.size()) != d.r) {
      std::string names;
      for (Index j = 0; j < d.r; ++j)
        if (std::find(kept.begin(), kept.end(), j) == kept.end()) {
          if (!names.empty()) names += ", ";
          names += j < static_cast<Index>(d.column_names.size()) ? d.column_names[j]
                                                                 : "R" + std::to_string(j);
        }
      throw Error(ErrorCode::CollinearFocal,
                  "focal columns collinear with the fixed effects or each other: " + names);
    }
  }
  ad.gram_inv_focal = detail::sym_inverse_spd(gram_focal, ErrorCode::CollinearFocal,
                                              "focal gram not invertible");

  MatrixXd gram_varying = MatrixXd::Zero(d.r + ad.s_kept(), d.r + ad.s_kept());
  for (Index i = 0; i < m; ++i)
    gram_varying.noalias() += ad.blocks[i].varying.transpose() * d.clusters[i].W * ad.blocks[i].varying;
  ad.gram_inv_varying = detail::sym_inverse_spd(gram_varying, ErrorCode::InvalidInput,
                                                "cluster-varying gram not invertible");

  // Outcome and the remaining sandwich caches.
  std::vector<VectorXd> yblocks(m);
  for (Index i = 0; i < m; ++i) yblocks[i] = d.clusters[i].y;
  std::vector<VectorXd> ydd = ad.absorb_outcome(yblocks);
  for (Index i = 0; i < m; ++i) {
    AbsorbedBlock& b = ad.blocks[i];
    b.outcome = ydd[i];
    b.j_between = ad.s_kept() > 0 ? MatrixXd(b.between * ad.gram_inv_between)
                                  : MatrixXd::Zero(b.n(), 0);
    b.j_focal = b.focal * ad.gram_inv_focal;
  }
  return ad;
}

struct FitResult {
  VectorXd beta;
  std::vector<VectorXd> residuals;  // full-model residuals, per cluster
  AbsorbedDesign absorbed;
  const ClusteredDesign& design() const { return absorbed.design; }
};

inline FitResult fit_wls(AbsorbedDesign absorbed) {
  const Index m = absorbed.m();
  VectorXd rhs = VectorXd::Zero(absorbed.r());
  for (Index i = 0; i < m; ++i)
    rhs.noalias() += absorbed.blocks[i].w_focal.transpose() * absorbed.blocks[i].outcome;
  FitResult fit;
  fit.beta = absorbed.gram_inv_focal * rhs;
  fit.residuals.resize(m);
  for (Index i = 0; i < m; ++i)
    fit.residuals[i] = absorbed.blocks[i].outcome - absorbed.blocks[i].focal * fit.beta;
  fit.absorbed = std::move(absorbed);
  return fit;
}

inline FitResult fit(const ClusteredDesign& design) { return fit_wls(absorb(design)); }

// Re-solve an existing fit for a fresh outcome. The absorption, grams, and
// every sandwich cache depend only on the design, so a replicate loop over
// simulated outcomes pays for absorb() once.
inline void refit_outcome(FitResult& fit, const std::vector<VectorXd>& y) {
  AbsorbedDesign& ad = fit.absorbed;
  std::vector<VectorXd> ydd = ad.absorb_outcome(y);
  VectorXd rhs = VectorXd::Zero(ad.r());
  for (Index i = 0; i < ad.m(); ++i) {
    ad.blocks[i].outcome = std::move(ydd[i]);
    rhs.noalias() += ad.blocks[i].w_focal.transpose() * ad.blocks[i].outcome;
  }
  fit.beta = ad.gram_inv_focal * rhs;
  fit.residuals.resize(ad.m());
  for (Index i = 0; i < ad.m(); ++i)
    fit.residuals[i] = ad.blocks[i].outcome - ad.blocks[i].focal * fit.beta;
}

// Sampling covariance of the focal coefficients when the errors have the
// given per-cluster covariance blocks.
inline SymMatrix true_variance(const FitResult& fit, const std::vector<SymMatrix>& sigma) {
  const AbsorbedDesign& ad = fit.absorbed;
  if (static_cast<Index>(sigma.size()) != ad.m())
    throw Error(ErrorCode::InvalidInput, "covariance block count mismatch");
  MatrixXd meat = MatrixXd::Zero(ad.r(), ad.r());
  for (Index i = 0; i < ad.m(); ++i) {
    const AbsorbedBlock& b = ad.blocks[i];
    if (sigma[i].dim() != b.n())
      throw Error(ErrorCode::InvalidInput, "covariance block dimension mismatch in cluster '" +
                                               ad.design.clusters[i].id + "'");
    meat.noalias() += b.w_focal.transpose() * sigma[i].mat() * b.w_focal;
  }
  return SymMatrix(MatrixXd(ad.gram_inv_focal * meat * ad.gram_inv_focal));
}

}  // namespace crvkit

#endif
