#ifndef CRVKIT_MODEL_FRAME_HPP
#define CRVKIT_MODEL_FRAME_HPP

// Clustered design construction: groups rows by cluster, expands absorbed
// factors into indicators, and carries the block weight matrices. The design
// distinguishes three column groups: focal covariates (reported), absorbed
// between-cluster fixed effects, and absorbed within-cluster fixed effects
// (each indicator supported inside a single cluster).

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "crvkit/matkern.hpp"
#include "crvkit/table.hpp"

namespace crvkit {

struct ClusterBlock {
  std::string id;
  VectorXd y;
  MatrixXd R;  // focal covariates
  MatrixXd S;  // between-cluster fixed-effect columns
  MatrixXd T;  // within-cluster fixed-effect columns
  MatrixXd W;  // SPD weight block
  Index n() const { return y.size(); }
};

struct ClusteredDesign {
  std::vector<ClusterBlock> clusters;
  Index r = 0, s = 0, t = 0;
  std::vector<std::string> column_names;  // focal columns
  std::vector<std::string> s_column_names;
  std::vector<std::string> t_column_names;

  Index m() const { return static_cast<Index>(clusters.size()); }
  Index p() const { return r + s + t; }
  Index total_rows() const {
    Index n = 0;
    for (const auto& c : clusters) n += c.n();
    return n;
  }
  Index max_cluster_size() const {
    Index n = 0;
    for (const auto& c : clusters) n = std::max(n, c.n());
    return n;
  }

  // Structural invariants; throws on violation.
  void validate() const {
    if (clusters.empty()) throw Error(ErrorCode::DataError, "design has no clusters");
    for (const auto& c : clusters) {
      const Index n = c.n();
      if (n == 0) throw Error(ErrorCode::DataError, "cluster '" + c.id + "' is empty");
      if (c.R.rows() != n || c.R.cols() != r || c.S.rows() != n || c.S.cols() != s ||
          c.T.rows() != n || c.T.cols() != t || c.W.rows() != n || c.W.cols() != n)
        throw Error(ErrorCode::InvalidInput, "block dimensions inconsistent in cluster '" + c.id + "'");
      if (!c.y.allFinite() || !c.R.allFinite() || !c.S.allFinite() || !c.T.allFinite() ||
          !c.W.allFinite())
        throw Error(ErrorCode::DataError, "non-finite values in cluster '" + c.id + "'");
      if ((c.W - c.W.transpose()).cwiseAbs().maxCoeff() >
          1e-12 * std::max(1.0, c.W.cwiseAbs().maxCoeff()))
        throw Error(ErrorCode::InvalidInput, "weight block for cluster '" + c.id + "' is not symmetric");
      Eigen::LLT<MatrixXd> llt(c.W);
      if (llt.info() != Eigen::Success)
        throw Error(ErrorCode::NotPD, "weight block for cluster '" + c.id + "' is not positive definite");
    }
    // each within-cluster fixed-effect column may be supported in one cluster only
    for (Index j = 0; j < t; ++j) {
      int support = 0;
      for (const auto& c : clusters)
        if (c.T.col(j).cwiseAbs().maxCoeff() > 0.0) ++support;
      if (support > 1) {
        const std::string name =
            j < static_cast<Index>(t_column_names.size()) ? t_column_names[j] : std::to_string(j);
        throw Error(ErrorCode::DataError,
                    "within-cluster fixed-effect column '" + name + "' spans multiple clusters");
      }
    }
  }
};

// Working covariance family used by the bias-reduced adjustment.
struct WorkingModel {
  enum class Kind { Identity, CompoundSymmetric, UserBlocks };
  Kind kind = Kind::Identity;
  double rho = 0.0;
  double scale = 1.0;
  std::vector<SymMatrix> blocks;

  static WorkingModel identity(double scale = 1.0) {
    WorkingModel w;
    w.kind = Kind::Identity;
    w.scale = scale;
    return w;
  }
  static WorkingModel compound_symmetric(double rho, double scale = 1.0) {
    WorkingModel w;
    w.kind = Kind::CompoundSymmetric;
    w.rho = rho;
    w.scale = scale;
    return w;
  }
  static WorkingModel user_blocks(std::vector<SymMatrix> blocks) {
    WorkingModel w;
    w.kind = Kind::UserBlocks;
    w.blocks = std::move(blocks);
    return w;
  }
};

// Materialize the per-cluster working covariance blocks for a design.
inline std::vector<SymMatrix> working_covariance(const WorkingModel& wm,
                                                 const ClusteredDesign& design) {
  if (!(wm.scale > 0.0) || !std::isfinite(wm.scale))
    throw Error(ErrorCode::InvalidInput, "working model scale must be positive");
  std::vector<SymMatrix> out;
  out.reserve(design.clusters.size());
  switch (wm.kind) {
    case WorkingModel::Kind::Identity:
      for (const auto& c : design.clusters)
        out.emplace_back(MatrixXd(wm.scale * MatrixXd::Identity(c.n(), c.n())));
      break;
    case WorkingModel::Kind::CompoundSymmetric: {
      const Index maxn = design.max_cluster_size();
      if (maxn > 1) {
        const double lo = -1.0 / static_cast<double>(maxn - 1);
        if (!(wm.rho > lo) || !(wm.rho < 1.0))
          throw Error(ErrorCode::NotPSD,
                      "compound symmetry correlation " + std::to_string(wm.rho) +
                          " is outside (" + std::to_string(lo) + ", 1)");
      }
      for (const auto& c : design.clusters) {
        const Index n = c.n();
        MatrixXd phi = MatrixXd::Constant(n, n, wm.scale * wm.rho);
        phi.diagonal().setConstant(wm.scale);
        out.emplace_back(phi);
      }
      break;
    }
    case WorkingModel::Kind::UserBlocks: {
      if (static_cast<Index>(wm.blocks.size()) != design.m())
        throw Error(ErrorCode::InvalidInput,
                    "working model has " + std::to_string(wm.blocks.size()) + " blocks, design has " +
                        std::to_string(design.m()) + " clusters");
      for (Index i = 0; i < design.m(); ++i) {
        const auto& b = wm.blocks[i];
        if (b.dim() != design.clusters[i].n())
          throw Error(ErrorCode::InvalidInput, "working block dimension mismatch in cluster '" +
                                                   design.clusters[i].id + "'");
        Eigen::LLT<MatrixXd> llt(wm.scale * b.mat());
        if (llt.info() != Eigen::Success)
          throw Error(ErrorCode::NotPSD, "working covariance block for cluster '" +
                                             design.clusters[i].id + "' is not positive definite");
        out.emplace_back(MatrixXd(wm.scale * b.mat()));
      }
      break;
    }
  }
  return out;
}

// Linear hypothesis C beta = d on the focal coefficients. Rows must be
// linearly independent; rank deficiency is a caller error, not something we
// repair by dropping rows.
struct Constraint {
  MatrixXd C;
  VectorXd d;

  Index q() const { return C.rows(); }

  static Constraint rows(MatrixXd c, VectorXd rhs) {
    Constraint con;
    con.C = std::move(c);
    con.d = std::move(rhs);
    return con;
  }
  static Constraint single(VectorXd c, double rhs = 0.0) {
    Constraint con;
    con.C = c.transpose();
    con.d = VectorXd::Constant(1, rhs);
    return con;
  }
  // H0: the listed focal coefficients are all zero.
  static Constraint zero_coefficients(const std::vector<Index>& coefs, Index r) {
    Constraint con;
    con.C = MatrixXd::Zero(static_cast<Index>(coefs.size()), r);
    con.d = VectorXd::Zero(static_cast<Index>(coefs.size()));
    for (std::size_t k = 0; k < coefs.size(); ++k) {
      if (coefs[k] < 0 || coefs[k] >= r)
        throw Error(ErrorCode::InvalidInput,
                    "coefficient index " + std::to_string(coefs[k]) + " is out of range");
      con.C(static_cast<Index>(k), coefs[k]) = 1.0;
    }
    return con;
  }

  void validate(Index r) const {
    if (C.rows() < 1) throw Error(ErrorCode::InvalidInput, "constraint has no rows");
    if (C.cols() != r)
      throw Error(ErrorCode::InvalidInput, "constraint has " + std::to_string(C.cols()) +
                                               " columns for " + std::to_string(r) +
                                               " focal coefficients");
    if (d.size() != C.rows())
      throw Error(ErrorCode::InvalidInput, "constraint matrix and right-hand side disagree: " +
                                               std::to_string(C.rows()) + " rows vs " +
                                               std::to_string(d.size()) + " entries");
    if (!C.allFinite() || !d.allFinite())
      throw Error(ErrorCode::InvalidInput, "constraint has non-finite entries");
    Eigen::ColPivHouseholderQR<MatrixXd> qr(C);
    if (qr.rank() < C.rows())
      throw Error(ErrorCode::InvalidInput, "constraint rows are linearly dependent");
  }
};

// Moment estimate of a common within-cluster correlation from residuals:
// average cross product over within-cluster pairs divided by the average
// squared residual, clamped to the open region where compound symmetry is PD.
inline double estimate_rho(const std::vector<VectorXd>& residuals) {
  double n_total = 0.0, pairs = 0.0, ss = 0.0, cross = 0.0;
  Index maxn = 0;
  for (const auto& e : residuals) {
    const Index n = e.size();
    maxn = std::max(maxn, n);
    n_total += static_cast<double>(n);
    pairs += static_cast<double>(n) * static_cast<double>(n - 1);
    const double sum = e.sum();
    const double sq = e.squaredNorm();
    ss += sq;
    cross += sum * sum - sq;
  }
  if (pairs == 0.0)
    throw Error(ErrorCode::Underdetermined, "no within-cluster pairs to estimate a correlation from");
  if (n_total == 0.0) throw Error(ErrorCode::Underdetermined, "no residuals");
  const double sigma2 = ss / n_total;
  double rho = sigma2 > 0.0 ? cross / (pairs * sigma2) : 0.0;
  const double lo = -1.0 / static_cast<double>(maxn - 1) + 1e-6;
  const double hi = 1.0 - 1e-6;
  return std::clamp(rho, lo, hi);
}

// Cluster-demeaned copies of the named numeric columns, appended to the table
// as "<name>_within". Unweighted means.
inline Table within_deviations(const Table& data, const std::vector<std::string>& vars,
                               const std::string& cluster) {
  const std::vector<std::string> ids = data.labels(cluster);
  std::map<std::string, std::pair<double, double>> acc;  // id -> (sum, count)
  Table out = data;
  for (const std::string& var : vars) {
    const std::vector<double>& x = data.numeric(var);
    acc.clear();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::isnan(x[i]))
        throw Error(ErrorCode::DataError, "column '" + var + "' has a missing value");
      auto& a = acc[ids[i]];
      a.first += x[i];
      a.second += 1.0;
    }
    std::vector<double> dev(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto& a = acc[ids[i]];
      dev[i] = x[i] - a.first / a.second;
    }
    out.add_numeric(var + "_within", std::move(dev));
  }
  return out;
}

struct ModelSpec {
  std::string outcome;
  std::vector<std::string> covariates;
  std::vector<std::string> absorb_between;  // factors; first level dropped per factor
  std::vector<std::string> absorb_within;   // factors; all levels kept
  std::string cluster;
  std::string weights;  // empty for unweighted
};

namespace detail {

// Factor levels in first-appearance order.
inline std::vector<std::string> factor_levels(const std::vector<std::string>& labels) {
  std::vector<std::string> levels;
  for (const auto& l : labels)
    if (std::find(levels.begin(), levels.end(), l) == levels.end()) levels.push_back(l);
  return levels;
}

}  // namespace detail

inline ClusteredDesign build_design(const Table& data, const ModelSpec& spec) {
  if (data.nrows() == 0) throw Error(ErrorCode::DataError, "data has no rows");
  for (const std::string* name : {&spec.outcome, &spec.cluster}) {
    if (name->empty()) throw Error(ErrorCode::ConfigError, "outcome and cluster columns are required");
    if (!data.has(*name)) throw Error(ErrorCode::ConfigError, "column '" + *name + "' not found in data");
  }
  for (const auto& v : spec.covariates)
    if (!data.has(v)) throw Error(ErrorCode::ConfigError, "column '" + v + "' not found in data");
  for (const auto& v : spec.absorb_between)
    if (!data.has(v)) throw Error(ErrorCode::ConfigError, "column '" + v + "' not found in data");
  for (const auto& v : spec.absorb_within)
    if (!data.has(v)) throw Error(ErrorCode::ConfigError, "column '" + v + "' not found in data");
  if (!spec.weights.empty() && !data.has(spec.weights))
    throw Error(ErrorCode::ConfigError, "column '" + spec.weights + "' not found in data");
  for (std::size_t i = 0; i < spec.covariates.size(); ++i)
    for (std::size_t j = i + 1; j < spec.covariates.size(); ++j)
      if (spec.covariates[i] == spec.covariates[j])
        throw Error(ErrorCode::ConfigError, "duplicate covariate '" + spec.covariates[i] + "'");

  const std::size_t nrows = data.nrows();
  const std::vector<std::string> cluster_ids = data.labels(spec.cluster);
  const std::vector<std::string> cluster_levels = detail::factor_levels(cluster_ids);
  if (cluster_levels.size() < 2)
    throw Error(ErrorCode::DataError, "at least two clusters are required");

  // row indices per cluster, clusters in first-appearance order
  std::vector<std::vector<std::size_t>> rows(cluster_levels.size());
  {
    std::map<std::string, std::size_t> pos;
    for (std::size_t c = 0; c < cluster_levels.size(); ++c) pos[cluster_levels[c]] = c;
    for (std::size_t i = 0; i < nrows; ++i) rows[pos[cluster_ids[i]]].push_back(i);
  }

  const std::vector<double>& y = data.numeric(spec.outcome);
  std::vector<const std::vector<double>*> xcols;
  for (const auto& v : spec.covariates) xcols.push_back(&data.numeric(v));
  const std::vector<double>* w = spec.weights.empty() ? nullptr : &data.numeric(spec.weights);
  if (w)
    for (double wi : *w)
      if (!(wi > 0.0) || !std::isfinite(wi))
        throw Error(ErrorCode::DataError, "weights must be positive and finite");

  ClusteredDesign design;
  design.r = static_cast<Index>(spec.covariates.size());
  design.column_names = spec.covariates;

  // expand absorbed factors to indicator column descriptors
  struct FactorCol {
    const std::vector<std::string>* labels;
    std::string level;
  };
  std::vector<FactorCol> s_cols, t_cols;
  std::vector<std::vector<std::string>> label_store;
  label_store.reserve(spec.absorb_between.size() + spec.absorb_within.size());
  for (const auto& f : spec.absorb_between) {
    label_store.push_back(data.labels(f));
    const auto& labels = label_store.back();
    const auto levels = detail::factor_levels(labels);
    for (std::size_t l = 1; l < levels.size(); ++l) {  // first level dropped
      s_cols.push_back({&labels, levels[l]});
      design.s_column_names.push_back(f + "=" + levels[l]);
    }
  }
  for (const auto& f : spec.absorb_within) {
    label_store.push_back(data.labels(f));
    const auto& labels = label_store.back();
    const auto levels = detail::factor_levels(labels);
    for (const auto& level : levels) {
      t_cols.push_back({&labels, level});
      design.t_column_names.push_back(f + "=" + level);
    }
  }
  design.s = static_cast<Index>(s_cols.size());
  design.t = static_cast<Index>(t_cols.size());

  for (std::size_t c = 0; c < cluster_levels.size(); ++c) {
    const auto& idx = rows[c];
    const Index n = static_cast<Index>(idx.size());
    ClusterBlock blk;
    blk.id = cluster_levels[c];
    blk.y.resize(n);
    blk.R.resize(n, design.r);
    blk.S.resize(n, design.s);
    blk.T.resize(n, design.t);
    for (Index j = 0; j < n; ++j) {
      const std::size_t row = idx[j];
      blk.y(j) = y[row];
      for (Index k = 0; k < design.r; ++k) blk.R(j, k) = (*xcols[k])[row];
      for (Index k = 0; k < design.s; ++k)
        blk.S(j, k) = (*s_cols[k].labels)[row] == s_cols[k].level ? 1.0 : 0.0;
      for (Index k = 0; k < design.t; ++k)
        blk.T(j, k) = (*t_cols[k].labels)[row] == t_cols[k].level ? 1.0 : 0.0;
    }
    if (!blk.y.allFinite())
      throw Error(ErrorCode::DataError, "outcome has a missing value in cluster '" + blk.id + "'");
    if (!blk.R.allFinite())
      throw Error(ErrorCode::DataError, "covariates have a missing value in cluster '" + blk.id + "'");
    if (w) {
      VectorXd wd(n);
      for (Index j = 0; j < n; ++j) wd(j) = (*w)[idx[j]];
      blk.W = wd.asDiagonal();
    } else {
      blk.W = MatrixXd::Identity(n, n);
    }
    design.clusters.push_back(std::move(blk));
  }

  design.validate();
  return design;
}

}  // namespace crvkit

#endif
