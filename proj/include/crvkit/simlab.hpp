#ifndef CRVKIT_SIMLAB_HPP
#define CRVKIT_SIMLAB_HPP

// Monte Carlo harness for three-condition policy experiments. Six treatment
// allocation designs (randomized blocks, cluster randomized, and difference
// in differences, each in a balanced and an unbalanced variant) generate a
// trivariate equicorrelated outcome under a null of no condition effects;
// the stacked analytic model regresses all three outcomes on condition
// indicators with the design's fixed effects absorbed, and the experiment
// driver tabulates rejection rates of the cluster-robust tests.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "crvkit/inference.hpp"
#include "crvkit/table.hpp"

namespace crvkit {

// One pattern of treatment assignment shared by `clusters` clusters: each
// cluster observes units[h] of its n units under condition h+1.
struct SimGroup {
  Index clusters = 0;
  std::array<Index, 3> units = {0, 0, 0};
};

struct SimDesign {
  int id = 0;  // 1/2 randomized blocks, 3/4 cluster randomized, 5/6 diff-in-diff
  Index m = 0; // clusters
  Index n = 0; // units per cluster
  std::vector<SimGroup> groups;

  bool cluster_fixed_effects() const { return id == 1 || id == 2 || id == 5 || id == 6; }
  bool period_fixed_effects() const { return id >= 3; }

  Index group_of(Index cluster) const {
    Index at = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      at += groups[g].clusters;
      if (cluster < at) return static_cast<Index>(g);
    }
    throw Error(ErrorCode::InvalidInput, "cluster index out of range");
  }
  // condition (1..3) of unit j in a cluster of the given group
  int condition_of(Index group, Index unit) const {
    const std::array<Index, 3>& u = groups[group].units;
    if (unit < u[0]) return 1;
    if (unit < u[0] + u[1]) return 2;
    if (unit < u[0] + u[1] + u[2]) return 3;
    throw Error(ErrorCode::InvalidInput, "unit index out of range");
  }

  void validate() const {
    if (id < 1 || id > 6) throw Error(ErrorCode::ConfigError, "design id must be between 1 and 6");
    if (m < 2) throw Error(ErrorCode::ConfigError, "design needs at least two clusters");
    if (n < 1) throw Error(ErrorCode::ConfigError, "design needs at least one unit per cluster");
    if (groups.empty()) throw Error(ErrorCode::ConfigError, "design has no allocation groups");
    Index mtot = 0;
    std::array<Index, 3> seen = {0, 0, 0};
    for (const SimGroup& g : groups) {
      if (g.clusters < 1)
        throw Error(ErrorCode::ConfigError, "allocation group has no clusters");
      Index ntot = 0;
      for (int h = 0; h < 3; ++h) {
        if (g.units[h] < 0)
          throw Error(ErrorCode::ConfigError, "negative unit allocation");
        ntot += g.units[h];
        if (g.units[h] > 0) seen[h] += g.clusters;
      }
      if (ntot != n)
        throw Error(ErrorCode::ConfigError, "group allocation does not sum to the cluster size");
      mtot += g.clusters;
    }
    if (mtot != m)
      throw Error(ErrorCode::ConfigError, "group cluster counts do not sum to m");
    for (int h = 0; h < 3; ++h)
      if (seen[h] == 0)
        throw Error(ErrorCode::ConfigError,
                    "condition " + std::to_string(h + 1) + " is never observed");
  }
};

// Parameters of the data-generating process. The cluster-level random effect
// for condition h has variance tau2 and cross-condition covariance
// tau2 - sigma_delta2/2, so condition-effect differences have variance
// sigma_delta2; the unit-level errors have variance 1 - tau2 and correlation
// rho across the three outcomes of a unit.
struct SimParams {
  double tau2 = 0.15;
  double rho = 0.2;
  double sigma_delta2 = 0.0;
  Index reps = 1000;
  std::uint64_t seed = 0;
  std::vector<double> alphas = {0.05};

  void validate() const {
    if (!std::isfinite(tau2) || !std::isfinite(rho) || !std::isfinite(sigma_delta2))
      throw Error(ErrorCode::ConfigError, "simulation parameters must be finite");
    if (!(tau2 >= 0.0 && tau2 < 1.0))
      throw Error(ErrorCode::ConfigError, "intra-class correlation tau2 must lie in [0, 1)");
    if (!(sigma_delta2 >= 0.0))
      throw Error(ErrorCode::ConfigError, "treatment-effect variance must be non-negative");
    if (sigma_delta2 > 3.0 * tau2)
      throw Error(ErrorCode::ConfigError,
                  "treatment-effect variance above 3*tau2 makes the random-effect covariance "
                  "indefinite");
    if (!(rho >= -0.5 && rho <= 1.0))
      throw Error(ErrorCode::ConfigError,
                  "outcome correlation rho must lie in [-0.5, 1] for a valid error covariance");
    if (reps < 1) throw Error(ErrorCode::ConfigError, "reps must be positive");
    if (alphas.empty()) throw Error(ErrorCode::ConfigError, "at least one alpha level required");
    for (double a : alphas)
      if (!(a > 0.0 && a <= 1.0))
        throw Error(ErrorCode::ConfigError, "alpha levels must lie in (0, 1]");
  }
};

namespace detail {

// Largest-remainder rounding of total*shares to integers summing to total;
// ties in the fractional parts go to the lower index.
inline std::vector<Index> largest_remainder(Index total, const std::vector<double>& shares) {
  std::vector<Index> out(shares.size());
  std::vector<std::pair<double, std::size_t>> frac;
  Index used = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const double target = static_cast<double>(total) * shares[i];
    out[i] = static_cast<Index>(std::floor(target + 1e-9));
    used += out[i];
    frac.emplace_back(target - static_cast<double>(out[i]), i);
  }
  std::stable_sort(frac.begin(), frac.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (Index k = 0; k < total - used; ++k) out[frac[static_cast<std::size_t>(k)].second] += 1;
  return out;
}

}  // namespace detail

inline SimDesign make_design(int id, Index m, Index n) {
  if (id < 1 || id > 6) throw Error(ErrorCode::ConfigError, "design id must be between 1 and 6");
  if (m < 2) throw Error(ErrorCode::ConfigError, "design needs at least two clusters");
  if (n < 1) throw Error(ErrorCode::ConfigError, "design needs at least one unit per cluster");
  const double th = 1.0 / 3.0, sx = 1.0 / 6.0, nn = 1.0 / 9.0;
  std::vector<double> mshares;
  std::vector<std::array<double, 3>> nshares;
  switch (id) {
    case 1:  // every cluster splits n across the three conditions the same way
      mshares = {1.0};
      nshares = {{0.5, th, sx}};
      break;
    case 2:  // two allocation patterns, half the clusters each
      mshares = {0.5, 0.5};
      nshares = {{0.5, th, sx}, {th, 5.0 * nn, nn}};
      break;
    case 3:  // whole clusters assigned to one condition, equal arms
      mshares = {th, th, th};
      nshares = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
      break;
    case 4:  // whole clusters assigned to one condition, unequal arms
      mshares = {0.5, 0.3, 0.2};
      nshares = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
      break;
    case 5:  // half the clusters stay in condition 1, half see all three
      mshares = {0.5, 0.5};
      nshares = {{1.0, 0.0, 0.0}, {0.5, th, sx}};
      break;
    case 6:  // two thirds stay in condition 1, one third sees all three
      mshares = {2.0 * th, th};
      nshares = {{1.0, 0.0, 0.0}, {0.5, th, sx}};
      break;
  }
  const std::vector<Index> mg = detail::largest_remainder(m, mshares);
  SimDesign d;
  d.id = id;
  d.m = m;
  d.n = n;
  for (std::size_t g = 0; g < mg.size(); ++g) {
    if (mg[g] == 0)
      throw Error(ErrorCode::ConfigError, "cluster count m = " + std::to_string(m) +
                                              " leaves allocation group " + std::to_string(g + 1) +
                                              " of design " + std::to_string(id) + " empty");
    const std::vector<Index> alloc = detail::largest_remainder(
        n, {nshares[g][0], nshares[g][1], nshares[g][2]});
    for (int h = 0; h < 3; ++h)
      if (nshares[g][h] > 0.0 && alloc[h] == 0)
        throw Error(ErrorCode::ConfigError,
                    "cluster size n = " + std::to_string(n) + " gives no units to condition " +
                        std::to_string(h + 1) + " in group " + std::to_string(g + 1) +
                        " of design " + std::to_string(id));
    SimGroup grp;
    grp.clusters = mg[g];
    grp.units = {alloc[0], alloc[1], alloc[2]};
    d.groups.push_back(grp);
  }
  d.validate();
  return d;
}

namespace detail {

struct NormalSource {
  std::mt19937_64 engine;
  std::normal_distribution<double> normal;
  NormalSource(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    engine.seed(seq);
  }
  double operator()() { return normal(engine); }
};

// Mean-zero exchangeable trivariate normal from its covariance eigenvalues:
// lam_mean on the equal-weights direction, lam_dev on its complement. Exact
// for every PSD pair, including lam_dev = 0 where the components coincide.
inline std::array<double, 3> exchangeable3(double lam_mean, double lam_dev, NormalSource& src) {
  const double z0 = src(), z1 = src(), z2 = src();
  const double zbar = (z0 + z1 + z2) / 3.0;
  const double a = std::sqrt(lam_mean) * zbar;
  const double b = std::sqrt(lam_dev);
  return {a + b * (z0 - zbar), a + b * (z1 - zbar), a + b * (z2 - zbar)};
}

// Stacked 3n-vector of outcomes per cluster for one replicate, outcomes in
// k-major order (rows k*n + j). The stream is seeded from (seed, rep) alone,
// and consumption order is fixed: three condition-effect normals per cluster,
// then three error normals per unit.
inline std::vector<VectorXd> draw_stacked_outcomes(const SimDesign& d, const SimParams& p,
                                                   Index rep) {
  if (rep < 0) throw Error(ErrorCode::InvalidInput, "replicate index must be non-negative");
  NormalSource src(p.seed, static_cast<std::uint64_t>(rep));
  const double lam_nu_mean = 3.0 * p.tau2 - p.sigma_delta2;
  const double lam_nu_dev = 0.5 * p.sigma_delta2;
  const double lam_eps_mean = (1.0 - p.tau2) * (1.0 + 2.0 * p.rho);
  const double lam_eps_dev = (1.0 - p.tau2) * (1.0 - p.rho);
  std::vector<VectorXd> out;
  out.reserve(static_cast<std::size_t>(d.m));
  const Index n = d.n;
  for (std::size_t g = 0; g < d.groups.size(); ++g) {
    for (Index c = 0; c < d.groups[g].clusters; ++c) {
      const std::array<double, 3> nu = exchangeable3(lam_nu_mean, lam_nu_dev, src);
      VectorXd y(3 * n);
      for (Index j = 0; j < n; ++j) {
        const std::array<double, 3> eps = exchangeable3(lam_eps_mean, lam_eps_dev, src);
        const int h = d.condition_of(static_cast<Index>(g), j);
        for (Index k = 0; k < 3; ++k) y(k * n + j) = nu[static_cast<std::size_t>(h - 1)] + eps[static_cast<std::size_t>(k)];
      }
      out.push_back(std::move(y));
    }
  }
  return out;
}

}  // namespace detail

// One replicate as a table: one row per (cluster, unit) with the three
// outcome columns, the condition label, and ready-made condition indicators.
inline Table simulate_outcomes(const SimDesign& d, const SimParams& p, Index rep_index) {
  d.validate();
  p.validate();
  const std::vector<VectorXd> blocks = detail::draw_stacked_outcomes(d, p, rep_index);
  const std::size_t rows = static_cast<std::size_t>(d.m * d.n);
  std::vector<double> cluster, group, period, condition, cond2, cond3, y1, y2, y3;
  for (auto* v : {&cluster, &group, &period, &condition, &cond2, &cond3, &y1, &y2, &y3})
    v->reserve(rows);
  Index c = 0;
  for (std::size_t g = 0; g < d.groups.size(); ++g) {
    for (Index gc = 0; gc < d.groups[g].clusters; ++gc, ++c) {
      for (Index j = 0; j < d.n; ++j) {
        const int h = d.condition_of(static_cast<Index>(g), j);
        cluster.push_back(static_cast<double>(c + 1));
        group.push_back(static_cast<double>(g + 1));
        period.push_back(static_cast<double>(j + 1));
        condition.push_back(static_cast<double>(h));
        cond2.push_back(h == 2 ? 1.0 : 0.0);
        cond3.push_back(h == 3 ? 1.0 : 0.0);
        y1.push_back(blocks[static_cast<std::size_t>(c)](0 * d.n + j));
        y2.push_back(blocks[static_cast<std::size_t>(c)](1 * d.n + j));
        y3.push_back(blocks[static_cast<std::size_t>(c)](2 * d.n + j));
      }
    }
  }
  Table t;
  t.add_numeric("cluster", std::move(cluster));
  t.add_numeric("group", std::move(group));
  t.add_numeric("period", std::move(period));
  t.add_numeric("condition", std::move(condition));
  t.add_numeric("cond2", std::move(cond2));
  t.add_numeric("cond3", std::move(cond3));
  t.add_numeric("y1", std::move(y1));
  t.add_numeric("y2", std::move(y2));
  t.add_numeric("y3", std::move(y3));
  return t;
}

struct SimHypothesis {
  std::string name;
  Constraint constraint;
  Index q() const { return constraint.q(); }
};

struct SimModel {
  ClusteredDesign model;
  std::vector<SimHypothesis> hypotheses;
};

struct SimModelOptions {
  // one period effect per time point shared by the three outcomes (default),
  // or a separate period effect per outcome
  bool per_outcome_periods = false;
};

namespace detail {

// Model structure for a design with all outcomes zeroed: the three outcomes
// stacked per cluster (k-major), condition-by-outcome effect indicators with
// condition 1 as the reference, outcome intercepts plus optional period
// effects as between-cluster columns, and cluster indicators as
// within-cluster columns where the design calls for them.
inline SimModel sim_frame(const SimDesign& d, const SimModelOptions& opts) {
  d.validate();
  const Index n = d.n;
  const Index nper = d.period_fixed_effects() ? n - 1 : 0;  // periods 2..n
  const Index s = 3 + (opts.per_outcome_periods ? 3 * nper : nper);
  const Index t = d.cluster_fixed_effects() ? d.m : 0;

  SimModel sm;
  ClusteredDesign& cd = sm.model;
  cd.r = 6;
  cd.s = s;
  cd.t = t;
  cd.column_names = {"c2_y1", "c2_y2", "c2_y3", "c3_y1", "c3_y2", "c3_y3"};
  for (Index k = 0; k < 3; ++k) cd.s_column_names.push_back("y" + std::to_string(k + 1) + "_mean");
  if (nper > 0) {
    if (opts.per_outcome_periods) {
      for (Index k = 0; k < 3; ++k)
        for (Index j = 1; j < n; ++j)
          cd.s_column_names.push_back("y" + std::to_string(k + 1) + "_period" +
                                      std::to_string(j + 1));
    } else {
      for (Index j = 1; j < n; ++j) cd.s_column_names.push_back("period" + std::to_string(j + 1));
    }
  }
  for (Index i = 0; i < t; ++i) cd.t_column_names.push_back("cluster" + std::to_string(i + 1));

  Index c = 0;
  for (std::size_t g = 0; g < d.groups.size(); ++g) {
    for (Index gc = 0; gc < d.groups[g].clusters; ++gc, ++c) {
      ClusterBlock b;
      b.id = std::to_string(c + 1);
      b.y = VectorXd::Zero(3 * n);
      b.R = MatrixXd::Zero(3 * n, 6);
      b.S = MatrixXd::Zero(3 * n, s);
      b.T = MatrixXd::Zero(3 * n, t);
      b.W = MatrixXd::Identity(3 * n, 3 * n);
      for (Index k = 0; k < 3; ++k) {
        for (Index j = 0; j < n; ++j) {
          const Index row = k * n + j;
          const int h = d.condition_of(static_cast<Index>(g), j);
          if (h >= 2) b.R(row, static_cast<Index>(h - 2) * 3 + k) = 1.0;
          b.S(row, k) = 1.0;
          if (nper > 0 && j >= 1)
            b.S(row, 3 + (opts.per_outcome_periods ? k * nper : 0) + (j - 1)) = 1.0;
          if (t > 0) b.T(row, c) = 1.0;
        }
      }
      cd.clusters.push_back(std::move(b));
    }
  }

  const auto zero = [](std::vector<Index> idx) {
    return Constraint::zero_coefficients(idx, 6);
  };
  sm.hypotheses = {
      {"cond2_y1", zero({0})},           // condition 2 effect on outcome 1
      {"cond3_y1", zero({3})},           // condition 3 effect on outcome 1
      {"joint_y1", zero({0, 3})},        // any condition effect on outcome 1
      {"cond2_all", zero({0, 1, 2})},    // condition 2 effect on any outcome
      {"cond3_all", zero({3, 4, 5})},    // condition 3 effect on any outcome
      {"joint_all", zero({0, 1, 2, 3, 4, 5})},
  };
  return sm;
}

}  // namespace detail

// Assemble the stacked analytic model for a simulated dataset. The table must
// come from simulate_outcomes for the same design: rows cluster-major with
// periods 1..n and the design's condition pattern.
inline SimModel build_sim_model(const SimDesign& d, const Table& data,
                                const SimModelOptions& opts = {}) {
  SimModel sm = detail::sim_frame(d, opts);
  const std::size_t rows = data.nrows();
  if (rows != static_cast<std::size_t>(d.m * d.n))
    throw Error(ErrorCode::DataError, "dataset has " + std::to_string(rows) + " rows, design " +
                                          std::to_string(d.id) + " expects " +
                                          std::to_string(d.m * d.n));
  const std::vector<std::string> cl = data.labels("cluster");
  const std::vector<double>& period = data.numeric("period");
  const std::vector<double>& condition = data.numeric("condition");
  const std::vector<double>& y1 = data.numeric("y1");
  const std::vector<double>& y2 = data.numeric("y2");
  const std::vector<double>& y3 = data.numeric("y3");
  const Index n = d.n;
  for (Index c = 0; c < d.m; ++c) {
    ClusterBlock& b = sm.model.clusters[static_cast<std::size_t>(c)];
    const Index g = d.group_of(c);
    for (Index j = 0; j < n; ++j) {
      const std::size_t row = static_cast<std::size_t>(c * n + j);
      if (cl[row] != b.id || period[row] != static_cast<double>(j + 1) ||
          condition[row] != static_cast<double>(d.condition_of(g, j)))
        throw Error(ErrorCode::DataError,
                    "dataset row " + std::to_string(row + 1) +
                        " does not match the design's cluster/period/condition layout");
      b.y(0 * n + j) = y1[row];
      b.y(1 * n + j) = y2[row];
      b.y(2 * n + j) = y3[row];
    }
  }
  return sm;
}

// One output row of a rejection-rate experiment: the fraction of replicates
// with p < alpha for one (cell, hypothesis, method, alpha) combination.
// Replicates whose test failed are excluded from the denominator and counted
// in `failures`; an all-failed row reports NaN rates.
struct RejectionRow {
  int design = 0;
  Index m = 0;
  Index n = 0;
  double tau2 = 0.0;
  double rho = 0.0;
  double sigma_delta2 = 0.0;
  std::string hypothesis;
  Index q = 0;
  TestMethod method = TestMethod::AHT;
  double alpha = 0.0;
  Index reps = 0;
  Index failures = 0;
  double reject_rate = 0.0;
  double mc_se = 0.0;
};

// Grid of simulation cells. Every combination of design, cluster count,
// cluster size, and parameter level is run with the same replicate seeds.
struct ExperimentConfig {
  std::vector<int> designs = {1, 2, 3, 4, 5, 6};
  std::vector<Index> cluster_counts = {15};
  std::vector<Index> cluster_sizes = {18};
  std::vector<double> tau2 = {0.15};
  std::vector<double> rho = {0.2};
  std::vector<double> sigma_delta2 = {0.01};
  std::vector<TestMethod> methods = {TestMethod::AHT, TestMethod::Standard};
  std::vector<double> alphas = {0.05};
  Index reps = 1000;
  std::uint64_t seed = 0;
  int threads = 1;
  bool per_outcome_periods = false;

  void validate() const {
    if (designs.empty() || cluster_counts.empty() || cluster_sizes.empty() || tau2.empty() ||
        rho.empty() || sigma_delta2.empty())
      throw Error(ErrorCode::ConfigError, "experiment grid has an empty dimension");
    if (methods.empty()) throw Error(ErrorCode::ConfigError, "at least one test method required");
    if (threads < 1) throw Error(ErrorCode::ConfigError, "thread count must be positive");
    SimParams probe;
    probe.reps = reps;
    probe.seed = seed;
    probe.alphas = alphas;
    for (double t2 : tau2)
      for (double r : rho)
        for (double s2 : sigma_delta2) {
          probe.tau2 = t2;
          probe.rho = r;
          probe.sigma_delta2 = s2;
          probe.validate();
        }
  }

  std::size_t cells() const {
    return designs.size() * cluster_counts.size() * cluster_sizes.size() * tau2.size() *
           rho.size() * sigma_delta2.size();
  }

  // the complete 648-condition grid; expensive, meant for explicit opt-in
  static ExperimentConfig full_grid() {
    ExperimentConfig c;
    c.designs = {1, 2, 3, 4, 5, 6};
    c.cluster_counts = {15, 30, 50};
    c.cluster_sizes = {18, 30};
    c.tau2 = {0.05, 0.15, 0.25};
    c.rho = {0.2, 0.8};
    c.sigma_delta2 = {0.0, 0.01, 0.04};
    c.methods = {TestMethod::AHT, TestMethod::Standard};
    c.alphas = {0.01, 0.05, 0.10};
    c.reps = 10000;
    return c;
  }
};

namespace detail {

// The variance estimator each method is reported with: the AHT test uses the
// bias-reduced adjustments under the independence working model, while the
// Standard and Chi2 comparison tests use the conventional m/(m-1)-scaled
// sandwich.
inline bool method_uses_cr2(TestMethod m) { return m == TestMethod::AHT; }

inline void run_cell(const ExperimentConfig& cfg, int id, Index mclusters, Index nunits,
                     const SimParams& params, std::vector<RejectionRow>& rows) {
  const SimDesign sd = make_design(id, mclusters, nunits);
  SimModelOptions mopts;
  mopts.per_outcome_periods = cfg.per_outcome_periods;
  const SimModel frame = sim_frame(sd, mopts);
  const FitResult fit0 = fit(frame.model);

  bool want_cr2 = false, want_cr1 = false;
  for (TestMethod m : cfg.methods) (method_uses_cr2(m) ? want_cr2 : want_cr1) = true;

  const std::size_t nh = frame.hypotheses.size();
  std::vector<MatrixXd> a_cr2, a_cr1;
  std::vector<double> eta(nh, std::numeric_limits<double>::quiet_NaN());
  if (want_cr2) {
    a_cr2 = adjustment_matrices(fit0, AdjustmentKind::cr2());
    // the degrees of freedom depend only on the design, adjustments, and
    // working covariance, so they are computed once and reused by every
    // replicate
    const std::vector<SymMatrix> phi = working_covariance(WorkingModel::identity(), frame.model);
    for (std::size_t h = 0; h < nh; ++h)
      eta[h] = aht_df_with(fit0, a_cr2, phi, frame.hypotheses[h].constraint).eta;
  }
  if (want_cr1) a_cr1 = adjustment_matrices(fit0, AdjustmentKind::cr1());

  const std::size_t nm = cfg.methods.size();
  const Index reps = cfg.reps;
  std::vector<double> pvals(static_cast<std::size_t>(reps) * nh * nm,
                            std::numeric_limits<double>::quiet_NaN());

  const int workers =
      static_cast<int>(std::min<Index>(static_cast<Index>(cfg.threads), reps));
  std::atomic<Index> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  auto work = [&](int w) {
    try {
      FitResult wfit = fit0;
      for (Index rep = next.fetch_add(1); rep < reps; rep = next.fetch_add(1)) {
        const std::vector<VectorXd> y = draw_stacked_outcomes(sd, params, rep);
        refit_outcome(wfit, y);
        SymMatrix v2, v1;
        if (want_cr2) v2 = vcov_matrix_with_adjustments(wfit, a_cr2);
        if (want_cr1) v1 = vcov_matrix_with_adjustments(wfit, a_cr1);
        for (std::size_t h = 0; h < nh; ++h) {
          const SimHypothesis& hyp = frame.hypotheses[h];
          const double nan = std::numeric_limits<double>::quiet_NaN();
          double q2 = nan, q1 = nan;
          if (want_cr2)
            try {
              q2 = wald_statistic(wfit.beta, v2, hyp.constraint);
            } catch (const Error&) {
            }
          if (want_cr1)
            try {
              q1 = wald_statistic(wfit.beta, v1, hyp.constraint);
            } catch (const Error&) {
            }
          for (std::size_t mi = 0; mi < nm; ++mi) {
            double p = nan;
            const double qstat = method_uses_cr2(cfg.methods[mi]) ? q2 : q1;
            if (!std::isnan(qstat)) {
              try {
                switch (cfg.methods[mi]) {
                  case TestMethod::AHT: p = aht_test(qstat, hyp.q(), eta[h]).p; break;
                  case TestMethod::Standard: p = standard_test(qstat, hyp.q(), sd.m).p; break;
                  case TestMethod::Chi2: p = chi2_test(qstat, hyp.q()).p; break;
                }
              } catch (const Error&) {
              }
            }
            pvals[(static_cast<std::size_t>(rep) * nh + h) * nm + mi] = p;
          }
        }
      }
    } catch (...) {
      errors[static_cast<std::size_t>(w)] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);

  // deterministic reduction in replicate order, then row emission in
  // hypothesis/method/alpha order
  for (std::size_t h = 0; h < nh; ++h) {
    for (std::size_t mi = 0; mi < nm; ++mi) {
      Index failures = 0;
      std::vector<Index> hits(cfg.alphas.size(), 0);
      for (Index rep = 0; rep < reps; ++rep) {
        const double p = pvals[(static_cast<std::size_t>(rep) * nh + h) * nm + mi];
        if (std::isnan(p)) {
          ++failures;
          continue;
        }
        for (std::size_t a = 0; a < cfg.alphas.size(); ++a)
          if (p < cfg.alphas[a]) ++hits[a];
      }
      const Index denom = reps - failures;
      for (std::size_t a = 0; a < cfg.alphas.size(); ++a) {
        RejectionRow row;
        row.design = id;
        row.m = mclusters;
        row.n = nunits;
        row.tau2 = params.tau2;
        row.rho = params.rho;
        row.sigma_delta2 = params.sigma_delta2;
        row.hypothesis = frame.hypotheses[h].name;
        row.q = frame.hypotheses[h].q();
        row.method = cfg.methods[mi];
        row.alpha = cfg.alphas[a];
        row.reps = reps;
        row.failures = failures;
        if (denom > 0) {
          const double r = static_cast<double>(hits[a]) / static_cast<double>(denom);
          row.reject_rate = r;
          row.mc_se = std::sqrt(r * (1.0 - r) / static_cast<double>(denom));
        } else {
          row.reject_rate = std::numeric_limits<double>::quiet_NaN();
          row.mc_se = std::numeric_limits<double>::quiet_NaN();
        }
        rows.push_back(std::move(row));
      }
    }
  }
}

}  // namespace detail

// Rejection rates over the configured grid. Within a cell the adjustments
// and degrees of freedom are outcome-independent and hoisted; replicates run
// in parallel and are reduced by replicate index, so the table is identical
// for any worker count.
inline std::vector<RejectionRow> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<RejectionRow> rows;
  SimParams params;
  params.reps = cfg.reps;
  params.seed = cfg.seed;
  params.alphas = cfg.alphas;
  for (int id : cfg.designs)
    for (Index m : cfg.cluster_counts)
      for (Index n : cfg.cluster_sizes)
        for (double t2 : cfg.tau2)
          for (double r : cfg.rho)
            for (double s2 : cfg.sigma_delta2) {
              params.tau2 = t2;
              params.rho = r;
              params.sigma_delta2 = s2;
              detail::run_cell(cfg, id, m, n, params, rows);
            }
  return rows;
}

}  // namespace crvkit

#endif
