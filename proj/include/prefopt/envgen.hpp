#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "prefopt/domain.hpp"
#include "prefopt/error.hpp"
#include "prefopt/mdp.hpp"
#include "prefopt/rng.hpp"

namespace prefopt {

enum class FeatureMode { generic, zero_mean_full_rank, nested_column_space };

inline const char* to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::generic: return "generic";
    case FeatureMode::zero_mean_full_rank: return "zero_mean_full_rank";
    case FeatureMode::nested_column_space: return "nested_column_space";
  }
  return "generic";
}

inline FeatureMode feature_mode_from_string(const std::string& s) {
  if (s == "generic") return FeatureMode::generic;
  if (s == "zero_mean_full_rank") return FeatureMode::zero_mean_full_rank;
  if (s == "nested_column_space" || s == "nested") return FeatureMode::nested_column_space;
  throw InvalidArgument("unknown feature_mode '" + s + "'");
}

struct InstanceConfig {
  int X = 10;
  int Y = 4;
  int d_R = 4;
  int d_P = 4;
  int d_M = 0;
  double F = 1.0;
  double B = 1.0;
  double B_occ = 1.0;  ///< B'
  double beta = 1.0;
  bool realizable = true;
  double epsilon_app = 0.0;
  FeatureMode feature_mode = FeatureMode::generic;
  std::uint64_t seed = 0;
  double mu_norm = 0.5;    ///< ||theta_mu||, clipped to B
  double gamma = 0.9;      ///< MDP only
  double tail_tol = 1e-6;  ///< MDP only: gamma^H / (1 - gamma) <= tail_tol

  void validate() const {
    require(X > 0 && Y > 0, "InstanceConfig: X and Y must be positive");
    require(d_R > 0 && d_P > 0, "InstanceConfig: d_R and d_P must be positive");
    require(d_R <= X * Y, "InstanceConfig: d_R must not exceed X*Y");
    require(F > 0 && B > 0 && B_occ > 0, "InstanceConfig: norm caps must be positive");
    require(beta > 0, "InstanceConfig: beta must be positive");
    require(epsilon_app >= 0, "InstanceConfig: epsilon_app must be nonnegative");
    require(realizable || epsilon_app > 0, "InstanceConfig: nonrealizable mode needs epsilon_app > 0");
    require(realizable || epsilon_app < 0.5, "InstanceConfig: epsilon_app must be below 1/2");
    if (feature_mode == FeatureMode::nested_column_space)
      require(d_R <= d_P, "InstanceConfig: nested mode needs d_R <= d_P");
    require(mu_norm >= 0, "InstanceConfig: mu_norm must be nonnegative");
  }
};

struct BanditInstance {
  InstanceConfig config;
  FeatureSystem features;
  MatrixXd true_reward;      ///< r*(x,y), X x Y
  LinearReward reward_fit;   ///< omega*; exact when realizable, least-squares fit otherwise
  LoglinearPolicy mu;
  TabularPolicy mu_table;
  MatrixXd log_mu;           ///< log mu(y|x) from logits
  VectorXd rho;
  bool realizable = true;
  double epsilon_measured = 0.0;  ///< ||r* - r_{omega*}||_inf
};

namespace detail {

/// Divides the matrix by its largest column norm.
inline MatrixXd unit_scale(MatrixXd m) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < m.cols(); ++j) s = std::max(s, m.col(j).norm());
  if (s > 0) m /= s;
  return m;
}

inline MatrixXd abs_normal(Rng& rng, int rows, int cols) { return rng.normal_matrix(rows, cols).cwiseAbs(); }

/// Orthonormal basis (columns) of the row space of m.
inline MatrixXd row_space_basis(const MatrixXd& m, double rel_tol = 1e-10) {
  Eigen::JacobiSVD<MatrixXd> svd(m.transpose(), Eigen::ComputeThinU);
  const VectorXd& s = svd.singularValues();
  if (s.size() == 0 || s[0] == 0.0) return MatrixXd(m.cols(), 0);
  Eigen::Index k = 0;
  while (k < s.size() && s[k] > rel_tol * s[0]) ++k;
  return svd.matrixU().leftCols(k);
}

inline MatrixXd orthonormal_columns(const MatrixXd& m, double tol = 1e-8) {
  if (m.cols() == 0) return m;
  Eigen::JacobiSVD<MatrixXd> svd(m, Eigen::ComputeThinU);
  const VectorXd& s = svd.singularValues();
  Eigen::Index k = 0;
  while (k < s.size() && s[k] > tol * std::max(1.0, s[0])) ++k;
  return svd.matrixU().leftCols(k);
}

inline MatrixXd flat_to_table(const VectorXd& flat, int X, int Y) {
  return Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(flat.data(), X, Y);
}

inline VectorXd table_to_flat(const MatrixXd& t) {
  Eigen::Matrix<double, -1, -1, Eigen::RowMajor> rm = t;
  return Eigen::Map<const VectorXd>(rm.data(), rm.size());
}

}  // namespace detail

/**
 * Builds a synthetic bandit instance. Features are nonnegative (absolute
 * Gaussians, rescaled so the largest column has unit norm) and the reward
 * direction is nonnegative, which keeps r = omega^T phi inside [0, 1] by
 * scaling omega alone. zero_mean_full_rank replaces psi by centred Gaussians;
 * nested_column_space builds phi = M psi so every row of phi lies in the row
 * space of psi.
 */
inline BanditInstance make_bandit_instance(const InstanceConfig& cfg) {
  cfg.validate();
  const int X = cfg.X, Y = cfg.Y, XY = X * Y;
  Rng root(cfg.seed);
  Rng rf = root.derive("features");
  Rng rr = root.derive("reward");
  Rng rm = root.derive("mu");

  BanditInstance inst;
  inst.config = cfg;
  inst.realizable = cfg.realizable;
  FeatureSystem& f = inst.features;
  f.X = X;
  f.Y = Y;

  if (cfg.feature_mode == FeatureMode::zero_mean_full_rank) {
    require(cfg.d_P <= XY - 1, "make_bandit_instance: zero-mean full-rank psi needs d_P <= X*Y - 1");
    MatrixXd g = rf.normal_matrix(cfg.d_P, XY);
    VectorXd mean = g.rowwise().mean();
    g.colwise() -= mean;
    f.psi = detail::unit_scale(g);
    Eigen::FullPivLU<MatrixXd> lu(f.psi);
    lu.setThreshold(1e-10);
    if (lu.rank() != cfg.d_P) throw InvalidArgument("make_bandit_instance: failed to draw full-rank psi");
  } else {
    f.psi = detail::unit_scale(detail::abs_normal(rf, cfg.d_P, XY));
  }

  if (cfg.feature_mode == FeatureMode::nested_column_space) {
    MatrixXd M = MatrixXd::Identity(cfg.d_R, cfg.d_P);
    for (int j = 0; j < cfg.d_P; ++j)
      for (int i = 0; i < cfg.d_R; ++i) M(i, j) += 0.3 * rf.uniform();
    f.phi = detail::unit_scale(M * f.psi);
  } else {
    f.phi = detail::unit_scale(detail::abs_normal(rf, cfg.d_R, XY));
  }

  VectorXd v(cfg.d_R);
  for (int i = 0; i < cfg.d_R; ++i) v[i] = std::abs(rr.normal());
  v /= v.norm();
  VectorXd rv = f.phi.transpose() * v;
  double hi = rv.maxCoeff(), lo = rv.minCoeff();
  const double eps = cfg.realizable ? 0.0 : cfg.epsilon_app;
  double a = std::min(cfg.F, (1.0 - eps) / hi);
  if (!cfg.realizable && a * lo < eps)
    throw InvalidArgument("make_bandit_instance: reward spread too wide to embed the requested epsilon_app");
  inst.reward_fit.omega = a * v;
  inst.reward_fit.F = cfg.F;
  VectorXd r_lin = f.phi.transpose() * inst.reward_fit.omega;

  VectorXd delta = VectorXd::Zero(XY);
  if (!cfg.realizable) {
    // Perturbation orthogonal to the row space of phi; preferably inside the
    // row space of psi so the regularised optimum stays loglinear.
    MatrixXd Qphi = detail::row_space_basis(f.phi);
    MatrixXd Qpsi = detail::row_space_basis(f.psi);
    MatrixXd S = detail::orthonormal_columns(Qpsi - Qphi * (Qphi.transpose() * Qpsi));
    auto project = [&](const VectorXd& t) -> VectorXd {
      if (S.cols() > 0) return S * (S.transpose() * t);
      return t - Qphi * (Qphi.transpose() * t);
    };
    // Target: swap the two best actions of each context.
    VectorXd target = VectorXd::Zero(XY);
    for (int x = 0; x < X; ++x) {
      if (Y < 2) break;
      std::vector<int> order(Y);
      for (int y = 0; y < Y; ++y) order[y] = y;
      std::stable_sort(order.begin(), order.end(),
                       [&](int p, int q) { return r_lin[x * Y + p] > r_lin[x * Y + q]; });
      target[x * Y + order[0]] = -1.0;
      target[x * Y + order[1]] = 1.0;
    }
    VectorXd d = project(target);
    if (d.cwiseAbs().maxCoeff() < 1e-12) d = project(rr.normal_matrix(XY, 1).col(0));
    double m = d.cwiseAbs().maxCoeff();
    if (m < 1e-12) throw InvalidArgument("make_bandit_instance: no room orthogonal to phi for a perturbation");
    delta = d * (eps / m);
  }
  VectorXd r_star = r_lin + delta;
  inst.true_reward = detail::flat_to_table(r_star, X, Y);
  inst.epsilon_measured = delta.cwiseAbs().maxCoeff();

  VectorXd th(cfg.d_P);
  for (int i = 0; i < cfg.d_P; ++i) th[i] = rm.normal();
  double mn = std::min(cfg.mu_norm, cfg.B);
  inst.mu.theta = th.norm() > 0 ? VectorXd(th * (mn / th.norm())) : th;
  inst.mu.B = cfg.B;
  inst.mu_table = tabulate(inst.mu, f);
  inst.log_mu = log_policy_table(inst.mu.theta, f);
  inst.rho = uniform_rho(X);
  return inst;
}

namespace detail {

inline bool same_column(const MatrixXd& m, int a, int b) { return (m.col(a).array() == m.col(b).array()).all(); }

}  // namespace detail

/**
 * Draws n Bradley-Terry labelled pairs: x ~ rho, two candidates i.i.d. from
 * mu(.|x) redrawn until their reward and policy features both differ, and the
 * first candidate wins with probability sigmoid(r*(y1) - r*(y2)).
 */
inline PreferenceDataset sample_preferences(const BanditInstance& inst, int n, std::uint64_t seed,
                                            int redraw_budget = 1000) {
  require(n >= 1, "sample_preferences: n must be positive");
  const FeatureSystem& f = inst.features;
  Rng root(seed);
  Rng rc = root.derive("contexts");
  Rng ra = root.derive("actions");
  Rng ro = root.derive("outcomes");

  PreferenceDataset data;
  data.kind = DataKind::bandit;
  data.pairs.reserve(n);
  data.phi_bar.resize(f.d_R(), n);
  data.psi_bar.resize(f.d_P(), n);
  data.offsets.resize(n);
  for (int i = 0; i < n; ++i) {
    int x = rc.categorical(inst.rho);
    int y1 = 0, y2 = 0;
    bool ok = false;
    for (int attempt = 0; attempt < redraw_budget; ++attempt) {
      y1 = ra.categorical(inst.mu_table.probs.row(x));
      y2 = ra.categorical(inst.mu_table.probs.row(x));
      int c1 = f.index(x, y1), c2 = f.index(x, y2);
      if (!detail::same_column(f.phi, c1, c2) && !detail::same_column(f.psi, c1, c2)) {
        ok = true;
        break;
      }
    }
    if (!ok)
      throw DegenerateSample("sample_preferences: context " + std::to_string(x) +
                             " produced no pair with distinct features within the redraw budget");
    double p = bt_prob(inst.true_reward(x, y1), inst.true_reward(x, y2));
    bool first = ro.uniform() < p;
    PairRecord rec{x, first ? y1 : y2, first ? y2 : y1, first};
    data.pairs.push_back(rec);
    int cw = f.index(x, rec.yw), cl = f.index(x, rec.yl);
    data.phi_bar.col(i) = f.phi.col(cw) - f.phi.col(cl);
    data.psi_bar.col(i) = f.psi.col(cw) - f.psi.col(cl);
    data.offsets[i] = inst.log_mu(x, rec.yw) - inst.log_mu(x, rec.yl);
  }
  return data;
}

// ---------------------------------------------------------------------------

struct MdpInstance {
  InstanceConfig config;
  DeterministicMdp mdp;
  FeatureSystem features;  ///< includes psi_occ
  MatrixXd true_reward;
  LinearReward reward;
  LoglinearPolicy mu;
  TabularPolicy mu_table;
  OccupancyMeasure d_mu;
  VectorXd theta_mu_occ;   ///< least-squares fit of log d_mu on psi_occ
  double theta_mu_occ_residual = 0.0;
};

/**
 * Deterministic MDP with uniformly random transitions. In nested mode the
 * occupancy features are built so their row space contains phi, phi_pi* (for
 * the regularised optimum pi*), log d_mu and log d*, making both d_mu and d*
 * members of the loglinear occupancy class.
 */
inline MdpInstance make_mdp_instance(const InstanceConfig& cfg) {
  cfg.validate();
  require(cfg.d_M > 0, "make_mdp_instance: d_M must be positive");
  require(cfg.realizable, "make_mdp_instance: only realizable rewards are supported");
  const int X = cfg.X, Y = cfg.Y, XY = X * Y;
  Rng root(cfg.seed);
  Rng rt = root.derive("transitions");
  Rng rf = root.derive("features");
  Rng rr = root.derive("reward");
  Rng rm = root.derive("mu");

  MdpInstance inst;
  inst.config = cfg;
  DeterministicMdp& m = inst.mdp;
  m.X = X;
  m.Y = Y;
  m.gamma = cfg.gamma;
  m.rho = uniform_rho(X);
  m.horizon = effective_horizon(cfg.gamma, cfg.tail_tol);
  m.next.resize(XY);
  for (int i = 0; i < XY; ++i) m.next[i] = X == 1 ? 0 : rt.below(X);
  m.validate();

  FeatureSystem& f = inst.features;
  f.X = X;
  f.Y = Y;
  f.psi = detail::unit_scale(detail::abs_normal(rf, cfg.d_P, XY));
  f.phi = detail::unit_scale(detail::abs_normal(rf, cfg.d_R, XY));

  VectorXd v(cfg.d_R);
  for (int i = 0; i < cfg.d_R; ++i) v[i] = std::abs(rr.normal());
  v /= v.norm();
  double hi = (f.phi.transpose() * v).maxCoeff();
  inst.reward.omega = std::min(cfg.F, 1.0 / hi) * v;
  inst.reward.F = cfg.F;
  inst.true_reward = reward_table(inst.reward, f);

  VectorXd th(cfg.d_P);
  for (int i = 0; i < cfg.d_P; ++i) th[i] = rm.normal();
  double mn = std::min(cfg.mu_norm, cfg.B);
  inst.mu.theta = th.norm() > 0 ? VectorXd(th * (mn / th.norm())) : th;
  inst.mu.B = cfg.B;
  inst.mu_table = tabulate(inst.mu, f);
  inst.d_mu = occupancy_of_policy(inst.mu_table, m);
  VectorXd log_dmu = detail::table_to_flat(inst.d_mu.d.array().log().matrix());

  if (cfg.feature_mode == FeatureMode::nested_column_space) {
    auto sol = solve_regularized_occupancy(inst.true_reward, inst.d_mu, cfg.beta, m);
    TabularPolicy pi_star = policy_from_occupancy(sol.d);
    MatrixXd phi_pi = phi_pi_matrix(m, f, pi_star);
    MatrixXd span(XY, 2 * cfg.d_R + 2);
    span << f.phi.transpose(), phi_pi.transpose(), log_dmu,
        detail::table_to_flat(sol.d.d.array().log().matrix());
    MatrixXd U = detail::orthonormal_columns(span, 1e-10);
    require(U.cols() <= cfg.d_M, "make_mdp_instance: nested mode needs d_M >= " + std::to_string(U.cols()));
    MatrixXd occ(cfg.d_M, XY);
    occ.topRows(U.cols()) = U.transpose();
    if (cfg.d_M > U.cols())
      occ.bottomRows(cfg.d_M - U.cols()) = 0.3 * detail::abs_normal(rf, cfg.d_M - static_cast<int>(U.cols()), XY);
    f.psi_occ = detail::unit_scale(occ);
  } else {
    f.psi_occ = detail::unit_scale(detail::abs_normal(rf, cfg.d_M, XY));
  }

  // log d_mu = theta^T psi' + const: fit with a free intercept, then report the residual.
  const MatrixXd& P = *f.psi_occ;
  MatrixXd A(XY, cfg.d_M + 1);
  A << P.transpose(), VectorXd::Ones(XY);
  VectorXd sol = A.completeOrthogonalDecomposition().solve(log_dmu);
  inst.theta_mu_occ = sol.head(cfg.d_M);
  inst.theta_mu_occ_residual = (A * sol - log_dmu).cwiseAbs().maxCoeff();
  return inst;
}

/**
 * Trajectory preferences: x0 ~ rho, two H-step rollouts of mu, Bradley-Terry
 * label on the truncated discounted returns. Caches discounted reward-feature
 * and occupancy-feature differences and K = sum gamma^t log(d_mu(l_t)/d_mu(w_t)).
 */
inline PreferenceDataset sample_trajectory_preferences(const DeterministicMdp& m, const FeatureSystem& f,
                                                       const MatrixXd& reward, const TabularPolicy& mu,
                                                       const OccupancyMeasure& d_mu, int n, std::uint64_t seed) {
  require(n >= 1, "sample_trajectory_preferences: n must be positive");
  m.validate();
  const MatrixXd& occ = f.occ();
  const int H = m.horizon;
  Rng root(seed);
  Rng rc = root.derive("contexts");
  Rng ra = root.derive("actions");
  Rng ro = root.derive("outcomes");

  PreferenceDataset data;
  data.kind = DataKind::trajectory;
  data.gamma = m.gamma;
  data.horizon = H;
  data.trajectories.reserve(n);
  data.phi_bar.resize(f.d_R(), n);
  data.psi_bar.resize(occ.rows(), n);
  data.offsets.resize(n);
  for (int i = 0; i < n; ++i) {
    int x0 = rc.categorical(m.rho);
    Trajectory t1 = rollout(m, mu, x0, H, ra);
    Trajectory t2 = rollout(m, mu, x0, H, ra);
    double R1 = discounted_return(t1, reward, m.gamma, H);
    double R2 = discounted_return(t2, reward, m.gamma, H);
    bool first = ro.uniform() < bt_prob(R1, R2);
    TrajectoryRecord rec{x0, first ? t1 : t2, first ? t2 : t1, first};
    VectorXd pb = VectorXd::Zero(f.d_R()), qb = VectorXd::Zero(occ.rows());
    double K = 0.0, g = 1.0;
    for (int t = 0; t < H; ++t) {
      int cw = f.index(rec.w.states[t], rec.w.actions[t]);
      int cl = f.index(rec.l.states[t], rec.l.actions[t]);
      pb += g * (f.phi.col(cw) - f.phi.col(cl));
      qb += g * (occ.col(cw) - occ.col(cl));
      K += g * (std::log(d_mu.d(rec.l.states[t], rec.l.actions[t])) - std::log(d_mu.d(rec.w.states[t], rec.w.actions[t])));
      g *= m.gamma;
    }
    data.phi_bar.col(i) = pb;
    data.psi_bar.col(i) = qb;
    data.offsets[i] = K;
    data.trajectories.push_back(std::move(rec));
  }
  return data;
}

inline PreferenceDataset sample_trajectory_preferences(const MdpInstance& inst, int n, std::uint64_t seed) {
  return sample_trajectory_preferences(inst.mdp, inst.features, inst.true_reward, inst.mu_table, inst.d_mu, n, seed);
}

enum class SplitMode { interleave, reuse };

/// Returns (reward-phase data, policy-phase data).
inline std::pair<PreferenceDataset, PreferenceDataset> split_dataset(const PreferenceDataset& data, SplitMode mode) {
  if (mode == SplitMode::reuse) return {data, data};
  require(data.size() >= 2, "split_dataset: need at least two records to split");
  std::vector<int> even, odd;
  for (int i = 0; i < data.size(); ++i) (i % 2 == 0 ? even : odd).push_back(i);
  return {data.subset(even), data.subset(odd)};
}

}  // namespace prefopt
