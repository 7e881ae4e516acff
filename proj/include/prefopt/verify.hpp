#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prefopt/domain.hpp"
#include "prefopt/dpo.hpp"
#include "prefopt/envgen.hpp"
#include "prefopt/mdp.hpp"
#include "prefopt/metrics.hpp"
#include "prefopt/rlhf.hpp"
#include "prefopt/rng.hpp"
#include "prefopt/serialize.hpp"

namespace prefopt {

struct Check {
  std::string suite;
  std::string property;
  double measured = 0.0;
  double threshold = 0.0;
  std::string relation;  ///< "<=", ">=", "==", "<"
  bool pass = false;
};

inline Check make_check(std::string suite, std::string property, double measured, std::string relation,
                        double threshold) {
  bool pass = false;
  if (relation == "<=") pass = measured <= threshold;
  else if (relation == ">=") pass = measured >= threshold;
  else if (relation == "<") pass = measured < threshold;
  else if (relation == "==") pass = measured == threshold;
  return Check{std::move(suite), std::move(property), measured, threshold, std::move(relation), pass};
}

using HBuilder = std::function<MatrixXd(const TabularPolicy&, const std::vector<int>&)>;

struct VerifyOptions {
  std::uint64_t seed = 20240601;
  HBuilder h_builder;  ///< test hook; defaults to h_matrix
};

inline json to_json(const std::vector<Check>& checks) {
  json a = json::array();
  bool all = true;
  for (const Check& c : checks) {
    a.push_back(json{{"suite", c.suite},
                     {"property", c.property},
                     {"measured", c.measured},
                     {"relation", c.relation},
                     {"threshold", c.threshold},
                     {"verdict", c.pass ? "pass" : "fail"}});
    all = all && c.pass;
  }
  return json{{"checks", a}, {"all_pass", all}};
}

inline bool all_pass(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

/// Central finite-difference gradient.
inline VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x, double h = 1e-5) {
  VectorXd g(x.size());
  VectorXd xp = x, xm = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    xm[i] = x[i] - h;
    g[i] = (f(xp) - f(xm)) / (2.0 * h);
    xp[i] = xm[i] = x[i];
  }
  return g;
}

inline double relative_error(const VectorXd& a, const VectorXd& b) {
  double den = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / den;
}

namespace detail {

inline VectorXd random_normal(Rng& rng, Eigen::Index d, double scale = 1.0) {
  VectorXd v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = scale * rng.normal();
  return v;
}

inline InstanceConfig small_bandit(std::uint64_t seed, FeatureMode mode = FeatureMode::generic) {
  InstanceConfig c;
  c.X = 6;
  c.Y = 4;
  c.d_R = 5;
  c.d_P = 6;
  c.seed = seed;
  c.feature_mode = mode;
  return c;
}

inline InstanceConfig small_mdp(std::uint64_t seed) {
  InstanceConfig c;
  c.X = 5;
  c.Y = 3;
  c.d_R = 4;
  c.d_P = 4;
  c.d_M = 6;
  c.gamma = 0.9;
  c.seed = seed;
  return c;
}

/// Records whose contexts appear for the first time, in order.
inline std::vector<int> first_per_context(const PreferenceDataset& data, int limit) {
  std::vector<int> idx;
  std::vector<bool> seen;
  for (int i = 0; i < data.size() && static_cast<int>(idx.size()) < limit; ++i) {
    int x = data.context(i);
    if (x >= static_cast<int>(seen.size())) seen.resize(x + 1, false);
    if (!seen[x]) {
      seen[x] = true;
      idx.push_back(i);
    }
  }
  return idx;
}

}  // namespace detail

// ---------------------------------------------------------------- gradients

inline std::vector<Check> verify_gradients(const VerifyOptions& o = {}) {
  const std::string S = "gradients";
  Rng rng = Rng(o.seed).derive("gradients");
  std::vector<Check> out;

  BanditInstance inst = make_bandit_instance(detail::small_bandit(o.seed));
  PreferenceDataset data = sample_preferences(inst, 64, o.seed + 1);
  const double beta = 0.7;

  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    VectorXd w = detail::random_normal(rng, inst.features.d_R());
    auto f = [&](const VectorXd& v) { return mle_loss_grad(v, data).loss; };
    worst = std::max(worst, relative_error(mle_loss_grad(w, data).grad, fd_gradient(f, w)));
  }
  out.push_back(make_check(S, "mle_loss_fd_relative_error", worst, "<=", 1e-6));

  worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    VectorXd th = detail::random_normal(rng, inst.features.d_P());
    auto f = [&](const VectorXd& v) { return dpo_loss_grad(v, data, beta).loss; };
    worst = std::max(worst, relative_error(dpo_loss_grad(th, data, beta).grad, fd_gradient(f, th)));
  }
  out.push_back(make_check(S, "dpo_loss_fd_relative_error", worst, "<=", 1e-6));

  MdpInstance mi = make_mdp_instance(detail::small_mdp(o.seed));
  PreferenceDataset traj = sample_trajectory_preferences(mi, 32, o.seed + 2);
  worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    VectorXd th = detail::random_normal(rng, mi.features.occ().rows());
    auto f = [&](const VectorXd& v) { return dpo_mdp_loss_grad(v, traj, beta).loss; };
    worst = std::max(worst, relative_error(dpo_mdp_loss_grad(th, traj, beta).grad, fd_gradient(f, th)));
  }
  out.push_back(make_check(S, "dpo_mdp_loss_fd_relative_error", worst, "<=", 1e-6));

  std::vector<int> ctx = dataset_contexts(data);
  worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    VectorXd th = detail::random_normal(rng, inst.features.d_P());
    auto f = [&](const VectorXd& v) {
      return regularized_objective_grad(v, inst.features, inst.true_reward, inst.log_mu, beta, ctx).loss;
    };
    VectorXd g = regularized_objective_grad(th, inst.features, inst.true_reward, inst.log_mu, beta, ctx).grad;
    worst = std::max(worst, relative_error(g, fd_gradient(f, th)));
  }
  out.push_back(make_check(S, "regularized_objective_fd_relative_error", worst, "<=", 1e-6));
  return out;
}

// ---------------------------------------------------------------- closed-form optimum

inline std::vector<Check> verify_optimum(const VerifyOptions& o = {}) {
  const std::string S = "optimum";
  Rng rng = Rng(o.seed).derive("optimum");
  double worst_value = -std::numeric_limits<double>::infinity();
  double worst_tv = 0.0;
  for (int k = 0; k < 10; ++k) {
    const int X = 1 + rng.below(5), Y = 2 + rng.below(4);
    MatrixXd r(X, Y), logits(X, Y);
    for (int x = 0; x < X; ++x)
      for (int y = 0; y < Y; ++y) {
        r(x, y) = rng.uniform();
        logits(x, y) = rng.normal();
      }
    TabularPolicy mu;
    mu.probs.resize(X, Y);
    for (int x = 0; x < X; ++x) mu.probs.row(x) = softmax(logits.row(x).transpose()).transpose();
    const double beta = 0.5 + 1.5 * rng.uniform();
    VectorXd rho = uniform_rho(X);
    GibbsPolicy g = gibbs_policy(r, mu, beta);
    TabularOracleResult orc = tabular_regularized_oracle(r, mu, beta, rho);
    double vg = values(g.policy, r, rho, beta, mu).V_reg;
    worst_value = std::max(worst_value, orc.value - vg);
    for (int x = 0; x < X; ++x)
      worst_tv = std::max(worst_tv, 0.5 * (g.policy.probs.row(x) - orc.policy.probs.row(x)).cwiseAbs().sum());
  }
  return {make_check(S, "oracle_value_minus_gibbs_value", worst_value, "<=", 1e-6),
          make_check(S, "gibbs_vs_oracle_total_variation", worst_tv, "<=", 1e-6)};
}

// ---------------------------------------------------------------- constants

inline std::vector<Check> verify_constants(const VerifyOptions& o = {}) {
  const std::string S = "constants";
  Rng rng = Rng(o.seed).derive("constants");
  std::vector<Check> out;
  out.push_back(make_check(S, "S_R_at_F0", s_r(0.0), "==", 0.25));
  out.push_back(make_check(S, "C_PL_at_F0_xi4_n1", std::abs(c_pl(0.0, 4.0, 1) - 2.0), "<=", 1e-15));
  out.push_back(make_check(S, "S_M_at_B0", s_m(0.0), "==", 0.25));
  out.push_back(make_check(S, "U_prime_at_B0", u_prime(0.0), "==", 4.0));

  InstanceConfig ic = detail::small_bandit(o.seed);
  BanditInstance inst = make_bandit_instance(ic);
  PreferenceDataset data = sample_preferences(inst, 64, o.seed + 3);
  const double F = ic.F, B = ic.B, beta = 1.0;
  double g_max = 0.0, h_max = 0.0;
  for (int k = 0; k < 50; ++k) {
    VectorXd w = random_in_ball(rng, ic.d_R, F);
    g_max = std::max(g_max, mle_loss_grad(w, data).grad.norm());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(mle_hessian(w, data), Eigen::EigenvaluesOnly);
    h_max = std::max(h_max, es.eigenvalues().cwiseAbs().maxCoeff());
  }
  const double L2 = 2.0 * std::exp(2.0 * F);
  out.push_back(make_check(S, "mle_gradient_norm_bound", g_max, "<=", L2 * (1 + 1e-3)));
  out.push_back(make_check(S, "mle_hessian_norm_bound", h_max, "<=", L2 * (1 + 1e-3)));

  DpoLipschitz L = dpo_lipschitz(beta, B, j_max(data));
  g_max = h_max = 0.0;
  for (int k = 0; k < 50; ++k) {
    VectorXd th = random_in_ball(rng, ic.d_P, B);
    g_max = std::max(g_max, dpo_loss_grad(th, data, beta).grad.norm());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(dpo_hessian(th, data, beta), Eigen::EigenvaluesOnly);
    h_max = std::max(h_max, es.eigenvalues().cwiseAbs().maxCoeff());
  }
  out.push_back(make_check(S, "dpo_gradient_norm_bound_L1", g_max, "<=", L.L1 * (1 + 1e-3)));
  out.push_back(make_check(S, "dpo_hessian_norm_bound_L2", h_max, "<=", L.L2 * (1 + 1e-3)));

  // Log-sum-exp certificates.
  double lse_g = 0.0, lse_h = 0.0;
  for (int k = 0; k < 50; ++k) {
    VectorXd th = random_in_ball(rng, ic.d_P, B);
    LseEval e = log_partition(th, inst.features.psi, inst.rho, ic.Y);
    lse_g = std::max(lse_g, e.grad.norm());
    MatrixXd Hfd(ic.d_P, ic.d_P);
    const double h = 1e-5;
    for (int i = 0; i < ic.d_P; ++i) {
      VectorXd tp = th, tm = th;
      tp[i] += h;
      tm[i] -= h;
      Hfd.col(i) = (log_partition(tp, inst.features.psi, inst.rho, ic.Y).grad -
                    log_partition(tm, inst.features.psi, inst.rho, ic.Y).grad) / (2 * h);
    }
    MatrixXd sym = 0.5 * (Hfd + Hfd.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym, Eigen::EigenvaluesOnly);
    lse_h = std::max(lse_h, es.eigenvalues().cwiseAbs().maxCoeff());
  }
  out.push_back(make_check(S, "lse_gradient_norm", lse_g, "<=", 1 + 1e-6));
  out.push_back(make_check(S, "lse_fd_hessian_norm", lse_h, "<=", 2 + 1e-3));

  InstanceConfig zc = ic;
  zc.feature_mode = FeatureMode::zero_mean_full_rank;
  zc.d_P = 4;
  BanditInstance zi = make_bandit_instance(zc);
  auto k = kappa_stats(zi.features, zi.rho, zc.B, o.seed);
  out.push_back(make_check(S, "kappa_hat_positive", k[0], ">=", 1e-12));
  out.push_back(make_check(S, "kappa_coefficient_of_variation", k[2], "<=", 0.5));
  return out;
}

// ---------------------------------------------------------------- spectra

inline std::vector<Check> verify_spectra(const VerifyOptions& o = {}) {
  const std::string S = "spectra";
  Rng rng = Rng(o.seed).derive("spectra");
  HBuilder build = o.h_builder ? o.h_builder : HBuilder([](const TabularPolicy& p, const std::vector<int>& c) {
    return h_matrix(p, c);
  });
  const int X = 7, Y = 4, n = 12;
  TabularPolicy pi;
  pi.probs.resize(X, Y);
  for (int x = 0; x < X; ++x) {
    VectorXd l = detail::random_normal(rng, Y);
    pi.probs.row(x) = softmax(l).transpose();
  }
  std::vector<int> ctx(n);
  for (int i = 0; i < n; ++i) ctx[i] = rng.below(X);
  double pmax = 0.0, pmin = 1.0;
  for (int x : ctx) {
    pmax = std::max(pmax, pi.probs.row(x).maxCoeff());
    pmin = std::min(pmin, pi.probs.row(x).minCoeff());
  }
  MatrixXd H = build(pi, ctx);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(H, Eigen::EigenvaluesOnly);
  const VectorXd& ev = es.eigenvalues();
  int zeros = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (std::abs(ev[i]) <= 1e-10) ++zeros;
  std::vector<Check> out;
  out.push_back(make_check(S, "H_zero_eigenvalue_multiplicity", zeros, "==", n));
  out.push_back(make_check(S, "H_min_eigenvalue", ev.minCoeff(), ">=", -1e-10));
  out.push_back(make_check(S, "H_max_eigenvalue_vs_max_pi", ev.maxCoeff(), "<=", pmax + 1e-10));
  out.push_back(make_check(S, "H_eigenvalue_n_plus_1_vs_min_pi", ev.size() > n ? ev[n] : 0.0, ">=", pmin - 1e-10));
  return out;
}

// ---------------------------------------------------------------- MDP

inline std::vector<Check> verify_mdp(const VerifyOptions& o = {}) {
  const std::string S = "mdp";
  Rng rng = Rng(o.seed).derive("mdp");
  std::vector<Check> out;
  InstanceConfig ic = detail::small_mdp(o.seed);
  ic.X = 6;
  MdpInstance inst = make_mdp_instance(ic);
  const DeterministicMdp& m = inst.mdp;

  TabularPolicy pi;
  pi.probs.resize(m.X, m.Y);
  for (int x = 0; x < m.X; ++x) pi.probs.row(x) = softmax(detail::random_normal(rng, m.Y)).transpose();
  OccupancyMeasure d = occupancy_of_policy(pi, m);
  out.push_back(make_check(S, "occupancy_flow_residual", flow_residual(d, m).cwiseAbs().maxCoeff(), "<=", 1e-10));
  out.push_back(make_check(S, "policy_occupancy_round_trip",
                           (policy_from_occupancy(d).probs - pi.probs).cwiseAbs().maxCoeff(), "<=", 1e-8));

  const double beta = 0.5;
  auto sol = solve_regularized_occupancy(inst.true_reward, inst.d_mu, beta, m);
  MatrixXd q = inst.d_mu.d.array() * (sol.dual.e_alpha.array() / beta).exp();
  q /= q.sum();
  double stat = ((sol.d.d - q).array() / q.array()).abs().maxCoeff();
  out.push_back(make_check(S, "stationarity_relative_residual", stat, "<=", 1e-6));
  out.push_back(make_check(S, "solution_flow_residual", flow_residual(sol.d, m).cwiseAbs().maxCoeff(), "<=", 1e-8));
  out.push_back(make_check(S, "strong_duality_gap", std::abs(sol.primal_value - sol.dual_value), "<=", 1e-6));

  const int H = 25;
  const double tail = std::pow(m.gamma, H) * sol.dual.alpha.cwiseAbs().maxCoeff() * 2.0;
  double worst_excess = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < 100; ++k) {
    Trajectory tau = rollout(m, pi, rng.below(m.X), H, rng);
    TelescopingResult t = telescoping_check(sol.d, inst.d_mu, sol.dual, beta, tau, inst.true_reward, m.gamma, H);
    worst_excess = std::max(worst_excess, t.deviation - tail);
  }
  out.push_back(make_check(S, "telescoping_deviation_minus_tail_bound", worst_excess, "<=", 1e-6));

  InstanceConfig one = ic;
  one.X = 1;
  one.Y = 4;
  one.d_R = 2;
  one.d_P = 3;
  one.d_M = 3;
  MdpInstance si = make_mdp_instance(one);
  auto s1 = solve_regularized_occupancy(si.true_reward, si.d_mu, beta, si.mdp);
  GibbsPolicy g = gibbs_policy(si.true_reward, si.mu_table, beta);
  out.push_back(make_check(S, "single_state_reduces_to_gibbs",
                           (policy_from_occupancy(s1.d).probs - g.policy.probs).cwiseAbs().maxCoeff(), "<=", 1e-8));
  return out;
}

// ---------------------------------------------------------------- rates

struct RateSeries {
  std::vector<double> t, v;
};

inline RateSeries window(const std::vector<double>& series, int lo, int hi) {
  RateSeries s;
  for (int t = lo; t <= hi && t < static_cast<int>(series.size()); ++t) {
    s.t.push_back(t);
    s.v.push_back(series[t]);
  }
  return s;
}

inline std::vector<Check> verify_mle_rate(const VerifyOptions& o = {}) {
  const std::string S = "rates";
  InstanceConfig ic;
  ic.X = 20;
  ic.Y = 4;
  ic.d_R = 8;
  ic.d_P = 8;
  ic.F = 1.0;
  ic.seed = o.seed;
  BanditInstance inst = make_bandit_instance(ic);
  PreferenceDataset data = sample_preferences(inst, 256, o.seed + 4);
  OracleParams p;
  p.cap = ic.F;
  VectorXd w_star = oracle_solve(LossKind::mle, data, p).param;
  auto trace = mle_pgd(data, ic.F, std::nullopt, 200, VectorXd::Zero(ic.d_R));
  MatrixXd sigma = feature_covariance(data.phi_bar);
  std::vector<double> gaps;
  for (const auto& st : trace) gaps.push_back(seminorm_sq(st.omega_t, w_star, sigma));
  RateSeries s = window(gaps, 10, 200);
  RateFit f = rate_fit(s.t, s.v, RateModel::geometric);
  return {make_check(S, "mle_pgd_geometric_ratio", f.ratio, "<", 1.0),
          make_check(S, "mle_pgd_geometric_r_squared", f.r_squared, ">=", 0.98)};
}

inline std::vector<Check> verify_npg_rate(const VerifyOptions& o = {}) {
  const std::string S = "rates";
  InstanceConfig ic;
  ic.X = 8;
  ic.Y = 3;
  ic.d_R = 4;
  ic.d_P = 12;
  ic.B = 1.0;
  ic.seed = o.seed;
  BanditInstance inst = make_bandit_instance(ic);
  PreferenceDataset full = sample_preferences(inst, 64, o.seed + 5);
  PreferenceDataset data = full.subset(detail::first_per_context(full, ic.d_P / ic.Y));
  const double beta = 1.0;
  const int T = 50;
  NpgResult res = npg_run(data, inst.features, inst.true_reward, inst.log_mu, beta, std::nullopt, T,
                          VectorXd::Zero(ic.d_P));
  std::vector<Check> out;
  out.push_back(make_check(S, "npg_full_column_rank", res.rank_deficient ? 0.0 : 1.0, "==", 1.0));
  std::vector<double> gaps;
  for (const auto& st : res.states) gaps.push_back(st.gap);
  RateSeries s = window(gaps, 5, 50);
  RateFit f = rate_fit(s.t, s.v, RateModel::geometric);
  out.push_back(make_check(S, "npg_log_gap_slope", f.slope, "<=", -0.5));
  out.push_back(make_check(S, "npg_log_gap_r_squared", f.r_squared, ">=", 0.99));

  const std::vector<int> ctx = dataset_contexts(data);
  const double c = res.eta_prime * beta / data.size();
  double worst = 0.0, pmin = 1.0;
  for (int t = 0; t < T; ++t) {
    TabularPolicy pt = tabulate(LoglinearPolicy{res.states[t].theta_t, ic.B}, inst.features);
    MatrixXd H = h_matrix(pt, ctx);
    VectorXd pred = res.states[t].alpha_t - c * (H * res.states[t].alpha_t);
    worst = std::max(worst, (res.states[t + 1].alpha_t - pred).cwiseAbs().maxCoeff());
  }
  for (const auto& st : res.states)
    pmin = std::min(pmin, tabulate(LoglinearPolicy{st.theta_t, ic.B}, inst.features).probs.minCoeff());
  out.push_back(make_check(S, "npg_alpha_recursion_residual", worst, "<=", 1e-8));
  out.push_back(make_check(S, "npg_min_policy_prob_vs_C_floor", pmin, ">=", c_floor(beta, ic.B, ic.Y)));
  return out;
}

inline std::vector<Check> verify_dpo_rate(const VerifyOptions& o = {}) {
  const std::string S = "rates";
  InstanceConfig ic;
  ic.X = 20;
  ic.Y = 4;
  ic.d_R = 8;
  ic.d_P = 8;
  ic.B = 1.0;
  ic.seed = o.seed;
  BanditInstance inst = make_bandit_instance(ic);
  PreferenceDataset data = sample_preferences(inst, 256, o.seed + 6);
  const double beta = 1.0;
  OracleParams p;
  p.cap = ic.B;
  p.beta = beta;
  VectorXd th_star = oracle_solve(LossKind::dpo, data, p).param;
  auto trace = dpo_pgd(data, ic.B, beta, std::nullopt, 200, VectorXd::Zero(ic.d_P), th_star);
  std::vector<double> gaps;
  for (const auto& st : trace) gaps.push_back(st.seminorm_gap_t);
  RateSeries s = window(gaps, 10, 200);
  RateFit f = rate_fit(s.t, s.v, RateModel::geometric);
  const double J = j_max(data);
  const double xi_p = data.psi_bar.colwise().squaredNorm().minCoeff();
  const double bound = 1.0 - c_pl_dpo(beta, ic.B, J, xi_p, data.size()) / dpo_lipschitz(beta, ic.B, J).L2 + 0.05;
  return {make_check(S, "dpo_pgd_geometric_ratio", f.ratio, "<=", bound)};
}

inline std::vector<Check> verify_rates(const VerifyOptions& o = {}) {
  std::vector<Check> out = verify_mle_rate(o);
  for (auto& c : verify_npg_rate(o)) out.push_back(c);
  for (auto& c : verify_dpo_rate(o)) out.push_back(c);
  return out;
}

// ---------------------------------------------------------------- realizability

inline std::vector<Check> verify_realizability(const VerifyOptions& o = {}) {
  const std::string S = "realizability";
  double worst_bandit = 0.0, worst_mdp = 0.0, worst_dstar = 0.0;
  for (std::uint64_t k = 0; k < 3; ++k) {
    InstanceConfig ic;
    ic.X = 10;
    ic.Y = 4;
    ic.d_R = 4;
    ic.d_P = 8;
    ic.feature_mode = FeatureMode::nested_column_space;
    ic.seed = o.seed + 100 + k;
    BanditInstance inst = make_bandit_instance(ic);
    const MatrixXd& Psi = inst.features.psi;
    VectorXd rhs = inst.features.phi.transpose() * inst.reward_fit.omega;
    VectorXd delta = Psi.transpose().colPivHouseholderQr().solve(rhs);
    worst_bandit = std::max(worst_bandit, (Psi.transpose() * delta - rhs).cwiseAbs().maxCoeff());

    InstanceConfig mc;
    mc.X = 5;
    mc.Y = 3;
    mc.d_R = 4;
    mc.d_P = 4;
    mc.d_M = 12;
    mc.feature_mode = FeatureMode::nested_column_space;
    mc.seed = o.seed + 200 + k;
    MdpInstance mi = make_mdp_instance(mc);
    auto sol = solve_regularized_occupancy(mi.true_reward, mi.d_mu, mc.beta, mi.mdp);
    TabularPolicy pi_star = policy_from_occupancy(sol.d);
    MatrixXd combo = mi.features.phi + phi_pi_matrix(mi.mdp, mi.features, pi_star);
    VectorXd mrhs = combo.transpose() * mi.reward.omega;
    const MatrixXd& P = mi.features.occ();
    VectorXd md = P.transpose().colPivHouseholderQr().solve(mrhs);
    worst_mdp = std::max(worst_mdp, (P.transpose() * md - mrhs).cwiseAbs().maxCoeff());

    // d* itself must lie in the loglinear occupancy class (up to normalisation).
    const int XY = mc.X * mc.Y;
    MatrixXd A(XY, mc.d_M + 1);
    A << P.transpose(), VectorXd::Ones(XY);
    VectorXd logd = detail::table_to_flat(sol.d.d.array().log().matrix());
    VectorXd c = A.colPivHouseholderQr().solve(logd);
    worst_dstar = std::max(worst_dstar, (A * c - logd).cwiseAbs().maxCoeff());
  }
  return {make_check(S, "bandit_reward_in_policy_span_residual", worst_bandit, "<=", 1e-8),
          make_check(S, "mdp_reward_in_occupancy_span_residual", worst_mdp, "<=", 1e-8),
          make_check(S, "mdp_d_star_loglinear_residual", worst_dstar, "<=", 1e-8)};
}

// ---------------------------------------------------------------- tabular DPO probe

inline std::vector<Check> verify_probe(const VerifyOptions& o = {}) {
  const std::string S = "probe";
  InstanceConfig ic = detail::small_bandit(o.seed);
  BanditInstance inst = make_bandit_instance(ic);
  PreferenceDataset data = sample_preferences(inst, 32, o.seed + 7);
  const double beta = 1.0;
  std::vector<double> grid;
  for (int k = 1; k <= 6; ++k) grid.push_back(std::ldexp(1.0, -k));
  auto rows = tabular_dpo_curvature_probe(data, beta, inst.mu_table, grid, ic.B);
  double worst_ratio = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < rows.size(); ++i)
    worst_ratio = std::min(worst_ratio, rows[i].component / rows[i - 1].component);
  double ll = 0.0;
  for (const auto& r : rows) ll = std::max(ll, r.loglinear_grad_norm);
  auto edge = tabular_dpo_curvature_probe(data, beta, inst.mu_table, {1.0}, ic.B);
  return {make_check(S, "halving_eps_component_growth", worst_ratio, ">=", 1.9),
          make_check(S, "boundary_component_finite", std::isfinite(edge[0].component) ? 1.0 : 0.0, "==", 1.0),
          make_check(S, "loglinear_gradient_vs_L1", ll, "<=", dpo_lipschitz(beta, ic.B, j_max(data)).L1)};
}

// ---------------------------------------------------------------- dispatch

inline const std::vector<std::string>& verify_suites() {
  static const std::vector<std::string> s{"gradients", "optimum", "constants", "spectra",
                                          "mdp",       "rates",   "realizability", "probe"};
  return s;
}

inline std::vector<Check> verify(const std::string& suite, const VerifyOptions& o = {}) {
  if (suite == "gradients") return verify_gradients(o);
  if (suite == "optimum") return verify_optimum(o);
  if (suite == "constants") return verify_constants(o);
  if (suite == "spectra") return verify_spectra(o);
  if (suite == "mdp") return verify_mdp(o);
  if (suite == "rates") return verify_rates(o);
  if (suite == "realizability") return verify_realizability(o);
  if (suite == "probe") return verify_probe(o);
  if (suite == "all") {
    std::vector<Check> out;
    for (const auto& s : verify_suites())
      for (auto& c : verify(s, o)) out.push_back(c);
    return out;
  }
  throw InvalidArgument("unknown verify suite '" + suite + "'");
}

}  // namespace prefopt
