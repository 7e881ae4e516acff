#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prefopt/domain.hpp"
#include "prefopt/dpo.hpp"
#include "prefopt/envgen.hpp"
#include "prefopt/error.hpp"
#include "prefopt/mdp.hpp"
#include "prefopt/rlhf.hpp"
#include "prefopt/rng.hpp"

namespace prefopt {

// ---------------------------------------------------------------- gaps

struct GapReport {
  double V_opt = 0.0;
  double V_pi = 0.0;
  double G = 0.0;
  double V_reg_opt = 0.0;
  double V_reg_pi = 0.0;
  double G_reg = 0.0;
  double D = 0.0;
};

/// Per-context argmax of r; ties go to the lowest action index.
inline TabularPolicy argmax_policy(const MatrixXd& r) {
  TabularPolicy p;
  p.probs = MatrixXd::Zero(r.rows(), r.cols());
  for (Eigen::Index x = 0; x < r.rows(); ++x) {
    Eigen::Index best = 0;
    for (Eigen::Index y = 1; y < r.cols(); ++y)
      if (r(x, y) > r(x, best)) best = y;
    p.probs(x, best) = 1.0;
  }
  return p;
}

inline GapReport gap_report(const TabularPolicy& pi, const MatrixXd& r_star, const MatrixXd& log_mu,
                            const VectorXd& rho, double beta) {
  TabularPolicy mu{log_mu.array().exp().matrix()};
  GapReport g;
  g.V_opt = values(argmax_policy(r_star), r_star, rho, 0.0, mu).V;
  Values vp = values(pi, r_star, rho, beta, mu);
  g.V_pi = vp.V;
  GibbsPolicy star = gibbs_policy_log(r_star, log_mu, beta);
  g.V_reg_opt = values(star.policy, r_star, rho, beta, mu).V_reg;
  g.V_reg_pi = vp.V_reg;
  g.G = g.V_opt - g.V_pi;
  g.G_reg = g.V_reg_opt - g.V_reg_pi;
  g.D = g.G - g.G_reg;
  return g;
}

inline GapReport gap_report(const TabularPolicy& pi, const BanditInstance& inst, double beta) {
  return gap_report(pi, inst.true_reward, inst.log_mu, inst.rho, beta);
}

/**
 * MDP gaps in return units: V = sum d r / (1 - gamma) and the regularised
 * value (sum d r - beta KL(d || d_mu)) / (1 - gamma), whose maximiser is the
 * occupancy-space optimum.
 */
inline GapReport mdp_gap_report(const TabularPolicy& pi, const MdpInstance& inst, double beta) {
  const DeterministicMdp& m = inst.mdp;
  const MatrixXd& r = inst.true_reward;
  GapReport g;
  OccupancyMeasure d_opt = occupancy_of_policy(optimal_policy(m, r), m);
  OccupancyMeasure d_pi = occupancy_of_policy(pi, m);
  g.V_opt = value_from_occupancy(d_opt, r, m.gamma);
  g.V_pi = value_from_occupancy(d_pi, r, m.gamma);
  auto sol = solve_regularized_occupancy(r, inst.d_mu, beta, m);
  g.V_reg_opt = sol.primal_value / (1.0 - m.gamma);
  g.V_reg_pi = regularized_occupancy_objective(d_pi, r, inst.d_mu, beta) / (1.0 - m.gamma);
  g.G = g.V_opt - g.V_pi;
  g.G_reg = g.V_reg_opt - g.V_reg_pi;
  g.D = g.G - g.G_reg;
  return g;
}

// ---------------------------------------------------------------- covering

struct CoveringStats {
  MatrixXd sigma_R, sigma_P, sigma_R_mdp, sigma_M_mdp;
  double lambda = 0.0;
  double Lambda_R = std::numeric_limits<double>::quiet_NaN();
  double Lambda_P = std::numeric_limits<double>::quiet_NaN();
  double Lambda_R_prime = std::numeric_limits<double>::quiet_NaN();
  double Lambda_M = std::numeric_limits<double>::quiet_NaN();
};

inline double covering_number(const MatrixXd& sigma, double lambda) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sigma, Eigen::EigenvaluesOnly);
  return 1.0 / std::sqrt(std::max(0.0, es.eigenvalues()[0]) + lambda);
}

inline CoveringStats covering_stats(const PreferenceDataset& data, std::optional<double> lambda = std::nullopt) {
  require(data.size() > 0, "covering_stats: empty dataset");
  CoveringStats c;
  c.lambda = lambda.value_or(1.0 / data.size());
  require(c.lambda > 0, "covering_stats: lambda must be positive");
  if (data.kind == DataKind::bandit) {
    c.sigma_R = feature_covariance(data.phi_bar);
    c.sigma_P = feature_covariance(data.psi_bar);
    c.Lambda_R = covering_number(c.sigma_R, c.lambda);
    c.Lambda_P = covering_number(c.sigma_P, c.lambda);
  } else {
    c.sigma_R_mdp = feature_covariance(data.phi_bar);
    c.sigma_M_mdp = feature_covariance(data.psi_bar);
    c.Lambda_R_prime = covering_number(c.sigma_R_mdp, c.lambda);
    c.Lambda_M = covering_number(c.sigma_M_mdp, c.lambda);
  }
  return c;
}

// ---------------------------------------------------------------- log-sum-exp

struct LseEval {
  double value = 0.0;
  VectorXd grad;
  MatrixXd hess;
};

/// A(theta) = sum_x rho(x) log sum_y exp(theta^T psi(x,y)).
inline LseEval log_partition(const VectorXd& theta, const MatrixXd& psi, const VectorXd& rho, int Y) {
  const int X = static_cast<int>(rho.size());
  LseEval e;
  e.grad = VectorXd::Zero(theta.size());
  e.hess = MatrixXd::Zero(theta.size(), theta.size());
  for (int x = 0; x < X; ++x) {
    auto block = psi.middleCols(static_cast<Eigen::Index>(x) * Y, Y);
    VectorXd logits = block.transpose() * theta;
    double lse = log_sum_exp(logits);
    VectorXd p = (logits.array() - lse).exp();
    VectorXd mean = block * p;
    MatrixXd centered = block.colwise() - mean;
    e.value += rho[x] * lse;
    e.grad += rho[x] * mean;
    e.hess += rho[x] * centered * p.asDiagonal() * centered.transpose();
  }
  return e;
}

/// Uniform draw from the ball of radius R in dimension d.
inline VectorXd random_in_ball(Rng& rng, int d, double R) {
  VectorXd v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.normal();
  double u = std::pow(rng.uniform(), 1.0 / d);
  return v * (R * u / v.norm());
}

// ---------------------------------------------------------------- constants

struct LedgerEntry {
  std::string name;
  double value;
  std::string formula;
  bool by_analogy = false;
};

struct ConstantsLedger {
  double S_R = 0, L2 = 0, C_PL = 0, L1_dpo = 0, L2_dpo = 0, C_PL_dpo = 0;
  double xi = 0, xi_prime = 0, J_max = 0, C_floor = 0;
  double kappa_hat = 0, kappa_mean = 0, kappa_cv = 0;
  double S_M = 0, U_prime = 0, S_P = 0, U = 0;

  std::vector<LedgerEntry> entries() const {
    return {
        {"S_R", S_R, "1/(2+exp(-2F)+exp(2F))"},
        {"L2", L2, "2exp(2F)"},
        {"C_PL", C_PL, "exp(-2F)xi(1+exp(-2F))/(n(1+exp(2F))^2)"},
        {"L1_dpo", L1_dpo, "beta exp(2beta(B+J_max))"},
        {"L2_dpo", L2_dpo, "beta^2 exp(2beta(B+J_max))"},
        {"C_PL_dpo", C_PL_dpo, "beta exp(-2beta(B+J))^3(1+exp(-2beta(B+J)))xi'/(n(1+exp(2beta(B+J)))^2)"},
        {"xi", xi, "min_i ||phi_bar_i||^2"},
        {"xi_prime", xi_prime, "min_i ||psi_bar_i||^2"},
        {"J_max", J_max, "max_i |J_i|"},
        {"C_floor", C_floor, "(1/Y)exp(-1/beta-4(B+1/beta)sqrt(Y))"},
        {"kappa_hat", kappa_hat, "min over 50 theta in B-ball of lambda_min(hess A(theta))"},
        {"S_M", S_M, "1/(exp(-B')+exp(B')+2)"},
        {"U_prime", U_prime, "exp(-2B')+exp(2B')+2"},
        {"S_P", S_P, "1/(exp(-B)+exp(B)+2)", true},
        {"U", U, "exp(-2B)+exp(2B)+2", true},
    };
  }
};

inline double s_r(double F) { return 1.0 / (2.0 + std::exp(-2.0 * F) + std::exp(2.0 * F)); }

inline double c_pl(double F, double xi, int n) {
  double e = std::exp(2.0 * F);
  return std::exp(-2.0 * F) * xi * (1.0 + std::exp(-2.0 * F)) / (n * (1.0 + e) * (1.0 + e));
}

inline double c_pl_dpo(double beta, double B, double J, double xi_prime, int n) {
  double a = 2.0 * beta * (B + J);
  double em = std::exp(-a), ep = std::exp(a);
  return beta * em * em * em * (1.0 + em) * xi_prime / (n * (1.0 + ep) * (1.0 + ep));
}

inline double c_floor(double beta, double B, int Y) {
  return std::exp(-1.0 / beta - 4.0 * (B + 1.0 / beta) * std::sqrt(static_cast<double>(Y))) / Y;
}

inline double s_m(double Bp) { return 1.0 / (std::exp(-Bp) + std::exp(Bp) + 2.0); }
inline double u_prime(double Bp) { return std::exp(-2.0 * Bp) + std::exp(2.0 * Bp) + 2.0; }

/// kappa statistics of A over random draws in the B-ball: (min, mean, coefficient of variation).
inline std::array<double, 3> kappa_stats(const FeatureSystem& f, const VectorXd& rho, double B, std::uint64_t seed,
                                         int samples = 50) {
  Rng rng = Rng(seed).derive("kappa");
  std::vector<double> ks;
  for (int s = 0; s < samples; ++s) {
    VectorXd th = random_in_ball(rng, f.d_P(), B);
    LseEval e = log_partition(th, f.psi, rho, f.Y);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(e.hess, Eigen::EigenvaluesOnly);
    ks.push_back(es.eigenvalues()[0]);
  }
  double mn = *std::min_element(ks.begin(), ks.end());
  double mean = 0;
  for (double k : ks) mean += k;
  mean /= ks.size();
  double var = 0;
  for (double k : ks) var += (k - mean) * (k - mean);
  var /= ks.size();
  return {mn, mean, mean != 0 ? std::sqrt(var) / std::abs(mean) : 0.0};
}

inline ConstantsLedger constants_ledger(const InstanceConfig& cfg, const FeatureSystem& f, const VectorXd& rho,
                                        const PreferenceDataset& data, double beta) {
  const int n = data.size();
  require(n > 0, "constants_ledger: empty dataset");
  ConstantsLedger c;
  c.xi = data.phi_bar.colwise().squaredNorm().minCoeff();
  c.xi_prime = data.psi_bar.colwise().squaredNorm().minCoeff();
  if (!(c.xi > 0) || !(c.xi_prime > 0)) throw InvalidArgument("constants_ledger: degenerate data, xi = 0");
  c.S_R = s_r(cfg.F);
  c.L2 = 2.0 * std::exp(2.0 * cfg.F);
  c.C_PL = c_pl(cfg.F, c.xi, n);
  c.J_max = j_max(data);
  DpoLipschitz L = dpo_lipschitz(beta, cfg.B, c.J_max);
  c.L1_dpo = L.L1;
  c.L2_dpo = L.L2;
  c.C_PL_dpo = c_pl_dpo(beta, cfg.B, c.J_max, c.xi_prime, n);
  c.C_floor = c_floor(beta, cfg.B, f.Y);
  auto k = kappa_stats(f, rho, cfg.B, cfg.seed);
  c.kappa_hat = k[0];
  c.kappa_mean = k[1];
  c.kappa_cv = k[2];
  c.S_M = s_m(cfg.B_occ);
  c.U_prime = u_prime(cfg.B_occ);
  c.S_P = s_m(cfg.B);
  c.U = u_prime(cfg.B);
  return c;
}

// ---------------------------------------------------------------- oracle solver

enum class LossKind { mle, dpo, dpo_mdp };

struct OracleParams {
  double cap = std::numeric_limits<double>::infinity();  ///< F, B or B'
  double beta = 1.0;
  std::optional<VectorXd> theta0;
  double tol = 1e-10;
};

struct OracleResult {
  VectorXd param;
  double loss = 0.0;
  double grad_norm = 0.0;  ///< norm of the projected-gradient mapping
  bool on_boundary = false;
  bool precision_warning = false;
  bool degenerate = false;  ///< beta = 0: loss is constant, theta0 returned
  int iterations = 0;
};

namespace detail {

/// mean softplus(-(A^T u + c)), with gradient and Hessian in u.
struct OffsetLogistic {
  const MatrixXd& A;
  VectorXd c;

  double value(const VectorXd& u) const {
    VectorXd z = A.transpose() * u + c;
    double s = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) s += softplus(-z[i]);
    return s / z.size();
  }
  void eval(const VectorXd& u, double& f, VectorXd& g, MatrixXd& H) const {
    VectorXd z = A.transpose() * u + c;
    const Eigen::Index n = z.size();
    VectorXd w(n), h(n);
    double s = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      s += softplus(-z[i]);
      double sm = sigmoid(-z[i]);
      w[i] = -sm;
      h[i] = sm * sigmoid(z[i]);
    }
    f = s / n;
    g = A * w / static_cast<double>(n);
    H = A * h.asDiagonal() * A.transpose() / static_cast<double>(n);
  }
};

/// Newton with backtracking on f(u) + lambda/2 ||u||^2. Stops at gtol, at
/// the round-off floor (no 10% gradient progress in 4 steps), or after 500
/// steps. Returns false only if the iterate escapes the radius `escape`.
inline bool newton_min(const OffsetLogistic& L, double lambda, VectorXd& u, double gtol, double escape,
                       int& iters) {
  double best = std::numeric_limits<double>::infinity();
  int stalled = 0;
  for (int it = 0; it < 500; ++it) {
    ++iters;
    double f;
    VectorXd g;
    MatrixXd H;
    L.eval(u, f, g, H);
    f += 0.5 * lambda * u.squaredNorm();
    g += lambda * u;
    H.diagonal().array() += lambda;
    const double gn = g.norm();
    if (gn <= gtol) return true;
    if (gn < 0.9 * best) {
      best = gn;
      stalled = 0;
    } else if (++stalled >= 4) {
      return true;
    }
    MatrixXd Hr = H;
    Hr.diagonal().array() += 1e-14 * (1.0 + H.diagonal().maxCoeff());
    VectorXd step = -Hr.ldlt().solve(g);
    if (!step.allFinite() || g.dot(step) >= 0) step = -g;
    const double slope = g.dot(step);
    double s = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      VectorXd cand = u + s * step;
      double fc = L.value(cand) + 0.5 * lambda * cand.squaredNorm();
      if (fc <= f + 1e-4 * s * slope) {
        u = cand;
        moved = true;
        break;
      }
      s *= 0.5;
    }
    if (!moved) {
      // Round-off floor in f: take the full step only if it shrinks the gradient.
      VectorXd cand = u + step;
      double fc;
      VectorXd gc;
      MatrixXd Hc;
      L.eval(cand, fc, gc, Hc);
      gc += lambda * cand;
      if (gc.norm() < gn) u = cand;
      return u.norm() <= escape;
    }
    if (u.norm() > escape) return false;
  }
  return true;
}

}  // namespace detail

/**
 * High-precision minimiser of an offset-logistic loss over a norm ball. Works
 * in the scaled variable u = beta * theta (u = omega for MLE). The
 * unconstrained Newton solution is used when it lies inside the ball;
 * otherwise the ridge weight lambda with ||u(lambda)|| = radius is found by a
 * safeguarded Newton iteration on 1/||u(lambda)||.
 */
inline OracleResult oracle_solve(LossKind kind, const PreferenceDataset& data, const OracleParams& p) {
  require(data.size() > 0, "oracle_solve: empty dataset");
  const MatrixXd& A = kind == LossKind::mle ? data.phi_bar : data.psi_bar;
  const Eigen::Index d = A.rows();
  double scale = 1.0;
  VectorXd c = VectorXd::Zero(data.size());
  if (kind == LossKind::dpo) {
    require(data.kind == DataKind::bandit && data.has_offsets(), "oracle_solve: dpo needs bandit data with offsets");
    scale = p.beta;
    c = -p.beta * data.offsets;
  } else if (kind == LossKind::dpo_mdp) {
    require(data.kind == DataKind::trajectory && data.has_offsets(), "oracle_solve: dpo_mdp needs trajectory offsets");
    scale = p.beta;
    c = p.beta * data.offsets;
  }
  OracleResult res;
  if (kind != LossKind::mle && p.beta == 0.0) {
    res.param = p.theta0.value_or(VectorXd::Zero(d));
    res.degenerate = true;
    res.loss = std::log(2.0);
    return res;
  }
  require(scale > 0, "oracle_solve: beta must be positive");
  detail::OffsetLogistic L{A, c};
  const double R = p.cap * scale;
  const double gtol = 1e-2 * p.tol / scale;

  VectorXd u = VectorXd::Zero(d);
  int iters = 0;
  bool inside = detail::newton_min(L, 0.0, u, gtol, std::isinf(R) ? 1e300 : 4.0 * R + 10.0, iters);
  if (!(inside && u.norm() <= R)) {
    // Constrained: find lambda > 0 with ||u(lambda)|| = R.
    double lo = 0.0, hi = 1e-3;
    VectorXd uh = VectorXd::Zero(d);
    for (int k = 0; k < 200; ++k) {
      detail::newton_min(L, hi, uh, gtol, 1e300, iters);
      if (uh.norm() <= R) break;
      lo = hi;
      hi *= 4.0;
    }
    double lam = hi;
    u = uh;
    for (int k = 0; k < 200; ++k) {
      double nu = u.norm();
      if (std::abs(nu - R) <= 1e-15 * R) break;
      if (nu > R) lo = lam; else hi = lam;
      // Newton step on phi(lambda) = 1/||u|| - 1/R, du/dlambda = -(H + lambda I)^{-1} u.
      double f;
      VectorXd g;
      MatrixXd H;
      L.eval(u, f, g, H);
      H.diagonal().array() += lam;
      VectorXd du = -H.ldlt().solve(u);
      double dphi = -u.dot(du) / (nu * nu * nu);
      double next = lam - (1.0 / nu - 1.0 / R) / dphi;
      if (!(next > lo && next < hi) || !std::isfinite(next)) next = lo > 0 ? std::sqrt(lo * hi) : 0.5 * hi;
      if (next == lam) break;
      lam = next;
      detail::newton_min(L, lam, u, gtol, 1e300, iters);
      if (hi - lo <= 1e-16 * hi) break;
    }
    u = project_ball(u, R);
    res.on_boundary = true;
  }

  res.param = u / scale;
  res.iterations = iters;
  res.loss = L.value(u);
  double f;
  VectorXd g;
  MatrixXd H;
  L.eval(u, f, g, H);
  VectorXd gw = g * scale;
  VectorXd mapped = res.param - project_ball(res.param - gw, p.cap);
  res.grad_norm = mapped.norm();
  res.precision_warning = res.grad_norm > 1e-6;
  return res;
}

// ---------------------------------------------------------------- tabular oracle

namespace detail {

/// Euclidean projection onto the probability simplex.
inline VectorXd project_simplex(const VectorXd& v) {
  const Eigen::Index n = v.size();
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0, tau = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    css += u[k];
    double t = (css - 1.0) / static_cast<double>(k + 1);
    if (u[k] - t > 0) tau = t;
  }
  return (v.array() - tau).cwiseMax(0.0);
}

}  // namespace detail

struct TabularOracleResult {
  TabularPolicy policy;
  double value = 0.0;
  double grad_mapping_norm = 0.0;
  int iterations = 0;
};

/**
 * Projected gradient ascent (Barzilai-Borwein steps with backtracking) on each
 * context's simplex for sum_y p [r - beta log(p/mu)].
 */
inline TabularOracleResult tabular_regularized_oracle(const MatrixXd& r, const TabularPolicy& mu, double beta,
                                                      const VectorXd& rho, double tol = 1e-9,
                                                      int max_iter = 1000000) {
  require(beta > 0, "tabular_regularized_oracle: beta must be positive");
  const Eigen::Index X = r.rows(), Y = r.cols();
  TabularOracleResult out;
  out.policy.probs.resize(X, Y);
  auto obj = [&](Eigen::Index x, const VectorXd& p) {
    double s = 0;
    for (Eigen::Index y = 0; y < Y; ++y)
      if (p[y] > 0) s += p[y] * (r(x, y) - beta * std::log(p[y] / mu.probs(x, y)));
    return s;
  };
  auto grad = [&](Eigen::Index x, const VectorXd& p) {
    VectorXd g(Y);
    for (Eigen::Index y = 0; y < Y; ++y) g[y] = r(x, y) - beta * (std::log(p[y] / mu.probs(x, y)) + 1.0);
    return g;
  };
  double worst = 0.0;
  for (Eigen::Index x = 0; x < X; ++x) {
    VectorXd p = VectorXd::Constant(Y, 1.0 / Y);
    VectorXd g = grad(x, p);
    double f = obj(x, p);
    double step = 1.0 / beta;
    VectorXd p_prev, g_prev;
    double gm = 0.0;
    int it = 0;
    for (; it < max_iter; ++it) {
      VectorXd gt = g.array() - g.mean();
      gm = gt.norm();
      if (gm <= tol) break;
      if (it > 0) {
        VectorXd s = p - p_prev, yv = g - g_prev;
        double sy = s.dot(yv);
        if (sy < 0) step = std::clamp(-s.squaredNorm() / sy, 1e-12, 1e6);
      }
      bool moved = false;
      for (int ls = 0; ls < 80; ++ls) {
        VectorXd cand = detail::project_simplex(p + step * g);
        if ((cand.array() > 0).all()) {
          double fc = obj(x, cand);
          if (fc >= f + 1e-4 * g.dot(cand - p) || (cand - p).norm() < 1e-15) {
            p_prev = p;
            g_prev = g;
            p = cand;
            f = fc;
            g = grad(x, p);
            moved = true;
            break;
          }
        }
        step *= 0.5;
      }
      if (!moved) break;
    }
    out.iterations += it;
    worst = std::max(worst, gm);
    out.policy.probs.row(x) = p.transpose() / p.sum();
  }
  out.grad_mapping_norm = worst;
  out.value = values(out.policy, r, rho, beta, mu).V_reg;
  return out;
}

/**
 * Best loglinear policy for the population regularised objective, by projected
 * gradient ascent over the B-ball with backtracking. Only uniform rho is supported.
 */
inline VectorXd best_loglinear_regularized(const FeatureSystem& f, const MatrixXd& r, const MatrixXd& log_mu,
                                           double beta, double B, const VectorXd& theta0, int max_iter = 20000,
                                           double tol = 1e-10) {
  std::vector<int> ctx(f.X);
  for (int x = 0; x < f.X; ++x) ctx[x] = x;
  VectorXd th = project_ball(theta0, B);
  LossGrad cur = regularized_objective_grad(th, f, r, log_mu, beta, ctx);
  double step = 1.0;
  for (int it = 0; it < max_iter; ++it) {
    VectorXd mapped = th - project_ball(th + cur.grad, B);
    if (mapped.norm() <= tol) break;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      VectorXd cand = project_ball(th + step * cur.grad, B);
      LossGrad c = regularized_objective_grad(cand, f, r, log_mu, beta, ctx);
      if (c.loss >= cur.loss + 1e-4 * cur.grad.dot(cand - th)) {
        th = cand;
        cur = c;
        moved = true;
        step *= 2.0;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
  }
  return th;
}

// ---------------------------------------------------------------- rate fits

enum class RateModel { geometric, power };

struct RateFit {
  double slope = 0.0;      ///< d log(v) / dt or d log(v) / d log(n)
  double ratio = 0.0;      ///< exp(slope) for geometric fits
  double intercept = 0.0;
  double r_squared = 0.0;
};

inline RateFit rate_fit(const std::vector<double>& t, const std::vector<double>& v, RateModel model) {
  require(t.size() == v.size(), "rate_fit: length mismatch");
  require(t.size() >= 5, "rate_fit: need at least 5 points");
  const std::size_t n = t.size();
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(v[i] > 0)) throw InvalidArgument("rate_fit: values must be positive");
    if (model == RateModel::power) require(t[i] > 0, "rate_fit: power fit needs positive abscissae");
    xs[i] = model == RateModel::power ? std::log(t[i]) : t[i];
    ys[i] = std::log(v[i]);
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  require(sxx > 0, "rate_fit: abscissae are all equal");
  RateFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.ratio = std::exp(f.slope);
  double sse = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double e = ys[i] - (f.intercept + f.slope * xs[i]);
    sse += e * e;
  }
  f.r_squared = syy > 0 ? 1.0 - sse / syy : 1.0;
  return f;
}

// ---------------------------------------------------------------- tabular DPO probe

/// Gradient of the tabular DPO loss with respect to the entries pi(y|x).
inline MatrixXd tabular_dpo_gradient(const PreferenceDataset& data, double beta, const TabularPolicy& pi,
                                     const TabularPolicy& mu) {
  require(data.kind == DataKind::bandit, "tabular_dpo_gradient: bandit data required");
  const int n = data.size();
  MatrixXd g = MatrixXd::Zero(pi.X(), pi.Y());
  for (const PairRecord& rec : data.pairs) {
    double pw = pi.probs(rec.x, rec.yw), pl = pi.probs(rec.x, rec.yl);
    double f = beta * (std::log(pw / mu.probs(rec.x, rec.yw)) - std::log(pl / mu.probs(rec.x, rec.yl)));
    double w = 1.0 - sigmoid(f);
    if (w == 0.0) continue;  // saturated: both terms vanish in the limit
    g(rec.x, rec.yw) -= beta / n * w / pw;
    g(rec.x, rec.yl) += beta / n * w / pl;
  }
  return g;
}

struct ProbeRow {
  double eps = 0.0;
  double component = 0.0;  ///< |d loss_rec / d pi(yw|x)|: the probed record's own term
  double grad_norm = 0.0;
  double loglinear_grad_norm = 0.0;
};

/**
 * Evaluates the tabular DPO gradient at policies that put mass eps on the
 * preferred action of record `rec` (the rest of that context follows mu), and
 * the loglinear DPO gradient along a matching path inside the B-ball.
 */
inline std::vector<ProbeRow> tabular_dpo_curvature_probe(const PreferenceDataset& data, double beta,
                                                         const TabularPolicy& mu, const std::vector<double>& eps_grid,
                                                         double B, int rec = 0) {
  require(rec >= 0 && rec < data.size(), "tabular_dpo_curvature_probe: record out of range");
  const PairRecord& r0 = data.pairs[rec];
  VectorXd dir = data.psi_bar.col(rec);
  std::vector<ProbeRow> out;
  for (double eps : eps_grid) {
    require(eps > 0 && eps <= 1, "tabular_dpo_curvature_probe: eps must lie in (0, 1]");
    TabularPolicy pi = mu;
    double rest = 1.0 - mu.probs(r0.x, r0.yw);
    for (int y = 0; y < pi.Y(); ++y)
      pi.probs(r0.x, y) = y == r0.yw ? eps : (rest > 0 ? (1.0 - eps) * mu.probs(r0.x, y) / rest : 0.0);
    MatrixXd g = tabular_dpo_gradient(data, beta, pi, mu);
    ProbeRow row;
    row.eps = eps;
    const double pl = pi.probs(r0.x, r0.yl);
    const double f0 = beta * (std::log(eps / mu.probs(r0.x, r0.yw)) - std::log(pl / mu.probs(r0.x, r0.yl)));
    const double w0 = 1.0 - sigmoid(f0);
    row.component = w0 == 0.0 ? 0.0 : beta / data.size() * w0 / eps;
    row.grad_norm = g.norm();
    VectorXd th = dir.norm() > 0 ? VectorXd(-std::log(1.0 / eps + 1.0) * dir / dir.norm()) : VectorXd(dir);
    th = project_ball(th, B);
    row.loglinear_grad_norm = data.has_offsets() ? dpo_loss_grad(th, data, beta).grad.norm() : 0.0;
    out.push_back(row);
  }
  return out;
}

}  // namespace prefopt
