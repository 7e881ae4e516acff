#include <cmath>

#include <gtest/gtest.h>

#include "prefopt/envgen.hpp"
#include "prefopt/mdp.hpp"
#include "prefopt/serialize.hpp"
#include "test_util.hpp"

using namespace prefopt;

namespace {

DeterministicMdp random_mdp(Rng& rng, int X, int Y, double gamma, int H = 1) {
  DeterministicMdp m;
  m.X = X;
  m.Y = Y;
  m.gamma = gamma;
  m.horizon = H;
  m.next.resize(X * Y);
  for (int& s : m.next) s = rng.below(X);
  m.rho.resize(X);
  for (int x = 0; x < X; ++x) m.rho[x] = 0.1 + rng.uniform();
  m.rho /= m.rho.sum();
  return m;
}

/// (1 - gamma) sum_t gamma^t Pr(x_t = x, y_t = y), truncated at H.
MatrixXd occupancy_by_power_iteration(const DeterministicMdp& m, const TabularPolicy& pi, int H) {
  MatrixXd d = MatrixXd::Zero(m.X, m.Y);
  VectorXd s = m.rho;
  double g = 1.0;
  for (int t = 0; t < H; ++t) {
    VectorXd nxt = VectorXd::Zero(m.X);
    for (int x = 0; x < m.X; ++x)
      for (int y = 0; y < m.Y; ++y) {
        d(x, y) += (1 - m.gamma) * g * s[x] * pi(x, y);
        nxt[m.T(x, y)] += s[x] * pi(x, y);
      }
    s = nxt;
    g *= m.gamma;
  }
  return d;
}

MatrixXd random_reward(Rng& rng, int X, int Y) {
  MatrixXd r(X, Y);
  for (int i = 0; i < r.size(); ++i) r.data()[i] = rng.uniform();
  return r;
}

InstanceConfig nested_cfg(std::uint64_t seed) {
  InstanceConfig c;
  c.X = 5;
  c.Y = 3;
  c.d_R = 2;
  c.d_P = 4;
  c.d_M = 8;
  c.gamma = 0.8;
  c.feature_mode = FeatureMode::nested_column_space;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Occupancy, SingleStateEqualsPolicy) {
  Rng rng(1);
  DeterministicMdp m = random_mdp(rng, 1, 4, 0.9);
  TabularPolicy pi = testutil::random_policy(rng, 1, 4);
  EXPECT_LE((occupancy_of_policy(pi, m).d - pi.probs).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Occupancy, ZeroDiscountIsInitialDistributionTimesPolicy) {
  Rng rng(2);
  DeterministicMdp m = random_mdp(rng, 5, 3, 0.0);
  TabularPolicy pi = testutil::random_policy(rng, 5, 3);
  MatrixXd d = occupancy_of_policy(pi, m).d;
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 3; ++y) EXPECT_NEAR(d(x, y), m.rho[x] * pi(x, y), 1e-16);
}

TEST(Occupancy, MatchesPowerIteration) {
  Rng rng(3);
  for (int k = 0; k < 20; ++k) {
    DeterministicMdp m = random_mdp(rng, 4, 3, 0.9);
    TabularPolicy pi = testutil::random_policy(rng, 4, 3);
    EXPECT_LE((occupancy_of_policy(pi, m).d - occupancy_by_power_iteration(m, pi, 200)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(OccupancyProperty, NormalisedFeasibleAndInvertible) {
  Rng rng(4);
  for (int k = 0; k < 100; ++k) {
    const int X = 1 + rng.below(6), Y = 1 + rng.below(4);
    DeterministicMdp m = random_mdp(rng, X, Y, 0.95 * rng.uniform());
    TabularPolicy pi = testutil::random_policy(rng, X, Y);
    OccupancyMeasure d = occupancy_of_policy(pi, m);
    EXPECT_NEAR(d.d.sum(), 1.0, 1e-12);
    EXPECT_GE(d.d.minCoeff(), 0.0);
    EXPECT_LE(flow_residual(d, m).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((policy_from_occupancy(d).probs - pi.probs).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(FlowResidual, HandComputedTwoStateCase) {
  DeterministicMdp m;
  m.X = 2;
  m.Y = 2;
  m.gamma = 0.5;
  m.next = {1, 0, 1, 1};
  m.rho = VectorXd::Constant(2, 0.5);
  OccupancyMeasure d{MatrixXd::Constant(2, 2, 0.25)};
  VectorXd res = flow_residual(d, m);
  EXPECT_NEAR(res[0], 0.125, 1e-16);
  EXPECT_NEAR(res[1], -0.125, 1e-16);
}

TEST(FlowResidual, AffineInOccupancy) {
  Rng rng(5);
  for (int k = 0; k < 20; ++k) {
    DeterministicMdp m = random_mdp(rng, 4, 3, 0.7);
    OccupancyMeasure d{random_reward(rng, 4, 3)};
    OccupancyMeasure d2{2 * d.d};
    VectorXd expect = 2 * flow_residual(d, m) + (1 - m.gamma) * m.rho;
    EXPECT_LE((flow_residual(d2, m) - expect).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(PolicyFromOccupancy, UniformAndZeroMass) {
  OccupancyMeasure d{MatrixXd::Constant(3, 4, 1.0 / 12)};
  EXPECT_LE((policy_from_occupancy(d).probs.array() - 0.25).abs().maxCoeff(), 1e-16);
  d.d.row(1).setZero();
  d.d.row(2).setZero();
  try {
    policy_from_occupancy(d);
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find(" 1"), std::string::npos);
    EXPECT_NE(msg.find(" 2"), std::string::npos);
  }
}

TEST(Value, ConstantRewardAndZeroDiscount) {
  Rng rng(6);
  DeterministicMdp m = random_mdp(rng, 5, 3, 0.75);
  TabularPolicy pi = testutil::random_policy(rng, 5, 3);
  EXPECT_NEAR(value_from_occupancy(occupancy_of_policy(pi, m), MatrixXd::Ones(5, 3), m.gamma), 4.0, 1e-12);
  m.gamma = 0.0;
  MatrixXd r = random_reward(rng, 5, 3);
  double expect = 0;
  for (int x = 0; x < 5; ++x) expect += m.rho[x] * pi.probs.row(x).dot(r.row(x));
  EXPECT_NEAR(value_from_occupancy(occupancy_of_policy(pi, m), r, 0.0), expect, 1e-15);
}

TEST(Value, MatchesRolloutAverage) {
  Rng rng(7);
  DeterministicMdp m = random_mdp(rng, 4, 3, 0.8);
  TabularPolicy pi = testutil::random_policy(rng, 4, 3);
  MatrixXd r = random_reward(rng, 4, 3);
  const int H = effective_horizon(0.8, 1e-8), N = 20000;
  double s = 0, s2 = 0;
  for (int i = 0; i < N; ++i) {
    int x0 = rng.categorical(m.rho);
    double g = discounted_return(rollout(m, pi, x0, H, rng), r, m.gamma, H);
    s += g;
    s2 += g * g;
  }
  double mean = s / N, se = std::sqrt((s2 / N - mean * mean) / N);
  double v = value_from_occupancy(occupancy_of_policy(pi, m), r, m.gamma);
  EXPECT_LE(std::abs(mean - v), 4 * se + 1e-8);
  EXPECT_NEAR(m.rho.dot(state_values(m, r, pi)), v, 1e-12);
}

TEST(RegularizedOccupancy, LargeTemperatureReturnsReference) {
  Rng rng(8);
  DeterministicMdp m = random_mdp(rng, 4, 3, 0.9);
  OccupancyMeasure d_mu = occupancy_of_policy(testutil::random_policy(rng, 4, 3), m);
  auto sol = solve_regularized_occupancy(random_reward(rng, 4, 3), d_mu, 1e6, m);
  EXPECT_LE((sol.d.d - d_mu.d).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(RegularizedOccupancy, SingleStateIsGibbs) {
  Rng rng(9);
  DeterministicMdp m = random_mdp(rng, 1, 5, 0.6);
  TabularPolicy mu = testutil::random_policy(rng, 1, 5);
  OccupancyMeasure d_mu = occupancy_of_policy(mu, m);
  MatrixXd r = random_reward(rng, 1, 5);
  const double beta = 0.3;
  auto sol = solve_regularized_occupancy(r, d_mu, beta, m);
  VectorXd w(5);
  for (int y = 0; y < 5; ++y) w[y] = mu(0, y) * std::exp(r(0, y) / beta);
  w /= w.sum();
  EXPECT_LE((sol.d.d.row(0).transpose() - w).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(RegularizedOccupancyProperty, OptimalityDualityStationarity) {
  Rng rng(10);
  for (int k = 0; k < 20; ++k) {
    const int X = 2 + rng.below(5), Y = 2 + rng.below(3);
    DeterministicMdp m = random_mdp(rng, X, Y, 0.95 * rng.uniform());
    OccupancyMeasure d_mu = occupancy_of_policy(testutil::random_policy(rng, X, Y), m);
    MatrixXd r = random_reward(rng, X, Y);
    const double beta = 0.05 + rng.uniform();
    auto sol = solve_regularized_occupancy(r, d_mu, beta, m);
    EXPECT_LE(flow_residual(sol.d, m).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(sol.d.d.sum(), 1.0, 1e-8);
    EXPECT_NEAR(sol.primal_value, sol.dual_value, 1e-7);
    EXPECT_EQ(sol.dual.e_alpha, advantage_table(sol.dual.alpha, r, m));
    MatrixXd stat = beta * (sol.d.d.array() / d_mu.d.array()).log().matrix() +
                    MatrixXd::Constant(X, Y, beta * sol.dual.log_partition) - sol.dual.e_alpha;
    EXPECT_LE(stat.cwiseAbs().maxCoeff(), 1e-9);
    for (int j = 0; j < 20; ++j) {
      OccupancyMeasure other = occupancy_of_policy(testutil::random_policy(rng, X, Y), m);
      EXPECT_LE(regularized_occupancy_objective(other, r, d_mu, beta), sol.primal_value + 1e-10);
    }
  }
}

TEST(DiscountedReturn, ClosedForms) {
  Trajectory tau;
  for (int t = 0; t < 10; ++t) {
    tau.states.push_back(t % 3);
    tau.actions.push_back(t % 2);
  }
  EXPECT_EQ(discounted_return(tau, MatrixXd::Zero(3, 2), 0.9, 10), 0.0);
  EXPECT_NEAR(discounted_return(tau, MatrixXd::Ones(3, 2), 0.9, 10), (1 - std::pow(0.9, 10)) / 0.1, 1e-14);
  Rng rng(11);
  MatrixXd r = random_reward(rng, 3, 2);
  double horner = 0;
  for (int t = 9; t >= 0; --t) horner = r(tau.states[t], tau.actions[t]) + 0.7 * horner;
  EXPECT_NEAR(discounted_return(tau, r, 0.7, 10), horner, 1e-14);
  EXPECT_THROW(discounted_return(tau, r, 0.7, 11), InvalidArgument);
}

TEST(Telescoping, OneStepZeroDiscountIsExact) {
  Rng rng(12);
  DeterministicMdp m = random_mdp(rng, 3, 3, 0.0);
  OccupancyMeasure d_mu = occupancy_of_policy(testutil::random_policy(rng, 3, 3), m);
  MatrixXd r = random_reward(rng, 3, 3);
  auto sol = solve_regularized_occupancy(r, d_mu, 0.5, m);
  for (int x = 0; x < 3; ++x)
    for (int y = 0; y < 3; ++y) {
      Trajectory tau{{x}, {y}};
      auto tc = telescoping_check(sol.d, d_mu, sol.dual, 0.5, tau, r, 0.0, 1);
      EXPECT_NEAR(tc.lhs, r(x, y), 0.0);
      EXPECT_LE(tc.deviation, 1e-12);
    }
}

TEST(Telescoping, DeviationEqualsTailTerm) {
  Rng rng(13);
  DeterministicMdp m = random_mdp(rng, 5, 3, 0.9);
  const int H = effective_horizon(0.9, 1e-6);
  TabularPolicy mu = testutil::random_policy(rng, 5, 3);
  OccupancyMeasure d_mu = occupancy_of_policy(mu, m);
  MatrixXd r = random_reward(rng, 5, 3);
  const double beta = 0.4;
  auto sol = solve_regularized_occupancy(r, d_mu, beta, m);
  TabularPolicy pi_star = policy_from_occupancy(sol.d);
  for (int i = 0; i < 100; ++i) {
    Trajectory tau = rollout(m, pi_star, rng.categorical(m.rho), H + 1, rng);
    auto tc = telescoping_check(sol.d, d_mu, sol.dual, beta, tau, r, m.gamma, H);
    double tail = std::pow(m.gamma, H) * sol.dual.alpha[tau.states[H]];
    EXPECT_NEAR(tc.lhs - tc.rhs, -tail, 1e-8);
    EXPECT_LE(tc.deviation, std::pow(m.gamma, H) * sol.dual.alpha.cwiseAbs().maxCoeff() + 1e-8);
  }
}

TEST(Telescoping, SensitiveToPerturbedOptimum) {
  Rng rng(14);
  DeterministicMdp m = random_mdp(rng, 4, 3, 0.9);
  const int H = effective_horizon(0.9, 1e-8);
  OccupancyMeasure d_mu = occupancy_of_policy(testutil::random_policy(rng, 4, 3), m);
  MatrixXd r = random_reward(rng, 4, 3);
  auto sol = solve_regularized_occupancy(r, d_mu, 0.4, m);
  Trajectory tau = rollout(m, policy_from_occupancy(sol.d), 0, H, rng);
  OccupancyMeasure bent = sol.d;
  bent.d(tau.states[0], tau.actions[0]) *= 1.1;
  EXPECT_LE(telescoping_check(sol.d, d_mu, sol.dual, 0.4, tau, r, m.gamma, H).deviation, 1e-6);
  EXPECT_GE(telescoping_check(bent, d_mu, sol.dual, 0.4, tau, r, m.gamma, H).deviation, 0.4 * std::log(1.1) * 0.99);
}

TEST(PhiPi, ZeroDiscountIsNegatedFeatures) {
  Rng rng(15);
  DeterministicMdp m = random_mdp(rng, 4, 3, 0.0);
  FeatureSystem f = testutil::random_features(rng, 4, 3, 3, 2);
  TabularPolicy pi = testutil::random_policy(rng, 4, 3);
  EXPECT_LE((phi_pi_matrix(m, f, pi) + f.phi).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PhiPi, SingleStateSingleAction) {
  DeterministicMdp m;
  m.X = 1;
  m.Y = 1;
  m.gamma = 0.75;
  m.next = {0};
  m.rho = VectorXd::Ones(1);
  FeatureSystem f;
  f.X = 1;
  f.Y = 1;
  f.phi = MatrixXd::Constant(1, 1, 0.5);
  f.psi = f.phi;
  TabularPolicy pi{MatrixXd::Ones(1, 1)};
  // gamma phi / (1 - gamma) - phi / (1 - gamma) = -phi.
  EXPECT_NEAR(phi_pi_matrix(m, f, pi)(0, 0), -0.5, 1e-15);
}

TEST(PhiPi, MatchesMonteCarlo) {
  Rng rng(16);
  DeterministicMdp m = random_mdp(rng, 3, 2, 0.7);
  FeatureSystem f = testutil::random_features(rng, 3, 2, 2, 2);
  TabularPolicy pi = testutil::random_policy(rng, 3, 2);
  MatrixXd P = phi_pi_matrix(m, f, pi);
  const int H = effective_horizon(0.7, 1e-10), N = 10000;
  auto feature_return = [&](const Trajectory& tau) {
    VectorXd s = VectorXd::Zero(2);
    double g = 1;
    for (int t = 0; t < H; ++t) {
      s += g * f.phi.col(f.index(tau.states[t], tau.actions[t]));
      g *= m.gamma;
    }
    return s;
  };
  for (int x = 0; x < 3; ++x)
    for (int y = 0; y < 2; ++y) {
      // One sample = gamma * (return from x) - (return from x after forcing y).
      VectorXd s = VectorXd::Zero(2), s2 = VectorXd::Zero(2);
      for (int i = 0; i < N; ++i) {
        VectorXd a = feature_return(rollout(m, pi, x, H, rng));
        Trajectory forced = rollout(m, pi, m.T(x, y), H - 1, rng);
        forced.states.insert(forced.states.begin(), x);
        forced.actions.insert(forced.actions.begin(), y);
        VectorXd v = m.gamma * a - feature_return(forced);
        s += v;
        s2 += v.cwiseProduct(v);
      }
      VectorXd mean = s / N;
      VectorXd se = ((s2 / N - mean.cwiseProduct(mean)) / N).cwiseSqrt();
      for (int k = 0; k < 2; ++k) EXPECT_LE(std::abs(mean[k] - P(k, f.index(x, y))), 3 * se[k] + 1e-9);
    }
}

TEST(MdpInstanceNested, ReferenceAndOptimumAreLoglinear) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    MdpInstance inst = make_mdp_instance(nested_cfg(s));
    EXPECT_LE(inst.theta_mu_occ_residual, 1e-8);
    auto sol = solve_regularized_occupancy(inst.true_reward, inst.d_mu, inst.config.beta, inst.mdp);
    VectorXd log_d = detail::table_to_flat(sol.d.d.array().log().matrix());
    const MatrixXd& P = *inst.features.psi_occ;
    MatrixXd A(P.cols(), P.rows() + 1);
    A << P.transpose(), VectorXd::Ones(P.cols());
    VectorXd fit = A.completeOrthogonalDecomposition().solve(log_d);
    EXPECT_LE((A * fit - log_d).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(MdpJson, OccupancyAndDualLayout) {
  Rng rng(17);
  DeterministicMdp m = random_mdp(rng, 3, 2, 0.5);
  OccupancyMeasure d_mu = occupancy_of_policy(testutil::random_policy(rng, 3, 2), m);
  auto sol = solve_regularized_occupancy(random_reward(rng, 3, 2), d_mu, 0.7, m);
  EXPECT_EQ(matrix_from_json(to_json(sol.d)), sol.d.d);
  json j = to_json(sol.dual);
  EXPECT_EQ(vector_from_json(j["alpha"]), sol.dual.alpha);
  EXPECT_EQ(matrix_from_json(j["e_alpha"]), sol.dual.e_alpha);
  EXPECT_EQ(j["log_partition"].get<double>(), sol.dual.log_partition);
}
