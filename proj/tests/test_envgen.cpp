#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "prefopt/envgen.hpp"
#include "prefopt/serialize.hpp"
#include "test_util.hpp"

using namespace prefopt;

namespace {

bool bit_equal(const MatrixXd& a, const MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

InstanceConfig bandit_cfg(std::uint64_t seed) {
  InstanceConfig c;
  c.X = 6;
  c.Y = 4;
  c.d_R = 3;
  c.d_P = 5;
  c.seed = seed;
  return c;
}

InstanceConfig mdp_cfg(std::uint64_t seed) {
  InstanceConfig c;
  c.X = 4;
  c.Y = 3;
  c.d_R = 3;
  c.d_P = 4;
  c.d_M = 5;
  c.seed = seed;
  return c;
}

/// 3-sigma binomial band around p for n trials.
double band(double p, int n) { return 3.0 * std::sqrt(p * (1 - p) / n); }

}  // namespace

TEST(MakeBandit, DeterministicTinyInstance) {
  InstanceConfig c;
  c.X = 1;
  c.Y = 2;
  c.d_R = 1;
  c.d_P = 1;
  c.seed = 424242;
  BanditInstance a = make_bandit_instance(c), b = make_bandit_instance(c);
  EXPECT_TRUE(bit_equal(a.features.phi, b.features.phi));
  EXPECT_TRUE(bit_equal(a.features.psi, b.features.psi));
  EXPECT_TRUE(bit_equal(a.true_reward, b.true_reward));
  EXPECT_TRUE(bit_equal(a.mu_table.probs, b.mu_table.probs));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  c.seed = 424243;
  EXPECT_NE(to_json(make_bandit_instance(c)).dump(), to_json(a).dump());
}

TEST(MakeBandit, NestedRewardRowsInPolicyRowSpace) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    InstanceConfig c = bandit_cfg(s);
    c.d_R = 2;
    c.d_P = 4;
    c.feature_mode = FeatureMode::nested_column_space;
    BanditInstance inst = make_bandit_instance(c);
    const MatrixXd& Psi = inst.features.psi;
    // Least-squares projection of each reward-feature row onto the rows of psi.
    Eigen::JacobiSVD<MatrixXd> svd(Psi.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
    double worst = 0;
    for (int i = 0; i < c.d_R; ++i) {
      VectorXd row = inst.features.phi.row(i).transpose();
      VectorXd fit = Psi.transpose() * svd.solve(row);
      worst = std::max(worst, (row - fit).norm());
    }
    EXPECT_LE(worst, 1e-10) << "seed " << s;
  }
}

TEST(MakeBandit, ZeroMeanFullRankPsi) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    InstanceConfig c = bandit_cfg(s);
    c.feature_mode = FeatureMode::zero_mean_full_rank;
    BanditInstance inst = make_bandit_instance(c);
    EXPECT_LE(inst.features.psi.rowwise().sum().cwiseAbs().maxCoeff(), 1e-10);
    Eigen::FullPivLU<MatrixXd> lu(inst.features.psi);
    EXPECT_EQ(lu.rank(), c.d_P);
  }
}

TEST(MakeBandit, InfeasibleFullRankRequestThrows) {
  InstanceConfig c = bandit_cfg(1);
  c.X = 1;
  c.Y = 3;
  c.d_R = 2;
  c.d_P = 3;
  c.feature_mode = FeatureMode::zero_mean_full_rank;
  EXPECT_THROW(make_bandit_instance(c), InvalidArgument);
}

TEST(MakeBandit, InvalidConfigsThrow) {
  InstanceConfig c = bandit_cfg(1);
  c.d_R = c.X * c.Y + 1;
  EXPECT_THROW(make_bandit_instance(c), InvalidArgument);
  c = bandit_cfg(1);
  c.feature_mode = FeatureMode::nested_column_space;
  c.d_R = 6;
  EXPECT_THROW(make_bandit_instance(c), InvalidArgument);
  c = bandit_cfg(1);
  c.realizable = false;
  c.epsilon_app = 0.0;
  EXPECT_THROW(make_bandit_instance(c), InvalidArgument);
}

TEST(MakeBandit, MisspecificationAmplitudeMeasured) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    InstanceConfig c = bandit_cfg(s);
    c.X = 10;
    c.d_R = 4;
    c.d_P = 8;
    c.F = 10;
    c.feature_mode = FeatureMode::nested_column_space;
    c.realizable = false;
    c.epsilon_app = 0.1;
    BanditInstance inst = make_bandit_instance(c);
    MatrixXd lin = reward_table(inst.reward_fit, inst.features);
    double eps = 0;
    for (int x = 0; x < c.X; ++x)
      for (int y = 0; y < c.Y; ++y) eps = std::max(eps, std::abs(inst.true_reward(x, y) - lin(x, y)));
    EXPECT_GT(eps, 0.0);
    EXPECT_LE(eps, 0.1 + 1e-12);
    EXPECT_NEAR(eps, inst.epsilon_measured, 1e-15);
    // The perturbation is orthogonal to every reward-feature row, so omega* is the least-squares fit.
    VectorXd delta = detail::table_to_flat(inst.true_reward - lin);
    EXPECT_LE((inst.features.phi * delta).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_GE(inst.true_reward.minCoeff(), 0.0);
    EXPECT_LE(inst.true_reward.maxCoeff(), 1.0);
  }
}

TEST(MakeBanditProperty, ContractsAcrossModesAndSeeds) {
  for (FeatureMode mode : {FeatureMode::generic, FeatureMode::zero_mean_full_rank, FeatureMode::nested_column_space})
    for (std::uint64_t s = 0; s < 20; ++s) {
      InstanceConfig c = bandit_cfg(s);
      c.feature_mode = mode;
      c.B = 0.5 + (s % 4);
      c.mu_norm = c.B;
      BanditInstance inst = make_bandit_instance(c);
      inst.features.validate();
      inst.mu_table.validate();
      EXPECT_LE(inst.reward_fit.omega.norm(), c.F * (1 + 1e-12));
      EXPECT_LE(inst.mu.theta.norm(), c.B * (1 + 1e-12));
      EXPECT_GE(inst.true_reward.minCoeff(), 0.0);
      EXPECT_LE(inst.true_reward.maxCoeff(), 1.0 + 1e-12);
      EXPECT_GE(inst.mu_table.probs.minCoeff(), std::exp(-2 * c.B) / c.Y * (1 - 1e-12));
      EXPECT_LE((inst.log_mu.array().exp().matrix() - inst.mu_table.probs).cwiseAbs().maxCoeff(), 1e-15);
    }
}

TEST(SamplePreferences, DeterministicAndCachesExact) {
  BanditInstance inst = make_bandit_instance(bandit_cfg(3));
  PreferenceDataset a = sample_preferences(inst, 200, 99), b = sample_preferences(inst, 200, 99);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_NE(to_json(sample_preferences(inst, 200, 100)).dump(), to_json(a).dump());
  const FeatureSystem& f = inst.features;
  for (int i = 0; i < a.size(); ++i) {
    const PairRecord& p = a.pairs[i];
    EXPECT_NE(p.yw, p.yl);
    VectorXd pb = f.phi.col(f.index(p.x, p.yw)) - f.phi.col(f.index(p.x, p.yl));
    VectorXd qb = f.psi.col(f.index(p.x, p.yw)) - f.psi.col(f.index(p.x, p.yl));
    EXPECT_TRUE(bit_equal(a.phi_bar.col(i), pb));
    EXPECT_TRUE(bit_equal(a.psi_bar.col(i), qb));
    EXPECT_EQ(a.offsets[i], inst.log_mu(p.x, p.yw) - inst.log_mu(p.x, p.yl));
  }
}

TEST(SamplePreferences, ConstantRewardIsFairCoin) {
  BanditInstance inst = make_bandit_instance(bandit_cfg(4));
  inst.true_reward.setConstant(0.4);
  const int n = 10000;
  PreferenceDataset d = sample_preferences(inst, n, 7);
  int first = 0;
  for (const auto& p : d.pairs) first += p.first_won;
  EXPECT_NEAR(static_cast<double>(first) / n, 0.5, band(0.5, n));
}

TEST(SamplePreferences, LogThreeGapGivesThreeQuarters) {
  InstanceConfig c;
  c.X = 1;
  c.Y = 2;
  c.d_R = 1;
  c.d_P = 1;
  c.seed = 5;
  BanditInstance inst = make_bandit_instance(c);
  inst.true_reward(0, 0) = std::log(3.0);
  inst.true_reward(0, 1) = 0.0;
  const int n = 10000;
  PreferenceDataset d = sample_preferences(inst, n, 8);
  int wins0 = 0;
  for (const auto& p : d.pairs) wins0 += p.yw == 0;
  EXPECT_NEAR(static_cast<double>(wins0) / n, 0.75, band(0.75, n));
}

TEST(SamplePreferences, ChiSquareOnFixedCell) {
  InstanceConfig c;
  c.X = 1;
  c.Y = 3;
  c.d_R = 2;
  c.d_P = 2;
  c.seed = 6;
  BanditInstance inst = make_bandit_instance(c);
  const int n = 100000;
  PreferenceDataset d = sample_preferences(inst, n, 9);
  // Cell: first candidate 0, second candidate 1.
  long trials = 0, wins = 0;
  for (const auto& p : d.pairs) {
    int y1 = p.first_won ? p.yw : p.yl, y2 = p.first_won ? p.yl : p.yw;
    if (y1 == 0 && y2 == 1) {
      ++trials;
      wins += p.first_won;
    }
  }
  ASSERT_GT(trials, 1000);
  const double pr = bt_prob(inst.true_reward(0, 0), inst.true_reward(0, 1));
  const double e1 = trials * pr, e0 = trials * (1 - pr);
  const double chi2 = (wins - e1) * (wins - e1) / e1 + ((trials - wins) - e0) * ((trials - wins) - e0) / e0;
  EXPECT_LT(chi2, 10.828);  // 0.001 critical value, one degree of freedom
}

TEST(SamplePreferences, IdenticalFeaturesExhaustRedrawBudget) {
  InstanceConfig c;
  c.X = 1;
  c.Y = 2;
  c.d_R = 1;
  c.d_P = 1;
  BanditInstance inst = make_bandit_instance(c);
  inst.features.phi.col(1) = inst.features.phi.col(0);
  EXPECT_THROW(sample_preferences(inst, 5, 1, 50), DegenerateSample);
}

TEST(SamplePreferences, RejectsNonpositiveN) {
  BanditInstance inst = make_bandit_instance(bandit_cfg(1));
  EXPECT_THROW(sample_preferences(inst, 0, 1), InvalidArgument);
}

TEST(MakeMdp, SingleStateSelfLoop) {
  InstanceConfig c = mdp_cfg(2);
  c.X = 1;
  c.Y = 5;
  MdpInstance inst = make_mdp_instance(c);
  for (int y = 0; y < 5; ++y) EXPECT_EQ(inst.mdp.T(0, y), 0);
}

TEST(MakeMdp, HorizonFromTailTolerance) {
  EXPECT_EQ(effective_horizon(0.9, 1e-6), 153);
  // Independent check: the smallest H with gamma^H / (1 - gamma) <= tol.
  int H = 0;
  while (std::pow(0.9, H) / 0.1 > 1e-6) ++H;
  EXPECT_EQ(H, 153);
  InstanceConfig c = mdp_cfg(3);
  c.gamma = 0.9;
  c.tail_tol = 1e-6;
  MdpInstance inst = make_mdp_instance(c);
  EXPECT_EQ(inst.mdp.horizon, 153);
  EXPECT_LE(std::pow(0.9, inst.mdp.horizon) / 0.1, 1e-6);
  EXPECT_EQ(effective_horizon(0.0, 1e-6), 1);
}

TEST(MakeMdp, Deterministic) {
  MdpInstance a = make_mdp_instance(mdp_cfg(4)), b = make_mdp_instance(mdp_cfg(4));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(a.mdp.next, b.mdp.next);
  EXPECT_TRUE(bit_equal(a.d_mu.d, b.d_mu.d));
}

TEST(MakeMdp, ContractsHold) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    MdpInstance inst = make_mdp_instance(mdp_cfg(s));
    inst.features.validate();
    inst.mdp.validate();
    EXPECT_GE(inst.true_reward.minCoeff(), 0.0);
    EXPECT_LE(inst.true_reward.maxCoeff(), 1.0 + 1e-12);
    EXPECT_NEAR(inst.d_mu.d.sum(), 1.0, 1e-10);
    EXPECT_GT(inst.d_mu.d.minCoeff(), 0.0);
  }
}

TEST(MakeMdp, RejectsMissingOccupancyDimension) {
  InstanceConfig c = mdp_cfg(1);
  c.d_M = 0;
  EXPECT_THROW(make_mdp_instance(c), InvalidArgument);
}

TEST(SampleTrajectories, ReplayedReturnsAndCaches) {
  MdpInstance inst = make_mdp_instance(mdp_cfg(5));
  const DeterministicMdp& m = inst.mdp;
  PreferenceDataset d = sample_trajectory_preferences(inst, 50, 17);
  EXPECT_EQ(to_json(d).dump(), to_json(sample_trajectory_preferences(inst, 50, 17)).dump());
  const FeatureSystem& f = inst.features;
  for (int i = 0; i < d.size(); ++i) {
    const TrajectoryRecord& rec = d.trajectories[i];
    VectorXd pb = VectorXd::Zero(f.d_R());
    for (const Trajectory* tau : {&rec.w, &rec.l}) {
      ASSERT_EQ(static_cast<int>(tau->states.size()), m.horizon);
      // Replay the action sequence through the transition table.
      int x = rec.x0;
      double ret = 0, g = 1;
      for (int t = 0; t < m.horizon; ++t) {
        ASSERT_EQ(tau->states[t], x);
        ret += g * inst.true_reward(x, tau->actions[t]);
        g *= m.gamma;
        x = m.T(x, tau->actions[t]);
      }
      EXPECT_NEAR(discounted_return(*tau, inst.true_reward, m.gamma, m.horizon), ret, 1e-12);
    }
    double g = 1;
    for (int t = 0; t < m.horizon; ++t) {
      pb += g * (f.phi.col(f.index(rec.w.states[t], rec.w.actions[t])) -
                 f.phi.col(f.index(rec.l.states[t], rec.l.actions[t])));
      g *= m.gamma;
    }
    EXPECT_TRUE(bit_equal(d.phi_bar.col(i), pb));
  }
}

TEST(SampleTrajectories, HorizonOneReducesToBandit) {
  InstanceConfig c = mdp_cfg(6);
  c.gamma = 0.0;
  MdpInstance inst = make_mdp_instance(c);
  ASSERT_EQ(inst.mdp.horizon, 1);
  PreferenceDataset d = sample_trajectory_preferences(inst, 100, 3);
  const FeatureSystem& f = inst.features;
  for (int i = 0; i < d.size(); ++i) {
    const TrajectoryRecord& r = d.trajectories[i];
    ASSERT_EQ(r.w.states.size(), 1u);
    EXPECT_EQ(r.w.states[0], r.x0);
    EXPECT_EQ(r.l.states[0], r.x0);
    EXPECT_EQ(discounted_return(r.w, inst.true_reward, 0.0, 1), inst.true_reward(r.x0, r.w.actions[0]));
    VectorXd pb = f.phi.col(f.index(r.x0, r.w.actions[0])) - f.phi.col(f.index(r.x0, r.l.actions[0]));
    EXPECT_TRUE(bit_equal(d.phi_bar.col(i), pb));
  }
}

TEST(SampleTrajectories, DeterministicMuGivesFairCoin) {
  MdpInstance inst = make_mdp_instance(mdp_cfg(7));
  TabularPolicy det;
  det.probs = MatrixXd::Zero(inst.mdp.X, inst.mdp.Y);
  det.probs.col(0).setOnes();
  const int n = 10000;
  PreferenceDataset d = sample_trajectory_preferences(inst.mdp, inst.features, inst.true_reward, det, inst.d_mu, n, 4);
  int first = 0;
  for (const auto& r : d.trajectories) {
    first += r.first_won;
    EXPECT_EQ(r.w.actions, r.l.actions);
  }
  EXPECT_NEAR(static_cast<double>(first) / n, 0.5, band(0.5, n));
  EXPECT_EQ(d.phi_bar.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(d.offsets.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Serialization, BanditRoundTripBitExact) {
  InstanceConfig c = bandit_cfg(8);
  c.realizable = false;
  c.epsilon_app = 0.05;
  c.d_R = 2;
  c.d_P = 6;
  BanditInstance inst = make_bandit_instance(c);
  json j = json::parse(to_json(inst).dump());
  BanditInstance back = bandit_instance_from_json(j);
  EXPECT_TRUE(bit_equal(back.features.phi, inst.features.phi));
  EXPECT_TRUE(bit_equal(back.features.psi, inst.features.psi));
  EXPECT_TRUE(bit_equal(back.true_reward, inst.true_reward));
  EXPECT_TRUE(bit_equal(back.log_mu, inst.log_mu));
  EXPECT_EQ(back.config.seed, inst.config.seed);
  EXPECT_EQ(to_json(back).dump(), to_json(inst).dump());

  PreferenceDataset d = sample_preferences(inst, 30, 1);
  PreferenceDataset db = dataset_from_json(json::parse(to_json(d).dump()));
  EXPECT_EQ(to_json(db).dump(), to_json(d).dump());
  EXPECT_TRUE(bit_equal(db.psi_bar, d.psi_bar));
}

TEST(Serialization, MdpRoundTripBitExact) {
  MdpInstance inst = make_mdp_instance(mdp_cfg(9));
  MdpInstance back = mdp_instance_from_json(json::parse(to_json(inst).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(inst).dump());
  EXPECT_TRUE(bit_equal(back.d_mu.d, inst.d_mu.d));
  PreferenceDataset d = sample_trajectory_preferences(inst, 10, 2);
  EXPECT_EQ(to_json(dataset_from_json(json::parse(to_json(d).dump()))).dump(), to_json(d).dump());
}

TEST(Serialization, SeventeenDigitsAndLargeSeeds) {
  InstanceConfig c = bandit_cfg(0xfedcba9876543210ULL);
  c.F = 0.1 + 0.2;
  InstanceConfig back = instance_config_from_json(json::parse(to_json(c).dump()));
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.F, c.F);
  EXPECT_EQ(format_double(0.1 + 0.2), "0.30000000000000004");
  EXPECT_THROW(instance_config_from_json(json{{"X", 2}, {"bogus", 1}}), InvalidArgument);
}

TEST(SplitDataset, InterleaveIsDisjointAndCovering) {
  BanditInstance inst = make_bandit_instance(bandit_cfg(10));
  PreferenceDataset d = sample_preferences(inst, 9, 3);
  auto [a, b] = split_dataset(d, SplitMode::interleave);
  EXPECT_EQ(a.size(), 5);
  EXPECT_EQ(b.size(), 4);
  for (int i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_equal(a.phi_bar.col(i), d.phi_bar.col(2 * i)));
  for (int i = 0; i < b.size(); ++i) EXPECT_TRUE(bit_equal(b.phi_bar.col(i), d.phi_bar.col(2 * i + 1)));
  auto [c, e] = split_dataset(d, SplitMode::reuse);
  EXPECT_EQ(c.size(), 9);
  EXPECT_EQ(e.size(), 9);
}
