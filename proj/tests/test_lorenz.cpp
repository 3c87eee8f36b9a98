#include <gtest/gtest.h>

#include <cmath>

#include "mrine/lorenz.hpp"

using namespace mrine::lorenz;

TEST(Lorenz, OriginIsFixedWithoutNoise) {
  LorenzConfig c;
  State x{0, 0, 0};
  for (int i = 0; i < 1000; ++i) x = euler_step(x, c, {0, 0, 0});
  EXPECT_EQ(x, (State{0, 0, 0}));
}

TEST(Lorenz, OneEulerStepByHand) {
  LorenzConfig c;
  // f(1,1,1) = (0, 26, 1 - 8/3); times dt = 0.006.
  State x = euler_step({1, 1, 1}, c, {0, 0, 0});
  EXPECT_NEAR(x[0], 1.0, 1e-15);
  EXPECT_NEAR(x[1], 1.156, 1e-12);
  EXPECT_NEAR(x[2], 0.99, 1e-12);
}

TEST(Lorenz, NormalizedAndBounded) {
  LorenzConfig c;
  c.n_trials = 40;
  c.seed = 3;
  auto set = simulate_latents(c);
  ASSERT_EQ(set.trials.size(), 40u);
  State sum{}, peak{};
  double n = 0;
  for (const auto& tr : set.trials) {
    ASSERT_EQ(tr.size(), 200u * 3);
    for (std::size_t i = 0; i < tr.size(); ++i) {
      sum[i % 3] += tr[i];
      peak[i % 3] = std::max(peak[i % 3], std::abs(tr[i]));
    }
    n += 200;
  }
  for (int d = 0; d < 3; ++d) {
    EXPECT_NEAR(sum[d] / n, 0.0, 1e-10);
    EXPECT_DOUBLE_EQ(peak[d], 1.0);
  }
  EXPECT_LT(set.max_abs_raw, 100.0);
  EXPECT_GT(set.max_abs_raw, 10.0);
}

TEST(Lorenz, SameSeedSameData) {
  LorenzConfig c;
  c.n_trials = 3;
  c.seed = 11;
  ObsConfig o;
  o.seed = 12;
  auto a = simulate(c, o), b = simulate(c, o);
  EXPECT_EQ(a.latents.trials, b.latents.trials);
  EXPECT_EQ(a.s, b.s);
  EXPECT_EQ(a.y, b.y);
  c.seed = 13;
  EXPECT_NE(simulate(c, o).latents.trials, a.latents.trials);
}

TEST(Lorenz, SqrtDtSwitchShrinksNoise) {
  LorenzConfig c;
  c.sqrt_dt_noise = true;
  c.seed = 1;
  Simulator sim(c);
  double ss = 0;
  for (int i = 0; i < 20000; ++i)
    for (double q : sim.noise()) ss += q * q;
  EXPECT_NEAR(ss / 60000.0, 0.01 * 0.006, 0.01 * 0.006 * 0.03);
}

TEST(Observations, GaussianResidualVariance) {
  LorenzConfig c;
  c.n_trials = 30;
  c.seed = 4;
  auto lat = simulate_latents(c);
  std::mt19937_64 rng(5);
  auto C = random_matrix(20, 3, 1.0, rng);
  auto y = gen_gaussian_obs(lat.trials, C, 20, 5.0, rng);
  double ss = 0, n = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ASSERT_EQ(y[i].size(), 200u * 20);
    auto clean = mix(lat.trials[i], C, 20);
    for (std::size_t k = 0; k < clean.size(); ++k) {
      ss += (y[i][k] - clean[k]) * (y[i][k] - clean[k]);
      n += 1;
    }
  }
  EXPECT_NEAR(ss / n, 5.0, 0.15);
}

TEST(Observations, GaussianWithoutNoiseIsIdentityMix) {
  LorenzConfig c;
  c.n_trials = 2;
  auto lat = simulate_latents(c);
  std::mt19937_64 rng(6);
  std::vector<double> C{1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
  auto y = gen_gaussian_obs(lat.trials, C, 4, 0.0, rng);
  for (std::size_t t = 0; t < 200; ++t) {
    for (int d = 0; d < 3; ++d) EXPECT_EQ(y[0][t * 4 + d], lat.trials[0][t * 3 + d]);
    EXPECT_EQ(y[0][t * 4 + 3], 0.0);
  }
}

TEST(Observations, BaselineRateWithZeroMixing) {
  LorenzConfig c;
  c.n_trials = 75;
  auto lat = simulate_latents(c);
  std::mt19937_64 rng(7);
  std::vector<double> C(10 * 3, 0.0);
  auto s = gen_poisson_obs(lat.trials, C, 10, 5.0, 0.005, rng);
  double sum = 0, n = 0;
  for (const auto& tr : s)
    for (double v : tr) {
      EXPECT_GE(v, 0.0);
      EXPECT_EQ(v, std::floor(v));
      sum += v;
      n += 1;
    }
  EXPECT_EQ(n, 150000.0);
  EXPECT_NEAR(sum / n, 0.025, 0.025 * 0.05);
}
