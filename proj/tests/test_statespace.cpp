#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "mrine/statespace.hpp"
#include "test_support.hpp"
#include "lds_oracle.hpp"

using namespace mrine;
using mrine::testing::RandomLds;

namespace {

ObservedSequence single(const std::vector<double>& values, std::size_t m, std::vector<std::uint8_t> mask) {
  ObservedSequence obs;
  obs.steps = mask.size();
  obs.batch = 1;
  obs.values = Tensor::constant(Shape{obs.steps, m}, values);
  obs.mask = std::move(mask);
  return obs;
}

LdmMatrices scalar_ldm(double a, double c, double w, double r, double x0, double s0) {
  return {Tensor::constant(Shape{1, 1}, {a}), Tensor::constant(Shape{1, 1}, {c}), Tensor::constant(Shape{1, 1}, {w}),
          Tensor::constant(Shape{1, 1}, {r}), Tensor::constant(Shape{1}, {x0}), Tensor::constant(Shape{1, 1}, {s0})};
}

}  // namespace

TEST(KalmanFilter, ScalarHandComputation) {
  // Prior N(0,1), observation 2 with unit noise: posterior mean 1, variance 0.5.
  auto ldm = scalar_ldm(1, 1, 0, 1, 0, 1);
  auto f = kalman_filter(ldm, single({2.0}, 1, {1}));
  EXPECT_NEAR(f.x_filt[0].item(), 1.0, 1e-15);
  EXPECT_NEAR(f.Sigma_filt[0].item(), 0.5, 1e-15);
}

TEST(KalmanFilter, AllMaskedIsPurePrediction) {
  auto ldm = scalar_ldm(0.9, 1, 0.1, 1, 2.0, 1);
  auto f = kalman_filter(ldm, single({5, 5, 5, 5}, 1, {0, 0, 0, 0}));
  double expect = 2.0;
  for (std::size_t t = 0; t < 4; ++t) {
    expect *= 0.9;
    EXPECT_NEAR(f.x_filt[t].item(), expect, 1e-15);
  }
}

TEST(KalmanFilter, MatchesJointGaussianOracle) {
  std::mt19937_64 rng(42);
  for (int rep = 0; rep < 25; ++rep) {
    RandomLds lds(rng, 1 + rep % 3, 1 + rep % 4, 6);
    if (rep % 2) lds.random_mask(rng, 0.6);
    auto f = kalman_filter(lds.matrices(), lds.observed());
    auto oracle = lds.oracle_filtered_means();
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t i = 0; i < lds.n; ++i)
        EXPECT_NEAR(f.x_filt[t].at(i), oracle[t](static_cast<Eigen::Index>(i)), 1e-8) << "rep " << rep;
  }
}

TEST(KalmanFilter, MaskedStepEqualsPredictor) {
  std::mt19937_64 rng(7);
  RandomLds lds(rng, 3, 2, 8);
  lds.mask = {1, 0, 1, 0, 0, 1, 1, 0};
  auto ldm = lds.matrices();
  auto f = kalman_filter(ldm, lds.observed());
  for (std::size_t t = 1; t < 8; ++t) {
    if (lds.mask[t]) continue;
    Tensor pred = ad::matmul(f.x_filt[t - 1], ad::transpose(ldm.A));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(f.x_filt[t].at(i) - pred.at(i), 0.0);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(f.Sigma_filt[t].at(i), f.Sigma_pred[t].at(i));
  }
}

TEST(KalmanFilter, Causality) {
  std::mt19937_64 rng(9);
  RandomLds lds(rng, 2, 2, 7);
  auto base = kalman_filter(lds.matrices(), lds.observed());
  const std::size_t t0 = 4;
  lds.obs[t0](0) += 3.0;
  auto pert = kalman_filter(lds.matrices(), lds.observed());
  for (std::size_t t = 0; t < t0; ++t)
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(base.x_filt[t].at(i), pert.x_filt[t].at(i));
  EXPECT_NE(base.x_filt[t0].at(0), pert.x_filt[t0].at(0));
}

TEST(KalmanFilter, CovariancesSymmetric) {
  std::mt19937_64 rng(13);
  RandomLds lds(rng, 3, 4, 8);
  auto f = kalman_filter(lds.matrices(), lds.observed());
  for (const auto& S : f.Sigma_filt)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_LE(std::abs(S.at(i * 3 + j) - S.at(j * 3 + i)), 1e-10);
}

TEST(KalmanFilter, DimensionMismatch) {
  auto ldm = scalar_ldm(1, 1, 0, 1, 0, 1);
  EXPECT_THROW(kalman_filter(ldm, single({1, 2, 3, 4}, 2, {1, 1})), ShapeError);
  ObservedSequence bad = single({1.0, 2.0}, 1, {1, 1});
  bad.mask.pop_back();
  EXPECT_THROW(kalman_filter(ldm, bad), ShapeError);
}

TEST(KalmanSmoother, SingleStepEqualsFilter) {
  auto ldm = scalar_ldm(0.5, 1, 0.2, 1, 0, 1);
  auto f = kalman_filter(ldm, single({1.5}, 1, {1}));
  auto s = kalman_smooth(ldm, f);
  EXPECT_EQ(s.x_smooth[0].item(), f.x_filt[0].item());
  EXPECT_EQ(s.Sigma_smooth[0].item(), f.Sigma_filt[0].item());
}

TEST(KalmanSmoother, StaticStateSmoothsToTerminalFilter) {
  // A = 1, W = 0: the state is a constant, so every smoothed mean is the final posterior mean.
  auto ldm = scalar_ldm(1, 1, 0, 1, 0, 1);
  auto f = kalman_filter(ldm, single({1.0, -0.5, 2.0, 0.7}, 1, {1, 1, 1, 1}));
  auto s = kalman_smooth(ldm, f);
  // Static-state oracle: posterior of theta ~ N(0,1) given four unit-noise observations.
  const double oracle = (1.0 - 0.5 + 2.0 + 0.7) / (1.0 + 4.0);
  for (const auto& x : s.x_smooth) EXPECT_NEAR(x.item(), oracle, 1e-12);
}

TEST(KalmanSmoother, MatchesJointGaussianOracle) {
  std::mt19937_64 rng(77);
  for (int rep = 0; rep < 25; ++rep) {
    RandomLds lds(rng, 1 + rep % 3, 1 + rep % 4, 6);
    if (rep % 2) lds.random_mask(rng, 0.6);
    auto ldm = lds.matrices();
    auto s = kalman_smooth(ldm, kalman_filter(ldm, lds.observed()));
    auto oracle = lds.oracle_smoothed_means();
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t i = 0; i < lds.n; ++i)
        EXPECT_NEAR(s.x_smooth[t].at(i), oracle[t](static_cast<Eigen::Index>(i)), 1e-8) << "rep " << rep;
  }
}

TEST(KalmanSmoother, TraceNotAboveFiltered) {
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    RandomLds lds(rng, 3, 2, 8);
    lds.mask = {1, 1, 0, 1, 0, 0, 1, 1};
    auto ldm = lds.matrices();
    auto f = kalman_filter(ldm, lds.observed());
    auto s = kalman_smooth(ldm, f);
    for (std::size_t t = 0; t < 8; ++t) {
      double tf = 0, ts = 0;
      for (std::size_t i = 0; i < 3; ++i) {
        tf += f.Sigma_filt[t].at(i * 4);
        ts += s.Sigma_smooth[t].at(i * 4);
      }
      EXPECT_LE(ts, tf + 1e-10);
    }
  }
}

TEST(KStepPredict, ScalarPower) {
  auto ldm = scalar_ldm(0.5, 1, 0.1, 1, 4.0, 1e-9);
  // Everything masked: x_{t|t} = 0.5^{t+1} * 4.
  auto f = kalman_filter(ldm, single({0, 0, 0}, 1, {0, 0, 0}));
  auto p = kstep_predict(ldm, f, 2);
  ASSERT_TRUE(p.has_value());
  ASSERT_EQ(p->numel(), 1u);
  EXPECT_NEAR(p->item(), 0.25 * f.x_filt[0].item(), 1e-15);
  // Directly: A = 0.5, x = 4, k = 2 -> 1.
  LdmMatrices direct = scalar_ldm(0.5, 1, 0, 1, 0, 1);
  FilterResult fake;
  fake.x_filt = {Tensor::constant(Shape{1, 1}, {4.0}), Tensor::constant(Shape{1, 1}, {0.0}),
                 Tensor::constant(Shape{1, 1}, {0.0})};
  EXPECT_DOUBLE_EQ(kstep_predict(direct, fake, 2)->at(0), 1.0);
}

TEST(KStepPredict, IdentityDynamicsAndSemigroup) {
  std::mt19937_64 rng(3);
  RandomLds lds(rng, 3, 2, 8);
  auto ldm = lds.matrices();
  auto f = kalman_filter(ldm, lds.observed());
  LdmMatrices ident = ldm;
  ident.A = Tensor::eye(3);
  auto p1 = kstep_predict(ident, f, 1);
  for (std::size_t t = 0; t + 1 < 8; ++t)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p1->at(t * 3 + i), f.x_filt[t].at(i));

  auto one = *kstep_predict(ldm, f, 1);
  auto two = *kstep_predict(ldm, f, 2);
  Tensor composed = ad::matmul(one, ad::transpose(ldm.A));  // rows target t+2
  for (std::size_t t = 0; t + 2 < 8; ++t)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(composed.at(t * 3 + i), two.at(t * 3 + i), 1e-12);
}

TEST(KStepPredict, HorizonBeyondSequence) {
  auto ldm = scalar_ldm(0.5, 1, 0.1, 1, 0, 1);
  auto f = kalman_filter(ldm, single({1, 2}, 1, {1, 1}));
  EXPECT_FALSE(kstep_predict(ldm, f, 2).has_value());
  EXPECT_THROW(kstep_predict(ldm, f, 0), std::invalid_argument);
}

TEST(EmitEmbedding, IdentityZeroAndDirect) {
  std::mt19937_64 rng(5);
  RandomLds lds(rng, 3, 3, 2);
  auto ldm = lds.matrices();
  Tensor x = mrine::testing::random_tensor(rng, Shape{4, 3}, -1, 1, false);
  LdmMatrices id = ldm;
  id.C = Tensor::eye(3);
  Tensor a = emit_embedding(id, x);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(a.at(i), x.at(i));
  id.C = Tensor::zeros(Shape{3, 3});
  Tensor zero = emit_embedding(id, x);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
  Tensor direct = emit_embedding(ldm, x);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 3; ++j) s += ldm.C.at(i * 3 + j) * x.at(r * 3 + j);
      EXPECT_NEAR(direct.at(r * 3 + i), s, 1e-15);
    }
}

TEST(KalmanFilter, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(99);
  const std::size_t n = 2, m = 3, T = 5;
  LdmParams p = LdmParams::zeros(n, m, true);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto* t : {&p.A, &p.C, &p.W_raw, &p.R_raw, &p.x0, &p.Sigma0_raw})
    for (auto& v : t->mutable_values()) v += u(rng);
  for (std::size_t i = 0; i < n; ++i) p.A.mutable_values()[i * n + i] += 0.8;
  Tensor obs = mrine::testing::random_tensor(rng, Shape{T, m}, -1, 1, false);
  ObservedSequence seq{obs, {1, 0, 1, 1, 0}, T, 1};
  std::vector<Tensor> leaves{p.A, p.C, p.W_raw, p.R_raw, p.x0, p.Sigma0_raw};
  auto build = [&] {
    auto f = kalman_filter(p.materialize(), seq);
    return ad::sum(stack_steps(f.x_filt));
  };
  EXPECT_LE(mrine::testing::relative_gradient_error(build, leaves), 1e-4);
  auto build_smooth = [&] {
    auto ldm = p.materialize();
    auto s = kalman_smooth(ldm, kalman_filter(ldm, seq));
    return ad::add(ad::sum(stack_steps(s.x_smooth)), ad::sum(stack_steps(s.Sigma_smooth)));
  };
  EXPECT_LE(mrine::testing::relative_gradient_error(build_smooth, leaves), 1e-4);
}

TEST(KalmanFilter, BatchMatchesPerTrial) {
  std::mt19937_64 rng(31);
  RandomLds a(rng, 2, 2, 5), b(rng, 2, 2, 5);
  b.mask = {1, 0, 0, 1, 1};
  auto ldm = a.matrices();
  ObservedSequence sa = a.observed(), sb = b.observed();
  ObservedSequence both;
  both.steps = 5;
  both.batch = 2;
  std::vector<double> vals;
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t i = 0; i < 2; ++i) vals.push_back(sa.values.at(t * 2 + i));
    for (std::size_t i = 0; i < 2; ++i) vals.push_back(sb.values.at(t * 2 + i));
    both.mask.push_back(sa.mask[t]);
    both.mask.push_back(sb.mask[t]);
  }
  both.values = Tensor::constant(Shape{10, 2}, vals);
  auto fb = kalman_filter(ldm, both);
  auto fa = kalman_filter(ldm, sa);
  auto f2 = kalman_filter(ldm, sb);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_NEAR(fb.x_filt[t].at(i), fa.x_filt[t].at(i), 1e-14);
      EXPECT_NEAR(fb.x_filt[t].at(2 + i), f2.x_filt[t].at(i), 1e-14);
    }
}

TEST(LdmParams, NoiseCovariancesPositiveDefinite) {
  LdmParams p = LdmParams::zeros(3, 2);
  for (auto& v : p.W_raw.mutable_values()) v = -50.0;
  auto ldm = p.materialize();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_GE(ldm.W.at(i * 4), kPdFloor);
  EXPECT_NEAR(ldm.Sigma0.at(0), 1.0, 1e-12);
  EXPECT_NEAR(ldm.R.at(0), 0.1, 1e-12);
}
