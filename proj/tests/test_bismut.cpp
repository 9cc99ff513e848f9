#include <mvfbm/presets.hpp>

#include "golden.hpp"

#include <gtest/gtest.h>

using namespace mvfbm;

TEST(Oracle, PureNoiseGaussianIbp) {
  EXPECT_NEAR(pure_noise_oracle(0.75, 1.0, 10.0), golden("E_sech2_N01_over_10"), 1e-13);
  // B_T has sd T^H, so the oracle only depends on T^H / R
  EXPECT_NEAR(pure_noise_oracle(0.6, 2.0, 10.0 * std::pow(2.0, 0.6)), golden("E_sech2_N01_over_10"), 1e-13);
}

TEST(Bismut, ConstantFunctionGivesZero) {
  const auto p = presets::sin_interaction();
  const auto est = estimate_bismut(p.model, test_functions::constant(2.0), p.phi, 32, 4000, 11);
  EXPECT_LT(std::abs(est.value), 3 * est.std_error);
  EXPECT_EQ(est.centered, 0.0);
  const auto fd = estimate_fd(p.model, test_functions::constant(2.0), p.phi, {0.1, 0.05}, 32, 200, 11);
  EXPECT_EQ(fd.extrapolated, 0.0);
  for (double v : fd.values) EXPECT_EQ(v, 0.0);
}

TEST(Bismut, PureNoiseMatchesOracle) {
  const auto p = presets::pure_noise();
  const auto est = estimate_bismut(p.model, p.f, p.phi, 64, 20000, 5);
  const double oracle = pure_noise_oracle(p.model.H, p.model.T, est.clamp_radius);
  EXPECT_LT(std::abs(est.value - oracle), 3 * est.std_error) << est.value << " vs " << oracle;
  EXPECT_LT(std::abs(est.centered - oracle), 3 * est.centered_se);
  const auto fd = estimate_fd(p.model, p.f, p.phi, {0.1, 0.05, 0.025}, 64, 20000, 5);
  EXPECT_NEAR(fd.clamp_radius, est.clamp_radius, 0.0);
  EXPECT_LT(std::abs(fd.extrapolated - oracle), 3 * fd.std_error + 1e-4);
}

TEST(Bismut, LinearMeanFieldAgainstFd) {
  const auto p = presets::linear_meanfield();
  const auto est = estimate_bismut(p.model, p.f, p.phi, 64, 20000, 17);
  const auto fd = estimate_fd(p.model, p.f, p.phi, {0.1, 0.05, 0.025}, 64, 20000, 17);
  const double se = std::hypot(est.centered_se, fd.std_error);
  EXPECT_LT(std::abs(est.centered - fd.extrapolated), 3 * se) << est.centered << " vs " << fd.extrapolated;
  EXPECT_LT(std::abs(est.value - est.centered), 3 * std::hypot(est.std_error, est.centered_se));
  // equal up to the plug-in mean when E f(X_T) is near zero
  EXPECT_LE(est.centered_se, est.std_error * (1 + 1e-3));
}

TEST(Bismut, DegenerateAgainstFd) {
  const auto p = presets::kinetic_degenerate();
  const auto est = estimate_bismut(p.model, p.f, p.phi, 64, 20000, 23);
  const auto fd = estimate_fd(p.model, p.f, p.phi, {0.1, 0.05, 0.025}, 64, 20000, 23);
  EXPECT_EQ(est.kind, ModelKind::kDegenerate);
  EXPECT_LT(std::abs(est.centered - fd.extrapolated), 3 * std::hypot(est.centered_se, fd.std_error))
      << est.centered << " vs " << fd.extrapolated;
}

TEST(Bismut, FdValuesTrendWithEps) {
  const auto p = presets::sin_interaction();
  const auto fd = estimate_fd(p.model, p.f, p.phi, {0.2, 0.1, 0.05}, 32, 4000, 3);
  // O(eps) spacing: successive differences roughly halve
  const double d1 = fd.values[0] - fd.values[1], d2 = fd.values[1] - fd.values[2];
  EXPECT_NEAR(d1 / d2, 2.0, 0.3);
  EXPECT_THROW(estimate_fd(p.model, p.f, p.phi, {0.05, 0.1}, 32, 10, 3), std::invalid_argument);
}

TEST(Bismut, BitIdenticalAcrossWorkers) {
  const auto p = presets::sin_interaction();
  set_workers(1);
  const auto a = estimate_bismut(p.model, p.f, p.phi, 32, 3000, 9);
  set_workers(4);
  const auto b = estimate_bismut(p.model, p.f, p.phi, 32, 3000, 9);
  set_workers(1);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.std_error, b.std_error);
  EXPECT_EQ(a.centered, b.centered);
}

TEST(Norm, ConstantFunctionBothSidesZero) {
  const auto p = presets::pure_noise();
  const auto r = lderiv_norm_estimate(p.model, test_functions::constant(), {Direction::constant(Vec::Ones(1))}, 32,
                                      500, 1);
  EXPECT_EQ(r.sup_abs, 0.0);
  EXPECT_EQ(r.variance_factor, 0.0);
  EXPECT_EQ(r.bound_factor, 0.0);
}

TEST(Norm, DependentDirectionsDropped) {
  const auto p = presets::pure_noise();  // X_0 = 0: sin and identity vanish in L2(mu)
  const auto r = lderiv_norm_estimate(p.model, p.f,
                                      {Direction::constant(Vec::Ones(1)), Direction::sine(1, 1.0),
                                       Direction::constant(Vec::Constant(1, 2.0))},
                                      32, 2000, 1);
  EXPECT_EQ(r.kept, 1);
  EXPECT_EQ(r.notices.size(), 2u);
  const auto est = estimate_bismut(p.model, p.f, p.phi, 32, 2000, 1);
  EXPECT_NEAR(r.variance_factor, est.var_f, 1e-15);
  EXPECT_NEAR(r.sup_abs, std::abs(est.centered), 1e-12);
}

TEST(Norm, ScalingInT) {
  std::vector<double> Ts = {0.25, 0.5, 1.0, 2.0}, f;
  for (double T : Ts) {
    PresetParams pp;
    pp.T = T;
    const auto p = presets::pure_noise(pp);
    f.push_back(lderiv_norm_estimate(p.model, p.f, {p.phi}, 32, 20000, 2).bound_factor);
  }
  EXPECT_NEAR(loglog_slope(Ts, f), -0.75, 0.15);
}

TEST(Tv, ZeroShiftAndBoundedRatio) {
  const auto p = presets::sin_interaction();
  const auto zero = tv_probe(p.model, {0.0}, 16, 32, 500, 4);
  EXPECT_EQ(zero.tv_lower[0], 0.0);
  const auto r = tv_probe(p.model, {1.0, 0.5, 0.25, 0.125}, 64, 32, 4000, 4);
  EXPECT_LT(r.max_over_min, 3.0);
  for (std::size_t i = 0; i < r.shifts.size(); ++i) EXPECT_NEAR(r.w2[i], r.shifts[i], 1e-12);
  const auto big = tv_probe(p.model, {1.0, 0.5, 0.25, 0.125}, 128, 32, 4000, 4);
  for (std::size_t i = 0; i < r.ratio.size(); ++i) EXPECT_NEAR(big.ratio[i] / r.ratio[i], 1.0, 0.1);
}
