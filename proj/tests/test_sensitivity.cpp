#include <mvfbm/sensitivity.hpp>

#include "golden.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>

using namespace mvfbm;

namespace {

std::shared_ptr<const PathBatch> batch(double T, int n, int N, int d = 1, std::uint64_t seed = 3, double H = 0.75) {
  return std::make_shared<const PathBatch>(TimeGrid(T, n), HurstParam(H), N, d, seed);
}

struct Run {
  ParticleEnsemble e;
  VariationEnsemble v;
  BismutIntegrand bi;
};

Run nondegenerate(const Drift& b, const DiffusionSpec& diff, const InitialLaw& init, const Direction& phi,
                  std::shared_ptr<const PathBatch> noise) {
  auto e = solve_euler(b, diff, init, noise);
  auto v = variation_flow(e, b, phi);
  auto bi = build_h_nondegenerate(e, v, b, diff);
  return {std::move(e), std::move(v), std::move(bi)};
}

DegenerateModel golden_kinetic() {
  return {Mat::Zero(1, 1), Mat::Ones(1, 1), std::make_shared<drifts::KineticForce>(1, 1, Mat::Zero(1, 2), 0.0),
          DiffusionSpec::identity(1)};
}

}  // namespace

TEST(Variation, PureNoiseIsConstant) {
  const auto r = nondegenerate(*drifts::zero(1), DiffusionSpec::identity(1), InitialLaw::gaussian(Vec::Zero(1), 1.0),
                               Direction::sine(1, 1.0), batch(1.0, 16, 20));
  for (int k = 0; k <= 16; ++k) EXPECT_EQ(r.v.Gamma(k, 5), r.v.Gamma(0, 5));
  EXPECT_EQ(r.v.pairing.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Variation, LinearMeanFieldClosedForm) {
  // Gamma_t = e^{at} phi + (e^{(a+b)t} - e^{at}) E phi for a constant phi.
  const double a = -0.5, be = 0.3;
  const drifts::LinearMeanField b(1, a, be);
  const auto noise = batch(1.0, 256, 10);
  const auto e = solve_euler(b, DiffusionSpec::identity(1), InitialLaw::gaussian(Vec::Zero(1), 1.0), noise);
  const auto v = variation_flow(e, b, Direction::constant(Vec::Constant(1, 1.0)));
  EXPECT_NEAR(v.Gamma(256, 0), std::exp(a + be), 2e-3);
}

TEST(Variation, FdCheckOrderForSinInteraction) {
  const auto noise = batch(1.0, 64, 2000);
  const SolverContext ctx{std::make_shared<drifts::SinInteraction>(1, -0.5, 1.0), DiffusionSpec::identity(1),
                          InitialLaw::gaussian(Vec::Zero(1), 1.0), noise};
  const auto r = variation_fd_check(ctx, Direction::sine(1, 1.0), {0.1, 0.05, 0.025, 0.0125});
  EXPECT_FALSE(r.exact);
  EXPECT_TRUE(r.decreasing);
  EXPECT_NEAR(r.order, 1.0, 0.25);
}

TEST(Variation, FdCheckExactWithoutDrift) {
  const SolverContext ctx{drifts::zero(1), DiffusionSpec::identity(1), InitialLaw::gaussian(Vec::Zero(1), 1.0),
                          batch(1.0, 16, 100)};
  const auto r = variation_fd_check(ctx, Direction::sine(1, 1.0), {0.1, 0.01});
  EXPECT_TRUE(r.exact);
  for (double e : r.error) EXPECT_LT(e, 1e-20);
}

TEST(Expansion, MomentsAgainstDirectQuadrature) {
  const double H = 0.7, b = H - 0.5;
  const ExpansionMoments m(H, 12);
  // midpoint reference; the j = 0 integrand is singular so only loosely resolved
  for (auto [k, j] : {std::pair{5, 2}, std::pair{12, 10}, std::pair{7, 0}}) {
    for (int p = 0; p < 3; ++p) {
      double acc = 0.0;
      const int M = 400000;
      for (int s = 0; s < M; ++s) {
        const double u = (s + 0.5) / M;
        acc += std::pow(j + u, -b) * std::pow(k - j - u, -1.0 - b) * std::pow(u, p) / M;
      }
      EXPECT_NEAR(m.m(p, k, j), acc, j == 0 ? 2e-4 : 1e-9) << k << " " << j << " " << p;
    }
  }
  EXPECT_NEAR(m.d(0, 1), std::tgamma(1 - b) * std::tgamma(1 - b) / std::tgamma(2 - 2 * b), 1e-14);
}

TEST(Zeta, PureNoiseConstantDirection) {
  const double T = 2.0, vphi = 0.8, H = 0.75, b = H - 0.5;
  const auto r = nondegenerate(*drifts::zero(1), DiffusionSpec::identity(1), InitialLaw::gaussian(Vec::Zero(1), 1.0),
                               Direction::constant(Vec::Constant(1, vphi)), batch(T, 64, 4, 1, 3, H));
  const double c = golden("kinv_t_coef_H0.75") * vphi / T;
  for (int k = 1; k <= 64; ++k) {
    const double t = r.bi.grid.t(k), want = c * std::pow(t, -b);
    EXPECT_NEAR(r.bi.zeta_at(k, 2, 0), want, 1e-12 * want);
  }
  EXPECT_LT(r.bi.route_gap, 1e-12);
  // cell 0 holds the average of t^{-2b} over the average of t^{-b}
  const double dt = r.bi.grid.dt();
  EXPECT_NEAR(r.bi.zeta(0, 0), c * std::pow(dt, -b) * (1 - b) / (1 - 2 * b), 1e-12);
  EXPECT_TRUE(r.bi.warnings.empty());
}

TEST(Zeta, LinearIntegrandBothRoutes) {
  // q(t) = a + b t through the degenerate golden model: rho is linear in t.
  const auto model = golden_kinetic();
  const TimeGrid g(1.0, 256);
  const DegenerateConstruction dc(model, g);
  const auto noise = batch(1.0, 256, 3);
  const auto e = solve_euler(*model.drift(), model.diffusion(), InitialLaw::point(Vec::Zero(2)), noise);
  Vec eta(2);
  eta << 0.7, -0.4;
  const auto v = variation_flow(e, *model.drift(), Direction::constant(eta));
  const auto bi = build_h_degenerate(model, dc, e, v);
  const double T = 1.0;
  const double qa = 6.0 / (T * T) * eta(0) + (1.0 / T + 3.0 / T) * eta(1);
  const double qb = -12.0 / (T * T * T) * eta(0) - 6.0 / (T * T) * eta(1);
  for (int k = 0; k <= 256; k += 32) EXPECT_NEAR(bi.rho(k, 0), qa + qb * g.t(k), 1e-10);
  const double b = 0.25, c0k = golden("kinv_t_coef_H0.75"), c1k = golden("kinv_t2half_coef_H0.75");
  double gen = 0.0;
  for (int k = 1; k <= 256; ++k) {
    const double t = g.t(k), want = c0k * qa * std::pow(t, -b) + c1k * qb * std::pow(t, 1 - b);
    EXPECT_NEAR(bi.zeta_at(k, 1, 0), want, 1e-9 * (1 + std::abs(want))) << k;
    gen = std::max(gen, std::abs(bi.zeta_generic(k, 1) - bi.zeta(k, 1)) / (1 + std::abs(want)));
  }
  EXPECT_LT(gen, 1e-2);
  EXPECT_LT(bi.route_gap, 1e-2);
}

TEST(Degenerate, GoldenConstructionAndEndpoint) {
  const auto model = golden_kinetic();
  const double T = 1.5;
  const TimeGrid g(T, 60);
  const DegenerateConstruction dc(model, g);
  EXPECT_NEAR(dc.gramian()(0, 0), T / 6, 1e-13);
  for (int k = 0; k <= 60; ++k) {
    const double t = g.t(k);
    const Mat& G = dc.g(k);
    EXPECT_NEAR(G(0, 0), 1 - (3 * t * t * T - 2 * t * t * t) / (T * T * T), 1e-12);
    EXPECT_NEAR(G(0, 1), t * (T - t) * (T - t) / (T * T), 1e-12);
    EXPECT_NEAR(G(1, 0), -6 * t * (T - t) / (T * T * T), 1e-12);
    EXPECT_NEAR(G(1, 1), (T - t) / T - 3 * t * (T - t) / (T * T), 1e-12);
  }
  EXPECT_LT(dc.g(60).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Degenerate, EndpointVanishesForRotatingModel) {
  Mat A(2, 2), B(2, 1);
  A << 0.0, 1.0, -2.0, -0.3;
  B << 0.0, 1.0;
  Mat C(1, 3);
  C << 0.2, -0.1, -0.5;
  const DegenerateModel model{A, B, std::make_shared<drifts::KineticForce>(2, 1, C, 0.4), DiffusionSpec::identity(1)};
  EXPECT_EQ(model.kalman_rank(), 2);
  const DegenerateConstruction dc(model, TimeGrid(1.0, 128));
  EXPECT_GT(dc.gramian_min_eigenvalue(), 0.0);
  EXPECT_LT(dc.g(128).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((dc.g(0) - Mat::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Degenerate, KalmanFailureRejected) {
  const DegenerateModel model{Mat::Zero(2, 2), (Mat(2, 1) << 1.0, 0.0).finished(),
                              std::make_shared<drifts::KineticForce>(2, 1, Mat::Zero(1, 3), 0.0),
                              DiffusionSpec::identity(1)};
  EXPECT_EQ(model.kalman_rank(), 1);
  EXPECT_THROW(DegenerateConstruction(model, TimeGrid(1.0, 8)), std::invalid_argument);
}

TEST(ChainRule, NonDegenerateEndpoint) {
  const drifts::SinInteraction b(1, -0.4, 0.8);
  std::vector<double> err;
  for (int n : {64, 128}) {
    const auto r = nondegenerate(b, DiffusionSpec::identity(1), InitialLaw::gaussian(Vec::Zero(1), 1.0),
                                 Direction::sine(1, 1.0), batch(1.0, n, 200));
    const RowMat Y = malliavin_flow(r.e, b, DiffusionSpec::identity(1), r.bi.Rh);
    err.push_back((Y.row(n) - r.v.Gamma.row(n)).cwiseAbs().maxCoeff());
    for (int k : {n / 4, n / 2})
      EXPECT_LT((Y.row(k) - (r.e.grid.t(k)) * r.v.Gamma.row(k)).cwiseAbs().maxCoeff(), 4.0 / n);
  }
  EXPECT_LT(err[1], 2.0 / 128);
  EXPECT_NEAR(err[0] / err[1], 2.0, 0.5);
}

TEST(ChainRule, DegenerateYEqualsGammaMinusG) {
  Mat A(1, 1), B(1, 1), C(1, 2);
  A << -0.2;
  B << 1.0;
  C << -0.3, -0.6;
  const DegenerateModel model{A, B, std::make_shared<drifts::KineticForce>(1, 1, C, 0.5), DiffusionSpec::identity(1)};
  std::vector<double> err;
  for (int n : {64, 128}) {
    const TimeGrid g(1.0, n);
    const DegenerateConstruction dc(model, g);
    const auto e = solve_euler(*model.drift(), model.diffusion(), InitialLaw::gaussian(Vec::Zero(2), 1.0), batch(1.0, n, 100));
    const auto v = variation_flow(e, *model.drift(), Direction::sine(2, 1.0));
    const auto bi = build_h_degenerate(model, dc, e, v);
    const RowMat Y = malliavin_flow(e, *model.drift(), model.diffusion(), bi.Rh);
    double worst = 0.0;
    for (int k = 0; k <= n; ++k)
      for (int i = 0; i < e.N; ++i) {
        const Vec eta = Eigen::Map<const Vec>(v.gamma(0, i), 2);
        const Vec gk = dc.g(k) * eta;
        for (int c = 0; c < 2; ++c) worst = std::max(worst, std::abs(Y(k, i * 2 + c) - (v.Gamma(k, i * 2 + c) - gk(c))));
      }
    err.push_back(worst);
    EXPECT_LT((Y.row(n) - v.Gamma.row(n)).cwiseAbs().maxCoeff(), 8.0 / n);
  }
  EXPECT_LT(err[1], err[0] * 0.7);
}

TEST(Zeta, LinearInPhi) {
  const drifts::SinInteraction b(1, -0.4, 0.8);
  const auto noise = batch(1.0, 32, 50);
  const auto init = InitialLaw::gaussian(Vec::Zero(1), 1.0);
  const auto p1 = Direction::sine(1, 1.0), p2 = Direction::scaled_identity(1, 1.0);
  const auto r1 = nondegenerate(b, DiffusionSpec::identity(1), init, p1, noise);
  const auto r2 = nondegenerate(b, DiffusionSpec::identity(1), init, p2, noise);
  const auto r3 = nondegenerate(b, DiffusionSpec::identity(1), init, Direction::combine(1.0, p1, 2.0, p2), noise);
  EXPECT_LT((r3.bi.zeta - r1.bi.zeta - 2.0 * r2.bi.zeta).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Zeta, RouteGapAndRefinement) {
  const drifts::SinInteraction b(1, -0.5, 1.0);
  const auto diff = DiffusionSpec::oscillating(1, 1.0, 0.3, 1.0);
  const auto init = InitialLaw::gaussian(Vec::Zero(1), 1.0);
  std::vector<double> l2;
  for (int n : {128, 256, 512}) {
    const auto r = nondegenerate(b, diff, init, Direction::sine(1, 1.0), batch(1.0, n, 100));
    double acc = 0.0;
    for (int i = 0; i < 100; ++i) acc += r.bi.l2_sq(i) / 100;
    l2.push_back(acc);
    if (n == 512) EXPECT_LT(r.bi.route_gap, 0.02);
  }
  EXPECT_NEAR(l2[1] / l2[0], 1.0, 0.05);
  EXPECT_NEAR(l2[2] / l2[1], 1.0, 0.05);
}

TEST(Delta, PureNoiseMeanAndIsometry) {
  const int N = 20000;
  const auto noise = batch(1.0, 32, N);
  const auto r = nondegenerate(*drifts::zero(1), DiffusionSpec::identity(1), InitialLaw::point(Vec::Zero(1)),
                               Direction::constant(Vec::Constant(1, 1.0)), noise);
  const auto d = skorokhod_delta(r.bi, *noise);
  const auto s = mean_se(d);
  EXPECT_LT(std::abs(s.mean), 3.5 * s.se);
  const double iso = r.bi.l2_sq(0);
  EXPECT_NEAR(s.var / iso, 1.0, 3.5 * std::sqrt(2.0 / N));
}

TEST(Delta, NonDegenerateMeanZero) {
  const int N = 4000;
  const drifts::SinInteraction b(1, -0.5, 1.0);
  const auto noise = batch(1.0, 64, N);
  const auto r = nondegenerate(b, DiffusionSpec::identity(1), InitialLaw::gaussian(Vec::Zero(1), 1.0),
                               Direction::sine(1, 1.0), noise);
  const auto s = mean_se(skorokhod_delta(r.bi, *noise));
  EXPECT_LT(std::abs(s.mean), 4.0 * s.se);
}

TEST(Zeta, IndependentOfWorkerCount) {
  const drifts::SinInteraction b(1, -0.5, 1.0);
  const auto init = InitialLaw::gaussian(Vec::Zero(1), 1.0);
  set_workers(1);
  const auto r1 = nondegenerate(b, DiffusionSpec::identity(1), init, Direction::sine(1, 1.0), batch(1.0, 32, 600));
  set_workers(3);
  const auto r3 = nondegenerate(b, DiffusionSpec::identity(1), init, Direction::sine(1, 1.0), batch(1.0, 32, 600));
  set_workers(1);
  EXPECT_EQ(r1.bi.zeta, r3.bi.zeta);
  EXPECT_EQ(r1.bi.zeta_generic, r3.bi.zeta_generic);
}

TEST(Zeta, RejectsLawDependentSigma) {
  auto diff = DiffusionSpec::identity(1);
  diff.sigma_law = [](double, LawView) { return Mat::Identity(1, 1); };
  const auto noise = batch(1.0, 8, 5);
  const auto e = solve_euler(*drifts::zero(1), DiffusionSpec::identity(1), InitialLaw::point(Vec::Zero(1)), noise);
  const auto v = variation_flow(e, *drifts::zero(1), Direction::sine(1, 1.0));
  EXPECT_THROW(build_h_nondegenerate(e, v, *drifts::zero(1), diff), std::invalid_argument);
}

TEST(Zeta, CsvDump) {
  const auto r = nondegenerate(*drifts::zero(1), DiffusionSpec::identity(1), InitialLaw::point(Vec::Zero(1)),
                               Direction::sine(1, 1.0), batch(1.0, 8, 2));
  const std::string f = testing::TempDir() + "zeta.csv";
  write_zeta_csv(r.bi, 0, f);
  std::ifstream in(f);
  std::string line;
  int rows = 0;
  std::getline(in, line);
  EXPECT_EQ(line, "t,zeta_1");
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 9);
  std::remove(f.c_str());
}
