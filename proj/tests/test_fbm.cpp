#include <mvfbm/fbm.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

using namespace mvfbm;

namespace {

struct Moments {
  double mean, var, se_var;
};

Moments moments(const std::vector<double>& x) {
  const double n = x.size();
  double m = 0.0;
  for (double v : x) m += v;
  m /= n;
  double s2 = 0.0, s4 = 0.0;
  for (double v : x) {
    const double c = (v - m) * (v - m);
    s2 += c;
    s4 += c * c;
  }
  s2 /= n;
  s4 /= n;
  return {m, s2, std::sqrt((s4 - s2 * s2) / n)};
}

double ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(double(i) / a.size() - double(j) / b.size()));
  }
  return d;
}

// 1% critical value of the two-sample KS statistic.
double ks_critical(std::size_t n, std::size_t m) { return 1.628 * std::sqrt(double(n + m) / (double(n) * m)); }

std::vector<double> column_at(const PathBatch& b, int k, int c = 0) {
  std::vector<double> out(b.size());
  for (int i = 0; i < b.size(); ++i) out[i] = b.BH(k, i, c);
  return out;
}

}  // namespace

TEST(Volterra, ImpliedVarianceMatchesCovariance) {
  for (double H : {0.6, 0.75, 0.9}) {
    const TimeGrid g(2.0, 128);
    const VolterraWeights vw(g, HurstParam(H));
    for (int i = 1; i <= g.n_steps(); ++i) {
      const double rel = vw.implied_variance(i) / std::pow(g.t(i), 2 * H) - 1.0;
      EXPECT_LT(std::abs(rel), 5e-4) << "H=" << H << " i=" << i;
    }
    EXPECT_LT(std::abs(vw.implied_variance(128) / std::pow(2.0, 2 * H) - 1.0), 1e-5);
  }
}

TEST(GenerateCoupled, Deterministic) {
  const TimeGrid g(1.0, 32);
  const auto a = generate_coupled(g, HurstParam(0.7), 2, 99);
  const auto b = generate_coupled(g, HurstParam(0.7), 2, 99);
  EXPECT_EQ(a.W, b.W);
  EXPECT_EQ(a.BH, b.BH);
  EXPECT_EQ(a.W.row(0).norm(), 0.0);
  EXPECT_EQ(a.BH.row(0).norm(), 0.0);
  const auto c = generate_coupled(g, HurstParam(0.7), 2, 100);
  EXPECT_NE(a.BH(32, 0), c.BH(32, 0));
  EXPECT_NE(a.BH(32, 0), a.BH(32, 1));
}

TEST(GenerateCoupled, RederiveIsBitExact) {
  const PathBatch batch(TimeGrid(1.0, 48), HurstParam(0.8), 20, 2, 7);
  for (int i = 0; i < batch.size(); ++i) {
    const auto p = batch.path(i);
    EXPECT_EQ(rederive_bh(p), p.BH);
    EXPECT_EQ(generate_coupled(p.grid, p.H, 2, p.seed).BH, p.BH);
  }
}

TEST(GenerateCoupled, BatchIndependentOfWorkers) {
  set_workers(1);
  const PathBatch a(TimeGrid(1.0, 16), HurstParam(0.65), 101, 1, 3);
  set_workers(4);
  const PathBatch b(TimeGrid(1.0, 16), HurstParam(0.65), 101, 1, 3);
  set_workers(1);
  EXPECT_EQ(a.BH_all(), b.BH_all());
  EXPECT_EQ(a.W_all(), b.W_all());
}

TEST(GenerateCoupled, SeedsPairwiseDistinct) {
  const PathBatch b(TimeGrid(1.0, 4), HurstParam(0.7), 1000, 1, 0);
  std::vector<std::uint64_t> s;
  for (int i = 0; i < b.size(); ++i) s.push_back(b.path_seed(i));
  std::sort(s.begin(), s.end());
  EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
}

TEST(GenerateCoupled, TerminalVarianceMonteCarlo) {
  const double T = 1.5, H = 0.75;
  const PathBatch b(TimeGrid(T, 64), HurstParam(H), 10000, 2, 11);
  for (int c = 0; c < 2; ++c) {
    const auto m = moments(column_at(b, 64, c));
    EXPECT_NEAR(m.var, std::pow(T, 2 * H), 3 * m.se_var) << "component " << c;
  }
}

TEST(GenerateCoupled, IncrementVarianceMonteCarlo) {
  const double H = 0.7;
  const TimeGrid g(1.0, 50);
  const PathBatch b(g, HurstParam(H), 10000, 1, 12);
  const int pairs[5][2] = {{3, 10}, {0, 50}, {17, 18}, {25, 49}, {5, 40}};
  for (auto [s, t] : pairs) {
    std::vector<double> inc(b.size());
    for (int i = 0; i < b.size(); ++i) inc[i] = b.BH(t, i, 0) - b.BH(s, i, 0);
    const auto m = moments(inc);
    EXPECT_NEAR(m.var, std::pow(g.t(t) - g.t(s), 2 * H), 3 * m.se_var) << s << "," << t;
  }
}

TEST(GenerateCoupled, WIncrementsAreStandard) {
  const TimeGrid g(2.0, 8);
  const PathBatch b(g, HurstParam(0.6), 10000, 1, 5);
  std::vector<double> inc(b.size());
  for (int i = 0; i < b.size(); ++i) inc[i] = b.W(3, i, 0) - b.W(2, i, 0);
  const auto m = moments(inc);
  EXPECT_NEAR(m.var, g.dt(), 3 * m.se_var);
  EXPECT_NEAR(m.mean, 0.0, 3 * std::sqrt(g.dt() / b.size()));
}

TEST(Cholesky, SingleStep) {
  const double T = 2.0, H = 0.8;
  std::vector<double> x;
  for (int s = 0; s < 10000; ++s) x.push_back(generate_exact_cholesky(TimeGrid(T, 1), HurstParam(H), 1, s).BH(1, 0));
  const auto m = moments(x);
  EXPECT_NEAR(m.var, std::pow(T, 2 * H), 3 * m.se_var);
}

TEST(Cholesky, TwoPointCovariance) {
  const double H = 0.75;
  const TimeGrid g(1.0, 10);
  const CholeskyFbm gen(g, HurstParam(H));
  const int N = 10000;
  std::vector<double> prod(N);
  for (int s = 0; s < N; ++s) {
    const auto p = gen.sample(1, s);
    prod[s] = p.BH(3, 0) * p.BH(8, 0);
  }
  const auto m = moments(prod);
  EXPECT_NEAR(m.mean, covariance_RH(0.3, 0.8, H), 3 * std::sqrt(m.var / N));
}

TEST(Cholesky, NearBrownianHurst) {
  const TimeGrid g(1.0, 10);
  const CholeskyFbm gen(g, HurstParam(0.51));
  const int N = 10000;
  std::vector<double> prod(N);
  for (int s = 0; s < N; ++s) {
    const auto p = gen.sample(1, s);
    prod[s] = p.BH(4, 0) * p.BH(9, 0);
  }
  const auto m = moments(prod);
  // The exact covariance differs from min(s,t) = 0.4 by about 0.01 here.
  EXPECT_NEAR(m.mean, 0.4, 3 * std::sqrt(m.var / N) + std::abs(covariance_RH(0.4, 0.9, 0.51) - 0.4));
}

TEST(Cholesky, RejectsLargeGrid) {
  EXPECT_THROW(CholeskyFbm(TimeGrid(1.0, 5000), HurstParam(0.7)), std::invalid_argument);
}

TEST(Distribution, CoupledMatchesCholeskyKS) {
  for (double H : {0.6, 0.85}) {
    const TimeGrid g(1.0, 32);
    const PathBatch b(g, HurstParam(H), 10000, 1, 21);
    const CholeskyFbm gen(g, HurstParam(H));
    std::vector<double> ref(10000);
    for (int s = 0; s < 10000; ++s) ref[s] = gen.sample(1, s).BH(32, 0);
    EXPECT_LT(ks_two_sample(column_at(b, 32), ref), ks_critical(10000, 10000)) << "H=" << H;
  }
}

TEST(Distribution, SelfSimilarity) {
  const double H = 0.7, c = 3.0;
  const PathBatch a(TimeGrid(1.0, 32), HurstParam(H), 10000, 1, 31);
  const PathBatch b(TimeGrid(c, 32), HurstParam(H), 10000, 1, 32);
  auto xa = column_at(a, 20), xb = column_at(b, 20);
  for (double& v : xa) v *= std::pow(c, H);
  EXPECT_LT(ks_two_sample(xa, xb), ks_critical(10000, 10000));
}

TEST(Distribution, MaximalInequalityScaling) {
  const double H = 0.75, p = 2.0;
  std::vector<double> lx, ly;
  for (double T : {0.25, 0.5, 1.0, 2.0}) {
    const PathBatch b(TimeGrid(T, 64), HurstParam(H), 4000, 1, 41);
    double acc = 0.0;
    for (int i = 0; i < b.size(); ++i) {
      double sup = 0.0;
      for (int k = 0; k <= 64; ++k) sup = std::max(sup, std::abs(b.BH(k, i, 0)));
      acc += std::pow(sup, p);
    }
    lx.push_back(std::log(T));
    ly.push_back(std::log(acc / b.size()));
  }
  double mx = 0, my = 0;
  for (int i = 0; i < 4; ++i) mx += lx[i] / 4, my += ly[i] / 4;
  double sxy = 0, sxx = 0;
  for (int i = 0; i < 4; ++i) sxy += (lx[i] - mx) * (ly[i] - my), sxx += (lx[i] - mx) * (lx[i] - mx);
  EXPECT_NEAR(sxy / sxx, p * H, 0.15);
}

TEST(WienerIntegral, ZeroAndConstant) {
  const TimeGrid g(1.0, 20);
  const auto p = generate_coupled(g, HurstParam(0.7), 2, 4);
  EXPECT_EQ(wiener_integral(Mat::Zero(21, 2), p), 0.0);
  Mat e1 = Mat::Zero(21, 2);
  e1.col(0).setOnes();
  EXPECT_NEAR(wiener_integral(e1, p), p.W(20, 0), 1e-14);
  EXPECT_THROW(wiener_integral(Mat::Zero(20, 2), p), std::invalid_argument);
  const auto q = generate_coupled(g, HurstParam(0.7), 1, 4);
  EXPECT_THROW(wiener_integral(GridFunction(TimeGrid(1.0, 10)), q), std::invalid_argument);
}

TEST(WienerIntegral, ItoIsometry) {
  const TimeGrid g(1.0, 40);
  const auto f = GridFunction::sample(g, [](double t) { return std::cos(3 * t) + t; });
  double exact = 0.0;
  for (int k = 0; k < g.n_steps(); ++k) exact += f[k] * f[k] * g.dt();
  const PathBatch b(g, HurstParam(0.7), 10000, 1, 8);
  std::vector<double> x(b.size());
  for (int i = 0; i < b.size(); ++i) x[i] = wiener_integral(f, b.path(i));
  const auto m = moments(x);
  EXPECT_NEAR(m.mean, 0.0, 3 * std::sqrt(exact / b.size()));
  EXPECT_NEAR(m.var, exact, 3 * m.se_var);
}

TEST(PathCsv, HeaderAndRows) {
  const auto p = generate_coupled(TimeGrid(1.0, 5), HurstParam(0.7), 2, 1);
  const std::string file = testing::TempDir() + "mvfbm_path.csv";
  write_path_csv(p, file);
  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "t,W_1,W_2,BH_1,BH_2");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6);
  std::remove(file.c_str());
}
