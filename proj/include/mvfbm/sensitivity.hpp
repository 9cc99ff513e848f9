#pragma once

#include "frac_calc.hpp"
#include "quadrature.hpp"
#include "solver.hpp"
#include "stats.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <boost/math/special_functions/beta.hpp>

#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace mvfbm {

// ---------------------------------------------------------------------------
// First variation along phi(X_0).

struct VariationEnsemble {
  TimeGrid grid;
  int N = 0;
  int d = 0;
  std::string phi_name;
  RowMat Gamma;    // (n+1) x N*d
  RowMat pairing;  // (n+1) x N*d, ensemble average of <D^L b(t,X_i,.)(mu)(X_j), Gamma_j>

  const double* gamma(int k, int i) const { return Gamma.row(k).data() + static_cast<std::ptrdiff_t>(i) * d; }
};

inline VariationEnsemble variation_flow(const ParticleEnsemble& e, const Drift& drift, const Direction& phi) {
  const int d = e.d, N = e.N, n = e.grid.n_steps();
  if (drift.dim() != d || drift.out_dim() != d || phi.dim != d)
    throw std::invalid_argument("variation_flow: dimension mismatch");
  VariationEnsemble v{e.grid, N, d, phi.name, RowMat(n + 1, static_cast<Eigen::Index>(N) * d),
                      RowMat(n + 1, static_cast<Eigen::Index>(N) * d)};
  for (int i = 0; i < N; ++i) phi.fn(e.state(0, i), v.Gamma.row(0).data() + static_cast<std::ptrdiff_t>(i) * d);
  const double dt = e.grid.dt();
  for (int k = 0; k <= n; ++k) {
    const auto fb = drift.freeze(e.grid.t(k), e.law(k));
    const auto pr = fb->pairing(v.Gamma.row(k).data());
    const double* g0 = v.Gamma.row(k).data();
    double* L = v.pairing.row(k).data();
    double* g1 = k < n ? v.Gamma.row(k + 1).data() : nullptr;
    parallel_for(static_cast<std::size_t>(N), [&](std::size_t lo, std::size_t hi) {
      std::vector<double> jac(static_cast<std::size_t>(d) * d);
      for (std::size_t i = lo; i < hi; ++i) {
        const std::ptrdiff_t o = static_cast<std::ptrdiff_t>(i) * d;
        pr->apply(e.state(k, static_cast<int>(i)), L + o);
        if (!g1) continue;
        fb->gradient(e.state(k, static_cast<int>(i)), jac.data());
        for (int r = 0; r < d; ++r) {
          double acc = L[o + r];
          for (int c = 0; c < d; ++c) acc += jac[r * d + c] * g0[o + c];
          g1[o + r] = g0[o + r] + acc * dt;
        }
        detail::check_finite(g1 + o, d, static_cast<int>(i), k + 1, "variation_flow");
      }
    });
  }
  return v;
}

struct SolverContext {
  std::shared_ptr<const Drift> drift;
  DiffusionSpec diff;
  InitialLaw init;
  std::shared_ptr<const PathBatch> noise;

  ParticleEnsemble solve() const { return solve_euler(*drift, diff, init, noise); }
};

struct FdCheckReport {
  std::vector<double> eps;
  std::vector<double> error;  // mean_i sup_k |(X^eps - X)/eps - Gamma|^2
  double order = 0.0;         // log-log slope of sqrt(error) in eps
  bool decreasing = false;
  bool exact = false;         // every error at rounding level
};

inline FdCheckReport variation_fd_check(const SolverContext& ctx, const Direction& phi, std::vector<double> eps) {
  const auto base = ctx.solve();
  const auto var = variation_flow(base, *ctx.drift, phi);
  FdCheckReport r;
  r.eps = eps;
  const int N = base.N, d = base.d;
  for (double e : eps) {
    SolverContext shifted = ctx;
    shifted.init = ctx.init.shifted(phi, e);
    const auto xe = shifted.solve();
    const RowMat quot = (xe.X - base.X) / e;
    r.error.push_back(mean_sup_sq_diff(quot, var.Gamma, N, d));
  }
  r.exact = true;
  for (double v : r.error) r.exact = r.exact && v < 1e-20;
  r.decreasing = true;
  for (std::size_t i = 1; i < r.error.size(); ++i) r.decreasing = r.decreasing && r.error[i] < r.error[i - 1];
  if (r.exact) {
    r.decreasing = true;
  } else {
    std::vector<double> rms;
    for (double v : r.error) rms.push_back(std::sqrt(std::max(v, 1e-300)));
    r.order = loglog_slope(eps, rms);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Malliavin derivative along R_H h with the law frozen:
//   Y_{k+1} = Y_k + grad b(t_k, X_k, mu_k) Y_k dt + sigma(t_k) (Rh_{k+1} - Rh_k).
// Rh is (n+1) x N*q (per particle).

inline RowMat malliavin_flow(const ParticleEnsemble& e, const Drift& drift, const DiffusionSpec& diff, const RowMat& Rh) {
  const int d = e.d, N = e.N, n = e.grid.n_steps(), q = diff.noise_dim;
  if (Rh.rows() != n + 1 || Rh.cols() != static_cast<Eigen::Index>(N) * q)
    throw std::invalid_argument("malliavin_flow: R_H h has the wrong shape");
  if (Rh.row(0).cwiseAbs().maxCoeff() != 0.0) throw std::invalid_argument("malliavin_flow: R_H h must vanish at t = 0");
  RowMat Y = RowMat::Zero(n + 1, static_cast<Eigen::Index>(N) * d);
  const double dt = e.grid.dt();
  for (int k = 0; k < n; ++k) {
    const auto fb = drift.freeze(e.grid.t(k), e.law(k));
    const Mat sig = diff.sigma(e.grid.t(k));
    parallel_for(static_cast<std::size_t>(N), [&](std::size_t lo, std::size_t hi) {
      std::vector<double> jac(static_cast<std::size_t>(d) * d);
      for (std::size_t i = lo; i < hi; ++i) {
        const Eigen::Index o = static_cast<Eigen::Index>(i) * d, oq = static_cast<Eigen::Index>(i) * q;
        fb->gradient(e.state(k, static_cast<int>(i)), jac.data());
        for (int r = 0; r < d; ++r) {
          double acc = Y(k, o + r);
          for (int c = 0; c < d; ++c) acc += jac[r * d + c] * Y(k, o + c) * dt;
          for (int c = 0; c < q; ++c) acc += sig(r, c) * (Rh(k + 1, oq + c) - Rh(k, oq + c));
          Y(k + 1, o + r) = acc;
        }
        detail::check_finite(&Y(k + 1, o), d, static_cast<int>(i), k + 1, "malliavin_flow");
      }
    });
  }
  return Y;
}

// Same with one deterministic R_H h ((n+1) x q) shared by all particles.
inline RowMat malliavin_flow(const ParticleEnsemble& e, const Drift& drift, const DiffusionSpec& diff, const Mat& Rh) {
  const int q = diff.noise_dim;
  if (Rh.cols() != q) throw std::invalid_argument("malliavin_flow: R_H h has the wrong width");
  RowMat full(Rh.rows(), static_cast<Eigen::Index>(e.N) * q);
  for (int i = 0; i < e.N; ++i) full.middleCols(static_cast<Eigen::Index>(i) * q, q) = Rh;
  return malliavin_flow(e, drift, diff, full);
}

// ---------------------------------------------------------------------------
// K_H^{-1} of R_H h for R_H h' = q = sigma^{-1} rho, as linear maps on node values.
//
// With b = H - 1/2 the Weyl form splits (for s = (j+u) dt, t = k dt) into
//   kappa^{-1} c0 t^{-b} q(t)
//   + kappa^{-1} b t^b / Gamma(1-b) * dt^{-2b} [ int (S(t)-S(s)) rho(t) w + int S(s)(rho(t)-rho(s)) w ]
// with w = (j+u)^{-b} (k-j-u)^{-1-b} du and S, rho linear on cells.  The
// moments below are int_0^1 (j+u)^{-b}(k-j-u)^{-1-b} u^p du for j <= k-2 and, on
// the last cell, int_0^1 (k-1+u)^{-b}(1-u)^{-b} u^p du.

class ExpansionMoments {
 public:
  ExpansionMoments(double H, int n) : n_(n) {
    const double b = H - 0.5;
    const auto head = quad::gauss_jacobi(16, 0.0, -b);
    const auto gl = quad::gauss_legendre(16);
    const auto tail = quad::gauss_jacobi(16, -b, 0.0);
    for (int p = 0; p < 3; ++p) m_[p].assign(static_cast<std::size_t>(n) * (n + 1) / 2 + 1, 0.0);
    for (int k = 2; k <= n; ++k) {
      for (int j = 0; j <= k - 2; ++j) {
        double acc[3] = {0, 0, 0};
        if (j == 0) {
          for (std::size_t q = 0; q < head.x.size(); ++q) {
            const double u = head.x[q], w = head.w[q] * std::pow(k - u, -1.0 - b);
            acc[0] += w;
            acc[1] += w * u;
            acc[2] += w * u * u;
          }
        } else {
          for (std::size_t q = 0; q < gl.x.size(); ++q) {
            const double u = gl.x[q], w = gl.w[q] * std::pow(j + u, -b) * std::pow(k - j - u, -1.0 - b);
            acc[0] += w;
            acc[1] += w * u;
            acc[2] += w * u * u;
          }
        }
        for (int p = 0; p < 3; ++p) m_[p][index(k, j)] = acc[p];
      }
    }
    d_[0].assign(n + 1, 0.0);
    d_[1].assign(n + 1, 0.0);
    d_[0][1] = boost::math::beta(1.0 - b, 1.0 - b);
    d_[1][1] = boost::math::beta(2.0 - b, 1.0 - b);
    for (int k = 2; k <= n; ++k) {
      for (std::size_t q = 0; q < tail.x.size(); ++q) {
        const double u = tail.x[q], w = tail.w[q] * std::pow(k - 1 + u, -b);
        d_[0][k] += w;
        d_[1][k] += w * u;
      }
    }
  }

  double m(int p, int k, int j) const { return m_[p][index(k, j)]; }
  double d(int p, int k) const { return d_[p][k]; }
  int n_steps() const { return n_; }

 private:
  static std::size_t index(int k, int j) { return static_cast<std::size_t>(k - 1) * (k - 2) / 2 + j; }
  int n_;
  std::vector<double> m_[3], d_[2];
};

inline std::shared_ptr<const ExpansionMoments> expansion_moments(double H, int n) {
  static std::mutex mu;
  static std::map<std::pair<double, int>, std::shared_ptr<const ExpansionMoments>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{H, n}];
  if (!slot) slot = std::make_shared<const ExpansionMoments>(H, n);
  return slot;
}

// Both evaluation routes as lower-triangular (n+1)q x (n+1)q matrices acting on
// the stacked node values of rho.  Row block k < n returns the value used on
// cell [t_k, t_{k+1}) of the Ito sum: the t^{-b} q(0) part is replaced by its
// cell representative int s^{-2b} / int s^{-b}, which is finite on the first
// cell.  Row block n holds zeta(T) itself.
class ZetaOperators {
 public:
  ZetaOperators(const TimeGrid& grid, const HurstParam& Hp, const std::function<Mat(double)>& sigma_inv, int q)
      : grid_(grid), q_(q) {
    const int n = grid.n_steps();
    const double b = Hp.beta(), H = Hp.value(), dt = grid.dt();
    const double ik = 1.0 / kernel_kappa(H), c0 = power_rule_c0(H);
    std::vector<Mat> S(n + 1), dS(n + 1, Mat::Zero(q, q));
    for (int k = 0; k <= n; ++k) {
      S[k] = sigma_inv(grid.t(k));
      if (S[k].rows() != q || S[k].cols() != q) throw std::invalid_argument("ZetaOperators: sigma^{-1} must be q x q");
    }
    for (int k = 0; k < n; ++k) dS[k] = S[k + 1] - S[k];
    shift_.assign(n + 1, 0.0);
    for (int k = 0; k < n; ++k) {
      const double lo = grid.t(k), hi = grid.t(k + 1);
      double avg;
      if (k == 0) {
        avg = std::pow(dt, -b) * (1.0 - b) / (1.0 - 2.0 * b);
      } else {
        const double r = std::log1p(1.0 / k);
        avg = std::pow(lo, -b) * std::expm1((1.0 - 2.0 * b) * r) / std::expm1((1.0 - b) * r) * (1.0 - b) / (1.0 - 2.0 * b);
      }
      (void)hi;
      // representative minus the pointwise leading term (the latter is infinite at k = 0)
      shift_[k] = ik * c0 * (k == 0 ? avg : avg - std::pow(lo, -b));
    }

    const auto mom = expansion_moments(H, n);
    const int D = (n + 1) * q;
    A_ = Mat::Zero(D, D);
    auto blk = [&](Mat& W, int k, int j) { return W.block(k * q, j * q, q, q); };
    for (int k = 1; k <= n; ++k) {
      const double t = grid.t(k);
      const double pre = ik * b * std::pow(t, b) / std::tgamma(1.0 - b) * std::pow(dt, -2.0 * b);
      blk(A_, k, k) += ik * c0 * std::pow(t, -b) * S[k];
      Mat M3 = Mat::Zero(q, q);
      for (int j = 0; j <= k - 2; ++j) {
        const double m0 = mom->m(0, k, j), m1 = mom->m(1, k, j), m2 = mom->m(2, k, j);
        M3 += (S[k] - S[j]) * m0 - dS[j] * m1;
        blk(A_, k, k) += pre * (S[j] * m0 + dS[j] * m1);
        blk(A_, k, j) += pre * (-S[j] * m0 - dS[j] * m1 + S[j] * m1 + dS[j] * m2);
        blk(A_, k, j + 1) += pre * (-S[j] * m1 - dS[j] * m2);
      }
      M3 += dS[k - 1] * mom->d(0, k);
      blk(A_, k, k) += pre * M3;
      const Mat last = S[k - 1] * mom->d(0, k) + dS[k - 1] * mom->d(1, k);
      blk(A_, k, k) += pre * last;
      blk(A_, k, k - 1) -= pre * last;
    }

    // Generic route: K_H^{-1} from the derivative, column by column.
    Mat G = Mat::Zero(n + 1, n + 1);
    for (int j = 0; j <= n; ++j) {
      GridFunction e(grid);
      e[j] = 1.0;
      const auto col = apply_KH_inverse_from_derivative(e, Hp);
      for (int k = 1; k <= n; ++k) G(k, j) = col[k];
    }
    B_ = Mat::Zero(D, D);
    for (int k = 1; k <= n; ++k)
      for (int j = 0; j <= k; ++j) blk(B_, k, j) = G(k, j) * S[j];

    for (Mat* W : {&A_, &B_}) {
      for (int k = 0; k < n; ++k) blk(*W, k, 0) += shift_[k] * S[0];
    }
  }

  const TimeGrid& grid() const { return grid_; }
  int width() const { return q_; }
  const Mat& expansion() const { return A_; }
  const Mat& generic() const { return B_; }
  // zeta(t_k) = representative_k - shift(k) q(0) for 1 <= k < n.
  double shift(int k) const { return shift_[k]; }

  // rho: (n+1) x N*q node values; returns zeta rows of the same shape.
  RowMat apply(const Mat& W, const RowMat& rho) const {
    const int n = grid_.n_steps(), q = q_;
    const Eigen::Index N = rho.cols() / q;
    RowMat out(n + 1, rho.cols());
    constexpr Eigen::Index kChunk = 256;
    const Eigen::Index chunks = (N + kChunk - 1) / kChunk;
    parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t lo, std::size_t hi) {
      for (std::size_t c = lo; c < hi; ++c) {
        const Eigen::Index i0 = static_cast<Eigen::Index>(c) * kChunk, m = std::min(kChunk, N - i0);
        Mat R((n + 1) * q, m);
        for (int k = 0; k <= n; ++k)
          for (Eigen::Index i = 0; i < m; ++i)
            for (int a = 0; a < q; ++a) R(k * q + a, i) = rho(k, (i0 + i) * q + a);
        const Mat Z = W.triangularView<Eigen::Lower>() * R;
        for (int k = 0; k <= n; ++k)
          for (Eigen::Index i = 0; i < m; ++i)
            for (int a = 0; a < q; ++a) out(k, (i0 + i) * q + a) = Z(k * q + a, i);
      }
    });
    return out;
  }

 private:
  TimeGrid grid_;
  int q_;
  Mat A_, B_;
  std::vector<double> shift_;
};

enum class ModelKind { kNonDegenerate, kDegenerate };

inline const char* to_string(ModelKind k) { return k == ModelKind::kNonDegenerate ? "non-degenerate" : "degenerate"; }

struct BismutIntegrand {
  ModelKind kind = ModelKind::kNonDegenerate;
  TimeGrid grid{1.0, 1};
  int N = 0;
  int q = 0;
  RowMat rho;           // bracket integrand, (n+1) x N*q
  RowMat Rh;            // R_H h^phi at the nodes
  RowMat zeta;          // expansion route (cell representatives, row n = zeta(T))
  RowMat zeta_generic;  // generic K_H^{-1} route, same layout
  double route_gap = 0.0;
  std::vector<std::string> warnings;
  std::shared_ptr<const ZetaOperators> ops;
  std::vector<Mat> sigma_inv;  // per node

  // Pointwise zeta(t_k) for 1 <= k <= n.
  double zeta_at(int k, int i, int c) const {
    if (k < 1) throw std::invalid_argument("zeta_at: zeta is singular at t = 0");
    const Eigen::Index o = static_cast<Eigen::Index>(i) * q;
    if (k == grid.n_steps()) return zeta(k, o + c);
    const Vec q0 = sigma_inv[0] * rho.row(0).segment(o, q).transpose();
    return zeta(k, o + c) - ops->shift(k) * q0(c);
  }
  // sum_{k<n} |zeta_k|^2 dt for particle i
  double l2_sq(int i, bool generic = false) const {
    const RowMat& z = generic ? zeta_generic : zeta;
    double acc = 0.0;
    for (int k = 0; k < grid.n_steps(); ++k)
      acc += z.row(k).segment(static_cast<Eigen::Index>(i) * q, q).squaredNorm() * grid.dt();
    return acc;
  }
};

struct IntegrandOptions {
  double route_tolerance = 0.02;
};

namespace detail {

inline std::shared_ptr<const ZetaOperators> zeta_operators(const TimeGrid& g, const HurstParam& H,
                                                           const DiffusionSpec& diff) {
  // Keyed on the diffusion's node values so that equal specs share one operator.
  static std::mutex mu;
  static std::map<std::vector<double>, std::shared_ptr<const ZetaOperators>> cache;
  std::vector<double> key = {g.horizon(), double(g.n_steps()), H.value(), double(diff.noise_dim)};
  for (int k = 0; k <= g.n_steps(); ++k) {
    const Mat s = diff.sigma_inverse(g.t(k));
    key.insert(key.end(), s.data(), s.data() + s.size());
  }
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[key];
  if (!slot) slot = std::make_shared<const ZetaOperators>(g, H, diff.sigma_inverse, diff.noise_dim);
  return slot;
}

inline void finish_integrand(BismutIntegrand& bi, const HurstParam& H, const DiffusionSpec& diff,
                             const IntegrandOptions& opt) {
  const int n = bi.grid.n_steps(), q = bi.q;
  const double dt = bi.grid.dt();
  bi.sigma_inv.resize(n + 1);
  for (int k = 0; k <= n; ++k) bi.sigma_inv[k] = diff.sigma_inverse(bi.grid.t(k));
  bi.Rh = RowMat::Zero(n + 1, bi.rho.cols());
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < bi.N; ++i) {
      const Eigen::Index o = static_cast<Eigen::Index>(i) * q;
      bi.Rh.row(k + 1).segment(o, q) =
          bi.Rh.row(k).segment(o, q) + dt * (bi.sigma_inv[k] * bi.rho.row(k).segment(o, q).transpose()).transpose();
    }
  bi.ops = zeta_operators(bi.grid, H, diff);
  bi.zeta = bi.ops->apply(bi.ops->expansion(), bi.rho);
  bi.zeta_generic = bi.ops->apply(bi.ops->generic(), bi.rho);
  const double num = (bi.zeta.topRows(n) - bi.zeta_generic.topRows(n)).squaredNorm();
  const double den = bi.zeta.topRows(n).squaredNorm();
  bi.route_gap = den > 0 ? std::sqrt(num / den) : std::sqrt(num);
  if (bi.route_gap > opt.route_tolerance)
    bi.warnings.push_back("zeta routes differ by " + std::to_string(bi.route_gap) + " in relative L2");
  for (Eigen::Index c = 0; c < bi.zeta.cols(); ++c)
    for (int k = 0; k <= n; ++k)
      if (!std::isfinite(bi.zeta(k, c)))
        throw NumericalError("zeta not finite for particle " + std::to_string(c / q) + " at step " + std::to_string(k));
}

inline void require_sensitivity_diffusion(const DiffusionSpec& diff, const char* where) {
  if (!diff.has_inverse()) throw std::invalid_argument(std::string(where) + ": sigma_inverse is required");
  if (diff.sigma_law) throw std::invalid_argument(std::string(where) + ": sigma must not depend on the law");
}

}  // namespace detail

// rho(s) = Gamma_s / T + (s/T) * pairing_s, zeta = K_H^{-1}(R_H h^phi).
inline BismutIntegrand build_h_nondegenerate(const ParticleEnsemble& e, const VariationEnsemble& v, const Drift& drift,
                                             const DiffusionSpec& diff, const IntegrandOptions& opt = {}) {
  detail::require_sensitivity_diffusion(diff, "build_h_nondegenerate");
  if (diff.noisy_offset != 0 || diff.noise_dim != e.d || drift.dim() != e.d)
    throw std::invalid_argument("build_h_nondegenerate: needs a square, invertible sigma on R^d");
  if (v.grid != e.grid || v.N != e.N) throw std::invalid_argument("build_h_nondegenerate: variation not aligned with ensemble");
  const int n = e.grid.n_steps();
  const double T = e.grid.horizon();
  BismutIntegrand bi;
  bi.kind = ModelKind::kNonDegenerate;
  bi.grid = e.grid;
  bi.N = e.N;
  bi.q = e.d;
  bi.rho = RowMat(n + 1, v.Gamma.cols());
  for (int k = 0; k <= n; ++k) bi.rho.row(k) = v.Gamma.row(k) / T + (e.grid.t(k) / T) * v.pairing.row(k);
  detail::finish_integrand(bi, e.noise->hurst(), diff, opt);
  return bi;
}

// ---------------------------------------------------------------------------
// Degenerate (kinetic) models: dX1 = (A X1 + B X2) dt, dX2 = b2 dt + sigma dB^H.

struct DegenerateModel {
  Mat A;                              // m x m
  Mat B;                              // m x l
  std::shared_ptr<const Drift> force; // b2: R^{m+l} -> R^l
  DiffusionSpec sigma;                // l x l block

  int m() const { return static_cast<int>(A.rows()); }
  int l() const { return static_cast<int>(B.cols()); }

  // Rank of [B, AB, ..., A^{m-1}B] with singular values below rel_tol * max dropped.
  int kalman_rank(double rel_tol = 1e-8) const {
    Mat K(m(), m() * l());
    Mat P = B;
    for (int j = 0; j < m(); ++j) {
      K.middleCols(j * l(), l()) = P;
      P = A * P;
    }
    const Vec s = K.jacobiSvd().singularValues();
    int r = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) r += s(i) > rel_tol * s(0) ? 1 : 0;
    return r;
  }

  void check() const {
    if (A.cols() != m() || B.rows() != m()) throw std::invalid_argument("DegenerateModel: A must be m x m, B m x l");
    if (force->dim() != m() + l() || force->out_dim() != l())
      throw std::invalid_argument("DegenerateModel: b2 must map R^{m+l} to R^l");
    if (sigma.dim != l() || sigma.noise_dim != l()) throw std::invalid_argument("DegenerateModel: sigma must be l x l");
    if (kalman_rank() < m())
      throw std::invalid_argument("DegenerateModel: Kalman rank condition fails (rank " + std::to_string(kalman_rank()) +
                                  " < " + std::to_string(m()) + ")");
  }

  std::shared_ptr<drifts::Kinetic> drift() const { return std::make_shared<drifts::Kinetic>(A, B, force); }
  DiffusionSpec diffusion() const { return DiffusionSpec::degenerate(m(), sigma); }
};

// g(t) = G(t) eta and (g2)'(t) = G2'(t) eta on the grid, with eta = phi(X_0).
class DegenerateConstruction {
 public:
  static constexpr double kMaxCondition = 1e12;

  DegenerateConstruction(const DegenerateModel& model, const TimeGrid& grid) : grid_(grid), m_(model.m()), l_(model.l()) {
    model.check();
    const int n = grid.n_steps(), m = m_, l = l_, d = m + l;
    const double T = grid.horizon(), dt = grid.dt();
    const Mat& A = model.A;
    const Mat& B = model.B;
    const auto gl = quad::gauss_legendre(8);
    const int nq = static_cast<int>(gl.x.size());
    // e^{(1-x_q) dt A} for the cell nodes and e^{(T - t_{k+1}) A} per cell.
    std::vector<Mat> inner(nq);
    for (int q = 0; q < nq; ++q) inner[q] = (A * ((1.0 - gl.x[q]) * dt)).exp();
    std::vector<Mat> outer(n);
    for (int k = 0; k < n; ++k) outer[k] = (A * (T - grid.t(k + 1))).exp();

    U_ = Mat::Zero(m, m);
    Mat V = Mat::Zero(m, l);
    for (int k = 0; k < n; ++k)
      for (int q = 0; q < nq; ++q) {
        const double s = grid.t(k) + gl.x[q] * dt, w = gl.w[q] * dt;
        const Mat EB = outer[k] * inner[q] * B;  // e^{(T-s)A} B
        U_ += w * s * (T - s) / (T * T) * EB * EB.transpose();
        V += w * (T - s) / T * EB;
      }
    const Eigen::SelfAdjointEigenSolver<Mat> es(U_);
    min_eig_ = es.eigenvalues()(0);
    cond_ = min_eig_ > 0 ? es.eigenvalues()(m - 1) / min_eig_ : std::numeric_limits<double>::infinity();
    if (!(cond_ <= kMaxCondition))
      throw NumericalError("degenerate construction: Gramian condition number " + std::to_string(cond_) +
                           " exceeds 1e12; the lower bound rho(t) I of the Gramian is not numerically positive");
    Mat eTA_V(m, d);
    eTA_V << (A * T).exp(), V;
    P_ = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() * es.eigenvectors().transpose() * eTA_V;

    Mat sel = Mat::Zero(l, d);
    sel.rightCols(l) = Mat::Identity(l, l);
    auto G2 = [&](double t, const Mat& eB) {  // eB = e^{(T-t)A} B
      return Mat((T - t) / T * sel - t * (T - t) / (T * T) * eB.transpose() * P_);
    };
    G_.resize(n + 1);
    G2p_.resize(n + 1);
    Mat G1 = Mat::Zero(m, d);
    G1.leftCols(m) = Mat::Identity(m, m);
    const Mat eDA = (A * dt).exp();
    for (int k = 0; k <= n; ++k) {
      const double t = grid.t(k);
      const Mat eB = (A * (T - t)).exp() * B;
      G_[k] = Mat(d, d);
      G_[k] << G1, G2(t, eB);
      const Mat E = eB.transpose();
      G2p_[k] = -sel / T - ((T - 2 * t) / (T * T) * E - t * (T - t) / (T * T) * E * A.transpose()) * P_;
      if (k == n) break;
      Mat next = eDA * G1;
      for (int q = 0; q < nq; ++q) {
        const double s = t + gl.x[q] * dt;
        next += gl.w[q] * dt * inner[q] * B * G2(s, outer[k] * inner[q] * B);
      }
      G1 = next;
    }
  }

  const TimeGrid& grid() const { return grid_; }
  const Mat& gramian() const { return U_; }
  double gramian_min_eigenvalue() const { return min_eig_; }
  double gramian_condition() const { return cond_; }
  const Mat& g(int k) const { return G_[k]; }
  const Mat& g2_prime(int k) const { return G2p_[k]; }
  int m() const { return m_; }
  int l() const { return l_; }

 private:
  TimeGrid grid_;
  int m_, l_;
  Mat U_, P_;
  double min_eig_ = 0.0, cond_ = 0.0;
  std::vector<Mat> G_, G2p_;
};

// rho(s) = grad b2(X_s) g(s) + pairing_s^{(2)} - (g2)'(s); zeta = K_H^{-1}(R_H h^phi) on R^l.
inline BismutIntegrand build_h_degenerate(const DegenerateModel& model, const DegenerateConstruction& dc,
                                          const ParticleEnsemble& e, const VariationEnsemble& v,
                                          const IntegrandOptions& opt = {}) {
  detail::require_sensitivity_diffusion(model.sigma, "build_h_degenerate");
  const int m = model.m(), l = model.l(), d = m + l, n = e.grid.n_steps(), N = e.N;
  if (e.d != d || v.d != d || dc.grid() != e.grid || v.grid != e.grid)
    throw std::invalid_argument("build_h_degenerate: ensemble, variation and construction must match");
  BismutIntegrand bi;
  bi.kind = ModelKind::kDegenerate;
  bi.grid = e.grid;
  bi.N = N;
  bi.q = l;
  bi.rho = RowMat(n + 1, static_cast<Eigen::Index>(N) * l);
  for (int k = 0; k <= n; ++k) {
    const auto fb = model.force->freeze(e.grid.t(k), e.law(k));
    const Mat& G = dc.g(k);
    const Mat& G2p = dc.g2_prime(k);
    parallel_for(static_cast<std::size_t>(N), [&](std::size_t lo, std::size_t hi) {
      std::vector<double> jac(static_cast<std::size_t>(l) * d);
      for (std::size_t i = lo; i < hi; ++i) {
        const Eigen::Map<const Vec> eta(v.gamma(0, static_cast<int>(i)), d);
        const Vec g = G * eta, g2p = G2p * eta;
        fb->gradient(e.state(k, static_cast<int>(i)), jac.data());
        const double* L = v.pairing.row(k).data() + static_cast<std::ptrdiff_t>(i) * d + m;
        for (int r = 0; r < l; ++r) {
          double acc = L[r] - g2p(r);
          for (int c = 0; c < d; ++c) acc += jac[r * d + c] * g(c);
          bi.rho(k, static_cast<Eigen::Index>(i) * l + r) = acc;
        }
      }
    });
  }
  detail::finish_integrand(bi, e.noise->hurst(), model.diffusion(), opt);
  return bi;
}

// ---------------------------------------------------------------------------

// delta(h^phi) = sum_k <zeta_k, W_{k+1} - W_k> per path.
inline std::vector<double> skorokhod_delta(const BismutIntegrand& bi, const PathBatch& paths) {
  require_same_grid(bi.grid, paths.grid(), "skorokhod_delta");
  if (paths.size() != bi.N || paths.dim() != bi.q) throw std::invalid_argument("skorokhod_delta: batch shape mismatch");
  const int n = bi.grid.n_steps(), q = bi.q;
  std::vector<double> out(bi.N);
  parallel_for(static_cast<std::size_t>(bi.N), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k)
        for (int c = 0; c < q; ++c) {
          const Eigen::Index col = static_cast<Eigen::Index>(i) * q + c;
          acc += bi.zeta(k, col) * (paths.W_all()(k + 1, col) - paths.W_all()(k, col));
        }
      out[i] = acc;
    }
  });
  return out;
}

inline void write_zeta_csv(const BismutIntegrand& bi, int particle, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file);
  out << "t";
  for (int c = 0; c < bi.q; ++c) out << ",zeta_" << c + 1;
  out << "\n";
  out.precision(17);
  for (int k = 0; k <= bi.grid.n_steps(); ++k) {
    out << bi.grid.t(k);
    for (int c = 0; c < bi.q; ++c) out << "," << bi.zeta(k, static_cast<Eigen::Index>(particle) * bi.q + c);
    out << "\n";
  }
}

}  // namespace mvfbm
