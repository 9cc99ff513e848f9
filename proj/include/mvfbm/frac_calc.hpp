#pragma once

#include "core.hpp"
#include "quadrature.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace mvfbm {

// ---------------------------------------------------------------------------
// Riemann-Liouville integral and Weyl derivative on a uniform grid.

// Product-integration weights for I^alpha of a piecewise-linear function,
// exact for the interpolant.  I^a f(t_k) = dt^a / Gamma(a+2) * sum_j a_{j,k} f_j.
inline GridFunction rl_integral_left(const GridFunction& f, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("rl_integral_left: alpha must lie in (0,1]");
  const int n = f.grid.n_steps();
  const double scale = std::pow(f.grid.dt(), alpha) / std::tgamma(alpha + 2.0);
  std::vector<double> pw(n + 2);
  for (int m = 0; m <= n + 1; ++m) pw[m] = std::pow(static_cast<double>(m), alpha + 1.0);
  GridFunction out(f.grid);
  for (int k = 1; k <= n; ++k) {
    double acc = (pw[k - 1] - (k - alpha - 1.0) * std::pow(static_cast<double>(k), alpha)) * f[0];
    for (int j = 1; j < k; ++j) acc += (pw[k - j + 1] - 2.0 * pw[k - j] + pw[k - j - 1]) * f[j];
    acc += f[k];
    out[k] = scale * acc;
  }
  return out;
}

// Weyl form of D^alpha_{0+} with f linear on every cell.  The difference
// quotient is integrated exactly against (x-y)^{-alpha-1} cell by cell.
class WeylOperator {
 public:
  WeylOperator(double alpha, int n_steps, double dt) : a_(alpha), n_(n_steps), dt_(dt) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("weyl_derivative_left: alpha must lie in (0,1)");
    m0_.resize(n_ + 1);
    m1_.resize(n_ + 1);
    for (int m = 1; m <= n_; ++m) {
      const double lo = m, hi = m + 1.0;
      m0_[m] = (std::pow(lo, -a_) - std::pow(hi, -a_)) / a_;
      m1_[m] = (std::pow(hi, 1.0 - a_) - std::pow(lo, 1.0 - a_)) / (1.0 - a_);
    }
    pref_ = std::pow(dt_, -a_) / std::tgamma(1.0 - a_);
    pk_.resize(n_ + 1);
    for (int k = 1; k <= n_; ++k) pk_[k] = std::pow(static_cast<double>(k), -a_);
  }

  int n_steps() const { return n_; }

  // Value at node k >= 1 of D^alpha f, f given at nodes 0..k with stride.
  double at(const double* f, int k, std::ptrdiff_t stride = 1) const {
    const double fk = f[k * stride];
    double sing = 0.0;
    for (int j = 0; j + 1 < k; ++j) {
      const int m = k - j - 1;
      const double fj = f[j * stride], fj1 = f[(j + 1) * stride];
      const double c = fk - fj1, d = fj1 - fj;
      sing += (c - d * m) * m0_[m] + d * m1_[m];
    }
    sing += (fk - f[(k - 1) * stride]) / (1.0 - a_);
    return pref_ * (fk * pk_[k] + a_ * sing);
  }

 private:
  double a_;
  int n_;
  double dt_;
  double pref_;
  std::vector<double> m0_, m1_, pk_;
};

// Node 0 is not evaluated by the Weyl form (x^{-alpha} blows up); it carries
// the value at t_1.
inline GridFunction weyl_derivative_left(const GridFunction& f, double alpha) {
  const WeylOperator op(alpha, f.grid.n_steps(), f.grid.dt());
  GridFunction out(f.grid);
  for (int k = 1; k < f.size(); ++k) out[k] = op.at(f.values.data(), k);
  out[0] = f.size() > 1 ? out[1] : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// The kernel K_H(t,s) and its constants.

inline double kernel_cH(double H) {
  return std::sqrt(H * (2.0 * H - 1.0) / boost::math::beta(2.0 - 2.0 * H, H - 0.5));
}

// K_H f = kappa_H * I^1 s^{H-1/2} I^{H-1/2} s^{1/2-H} f for the c_H-normalized kernel.
inline double kernel_kappa(double H) { return kernel_cH(H) * std::tgamma(H - 0.5); }

// Gamma(1-b)/Gamma(1-2b) with b = H-1/2: the power rule for h' = 1.
inline double power_rule_c0(double H) {
  const double b = H - 0.5;
  return std::tgamma(1.0 - b) / std::tgamma(1.0 - 2.0 * b);
}

// J = int_0^1 (1 - u^{-b}) / (1-u)^{1+b} du, in closed form.
inline double expansion_J(double H) {
  const double b = H - 0.5;
  const double g = std::tgamma(1.0 - b);
  return (g * g / std::tgamma(1.0 - 2.0 * b) - 1.0) / b;
}

namespace detail {

inline const quad::Rule& gl16() {
  static const quad::Rule r = quad::gauss_legendre(16);
  return r;
}

// int_0^L v^{b-1} (s+v)^b dv, graded so the scale s is always resolved.
inline double kernel_inner(double s, double L, double b) {
  static thread_local std::map<double, quad::Rule> jac;
  auto it = jac.find(b);
  if (it == jac.end()) it = jac.emplace(b, quad::gauss_jacobi(16, 0.0, b - 1.0)).first;
  const quad::Rule& gj = it->second;
  const double a = std::min(L, s);
  double acc = 0.0;
  for (std::size_t q = 0; q < gj.x.size(); ++q) acc += gj.w[q] * std::pow(s + a * gj.x[q], b);
  acc *= std::pow(a, b);
  double lo = a;
  while (lo < L) {
    const double hi = std::min(L, 2.0 * lo);
    acc += quad::integrate(gl16(), lo, hi, [&](double v) { return std::pow(v, b - 1.0) * std::pow(s + v, b); });
    lo = hi;
  }
  return acc;
}

}  // namespace detail

inline double kernel_KH(double t, double s, const HurstParam& Hp) {
  if (!(s > 0.0)) throw std::invalid_argument("kernel_KH: requires s > 0");
  if (!(s < t)) throw std::invalid_argument("kernel_KH: requires s < t");
  const double H = Hp.value(), b = Hp.beta();
  return kernel_cH(H) * std::pow(s, -b) * detail::kernel_inner(s, t - s, b);
}

// d/dr K_H(r,s) = c_H (r/s)^{H-1/2} (r-s)^{H-3/2}
inline double kernel_KH_dr(double r, double s, const HurstParam& Hp) {
  const double b = Hp.beta();
  return kernel_cH(Hp.value()) * std::pow(r / s, b) * std::pow(r - s, b - 1.0);
}

// ---------------------------------------------------------------------------
// Cell moments of K_H in integer time units.  By homogeneity
// K_H(i dt, (k+u) dt) = dt^{H-1/2} K_H(i, k+u), so one table per H serves
// every grid.  For each row i and cell k < i the table holds
//   int_0^1 K(i,k+u) f(u) du  for f in {1, u, (1-u)^{b}} and, in cell 0, u^{-b}.
class KernelCellMoments {
 public:
  enum Fn { kOne = 0, kU = 1, kTail = 2, kHead = 3 };

  KernelCellMoments(double H, int n_rows) : H_(H), b_(H - 0.5), n_(n_rows), cH_(kernel_cH(H)) {
    data_.assign(static_cast<std::size_t>(n_) * (n_ + 1) / 2 * 3, 0.0);
    head_.assign(n_ + 1, 0.0);
    build();
  }

  double H() const { return H_; }
  int rows() const { return n_; }
  // Requires 0 <= k < i <= rows().
  double get(int i, int k, Fn f) const {
    if (f == kHead) return head_[i];
    return data_[(static_cast<std::size_t>(i) * (i - 1) / 2 + k) * 3 + f];
  }

 private:
  double& ref(int i, int k, int f) { return data_[(static_cast<std::size_t>(i) * (i - 1) / 2 + k) * 3 + f]; }

  double K(double i, double s) const { return cH_ * std::pow(s, -b_) * detail::kernel_inner(s, i - s, b_); }

  // K(i+1,s) - K(i,s) for s <= i - 1.
  double increment(double i, double s) const {
    const auto& r = detail::gl16();
    double acc = 0.0;
    for (std::size_t q = 0; q < r.x.size(); ++q) {
      const double x = i + r.x[q];
      acc += r.w[q] * std::pow(x, b_) * std::pow(x - s, b_ - 1.0);
    }
    return cH_ * std::pow(s, -b_) * acc;
  }

  struct Node {
    double u, w;
  };

  // Composite rule on [0,1] with geometric refinement toward singular ends.
  // The terminal panels absorb u^{lo_exp} or (1-u)^{hi_exp} into the weight.
  static std::vector<Node> graded(bool left, double lo_exp, bool right, double hi_exp) {
    static const quad::Rule gl = quad::gauss_legendre(12);
    const int levels = 20;
    std::vector<Node> out;
    auto add_gl = [&](double lo, double hi) {
      for (std::size_t q = 0; q < gl.x.size(); ++q) out.push_back({lo + (hi - lo) * gl.x[q], (hi - lo) * gl.w[q]});
    };
    // Terminal panel of width e at the left end, weight u^{ex} divided back out.
    auto add_terminal = [&](double e, double ex, bool at_left) {
      const quad::Rule gj = quad::gauss_jacobi(12, 0.0, ex);
      for (std::size_t q = 0; q < gj.x.size(); ++q) {
        const double x = e * gj.x[q];
        const double w = std::pow(e, 1.0 + ex) * gj.w[q] / std::pow(x, ex);
        out.push_back({at_left ? x : 1.0 - x, w});
      }
    };
    const double eps = std::ldexp(1.0, -levels);
    if (left) {
      add_terminal(eps, lo_exp, true);
      for (double lo = eps; lo < 0.5; lo *= 2.0) add_gl(lo, std::min(0.5, 2.0 * lo));
    } else {
      add_gl(0.0, 0.5);
    }
    if (right) {
      add_terminal(eps, hi_exp, false);
      for (double lo = eps; lo < 0.5; lo *= 2.0) add_gl(1.0 - std::min(0.5, 2.0 * lo), 1.0 - lo);
    } else {
      add_gl(0.5, 1.0);
    }
    return out;
  }

  void build() {
    const double b = b_;
    const quad::Rule gl = quad::gauss_legendre(12);
    const quad::Rule gjt = quad::gauss_jacobi(12, b, 0.0);
    const auto diag_nodes = graded(false, 0.0, true, b);
    // Cell 0 carries K's u^{-b} onset; the u^{-b} basis function doubles it.
    const auto head_nodes = graded(true, -b, true, b);
    const auto head2_nodes = graded(true, -2.0 * b, true, b);

    // Cell 0, every row.
    {
      std::vector<double> kv(head_nodes.size()), kv2(head2_nodes.size());
      for (int i = 1; i <= n_; ++i) {
        auto advance = [&](const std::vector<Node>& nodes, std::vector<double>& vals) {
          for (std::size_t q = 0; q < nodes.size(); ++q) {
            const double u = nodes[q].u;
            vals[q] = (i <= 2) ? K(i, u) : vals[q] + increment(i - 1.0, u);
          }
        };
        advance(head_nodes, kv);
        advance(head2_nodes, kv2);
        double m[4] = {0, 0, 0, 0};
        for (std::size_t q = 0; q < head_nodes.size(); ++q) {
          const double u = head_nodes[q].u;
          const double w = head_nodes[q].w * kv[q];
          m[0] += w;
          m[1] += w * u;
          m[2] += w * std::pow(1.0 - u, b);
        }
        for (std::size_t q = 0; q < head2_nodes.size(); ++q)
          m[3] += head2_nodes[q].w * kv2[q] * std::pow(head2_nodes[q].u, -b);
        for (int f = 0; f < 3; ++f) ref(i, 0, f) = m[f];
        head_.at(i) = m[3];
      }
    }
    // Cells k >= 1.
    for (int k = 1; k < n_; ++k) {
      // Row k+1: K vanishes like (k+1-s)^b at the right end of the cell.
      {
        double m[3] = {0, 0, 0};
        for (const auto& nd : diag_nodes) {
          const double w = nd.w * K(k + 1.0, k + nd.u);
          m[0] += w;
          m[1] += w * nd.u;
          m[2] += w * std::pow(1.0 - nd.u, b);
        }
        for (int f = 0; f < 3; ++f) ref(k + 1, k, f) = m[f];
      }
      if (k + 2 > n_) continue;
      std::vector<double> kg(gl.x.size()), kt(gjt.x.size());
      for (int i = k + 2; i <= n_; ++i) {
        double m[3] = {0, 0, 0};
        for (std::size_t q = 0; q < gl.x.size(); ++q) {
          const double s = k + gl.x[q];
          kg[q] = (i == k + 2) ? K(i, s) : kg[q] + increment(i - 1.0, s);
          m[0] += gl.w[q] * kg[q];
          m[1] += gl.w[q] * kg[q] * gl.x[q];
        }
        for (std::size_t q = 0; q < gjt.x.size(); ++q) {
          const double s = k + gjt.x[q];
          kt[q] = (i == k + 2) ? K(i, s) : kt[q] + increment(i - 1.0, s);
          m[2] += gjt.w[q] * kt[q];
        }
        for (int f = 0; f < 3; ++f) ref(i, k, f) = m[f];
      }
    }
  }

  double H_, b_;
  int n_;
  double cH_;
  std::vector<double> data_;
  std::vector<double> head_;
};

// Shared immutable tables, one per H, grown on demand.
inline std::shared_ptr<const KernelCellMoments> kernel_moments(double H, int n_rows) {
  static std::mutex mu;
  static std::map<double, std::shared_ptr<const KernelCellMoments>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[H];
  if (!slot || slot->rows() < n_rows) slot = std::make_shared<const KernelCellMoments>(H, n_rows);
  return slot;
}

// ---------------------------------------------------------------------------
// Operators K_H, K_H*, K_H^{-1} on grid functions.

// (K_H f)(t_i) = int_0^{t_i} K_H(t_i,s) f(s) ds with f linear on cells.
inline GridFunction apply_KH(const GridFunction& f, const HurstParam& Hp) {
  const int n = f.grid.n_steps();
  const auto tab = kernel_moments(Hp.value(), n);
  const double scale = std::pow(f.grid.dt(), Hp.beta() + 1.0);
  GridFunction out(f.grid);
  for (int i = 1; i <= n; ++i) {
    double acc = 0.0;
    for (int k = 0; k < i; ++k)
      acc += f[k] * tab->get(i, k, KernelCellMoments::kOne) +
             (f[k + 1] - f[k]) * tab->get(i, k, KernelCellMoments::kU);
    out[i] = scale * acc;
  }
  return out;
}

// (K_H* psi)(s) = K_H(T,s) psi(s) + int_s^T (psi(r)-psi(s)) dK_H(r,s)/dr dr.
// Node 0 is +-infinity unless psi(0) = 0 (K_H(T,s) ~ s^{1/2-H}).
inline GridFunction apply_KH_star(const GridFunction& psi, const HurstParam& Hp) {
  const int n = psi.grid.n_steps();
  const double dt = psi.grid.dt(), T = psi.grid.horizon();
  const double b = Hp.beta(), cH = kernel_cH(Hp.value());
  const quad::Rule gj = quad::gauss_jacobi(16, 0.0, b);
  const auto& gl = detail::gl16();
  GridFunction out(psi.grid);
  for (int k = 1; k <= n; ++k) {
    const double s = psi.grid.t(k);
    double acc = k < n ? kernel_KH(T, s, Hp) * psi[k] : 0.0;
    double sing = 0.0;
    for (int j = k; j < n; ++j) {
      const double slope = (psi[j + 1] - psi[j]) / dt;
      const double r0 = psi.grid.t(j);
      if (j == k) {
        // (psi(r)-psi(s)) (r-s)^{b-1} = slope (r-s)^b: weight absorbed by the Jacobi rule.
        double part = 0.0;
        for (std::size_t q = 0; q < gj.x.size(); ++q) part += gj.w[q] * std::pow(s + dt * gj.x[q], b);
        sing += slope * std::pow(dt, 1.0 + b) * part;
      } else {
        const double base = psi[j] - psi[k];
        sing += quad::integrate(gl, r0, r0 + dt, [&](double r) {
          return (base + slope * (r - r0)) * std::pow(r, b) * std::pow(r - s, b - 1.0);
        });
      }
    }
    acc += cH * std::pow(s, -b) * sing;
    out[k] = acc;
  }
  out[0] = psi[0] == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), psi[0]);
  return out;
}

// (K_H^{-1} h)(s) = kappa_H^{-1} s^{H-1/2} D^{H-1/2}_{0+}(s^{1/2-H} h')(s), with h'
// supplied at the nodes and interpolated linearly.  The constant part h'(0)
// goes through the power rule; the remainder vanishes at 0 and goes through the
// Weyl quadrature.  Node 0 carries the limit value (infinite when h'(0) != 0).
inline GridFunction apply_KH_inverse_from_derivative(const GridFunction& hp, const HurstParam& Hp) {
  const int n = hp.grid.n_steps();
  const double b = Hp.beta(), H = Hp.value();
  const double inv_kappa = 1.0 / kernel_kappa(H);
  const double lead = power_rule_c0(H) * hp[0];
  std::vector<double> f(n + 1, 0.0);
  for (int k = 1; k <= n; ++k) f[k] = std::pow(hp.grid.t(k), -b) * (hp[k] - hp[0]);
  const WeylOperator op(b, n, hp.grid.dt());
  GridFunction out(hp.grid);
  for (int k = 1; k <= n; ++k) {
    const double t = hp.grid.t(k);
    out[k] = inv_kappa * (lead * std::pow(t, -b) + std::pow(t, b) * op.at(f.data(), k));
  }
  out[0] = hp[0] == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), hp[0]);
  return out;
}

// h' from second-order differences of h: centred inside, one-sided at T, and
// the first slope at t = 0.
inline GridFunction apply_KH_inverse(const GridFunction& h, const HurstParam& Hp) {
  if (std::abs(h[0]) > 0.0) throw std::invalid_argument("apply_KH_inverse: requires h(0) = 0");
  const int n = h.grid.n_steps();
  const double dt = h.grid.dt();
  GridFunction hp(h.grid);
  hp[0] = (h[1] - h[0]) / dt;
  for (int k = 1; k < n; ++k) hp[k] = (h[k + 1] - h[k - 1]) / (2.0 * dt);
  hp[n] = n >= 2 ? (3.0 * h[n] - 4.0 * h[n - 1] + h[n - 2]) / (2.0 * dt) : hp[0];
  return apply_KH_inverse_from_derivative(hp, Hp);
}

}  // namespace mvfbm
