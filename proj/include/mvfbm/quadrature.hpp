#pragma once

#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace mvfbm::quad {

struct Rule {
  std::vector<double> x;  // nodes on [0,1]
  std::vector<double> w;
};

// Golub-Welsch for the weight (1-u)^a u^b on [0,1].
inline Rule gauss_jacobi(int n, double a, double b) {
  if (n < 1 || !(a > -1.0) || !(b > -1.0)) throw std::invalid_argument("gauss_jacobi: bad arguments");
  // Jacobi polynomials on [-1,1] with weight (1-x)^a (1+x)^b.
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  const double ab = a + b;
  for (int k = 0; k < n; ++k) {
    const double s = 2.0 * k + ab;
    J(k, k) = (k == 0) ? (b - a) / (ab + 2.0) : (b * b - a * a) / (s * (s + 2.0));
    if (k + 1 < n) {
      const double m = k + 1.0;
      const double sm = 2.0 * m + ab;
      const double num = 4.0 * m * (m + a) * (m + b) * (m + ab);
      const double den = sm * sm * (sm + 1.0) * (sm - 1.0);
      J(k, k + 1) = J(k + 1, k) = std::sqrt(num / den);
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  // Total mass of (1-u)^a u^b on [0,1] is Beta(a+1, b+1).
  const double mu0 = std::exp(std::lgamma(a + 1.0) + std::lgamma(b + 1.0) - std::lgamma(ab + 2.0));
  Rule r;
  r.x.resize(n);
  r.w.resize(n);
  for (int k = 0; k < n; ++k) {
    r.x[k] = 0.5 * (1.0 + es.eigenvalues()(k));
    const double v = es.eigenvectors()(0, k);
    r.w[k] = mu0 * v * v;
  }
  return r;
}

inline Rule gauss_legendre(int n) { return gauss_jacobi(n, 0.0, 0.0); }

// Integrate f over [lo, hi] with a plain Gauss-Legendre rule.
template <class F>
double integrate(const Rule& r, double lo, double hi, F&& f) {
  double acc = 0.0;
  const double L = hi - lo;
  for (std::size_t q = 0; q < r.x.size(); ++q) acc += r.w[q] * f(lo + L * r.x[q]);
  return acc * L;
}

}  // namespace mvfbm::quad
