#pragma once

#include "core.hpp"
#include "parallel.hpp"
#include "rng.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace mvfbm {

// Equal-weight atoms, one per row.
class EmpiricalMeasure {
 public:
  explicit EmpiricalMeasure(Mat atoms) : atoms_(std::move(atoms)) {
    if (atoms_.rows() < 1 || atoms_.cols() < 1) throw std::invalid_argument("EmpiricalMeasure: need N >= 1, d >= 1");
    for (Eigen::Index i = 0; i < atoms_.rows(); ++i)
      if (!atoms_.row(i).allFinite()) throw NumericalError("EmpiricalMeasure: atom " + std::to_string(i) + " not finite");
  }
  static EmpiricalMeasure from_values(const std::vector<double>& x) {
    return EmpiricalMeasure(Eigen::Map<const Vec>(x.data(), static_cast<Eigen::Index>(x.size())));
  }

  int size() const { return static_cast<int>(atoms_.rows()); }
  int dim() const { return static_cast<int>(atoms_.cols()); }
  const Mat& atoms() const { return atoms_; }
  auto atom(int i) const { return atoms_.row(i); }
  Vec mean() const { return atoms_.colwise().mean().transpose(); }

 private:
  Mat atoms_;
};

// f: R^d -> R with optional declared sup-norm and Lipschitz bounds.
struct TestFunction {
  std::string name;
  std::function<double(const Vec&)> f;
  std::optional<double> sup_bound;
  std::optional<double> lipschitz;

  double operator()(const Vec& x) const { return f(x); }
  double operator()(double x) const { return f(Vec::Constant(1, x)); }

  // Checks the declared constants on the atoms of mu (and on neighbouring pairs for the Lipschitz bound).
  void spot_check(const EmpiricalMeasure& mu) const {
    for (int i = 0; i < mu.size(); ++i) {
      const Vec x = mu.atom(i).transpose();
      const double v = f(x);
      if (sup_bound && std::abs(v) > *sup_bound * (1 + 1e-12))
        throw std::invalid_argument("TestFunction " + name + ": |f| exceeds declared bound at atom " + std::to_string(i));
      if (lipschitz && i > 0) {
        const Vec y = mu.atom(i - 1).transpose();
        const double dx = (x - y).norm();
        if (dx > 0 && std::abs(v - f(y)) > *lipschitz * dx * (1 + 1e-9) + 1e-14)
          throw std::invalid_argument("TestFunction " + name + ": Lipschitz constant violated");
      }
    }
  }
};

inline double moment(const EmpiricalMeasure& mu, double theta) {
  if (theta < 1.0) throw std::invalid_argument("moment: theta must be >= 1");
  std::vector<double> v(mu.size());
  for (int i = 0; i < mu.size(); ++i) v[i] = std::pow(mu.atom(i).norm(), theta);
  return std::pow(pairwise_mean(v), 1.0 / theta);
}

inline EmpiricalMeasure pushforward_shift(const EmpiricalMeasure& mu, const std::function<Vec(const Vec&)>& phi,
                                          double eps) {
  Mat out = mu.atoms();
  for (int i = 0; i < mu.size(); ++i) {
    const Vec x = mu.atom(i).transpose();
    out.row(i) = (x + eps * phi(x)).transpose();
    if (!out.row(i).allFinite()) throw NumericalError("pushforward_shift: atom " + std::to_string(i) + " not finite");
  }
  return EmpiricalMeasure(std::move(out));
}

// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
// paths with potentials).  Returns col_of_row.
inline std::vector<int> solve_assignment(const Mat& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw std::invalid_argument("solve_assignment: cost must be square");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> col_of_row(n);
  for (int j = 1; j <= n; ++j) col_of_row[p[j] - 1] = j - 1;
  return col_of_row;
}

struct WassersteinResult {
  double value;
  bool approximate;  // sliced estimate (d > 1 and more than kAssignmentCap atoms)
};

namespace detail {

// W_theta^theta between two 1-D samples with arbitrary counts, via the quantile coupling.
inline double sorted_cost_1d(std::vector<double> a, std::vector<double> b, double theta) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = a.size(), nb = b.size();
  if (a.size() == b.size()) {
    std::vector<double> c(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = std::pow(std::abs(a[i] - b[i]), theta);
    return pairwise_mean(c);
  }
  // Merge the two quantile step functions.
  double acc = 0.0, pos = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double next = std::min((i + 1) / na, (j + 1) / nb);
    acc += (next - pos) * std::pow(std::abs(a[i] - b[j]), theta);
    pos = next;
    if ((i + 1) / na <= next + 1e-15) ++i;
    if ((j + 1) / nb <= next + 1e-15) ++j;
  }
  return acc;
}

inline Mat replicate_rows(const Mat& x, int times) {
  Mat out(x.rows() * times, x.cols());
  for (int r = 0; r < times; ++r) out.middleRows(r * x.rows(), x.rows()) = x;
  return out;
}

}  // namespace detail

constexpr int kAssignmentCap = 512;
constexpr int kSlicedDirections = 64;

inline WassersteinResult wasserstein_detail(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta) {
  if (theta < 1.0) throw std::invalid_argument("wasserstein: theta must be >= 1");
  if (mu.dim() != nu.dim()) throw std::invalid_argument("wasserstein: dimension mismatch");
  const int d = mu.dim();
  auto column = [](const Mat& x, const Vec& dir) {
    const Vec p = x * dir;
    return std::vector<double>(p.data(), p.data() + p.size());
  };
  if (d == 1) {
    const Vec e = Vec::Ones(1);
    return {std::pow(detail::sorted_cost_1d(column(mu.atoms(), e), column(nu.atoms(), e), theta), 1.0 / theta), false};
  }
  // Unequal counts: repeat atoms up to the common multiple, which leaves both laws unchanged.
  const long g = std::gcd(mu.size(), nu.size());
  const long n = static_cast<long>(mu.size()) / g * nu.size();
  if (n <= kAssignmentCap) {
    const Mat a = detail::replicate_rows(mu.atoms(), static_cast<int>(n / mu.size()));
    const Mat b = detail::replicate_rows(nu.atoms(), static_cast<int>(n / nu.size()));
    Mat cost(n, n);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i)
        for (long j = 0; j < n; ++j) cost(i, j) = std::pow((a.row(i) - b.row(j)).norm(), theta);
    });
    const auto match = solve_assignment(cost);
    std::vector<double> c(n);
    for (long i = 0; i < n; ++i) c[i] = cost(i, match[i]);
    return {std::pow(pairwise_mean(c), 1.0 / theta), false};
  }
  // Sliced estimate over fixed pseudo-random directions.
  std::vector<double> per_dir(kSlicedDirections);
  for (int k = 0; k < kSlicedDirections; ++k) {
    const NormalStream ns(0x5eed, static_cast<std::uint64_t>(k), 0, StreamTag::kFamily);
    Vec dir(d);
    for (int c = 0; c < d; ++c) dir(c) = ns.normal(c);
    dir.normalize();
    per_dir[k] = detail::sorted_cost_1d(column(mu.atoms(), dir), column(nu.atoms(), dir), theta);
  }
  return {std::pow(pairwise_mean(per_dir), 1.0 / theta), true};
}

inline double wasserstein(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta) {
  return wasserstein_detail(mu, nu, theta).value;
}

}  // namespace mvfbm
