#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvfbm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Thrown when a trajectory leaves the finite range; the CLI maps it to exit 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TimeGrid {
 public:
  TimeGrid(double horizon, int n_steps) : T_(horizon), n_(n_steps) {
    if (!(horizon > 0.0) || !std::isfinite(horizon))
      throw std::invalid_argument("TimeGrid: horizon must be positive");
    if (n_steps < 1) throw std::invalid_argument("TimeGrid: n_steps must be >= 1");
  }

  double horizon() const { return T_; }
  int n_steps() const { return n_; }
  int size() const { return n_ + 1; }
  double dt() const { return T_ / n_; }
  // t_n is pinned to T so the last node never drifts by rounding.
  double t(int k) const { return k == n_ ? T_ : k * (T_ / n_); }

  bool operator==(const TimeGrid& o) const { return T_ == o.T_ && n_ == o.n_; }
  bool operator!=(const TimeGrid& o) const { return !(*this == o); }

 private:
  double T_;
  int n_;
};

class HurstParam {
 public:
  explicit HurstParam(double H) : H_(H) {
    if (!(H > 0.5 && H < 1.0))
      throw std::invalid_argument("HurstParam: H must lie in (1/2, 1), got " + std::to_string(H));
  }
  double value() const { return H_; }
  // H - 1/2, the order of the fractional operators in K_H.
  double beta() const { return H_ - 0.5; }

 private:
  double H_;
};

struct GridFunction {
  TimeGrid grid;
  std::vector<double> values;

  explicit GridFunction(const TimeGrid& g, double fill = 0.0) : grid(g), values(g.size(), fill) {}
  GridFunction(const TimeGrid& g, std::vector<double> v) : grid(g), values(std::move(v)) {
    if (static_cast<int>(values.size()) != g.size())
      throw std::invalid_argument("GridFunction: expected n_steps + 1 values");
  }
  template <class F>
  static GridFunction sample(const TimeGrid& g, F&& f) {
    GridFunction out(g);
    for (int k = 0; k < g.size(); ++k) out.values[k] = f(g.t(k));
    return out;
  }

  double operator[](int k) const { return values[k]; }
  double& operator[](int k) { return values[k]; }
  int size() const { return static_cast<int>(values.size()); }
};

inline void require_same_grid(const TimeGrid& a, const TimeGrid& b, const char* where) {
  if (a != b) throw std::invalid_argument(std::string(where) + ": grid mismatch");
}

// R_H(t,s) = (t^{2H} + s^{2H} - |t-s|^{2H}) / 2
inline double covariance_RH(double t, double s, double H) {
  return 0.5 * (std::pow(t, 2 * H) + std::pow(s, 2 * H) - std::pow(std::abs(t - s), 2 * H));
}

}  // namespace mvfbm
