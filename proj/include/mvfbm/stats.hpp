#pragma once

#include "parallel.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace mvfbm {

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  double var = 0.0;  // sample variance (n-1)
};

inline MeanSe mean_se(const std::vector<double>& x) {
  if (x.size() < 2) throw std::invalid_argument("mean_se: need at least two samples");
  MeanSe r;
  r.mean = pairwise_mean(x);
  std::vector<double> c(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) c[i] = (x[i] - r.mean) * (x[i] - r.mean);
  r.var = pairwise_sum(c) / (x.size() - 1.0);
  r.se = std::sqrt(r.var / x.size());
  return r;
}

// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope: need matching sizes >= 2");
  const double n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace mvfbm
