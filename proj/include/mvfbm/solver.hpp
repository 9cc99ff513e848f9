#pragma once

#include "drift.hpp"
#include "fbm.hpp"
#include "measure.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <functional>
#include <memory>
#include <string>

namespace mvfbm {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A map R^d -> R^d with a label; used both as phi and as an initial shift.
struct Direction {
  std::string name;
  std::function<void(const double* x, double* out)> fn;
  int dim = 1;

  Vec operator()(const Vec& x) const {
    Vec out(dim);
    fn(x.data(), out.data());
    return out;
  }
  static Direction constant(const Vec& v) {
    return {"constant", [v](const double*, double* out) { std::copy(v.data(), v.data() + v.size(), out); },
            static_cast<int>(v.size())};
  }
  static Direction scaled_identity(int d, double c) {
    return {"identity", [d, c](const double* x, double* out) {
              for (int i = 0; i < d; ++i) out[i] = c * x[i];
            }, d};
  }
  static Direction sine(int d, double c) {
    return {"sin", [d, c](const double* x, double* out) {
              for (int i = 0; i < d; ++i) out[i] = c * std::sin(x[i]);
            }, d};
  }
  static Direction combine(double c1, const Direction& a, double c2, const Direction& b) {
    const int d = a.dim;
    return {"combo", [=](const double* x, double* out) {
              std::vector<double> u(d), v(d);
              a.fn(x, u.data());
              b.fn(x, v.data());
              for (int i = 0; i < d; ++i) out[i] = c1 * u[i] + c2 * v[i];
            }, d};
  }
  Direction scaled(double c) const {
    const auto f = fn;
    const int d = dim;
    return {name, [=](const double* x, double* out) {
              f(x, out);
              for (int i = 0; i < d; ++i) out[i] *= c;
            }, d};
  }
};

// Sampler of X_0 from the per-particle stream (path seed, tag kInit).
struct InitialLaw {
  std::string name;
  int dim = 1;
  std::function<void(const NormalStream&, double*)> sample;

  static InitialLaw point(const Vec& x0) {
    return {"point", static_cast<int>(x0.size()),
            [x0](const NormalStream&, double* out) { std::copy(x0.data(), x0.data() + x0.size(), out); }};
  }
  static InitialLaw gaussian(const Vec& mean, double sd) {
    return {"gaussian", static_cast<int>(mean.size()), [mean, sd](const NormalStream& s, double* out) {
              for (int c = 0; c < mean.size(); ++c) out[c] = mean(c) + sd * s.normal(c);
            }};
  }
  // Law of (Id + eps phi)(X_0), drawn from the same streams.
  InitialLaw shifted(const Direction& phi, double eps) const {
    auto base = sample;
    const int d = dim;
    const auto f = phi.fn;
    return {name + "+eps*" + phi.name, d, [=](const NormalStream& s, double* out) {
              base(s, out);
              std::vector<double> v(d);
              f(out, v.data());
              for (int c = 0; c < d; ++c) out[c] += eps * v[c];
            }};
  }
};

// N particles, time-major: row k holds every particle's state at t_k.
struct ParticleEnsemble {
  TimeGrid grid;
  int N = 0;
  int d = 0;
  RowMat X;
  std::shared_ptr<const PathBatch> noise;
  std::string init_name;

  LawView law(int k) const { return {X.row(k).data(), N, d}; }
  EmpiricalMeasure measure(int k) const {
    return EmpiricalMeasure(Eigen::Map<const RowMat>(X.row(k).data(), N, d));
  }
  double x(int k, int i, int c) const { return X(k, static_cast<Eigen::Index>(i) * d + c); }
  const double* state(int k, int i) const { return X.row(k).data() + static_cast<std::ptrdiff_t>(i) * d; }
};

namespace detail {

inline void check_finite(const double* x, int d, int i, int k, const char* what) {
  for (int c = 0; c < d; ++c)
    if (!std::isfinite(x[c]))
      throw NumericalError(std::string(what) + ": non-finite value for particle " + std::to_string(i) + " at step " +
                           std::to_string(k));
}

inline Mat sigma_at(const DiffusionSpec& diff, double t, const LawView& law) {
  return diff.sigma_law ? diff.sigma_law(t, law) : diff.sigma(t);
}

inline void check_compat(const Drift& drift, const DiffusionSpec& diff, const InitialLaw& init, const PathBatch& noise) {
  if (drift.dim() != drift.out_dim()) throw std::invalid_argument("solver: drift must map R^d to R^d");
  if (drift.dim() != diff.dim || init.dim != diff.dim) throw std::invalid_argument("solver: dimension mismatch");
  if (noise.dim() != diff.noise_dim) throw std::invalid_argument("solver: noise dimension mismatch");
}

// X_0 for all particles.
inline void initial_states(const InitialLaw& init, const PathBatch& noise, double* row) {
  const int d = init.dim;
  for (int i = 0; i < noise.size(); ++i) {
    const NormalStream s(noise.path_seed(i), 0, 0, StreamTag::kInit);
    init.sample(s, row + static_cast<std::ptrdiff_t>(i) * d);
    check_finite(row + static_cast<std::ptrdiff_t>(i) * d, d, i, 0, "initial law");
  }
}

// dst = src + b(t_k, x, mu) dt + sigma (BH_{k+1} - BH_k) for every particle, where x is
// read from `at` and the frozen law from `law`.
inline void euler_step(const FrozenDrift& fb, const Mat& sig, const PathBatch& noise, int k, double dt,
                       const double* src, const double* at, double* dst, int d, const char* what) {
  const int q = noise.dim();
  const int N = noise.size();
  const double* b0 = noise.BH_all().row(k).data();
  const double* b1 = noise.BH_all().row(k + 1).data();
  parallel_for(static_cast<std::size_t>(N), [&](std::size_t lo, std::size_t hi) {
    std::vector<double> drift(d);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::ptrdiff_t o = static_cast<std::ptrdiff_t>(i) * d, on = static_cast<std::ptrdiff_t>(i) * q;
      fb.value(at + o, drift.data());
      for (int r = 0; r < d; ++r) {
        double acc = src[o + r] + drift[r] * dt;
        for (int c = 0; c < q; ++c) acc += sig(r, c) * (b1[on + c] - b0[on + c]);
        dst[o + r] = acc;
      }
      check_finite(dst + o, d, static_cast<int>(i), k + 1, what);
    }
  });
}

}  // namespace detail

inline ParticleEnsemble solve_euler(const Drift& drift, const DiffusionSpec& diff, const InitialLaw& init,
                                    std::shared_ptr<const PathBatch> noise) {
  detail::check_compat(drift, diff, init, *noise);
  const TimeGrid& g = noise->grid();
  ParticleEnsemble e{g, noise->size(), drift.dim(), RowMat(g.size(), static_cast<Eigen::Index>(noise->size()) * drift.dim()),
                     noise, init.name};
  detail::initial_states(init, *noise, e.X.row(0).data());
  for (int k = 0; k < g.n_steps(); ++k) {
    const auto law = e.law(k);
    const auto fb = drift.freeze(g.t(k), law);
    const Mat sig = detail::sigma_at(diff, g.t(k), law);
    detail::euler_step(*fb, sig, *noise, k, g.dt(), e.X.row(k).data(), e.X.row(k).data(), e.X.row(k + 1).data(), e.d,
                       "solve_euler");
  }
  return e;
}

struct PicardResult {
  ParticleEnsemble ensemble;
  // errors[n-1] = mean_i sup_k |X^n - X^{n-1}|^2
  std::vector<double> errors;
};

inline double mean_sup_sq_diff(const RowMat& a, const RowMat& b, int N, int d) {
  std::vector<double> per(N, 0.0);
  parallel_for(static_cast<std::size_t>(N), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double sup = 0.0;
      for (Eigen::Index k = 0; k < a.rows(); ++k) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) {
          const double v = a(k, i * d + c) - b(k, i * d + c);
          s += v * v;
        }
        sup = std::max(sup, s);
      }
      per[i] = sup;
    }
  });
  return pairwise_mean(per);
}

inline PicardResult solve_picard(const Drift& drift, const DiffusionSpec& diff, const InitialLaw& init,
                                 std::shared_ptr<const PathBatch> noise, int n_iter) {
  if (n_iter < 1) throw std::invalid_argument("solve_picard: n_iter must be >= 1");
  detail::check_compat(drift, diff, init, *noise);
  const TimeGrid& g = noise->grid();
  const int N = noise->size(), d = drift.dim();
  ParticleEnsemble prev{g, N, d, RowMat(g.size(), static_cast<Eigen::Index>(N) * d), noise, init.name};
  detail::initial_states(init, *noise, prev.X.row(0).data());
  for (int k = 1; k < g.size(); ++k) prev.X.row(k) = prev.X.row(0);
  PicardResult out{prev, {}};
  for (int it = 0; it < n_iter; ++it) {
    ParticleEnsemble next = prev;
    for (int k = 0; k < g.n_steps(); ++k) {
      const auto law = prev.law(k);
      const auto fb = drift.freeze(g.t(k), law);
      const Mat sig = detail::sigma_at(diff, g.t(k), law);
      detail::euler_step(*fb, sig, *noise, k, g.dt(), next.X.row(k).data(), prev.X.row(k).data(),
                         next.X.row(k + 1).data(), d, "solve_picard");
    }
    out.errors.push_back(mean_sup_sq_diff(next.X, prev.X, N, d));
    prev = std::move(next);
  }
  out.ensemble = std::move(prev);
  return out;
}

inline void write_snapshot_csv(const ParticleEnsemble& e, int k, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file);
  out << "particle_id";
  for (int c = 0; c < e.d; ++c) out << ",x_" << c + 1;
  out << "\n";
  out.precision(17);
  for (int i = 0; i < e.N; ++i) {
    out << i;
    for (int c = 0; c < e.d; ++c) out << "," << e.x(k, i, c);
    out << "\n";
  }
}

// Raw little-endian doubles in (step, particle, component) order plus a JSON sidecar.
inline void write_ensemble_binary(const ParticleEnsemble& e, const std::string& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file);
  out.write(reinterpret_cast<const char*>(e.X.data()), static_cast<std::streamsize>(e.X.size() * sizeof(double)));
  nlohmann::json side = {{"shape", {e.grid.size(), e.N, e.d}},
                         {"order", "step,particle,component"},
                         {"dtype", "float64"},
                         {"horizon", e.grid.horizon()},
                         {"n_steps", e.grid.n_steps()},
                         {"init", e.init_name}};
  std::ofstream(file + ".json") << side.dump(2) << "\n";
}

}  // namespace mvfbm
