#pragma once

#include "sensitivity.hpp"

#include <optional>

namespace mvfbm {

// A complete model: coefficients, initial law, Hurst index and horizon.
struct ModelSpec {
  std::string name;
  ModelKind kind = ModelKind::kNonDegenerate;
  std::shared_ptr<const Drift> drift;
  DiffusionSpec diff;
  InitialLaw init;
  double H = 0.75;
  double T = 1.0;
  std::optional<DegenerateModel> degenerate;  // set iff kind == kDegenerate

  int dim() const { return drift->dim(); }
  int noise_dim() const { return diff.noise_dim; }

  static ModelSpec from_degenerate(std::string name, DegenerateModel dm, InitialLaw init, double H, double T) {
    dm.check();
    ModelSpec m{std::move(name), ModelKind::kDegenerate, dm.drift(), dm.diffusion(), std::move(init), H, T, dm};
    return m;
  }
};

namespace test_functions {

inline TestFunction constant(double c = 1.0) { return {"const", [c](const Vec&) { return c; }, std::abs(c), 0.0}; }
inline TestFunction linear() { return {"linear", [](const Vec& x) { return x(0); }, std::nullopt, 1.0}; }
inline TestFunction sine() { return {"sin", [](const Vec& x) { return std::sin(x(0)); }, 1.0, 1.0}; }
inline TestFunction cosine() { return {"cos", [](const Vec& x) { return std::cos(x(0)); }, 1.0, 1.0}; }

inline TestFunction by_name(const std::string& name) {
  if (name == "const") return constant();
  if (name == "linear") return linear();
  if (name == "sin") return sine();
  if (name == "cos") return cosine();
  throw std::invalid_argument("unknown test function '" + name + "' (const, linear, sin, cos)");
}

// f(R tanh(x / R)) componentwise: bounded whenever f is continuous.
inline TestFunction clamped(const TestFunction& f, double R) {
  if (!(R > 0)) throw std::invalid_argument("clamped: radius must be positive");
  TestFunction out{f.name + "@clamp", [g = f.f, R](const Vec& x) {
                     Vec y(x.size());
                     for (Eigen::Index i = 0; i < x.size(); ++i) y(i) = R * std::tanh(x(i) / R);
                     return g(y);
                   },
                   f.sup_bound, f.lipschitz};
  if (!out.sup_bound && f.lipschitz) out.sup_bound = std::abs(f.f(Vec::Zero(1))) + *f.lipschitz * R;
  return out;
}

}  // namespace test_functions

inline Direction direction_by_name(const std::string& name, int d) {
  if (name == "constant") return Direction::constant(Vec::Ones(d));
  if (name == "identity") return Direction::scaled_identity(d, 1.0);
  if (name == "sin") return Direction::sine(d, 1.0);
  throw std::invalid_argument("unknown direction '" + name + "' (constant, identity, sin)");
}

// Clamp radius: ten times the root mean square of the ensemble at T.
inline double clamp_radius(const ParticleEnsemble& e) {
  const double r = moment(e.measure(e.grid.n_steps()), 2.0);
  return 10.0 * std::max(r, 1e-12);
}

inline std::shared_ptr<const PathBatch> model_noise(const ModelSpec& m, int n_steps, int n_paths, std::uint64_t seed) {
  if (n_paths < 2) throw std::invalid_argument("need at least two paths");
  return std::make_shared<const PathBatch>(TimeGrid(m.T, n_steps), HurstParam(m.H), n_paths, m.noise_dim(), seed);
}

inline std::vector<double> eval_at(const ParticleEnsemble& e, int k, const TestFunction& f) {
  std::vector<double> out(e.N);
  parallel_for(static_cast<std::size_t>(e.N), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = f(Vec(Eigen::Map<const Vec>(e.state(k, static_cast<int>(i)), e.d)));
  });
  return out;
}

// Ensemble, variation, integrand and delta for one direction on a fixed noise batch.
struct BismutRun {
  ParticleEnsemble ensemble;
  VariationEnsemble variation;
  BismutIntegrand integrand;
  std::vector<double> delta;
};

inline BismutIntegrand integrand_for(const ModelSpec& m, const ParticleEnsemble& e, const VariationEnsemble& v) {
  if (m.kind == ModelKind::kDegenerate) {
    const DegenerateConstruction dc(*m.degenerate, e.grid);
    return build_h_degenerate(*m.degenerate, dc, e, v);
  }
  return build_h_nondegenerate(e, v, *m.drift, m.diff);
}

inline BismutRun run_bismut(const ModelSpec& m, const Direction& phi, std::shared_ptr<const PathBatch> noise) {
  auto e = solve_euler(*m.drift, m.diff, m.init, noise);
  auto v = variation_flow(e, *m.drift, phi);
  auto bi = integrand_for(m, e, v);
  auto d = skorokhod_delta(bi, *noise);
  return {std::move(e), std::move(v), std::move(bi), std::move(d)};
}

struct BismutEstimate {
  double value = 0.0;      // mean of f(X_T) delta
  double std_error = 0.0;
  double centered = 0.0;   // mean of (f(X_T) - mean f) delta
  double centered_se = 0.0;
  int n_paths = 0;
  std::string f_name;
  std::string phi_name;
  ModelKind kind = ModelKind::kNonDegenerate;
  double clamp_radius = 0.0;
  double mean_f = 0.0;
  double var_f = 0.0;
  double delta_mean = 0.0;
  double delta_se = 0.0;
  double route_gap = 0.0;
  std::vector<std::string> warnings;
};

inline BismutEstimate bismut_from_run(const BismutRun& r, const TestFunction& f, const Direction& phi, double R) {
  const auto fc = test_functions::clamped(f, R);
  const auto fx = eval_at(r.ensemble, r.ensemble.grid.n_steps(), fc);
  const int N = r.ensemble.N;
  const auto sf = mean_se(fx);
  std::vector<double> raw(N), cen(N);
  for (int i = 0; i < N; ++i) {
    raw[i] = fx[i] * r.delta[i];
    cen[i] = (fx[i] - sf.mean) * r.delta[i];
  }
  const auto a = mean_se(raw), c = mean_se(cen), sd = mean_se(r.delta);
  BismutEstimate out;
  out.value = a.mean;
  out.std_error = a.se;
  out.centered = c.mean;
  out.centered_se = c.se;
  out.n_paths = N;
  out.f_name = fc.name;
  out.phi_name = phi.name;
  out.kind = r.integrand.kind;
  out.clamp_radius = R;
  out.mean_f = sf.mean;
  out.var_f = sf.var;
  out.delta_mean = sd.mean;
  out.delta_se = sd.se;
  out.route_gap = r.integrand.route_gap;
  out.warnings = r.integrand.warnings;
  return out;
}

inline BismutEstimate estimate_bismut(const ModelSpec& m, const TestFunction& f, const Direction& phi, int n_steps,
                                      int n_paths, std::uint64_t seed) {
  const auto r = run_bismut(m, phi, model_noise(m, n_steps, n_paths, seed));
  return bismut_from_run(r, f, phi, clamp_radius(r.ensemble));
}

struct FDEstimate {
  std::vector<double> eps;     // strictly decreasing
  std::vector<double> values;  // (P_T f(mu_eps) - P_T f(mu)) / eps
  std::vector<double> std_errors;
  double extrapolated = 0.0;   // two-point Richardson on the two smallest eps
  double std_error = 0.0;
  double clamp_radius = 0.0;
};

// Common random numbers: the shifted systems reuse the base noise and initial draws.
inline FDEstimate estimate_fd(const ModelSpec& m, const TestFunction& f, const Direction& phi, std::vector<double> eps,
                              int n_steps, int n_paths, std::uint64_t seed) {
  if (eps.size() < 2) throw std::invalid_argument("estimate_fd: need at least two eps values");
  for (std::size_t i = 0; i < eps.size(); ++i)
    if (!(eps[i] > 0) || (i > 0 && !(eps[i] < eps[i - 1])))
      throw std::invalid_argument("estimate_fd: eps must be positive and strictly decreasing");
  const auto noise = model_noise(m, n_steps, n_paths, seed);
  const auto base = solve_euler(*m.drift, m.diff, m.init, noise);
  FDEstimate out;
  out.eps = eps;
  out.clamp_radius = clamp_radius(base);
  const auto fc = test_functions::clamped(f, out.clamp_radius);
  const auto f0 = eval_at(base, n_steps, fc);
  std::vector<std::vector<double>> quot;
  for (double e : eps) {
    const auto xe = solve_euler(*m.drift, m.diff, m.init.shifted(phi, e), noise);
    const auto fe = eval_at(xe, n_steps, fc);
    std::vector<double> q(n_paths);
    for (int i = 0; i < n_paths; ++i) q[i] = (fe[i] - f0[i]) / e;
    const auto s = mean_se(q);
    out.values.push_back(s.mean);
    out.std_errors.push_back(s.se);
    quot.push_back(std::move(q));
  }
  const std::size_t n = eps.size();
  const double e1 = eps[n - 2], e2 = eps[n - 1];
  std::vector<double> ext(n_paths);
  for (int i = 0; i < n_paths; ++i) ext[i] = (e1 * quot[n - 1][i] - e2 * quot[n - 2][i]) / (e1 - e2);
  const auto s = mean_se(ext);
  out.extrapolated = s.mean;
  out.std_error = s.se;
  return out;
}

struct NormEstimate {
  double sup_abs = 0.0;          // sup over the orthonormalized basis of |D^L_phi P_T f|
  double variance_factor = 0.0;  // sample Var f(X_T)
  double bound_factor = 0.0;     // sup_abs / sqrt(variance_factor), 0 when both vanish
  std::vector<double> per_direction;
  std::vector<std::string> notices;
  int kept = 0;
};

// Basis orthonormalized in L^2 of the empirical initial law (modified Gram-Schmidt
// on coefficient vectors); the estimate is linear in phi so the raw-basis
// estimates are recombined.
inline NormEstimate lderiv_norm_estimate(const ModelSpec& m, const TestFunction& f, const std::vector<Direction>& basis,
                                         int n_steps, int n_paths, std::uint64_t seed) {
  if (basis.empty()) throw std::invalid_argument("lderiv_norm_estimate: empty basis");
  const auto noise = model_noise(m, n_steps, n_paths, seed);
  const auto e = solve_euler(*m.drift, m.diff, m.init, noise);
  const int nb = static_cast<int>(basis.size()), d = e.d;
  std::vector<Mat> vals(nb, Mat(n_paths, d));
  for (int a = 0; a < nb; ++a)
    for (int i = 0; i < n_paths; ++i) vals[a].row(i) = basis[a](Eigen::Map<const Vec>(e.state(0, i), d)).transpose();
  Mat G(nb, nb);
  for (int a = 0; a < nb; ++a)
    for (int b = 0; b < nb; ++b) G(a, b) = (vals[a].array() * vals[b].array()).sum() / n_paths;
  NormEstimate out;
  std::vector<Vec> coef;
  for (int a = 0; a < nb; ++a) {
    Vec v = Vec::Unit(nb, a);
    for (const auto& c : coef) v -= (c.dot(G * v)) * c;
    const double nrm2 = v.dot(G * v);
    if (!(nrm2 > 1e-10 * std::max(G(a, a), 1e-300))) {
      out.notices.push_back("direction '" + basis[a].name + "' dropped: dependent in L2(mu)");
      continue;
    }
    coef.push_back(v / std::sqrt(nrm2));
  }
  out.kept = static_cast<int>(coef.size());
  const double R = clamp_radius(e);
  const auto fc = test_functions::clamped(f, R);
  const auto fx = eval_at(e, n_steps, fc);
  out.variance_factor = mean_se(fx).var;
  Vec raw = Vec::Zero(nb);
  for (int a = 0; a < nb; ++a) {
    bool used = false;
    for (const auto& c : coef) used = used || c(a) != 0.0;
    if (!used) continue;
    const auto v = variation_flow(e, *m.drift, basis[a]);
    const auto bi = integrand_for(m, e, v);
    const auto delta = skorokhod_delta(bi, *noise);
    std::vector<double> prod(n_paths);
    const double mf = pairwise_mean(fx);
    for (int i = 0; i < n_paths; ++i) prod[i] = (fx[i] - mf) * delta[i];
    raw(a) = pairwise_mean(prod);
  }
  for (const auto& c : coef) {
    const double v = c.dot(raw);
    out.per_direction.push_back(v);
    out.sup_abs = std::max(out.sup_abs, std::abs(v));
  }
  out.bound_factor = out.variance_factor > 0 ? out.sup_abs / std::sqrt(out.variance_factor) : 0.0;
  return out;
}

struct TvReport {
  std::vector<double> shifts;
  std::vector<double> w2;
  std::vector<double> tv_lower;
  std::vector<double> ratio;
  double max_over_min = 0.0;
  int family_size = 0;
  bool w2_approximate = false;
};

// Random bounded family cos(<w, x> + theta), |f| <= 1, drawn from the family stream.
inline std::vector<TestFunction> cosine_family(int size, int d, std::uint64_t seed) {
  std::vector<TestFunction> fam;
  for (int j = 0; j < size; ++j) {
    const NormalStream s(seed, static_cast<std::uint64_t>(j), 0, StreamTag::kFamily);
    Vec w(d);
    for (int c = 0; c < d; ++c) w(c) = s.normal(c);
    const double theta = 2.0 * M_PI * s.uniforms(std::uint64_t{1} << 32)[0];
    fam.push_back({"cos" + std::to_string(j), [w, theta](const Vec& x) { return std::cos(w.dot(x) + theta); }, 1.0,
                   w.norm()});
  }
  return fam;
}

// nu = mu shifted by c e_1; TV(law X_T^mu, law X_T^nu) is bounded below by the
// largest mean difference over the family.
inline TvReport tv_probe(const ModelSpec& m, const std::vector<double>& shifts, int family_size, int n_steps,
                         int n_paths, std::uint64_t seed) {
  const auto noise = model_noise(m, n_steps, n_paths, seed);
  const auto base = solve_euler(*m.drift, m.diff, m.init, noise);
  const auto fam = cosine_family(family_size, base.d, seed);
  std::vector<std::vector<double>> f0;
  for (const auto& f : fam) f0.push_back(eval_at(base, n_steps, f));
  TvReport r;
  r.family_size = family_size;
  Vec e1 = Vec::Zero(base.d);
  e1(0) = 1.0;
  for (double c : shifts) {
    const auto nu = solve_euler(*m.drift, m.diff, m.init.shifted(Direction::constant(e1), c), noise);
    const auto w = wasserstein_detail(base.measure(0), nu.measure(0), 2.0);
    r.w2_approximate = r.w2_approximate || w.approximate;
    double sup = 0.0;
    for (std::size_t j = 0; j < fam.size(); ++j) {
      const auto f1 = eval_at(nu, n_steps, fam[j]);
      std::vector<double> diff(n_paths);
      for (int i = 0; i < n_paths; ++i) diff[i] = f1[i] - f0[j][i];
      sup = std::max(sup, std::abs(pairwise_mean(diff)));
    }
    r.shifts.push_back(c);
    r.w2.push_back(w.value);
    r.tv_lower.push_back(sup);
    r.ratio.push_back(w.value > 0 ? sup / w.value : 0.0);
  }
  const auto [lo, hi] = std::minmax_element(r.ratio.begin(), r.ratio.end());
  r.max_over_min = *lo > 0 ? *hi / *lo : std::numeric_limits<double>::infinity();
  return r;
}

// E sech^2(B_T / R) with B_T ~ N(0, T^{2H}): the exact value for the pure-noise
// model with X_0 = 0, phi = 1 and the clamped identity.
inline double pure_noise_oracle(double H, double T, double R) {
  const double sd = std::pow(T, H);
  const auto gl = quad::gauss_legendre(32);
  double acc = 0.0;
  const int cells = 64;
  const double lo = -12.0, w = 24.0 / cells;
  for (int c = 0; c < cells; ++c)
    for (std::size_t q = 0; q < gl.x.size(); ++q) {
      const double z = lo + (c + gl.x[q]) * w, s = 1.0 / std::cosh(sd * z / R);
      acc += gl.w[q] * w * s * s * std::exp(-0.5 * z * z);
    }
  return acc / std::sqrt(2.0 * M_PI);
}

}  // namespace mvfbm
