#pragma once

#include "config.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

namespace mvfbm {

using json = nlohmann::json;

// One named pass/fail condition inside a report.
struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline void to_json(json& j, const Check& c) { j = {{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}}; }

struct ExperimentResult {
  json report;
  std::vector<Check> checks;
  std::vector<std::string> files;  // written artifacts, relative to the output directory

  bool pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream o;
  o.precision(6);
  o << v;
  return o.str();
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& file, const std::vector<std::string>& header) : out_(file) {
    if (!out_) throw std::runtime_error("cannot write " + file.string());
    out_.precision(17);
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << "\n";
  }
  template <class... A>
  void row(const A&... v) {
    int i = 0;
    ((out_ << (i++ ? "," : "") << v), ...);
    out_ << "\n";
  }

 private:
  std::ofstream out_;
};

inline bool wants(const RunConfig& c, const std::string& fmt) {
  return std::find(c.formats.begin(), c.formats.end(), fmt) != c.formats.end();
}

inline json model_json(const RunConfig& c, const Preset& p) {
  return {{"preset", c.preset}, {"kind", c.kind}, {"dim", p.model.dim()}, {"drift", p.model.drift->name()},
          {"sigma", p.model.diff.name}, {"init", p.model.init.name}, {"H", c.H}, {"T", c.T}};
}

inline json bismut_json(const BismutEstimate& e) {
  return {{"estimate", e.centered},           {"se", e.centered_se},        {"uncentered", e.value},
          {"uncentered_se", e.std_error},     {"n_paths", e.n_paths},       {"f", e.f_name},
          {"phi", e.phi_name},                {"kind", to_string(e.kind)}, {"clamp_radius", e.clamp_radius},
          {"mean_f", e.mean_f},               {"var_f", e.var_f},           {"delta_mean", e.delta_mean},
          {"delta_se", e.delta_se},           {"route_gap", e.route_gap},   {"warnings", e.warnings}};
}

}  // namespace detail

// experiment = simulate: one ensemble, snapshot at T, moments.
inline ExperimentResult run_simulate(const RunConfig& c, const std::filesystem::path& dir) {
  const auto p = c.build_preset();
  const auto noise = model_noise(p.model, c.n_steps, c.n_particles, c.seed);
  const auto e = solve_euler(*p.model.drift, p.model.diff, p.model.init, noise);
  ExperimentResult r;
  const int n = c.n_steps;
  std::vector<double> xT(e.N), x0(e.N);
  for (int i = 0; i < e.N; ++i) {
    xT[i] = e.x(n, i, 0);
    x0[i] = e.x(0, i, 0);
  }
  const auto sT = mean_se(xT);
  json res = {{"mean_T", sT.mean}, {"var_T", sT.var}, {"moment2_T", moment(e.measure(n), 2.0)},
              {"n_particles", e.N}};
  r.checks.push_back({"finite", true, "all particles finite"});
  if (c.preset == "pure-noise" && c.sigma == "identity") {
    // X_T = X_0 + B^H_T: Var = T^{2H}; SE of the sample variance ~ Var sqrt(2/(N-1))
    const double want = std::pow(c.T, 2 * c.H), se = want * std::sqrt(2.0 / (e.N - 1));
    res["oracle_var_T"] = want;
    res["oracle_se"] = se;
    r.checks.push_back({"var_T_matches_T^2H", std::abs(sT.var - want) <= 3 * se,
                        detail::fmt(sT.var) + " vs " + detail::fmt(want) + " (3 SE = " + detail::fmt(3 * se) + ")"});
  }
  if (detail::wants(c, "csv")) {
    write_snapshot_csv(e, n, (dir / "snapshot_T.csv").string());
    r.files.push_back("snapshot_T.csv");
    detail::CsvWriter m(dir / "moments.csv", {"t", "mean_1", "moment2"});
    for (int k = 0; k <= n; k += std::max(1, n / 64)) {
      std::vector<double> v(e.N);
      for (int i = 0; i < e.N; ++i) v[i] = e.x(k, i, 0);
      m.row(e.grid.t(k), pairwise_mean(v), moment(e.measure(k), 2.0));
    }
    r.files.push_back("moments.csv");
  }
  if (detail::wants(c, "bin")) {
    write_ensemble_binary(e, (dir / "ensemble.bin").string());
    r.files.push_back("ensemble.bin");
    r.files.push_back("ensemble.bin.json");
  }
  r.report = {{"results", res}};
  return r;
}

// Picard errors e_n = E sup|X^n - X^{n-1}|^2; values at or below kFloor are converged.
inline ExperimentResult run_picard(const RunConfig& c, const std::filesystem::path& dir) {
  constexpr double kFloor = 1e-28;
  const auto p = c.build_preset();
  const auto noise = model_noise(p.model, c.n_steps, c.n_particles, c.seed);
  const auto pr = solve_picard(*p.model.drift, p.model.diff, p.model.init, noise, c.picard_iters);
  ExperimentResult r;
  const auto& e = pr.errors;
  bool mono = true;
  for (std::size_t n = 2; n < e.size(); ++n)
    if (e[n - 1] > kFloor && !(e[n] < e[n - 1])) mono = false;
  r.checks.push_back({"monotone_after_2", mono, "e_n strictly decreasing for n >= 2 until the rounding floor"});
  json res = {{"errors", e}, {"floor", kFloor}};
  if (e.size() >= 8) {
    const double ratio = e[3] > 0 ? e[7] / e[3] : 0.0;
    res["e8_over_e4"] = ratio;
    r.checks.push_back({"e8_over_e4_below_0.1", ratio < 0.1, detail::fmt(ratio)});
  }
  res["KT"] = p.model.drift->lipschitz() * c.T;
  if (detail::wants(c, "csv")) {
    detail::CsvWriter w(dir / "picard.csv", {"iteration", "error"});
    for (std::size_t n = 0; n < e.size(); ++n) w.row(n + 1, e[n]);
    r.files.push_back("picard.csv");
  }
  r.report = {{"results", res}};
  return r;
}

// Bismut estimate against finite differences (and the exact value for pure-noise).
inline ExperimentResult run_bismut_experiment(const RunConfig& c, const std::filesystem::path& dir) {
  const auto p = c.build_preset();
  const auto est = estimate_bismut(p.model, p.f, p.phi, c.n_steps, c.n_paths, c.seed);
  const auto fd = estimate_fd(p.model, p.f, p.phi, c.eps, c.n_steps, c.n_paths, c.seed);
  ExperimentResult r;
  json res = detail::bismut_json(est);
  res["fd"] = {{"eps", fd.eps}, {"values", fd.values}, {"std_errors", fd.std_errors},
               {"extrapolated", fd.extrapolated}, {"se", fd.std_error}};
  double oracle = fd.extrapolated, oracle_se = fd.std_error;
  std::string oracle_kind = "finite differences (Richardson)";
  const bool exact = c.preset == "pure-noise" && c.sigma == "identity" && p.f.name == "linear" && p.phi.name == "constant";
  if (exact) {
    oracle = pure_noise_oracle(c.H, c.T, est.clamp_radius);
    oracle_se = 0.0;
    oracle_kind = "Gaussian integration by parts";
    const double se = std::hypot(est.centered_se, fd.std_error);
    r.checks.push_back({"fd_vs_exact", std::abs(fd.extrapolated - oracle) <= 3 * se,
                        detail::fmt(fd.extrapolated) + " vs " + detail::fmt(oracle)});
  }
  const double comb = std::hypot(est.centered_se, oracle_se);
  res["oracle"] = oracle;
  res["oracle_se"] = oracle_se;
  res["oracle_kind"] = oracle_kind;
  res["combined_se"] = comb;
  r.checks.push_back({"bismut_vs_oracle", std::abs(est.centered - oracle) <= 3 * comb,
                      detail::fmt(est.centered) + " vs " + detail::fmt(oracle) + " (3 SE = " + detail::fmt(3 * comb) + ")"});
  const double cu = std::hypot(est.centered_se, est.std_error);
  r.checks.push_back({"centered_vs_uncentered", std::abs(est.centered - est.value) <= 3 * cu,
                      detail::fmt(est.centered) + " vs " + detail::fmt(est.value)});
  r.checks.push_back({"centered_variance_not_larger", est.centered_se <= est.std_error * (1 + 1e-3),
                      detail::fmt(est.centered_se) + " vs " + detail::fmt(est.std_error)});
  r.checks.push_back({"route_gap", est.route_gap < 0.02 || c.n_steps < 512, detail::fmt(est.route_gap)});
  if (detail::wants(c, "csv")) {
    detail::CsvWriter w(dir / "fd.csv", {"eps", "value", "se"});
    for (std::size_t i = 0; i < fd.eps.size(); ++i) w.row(fd.eps[i], fd.values[i], fd.std_errors[i]);
    r.files.push_back("fd.csv");
    const auto run = run_bismut(p.model, p.phi, model_noise(p.model, c.n_steps, std::min(c.n_paths, 16), c.seed));
    write_zeta_csv(run.integrand, 0, (dir / "zeta_particle0.csv").string());
    r.files.push_back("zeta_particle0.csv");
  }
  // flat fields of the report schema
  r.report = {{"f", est.f_name}, {"phi", est.phi_name}, {"n_paths", est.n_paths}, {"seed", c.seed},
              {"estimate", est.centered}, {"se", est.centered_se}, {"oracle", oracle}, {"oracle_se", oracle_se},
              {"results", res}};
  return r;
}

inline ExperimentResult run_fd_check(const RunConfig& c, const std::filesystem::path& dir) {
  const auto p = c.build_preset();
  const SolverContext ctx{p.model.drift, p.model.diff, p.model.init, model_noise(p.model, c.n_steps, c.n_particles, c.seed)};
  const auto fr = variation_fd_check(ctx, p.phi, c.eps);
  ExperimentResult r;
  r.checks.push_back({"decreasing", fr.decreasing, "E sup|(X^eps - X)/eps - Gamma|^2 decreases with eps"});
  r.checks.push_back({"order_at_least_0.7", fr.exact || fr.order >= 0.7,
                      fr.exact ? std::string("exact (rounding level)") : detail::fmt(fr.order)});
  if (detail::wants(c, "csv")) {
    detail::CsvWriter w(dir / "fd_check.csv", {"eps", "error"});
    for (std::size_t i = 0; i < fr.eps.size(); ++i) w.row(fr.eps[i], fr.error[i]);
    r.files.push_back("fd_check.csv");
  }
  r.report = {{"results", {{"eps", fr.eps}, {"error", fr.error}, {"order", fr.order}, {"exact", fr.exact}}}};
  return r;
}

// Bound factor sup|D^L P_T f| / sd f(X_T) over a list of horizons.
inline ExperimentResult run_scaling(const RunConfig& c, const std::filesystem::path& dir) {
  std::vector<double> bf;
  json rows = json::array();
  ExperimentResult r;
  std::unique_ptr<detail::CsvWriter> w;
  if (detail::wants(c, "csv")) {
    w = std::make_unique<detail::CsvWriter>(dir / "scaling.csv",
                                            std::vector<std::string>{"T", "bound_factor", "sup_abs", "variance_factor"});
    r.files.push_back("scaling.csv");
  }
  for (double T : c.T_list) {
    RunConfig ct = c;
    ct.T = T;
    const auto p = ct.build_preset();
    std::vector<Direction> basis = {p.phi};
    for (const char* extra : {"constant", "sin", "identity"})
      if (p.phi.name != extra) basis.push_back(direction_by_name(extra, p.model.dim()));
    const auto ne = lderiv_norm_estimate(p.model, p.f, basis, c.n_steps, c.n_paths, c.seed);
    bf.push_back(ne.bound_factor);
    rows.push_back({{"T", T}, {"bound_factor", ne.bound_factor}, {"sup_abs", ne.sup_abs},
                    {"variance_factor", ne.variance_factor}, {"kept", ne.kept}, {"notices", ne.notices}});
    if (w) w->row(T, ne.bound_factor, ne.sup_abs, ne.variance_factor);
  }
  bool positive = true;
  for (double v : bf) positive = positive && v > 0;
  const double slope = positive ? loglog_slope(c.T_list, bf) : std::numeric_limits<double>::quiet_NaN();
  json res = {{"table", rows}, {"slope", positive ? json(slope) : json(nullptr)}, {"expected_slope", -c.H}};
  if (c.preset == "pure-noise" && c.sigma == "identity")
    r.checks.push_back({"slope_minus_H", positive && std::abs(slope + c.H) <= 0.15,
                        detail::fmt(slope) + " vs " + detail::fmt(-c.H) + " +- 0.15"});
  else
    r.checks.push_back({"finite", positive, "slope " + detail::fmt(slope) + " (no oracle for this preset)"});
  r.report = {{"results", res}};
  return r;
}

inline ExperimentResult run_tv(const RunConfig& c, const std::filesystem::path& dir) {
  const auto p = c.build_preset();
  const auto tv = tv_probe(p.model, c.shifts, c.family_size, c.n_steps, c.n_particles, c.seed);
  ExperimentResult r;
  const bool all_zero = std::all_of(c.shifts.begin(), c.shifts.end(), [](double s) { return s == 0.0; });
  if (all_zero)
    r.checks.push_back({"zero_shift", tv.tv_lower.front() == 0.0, detail::fmt(tv.tv_lower.front())});
  else
    r.checks.push_back({"ratio_bounded", tv.max_over_min < 3.0, "max/min ratio " + detail::fmt(tv.max_over_min)});
  if (detail::wants(c, "csv")) {
    detail::CsvWriter w(dir / "tv.csv", {"shift", "w2", "tv_lower", "ratio"});
    for (std::size_t i = 0; i < tv.shifts.size(); ++i) w.row(tv.shifts[i], tv.w2[i], tv.tv_lower[i], tv.ratio[i]);
    r.files.push_back("tv.csv");
  }
  r.report = {{"results",
               {{"shifts", tv.shifts}, {"w2", tv.w2}, {"tv_lower", tv.tv_lower}, {"ratio", tv.ratio},
                {"max_over_min", all_zero ? json(nullptr) : json(tv.max_over_min)}, {"family_size", tv.family_size},
                {"w2_approximate", tv.w2_approximate}}}};
  return r;
}

// Desk-scale property suite; sizes are fixed so the verdict does not depend on the config's sim section.
inline ExperimentResult run_validate(const RunConfig& c, const std::filesystem::path& dir) {
  ExperimentResult r;
  json res = json::object();
  auto sub = [&](const std::string& tag, RunConfig rc, auto fn) {
    const auto s = fn(rc, dir);
    for (auto ch : s.checks) {
      ch.name = tag + "." + ch.name;
      r.checks.push_back(ch);
    }
    res[tag] = s.report;
    r.files.insert(r.files.end(), s.files.begin(), s.files.end());
  };
  RunConfig base = c;
  base.H = 0.75;
  base.T = 1.0;
  base.sigma = "identity";
  base.dim = 1;
  base.f.clear();
  base.phi.clear();
  base.n_steps = 64;
  base.n_particles = 2000;
  base.n_paths = 20000;
  base.seed = c.seed;
  {
    RunConfig rc = base;
    rc.preset = "pure-noise";
    rc.kind = "nondegenerate";
    rc.n_particles = 20000;
    sub("simulate", rc, run_simulate);
  }
  {
    RunConfig rc = base;
    rc.preset = "linear-meanfield";
    rc.kind = "nondegenerate";
    rc.picard_iters = 8;
    sub("picard", rc, run_picard);
  }
  {
    RunConfig rc = base;
    rc.preset = "sin-interaction";
    rc.kind = "nondegenerate";
    sub("fd_check", rc, run_fd_check);
  }
  for (const char* pre : {"pure-noise", "linear-meanfield", "kinetic-degenerate"}) {
    RunConfig rc = base;
    rc.preset = pre;
    rc.kind = std::string(pre) == "kinetic-degenerate" ? "degenerate" : "nondegenerate";
    sub(std::string("bismut_") + pre, rc, run_bismut_experiment);
  }
  {
    // K_H^{-1} K_H f = f for a smooth f
    const TimeGrid g(1.0, 256);
    const HurstParam Hp(0.75);
    const auto f = GridFunction::sample(g, [](double t) { return std::sin(2.0 * t); });
    const auto back = apply_KH_inverse(apply_KH(f, Hp), Hp);
    double err = 0.0;
    for (int k = 1; k <= 256; ++k) err = std::max(err, std::abs(back[k] - f[k]));
    r.checks.push_back({"kh_round_trip", err < 2e-2, "sup error " + detail::fmt(err)});
    res["kh_round_trip_error"] = err;
  }
  {
    const auto p = presets::kinetic_degenerate();
    const DegenerateConstruction dc(*p.model.degenerate, TimeGrid(1.0, 64));
    const double gT = dc.g(64).cwiseAbs().maxCoeff();
    r.checks.push_back({"degenerate_g_T", gT < 1e-10, detail::fmt(gT)});
    r.checks.push_back({"gramian_positive", dc.gramian_min_eigenvalue() > 0, detail::fmt(dc.gramian_min_eigenvalue())});
  }
  r.report = {{"results", res}};
  return r;
}

inline ExperimentResult run_experiment(const RunConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ExperimentResult r;
  if (c.experiment == "simulate") r = run_simulate(c, dir);
  else if (c.experiment == "picard") r = run_picard(c, dir);
  else if (c.experiment == "bismut") r = run_bismut_experiment(c, dir);
  else if (c.experiment == "fd-check") r = run_fd_check(c, dir);
  else if (c.experiment == "scaling") r = run_scaling(c, dir);
  else if (c.experiment == "tv") r = run_tv(c, dir);
  else if (c.experiment == "validate") r = run_validate(c, dir);
  else throw ConfigError("unknown experiment '" + c.experiment + "'");
  const auto p = c.build_preset();
  json rep = {{"experiment", c.experiment}, {"config_hash", c.hash()}, {"model", detail::model_json(c, p)},
              {"seed", c.seed}, {"checks", r.checks}, {"pass", r.pass()}};
  rep.update(r.report);
  r.report = std::move(rep);
  return r;
}

}  // namespace mvfbm
