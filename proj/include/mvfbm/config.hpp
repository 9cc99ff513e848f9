#pragma once

#include "presets.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mvfbm {

// Raised for anything wrong with a run configuration; carries where it came from.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& where, const std::string& field, const std::string& msg)
      : std::invalid_argument(where + ": field '" + field + "': " + msg), field_(field) {}
  explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> n = {"simulate", "picard", "bismut", "fd-check", "scaling", "tv", "validate"};
  return n;
}

struct RunConfig {
  // model
  std::string preset = "pure-noise";
  std::string kind;  // derived from the preset when empty
  int dim = 1;
  double a = -0.5;
  double beta = 0.3;
  double x0_mean = 0.5;
  double x0_sd = 1.0;
  std::string sigma = "identity";  // identity | oscillating
  double sigma_amp = 0.3;
  double sigma_period = 1.0;
  std::string f;    // preset default when empty
  std::string phi;  // preset default when empty
  // sim
  double H = 0.75;
  double T = 1.0;
  int n_steps = 128;
  int n_particles = 2000;
  int n_paths = 20000;
  std::uint64_t seed = 1;
  // experiment
  std::string experiment = "simulate";
  std::vector<double> eps = {0.1, 0.05, 0.025};
  int picard_iters = 8;
  std::vector<double> T_list = {0.25, 0.5, 1.0, 2.0};
  std::vector<double> shifts = {1.0, 0.5, 0.25, 0.125};
  int family_size = 64;
  // output
  std::string directory = "out";
  std::vector<std::string> formats = {"json", "csv"};

  // Canonical key = value listing of every resolved field, sorted by key.
  std::string canonical() const;
  std::string hash() const;
  Preset build_preset() const;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n"), e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::string join(const std::vector<double>& v) {
  std::ostringstream o;
  o.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) o << (i ? "," : "") << v[i];
  return o.str();
}

inline std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Line numbers of "key = value" entries per section, for diagnostics.
inline std::map<std::string, int> key_lines(const std::string& file) {
  std::map<std::string, int> out;
  std::ifstream in(file);
  std::string line, section;
  for (int no = 1; std::getline(in, line); ++no) {
    line = trim(line);
    if (line.empty() || line[0] == ';' || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[section + "." + trim(line.substr(0, eq))] = no;
  }
  return out;
}

}  // namespace detail

inline std::string RunConfig::canonical() const {
  std::map<std::string, std::string> kv;
  auto num = [](double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
  };
  kv["model.preset"] = preset;
  kv["model.kind"] = kind;
  kv["model.dim"] = std::to_string(dim);
  kv["model.a"] = num(a);
  kv["model.beta"] = num(beta);
  kv["model.x0_mean"] = num(x0_mean);
  kv["model.x0_sd"] = num(x0_sd);
  kv["model.sigma"] = sigma;
  kv["model.sigma_amp"] = num(sigma_amp);
  kv["model.sigma_period"] = num(sigma_period);
  kv["model.f"] = f;
  kv["model.phi"] = phi;
  kv["sim.H"] = num(H);
  kv["sim.T"] = num(T);
  kv["sim.n_steps"] = std::to_string(n_steps);
  kv["sim.n_particles"] = std::to_string(n_particles);
  kv["sim.n_paths"] = std::to_string(n_paths);
  kv["sim.seed"] = std::to_string(seed);
  kv["experiment.name"] = experiment;
  kv["experiment.eps"] = detail::join(eps);
  kv["experiment.picard_iters"] = std::to_string(picard_iters);
  kv["experiment.T_list"] = detail::join(T_list);
  kv["experiment.shifts"] = detail::join(shifts);
  kv["experiment.family_size"] = std::to_string(family_size);
  kv["output.directory"] = directory;
  kv["output.formats"] = detail::join(formats);
  std::string s;
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

// The hash covers everything that changes results; the output directory does not.
inline std::string RunConfig::hash() const {
  std::string c = canonical();
  const auto p = c.find("output.directory");
  c.erase(p, c.find('\n', p) - p + 1);
  return detail::fnv1a_hex(c);
}

inline Preset RunConfig::build_preset() const {
  PresetParams pp;
  pp.H = H;
  pp.T = T;
  pp.a = a;
  pp.beta = beta;
  pp.x0_mean = x0_mean;
  pp.x0_sd = x0_sd;
  Preset p = presets::by_name(preset, pp);
  const bool degen = p.model.kind == ModelKind::kDegenerate;
  if (dim != 1) {
    if (degen) throw ConfigError("config", "model.dim", "the degenerate preset is fixed at m = l = 1");
    PresetParams q = pp;
    Preset wide = p;
    const auto& name = preset;
    if (name == "pure-noise") {
      wide.model.drift = drifts::zero(dim);
      wide.model.init = InitialLaw::point(Vec::Zero(dim));
    } else if (name == "linear-meanfield") {
      wide.model.drift = std::make_shared<drifts::LinearMeanField>(dim, q.a, q.beta);
      wide.model.init = InitialLaw::gaussian(Vec::Constant(dim, q.x0_mean), q.x0_sd);
    } else {
      wide.model.drift = std::make_shared<drifts::SinInteraction>(dim, q.a, q.beta);
      wide.model.init = InitialLaw::gaussian(Vec::Constant(dim, q.x0_mean), q.x0_sd);
    }
    wide.model.diff = DiffusionSpec::identity(dim);
    p = wide;
  }
  const int d = p.model.dim();
  if (sigma == "oscillating") {
    const auto s = DiffusionSpec::oscillating(degen ? 1 : d, 1.0, sigma_amp, sigma_period);
    if (degen) {
      auto dm = *p.model.degenerate;
      dm.sigma = s;
      p.model = ModelSpec::from_degenerate(p.model.name, dm, p.model.init, H, T);
    } else {
      p.model.diff = s;
    }
  }
  if (!f.empty()) p.f = test_functions::by_name(f);
  p.phi = direction_by_name(phi.empty() ? p.phi.name : phi, d);
  return p;
}

// Parses an INI file and applies "section.key=value" overrides, then validates.
class ConfigLoader {
 public:
  RunConfig load(const std::string& file, const std::vector<std::string>& overrides = {}) {
    boost::property_tree::ptree pt;
    if (!file.empty()) {
      try {
        boost::property_tree::ini_parser::read_ini(file, pt);
      } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(e.filename() + ":" + std::to_string(e.line()) + ": " + e.message());
      }
      lines_ = detail::key_lines(file);
      file_ = file;
    }
    for (const auto& o : overrides) {
      std::string s = o;
      if (s.rfind("--", 0) == 0) s = s.substr(2);
      const auto eq = s.find('=');
      if (eq == std::string::npos || s.find('.') == std::string::npos || s.find('.') > eq)
        throw ConfigError("override '" + o + "': expected --section.key=value");
      const std::string key = s.substr(0, eq);
      pt.put(boost::property_tree::ptree::path_type(key, '.'), s.substr(eq + 1));
      from_override_.insert(key);
    }
    return resolve(pt);
  }

 private:
  std::string where(const std::string& key) const {
    if (from_override_.count(key)) return "override --" + key;
    const auto it = lines_.find(key);
    if (it != lines_.end()) return file_ + ":" + std::to_string(it->second);
    return file_.empty() ? "config" : file_;
  }

  template <class T>
  void get(const boost::property_tree::ptree& pt, const std::string& key, T& out) {
    seen_.insert(key);
    const auto v = pt.get_optional<std::string>(boost::property_tree::ptree::path_type(key, '.'));
    if (!v) return;
    const std::string s = detail::trim(*v);
    if constexpr (std::is_same_v<T, std::string>) {
      out = s;
    } else {
      std::istringstream in(s);
      T x{};
      if (!(in >> x) || !(in >> std::ws).eof()) throw ConfigError(where(key), key, "cannot parse '" + s + "'");
      out = x;
    }
  }

  void get_list(const boost::property_tree::ptree& pt, const std::string& key, std::vector<double>& out) {
    std::string s;
    get(pt, key, s);
    if (s.empty()) return;
    std::vector<double> v;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
      std::istringstream in(detail::trim(item));
      double x;
      if (!(in >> x) || !(in >> std::ws).eof()) throw ConfigError(where(key), key, "cannot parse list item '" + item + "'");
      v.push_back(x);
    }
    out = v;
  }

  void get_words(const boost::property_tree::ptree& pt, const std::string& key, std::vector<std::string>& out) {
    std::string s;
    get(pt, key, s);
    if (s.empty()) return;
    std::vector<std::string> v;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) v.push_back(detail::trim(item));
    out = v;
  }

  void check(bool ok, const std::string& key, const std::string& msg) const {
    if (!ok) throw ConfigError(where(key), key, msg);
  }

  RunConfig resolve(const boost::property_tree::ptree& pt) {
    RunConfig c;
    get(pt, "model.preset", c.preset);
    get(pt, "model.kind", c.kind);
    get(pt, "model.dim", c.dim);
    get(pt, "model.a", c.a);
    get(pt, "model.beta", c.beta);
    get(pt, "model.x0_mean", c.x0_mean);
    get(pt, "model.x0_sd", c.x0_sd);
    get(pt, "model.sigma", c.sigma);
    get(pt, "model.sigma_amp", c.sigma_amp);
    get(pt, "model.sigma_period", c.sigma_period);
    get(pt, "model.f", c.f);
    get(pt, "model.phi", c.phi);
    get(pt, "sim.H", c.H);
    get(pt, "sim.T", c.T);
    get(pt, "sim.n_steps", c.n_steps);
    get(pt, "sim.n_particles", c.n_particles);
    get(pt, "sim.n_paths", c.n_paths);
    get(pt, "sim.seed", c.seed);
    get(pt, "experiment.name", c.experiment);
    get_list(pt, "experiment.eps", c.eps);
    get(pt, "experiment.picard_iters", c.picard_iters);
    get_list(pt, "experiment.T_list", c.T_list);
    get_list(pt, "experiment.shifts", c.shifts);
    get(pt, "experiment.family_size", c.family_size);
    get(pt, "output.directory", c.directory);
    get_words(pt, "output.formats", c.formats);

    for (const auto& [sec, sub] : pt) {
      if (sub.empty()) throw ConfigError(where(sec), sec, "keys must live in a section");
      for (const auto& [k, v] : sub) {
        const std::string key = sec + "." + k;
        check(seen_.count(key) > 0, key, "unknown key");
      }
    }

    const auto& pn = presets::names();
    check(std::find(pn.begin(), pn.end(), c.preset) != pn.end(), "model.preset",
          "unknown preset '" + c.preset + "' (pure-noise, linear-meanfield, sin-interaction, kinetic-degenerate)");
    const std::string natural = c.preset == "kinetic-degenerate" ? "degenerate" : "nondegenerate";
    if (c.kind.empty()) c.kind = natural;
    check(c.kind == "nondegenerate" || c.kind == "degenerate", "model.kind", "must be nondegenerate or degenerate");
    check(c.kind == natural, "model.kind", "preset '" + c.preset + "' is " + natural);
    check(c.dim >= 1 && c.dim <= 8, "model.dim", "must be in 1..8");
    check(c.x0_sd >= 0, "model.x0_sd", "must be >= 0");
    check(c.sigma == "identity" || c.sigma == "oscillating", "model.sigma", "must be identity or oscillating");
    check(std::abs(c.sigma_amp) < 1.0, "model.sigma_amp", "must satisfy |amp| < 1 so sigma stays invertible");
    check(c.sigma_period > 0, "model.sigma_period", "must be positive");
    if (!c.f.empty()) {
      try {
        test_functions::by_name(c.f);
      } catch (const std::invalid_argument& e) {
        check(false, "model.f", e.what());
      }
    }
    if (!c.phi.empty()) {
      try {
        direction_by_name(c.phi, 1);
      } catch (const std::invalid_argument& e) {
        check(false, "model.phi", e.what());
      }
    }
    check(c.H > 0.5 && c.H < 1.0, "sim.H", "must be in (1/2, 1)");
    check(c.T > 0 && std::isfinite(c.T), "sim.T", "must be positive");
    check(c.n_steps >= 16, "sim.n_steps", "must be >= 16");
    check(c.n_particles >= 2, "sim.n_particles", "must be >= 2");
    check(c.n_paths >= 2, "sim.n_paths", "must be >= 2");
    const auto& en = experiment_names();
    check(std::find(en.begin(), en.end(), c.experiment) != en.end(), "experiment.name",
          "unknown experiment '" + c.experiment + "'");
    check(c.eps.size() >= 2, "experiment.eps", "needs at least two values");
    for (std::size_t i = 0; i < c.eps.size(); ++i)
      check(c.eps[i] > 0 && (i == 0 || c.eps[i] < c.eps[i - 1]), "experiment.eps", "must be positive and strictly decreasing");
    check(c.picard_iters >= 1, "experiment.picard_iters", "must be >= 1");
    check(c.T_list.size() >= 2, "experiment.T_list", "needs at least two horizons");
    for (double t : c.T_list) check(t > 0, "experiment.T_list", "horizons must be positive");
    check(!c.shifts.empty(), "experiment.shifts", "needs at least one shift");
    check(c.family_size >= 1, "experiment.family_size", "must be >= 1");
    check(!c.directory.empty(), "output.directory", "must not be empty");
    for (const auto& f : c.formats)
      check(f == "json" || f == "csv" || f == "bin", "output.formats", "unknown format '" + f + "' (json, csv, bin)");
    return c;
  }

  std::string file_;
  std::map<std::string, int> lines_;
  std::set<std::string> seen_, from_override_;
};

inline RunConfig load_config(const std::string& file, const std::vector<std::string>& overrides = {}) {
  return ConfigLoader().load(file, overrides);
}

}  // namespace mvfbm
