#include <mvfbm/experiments.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iostream>

using namespace mvfbm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailedChecks = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"McKean-Vlasov SDEs driven by fBm: simulation and Bismut-type L-derivative weights"};
  std::string experiment, config_path;
  int n_workers = 0;
  app.add_option("experiment", experiment, "simulate | picard | bismut | fd-check | scaling | tv | validate")
      ->required()
      ->check(CLI::IsMember(experiment_names()));
  app.add_option("--config", config_path, "INI run configuration")->check(CLI::ExistingFile);
  app.add_option("--workers", n_workers, "worker threads (default: MVFBM_WORKERS or 1)")->check(CLI::PositiveNumber);
  app.allow_extras();
  app.footer("Any config key can be overridden as --section.key=value, e.g. --sim.seed=7.");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  if (n_workers == 0) {
    if (const char* env = std::getenv("MVFBM_WORKERS")) {
      try {
        n_workers = std::stoi(env);
      } catch (...) {
        n_workers = 0;
      }
      if (n_workers < 1) {
        std::cerr << "config error: MVFBM_WORKERS must be a positive integer, got '" << env << "'\n";
        return kExitConfig;
      }
    } else {
      n_workers = 1;
    }
  }
  set_workers(n_workers);

  std::vector<std::string> overrides;
  for (const auto& x : app.remaining()) {
    if (x.rfind("--", 0) != 0 || x.find('=') == std::string::npos) {
      std::cerr << "config error: unexpected argument '" << x << "' (overrides take the form --section.key=value)\n";
      return kExitConfig;
    }
    overrides.push_back(x);
  }
  overrides.push_back("--experiment.name=" + experiment);

  RunConfig cfg;
  try {
    cfg = load_config(config_path, overrides);
    cfg.build_preset();
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  const std::filesystem::path dir = cfg.directory;
  try {
    const auto res = run_experiment(cfg, dir);
    const std::string report = res.report.dump(2) + "\n";
    std::ofstream(dir / "report.json") << report;
    json manifest = {{"experiment", cfg.experiment},
                     {"config_file", config_path.empty() ? json(nullptr) : json(std::filesystem::absolute(config_path).string())},
                     {"overrides", overrides},
                     {"resolved_config", cfg.canonical()},
                     {"config_hash", cfg.hash()},
                     {"seed", cfg.seed},
                     {"workers", n_workers},
                     {"created", utc_now()},
                     {"outputs", res.files},
                     {"report", "report.json"},
                     {"pass", res.pass()}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
    for (const auto& c : res.checks) std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    std::cout << "report: " << (dir / "report.json").string() << "\n";
    return res.pass() ? kExitOk : kExitFailedChecks;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return kExitNumerical;
  }
}
