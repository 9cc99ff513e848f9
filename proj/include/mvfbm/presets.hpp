#pragma once

#include "bismut.hpp"

namespace mvfbm {

// Shipped example models.  Each carries the test function and direction its
// oracle is stated for.
struct Preset {
  ModelSpec model;
  TestFunction f;
  Direction phi;
  std::string oracle;  // description of the reference value
};

struct PresetParams {
  double H = 0.75;
  double T = 1.0;
  double a = -0.5;
  double beta = 0.3;
  double x0_mean = 0.5;
  double x0_sd = 1.0;
};

namespace presets {

inline const std::vector<std::string>& names() {
  static const std::vector<std::string> n = {"pure-noise", "linear-meanfield", "sin-interaction", "kinetic-degenerate"};
  return n;
}

inline Preset pure_noise(const PresetParams& p = {}) {
  ModelSpec m{"pure-noise", ModelKind::kNonDegenerate, drifts::zero(1), DiffusionSpec::identity(1),
              InitialLaw::point(Vec::Zero(1)), p.H, p.T, std::nullopt};
  return {m, test_functions::linear(), Direction::constant(Vec::Ones(1)), "E sech^2(B_T/R) (Gaussian integration by parts)"};
}

inline Preset linear_meanfield(const PresetParams& p = {}) {
  ModelSpec m{"linear-meanfield", ModelKind::kNonDegenerate, std::make_shared<drifts::LinearMeanField>(1, p.a, p.beta),
              DiffusionSpec::identity(1), InitialLaw::gaussian(Vec::Constant(1, p.x0_mean), p.x0_sd), p.H, p.T,
              std::nullopt};
  return {m, test_functions::sine(), Direction::sine(1, 1.0), "finite differences"};
}

inline Preset sin_interaction(const PresetParams& p = {}) {
  ModelSpec m{"sin-interaction", ModelKind::kNonDegenerate, std::make_shared<drifts::SinInteraction>(1, p.a, p.beta),
              DiffusionSpec::identity(1), InitialLaw::gaussian(Vec::Constant(1, p.x0_mean), p.x0_sd), p.H, p.T,
              std::nullopt};
  return {m, test_functions::sine(), Direction::sine(1, 1.0), "finite differences"};
}

// m = l = 1, A = 0, B = 1, b2(x, mu) = a (x1 + x2) + beta E X2.
inline Preset kinetic_degenerate(const PresetParams& p = {}) {
  Mat C(1, 2);
  C << p.a, p.a;
  DegenerateModel dm{Mat::Zero(1, 1), Mat::Ones(1, 1), std::make_shared<drifts::KineticForce>(1, 1, C, p.beta),
                     DiffusionSpec::identity(1)};
  auto m = ModelSpec::from_degenerate("kinetic-degenerate", dm, InitialLaw::gaussian(Vec::Constant(2, p.x0_mean), p.x0_sd),
                                      p.H, p.T);
  return {m, test_functions::sine(), Direction::sine(2, 1.0), "finite differences"};
}

inline Preset by_name(const std::string& name, const PresetParams& p = {}) {
  if (name == "pure-noise") return pure_noise(p);
  if (name == "linear-meanfield") return linear_meanfield(p);
  if (name == "sin-interaction") return sin_interaction(p);
  if (name == "kinetic-degenerate") return kinetic_degenerate(p);
  throw std::invalid_argument("unknown model preset '" + name + "'");
}

}  // namespace presets
}  // namespace mvfbm
