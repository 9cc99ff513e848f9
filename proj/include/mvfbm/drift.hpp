#pragma once

#include "core.hpp"
#include "rng.hpp"

#include <Eigen/SVD>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mvfbm {

// Read-only view of one ensemble snapshot: n atoms of dimension d, row-major.
struct LawView {
  const double* x = nullptr;
  int n = 0;
  int d = 0;
  const double* atom(int j) const { return x + static_cast<std::ptrdiff_t>(j) * d; }
};

// x -> (1/N) sum_j D^L b(t,x,.)(mu)(X_j) Gamma_j, bound to one snapshot of Gamma.
class Pairing {
 public:
  virtual ~Pairing() = default;
  virtual void apply(const double* x, double* out) const = 0;
};

// b(t,.,mu) for fixed t and mu.  Matrices are out_dim x dim, row-major.
class FrozenDrift {
 public:
  FrozenDrift(double t, LawView law, int out_dim) : t_(t), law_(law), out_(out_dim) {}
  virtual ~FrozenDrift() = default;

  virtual void value(const double* x, double* out) const = 0;
  virtual void gradient(const double* x, double* jac) const = 0;
  // jac(r, c) = c-th component of D^L b_r(t,x,.)(mu)(y)
  virtual void lions(const double* x, const double* y, double* jac) const = 0;

  // Generic O(N) per evaluation; presets with separable D^L b override it.
  virtual std::unique_ptr<Pairing> pairing(const double* gammas) const {
    struct Generic : Pairing {
      const FrozenDrift* b;
      const double* g;
      void apply(const double* x, double* out) const override {
        const int d = b->law_.d, r = b->out_;
        std::vector<double> jac(static_cast<std::size_t>(r) * d);
        std::fill(out, out + r, 0.0);
        for (int j = 0; j < b->law_.n; ++j) {
          b->lions(x, b->law_.atom(j), jac.data());
          const double* gj = g + static_cast<std::ptrdiff_t>(j) * d;
          for (int a = 0; a < r; ++a)
            for (int c = 0; c < d; ++c) out[a] += jac[a * d + c] * gj[c];
        }
        for (int a = 0; a < r; ++a) out[a] /= b->law_.n;
      }
    };
    auto p = std::make_unique<Generic>();
    p->b = this;
    p->g = gammas;
    return p;
  }

  double time() const { return t_; }
  const LawView& law() const { return law_; }
  int out_dim() const { return out_; }

 protected:
  // mean over atoms of a per-atom vector function, component-wise
  template <class F>
  std::vector<double> law_mean(int width, F&& f) const {
    std::vector<double> acc(width, 0.0), tmp(width);
    for (int j = 0; j < law_.n; ++j) {
      f(law_.atom(j), j, tmp.data());
      for (int c = 0; c < width; ++c) acc[c] += tmp[c];
    }
    for (double& v : acc) v /= law_.n;
    return acc;
  }

  double t_;
  LawView law_;
  int out_;
};

class Drift {
 public:
  virtual ~Drift() = default;
  virtual std::string name() const = 0;
  virtual int dim() const = 0;
  virtual int out_dim() const { return dim(); }
  // Declared bound on ||grad b|| + |D^L b|.
  virtual double lipschitz() const = 0;
  virtual std::unique_ptr<FrozenDrift> freeze(double t, LawView law) const = 0;
};

// Largest observed ||grad b||_2 + ||D^L b||_2 over random atom pairs of the law.
inline double observed_lipschitz(const Drift& drift, double t, LawView law, int samples, std::uint64_t seed) {
  const auto fb = drift.freeze(t, law);
  const int d = drift.dim(), r = drift.out_dim();
  std::vector<double> g(static_cast<std::size_t>(r) * d), l(g.size());
  double worst = 0.0;
  for (int s = 0; s < samples; ++s) {
    const auto u = NormalStream(seed, static_cast<std::uint64_t>(s), 0, StreamTag::kFamily).uniforms(0);
    const int i = std::min(law.n - 1, static_cast<int>(u[0] * law.n));
    const int j = std::min(law.n - 1, static_cast<int>(u[1] * law.n));
    fb->gradient(law.atom(i), g.data());
    fb->lions(law.atom(i), law.atom(j), l.data());
    const double ng = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(g.data(), r, d)
                          .jacobiSvd()
                          .singularValues()(0);
    const double nl = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(l.data(), r, d)
                          .jacobiSvd()
                          .singularValues()(0);
    worst = std::max(worst, ng + nl);
  }
  return worst;
}

inline void check_drift_bounds(const Drift& drift, double t, LawView law, int samples = 64, std::uint64_t seed = 1) {
  const double obs = observed_lipschitz(drift, t, law, samples, seed);
  if (obs > drift.lipschitz() * (1 + 1e-12))
    throw std::invalid_argument("drift " + drift.name() + ": observed derivative bound " + std::to_string(obs) +
                                " exceeds declared " + std::to_string(drift.lipschitz()));
}

namespace drifts {

// b(t,x,mu) = a x + beta E[X] (component-wise); D^L b = beta I.
class LinearMeanField : public Drift {
 public:
  LinearMeanField(int d, double a, double beta, std::string label = "linear-meanfield")
      : d_(d), a_(a), b_(beta), label_(std::move(label)) {}
  std::string name() const override { return label_; }
  int dim() const override { return d_; }
  double lipschitz() const override { return std::abs(a_) + std::abs(b_); }
  double a() const { return a_; }
  double beta() const { return b_; }

  std::unique_ptr<FrozenDrift> freeze(double t, LawView law) const override {
    struct F : FrozenDrift {
      double a, b;
      std::vector<double> mean;
      F(double t, LawView l, double a_, double b_) : FrozenDrift(t, l, l.d), a(a_), b(b_) {
        mean = b == 0.0 ? std::vector<double>(l.d, 0.0)
                        : law_mean(l.d, [&](const double* y, int, double* o) { std::copy(y, y + l.d, o); });
      }
      void value(const double* x, double* out) const override {
        for (int c = 0; c < law_.d; ++c) out[c] = a * x[c] + b * mean[c];
      }
      void gradient(const double*, double* jac) const override {
        for (int r = 0; r < law_.d; ++r)
          for (int c = 0; c < law_.d; ++c) jac[r * law_.d + c] = r == c ? a : 0.0;
      }
      void lions(const double*, const double*, double* jac) const override {
        for (int r = 0; r < law_.d; ++r)
          for (int c = 0; c < law_.d; ++c) jac[r * law_.d + c] = r == c ? b : 0.0;
      }
      std::unique_ptr<Pairing> pairing(const double* g) const override {
        struct P : Pairing {
          std::vector<double> v;
          void apply(const double*, double* out) const override { std::copy(v.begin(), v.end(), out); }
        };
        auto p = std::make_unique<P>();
        p->v.assign(law_.d, 0.0);
        if (b != 0.0) {
          p->v = law_mean(law_.d, [&](const double*, int j, double* o) {
            for (int c = 0; c < law_.d; ++c) o[c] = g[static_cast<std::ptrdiff_t>(j) * law_.d + c];
          });
          for (double& x : p->v) x *= b;
        }
        return p;
      }
    };
    return std::make_unique<F>(t, law, a_, b_);
  }

 private:
  int d_;
  double a_, b_;
  std::string label_;
};

inline std::shared_ptr<Drift> zero(int d) { return std::make_shared<LinearMeanField>(d, 0.0, 0.0, "zero"); }

// b(t,x,mu) = c, constant.
class Constant : public Drift {
 public:
  explicit Constant(Vec c) : c_(std::move(c)) {}
  std::string name() const override { return "constant"; }
  int dim() const override { return static_cast<int>(c_.size()); }
  double lipschitz() const override { return 0.0; }
  std::unique_ptr<FrozenDrift> freeze(double t, LawView law) const override {
    struct F : FrozenDrift {
      Vec c;
      F(double t, LawView l, Vec c_) : FrozenDrift(t, l, l.d), c(std::move(c_)) {}
      void value(const double*, double* out) const override { std::copy(c.data(), c.data() + c.size(), out); }
      void gradient(const double*, double* jac) const override { std::fill(jac, jac + c.size() * c.size(), 0.0); }
      void lions(const double*, const double*, double* jac) const override {
        std::fill(jac, jac + c.size() * c.size(), 0.0);
      }
    };
    return std::make_unique<F>(t, law, c_);
  }

 private:
  Vec c_;
};

// b(t,x,mu) = a x + beta E[sin X] component-wise; D^L b(y) = beta diag(cos y).
class SinInteraction : public Drift {
 public:
  SinInteraction(int d, double a, double beta) : d_(d), a_(a), b_(beta) {}
  std::string name() const override { return "sin-interaction"; }
  int dim() const override { return d_; }
  double lipschitz() const override { return std::abs(a_) + std::abs(b_); }

  std::unique_ptr<FrozenDrift> freeze(double t, LawView law) const override {
    struct F : FrozenDrift {
      double a, b;
      std::vector<double> msin;
      F(double t, LawView l, double a_, double b_) : FrozenDrift(t, l, l.d), a(a_), b(b_) {
        msin = law_mean(l.d, [&](const double* y, int, double* o) {
          for (int c = 0; c < l.d; ++c) o[c] = std::sin(y[c]);
        });
      }
      void value(const double* x, double* out) const override {
        for (int c = 0; c < law_.d; ++c) out[c] = a * x[c] + b * msin[c];
      }
      void gradient(const double*, double* jac) const override {
        for (int r = 0; r < law_.d; ++r)
          for (int c = 0; c < law_.d; ++c) jac[r * law_.d + c] = r == c ? a : 0.0;
      }
      void lions(const double*, const double* y, double* jac) const override {
        for (int r = 0; r < law_.d; ++r)
          for (int c = 0; c < law_.d; ++c) jac[r * law_.d + c] = r == c ? b * std::cos(y[c]) : 0.0;
      }
      std::unique_ptr<Pairing> pairing(const double* g) const override {
        struct P : Pairing {
          std::vector<double> v;
          void apply(const double*, double* out) const override { std::copy(v.begin(), v.end(), out); }
        };
        auto p = std::make_unique<P>();
        p->v = law_mean(law_.d, [&](const double* y, int j, double* o) {
          for (int c = 0; c < law_.d; ++c) o[c] = std::cos(y[c]) * g[static_cast<std::ptrdiff_t>(j) * law_.d + c];
        });
        for (double& x : p->v) x *= b;
        return p;
      }
    };
    return std::make_unique<F>(t, law, a_, b_);
  }

 private:
  int d_;
  double a_, b_;
};

// Second block of a kinetic system on R^{m+l}:
//   b2(x, mu) = C x + beta E[X^{(2)}],  C is l x (m+l).
class KineticForce : public Drift {
 public:
  KineticForce(int m, int l, Mat C, double beta) : m_(m), l_(l), C_(std::move(C)), b_(beta) {
    if (C_.rows() != l || C_.cols() != m + l) throw std::invalid_argument("KineticForce: C must be l x (m+l)");
  }
  std::string name() const override { return "kinetic-force"; }
  int dim() const override { return m_ + l_; }
  int out_dim() const override { return l_; }
  double lipschitz() const override { return C_.jacobiSvd().singularValues()(0) + std::abs(b_); }

  std::unique_ptr<FrozenDrift> freeze(double t, LawView law) const override {
    struct F : FrozenDrift {
      int m, l;
      Mat C;
      double b;
      std::vector<double> mean2;
      F(double t, LawView lw, int m_, int l_, Mat C_, double b_)
          : FrozenDrift(t, lw, l_), m(m_), l(l_), C(std::move(C_)), b(b_) {
        mean2 = law_mean(l, [&](const double* y, int, double* o) { std::copy(y + m, y + m + l, o); });
      }
      void value(const double* x, double* out) const override {
        for (int r = 0; r < l; ++r) {
          double acc = b * mean2[r];
          for (int c = 0; c < m + l; ++c) acc += C(r, c) * x[c];
          out[r] = acc;
        }
      }
      void gradient(const double*, double* jac) const override {
        for (int r = 0; r < l; ++r)
          for (int c = 0; c < m + l; ++c) jac[r * (m + l) + c] = C(r, c);
      }
      void lions(const double*, const double*, double* jac) const override {
        for (int r = 0; r < l; ++r)
          for (int c = 0; c < m + l; ++c) jac[r * (m + l) + c] = (c == m + r) ? b : 0.0;
      }
      std::unique_ptr<Pairing> pairing(const double* g) const override {
        struct P : Pairing {
          std::vector<double> v;
          void apply(const double*, double* out) const override { std::copy(v.begin(), v.end(), out); }
        };
        auto p = std::make_unique<P>();
        p->v = law_mean(l, [&](const double*, int j, double* o) {
          std::copy(g + static_cast<std::ptrdiff_t>(j) * (m + l) + m, g + static_cast<std::ptrdiff_t>(j) * (m + l) + m + l, o);
        });
        for (double& x : p->v) x *= b;
        return p;
      }
    };
    return std::make_unique<F>(t, law, m_, l_, C_, b_);
  }

 private:
  int m_, l_;
  Mat C_;
  double b_;
};

// Full drift (A x1 + B x2, b2(x, mu)) of the degenerate system.
class Kinetic : public Drift {
 public:
  Kinetic(Mat A, Mat B, std::shared_ptr<const Drift> b2) : A_(std::move(A)), B_(std::move(B)), b2_(std::move(b2)) {
    const int m = static_cast<int>(A_.rows()), l = static_cast<int>(B_.cols());
    if (A_.cols() != m || B_.rows() != m || b2_->dim() != m + l || b2_->out_dim() != l)
      throw std::invalid_argument("Kinetic: inconsistent block sizes");
  }
  std::string name() const override { return "kinetic(" + b2_->name() + ")"; }
  int dim() const override { return static_cast<int>(A_.rows() + B_.cols()); }
  double lipschitz() const override {
    Mat top(A_.rows(), dim());
    top << A_, B_;
    return top.jacobiSvd().singularValues()(0) + b2_->lipschitz();
  }
  const Mat& A() const { return A_; }
  const Mat& B() const { return B_; }
  const Drift& force() const { return *b2_; }

  std::unique_ptr<FrozenDrift> freeze(double t, LawView law) const override {
    struct F : FrozenDrift {
      const Kinetic* k;
      std::unique_ptr<FrozenDrift> b2;
      int m, l;
      F(double t, LawView lw, const Kinetic* k_)
          : FrozenDrift(t, lw, lw.d), k(k_), b2(k_->b2_->freeze(t, lw)),
            m(static_cast<int>(k_->A_.rows())), l(static_cast<int>(k_->B_.cols())) {}
      void value(const double* x, double* out) const override {
        for (int r = 0; r < m; ++r) {
          double acc = 0.0;
          for (int c = 0; c < m; ++c) acc += k->A_(r, c) * x[c];
          for (int c = 0; c < l; ++c) acc += k->B_(r, c) * x[m + c];
          out[r] = acc;
        }
        b2->value(x, out + m);
      }
      void gradient(const double* x, double* jac) const override {
        const int d = m + l;
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < d; ++c) jac[r * d + c] = c < m ? k->A_(r, c) : k->B_(r, c - m);
        b2->gradient(x, jac + m * d);
      }
      void lions(const double* x, const double* y, double* jac) const override {
        const int d = m + l;
        std::fill(jac, jac + m * d, 0.0);
        b2->lions(x, y, jac + m * d);
      }
      std::unique_ptr<Pairing> pairing(const double* g) const override {
        struct P : Pairing {
          std::unique_ptr<Pairing> inner;
          int m;
          void apply(const double* x, double* out) const override {
            std::fill(out, out + m, 0.0);
            inner->apply(x, out + m);
          }
        };
        auto p = std::make_unique<P>();
        p->inner = b2->pairing(g);
        p->m = m;
        return p;
      }
    };
    return std::make_unique<F>(t, law, this);
  }

 private:
  Mat A_, B_;
  std::shared_ptr<const Drift> b2_;
};

}  // namespace drifts

// sigma(t) is dim x noise_dim.  Only the rows from noisy_offset on are driven;
// sigma_inverse(t) inverts that square block.
struct DiffusionSpec {
  std::string name;
  int dim = 1;
  int noise_dim = 1;
  int noisy_offset = 0;
  std::function<Mat(double)> sigma;
  std::function<Mat(double)> sigma_inverse;
  double hoelder_constant = 0.0;
  double hoelder_order = 1.0;
  // Law-dependent diffusion; accepted by the solvers, refused by the sensitivity code.
  std::function<Mat(double, LawView)> sigma_law;

  bool has_inverse() const { return static_cast<bool>(sigma_inverse); }

  static DiffusionSpec constant(const Mat& s, std::string label = "constant") {
    if (s.rows() != s.cols()) throw std::invalid_argument("DiffusionSpec::constant: sigma must be square");
    DiffusionSpec out;
    out.name = std::move(label);
    out.dim = out.noise_dim = static_cast<int>(s.rows());
    out.sigma = [s](double) { return s; };
    const Eigen::FullPivLU<Mat> lu(s);
    if (lu.isInvertible()) {
      const Mat inv = lu.inverse();
      out.sigma_inverse = [inv](double) { return inv; };
    }
    return out;
  }
  static DiffusionSpec identity(int d) { return constant(Mat::Identity(d, d), "identity"); }

  // sigma(t) = s0 (1 + amp sin(2 pi t / period)) I, with amp < 1.
  static DiffusionSpec oscillating(int d, double s0, double amp, double period) {
    if (!(std::abs(amp) < 1.0) || s0 == 0.0) throw std::invalid_argument("DiffusionSpec::oscillating: need |amp| < 1, s0 != 0");
    DiffusionSpec out;
    out.name = "oscillating";
    out.dim = out.noise_dim = d;
    const double w = 2.0 * M_PI / period;
    out.sigma = [=](double t) { return Mat(s0 * (1 + amp * std::sin(w * t)) * Mat::Identity(d, d)); };
    out.sigma_inverse = [=](double t) { return Mat(Mat::Identity(d, d) / (s0 * (1 + amp * std::sin(w * t)))); };
    out.hoelder_constant = std::abs(amp * w) / (std::abs(s0) * (1 - std::abs(amp)) * (1 - std::abs(amp)));
    return out;
  }

  // Noise acting on the last l of m + l coordinates through the l x l block s2(t).
  static DiffusionSpec degenerate(int m, const DiffusionSpec& block) {
    DiffusionSpec out = block;
    out.name = "degenerate(" + block.name + ")";
    out.dim = m + block.dim;
    out.noisy_offset = m;
    const auto s2 = block.sigma;
    out.sigma = [m, s2](double t) {
      const Mat b = s2(t);
      Mat full = Mat::Zero(m + b.rows(), b.cols());
      full.bottomRows(b.rows()) = b;
      return full;
    };
    return out;
  }

  // sigma * sigma^{-1} = I on the driven block at the sample times.
  void check_inverse(double T, int samples = 16) const {
    if (!sigma_inverse) throw std::invalid_argument("diffusion " + name + ": sigma_inverse missing");
    for (int s = 0; s <= samples; ++s) {
      const double t = T * s / samples;
      const Mat blk = sigma(t).bottomRows(noise_dim);
      const double err = (blk * sigma_inverse(t) - Mat::Identity(noise_dim, noise_dim)).cwiseAbs().maxCoeff();
      if (err > 1e-10) throw std::invalid_argument("diffusion " + name + ": sigma * sigma_inverse != I at t = " + std::to_string(t));
    }
  }
};

}  // namespace mvfbm
