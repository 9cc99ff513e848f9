#pragma once

#include "core.hpp"
#include "frac_calc.hpp"
#include "parallel.hpp"
#include "rng.hpp"

#include <Eigen/Cholesky>

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>

namespace mvfbm {

// Volterra weights on a grid.  Besides the Wiener increment every cell carries
// independent sub-cell coordinates (projections of the Brownian bridge inside
// the cell), which the cell average alone would discard:
//   B^H(t_i) = sum_{k<i} [ A0(i,k) dW_k + A1(i,k) Z1_k + A2(i,k) Z2_k ] + A3(i) Z3_0.
class VolterraWeights {
 public:
  VolterraWeights(const TimeGrid& grid, const HurstParam& H) : grid_(grid), H_(H) {
    const int n = grid.n_steps();
    const double b = H.beta(), dt = grid.dt();
    const auto tab = kernel_moments(H.value(), n);
    // Gram matrix of {1, u, (1-u)^b, u^{-b}} on [0,1].
    Eigen::Matrix4d G;
    const double bt = boost::math::beta(1.0 - b, 1.0 + b);
    G << 1.0, 0.5, 1.0 / (1.0 + b), 1.0 / (1.0 - b),
         0.5, 1.0 / 3.0, 1.0 / ((1.0 + b) * (2.0 + b)), 1.0 / (2.0 - b),
         1.0 / (1.0 + b), 1.0 / ((1.0 + b) * (2.0 + b)), 1.0 / (1.0 + 2.0 * b), bt,
         1.0 / (1.0 - b), 1.0 / (2.0 - b), bt, 1.0 / (1.0 - 2.0 * b);
    const Eigen::Matrix3d L3inv = G.topLeftCorner<3, 3>().llt().matrixL().toDenseMatrix().inverse();
    const Eigen::Matrix4d L4inv = G.llt().matrixL().toDenseMatrix().inverse();
    const double sH = std::pow(dt, H.value());
    const double sW = std::pow(dt, b);  // multiplies dW = sqrt(dt) Z0
    for (auto& a : A_) a = Mat::Zero(n, n);
    A3_ = Vec::Zero(n);
    for (int i = 1; i <= n; ++i) {
      for (int k = 0; k < i; ++k) {
        using KM = KernelCellMoments;
        Eigen::Vector4d raw(tab->get(i, k, KM::kOne), tab->get(i, k, KM::kU), tab->get(i, k, KM::kTail),
                            k == 0 ? tab->get(i, 0, KM::kHead) : 0.0);
        Eigen::Vector4d proj = Eigen::Vector4d::Zero();
        if (k == 0)
          proj = L4inv * raw;
        else
          proj.head<3>() = L3inv * raw.head<3>();
        A_[0](i - 1, k) = sW * proj(0);
        A_[1](i - 1, k) = sH * proj(1);
        A_[2](i - 1, k) = sH * proj(2);
        if (k == 0) A3_(i - 1) = sH * proj(3);
      }
    }
  }

  const TimeGrid& grid() const { return grid_; }
  const HurstParam& hurst() const { return H_; }

  // out[0..n] from dW[0..n-1], z1, z2 [0..n-1] and the head coordinate z3.
  void transform(const double* dW, const double* z1, const double* z2, double z3, double* out) const {
    const int n = grid_.n_steps();
    out[0] = 0.0;
    for (int i = 1; i <= n; ++i) {
      const double* a0 = &A_[0](i - 1, 0);
      const double* a1 = &A_[1](i - 1, 0);
      const double* a2 = &A_[2](i - 1, 0);
      const std::ptrdiff_t st = A_[0].outerStride();
      double acc = A3_(i - 1) * z3;
      for (int k = 0; k < i; ++k) acc += a0[k * st] * dW[k] + a1[k * st] * z1[k] + a2[k * st] * z2[k];
      out[i] = acc;
    }
  }

  // Variance of B^H(t_i) implied by the weights (dt-scaled); equals t_i^{2H} up to quadrature.
  double implied_variance(int i) const {
    const double dt = grid_.dt();
    double v = A3_(i - 1) * A3_(i - 1);
    for (int k = 0; k < i; ++k)
      v += A_[0](i - 1, k) * A_[0](i - 1, k) * dt + A_[1](i - 1, k) * A_[1](i - 1, k) + A_[2](i - 1, k) * A_[2](i - 1, k);
    return v;
  }

 private:
  TimeGrid grid_;
  HurstParam H_;
  Mat A_[3];  // row i-1, column k; column-major storage, so rows are strided
  Vec A3_;
};

inline std::shared_ptr<const VolterraWeights> volterra_weights(const TimeGrid& grid, const HurstParam& H) {
  static std::mutex mu;
  static std::map<std::tuple<double, int, double>, std::shared_ptr<const VolterraWeights>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{grid.horizon(), grid.n_steps(), H.value()}];
  if (!slot) slot = std::make_shared<const VolterraWeights>(grid, H);
  return slot;
}

struct CoupledPath {
  TimeGrid grid;
  HurstParam H;
  std::uint64_t seed;
  Mat W;   // (n+1) x d
  Mat BH;  // (n+1) x d
  int dim() const { return static_cast<int>(W.cols()); }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

namespace detail {

// Fills one component of one path.  Shared by batch and single-path code so
// re-derivation reproduces the batch bit for bit.
inline void fill_component(const VolterraWeights& vw, std::uint64_t seed, int comp, double* W, double* BH,
                           std::vector<double>& scratch) {
  const int n = vw.grid().n_steps();
  const double sq = std::sqrt(vw.grid().dt());
  scratch.assign(3 * n, 0.0);
  double* dW = scratch.data();
  double* z1 = dW + n;
  double* z2 = z1 + n;
  const NormalStream ns(seed, 0, static_cast<std::uint64_t>(comp));
  double z3 = 0.0;
  W[0] = 0.0;
  for (int k = 0; k < n; ++k) {
    const auto z = ns.block(k);
    W[k + 1] = W[k] + sq * z[0];
    z1[k] = z[1];
    z2[k] = z[2];
    if (k == 0) z3 = z[3];
  }
  for (int k = 0; k < n; ++k) dW[k] = W[k + 1] - W[k];
  vw.transform(dW, z1, z2, z3, BH);
}

}  // namespace detail

inline CoupledPath generate_coupled(const TimeGrid& grid, const HurstParam& H, int d, std::uint64_t seed) {
  if (d < 1) throw std::invalid_argument("generate_coupled: d must be >= 1");
  const auto vw = volterra_weights(grid, H);
  CoupledPath p{grid, H, seed, Mat::Zero(grid.size(), d), Mat::Zero(grid.size(), d)};
  std::vector<double> scratch, w(grid.size()), bh(grid.size());
  for (int c = 0; c < d; ++c) {
    detail::fill_component(*vw, seed, c, w.data(), bh.data(), scratch);
    for (int k = 0; k < grid.size(); ++k) {
      p.W(k, c) = w[k];
      p.BH(k, c) = bh[k];
    }
  }
  return p;
}

// Recomputes BH from the stored W and the path's seed (for the sub-cell coordinates).
inline Mat rederive_bh(const CoupledPath& p) {
  const auto vw = volterra_weights(p.grid, p.H);
  const int n = p.grid.n_steps();
  Mat out = Mat::Zero(p.grid.size(), p.dim());
  std::vector<double> scratch, w(n + 1), bh(n + 1), dW(n), z1(n), z2(n);
  for (int c = 0; c < p.dim(); ++c) {
    const NormalStream ns(p.seed, 0, static_cast<std::uint64_t>(c));
    double z3 = 0.0;
    for (int k = 0; k < n; ++k) {
      const auto z = ns.block(k);
      z1[k] = z[1];
      z2[k] = z[2];
      if (k == 0) z3 = z[3];
      dW[k] = p.W(k + 1, c) - p.W(k, c);
    }
    vw->transform(dW.data(), z1.data(), z2.data(), z3, bh.data());
    for (int k = 0; k <= n; ++k) out(k, c) = bh[k];
  }
  return out;
}

// N coupled paths stored time-major: row k holds all particles' values at t_k,
// column i*d + c is component c of path i.
class PathBatch {
 public:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  PathBatch(const TimeGrid& grid, const HurstParam& H, int n_paths, int d, std::uint64_t seed)
      : grid_(grid), H_(H), n_(n_paths), d_(d), seed_(seed) {
    if (n_paths < 1 || d < 1) throw std::invalid_argument("PathBatch: need n_paths >= 1 and d >= 1");
    const auto vw = volterra_weights(grid, H);
    W_ = RowMat::Zero(grid.size(), static_cast<Eigen::Index>(n_) * d_);
    BH_ = RowMat::Zero(grid.size(), static_cast<Eigen::Index>(n_) * d_);
    parallel_for(static_cast<std::size_t>(n_), [&](std::size_t b, std::size_t e) {
      std::vector<double> scratch, w(grid.size()), bh(grid.size());
      for (std::size_t i = b; i < e; ++i) {
        for (int c = 0; c < d_; ++c) {
          detail::fill_component(*vw, path_seed(i), c, w.data(), bh.data(), scratch);
          const Eigen::Index col = static_cast<Eigen::Index>(i) * d_ + c;
          for (int k = 0; k < grid.size(); ++k) {
            W_(k, col) = w[k];
            BH_(k, col) = bh[k];
          }
        }
      }
    });
  }

  const TimeGrid& grid() const { return grid_; }
  const HurstParam& hurst() const { return H_; }
  int size() const { return n_; }
  int dim() const { return d_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t path_seed(std::size_t i) const { return splitmix64(seed_ ^ splitmix64(i + 1)); }

  double W(int k, int i, int c) const { return W_(k, static_cast<Eigen::Index>(i) * d_ + c); }
  double BH(int k, int i, int c) const { return BH_(k, static_cast<Eigen::Index>(i) * d_ + c); }
  const RowMat& W_all() const { return W_; }
  const RowMat& BH_all() const { return BH_; }

  CoupledPath path(int i) const {
    CoupledPath p{grid_, H_, path_seed(i), Mat(grid_.size(), d_), Mat(grid_.size(), d_)};
    for (int c = 0; c < d_; ++c)
      for (int k = 0; k < grid_.size(); ++k) {
        p.W(k, c) = W(k, i, c);
        p.BH(k, c) = BH(k, i, c);
      }
    return p;
  }

 private:
  TimeGrid grid_;
  HurstParam H_;
  int n_, d_;
  std::uint64_t seed_;
  RowMat W_, BH_;
};

struct FbmPath {
  TimeGrid grid;
  Mat BH;  // (n+1) x d
};

// Reference generator: Cholesky factor of [R_H(t_i, t_j)] over the nodes.
class CholeskyFbm {
 public:
  static constexpr int kMaxSteps = 4096;

  CholeskyFbm(const TimeGrid& grid, const HurstParam& H) : grid_(grid) {
    const int n = grid.n_steps();
    if (n > kMaxSteps) throw std::invalid_argument("generate_exact_cholesky: n_steps exceeds 4096");
    Mat C(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) C(i, j) = covariance_RH(grid.t(i + 1), grid.t(j + 1), H.value());
    Eigen::LLT<Mat> llt(C);
    if (llt.info() != Eigen::Success) {
      const double lmin = Eigen::SelfAdjointEigenSolver<Mat>(C, Eigen::EigenvaluesOnly).eigenvalues()(0);
      throw NumericalError("generate_exact_cholesky: covariance not positive definite, smallest eigenvalue " +
                           std::to_string(lmin));
    }
    L_ = llt.matrixL();
  }

  FbmPath sample(int d, std::uint64_t seed) const {
    const int n = grid_.n_steps();
    FbmPath p{grid_, Mat::Zero(n + 1, d)};
    Vec z(n);
    for (int c = 0; c < d; ++c) {
      const NormalStream ns(seed, 0, static_cast<std::uint64_t>(c), StreamTag::kCholesky);
      for (int k = 0; k < n; ++k) z(k) = ns.normal(k);
      p.BH.col(c).tail(n) = L_.triangularView<Eigen::Lower>() * z;
    }
    return p;
  }

 private:
  TimeGrid grid_;
  Mat L_;
};

inline FbmPath generate_exact_cholesky(const TimeGrid& grid, const HurstParam& H, int d, std::uint64_t seed) {
  return CholeskyFbm(grid, H).sample(d, seed);
}

// Left-point Ito sum sum_k <integrand(t_k), W(t_{k+1}) - W(t_k)>; integrand is (n+1) x d.
inline double wiener_integral(const Mat& integrand, const CoupledPath& path) {
  if (integrand.rows() != path.grid.size() || integrand.cols() != path.dim())
    throw std::invalid_argument("wiener_integral: grid mismatch");
  double acc = 0.0;
  for (int k = 0; k < path.grid.n_steps(); ++k)
    for (int c = 0; c < path.dim(); ++c) acc += integrand(k, c) * (path.W(k + 1, c) - path.W(k, c));
  return acc;
}

inline double wiener_integral(const GridFunction& integrand, const CoupledPath& path) {
  require_same_grid(integrand.grid, path.grid, "wiener_integral");
  if (path.dim() != 1) throw std::invalid_argument("wiener_integral: scalar integrand needs d = 1");
  return wiener_integral(Eigen::Map<const Mat>(integrand.values.data(), integrand.size(), 1), path);
}

inline void write_path_csv(const CoupledPath& p, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file);
  out << "t";
  for (int c = 0; c < p.dim(); ++c) out << ",W_" << c + 1;
  for (int c = 0; c < p.dim(); ++c) out << ",BH_" << c + 1;
  out << "\n";
  out.precision(17);
  for (int k = 0; k < p.grid.size(); ++k) {
    out << p.grid.t(k);
    for (int c = 0; c < p.dim(); ++c) out << "," << p.W(k, c);
    for (int c = 0; c < p.dim(); ++c) out << "," << p.BH(k, c);
    out << "\n";
  }
}

}  // namespace mvfbm
