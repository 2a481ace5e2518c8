#pragma once

// Feature smoothing with a band-pass kernel on the random-walk Laplacian
// L = I - D^-1 A of an ego network:
//
//   X0 = D^-1 A (I - g(L)) X,      g(lambda) = exp(-0.5 [(lambda - mu)^2 - 1] theta)
//
// g(L) is evaluated either exactly through the eigenpairs of the
// symmetrized Laplacian, or by a truncated Chebyshev series in (L - I).

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "diffuse/ego_sampler.hpp"
#include "diffuse/error.hpp"

namespace diffuse {

enum class SmoothingMode { exact, chebyshev };

inline const char* to_string(SmoothingMode m) { return m == SmoothingMode::exact ? "exact" : "chebyshev"; }
inline SmoothingMode smoothing_mode_from_string(const std::string& s) {
  if (s == "exact") return SmoothingMode::exact;
  if (s == "chebyshev") return SmoothingMode::chebyshev;
  throw Error("unknown smoothing mode '" + s + "'");
}

struct FilterParams {
  double mu = 0.4;     // pass-band center, trainable
  double theta = 7.0;  // sharpness, fixed per run
  int cheb_order = 10;
  SmoothingMode mode = SmoothingMode::chebyshev;
  bool force_zero_kernel = false;  // test hook: g == 0

  void validate() const {
    if (!(theta >= 0.0)) throw Error("filter: theta must be >= 0");
    if (cheb_order < 1) throw Error("filter: cheb_order must be >= 1");
  }
};

inline constexpr int kQuadraturePoints = 64;

struct KernelValue {
  double g = 0.0;
  double dg_dmu = 0.0;
};

inline KernelValue kernel_eval(const FilterParams& fp, double lambda) {
  if (fp.force_zero_kernel) return {};
  const double d = lambda - fp.mu;
  const double g = std::exp(-0.5 * (d * d - 1.0) * fp.theta);
  return {g, g * fp.theta * d};
}

/// Laplacian data for one ego network. Rows without any edge (padding or
/// isolated nodes) receive a unit self-loop so that D is invertible.
struct LaplacianBundle {
  Eigen::VectorXd degree;
  Eigen::MatrixXd propagation;  // P = D^-1 A
  Eigen::MatrixXd laplacian;    // L = I - P

  // Filled by compute_eigenpairs: L = right * diag(eigenvalues) * left.
  Eigen::VectorXd eigenvalues;
  Eigen::MatrixXd right;  // D^-1/2 V
  Eigen::MatrixXd left;   // V^T D^1/2
  bool has_eigenpairs() const { return eigenvalues.size() > 0; }

  int size() const { return static_cast<int>(degree.size()); }
};

inline LaplacianBundle build_laplacian(const Eigen::MatrixXd& adjacency) {
  const auto m = adjacency.rows();
  if (adjacency.cols() != m) throw Error("build_laplacian: adjacency must be square");
  Eigen::MatrixXd a = adjacency;
  LaplacianBundle lb;
  lb.degree = a.rowwise().sum();
  for (Eigen::Index i = 0; i < m; ++i)
    if (lb.degree(i) <= 0.0) {
      a(i, i) = 1.0;
      lb.degree(i) = 1.0;
    }
  lb.propagation = lb.degree.cwiseInverse().asDiagonal() * a;
  lb.laplacian = Eigen::MatrixXd::Identity(m, m) - lb.propagation;
  return lb;
}

inline LaplacianBundle build_laplacian(const EgoInstance& instance) {
  return build_laplacian(Eigen::MatrixXd(instance.adjacency.cast<double>()));
}

/// Eigendecomposition via the similarity transform with D^1/2, which turns
/// the random-walk Laplacian into the symmetric normalized one.
inline void compute_eigenpairs(LaplacianBundle& lb) {
  const Eigen::VectorXd sq = lb.degree.cwiseSqrt();
  const Eigen::VectorXd isq = sq.cwiseInverse();
  const Eigen::MatrixXd adj = lb.degree.asDiagonal() * lb.propagation;
  Eigen::MatrixXd sym = -(isq.asDiagonal() * adj * isq.asDiagonal());
  sym.diagonal().array() += 1.0;
  sym = 0.5 * (sym + sym.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw Error("eigendecomposition failed");
  lb.eigenvalues = es.eigenvalues();
  lb.right = isq.asDiagonal() * es.eigenvectors();
  lb.left = es.eigenvectors().transpose() * sq.asDiagonal();
}

/// g(L) as a dense matrix from the eigenpairs, plus d g(L) / d mu.
inline Eigen::MatrixXd kernel_matrix(const LaplacianBundle& lb, const FilterParams& fp,
                                     Eigen::MatrixXd* d_mu = nullptr) {
  if (!lb.has_eigenpairs()) throw Error("kernel_matrix: eigenpairs not computed");
  const auto m = lb.eigenvalues.size();
  Eigen::VectorXd g(m), dg(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    auto kv = kernel_eval(fp, lb.eigenvalues(k));
    g(k) = kv.g;
    dg(k) = kv.dg_dmu;
  }
  if (d_mu) *d_mu = lb.right * dg.asDiagonal() * lb.left;
  return lb.right * g.asDiagonal() * lb.left;
}

inline Eigen::MatrixXd smooth_exact(const LaplacianBundle& lb, const FilterParams& fp, const Eigen::MatrixXd& x) {
  if (x.rows() != lb.size()) throw Error("smooth_exact: feature rows differ from graph size");
  const Eigen::MatrixXd gx = kernel_matrix(lb, fp) * x;
  return lb.propagation * (x - gx);
}

/// Chebyshev coefficients of g over lambda in [0, 2], expanded in the shifted
/// variable (lambda - 1), computed by Chebyshev-Gauss quadrature.
struct ChebyshevCoefficients {
  Eigen::VectorXd c;     // c_0..c_K
  Eigen::VectorXd dc;    // d c_j / d mu
};

inline ChebyshevCoefficients chebyshev_coefficients(const FilterParams& fp, int quad_points = kQuadraturePoints) {
  fp.validate();
  const int k_max = fp.cheb_order;
  ChebyshevCoefficients out;
  out.c = Eigen::VectorXd::Zero(k_max + 1);
  out.dc = Eigen::VectorXd::Zero(k_max + 1);
  const double n = quad_points;
  for (int q = 0; q < quad_points; ++q) {
    const double phi = std::numbers::pi * (q + 0.5) / n;
    const auto kv = kernel_eval(fp, 1.0 + std::cos(phi));
    for (int j = 0; j <= k_max; ++j) {
      const double t = std::cos(j * phi);
      out.c(j) += kv.g * t;
      out.dc(j) += kv.dg_dmu * t;
    }
  }
  out.c *= 2.0 / n;
  out.dc *= 2.0 / n;
  out.c(0) *= 0.5;
  out.dc(0) *= 0.5;
  return out;
}

/// T_j(L - I) X for j = 0..order, with L - I = -P.
inline std::vector<Eigen::MatrixXd> chebyshev_basis(const Eigen::MatrixXd& p, const Eigen::MatrixXd& x, int order) {
  std::vector<Eigen::MatrixXd> t;
  t.reserve(order + 1);
  t.push_back(x);
  if (order >= 1) t.push_back(-(p * x));
  for (int j = 2; j <= order; ++j) t.push_back(-2.0 * (p * t[j - 1]) - t[j - 2]);
  return t;
}

/// sum_j c_j T_j(-p) X by the three-term recurrence.
inline Eigen::MatrixXd chebyshev_apply(const Eigen::MatrixXd& p, const Eigen::VectorXd& c, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd prev = x;
  Eigen::MatrixXd acc = c(0) * x;
  if (c.size() == 1) return acc;
  Eigen::MatrixXd cur = -(p * x);
  acc += c(1) * cur;
  for (Eigen::Index j = 2; j < c.size(); ++j) {
    Eigen::MatrixXd next = -2.0 * (p * cur) - prev;
    acc += c(j) * next;
    prev.swap(cur);
    cur.swap(next);
  }
  return acc;
}

inline Eigen::MatrixXd smooth_chebyshev(const LaplacianBundle& lb, const FilterParams& fp, const Eigen::MatrixXd& x) {
  if (x.rows() != lb.size()) throw Error("smooth_chebyshev: feature rows differ from graph size");
  const auto coeffs = chebyshev_coefficients(fp);
  return lb.propagation * (x - chebyshev_apply(lb.propagation, coeffs.c, x));
}

/// Dispatches on fp.mode; computes eigenpairs on demand for the exact path.
inline Eigen::MatrixXd smooth(LaplacianBundle& lb, const FilterParams& fp, const Eigen::MatrixXd& x) {
  if (fp.mode == SmoothingMode::exact) {
    if (!lb.has_eigenpairs()) compute_eigenpairs(lb);
    return smooth_exact(lb, fp, x);
  }
  return smooth_chebyshev(lb, fp, x);
}

}  // namespace diffuse
