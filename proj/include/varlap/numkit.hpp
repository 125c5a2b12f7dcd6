#pragma once

// Scalar and small-matrix numerical primitives shared by the inference engine
// and the diagnostics: Lambert W on the nonnegative reals, Gaussian information
// measures, quadrature rules and SPD helpers.

#include <Eigen/Dense>

#include <string>

namespace varlap {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Mean and covariance of a multivariate normal density.
struct GaussianParams {
  Vector mean;
  Matrix cov;

  GaussianParams() = default;
  GaussianParams(Vector m, Matrix c) : mean(std::move(m)), cov(std::move(c)) {}

  static GaussianParams scalar(double mean, double var);
  static GaussianParams diagonal(const Vector& mean, const Vector& var);

  int dim() const { return static_cast<int>(mean.size()); }
  bool empty() const { return mean.size() == 0; }

  /// Throws InvariantError unless d >= 1, shapes agree, cov is symmetric
  /// (1e-10 relative) and Cholesky succeeds.
  void validate() const;

  /// Natural-log density at x.
  double log_pdf(const Vector& x) const;
};

enum class QuadratureKind { GaussHermite, UniformGrid };

/// One-dimensional quadrature rule.
///
/// Gauss-Hermite rules integrate against exp(-x^2) on the real line.
/// Uniform-grid rules are trapezoid rules on the reference interval [-1, 1];
/// callers map them affinely onto their integration range.
struct QuadratureRule {
  Vector nodes;
  Vector weights;
  QuadratureKind kind = QuadratureKind::UniformGrid;
  int order = 0;
};

/// Principal branch of Lambert W restricted to x >= 0.
double lambert_w(double x);

/// Solves w + ln w = log_x (i.e. w = W(exp(log_x))) without forming exp(log_x).
double lambert_w_log(double log_x);

/// Unique real solution of exp(x) * (a*x + c) = b for a > 0, b >= 0.
double solve_exp_linear(double a, double c, double b);

double gaussian_entropy(const GaussianParams& g);

/// KL(p || q) in closed form.
double kl_gaussians(const GaussianParams& p, const GaussianParams& q);

/// Total-variation distance by tensor-grid quadrature, d in {1, 2}.
///
/// `rule` must be a uniform grid; each axis is mapped onto
/// [min mean - 8 s, max mean + 8 s] with s the larger of the two marginal
/// standard deviations, so both densities are covered to ~1e-15 mass.
double tv_gaussians(const GaussianParams& p, const GaussianParams& q,
                    const QuadratureRule& rule);
double tv_gaussians(const GaussianParams& p, const GaussianParams& q);

/// Diagonal Gaussian minimizing KL(diag || target): same mean, variances
/// 1 / (Sigma^-1)_jj.
GaussianParams best_diagonal_approx(const GaussianParams& target);

QuadratureRule gauss_hermite(int order);

/// Trapezoid rule with `points` nodes on [-1, 1] (weights sum to 2).
QuadratureRule uniform_grid(int points);

inline constexpr int kDefaultTvGridPoints = 401;

// SPD helpers. All of them symmetrize before factorizing.
Matrix symmetrized(const Matrix& m);
bool is_spd(const Matrix& m);
void require_spd(const Matrix& m, const std::string& what);
double log_det_spd(const Matrix& m);
Matrix spd_inverse(const Matrix& m);

}  // namespace varlap
