#include "varlap/numkit.hpp"

#include "varlap/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace varlap {

namespace {

constexpr double kLn2Pi = 1.8378770664093454836;  // ln(2 pi)
constexpr int kLambertMaxIter = 50;

void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) {
    throw DomainError(std::string(what) + ": non-finite argument");
  }
}

double halley_lambert(double x, double w) {
  for (int i = 0; i < kLambertMaxIter; ++i) {
    const double ew = std::exp(w);
    const double f = w * ew - x;
    const double wp1 = w + 1.0;
    const double denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
    const double step = f / denom;
    w -= step;
    if (std::abs(step) <= 1e-15 * (1.0 + std::abs(w))) break;
  }
  return w;
}

// Halley on g(w) = w + ln w - L, which stays well scaled for any L >= 1.
double halley_log_lambert(double log_x, double w) {
  for (int i = 0; i < kLambertMaxIter; ++i) {
    const double g = w + std::log(w) - log_x;
    const double g1 = 1.0 + 1.0 / w;
    const double g2 = -1.0 / (w * w);
    const double step = g / (g1 - 0.5 * g * g2 / g1);
    w -= step;
    if (std::abs(step) <= 1e-16 * (1.0 + std::abs(w))) break;
  }
  return w;
}

struct Cholesky {
  Eigen::LLT<Matrix> llt;
  explicit Cholesky(const Matrix& m) : llt(symmetrized(m)) {}
  bool ok() const { return llt.info() == Eigen::Success; }
  double log_det() const {
    const Matrix& l = llt.matrixLLT();
    double s = 0.0;
    for (Eigen::Index i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
    return 2.0 * s;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// GaussianParams

GaussianParams GaussianParams::scalar(double mean, double var) {
  return GaussianParams(Vector::Constant(1, mean), Matrix::Constant(1, 1, var));
}

GaussianParams GaussianParams::diagonal(const Vector& mean, const Vector& var) {
  return GaussianParams(mean, var.asDiagonal().toDenseMatrix());
}

void GaussianParams::validate() const {
  if (mean.size() < 1) throw InvariantError("GaussianParams: dimension must be >= 1");
  if (cov.rows() != mean.size() || cov.cols() != mean.size()) {
    throw InvariantError("GaussianParams: covariance shape does not match mean");
  }
  if (!mean.allFinite() || !cov.allFinite()) {
    throw InvariantError("GaussianParams: non-finite entries");
  }
  const double scale = std::max(1e-300, cov.cwiseAbs().maxCoeff());
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw InvariantError("GaussianParams: covariance is not symmetric");
  }
  require_spd(cov, "GaussianParams covariance");
}

double GaussianParams::log_pdf(const Vector& x) const {
  Cholesky c(cov);
  if (!c.ok()) throw InvariantError("GaussianParams: covariance is not SPD");
  const Vector z = c.llt.matrixL().solve(x - mean);
  return -0.5 * (z.squaredNorm() + c.log_det() + dim() * kLn2Pi);
}

// ---------------------------------------------------------------------------
// Lambert W

double lambert_w(double x) {
  require_finite(x, "lambert_w");
  if (x < 0.0) throw DomainError("lambert_w: argument must be >= 0");
  if (x == 0.0) return 0.0;
  double w0;
  if (x > std::numbers::e) {
    const double l1 = std::log(x);
    const double l2 = std::log(l1);
    w0 = l1 - l2 + l2 / l1;
  } else {
    // Winitzki's approximation, accurate to a few percent on [0, e].
    const double l = std::log1p(x);
    w0 = l * (1.0 - std::log1p(l) / (2.0 + l));
  }
  return halley_lambert(x, w0);
}

double lambert_w_log(double log_x) {
  require_finite(log_x, "lambert_w_log");
  if (log_x < 1.0) return lambert_w(std::exp(log_x));
  const double seed = log_x - std::log(log_x) + std::log(log_x) / log_x;
  return halley_log_lambert(log_x, std::max(seed, 1.0));
}

double solve_exp_linear(double a, double c, double b) {
  require_finite(a, "solve_exp_linear");
  require_finite(c, "solve_exp_linear");
  require_finite(b, "solve_exp_linear");
  if (a <= 0.0) throw DomainError("solve_exp_linear: a must be > 0");
  if (b < 0.0) throw DomainError("solve_exp_linear: b must be >= 0");
  const double shift = c / a;
  if (b == 0.0) return -shift;
  const double u = lambert_w_log(std::log(b / a) + shift);
  double x = u - shift;
  // u - c/a cancels badly when c/a is large; polish on x + ln(a x + c) = ln b,
  // which has the same root and no cancellation.
  const double log_b = std::log(b);
  for (int i = 0; i < 3; ++i) {
    const double lin = a * x + c;
    if (!(lin > 0.0)) break;
    const double h = x + std::log(lin) - log_b;
    const double next = x - h / (1.0 + a / lin);
    if (!std::isfinite(next) || next == x) break;
    x = next;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Gaussian measures

double gaussian_entropy(const GaussianParams& g) {
  g.validate();
  const double d = g.dim();
  return 0.5 * log_det_spd(g.cov) + 0.5 * d * (1.0 + kLn2Pi);
}

double kl_gaussians(const GaussianParams& p, const GaussianParams& q) {
  if (p.dim() != q.dim()) throw ShapeError("kl_gaussians: dimension mismatch");
  p.validate();
  q.validate();
  Cholesky cq(q.cov);
  Cholesky cp(p.cov);
  const Matrix lq_inv_lp =
      cq.llt.matrixL().solve(Matrix(cp.llt.matrixL()));  // L_q^-1 L_p
  const double trace = lq_inv_lp.squaredNorm();         // tr(Sq^-1 Sp)
  const Vector z = cq.llt.matrixL().solve(q.mean - p.mean);
  const double kl =
      0.5 * (trace - p.dim() + z.squaredNorm() + cq.log_det() - cp.log_det());
  return std::max(0.0, kl);
}

double tv_gaussians(const GaussianParams& p, const GaussianParams& q,
                    const QuadratureRule& rule) {
  if (p.dim() != q.dim()) throw ShapeError("tv_gaussians: dimension mismatch");
  const int d = p.dim();
  if (d > 2) throw UnsupportedDimensionError("tv_gaussians: only d <= 2 is supported");
  if (rule.kind != QuadratureKind::UniformGrid) {
    throw std::invalid_argument("tv_gaussians: requires a uniform-grid rule");
  }
  p.validate();
  q.validate();

  std::vector<Vector> axis_nodes(d);
  std::vector<Vector> axis_weights(d);
  for (int k = 0; k < d; ++k) {
    const double s = std::sqrt(std::max(p.cov(k, k), q.cov(k, k)));
    const double lo = std::min(p.mean(k), q.mean(k)) - 8.0 * s;
    const double hi = std::max(p.mean(k), q.mean(k)) + 8.0 * s;
    const double mid = 0.5 * (lo + hi);
    const double half = 0.5 * (hi - lo);
    axis_nodes[k] = (mid + half * rule.nodes.array()).matrix();
    axis_weights[k] = half * rule.weights;
  }

  // Precompute whitening so each density evaluation is a triangular solve.
  Cholesky cp(p.cov);
  Cholesky cq(q.cov);
  const double norm_p = -0.5 * (cp.log_det() + d * kLn2Pi);
  const double norm_q = -0.5 * (cq.log_det() + d * kLn2Pi);
  auto density = [](const Cholesky& c, double norm, const Vector& mean, const Vector& x) {
    const Vector z = c.llt.matrixL().solve(x - mean);
    return std::exp(norm - 0.5 * z.squaredNorm());
  };

  double acc = 0.0;
  const Eigen::Index m = rule.nodes.size();
  Vector x(d);
  if (d == 1) {
    for (Eigen::Index i = 0; i < m; ++i) {
      x(0) = axis_nodes[0](i);
      acc += axis_weights[0](i) *
             std::abs(density(cp, norm_p, p.mean, x) - density(cq, norm_q, q.mean, x));
    }
  } else {
    for (Eigen::Index i = 0; i < m; ++i) {
      x(0) = axis_nodes[0](i);
      for (Eigen::Index j = 0; j < m; ++j) {
        x(1) = axis_nodes[1](j);
        acc += axis_weights[0](i) * axis_weights[1](j) *
               std::abs(density(cp, norm_p, p.mean, x) - density(cq, norm_q, q.mean, x));
      }
    }
  }
  return std::clamp(0.5 * acc, 0.0, 1.0);
}

double tv_gaussians(const GaussianParams& p, const GaussianParams& q) {
  static const QuadratureRule rule = uniform_grid(kDefaultTvGridPoints);
  return tv_gaussians(p, q, rule);
}

GaussianParams best_diagonal_approx(const GaussianParams& target) {
  target.validate();
  const Matrix precision = spd_inverse(target.cov);
  const Vector var = precision.diagonal().cwiseInverse();
  return GaussianParams::diagonal(target.mean, var);
}

// ---------------------------------------------------------------------------
// Quadrature

QuadratureRule gauss_hermite(int order) {
  if (order < 1 || order > 128) {
    throw DomainError("gauss_hermite: order must be in [1, 128]");
  }
  const int n = order;
  // Golub-Welsch eigenvalues give the starting nodes; Newton on the
  // orthonormal Hermite recurrence then refines nodes and yields weights
  // without the precision loss of squared eigenvector components.
  Matrix jacobi = Matrix::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(0.5 * k);
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(jacobi, Eigen::EigenvaluesOnly);
  Vector nodes = eig.eigenvalues();
  Vector weights(n);

  const double pim4 = std::pow(std::numbers::pi, -0.25);
  for (int i = 0; i < n; ++i) {
    double x = nodes(i);
    double pp = 0.0;
    for (int it = 0; it < 10; ++it) {
      double p1 = pim4;
      double p2 = 0.0;
      for (int j = 1; j <= n; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = x * std::sqrt(2.0 / j) * p2 - std::sqrt((j - 1.0) / j) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      const double dx = p1 / pp;
      x -= dx;
      if (std::abs(dx) <= 1e-15 * (1.0 + std::abs(x))) break;
    }
    nodes(i) = x;
    weights(i) = 2.0 / (pp * pp);
  }
  // Exact symmetry about zero.
  for (int i = 0; i < n / 2; ++i) {
    const double xs = 0.5 * (nodes(n - 1 - i) - nodes(i));
    const double ws = 0.5 * (weights(i) + weights(n - 1 - i));
    nodes(i) = -xs;
    nodes(n - 1 - i) = xs;
    weights(i) = weights(n - 1 - i) = ws;
  }
  if (n % 2 == 1) nodes(n / 2) = 0.0;
  return QuadratureRule{nodes, weights, QuadratureKind::GaussHermite, order};
}

QuadratureRule uniform_grid(int points) {
  if (points < 2) throw DomainError("uniform_grid: need at least 2 points");
  QuadratureRule rule;
  rule.kind = QuadratureKind::UniformGrid;
  rule.order = points;
  rule.nodes = Vector::LinSpaced(points, -1.0, 1.0);
  const double h = 2.0 / (points - 1);
  rule.weights = Vector::Constant(points, h);
  rule.weights(0) = rule.weights(points - 1) = 0.5 * h;
  return rule;
}

// ---------------------------------------------------------------------------
// SPD helpers

Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

bool is_spd(const Matrix& m) {
  if (m.rows() != m.cols() || m.rows() == 0 || !m.allFinite()) return false;
  return Cholesky(m).ok();
}

void require_spd(const Matrix& m, const std::string& what) {
  if (!is_spd(m)) throw InvariantError(what + " is not symmetric positive definite");
}

double log_det_spd(const Matrix& m) {
  Cholesky c(m);
  if (!c.ok()) throw InvariantError("log_det_spd: matrix is not SPD");
  return c.log_det();
}

Matrix spd_inverse(const Matrix& m) {
  Cholesky c(m);
  if (!c.ok()) throw InvariantError("spd_inverse: matrix is not SPD");
  return symmetrized(c.llt.solve(Matrix::Identity(m.rows(), m.cols())));
}

}  // namespace varlap
