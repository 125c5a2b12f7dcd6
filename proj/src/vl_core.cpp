#include "varlap/vl_core.hpp"

#include "varlap/errors.hpp"

#include <cmath>
#include <limits>

namespace varlap::vl {

namespace {

constexpr double kLn2Pi = 1.8378770664093454836;

double precision_at(const TransformModel& model, const Vector& lambda) {
  const double p = model.noise_precision.value(lambda);
  if (!(p > 0.0) || !std::isfinite(p)) {
    throw InvariantError("noise precision is not positive definite at lambda");
  }
  return p;
}

void check_theta(const TransformModel& model, const Vector& theta) {
  if (theta.size() != model.dim_theta) throw ShapeError("theta has wrong dimension");
}

void check_lambda(const TransformModel& model, const Vector& lambda) {
  if (lambda.size() != model.dim_lambda) throw ShapeError("lambda has wrong dimension");
}

const Vector& lambda_mean(const GaussianParams& q) {
  static const Vector empty;
  return q.empty() ? empty : q.mean;
}

// -(1/2) S(theta) P'' + (n/2) (P''/P - P' P'^T / P^2); the theta-independent
// prior part is added by the callers that need it.
Matrix lambda_likelihood_hessian(const TransformModel& model, double n, double rss,
                                 const Vector& lambda) {
  const double p = precision_at(model, lambda);
  const Vector g = model.noise_precision.gradient(lambda);
  const Matrix h = model.noise_precision.hessian(lambda);
  return -0.5 * rss * h + 0.5 * n * (h / p - g * g.transpose() / (p * p));
}

double trace_product(const Matrix& a, const Matrix& b) { return (a.cwiseProduct(b.transpose())).sum(); }

Vector central_difference(const std::function<double(const Vector&)>& fn, const Vector& at) {
  Vector grad(at.size());
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    const double h = 1e-5 * std::max(1.0, std::abs(at(i)));
    Vector up = at;
    Vector down = at;
    up(i) += h;
    down(i) -= h;
    grad(i) = (fn(up) - fn(down)) / (2.0 * h);
  }
  return grad;
}

bool state_finite(const VariationalState& s) {
  auto ok = [](const GaussianParams& g) { return g.mean.allFinite() && g.cov.allFinite(); };
  return ok(s.q_theta) && ok(s.q_lambda);
}

}  // namespace

void TransformModel::validate() const {
  if (dim_theta < 1) throw InvariantError("TransformModel: dim_theta must be >= 1");
  if (dim_lambda < 0) throw InvariantError("TransformModel: dim_lambda must be >= 0");
  if (!f || !jacobian_f) throw InvariantError("TransformModel: f and its Jacobian are required");
  if (!noise_precision.value || !noise_precision.gradient || !noise_precision.hessian) {
    throw InvariantError("TransformModel: noise precision callbacks are required");
  }
  prior_theta.validate();
  if (prior_theta.dim() != dim_theta) throw ShapeError("TransformModel: theta prior dimension");
  if (dim_lambda > 0) {
    prior_lambda.validate();
    if (prior_lambda.dim() != dim_lambda) throw ShapeError("TransformModel: lambda prior dimension");
  }
}

VariationalState default_state(const TransformModel& model) {
  VariationalState s;
  s.q_theta = model.prior_theta;
  if (model.dim_lambda > 0) s.q_lambda = model.prior_lambda;
  return s;
}

// ---------------------------------------------------------------------------

double log_joint(const TransformModel& model, const DataSample& data, const Vector& theta,
                 const Vector& lambda) {
  check_theta(model, theta);
  check_lambda(model, lambda);
  const double n = data.n();
  const double p = precision_at(model, lambda);
  const double rss = data.residual_ss(model.f(theta));
  double value = -0.5 * p * rss + 0.5 * n * std::log(p) - 0.5 * n * kLn2Pi;
  value += model.prior_theta.log_pdf(theta);
  if (model.dim_lambda > 0) value += model.prior_lambda.log_pdf(lambda);
  return value;
}

Matrix theta_hessian(const TransformModel& model, const DataSample& data, const Vector& theta,
                     const Vector& lambda) {
  check_theta(model, theta);
  const double p = precision_at(model, lambda);
  const Vector j = model.jacobian_f(theta);
  return -(data.n() * p * j * j.transpose() + spd_inverse(model.prior_theta.cov));
}

Matrix lambda_hessian(const TransformModel& model, const DataSample& data, const Vector& theta,
                      const Vector& lambda) {
  check_theta(model, theta);
  check_lambda(model, lambda);
  const double rss = data.residual_ss(model.f(theta));
  return lambda_likelihood_hessian(model, data.n(), rss, lambda) -
         spd_inverse(model.prior_lambda.cov);
}

// ---------------------------------------------------------------------------
// theta energy

double variational_energy_theta(const TransformModel& model, const DataSample& data,
                                const Vector& mu_theta, const GaussianParams& q_lambda) {
  const Vector& mu_lambda = lambda_mean(q_lambda);
  double value = log_joint(model, data, mu_theta, mu_lambda);
  if (model.dim_lambda > 0) {
    value += 0.5 * trace_product(q_lambda.cov, lambda_hessian(model, data, mu_theta, mu_lambda));
  }
  return value;
}

namespace {

// P(mu_lambda) + 1/2 tr(Sigma_lambda P''(mu_lambda)): the precision that
// multiplies the residual sum of squares inside I_theta.
double effective_precision(const TransformModel& model, const GaussianParams& q_lambda) {
  const Vector& mu_lambda = lambda_mean(q_lambda);
  double p = precision_at(model, mu_lambda);
  if (model.dim_lambda > 0) {
    p += 0.5 * trace_product(q_lambda.cov, model.noise_precision.hessian(mu_lambda));
  }
  return p;
}

}  // namespace

Vector energy_theta_gradient(const TransformModel& model, const DataSample& data,
                             const Vector& mu_theta, const GaussianParams& q_lambda) {
  check_theta(model, mu_theta);
  const double p_eff = effective_precision(model, q_lambda);
  const Vector j = model.jacobian_f(mu_theta);
  const double gap = data.mean_y() - model.f(mu_theta);
  const Matrix prior_prec = spd_inverse(model.prior_theta.cov);
  return p_eff * data.n() * gap * j - prior_prec * (mu_theta - model.prior_theta.mean);
}

Matrix energy_theta_hessian(const TransformModel& model, const DataSample& data,
                            const Vector& mu_theta, const GaussianParams& q_lambda) {
  check_theta(model, mu_theta);
  const double p_eff = effective_precision(model, q_lambda);
  const Vector j = model.jacobian_f(mu_theta);
  return -(p_eff * data.n() * j * j.transpose() + spd_inverse(model.prior_theta.cov));
}

// ---------------------------------------------------------------------------
// lambda energy

double variational_energy_lambda(const TransformModel& model, const DataSample& data,
                                 const Vector& mu_lambda, const GaussianParams& q_theta) {
  double value = log_joint(model, data, q_theta.mean, mu_lambda);
  value += 0.5 * trace_product(q_theta.cov, theta_hessian(model, data, q_theta.mean, mu_lambda));
  return value;
}

namespace {

// Residual sum of squares plus the Gauss-Newton trace contribution
// n J Sigma_theta J^T; I_lambda depends on the data only through this.
double expected_rss(const TransformModel& model, const DataSample& data,
                    const GaussianParams& q_theta) {
  const Vector j = model.jacobian_f(q_theta.mean);
  return data.residual_ss(model.f(q_theta.mean)) + data.n() * j.dot(q_theta.cov * j);
}

}  // namespace

Vector energy_lambda_gradient(const TransformModel& model, const DataSample& data,
                              const Vector& mu_lambda, const GaussianParams& q_theta) {
  check_lambda(model, mu_lambda);
  const double b = expected_rss(model, data, q_theta);
  const double p = precision_at(model, mu_lambda);
  const Vector g = model.noise_precision.gradient(mu_lambda);
  const Matrix prior_prec = spd_inverse(model.prior_lambda.cov);
  return -0.5 * b * g + 0.5 * data.n() * g / p -
         prior_prec * (mu_lambda - model.prior_lambda.mean);
}

Matrix energy_lambda_hessian(const TransformModel& model, const DataSample& data,
                             const Vector& mu_lambda, const GaussianParams& q_theta) {
  check_lambda(model, mu_lambda);
  const double b = expected_rss(model, data, q_theta);
  return lambda_likelihood_hessian(model, data.n(), b, mu_lambda) -
         spd_inverse(model.prior_lambda.cov);
}

// ---------------------------------------------------------------------------
// Newton

NewtonResult newton_maximize(const EnergyFn& energy, const GradientFn& grad,
                             const HessianFn& hess, const Vector& x0,
                             const NewtonOptions& options) {
  NewtonResult out{x0, {}};
  double e = energy(out.x);
  if (!std::isfinite(e)) throw NumericError("newton_maximize: energy is not finite at x0");
  out.report.energy = e;

  for (int it = 0; it < options.max_iter; ++it) {
    const Vector g = grad(out.x);
    out.report.gradient_norm = g.norm();
    if (!g.allFinite()) throw NumericError("newton_maximize: non-finite gradient");
    if (out.report.gradient_norm <= options.tol) {
      out.report.converged = true;
      return out;
    }

    Matrix h = symmetrized(hess(out.x));
    Eigen::SelfAdjointEigenSolver<Matrix> eig(h, Eigen::EigenvaluesOnly);
    const double top = eig.eigenvalues().maxCoeff();
    if (top >= -options.shift) {
      h -= (std::abs(top) + options.shift) * Matrix::Identity(h.rows(), h.cols());
      ++out.report.hessian_shifts;
    }
    const Vector step = -h.ldlt().solve(g);
    const double slope = g.dot(step);  // > 0 for negative definite h

    // A full step below floating-point resolution cannot improve anything.
    if (step.norm() <= 1e-14 * (1.0 + out.x.norm())) {
      const Vector trial = out.x + step;
      const double et = energy(trial);
      if (std::isfinite(et) && et >= e) {
        out.x = trial;
        e = et;
      }
      out.report.iterations = it + 1;
      out.report.energy = e;
      out.report.converged = true;
      out.report.step_limited = true;
      out.report.gradient_norm = grad(out.x).norm();
      return out;
    }

    // Near the optimum the energy stops resolving the gain, so a step that
    // stays within rounding of e and shrinks the gradient is also accepted.
    const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::abs(e);
    double t = 1.0;
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      const Vector trial = out.x + t * step;
      const double et = energy(trial);
      const bool armijo = et >= e + options.armijo * t * slope;
      const bool flat = !armijo && et >= e - noise && grad(trial).norm() < out.report.gradient_norm;
      if (std::isfinite(et) && (armijo || flat)) {
        out.x = trial;
        e = et;
        accepted = true;
        break;
      }
      t *= options.backtrack;
    }
    out.report.iterations = it + 1;
    out.report.energy = e;
    if (!accepted) {
      // Ascent direction gives no measurable gain: stationary to rounding.
      out.report.gradient_norm = g.norm();
      out.report.step_limited = true;
      out.report.converged = (t * step.norm() <= 1e-10 * (1.0 + out.x.norm()));
      return out;
    }
  }
  const Vector g = grad(out.x);
  out.report.gradient_norm = g.norm();
  out.report.converged = out.report.gradient_norm <= options.tol;
  return out;
}

// ---------------------------------------------------------------------------
// Covariance updates

Matrix update_covariance_theta(const TransformModel& model, const DataSample& data,
                               const Vector& mu_theta, const GaussianParams& q_lambda) {
  const Matrix neg_h = -theta_hessian(model, data, mu_theta, lambda_mean(q_lambda));
  if (!is_spd(neg_h)) throw DegenerateCurvatureError("theta block curvature is not negative definite");
  return spd_inverse(neg_h);
}

Matrix update_covariance_lambda(const TransformModel& model, const DataSample& data,
                                const Vector& mu_theta, const Vector& mu_lambda) {
  const Matrix neg_h = -lambda_hessian(model, data, mu_theta, mu_lambda);
  if (!is_spd(neg_h)) {
    throw DegenerateCurvatureError("lambda block Hessian is not negative definite");
  }
  return spd_inverse(neg_h);
}

// ---------------------------------------------------------------------------
// Sweeps

VariationalState vl_step(const TransformModel& model, const DataSample& data,
                         const VariationalState& state, const SweepOptions& options) {
  VariationalState next = state;

  const GaussianParams& q_lambda = state.q_lambda;
  const auto theta_fit = newton_maximize(
      [&](const Vector& v) { return variational_energy_theta(model, data, v, q_lambda); },
      [&](const Vector& v) { return energy_theta_gradient(model, data, v, q_lambda); },
      [&](const Vector& v) { return energy_theta_hessian(model, data, v, q_lambda); },
      state.q_theta.mean, options.newton);
  next.q_theta.mean = theta_fit.x;
  next.q_theta.cov = update_covariance_theta(model, data, theta_fit.x, q_lambda);
  next.energy_theta = theta_fit.report.energy;

  if (model.dim_lambda > 0) {
    const GaussianParams& q_theta = next.q_theta;
    const auto lambda_fit = newton_maximize(
        [&](const Vector& v) { return variational_energy_lambda(model, data, v, q_theta); },
        [&](const Vector& v) { return energy_lambda_gradient(model, data, v, q_theta); },
        [&](const Vector& v) { return energy_lambda_hessian(model, data, v, q_theta); },
        state.q_lambda.mean, options.newton);
    next.q_lambda.mean = lambda_fit.x;
    next.q_lambda.cov = update_covariance_lambda(model, data, q_theta.mean, lambda_fit.x);
    next.energy_lambda = lambda_fit.report.energy;
  }
  next.iteration = state.iteration + 1;
  next.converged = false;
  return next;
}

double max_parameter_change(const VariationalState& a, const VariationalState& b) {
  double change = 0.0;
  auto cmp = [&change](const GaussianParams& x, const GaussianParams& y) {
    if (x.empty() && y.empty()) return;
    change = std::max(change, (x.mean - y.mean).cwiseAbs().maxCoeff());
    change = std::max(change, (x.cov - y.cov).cwiseAbs().maxCoeff());
  };
  cmp(a.q_theta, b.q_theta);
  cmp(a.q_lambda, b.q_lambda);
  return change;
}

FixedPointReport run_to_fixed_point(const TransformModel& model, const DataSample& data,
                                    const VariationalState& init,
                                    const FixedPointOptions& options) {
  model.validate();
  init.q_theta.validate();
  if (model.dim_lambda > 0) init.q_lambda.validate();

  FixedPointReport report;
  report.n = data.n();
  VariationalState current = init;
  for (int sweep = 1; sweep <= options.max_sweeps; ++sweep) {
    VariationalState next;
    try {
      next = vl_step(model, data, current, options.sweep);
    } catch (const NumericError& e) {
      throw DivergedError(std::string("variational Laplace diverged: ") + e.what(), current);
    }
    if (!state_finite(next)) throw DivergedError("variational Laplace produced non-finite state", current);
    const double change = max_parameter_change(current, next);
    current = std::move(next);
    report.sweeps = sweep;
    if (change < options.tol) {
      report.converged = true;
      break;
    }
  }
  current.converged = report.converged;
  report.state = current;
  report.residual_theta =
      energy_theta_gradient(model, data, current.q_theta.mean, current.q_lambda).norm();
  if (model.dim_lambda > 0) {
    report.residual_lambda =
        energy_lambda_gradient(model, data, current.q_lambda.mean, current.q_theta).norm();
  }
  const Remainder rem = remainder_diagnostic(model, data, current);
  report.remainder = rem.r;
  report.remainder_scaled = rem.r_scaled;
  return report;
}

// ---------------------------------------------------------------------------
// Remainder

Remainder remainder_diagnostic(const TransformModel& model, const DataSample& data,
                               const VariationalState& state) {
  const double n = data.n();
  const int p = model.dim_theta;
  const int q = model.dim_lambda;
  Vector r(p + q);

  const Vector& mu_theta = state.q_theta.mean;
  const Vector prior_grad_theta =
      -spd_inverse(model.prior_theta.cov) * (mu_theta - model.prior_theta.mean);
  Vector trace_grad_theta = Vector::Zero(p);
  if (q > 0) {
    const Vector& mu_lambda = state.q_lambda.mean;
    trace_grad_theta = central_difference(
        [&](const Vector& t) {
          return 0.5 * trace_product(state.q_lambda.cov, lambda_hessian(model, data, t, mu_lambda));
        },
        mu_theta);
  }
  r.head(p) = (-prior_grad_theta - trace_grad_theta) / n;

  if (q > 0) {
    const Vector& mu_lambda = state.q_lambda.mean;
    const Vector prior_grad_lambda =
        -spd_inverse(model.prior_lambda.cov) * (mu_lambda - model.prior_lambda.mean);
    const Vector trace_grad_lambda = central_difference(
        [&](const Vector& l) {
          return 0.5 * trace_product(state.q_theta.cov, theta_hessian(model, data, mu_theta, l));
        },
        mu_lambda);
    r.tail(q) = (-prior_grad_lambda - trace_grad_lambda) / n;
  }
  return {r, std::sqrt(n) * r};
}

}  // namespace varlap::vl
