#include "varlap/models.hpp"

#include "varlap/errors.hpp"

#include <cmath>
#include <limits>

namespace varlap::models {

namespace {

constexpr double kLn2Pi = 1.8378770664093454836;

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite");
}

}  // namespace

// ---------------------------------------------------------------------------
// Transform catalog

Transform transform_by_name(const std::string& name) {
  if (name == "identity") {
    return {name, [](double t) { return t; }, [](double) { return 1.0; },
            [](double) { return 0.0; }};
  }
  if (name == "exp") {
    return {name, [](double t) { return std::exp(t); }, [](double t) { return std::exp(t); },
            [](double t) { return std::exp(t); }};
  }
  if (name == "cube") {
    return {name, [](double t) { return t * t * t; }, [](double t) { return 3.0 * t * t; },
            [](double t) { return 6.0 * t; }};
  }
  if (name == "exp2_cube") {
    return {name, [](double t) { return std::exp(2.0 * t) + t * t * t; },
            [](double t) { return 2.0 * std::exp(2.0 * t) + 3.0 * t * t; },
            [](double t) { return 4.0 * std::exp(2.0 * t) + 6.0 * t; }};
  }
  throw ConfigError("unknown transform '" + name + "'");
}

std::vector<std::string> transform_names() { return {"identity", "exp", "cube", "exp2_cube"}; }

SingleParamModel SingleParamModel::from_transform(const Transform& t, double s2, double m_theta,
                                                  double s2_theta) {
  SingleParamModel m;
  m.f = t.f;
  m.f_prime = t.f_prime;
  m.f_second = t.f_second;
  m.s2 = s2;
  m.m_theta = m_theta;
  m.s2_theta = s2_theta;
  m.name = t.name;
  return m;
}

void SingleParamModel::validate() const {
  if (!f || !f_prime) throw InvariantError("SingleParamModel: f and f_prime are required");
  if (!(s2 > 0.0) || !(s2_theta > 0.0)) throw InvariantError("SingleParamModel: variances must be > 0");
  if (!std::isfinite(m_theta) || !std::isfinite(s2) || !std::isfinite(s2_theta)) {
    throw InvariantError("SingleParamModel: parameters must be finite");
  }
}

void LinearLambdaModel::validate() const {
  if (a == 0.0 || !std::isfinite(a)) throw InvariantError("LinearLambdaModel: a must be finite and nonzero");
  if (!(s2_theta > 0.0) || !(s2_lambda > 0.0) || !std::isfinite(s2_theta) || !std::isfinite(s2_lambda)) {
    throw InvariantError("LinearLambdaModel: prior variances must be > 0");
  }
  if (!std::isfinite(m_theta) || !std::isfinite(m_lambda)) {
    throw InvariantError("LinearLambdaModel: prior means must be finite");
  }
}

LinearState LinearState::from_prior(const LinearLambdaModel& model) {
  return {model.m_theta, model.s2_theta, model.m_lambda, model.s2_lambda};
}

// ---------------------------------------------------------------------------
// Single-parameter model

double single_param_log_joint(const SingleParamModel& model, const DataSample& data, double theta) {
  const double n = data.n();
  const double d = theta - model.m_theta;
  return -0.5 * n * (kLn2Pi + std::log(model.s2)) - 0.5 * data.residual_ss(model.f(theta)) / model.s2 -
         0.5 * (kLn2Pi + std::log(model.s2_theta)) - 0.5 * d * d / model.s2_theta;
}

double single_param_gradient(const SingleParamModel& model, const DataSample& data, double theta) {
  const double n = data.n();
  return n / model.s2 * model.f_prime(theta) * (data.mean_y() - model.f(theta)) -
         (theta - model.m_theta) / model.s2_theta;
}

namespace {

double laplace_variance(const SingleParamModel& model, double n, double mu) {
  const double fp = model.f_prime(mu);
  return model.s2 * model.s2_theta / (n * fp * fp * model.s2_theta + model.s2);
}

}  // namespace

NewtonStepResult single_param_newton_step(const SingleParamModel& model, const DataSample& data,
                                          double mu) {
  const double n = data.n();
  const double fp = model.f_prime(mu);
  const double gain = model.s2 * model.s2_theta / (n * fp * fp * model.s2_theta + model.s2);
  const double direction =
      (model.m_theta - mu) / model.s2_theta - n / model.s2 * fp * (model.f(mu) - data.mean_y());
  const double mu_star = mu + gain * direction;
  require_finite(mu_star, "single_param_newton_step: mu*");
  const double sigma_star = laplace_variance(model, n, mu_star);
  require_finite(sigma_star, "single_param_newton_step: sigma*");
  return {mu_star, sigma_star};
}

namespace {

// Golden-section maximization of the log joint on a bracket where the gradient
// changes sign from + to -, refined by bisection on the gradient sign.
double golden_section_map(const SingleParamModel& model, const DataSample& data, double center) {
  auto grad = [&](double t) { return single_param_gradient(model, data, t); };
  auto obj = [&](double t) { return single_param_log_joint(model, data, t); };

  double width = std::sqrt(model.s2_theta);
  double lo = center - width;
  double hi = center + width;
  for (int k = 0; k < 200 && !(grad(lo) > 0.0 && grad(hi) < 0.0); ++k) {
    if (!(grad(lo) > 0.0)) lo -= width;
    if (!(grad(hi) < 0.0)) hi += width;
    width *= 2.0;
  }
  if (!(grad(lo) > 0.0 && grad(hi) < 0.0)) {
    throw NotConvergedError("single_param_map: no bracket for the log-joint maximum");
  }

  const double r = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = hi - r * (hi - lo);
  double x2 = lo + r * (hi - lo);
  double f1 = obj(x1);
  double f2 = obj(x2);
  for (int k = 0; k < 400 && hi - lo > 1e-6 * (1.0 + std::abs(lo)); ++k) {
    if (f1 < f2) {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + r * (hi - lo);
      f2 = obj(x2);
    } else {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - r * (hi - lo);
      f1 = obj(x1);
    }
  }

  // Finish on the sign of the gradient, which stays accurate where the log
  // joint no longer resolves differences.
  const double mid = 0.5 * (lo + hi);
  double step = hi - lo;
  double a = mid - step;
  double b = mid + step;
  for (int k = 0; k < 60 && !(grad(a) > 0.0 && grad(b) < 0.0); ++k) {
    if (!(grad(a) > 0.0)) a -= step;
    if (!(grad(b) < 0.0)) b += step;
    step *= 2.0;
  }
  if (!(grad(a) > 0.0 && grad(b) < 0.0)) return mid;
  for (int k = 0; k < 200; ++k) {
    const double c = 0.5 * (a + b);
    if (c <= a || c >= b) break;
    const double g = grad(c);
    if (g == 0.0) return c;
    (g > 0.0 ? a : b) = c;
  }
  return std::abs(grad(a)) < std::abs(grad(b)) ? a : b;
}

}  // namespace

SingleParamFit single_param_map(const SingleParamModel& model, const DataSample& data, double init,
                                int max_iter) {
  model.validate();
  if (!std::isfinite(init)) throw DomainError("single_param_map: init must be finite");

  SingleParamFit fit;
  double mu = init;

  // Safeguarded Gauss-Newton from `mu`; returns whether a stationary point was reached.
  auto iterate = [&](int budget) {
    double value = single_param_log_joint(model, data, mu);
    for (int it = 0; it < budget && std::isfinite(value); ++it) {
      ++fit.iterations;
      double step;
      try {
        step = single_param_newton_step(model, data, mu).mu_star - mu;
      } catch (const NumericError&) {
        return false;
      }
      if (std::abs(step) <= 1e-12 * (1.0 + std::abs(mu))) {
        const double trial = single_param_log_joint(model, data, mu + step);
        if (std::isfinite(trial) && trial >= value) mu += step;
        return true;
      }
      const double g0 = std::abs(single_param_gradient(model, data, mu));
      const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::abs(value);
      double t = 1.0;
      bool accepted = false;
      for (int k = 0; k < 60; ++k) {
        const double trial = single_param_log_joint(model, data, mu + t * step);
        const bool flat = trial >= value - noise &&
                          std::abs(single_param_gradient(model, data, mu + t * step)) < g0;
        if (std::isfinite(trial) && (trial >= value || flat)) {
          mu += t * step;
          value = trial;
          accepted = true;
          break;
        }
        t *= 0.5;
      }
      if (!accepted) return std::abs(step) <= 1e-11 * (1.0 + std::abs(mu));
      if (std::abs(t * step) <= 1e-14 * (1.0 + std::abs(mu))) return true;
    }
    return false;
  };

  if (!iterate(max_iter)) {
    mu = golden_section_map(model, data, std::isfinite(mu) ? mu : init);
    fit.used_fallback = true;
  }
  if (!std::isfinite(mu)) throw NotConvergedError("single_param_map: no finite stationary point");
  fit.map = mu;
  fit.laplace_sd2 = laplace_variance(model, data.n(), mu);
  fit.gradient = single_param_gradient(model, data, mu);
  return fit;
}

vl::TransformModel to_transform_model(const SingleParamModel& model) {
  model.validate();
  vl::TransformModel tm;
  tm.dim_theta = 1;
  tm.dim_lambda = 0;
  auto f = model.f;
  auto fp = model.f_prime;
  tm.f = [f](const Vector& t) { return f(t(0)); };
  tm.jacobian_f = [fp](const Vector& t) { return Vector::Constant(1, fp(t(0))); };
  const double p = 1.0 / model.s2;
  tm.noise_precision.value = [p](const Vector&) { return p; };
  tm.noise_precision.gradient = [](const Vector&) { return Vector(0); };
  tm.noise_precision.hessian = [](const Vector&) { return Matrix(0, 0); };
  tm.expected_precision = [p](const GaussianParams&) { return p; };
  tm.prior_theta = GaussianParams::scalar(model.m_theta, model.s2_theta);
  return tm;
}

// ---------------------------------------------------------------------------
// Linear model

LinearState linear_closed_form_step(const LinearLambdaModel& model, const DataSample& data,
                                    const LinearState& state) {
  if (!(state.sigma_theta > 0.0) || !(state.sigma_lambda > 0.0)) {
    throw DomainError("linear_closed_form_step: variances must be > 0");
  }
  const double n = data.n();
  const double a = model.a;
  const double e = std::exp(state.mu_lambda);
  const double infl = 1.0 + 0.5 * state.sigma_lambda;
  const double prior_w = e / (n * model.s2_theta);

  LinearState next;
  next.mu_theta = (a * infl * data.mean_y() + prior_w * model.m_theta) / (a * a * infl + prior_w);
  next.sigma_theta = e * model.s2_theta / (a * a * n * model.s2_theta + e);

  const double ss = data.residual_ss(a * next.mu_theta);
  const double b = ss + a * a * n * next.sigma_theta;
  next.mu_lambda = solve_exp_linear(2.0 / model.s2_lambda, n - 2.0 * model.m_lambda / model.s2_lambda, b);
  const double e_new = std::exp(next.mu_lambda);
  next.sigma_lambda = 2.0 * e_new * model.s2_lambda / (ss * model.s2_lambda + 2.0 * e_new);
  return next;
}

double linear_stationarity_residual(const LinearLambdaModel& model, const DataSample& data,
                                    const LinearState& state) {
  const double n = data.n();
  const double lhs = std::exp(state.mu_lambda) *
                     (2.0 * (state.mu_lambda - model.m_lambda) / model.s2_lambda + n);
  const double rhs = data.residual_ss(model.a * state.mu_theta) + model.a * model.a * n * state.sigma_theta;
  return std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs));
}

LinearFit linear_fixed_point(const LinearLambdaModel& model, const DataSample& data,
                             const LinearState& init, double tol, int max_sweeps) {
  model.validate();
  LinearFit fit;
  fit.state = init;
  for (int s = 1; s <= max_sweeps; ++s) {
    const LinearState next = linear_closed_form_step(model, data, fit.state);
    if (!std::isfinite(next.mu_theta) || !std::isfinite(next.sigma_theta) ||
        !std::isfinite(next.mu_lambda) || !std::isfinite(next.sigma_lambda)) {
      throw NumericError("linear_fixed_point: non-finite state");
    }
    const double change = std::max({std::abs(next.mu_theta - fit.state.mu_theta),
                                    std::abs(next.sigma_theta - fit.state.sigma_theta),
                                    std::abs(next.mu_lambda - fit.state.mu_lambda),
                                    std::abs(next.sigma_lambda - fit.state.sigma_lambda)});
    fit.state = next;
    fit.sweeps = s;
    if (change < tol) {
      fit.converged = true;
      break;
    }
  }
  return fit;
}

LinearMle linear_mle(const LinearLambdaModel& model, const DataSample& data) {
  if (data.n() < 2) throw DomainError("linear_mle: needs n >= 2");
  const double css = data.centered_ss();
  if (!(css > 0.0)) throw DegenerateDataError("linear_mle: zero residual sum of squares");
  return {data.mean_y() / model.a, std::log(css / data.n())};
}

std::array<double, 2> linear_loglik_gradient(const LinearLambdaModel& model,
                                             const DataSample& data, double theta, double lambda) {
  const double n = data.n();
  const double c = model.a * theta;
  const double sum_r = n * (data.mean_y() - c);
  const double ss = data.residual_ss(c);
  const double inv = std::exp(-lambda);
  return {inv * model.a * sum_r, -0.5 * n + 0.5 * ss * inv};
}

FisherInfo linear_fisher(const LinearLambdaModel& model, const GroundTruth& truth) {
  if (!truth.lambda0) throw InvariantError("linear_fisher: lambda0 is required");
  FisherInfo out;
  out.info = Matrix::Zero(2, 2);
  out.inverse = Matrix::Zero(2, 2);
  const double e = std::exp(*truth.lambda0);
  out.info(0, 0) = model.a * model.a / e;
  out.info(1, 1) = 0.5;
  out.inverse(0, 0) = e / (model.a * model.a);
  out.inverse(1, 1) = 2.0;
  return out;
}

std::array<double, 2> linear_remainder(const LinearLambdaModel& model, const DataSample& data,
                                       const LinearState& s) {
  const double n = data.n();
  const double sum_r = n * (data.mean_y() - model.a * s.mu_theta);
  const double inv = std::exp(-s.mu_lambda);
  const double r_theta =
      ((s.mu_theta - model.m_theta) / model.s2_theta - 0.5 * model.a * s.sigma_lambda * inv * sum_r) / n;
  const double r_lambda =
      ((s.mu_lambda - model.m_lambda) / model.s2_lambda - 0.5 * model.a * model.a * n * s.sigma_theta * inv) / n;
  return {r_theta, r_lambda};
}

vl::TransformModel to_transform_model(const LinearLambdaModel& model) {
  model.validate();
  vl::TransformModel tm;
  tm.dim_theta = 1;
  tm.dim_lambda = 1;
  const double a = model.a;
  tm.f = [a](const Vector& t) { return a * t(0); };
  tm.jacobian_f = [a](const Vector&) { return Vector::Constant(1, a); };
  tm.noise_precision.value = [](const Vector& l) { return std::exp(-l(0)); };
  tm.noise_precision.gradient = [](const Vector& l) { return Vector::Constant(1, -std::exp(-l(0))); };
  tm.noise_precision.hessian = [](const Vector& l) { return Matrix::Constant(1, 1, std::exp(-l(0))); };
  tm.expected_precision = [](const GaussianParams& q) {
    return std::exp(-q.mean(0) + 0.5 * q.cov(0, 0));
  };
  tm.prior_theta = GaussianParams::scalar(model.m_theta, model.s2_theta);
  tm.prior_lambda = GaussianParams::scalar(model.m_lambda, model.s2_lambda);
  return tm;
}

vl::VariationalState to_variational_state(const LinearState& s) {
  vl::VariationalState v;
  v.q_theta = GaussianParams::scalar(s.mu_theta, s.sigma_theta);
  v.q_lambda = GaussianParams::scalar(s.mu_lambda, s.sigma_lambda);
  return v;
}

LinearState to_linear_state(const vl::VariationalState& s) {
  return {s.q_theta.mean(0), s.q_theta.cov(0, 0), s.q_lambda.mean(0), s.q_lambda.cov(0, 0)};
}

// ---------------------------------------------------------------------------
// Exp model

double exp_model_elbo(double y, double m, double s2, double mu, double sigma2) {
  if (!(sigma2 > 0.0)) throw DomainError("exp_model_elbo: sigma2 must be > 0");
  const double d = mu - m;
  return y * std::exp(mu + 0.5 * sigma2) - 0.5 * std::exp(2.0 * mu + 2.0 * sigma2) -
         0.5 * d * d / s2 - 0.5 * sigma2 / s2 + 0.5 * std::log(sigma2);
}

double exp_model_elbo_constant(double y, double s2) {
  return -0.5 * kLn2Pi - 0.5 * y * y - 0.5 * std::log(s2) + 0.5;
}

std::array<double, 2> exp_model_elbo_gradient(double y, double m, double s2, double mu,
                                              double sigma2) {
  if (!(sigma2 > 0.0)) throw DomainError("exp_model_elbo_gradient: sigma2 must be > 0");
  const double e1 = std::exp(mu + 0.5 * sigma2);
  const double e2 = std::exp(2.0 * mu + 2.0 * sigma2);
  return {y * e1 - e2 - (mu - m) / s2, 0.5 * y * e1 - e2 - 0.5 / s2 + 0.5 / sigma2};
}

double exp_model_log_joint_gradient(double y, double m, double s2, double mu) {
  const double e = std::exp(mu);
  return y * e - e * e - (mu - m) / s2;
}

SingleParamModel exp_model(double m, double s2) {
  return SingleParamModel::from_transform(transform_by_name("exp"), 1.0, m, s2);
}

// ---------------------------------------------------------------------------
// Linearized variant

vl::VariationalState linearized_vb_step(const vl::TransformModel& model, const DataSample& data,
                                        const vl::VariationalState& state) {
  model.validate();
  const double n = data.n();
  const Vector& mu = state.q_theta.mean;
  const Vector j = model.jacobian_f(mu);
  double expected_p;
  if (model.expected_precision) {
    expected_p = model.expected_precision(state.q_lambda);
  } else {
    expected_p = model.noise_precision.value(state.q_lambda.empty() ? Vector() : state.q_lambda.mean);
  }
  require_finite(expected_p, "linearized_vb_step: E[P]");

  const Matrix prior_prec = spd_inverse(model.prior_theta.cov);
  const Matrix prec = n * expected_p * j * j.transpose() + prior_prec;
  const Matrix cov = spd_inverse(prec);
  const double pseudo_y = data.mean_y() - model.f(mu) + j.dot(mu);
  const Vector mean = cov * (n * expected_p * pseudo_y * j + prior_prec * model.prior_theta.mean);

  vl::VariationalState next = state;
  next.q_theta = GaussianParams(mean, cov);
  if (model.dim_lambda > 0) {
    const GaussianParams& q_theta = next.q_theta;
    const auto fit = vl::newton_maximize(
        [&](const Vector& v) { return vl::variational_energy_lambda(model, data, v, q_theta); },
        [&](const Vector& v) { return vl::energy_lambda_gradient(model, data, v, q_theta); },
        [&](const Vector& v) { return vl::energy_lambda_hessian(model, data, v, q_theta); },
        state.q_lambda.mean);
    next.q_lambda.mean = fit.x;
    next.q_lambda.cov = vl::update_covariance_lambda(model, data, q_theta.mean, fit.x);
    next.energy_lambda = fit.report.energy;
  }
  next.iteration = state.iteration + 1;
  next.converged = false;
  return next;
}

}  // namespace varlap::models
