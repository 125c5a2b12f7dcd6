#pragma once

// Concrete study models:
//
//   single-parameter:  y_i ~ N(f(theta), s^2),         theta ~ N(m_theta, s_theta^2)
//   linear:            y_i ~ N(a theta, exp(lambda)),  theta ~ N(m_theta, s_theta^2),
//                                                      lambda ~ N(m_lambda, s_lambda^2)
//   exp:               y ~ N(exp(theta), 1) with one observation
//
// Variances (s2, s2_theta, sigma_theta, ...) are used throughout; config files
// carry standard deviations and convert on load.

#include "varlap/data_sample.hpp"
#include "varlap/numkit.hpp"
#include "varlap/vl_core.hpp"

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace varlap::models {

using ScalarFn = std::function<double(double)>;

struct Transform {
  std::string name;
  ScalarFn f;
  ScalarFn f_prime;
  ScalarFn f_second;
};

/// identity, exp, cube, exp2_cube (exp(2 theta) + theta^3).
Transform transform_by_name(const std::string& name);
std::vector<std::string> transform_names();

struct SingleParamModel {
  ScalarFn f;
  ScalarFn f_prime;
  ScalarFn f_second;  // optional
  double s2 = 1.0;
  double m_theta = 0.0;
  double s2_theta = 1.0;
  std::string name;

  static SingleParamModel from_transform(const Transform& t, double s2, double m_theta,
                                         double s2_theta);
  void validate() const;
};

struct LinearLambdaModel {
  double a = 1.0;
  double m_theta = 0.0;
  double s2_theta = 1.0;
  double m_lambda = 0.0;
  double s2_lambda = 1.0;

  void validate() const;
};

struct GroundTruth {
  double theta0 = 0.0;
  std::optional<double> lambda0;
};

struct LinearState {
  double mu_theta = 0.0;
  double sigma_theta = 1.0;
  double mu_lambda = 0.0;
  double sigma_lambda = 1.0;

  /// Prior means and variances.
  static LinearState from_prior(const LinearLambdaModel& model);
};

// ---------------------------------------------------------------------------
// Single-parameter model

double single_param_log_joint(const SingleParamModel& model, const DataSample& data, double theta);
double single_param_gradient(const SingleParamModel& model, const DataSample& data, double theta);

struct NewtonStepResult {
  double mu_star;
  double sigma_star;
};

/// One Gauss-Newton step of the MAP iteration and the matching variance.
NewtonStepResult single_param_newton_step(const SingleParamModel& model, const DataSample& data,
                                          double mu);

struct SingleParamFit {
  double map = 0.0;
  double laplace_sd2 = 0.0;  // Gauss-Newton posterior variance at map
  int iterations = 0;
  bool used_fallback = false;  // golden-section search replaced Newton
  double gradient = 0.0;
};

/// Throws NotConvergedError if no finite stationary point is found.
SingleParamFit single_param_map(const SingleParamModel& model, const DataSample& data, double init,
                                int max_iter = 200);

vl::TransformModel to_transform_model(const SingleParamModel& model);

// ---------------------------------------------------------------------------
// Linear model with log-variance noise parameter

/// The four updates of one sweep in order (mu_theta, sigma_theta, mu_lambda,
/// sigma_lambda). sigma_lambda uses residuals at the new mu_theta.
LinearState linear_closed_form_step(const LinearLambdaModel& model, const DataSample& data,
                                    const LinearState& state);

/// |exp(mu_l)(2 mu_l / s_l^2 - 2 m_l / s_l^2 + n) - SS(mu_t) - a^2 n sigma_t|
/// divided by max(1, right-hand side).
double linear_stationarity_residual(const LinearLambdaModel& model, const DataSample& data,
                                    const LinearState& state);

struct LinearFit {
  LinearState state;
  int sweeps = 0;
  bool converged = false;
};

LinearFit linear_fixed_point(const LinearLambdaModel& model, const DataSample& data,
                             const LinearState& init, double tol = 1e-10, int max_sweeps = 500);

struct LinearMle {
  double theta_hat;
  double lambda_hat;
};

/// Throws DegenerateDataError when every residual is zero.
LinearMle linear_mle(const LinearLambdaModel& model, const DataSample& data);

/// Log-likelihood gradient (d/dtheta, d/dlambda).
std::array<double, 2> linear_loglik_gradient(const LinearLambdaModel& model,
                                             const DataSample& data, double theta, double lambda);

struct FisherInfo {
  Matrix info;
  Matrix inverse;
};

FisherInfo linear_fisher(const LinearLambdaModel& model, const GroundTruth& truth);

/// Remainder components at a state, in closed form.
std::array<double, 2> linear_remainder(const LinearLambdaModel& model, const DataSample& data,
                                       const LinearState& state);

vl::TransformModel to_transform_model(const LinearLambdaModel& model);
vl::VariationalState to_variational_state(const LinearState& s);
LinearState to_linear_state(const vl::VariationalState& s);

// ---------------------------------------------------------------------------
// Exp model, single observation, unit noise variance

/// ELBO without its additive constant (see exp_model_elbo_constant).
double exp_model_elbo(double y, double m, double s2, double mu, double sigma2);

/// Constant that turns exp_model_elbo into E_q[ln p(y, theta)] + H[q].
double exp_model_elbo_constant(double y, double s2);

/// (dE/dmu, dE/dsigma2).
std::array<double, 2> exp_model_elbo_gradient(double y, double m, double s2, double mu,
                                              double sigma2);

double exp_model_log_joint_gradient(double y, double m, double s2, double mu);

SingleParamModel exp_model(double m, double s2);

// ---------------------------------------------------------------------------
// Linearized-transform variant

/// q(theta) from the first-order Taylor expansion of f at the current mean with
/// E[P(lambda)] taken from model.expected_precision, followed by the usual
/// variational Laplace update of q(lambda).
vl::VariationalState linearized_vb_step(const vl::TransformModel& model, const DataSample& data,
                                        const vl::VariationalState& state);

}  // namespace varlap::models
