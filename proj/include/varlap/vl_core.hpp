#pragma once

// Generic variational Laplace engine for Gaussian-noise transform models
//
//   y_i | theta, lambda  ~  N(f(theta), 1 / P(lambda))   i.i.d., i = 1..n
//   theta ~ N(m_theta, S_theta),  lambda ~ N(m_lambda, S_lambda)
//
// with Gaussian mean-field factors q(theta) q(lambda). Each sweep maximizes
// the variational energy of one block by a safeguarded Newton loop and then
// sets that block's covariance to the negative inverse block Hessian (the
// theta block uses the Gauss-Newton form, the lambda block is exact).
//
// Everything is evaluated through the sufficient statistics of DataSample, so
// a sweep costs O(1) in n.

#include "varlap/data_sample.hpp"
#include "varlap/numkit.hpp"

#include <functional>
#include <optional>
#include <string>

namespace varlap::vl {

/// Noise precision P(lambda) = Q(lambda)^-1 of one observation, with its
/// first and second lambda derivatives.
struct NoisePrecision {
  std::function<double(const Vector&)> value;
  std::function<Vector(const Vector&)> gradient;
  std::function<Matrix(const Vector&)> hessian;
};

struct TransformModel {
  int dim_theta = 1;
  int dim_lambda = 0;  // 0: known noise precision, single-block scheme
  std::function<double(const Vector&)> f;
  std::function<Vector(const Vector&)> jacobian_f;  // df/dtheta, length dim_theta
  NoisePrecision noise_precision;
  GaussianParams prior_theta;
  GaussianParams prior_lambda;  // empty when dim_lambda == 0
  /// E_q[P(lambda)]; only needed by the linearized variant.
  std::function<double(const GaussianParams&)> expected_precision;

  void validate() const;
};

struct VariationalState {
  GaussianParams q_theta;
  GaussianParams q_lambda;  // empty when dim_lambda == 0
  int iteration = 0;
  double energy_theta = 0.0;
  double energy_lambda = 0.0;
  bool converged = false;
};

/// Priors as initial factors.
VariationalState default_state(const TransformModel& model);

struct FixedPointReport {
  VariationalState state;
  double residual_theta = 0.0;
  double residual_lambda = 0.0;
  Vector remainder;         // R^(n), theta components first
  Vector remainder_scaled;  // sqrt(n) R^(n)
  int n = 0;
  int sweeps = 0;
  bool converged = false;
};

class DivergedError : public std::runtime_error {
 public:
  DivergedError(const std::string& what, VariationalState last_finite)
      : std::runtime_error(what), last_finite_(std::move(last_finite)) {}
  const VariationalState& last_finite() const { return last_finite_; }

 private:
  VariationalState last_finite_;
};

// ---------------------------------------------------------------------------
// Log joint and its block curvatures

double log_joint(const TransformModel& model, const DataSample& data,
                 const Vector& theta, const Vector& lambda);

/// Gauss-Newton theta block: -(n P(lambda) J^T J + S_theta^-1).
Matrix theta_hessian(const TransformModel& model, const DataSample& data,
                     const Vector& theta, const Vector& lambda);

/// Exact lambda block of the log joint.
Matrix lambda_hessian(const TransformModel& model, const DataSample& data,
                      const Vector& theta, const Vector& lambda);

// ---------------------------------------------------------------------------
// Variational energies
//
// I_theta(mu) = L(mu, mu_lambda) + 1/2 tr(Sigma_lambda H^lambda(mu, mu_lambda))
// I_lambda(mu) = L(mu_theta, mu) + 1/2 tr(Sigma_theta H^theta(mu_theta, mu))
//
// Both keep every constant of the log joint, so the Sigma -> 0 limit is the
// log joint itself.

double variational_energy_theta(const TransformModel& model, const DataSample& data,
                                const Vector& mu_theta, const GaussianParams& q_lambda);
Vector energy_theta_gradient(const TransformModel& model, const DataSample& data,
                             const Vector& mu_theta, const GaussianParams& q_lambda);
/// Gauss-Newton curvature of I_theta.
Matrix energy_theta_hessian(const TransformModel& model, const DataSample& data,
                            const Vector& mu_theta, const GaussianParams& q_lambda);

double variational_energy_lambda(const TransformModel& model, const DataSample& data,
                                 const Vector& mu_lambda, const GaussianParams& q_theta);
Vector energy_lambda_gradient(const TransformModel& model, const DataSample& data,
                              const Vector& mu_lambda, const GaussianParams& q_theta);
Matrix energy_lambda_hessian(const TransformModel& model, const DataSample& data,
                             const Vector& mu_lambda, const GaussianParams& q_theta);

// ---------------------------------------------------------------------------
// Safeguarded Newton ascent

struct NewtonOptions {
  double tol = 1e-10;  // on the gradient norm
  int max_iter = 100;
  double backtrack = 0.5;
  double armijo = 1e-4;
  double shift = 1e-8;
};

struct NewtonReport {
  int iterations = 0;
  bool converged = false;
  /// True when convergence was declared because the Newton step fell below
  /// floating-point resolution rather than the gradient meeting `tol`.
  bool step_limited = false;
  double gradient_norm = 0.0;
  double energy = 0.0;
  int hessian_shifts = 0;
};

struct NewtonResult {
  Vector x;
  NewtonReport report;
};

using EnergyFn = std::function<double(const Vector&)>;
using GradientFn = std::function<Vector(const Vector&)>;
using HessianFn = std::function<Matrix(const Vector&)>;

/// Maximizes `energy` from x0. Hessians that are not negative definite are
/// shifted by -(|lambda_max| + shift) I; steps are accepted only under the
/// Armijo condition, so the energy never decreases.
NewtonResult newton_maximize(const EnergyFn& energy, const GradientFn& grad,
                             const HessianFn& hess, const Vector& x0,
                             const NewtonOptions& options = {});

// ---------------------------------------------------------------------------
// Block updates and sweeps

Matrix update_covariance_theta(const TransformModel& model, const DataSample& data,
                               const Vector& mu_theta, const GaussianParams& q_lambda);

/// -H^lambda(mu_theta, mu_lambda)^-1; throws DegenerateCurvatureError when the
/// block Hessian is not negative definite.
Matrix update_covariance_lambda(const TransformModel& model, const DataSample& data,
                                const Vector& mu_theta, const Vector& mu_lambda);

struct SweepOptions {
  NewtonOptions newton;
};

VariationalState vl_step(const TransformModel& model, const DataSample& data,
                         const VariationalState& state, const SweepOptions& options = {});

struct FixedPointOptions {
  double tol = 1e-10;  // max absolute parameter change between sweeps
  int max_sweeps = 500;
  SweepOptions sweep;
};

FixedPointReport run_to_fixed_point(const TransformModel& model, const DataSample& data,
                                    const VariationalState& init,
                                    const FixedPointOptions& options = {});

struct Remainder {
  Vector r;         // R^(n)
  Vector r_scaled;  // sqrt(n) R^(n)
};

/// R^(n)_j = (1/n) (-d/dmu_j ln p(mu) - d/dmu_j T_j(mu)), where
/// T_j = 1/2 sum_{k != j} tr(Sigma_k H^k) is the trace term of I_j. At a fixed
/// point this equals (1/n) times the log-likelihood gradient.
Remainder remainder_diagnostic(const TransformModel& model, const DataSample& data,
                               const VariationalState& state);

/// Largest absolute difference over all means and covariance entries.
double max_parameter_change(const VariationalState& a, const VariationalState& b);

}  // namespace varlap::vl
