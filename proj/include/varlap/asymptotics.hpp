#pragma once

// Frequentist diagnostics: rescaled estimates, empirical summaries, exact-ELBO
// oracles by Gauss-Hermite quadrature, limit densities and TV convergence.

#include "varlap/data_sample.hpp"
#include "varlap/models.hpp"
#include "varlap/numkit.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace varlap::asymptotics {

enum class EstimatorTag { Varlap, Mle, Map, ElboOracle };
std::string to_string(EstimatorTag tag);

struct RescaledEstimate {
  Vector h;  // sqrt(n) (estimate - truth)
  int n = 0;
  EstimatorTag tag = EstimatorTag::Varlap;
};

/// Truth vector is (theta0) or (theta0, lambda0), matching estimate's length.
RescaledEstimate rescale(const Vector& estimate, const models::GroundTruth& truth, int n,
                         EstimatorTag tag = EstimatorTag::Varlap);

// ---------------------------------------------------------------------------
// Empirical summaries

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<double> mass;   // sums to 1
};

/// `bins` equal-width bins over [lo, hi]; values outside are clamped into the
/// end bins.
Histogram histogram(const std::vector<double>& values, int bins, double lo, double hi);
/// Range taken from the data.
Histogram histogram(const std::vector<double>& values, int bins);

/// Type-7 (linear interpolation) sample quantile; `values` need not be sorted.
double quantile(std::vector<double> values, double p);
double median(std::vector<double> values);

inline constexpr double kSummaryProbs[5] = {0.025, 0.25, 0.5, 0.75, 0.975};

struct EmpiricalSummary {
  int count = 0;
  Vector mean;
  Matrix cov;        // unbiased (n - 1) sample covariance
  Matrix quantiles;  // row per coordinate, columns kSummaryProbs
  std::vector<Histogram> histograms;
};

EmpiricalSummary summarize(const std::vector<Vector>& samples, int bins = 40);

// ---------------------------------------------------------------------------
// Exact ELBO by quadrature

/// ln p(y, theta) with exact gradient and Hessian, d <= 2.
struct LogJointDensity {
  int dim = 1;
  std::function<double(const Vector&)> value;
  std::function<Vector(const Vector&)> gradient;
  std::function<Matrix(const Vector&)> hessian;
};

LogJointDensity log_joint_density(const models::SingleParamModel& model, const DataSample& data);
/// Joint in (theta, lambda).
LogJointDensity log_joint_density(const models::LinearLambdaModel& model, const DataSample& data);
/// theta only, noise log-variance held at `lambda`.
LogJointDensity log_joint_density(const models::LinearLambdaModel& model, const DataSample& data,
                                  double lambda);
/// Exp model with one observation y and unit noise variance.
LogJointDensity exp_model_density(double y, double m, double s2);

struct ElboValue {
  double value = 0.0;
  double value_next_order = 0.0;
  bool order_flagged = false;  // orders `order` and `order + 1` differ by > 1e-4
};

/// E_q[ln p(y, theta)] + H[q] for diagonal q by tensor Gauss-Hermite rules.
ElboValue elbo_quadrature(const LogJointDensity& density, const GaussianParams& q, int order = 40);

struct OracleBudget {
  int order = 40;
  int max_iter = 200;
  int restarts = 4;
  double tol = 1e-9;  // gradient norm, relative to max(1, |ELBO(init)|)
};

struct OracleFit {
  GaussianParams q;
  double elbo = 0.0;
  double gradient_norm = 0.0;  // in (mean, log-variance) coordinates
  bool converged = false;
  bool budget_exhausted = false;
  /// Spread of optimum values over the converged restarts.
  double restart_spread = 0.0;
};

/// Maximizes the quadrature ELBO over diagonal Gaussians.
OracleFit elbo_oracle_fit(const LogJointDensity& density, const GaussianParams& init,
                          const OracleBudget& budget = {});

// ---------------------------------------------------------------------------
// Limit objects

enum class LimitKind { Rescaled, Unrescaled };

/// Rescaled: N(sqrt(n)(mle - truth), I^-1), or N(0, I^-1) without an MLE.
/// Unrescaled: N(mle, I^-1 / n) (centered at the truth without an MLE).
GaussianParams limit_density(const models::LinearLambdaModel& model,
                             const models::GroundTruth& truth, LimitKind kind, int n = 1,
                             std::optional<models::LinearMle> mle = std::nullopt);

struct Ellipse {
  Vector center;
  double half_width = 0.0;
  double half_height = 0.0;
};

/// Requires d = 2 and a diagonal covariance.
Ellipse ellipse_data(const GaussianParams& g);

struct TvRow {
  int n = 0;
  int rep = 0;
  bool converged = false;
  models::LinearState state;
  double tv = 0.0;
  Ellipse varlap;
  Ellipse limit;
  int sweeps = 0;
  std::string status;
};

struct TvSummaryRow {
  int n = 0;
  int count = 0;
  int excluded = 0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
};

struct TvCurve {
  std::vector<TvRow> rows;  // sorted by (n, rep)
  std::vector<TvSummaryRow> summary;
};

struct TvCurveOptions {
  int workers = 0;
  double tol = 1e-10;
  int max_sweeps = 500;
  std::string stream_tag = "tv-curve";
};

/// For each n and replication: sample, iterate to the fixed point, and compare
/// N(sqrt(n)(mu - truth), n diag(sigma)) with the rescaled MLE-centered limit.
TvCurve tv_convergence_curve(const models::LinearLambdaModel& model,
                             const models::GroundTruth& truth, const std::vector<int>& n_grid,
                             int reps, std::uint64_t seed, const TvCurveOptions& options = {});

}  // namespace varlap::asymptotics
