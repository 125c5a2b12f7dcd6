#include "varlap/asymptotics.hpp"

#include "varlap/errors.hpp"
#include "varlap/parallel.hpp"
#include "varlap/random.hpp"
#include "varlap/vl_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace varlap::asymptotics {

namespace {

constexpr double kLn2Pi = 1.8378770664093454836;

}  // namespace

std::string to_string(EstimatorTag tag) {
  switch (tag) {
    case EstimatorTag::Varlap: return "varlap";
    case EstimatorTag::Mle: return "mle";
    case EstimatorTag::Map: return "map";
    case EstimatorTag::ElboOracle: return "elbo_oracle";
  }
  return "unknown";
}

RescaledEstimate rescale(const Vector& estimate, const models::GroundTruth& truth, int n,
                         EstimatorTag tag) {
  if (n < 1) throw DomainError("rescale: n must be >= 1");
  Vector t(estimate.size());
  if (estimate.size() == 1) {
    t(0) = truth.theta0;
  } else if (estimate.size() == 2 && truth.lambda0) {
    t << truth.theta0, *truth.lambda0;
  } else {
    throw ShapeError("rescale: estimate does not match the truth");
  }
  return {std::sqrt(static_cast<double>(n)) * (estimate - t), n, tag};
}

// ---------------------------------------------------------------------------
// Summaries

Histogram histogram(const std::vector<double>& values, int bins, double lo, double hi) {
  if (bins < 1) throw DomainError("histogram: bins must be >= 1");
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  h.edges.resize(bins + 1);
  const double width = (hi - lo) / bins;
  for (int i = 0; i <= bins; ++i) h.edges[i] = lo + width * i;
  h.edges[bins] = hi;
  h.mass.assign(bins, 0.0);
  if (values.empty()) return h;
  for (double v : values) {
    int k = static_cast<int>(std::floor((v - lo) / width));
    k = std::clamp(k, 0, bins - 1);
    h.mass[k] += 1.0;
  }
  for (double& m : h.mass) m /= static_cast<double>(values.size());
  return h;
}

Histogram histogram(const std::vector<double>& values, int bins) {
  if (values.empty()) return histogram(values, bins, 0.0, 1.0);
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  return histogram(values, bins, *mn, *mx);
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

EmpiricalSummary summarize(const std::vector<Vector>& samples, int bins) {
  EmpiricalSummary s;
  s.count = static_cast<int>(samples.size());
  if (samples.empty()) return s;
  const Eigen::Index d = samples.front().size();
  s.mean = Vector::Zero(d);
  for (const auto& x : samples) {
    if (x.size() != d) throw ShapeError("summarize: samples differ in dimension");
    s.mean += x;
  }
  s.mean /= s.count;
  s.cov = Matrix::Zero(d, d);
  if (s.count > 1) {
    for (const auto& x : samples) s.cov += (x - s.mean) * (x - s.mean).transpose();
    s.cov /= (s.count - 1);
  }
  s.quantiles = Matrix::Zero(d, 5);
  for (Eigen::Index j = 0; j < d; ++j) {
    std::vector<double> col;
    col.reserve(samples.size());
    for (const auto& x : samples) col.push_back(x(j));
    for (int k = 0; k < 5; ++k) s.quantiles(j, k) = quantile(col, kSummaryProbs[k]);
    s.histograms.push_back(histogram(col, bins));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Log joints

LogJointDensity log_joint_density(const models::SingleParamModel& model, const DataSample& data) {
  model.validate();
  LogJointDensity d;
  d.dim = 1;
  d.value = [model, data](const Vector& t) { return models::single_param_log_joint(model, data, t(0)); };
  d.gradient = [model, data](const Vector& t) {
    return Vector::Constant(1, models::single_param_gradient(model, data, t(0)));
  };
  d.hessian = [model, data](const Vector& t) {
    const double th = t(0);
    double h;
    if (model.f_second) {
      const double fp = model.f_prime(th);
      h = data.n() / model.s2 * (model.f_second(th) * (data.mean_y() - model.f(th)) - fp * fp) -
          1.0 / model.s2_theta;
    } else {
      const double step = 1e-5 * std::max(1.0, std::abs(th));
      h = (models::single_param_gradient(model, data, th + step) -
           models::single_param_gradient(model, data, th - step)) /
          (2.0 * step);
    }
    return Matrix::Constant(1, 1, h);
  };
  return d;
}

LogJointDensity log_joint_density(const models::LinearLambdaModel& model, const DataSample& data) {
  model.validate();
  LogJointDensity d;
  d.dim = 2;
  const double n = data.n();
  d.value = [model, data, n](const Vector& x) {
    const double th = x(0);
    const double la = x(1);
    const double dt = th - model.m_theta;
    const double dl = la - model.m_lambda;
    return -0.5 * n * (kLn2Pi + la) - 0.5 * std::exp(-la) * data.residual_ss(model.a * th) -
           0.5 * (kLn2Pi + std::log(model.s2_theta)) - 0.5 * dt * dt / model.s2_theta -
           0.5 * (kLn2Pi + std::log(model.s2_lambda)) - 0.5 * dl * dl / model.s2_lambda;
  };
  d.gradient = [model, data](const Vector& x) {
    const auto g = models::linear_loglik_gradient(model, data, x(0), x(1));
    Vector out(2);
    out << g[0] - (x(0) - model.m_theta) / model.s2_theta,
        g[1] - (x(1) - model.m_lambda) / model.s2_lambda;
    return out;
  };
  d.hessian = [model, data, n](const Vector& x) {
    const double inv = std::exp(-x(1));
    const double c = model.a * x(0);
    const double sum_r = n * (data.mean_y() - c);
    Matrix h(2, 2);
    h(0, 0) = -inv * model.a * model.a * n - 1.0 / model.s2_theta;
    h(0, 1) = h(1, 0) = -inv * model.a * sum_r;
    h(1, 1) = -0.5 * inv * data.residual_ss(c) - 1.0 / model.s2_lambda;
    return h;
  };
  return d;
}

LogJointDensity log_joint_density(const models::LinearLambdaModel& model, const DataSample& data,
                                  double lambda) {
  model.validate();
  LogJointDensity d;
  d.dim = 1;
  const double n = data.n();
  const double inv = std::exp(-lambda);
  d.value = [model, data, n, lambda, inv](const Vector& x) {
    const double dt = x(0) - model.m_theta;
    return -0.5 * n * (kLn2Pi + lambda) - 0.5 * inv * data.residual_ss(model.a * x(0)) -
           0.5 * (kLn2Pi + std::log(model.s2_theta)) - 0.5 * dt * dt / model.s2_theta;
  };
  d.gradient = [model, data, n, inv](const Vector& x) {
    const double sum_r = n * (data.mean_y() - model.a * x(0));
    return Vector::Constant(1, inv * model.a * sum_r - (x(0) - model.m_theta) / model.s2_theta);
  };
  d.hessian = [model, n, inv](const Vector&) {
    return Matrix::Constant(1, 1, -inv * model.a * model.a * n - 1.0 / model.s2_theta);
  };
  return d;
}

LogJointDensity exp_model_density(double y, double m, double s2) {
  return log_joint_density(models::exp_model(m, s2), DataSample({y}));
}

// ---------------------------------------------------------------------------
// Quadrature ELBO

namespace {

struct TensorGrid {
  std::vector<Vector> z;  // standard-normal nodes
  std::vector<double> w;  // probability weights
};

TensorGrid tensor_grid(int dim, int order) {
  if (dim < 1 || dim > 2) throw UnsupportedDimensionError("ELBO quadrature supports d <= 2");
  const QuadratureRule r = gauss_hermite(order);
  const double scale = std::sqrt(2.0);
  const double norm = 1.0 / std::sqrt(std::numbers::pi);
  TensorGrid g;
  if (dim == 1) {
    for (int i = 0; i < order; ++i) {
      g.z.push_back(Vector::Constant(1, scale * r.nodes(i)));
      g.w.push_back(norm * r.weights(i));
    }
  } else {
    for (int i = 0; i < order; ++i) {
      for (int j = 0; j < order; ++j) {
        Vector z(2);
        z << scale * r.nodes(i), scale * r.nodes(j);
        g.z.push_back(z);
        g.w.push_back(norm * norm * r.weights(i) * r.weights(j));
      }
    }
  }
  return g;
}

// Discretized ELBO in u = (mu, v), v = log variance, with exact derivatives of
// the discretized objective.
struct ElboEval {
  double value = 0.0;
  Vector grad;
  Matrix hess;
};

ElboEval evaluate_elbo(const LogJointDensity& density, const TensorGrid& grid, const Vector& u,
                       int level) {
  const int d = density.dim;
  const Vector mu = u.head(d);
  const Vector v = u.tail(d);
  const Vector sigma = (0.5 * v.array()).exp().matrix();

  ElboEval e;
  e.grad = Vector::Zero(2 * d);
  e.hess = Matrix::Zero(2 * d, 2 * d);
  Vector gv_extra = Vector::Zero(d);
  for (std::size_t k = 0; k < grid.z.size(); ++k) {
    const Vector& z = grid.z[k];
    const double w = grid.w[k];
    const Vector theta = mu + sigma.cwiseProduct(z);
    e.value += w * density.value(theta);
    if (level < 1) continue;
    const Vector g = density.gradient(theta);
    const Vector dz = 0.5 * sigma.cwiseProduct(z);  // d theta_j / d v_j
    e.grad.head(d) += w * g;
    e.grad.tail(d) += w * g.cwiseProduct(dz);
    if (level < 2) continue;
    const Matrix h = density.hessian(theta);
    e.hess.topLeftCorner(d, d) += w * h;
    e.hess.topRightCorner(d, d) += w * h * dz.asDiagonal();
    e.hess.bottomRightCorner(d, d) += w * dz.asDiagonal() * h * dz.asDiagonal();
    gv_extra += w * 0.5 * g.cwiseProduct(dz);
  }
  e.value += 0.5 * (d * (1.0 + kLn2Pi) + v.sum());
  if (level >= 1) e.grad.tail(d).array() += 0.5;
  if (level >= 2) {
    e.hess.bottomLeftCorner(d, d) = e.hess.topRightCorner(d, d).transpose();
    e.hess.bottomRightCorner(d, d) += gv_extra.asDiagonal();
  }
  return e;
}

Vector pack(const GaussianParams& q) {
  const int d = q.dim();
  Vector u(2 * d);
  u.head(d) = q.mean;
  u.tail(d) = q.cov.diagonal().array().log().matrix();
  return u;
}

GaussianParams unpack(const Vector& u, int d) {
  return GaussianParams::diagonal(u.head(d), u.tail(d).array().exp().matrix());
}

void require_diagonal(const GaussianParams& q, int dim) {
  q.validate();
  if (q.dim() != dim) throw ShapeError("ELBO quadrature: q does not match the density");
  const Matrix off = q.cov - Matrix(q.cov.diagonal().asDiagonal());
  if (off.cwiseAbs().maxCoeff() > 0.0) throw InvariantError("ELBO quadrature: q must be diagonal");
}

}  // namespace

ElboValue elbo_quadrature(const LogJointDensity& density, const GaussianParams& q, int order) {
  require_diagonal(q, density.dim);
  const Vector u = pack(q);
  ElboValue out;
  out.value = evaluate_elbo(density, tensor_grid(density.dim, order), u, 0).value;
  out.value_next_order = evaluate_elbo(density, tensor_grid(density.dim, order + 1), u, 0).value;
  out.order_flagged = std::abs(out.value - out.value_next_order) > 1e-4;
  return out;
}

OracleFit elbo_oracle_fit(const LogJointDensity& density, const GaussianParams& init,
                          const OracleBudget& budget) {
  require_diagonal(init, density.dim);
  const int d = density.dim;
  const TensorGrid grid = tensor_grid(d, budget.order);

  std::vector<Vector> starts;
  const Vector u0 = pack(init);
  starts.push_back(u0);
  const Vector sd = init.cov.diagonal().cwiseSqrt();
  for (int r = 1; r < budget.restarts; ++r) {
    Vector u = u0;
    switch (r % 3) {
      case 1: u.head(d) += 2.0 * sd; break;
      case 2: u.head(d) -= 2.0 * sd; break;
      default: u.tail(d).array() -= 2.0; break;
    }
    starts.push_back(u);
  }

  vl::NewtonOptions opts;
  opts.tol = budget.tol * std::max(1.0, std::abs(evaluate_elbo(density, grid, u0, 0).value));
  opts.max_iter = budget.max_iter;

  OracleFit best;
  bool have = false;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const Vector& s : starts) {
    vl::NewtonResult res;
    try {
      res = vl::newton_maximize(
          [&](const Vector& u) { return evaluate_elbo(density, grid, u, 0).value; },
          [&](const Vector& u) { return evaluate_elbo(density, grid, u, 1).grad; },
          [&](const Vector& u) { return evaluate_elbo(density, grid, u, 2).hess; }, s, opts);
    } catch (const NumericError&) {
      continue;
    }
    if (res.report.converged) {
      lo = std::min(lo, res.report.energy);
      hi = std::max(hi, res.report.energy);
    }
    if (!have || res.report.energy > best.elbo) {
      have = true;
      best.q = unpack(res.x, d);
      best.elbo = res.report.energy;
      best.converged = res.report.converged;
      best.gradient_norm = evaluate_elbo(density, grid, res.x, 1).grad.norm();
    }
  }
  if (!have) throw NotConvergedError("elbo_oracle_fit: every restart failed");
  best.budget_exhausted = !best.converged;
  best.restart_spread = hi >= lo ? hi - lo : 0.0;
  return best;
}

// ---------------------------------------------------------------------------
// Limits

GaussianParams limit_density(const models::LinearLambdaModel& model,
                             const models::GroundTruth& truth, LimitKind kind, int n,
                             std::optional<models::LinearMle> mle) {
  if (n < 1) throw DomainError("limit_density: n must be >= 1");
  const models::FisherInfo fi = models::linear_fisher(model, truth);
  Vector t(2);
  t << truth.theta0, *truth.lambda0;
  Vector center = t;
  if (mle) center << mle->theta_hat, mle->lambda_hat;
  if (kind == LimitKind::Rescaled) {
    return GaussianParams(std::sqrt(static_cast<double>(n)) * (center - t), fi.inverse);
  }
  return GaussianParams(center, fi.inverse / static_cast<double>(n));
}

Ellipse ellipse_data(const GaussianParams& g) {
  if (g.dim() != 2) throw ShapeError("ellipse_data: needs d = 2");
  if (g.cov(0, 1) != 0.0 || g.cov(1, 0) != 0.0) {
    throw InvariantError("ellipse_data: covariance must be diagonal");
  }
  return {g.mean, std::sqrt(g.cov(0, 0)), std::sqrt(g.cov(1, 1))};
}

TvCurve tv_convergence_curve(const models::LinearLambdaModel& model,
                             const models::GroundTruth& truth, const std::vector<int>& n_grid,
                             int reps, std::uint64_t seed, const TvCurveOptions& options) {
  model.validate();
  if (!truth.lambda0) throw InvariantError("tv_convergence_curve: lambda0 is required");
  for (std::size_t i = 1; i < n_grid.size(); ++i) {
    if (n_grid[i] <= n_grid[i - 1]) throw DomainError("tv_convergence_curve: n_grid must increase");
  }
  const std::size_t tasks = n_grid.size() * static_cast<std::size_t>(reps);
  TvCurve curve;
  curve.rows.resize(tasks);
  const QuadratureRule grid = uniform_grid(kDefaultTvGridPoints);

  parallel_for(tasks, options.workers, [&](std::size_t idx) {
    TvRow& row = curve.rows[idx];
    row.n = n_grid[idx / reps];
    row.rep = static_cast<int>(idx % reps);
    try {
      RngStream rng = make_stream(seed, options.stream_tag, row.n, row.rep);
      const DataSample data = sample_data(model, truth, row.n, rng);
      const models::LinearFit fit = models::linear_fixed_point(
          model, data, models::LinearState::from_prior(model), options.tol, options.max_sweeps);
      row.state = fit.state;
      row.sweeps = fit.sweeps;
      row.converged = fit.converged;
      const double n = row.n;
      Vector est(2);
      est << fit.state.mu_theta, fit.state.mu_lambda;
      Vector var(2);
      var << n * fit.state.sigma_theta, n * fit.state.sigma_lambda;
      const GaussianParams q =
          GaussianParams::diagonal(rescale(est, truth, row.n).h, var);
      const GaussianParams lim =
          limit_density(model, truth, LimitKind::Rescaled, row.n, models::linear_mle(model, data));
      row.tv = tv_gaussians(q, lim, grid);
      row.varlap = ellipse_data(q);
      row.limit = ellipse_data(lim);
      row.status = fit.converged ? "ok" : "not_converged";
    } catch (const std::exception& e) {
      row.converged = false;
      row.tv = std::numeric_limits<double>::quiet_NaN();
      row.status = e.what();
    }
  });

  for (std::size_t i = 0; i < n_grid.size(); ++i) {
    TvSummaryRow s;
    s.n = n_grid[i];
    std::vector<double> tv;
    for (int r = 0; r < reps; ++r) {
      const TvRow& row = curve.rows[i * reps + r];
      if (row.converged) {
        tv.push_back(row.tv);
      } else {
        ++s.excluded;
      }
    }
    s.count = static_cast<int>(tv.size());
    s.q1 = quantile(tv, 0.25);
    s.median = quantile(tv, 0.5);
    s.q3 = quantile(tv, 0.75);
    curve.summary.push_back(s);
  }
  return curve;
}

}  // namespace varlap::asymptotics
