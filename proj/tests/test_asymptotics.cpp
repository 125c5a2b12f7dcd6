#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "varlap/asymptotics.hpp"
#include "varlap/errors.hpp"
#include "varlap/random.hpp"

#include <cmath>
#include <numbers>

using namespace varlap;
using namespace varlap::asymptotics;

namespace {

models::LinearLambdaModel reference_linear() { return {3.0, 1.0, 1.0, 1.0, 1.0}; }

// ln N(y; a m 1, e^lambda I + a^2 s2 11^T)
double log_evidence(const models::LinearLambdaModel& m, const DataSample& d, double lambda) {
  const int n = static_cast<int>(d.n());
  Matrix c = std::exp(lambda) * Matrix::Identity(n, n) + m.a * m.a * m.s2_theta * Matrix::Ones(n, n);
  Vector r(n);
  for (int i = 0; i < n; ++i) r(i) = d.y()[i] - m.a * m.m_theta;
  Eigen::LLT<Matrix> llt(c);
  const double logdet = 2 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * n * std::log(2 * std::numbers::pi) - 0.5 * logdet - 0.5 * r.dot(llt.solve(r));
}

}  // namespace

TEST_CASE("rescale") {
  Vector e(2);
  e << 2.1, 1.8;
  const auto r = rescale(e, {2.0, 2.0}, 100);
  CHECK(r.h(0) == doctest::Approx(1.0));
  CHECK(r.h(1) == doctest::Approx(-2.0));
  CHECK(r.n == 100);
  CHECK(rescale(Vector::Constant(1, 1.5), {1.0, std::nullopt}, 4, EstimatorTag::Map).h(0) == doctest::Approx(1.0));
  CHECK_THROWS(rescale(e, {2.0, std::nullopt}, 10));
  CHECK(to_string(EstimatorTag::ElboOracle) != to_string(EstimatorTag::Mle));
}

TEST_CASE("histogram and quantiles") {
  std::vector<double> v;
  RngStream rng = make_stream(1, "hist", 0, 0);
  for (int i = 0; i < 1000; ++i) v.push_back(rng.normal());
  const auto h = histogram(v, 40, -1, 1);
  double total = 0;
  for (double m : h.mass) total += m;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(h.edges.size() == 41);
  CHECK(h.mass.front() > 0.1);  // clamped tail

  CHECK(quantile({1, 2, 3, 4}, 0.5) == doctest::Approx(2.5));
  CHECK(quantile({4, 1, 3, 2}, 0.25) == doctest::Approx(1.75));
  CHECK(quantile({7}, 0.9) == 7);
  CHECK(median({3, 1, 2}) == 2);

  std::vector<Vector> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(Vector::Constant(2, i));
  const auto s = summarize(samples, 4);
  CHECK(s.count == 4);
  CHECK(s.mean(0) == doctest::Approx(1.5));
  CHECK(s.cov(0, 1) == doctest::Approx(5.0 / 3));
  CHECK(s.histograms.size() == 2);
  CHECK(s.quantiles(1, 2) == doctest::Approx(1.5));
}

TEST_CASE("densities agree with their derivatives") {
  const auto lm = reference_linear();
  const DataSample data({5.0, 6.5, 7.0, 4.0});
  const auto d = log_joint_density(lm, data);
  Vector x(2);
  x << 1.9, 1.2;
  const double h = 1e-5;
  for (int k = 0; k < 2; ++k) {
    Vector e = Vector::Zero(2);
    e(k) = h;
    CHECK(d.gradient(x)(k) == doctest::Approx((d.value(x + e) - d.value(x - e)) / (2 * h)).epsilon(1e-6));
    const Vector hk = (d.gradient(x + e) - d.gradient(x - e)) / (2 * h);
    CHECK(d.hessian(x)(0, k) == doctest::Approx(hk(0)).epsilon(1e-6));
    CHECK(d.hessian(x)(1, k) == doctest::Approx(hk(1)).epsilon(1e-6));
  }
  const auto ex = exp_model_density(-1, 0, 1);
  const Vector t = Vector::Constant(1, -0.4);
  CHECK(ex.gradient(t)(0) == doctest::Approx(models::exp_model_log_joint_gradient(-1, 0, 1, -0.4)));
}

TEST_CASE("exp-model quadrature matches the closed-form ELBO") {
  const auto d = exp_model_density(-1, 0, 1);
  for (auto [mu, s2] : {std::pair{-0.5, 0.3}, std::pair{0.1, 0.9}}) {
    const auto v = elbo_quadrature(d, GaussianParams::scalar(mu, s2));
    CHECK(v.value == doctest::Approx(models::exp_model_elbo(-1, 0, 1, mu, s2) + models::exp_model_elbo_constant(-1, 1)).epsilon(1e-10));
    CHECK_FALSE(v.order_flagged);
  }
}

TEST_CASE("conjugate case: the oracle recovers the exact posterior") {
  const auto lm = reference_linear();
  const DataSample data({5.5, 6.2, 7.1, 5.9, 6.4});
  const double lambda = 0.4;
  const auto d = log_joint_density(lm, data, lambda);
  const double prec = 9 * 5 * std::exp(-lambda) + 1;
  const double mean = (3 * data.sum_y() * std::exp(-lambda) + 1) / prec;
  const auto post = GaussianParams::scalar(mean, 1 / prec);

  const double evidence = log_evidence(lm, data, lambda);
  CHECK(elbo_quadrature(d, post).value == doctest::Approx(evidence).epsilon(1e-10));
  // ELBO(q) = ln p(y) - KL(q || posterior)
  const auto q = GaussianParams::scalar(mean + 0.1, 0.5 / prec);
  CHECK(elbo_quadrature(d, q).value == doctest::Approx(evidence - kl_gaussians(q, post)).epsilon(1e-10));

  const auto fit = elbo_oracle_fit(d, GaussianParams::scalar(0.0, 1.0));
  CHECK(fit.converged);
  CHECK(fit.q.mean(0) == doctest::Approx(mean).epsilon(1e-8));
  CHECK(fit.q.cov(0, 0) == doctest::Approx(1 / prec).epsilon(1e-7));
  CHECK(fit.elbo == doctest::Approx(evidence).epsilon(1e-10));
}

TEST_CASE("oracle dominates the variational Laplace fixed point") {
  const auto lm = reference_linear();
  for (int n : {10, 100}) {
    RngStream rng = make_stream(2, "oracle", n, 0);
    const DataSample data = sample_data(lm, {2.0, 2.0}, n, rng);
    const auto fit = models::linear_fixed_point(lm, data, models::LinearState::from_prior(lm));
    const auto q = models::to_variational_state(fit.state);
    Vector mu(2);
    mu << q.q_theta.mean(0), q.q_lambda.mean(0);
    const auto vq = GaussianParams::diagonal(mu, Vector((Vector(2) << q.q_theta.cov(0, 0), q.q_lambda.cov(0, 0)).finished()));
    const auto d = log_joint_density(lm, data);
    const double at_vl = elbo_quadrature(d, vq).value;
    const auto oracle = elbo_oracle_fit(d, vq);
    CHECK(oracle.converged);
    CHECK(oracle.elbo >= at_vl - 1e-10);
    CHECK(oracle.gradient_norm <= 1e-6);
  }
}

TEST_CASE("limit densities and ellipses") {
  const auto lm = reference_linear();
  const models::GroundTruth truth{2.0, 2.0};
  const auto r = limit_density(lm, truth, LimitKind::Rescaled);
  CHECK(r.mean.norm() == 0.0);
  CHECK(r.cov(0, 0) == doctest::Approx(std::exp(2.0) / 9));
  CHECK(r.cov(1, 1) == doctest::Approx(2.0));
  const auto u = limit_density(lm, truth, LimitKind::Unrescaled, 100, models::LinearMle{2.1, 1.9});
  CHECK(u.mean(0) == doctest::Approx(2.1));
  CHECK(u.cov(1, 1) == doctest::Approx(0.02));
  const auto rm = limit_density(lm, truth, LimitKind::Rescaled, 100, models::LinearMle{2.1, 1.9});
  CHECK(rm.mean(0) == doctest::Approx(1.0));
  CHECK(rm.mean(1) == doctest::Approx(-1.0));

  const auto e = ellipse_data(r);
  CHECK(e.half_width == doctest::Approx(std::sqrt(std::exp(2.0) / 9)));
  CHECK(e.half_height == doctest::Approx(std::sqrt(2.0)));
  Matrix full(2, 2);
  full << 1, 0.5, 0.5, 1;
  CHECK_THROWS(ellipse_data(GaussianParams(Vector::Zero(2), full)));
  CHECK_THROWS(ellipse_data(GaussianParams::scalar(0, 1)));
}

TEST_CASE("TV curve is deterministic across worker counts") {
  const auto lm = reference_linear();
  TvCurveOptions one;
  one.workers = 1;
  TvCurveOptions many;
  many.workers = 4;
  const auto a = tv_convergence_curve(lm, {2.0, 2.0}, {100, 1000}, 6, 9, one);
  const auto b = tv_convergence_curve(lm, {2.0, 2.0}, {100, 1000}, 6, 9, many);
  REQUIRE(a.rows.size() == 12);
  REQUIRE(b.rows.size() == 12);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].tv == b.rows[i].tv);
    CHECK(a.rows[i].state.mu_theta == b.rows[i].state.mu_theta);
    CHECK(a.rows[i].tv >= 0);
    CHECK(a.rows[i].tv <= 1);
  }
  CHECK(a.rows[0].n == 100);
  CHECK(a.rows[6].n == 1000);
  REQUIRE(a.summary.size() == 2);
  CHECK(a.summary[0].median > a.summary[1].median);
}
