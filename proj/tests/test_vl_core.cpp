#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "varlap/errors.hpp"
#include "varlap/models.hpp"
#include "varlap/random.hpp"
#include "varlap/vl_core.hpp"

#include <cmath>
#include <limits>
#include <numbers>

using namespace varlap;
using namespace varlap::vl;

namespace {

const double kLn2Pi = std::log(2 * std::numbers::pi);

double normal_logpdf(double x, double m, double v) {
  return -0.5 * (kLn2Pi + std::log(v)) - 0.5 * (x - m) * (x - m) / v;
}

Vector v1(double x) { return Vector::Constant(1, x); }

models::LinearLambdaModel reference_linear() { return {3.0, 1.0, 1.0, 1.0, 1.0}; }

DataSample linear_data(const models::LinearLambdaModel& m, int n, std::uint64_t seed) {
  RngStream rng = make_stream(seed, "vl-core-test", n, 0);
  return sample_data(m, {2.0, 2.0}, n, rng);
}

double fd(const std::function<double(double)>& g, double x) {
  const double h = 1e-5 * std::max(1.0, std::abs(x));
  return (g(x + h) - g(x - h)) / (2 * h);
}

double fd2(const std::function<double(double)>& g, double x) {
  const double h = 1e-4 * std::max(1.0, std::abs(x));
  return (g(x + h) - 2 * g(x) + g(x - h)) / (h * h);
}

}  // namespace

TEST_CASE("log_joint matches the density formulas") {
  const auto sp = models::SingleParamModel::from_transform(models::transform_by_name("exp"), 0.7, 1.5, 2.0);
  const auto tm = models::to_transform_model(sp);
  const DataSample data({1.0, 2.5, 3.0, -0.5});
  const double theta = 0.8;
  double expected = normal_logpdf(theta, 1.5, 2.0);
  for (double y : data.y()) expected += normal_logpdf(y, std::exp(theta), 0.7);
  CHECK(log_joint(tm, data, v1(theta), Vector()) == doctest::Approx(expected).epsilon(1e-13));

  // linear model, n = 1, a = 1, y = 0, theta = lambda = 0, both priors N(0, 1)
  const auto lm = models::to_transform_model(models::LinearLambdaModel{1.0, 0.0, 1.0, 0.0, 1.0});
  const DataSample zero({0.0});
  CHECK(log_joint(lm, zero, v1(0), v1(0)) == doctest::Approx(-1.5 * kLn2Pi).epsilon(1e-14));

  // zero residual: likelihood part is -1/2 ln det Q - (n/2) ln 2 pi
  const DataSample exact({3.0, 3.0, 3.0});
  const auto lm2 = models::to_transform_model(models::LinearLambdaModel{3.0, 1.0, 1.0, 0.5, 2.0});
  const double lambda = 0.5;
  const double like = -1.5 * lambda - 1.5 * kLn2Pi;
  CHECK(log_joint(lm2, exact, v1(1.0), v1(lambda)) ==
        doctest::Approx(like + normal_logpdf(1.0, 1.0, 1.0) + normal_logpdf(lambda, 0.5, 2.0)));

  CHECK_THROWS_AS(log_joint(lm2, exact, Vector::Zero(2), v1(0)), ShapeError);
  CHECK_THROWS_AS(log_joint(lm2, exact, v1(0), Vector::Zero(2)), ShapeError);
}

TEST_CASE("non-positive precision is rejected") {
  auto tm = models::to_transform_model(reference_linear());
  tm.noise_precision.value = [](const Vector&) { return -1.0; };
  CHECK_THROWS_AS(log_joint(tm, DataSample({1.0}), v1(0), v1(0)), InvariantError);
}

TEST_CASE("transform Jacobians agree with finite differences") {
  for (const auto& name : models::transform_names()) {
    const auto t = models::transform_by_name(name);
    const auto tm = models::to_transform_model(models::SingleParamModel::from_transform(t, 1, 0, 1));
    for (double x : {-1.3, -0.2, 0.4, 1.0, 2.1}) {
      const double num = fd([&](double s) { return tm.f(v1(s)); }, x);
      CHECK(tm.jacobian_f(v1(x))(0) == doctest::Approx(num).epsilon(1e-5));
      CHECK(t.f_second(x) == doctest::Approx(fd(t.f_prime, x)).epsilon(1e-5));
    }
  }
}

TEST_CASE("variational energies: limits, finite differences, closed forms") {
  const auto lm = reference_linear();
  const auto tm = models::to_transform_model(lm);
  const DataSample data = linear_data(lm, 50, 1);
  const double mu_t = 1.9;
  const double mu_l = 2.2;

  SUBCASE("zero covariance limit") {
    const auto ql = GaussianParams::scalar(mu_l, 1e-300);
    CHECK(variational_energy_theta(tm, data, v1(mu_t), ql) ==
          doctest::Approx(log_joint(tm, data, v1(mu_t), v1(mu_l))).epsilon(1e-14));
    const auto qt = GaussianParams::scalar(mu_t, 1e-300);
    CHECK(variational_energy_lambda(tm, data, v1(mu_l), qt) ==
          doctest::Approx(log_joint(tm, data, v1(mu_t), v1(mu_l))).epsilon(1e-14));
  }

  SUBCASE("lambda trace term of the linear model") {
    const double st = 0.03;
    const auto qt = GaussianParams::scalar(mu_t, st);
    const double trace = variational_energy_lambda(tm, data, v1(mu_l), qt) - log_joint(tm, data, v1(mu_t), v1(mu_l));
    const double n = data.n();
    CHECK(trace == doctest::Approx(-0.5 * (lm.a * lm.a * n / std::exp(mu_l) + 1 / lm.s2_theta) * st).epsilon(1e-12));
  }

  SUBCASE("theta energy against the hand expansion, up to a constant") {
    const double sl = 0.2;
    const auto ql = GaussianParams::scalar(mu_l, sl);
    auto hand = [&](double m) {
      const double ss = data.residual_ss(lm.a * m);
      return -0.5 * std::exp(-mu_l) * (1 + sl / 2) * ss - 0.5 * (m - lm.m_theta) * (m - lm.m_theta) / lm.s2_theta;
    };
    const double d1 = variational_energy_theta(tm, data, v1(1.7), ql) - variational_energy_theta(tm, data, v1(2.3), ql);
    CHECK(d1 == doctest::Approx(hand(1.7) - hand(2.3)).epsilon(1e-11));
  }

  SUBCASE("lambda energy against the hand expansion, up to a constant") {
    const double st = 0.01;
    const auto qt = GaussianParams::scalar(mu_t, st);
    const double n = data.n();
    auto hand = [&](double l) {
      const double b = data.residual_ss(lm.a * mu_t) + lm.a * lm.a * n * st;
      return -0.5 * n * l - 0.5 * std::exp(-l) * b - 0.5 * (l - lm.m_lambda) * (l - lm.m_lambda) / lm.s2_lambda;
    };
    const double d1 = variational_energy_lambda(tm, data, v1(1.5), qt) - variational_energy_lambda(tm, data, v1(2.5), qt);
    CHECK(d1 == doctest::Approx(hand(1.5) - hand(2.5)).epsilon(1e-11));
  }

  SUBCASE("gradients and Hessians by finite differences") {
    const auto ql = GaussianParams::scalar(mu_l, 0.3);
    const auto qt = GaussianParams::scalar(mu_t, 0.02);
    auto et = [&](double m) { return variational_energy_theta(tm, data, v1(m), ql); };
    auto el = [&](double m) { return variational_energy_lambda(tm, data, v1(m), qt); };
    CHECK(energy_theta_gradient(tm, data, v1(mu_t), ql)(0) == doctest::Approx(fd(et, mu_t)).epsilon(1e-6));
    CHECK(energy_lambda_gradient(tm, data, v1(mu_l), qt)(0) == doctest::Approx(fd(el, mu_l)).epsilon(1e-6));
    CHECK(energy_theta_hessian(tm, data, v1(mu_t), ql)(0, 0) == doctest::Approx(fd2(et, mu_t)).epsilon(1e-4));
    CHECK(energy_lambda_hessian(tm, data, v1(mu_l), qt)(0, 0) == doctest::Approx(fd2(el, mu_l)).epsilon(1e-4));
    auto lj = [&](double l) { return log_joint(tm, data, v1(mu_t), v1(l)); };
    CHECK(lambda_hessian(tm, data, v1(mu_t), v1(mu_l))(0, 0) == doctest::Approx(fd2(lj, mu_l)).epsilon(1e-4));
  }
}

TEST_CASE("newton_maximize") {
  SUBCASE("quadratic converges in one step") {
    Matrix a(2, 2);
    a << 2, 0.5, 0.5, 1;
    Vector c(2);
    c << 1, -2;
    auto e = [&](const Vector& x) { return -0.5 * (x - c).dot(a * (x - c)); };
    auto g = [&](const Vector& x) -> Vector { return -a * (x - c); };
    auto h = [&](const Vector&) -> Matrix { return -a; };
    const auto r = newton_maximize(e, g, h, Vector::Zero(2));
    CHECK((r.x - c).norm() < 1e-12);
    CHECK(r.report.converged);
    CHECK(r.report.iterations <= 2);
  }
  SUBCASE("max_iter = 0 returns x0 unconverged") {
    NewtonOptions o;
    o.max_iter = 0;
    const auto r = newton_maximize([](const Vector& x) { return -x.squaredNorm(); },
                                   [](const Vector& x) -> Vector { return -2 * x; },
                                   [](const Vector& x) -> Matrix { return -2 * Matrix::Identity(x.size(), x.size()); },
                                   v1(3.0), o);
    CHECK(r.x(0) == 3.0);
    CHECK_FALSE(r.report.converged);
  }
  SUBCASE("non-finite energy at x0") {
    CHECK_THROWS_AS(newton_maximize([](const Vector&) { return std::nan(""); },
                                    [](const Vector& x) -> Vector { return x; },
                                    [](const Vector& x) -> Matrix { return Matrix::Identity(x.size(), x.size()); },
                                    v1(0)),
                    NumericError);
  }
  SUBCASE("indefinite Hessian is shifted and the energy never decreases") {
    // f(x) = -x^4 + x^2 has an indefinite Hessian at x0 = 0.1
    std::vector<double> seen;
    auto e = [&](const Vector& x) { return -std::pow(x(0), 4) + x(0) * x(0); };
    auto g = [&](const Vector& x) -> Vector { return v1(-4 * std::pow(x(0), 3) + 2 * x(0)); };
    auto h = [&](const Vector& x) -> Matrix { return Matrix::Constant(1, 1, -12 * x(0) * x(0) + 2); };
    NewtonOptions o;
    double last = e(v1(0.1));
    for (int k = 1; k < 40; ++k) {
      o.max_iter = k;
      const auto r = newton_maximize(e, g, h, v1(0.1), o);
      CHECK(r.report.energy >= last - 1e-15);
      last = r.report.energy;
    }
    o.max_iter = 100;
    const auto r = newton_maximize(e, g, h, v1(0.1), o);
    CHECK(r.report.hessian_shifts >= 1);
    CHECK(std::abs(r.x(0)) == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-10));
  }
  SUBCASE("single-parameter exp model against golden-section search") {
    const auto sp = models::SingleParamModel::from_transform(models::transform_by_name("exp"), 1.0, 10.0, 100.0);
    RngStream rng = make_stream(3, "newton-exp", 0, 0);
    const DataSample data = sample_data(sp, 1.0, 200, rng);
    const auto tm = models::to_transform_model(sp);
    const GaussianParams none;
    const auto r = newton_maximize(
        [&](const Vector& x) { return variational_energy_theta(tm, data, x, none); },
        [&](const Vector& x) { return energy_theta_gradient(tm, data, x, none); },
        [&](const Vector& x) { return energy_theta_hessian(tm, data, x, none); }, v1(10.0));
    CHECK(std::abs(models::single_param_gradient(sp, data, r.x(0))) <= 1e-8);

    double lo = 0, hi = 3;
    const double phi = 0.5 * (std::sqrt(5.0) - 1);
    auto obj = [&](double t) { return models::single_param_log_joint(sp, data, t); };
    while (hi - lo > 1e-12) {
      const double x1 = hi - phi * (hi - lo);
      const double x2 = lo + phi * (hi - lo);
      if (obj(x1) < obj(x2)) lo = x1; else hi = x2;
    }
    CHECK(std::abs(r.x(0) - 0.5 * (lo + hi)) < 1e-7);
  }
}

TEST_CASE("covariance updates") {
  const auto lm = reference_linear();
  const auto tm = models::to_transform_model(lm);
  const DataSample data = linear_data(lm, 40, 2);
  const double n = data.n();
  const double mu_l = 1.7;
  const Matrix st = update_covariance_theta(tm, data, v1(2.1), GaussianParams::scalar(mu_l, 0.4));
  const double e = std::exp(mu_l);
  CHECK(st(0, 0) == doctest::Approx(e * lm.s2_theta / (lm.a * lm.a * n * lm.s2_theta + e)).epsilon(1e-14));
  CHECK(st(0, 0) <= lm.s2_theta);

  const double mt = 2.05;
  const Matrix sl = update_covariance_lambda(tm, data, v1(mt), v1(mu_l));
  const double ss = data.residual_ss(lm.a * mt);
  CHECK(sl(0, 0) == doctest::Approx(2 * e * lm.s2_lambda / (ss * lm.s2_lambda + 2 * e)).epsilon(1e-14));

  // zero residuals: SS = 0 gives s_lambda^2
  const DataSample exact({3.0, 3.0});
  CHECK(update_covariance_lambda(tm, exact, v1(1.0), v1(0.3))(0, 0) == doctest::Approx(lm.s2_lambda));

  // constant f: prior covariance
  auto flat = tm;
  flat.jacobian_f = [](const Vector&) { return Vector::Zero(1); };
  CHECK(update_covariance_theta(flat, data, v1(0), GaussianParams::scalar(0, 1))(0, 0) == doctest::Approx(lm.s2_theta));

  // Loewner order on a random 2D theta block
  vl::TransformModel two;
  two.dim_theta = 2;
  two.dim_lambda = 0;
  two.f = [](const Vector& t) { return t(0) + 2 * t(1); };
  two.jacobian_f = [](const Vector&) { Vector j(2); j << 1, 2; return j; };
  two.noise_precision = {[](const Vector&) { return 0.5; }, [](const Vector&) { return Vector(0); },
                         [](const Vector&) { return Matrix(0, 0); }};
  Matrix s(2, 2);
  s << 2, 0.3, 0.3, 1;
  two.prior_theta = GaussianParams(Vector::Zero(2), s);
  const Matrix post = update_covariance_theta(two, data, Vector::Zero(2), GaussianParams());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s - post);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-12);

  // curvature that is not negative definite
  auto weird = tm;
  weird.noise_precision.value = [](const Vector& l) { return l(0) * l(0) + 1; };
  weird.noise_precision.gradient = [](const Vector& l) { return v1(2 * l(0)); };
  weird.noise_precision.hessian = [](const Vector&) { return Matrix::Constant(1, 1, 2.0); };
  const DataSample many(std::vector<double>(100, 3.0));
  CHECK_THROWS_AS(update_covariance_lambda(weird, many, v1(1.0), v1(0.0)), DegenerateCurvatureError);
}

TEST_CASE("vl_step on the linear model equals the closed-form step") {
  const auto lm = reference_linear();
  const auto tm = models::to_transform_model(lm);
  RngStream rng = make_stream(4, "vl-step", 0, 0);
  for (int i = 0; i < 20; ++i) {
    const int n = 1 + static_cast<int>(rng.uniform() * 1000);
    const DataSample data = sample_data(lm, {2.0, 2.0}, n, rng);
    const models::LinearState s{rng.normal() + 2, 0.01 + rng.uniform(), rng.normal() + 2, 0.01 + rng.uniform()};
    const auto ref = models::linear_closed_form_step(lm, data, s);
    const auto next = vl_step(tm, data, models::to_variational_state(s));
    const auto got = models::to_linear_state(next);
    CHECK(got.mu_theta == doctest::Approx(ref.mu_theta).epsilon(1e-9));
    CHECK(got.sigma_theta == doctest::Approx(ref.sigma_theta).epsilon(1e-9));
    CHECK(got.mu_lambda == doctest::Approx(ref.mu_lambda).epsilon(1e-9));
    CHECK(got.sigma_lambda == doctest::Approx(ref.sigma_lambda).epsilon(1e-9));
    CHECK(next.iteration == 1);
  }
}

TEST_CASE("run_to_fixed_point") {
  const auto lm = reference_linear();
  const auto tm = models::to_transform_model(lm);
  const DataSample data = linear_data(lm, 1000, 5);

  const auto rep = run_to_fixed_point(tm, data, default_state(tm));
  CHECK(rep.converged);
  CHECK(rep.residual_theta <= 1e-8);
  CHECK(rep.residual_lambda <= 1e-8);
  CHECK(rep.n == 1000);
  CHECK(rep.state.iteration == rep.sweeps);

  // idempotent at the fixed point
  const auto again = vl_step(tm, data, rep.state);
  CHECK(max_parameter_change(again, rep.state) < 1e-10);
  const auto restart = run_to_fixed_point(tm, data, rep.state);
  CHECK(restart.sweeps == 1);

  FixedPointOptions once;
  once.tol = std::numeric_limits<double>::infinity();
  CHECK(run_to_fixed_point(tm, data, default_state(tm), once).sweeps == 1);

  // deterministic
  const auto rep2 = run_to_fixed_point(tm, data, default_state(tm));
  CHECK(rep2.state.q_theta.mean(0) == rep.state.q_theta.mean(0));
  CHECK(rep2.state.q_lambda.cov(0, 0) == rep.state.q_lambda.cov(0, 0));

  // non-finite Jacobian surfaces as divergence with the last finite state
  auto broken = tm;
  broken.jacobian_f = [](const Vector&) { return v1(std::nan("")); };
  try {
    run_to_fixed_point(broken, data, default_state(tm));
    FAIL("expected DivergedError");
  } catch (const DivergedError& e) {
    CHECK(e.last_finite().q_theta.mean(0) == lm.m_theta);
  }
}

TEST_CASE("remainder diagnostic") {
  const auto lm = reference_linear();
  const auto tm = models::to_transform_model(lm);
  const DataSample data = linear_data(lm, 500, 6);
  const auto rep = run_to_fixed_point(tm, data, default_state(tm));
  const auto s = models::to_linear_state(rep.state);
  const auto closed = models::linear_remainder(lm, data, s);
  CHECK(rep.remainder(0) == doctest::Approx(closed[0]).epsilon(1e-6));
  CHECK(rep.remainder(1) == doctest::Approx(closed[1]).epsilon(1e-6));
  CHECK(rep.remainder_scaled(0) == doctest::Approx(std::sqrt(500.0) * rep.remainder(0)));
  // at a fixed point R equals the scaled log-likelihood gradient
  const auto g = models::linear_loglik_gradient(lm, data, s.mu_theta, s.mu_lambda);
  CHECK(std::abs(rep.remainder(0) - g[0] / 500) < 1e-8);
  CHECK(std::abs(rep.remainder(1) - g[1] / 500) < 1e-8);
  CHECK(rep.remainder.allFinite());

  // single block: only the prior gradient remains
  const auto sp = models::SingleParamModel::from_transform(models::transform_by_name("cube"), 1.0, 10.0, 100.0);
  const auto tms = models::to_transform_model(sp);
  const DataSample d2({1.1, 0.9, 1.3});
  VariationalState st = default_state(tms);
  st.q_theta.mean(0) = 1.02;
  const auto r = remainder_diagnostic(tms, d2, st);
  CHECK(r.r(0) == doctest::Approx((1.02 - 10.0) / 100.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("single block reduces to MAP with the Gauss-Newton variance") {
  for (const char* name : {"exp", "cube", "exp2_cube"}) {
    const auto sp = models::SingleParamModel::from_transform(models::transform_by_name(name), 1.0, 10.0, 100.0);
    RngStream rng = make_stream(7, name, 0, 0);
    const DataSample data = sample_data(sp, 1.0, 300, rng);
    const auto tm = models::to_transform_model(sp);
    const auto rep = run_to_fixed_point(tm, data, default_state(tm));
    const auto map = models::single_param_map(sp, data, 10.0);
    CHECK(rep.converged);
    CHECK(rep.state.q_theta.mean(0) == doctest::Approx(map.map).epsilon(1e-9));
    CHECK(rep.state.q_theta.cov(0, 0) == doctest::Approx(map.laplace_sd2).epsilon(1e-8));
  }
}
