#include "varlap/cli.hpp"

#include "varlap/asymptotics.hpp"
#include "varlap/errors.hpp"
#include "varlap/harness.hpp"
#include "varlap/models.hpp"
#include "varlap/numkit.hpp"
#include "varlap/random.hpp"
#include "varlap/vl_core.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>

namespace varlap::cli {

namespace {

using harness::format_double;
using harness::KeyValues;

KeyValues with_env_and_overrides(KeyValues kv, const std::vector<std::string>& overrides,
                                 bool use_seed_env) {
  if (use_seed_env) {
    if (const char* env = std::getenv("VARLAP_SEED"); env != nullptr && *env != '\0') {
      kv.emplace_back("seed", env);
    }
  }
  for (const auto& o : overrides) kv.push_back(harness::parse_override(o));
  return kv;
}

// ---------------------------------------------------------------------------
// fit

struct FitConfig {
  std::string model = "linear";
  std::string transform = "exp";
  double a = 1.0;
  double m_theta = 0.0;
  double s_theta = 1.0;
  double m_lambda = 0.0;
  double s_lambda = 1.0;
  double s = 1.0;
  std::string data;
  double tol = 1e-10;
  int max_sweeps = 500;
  std::string output_dir = "results";
};

double to_real(const std::string& k, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || !std::isfinite(x)) {
    throw ConfigError("fit config: '" + k + "' expects a number, got '" + v + "'");
  }
  return x;
}

FitConfig make_fit_config(const KeyValues& kv) {
  FitConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "model") c.model = v;
    else if (k == "transform") c.transform = v;
    else if (k == "a") c.a = to_real(k, v);
    else if (k == "m_theta") c.m_theta = to_real(k, v);
    else if (k == "s_theta") c.s_theta = to_real(k, v);
    else if (k == "m_lambda") c.m_lambda = to_real(k, v);
    else if (k == "s_lambda") c.s_lambda = to_real(k, v);
    else if (k == "s") c.s = to_real(k, v);
    else if (k == "data") c.data = v;
    else if (k == "tol") c.tol = to_real(k, v);
    else if (k == "max_sweeps") {
      const double x = to_real(k, v);
      if (x != std::floor(x) || x < 1) throw ConfigError("fit config: max_sweeps must be a positive integer");
      c.max_sweeps = static_cast<int>(x);
    } else if (k == "output_dir") c.output_dir = v;
    else throw ConfigError("fit config: unknown key '" + k + "'");
  }
  if (c.model != "linear" && c.model != "single") {
    throw ConfigError("fit config: model must be 'linear' or 'single'");
  }
  if (!(c.s_theta > 0.0) || !(c.s_lambda > 0.0) || !(c.s > 0.0)) {
    throw ConfigError("fit config: standard deviations must be > 0");
  }
  if (c.model == "linear" && c.a == 0.0) throw ConfigError("fit config: a must be nonzero");
  if (!(c.tol > 0.0)) throw ConfigError("fit config: tol must be > 0");
  if (c.data.empty()) throw ConfigError("fit config: no data file given");
  return c;
}

std::vector<double> read_data(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read data file " + path);
  std::vector<double> y;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    const std::string tok = line.substr(b, e - b + 1);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || !std::isfinite(v)) {
      throw ConfigError("data file line " + std::to_string(lineno) + ": not a number");
    }
    y.push_back(v);
  }
  if (y.empty()) throw ConfigError("data file " + path + " has no observations");
  return y;
}

void write_fit_result(const std::filesystem::path& file, const FitConfig& c, int n,
                      const vl::VariationalState& state, const vl::FixedPointReport* report,
                      const std::string& status, const KeyValues& kv,
                      const std::vector<std::string>& overrides) {
  std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  out << "model=" << c.model << '\n';
  if (c.model == "single") out << "transform=" << c.transform << '\n';
  out << "n=" << n << '\n';
  out << "status=" << status << '\n';
  out << "mu_theta=" << format_double(state.q_theta.mean(0)) << '\n';
  out << "sigma_theta=" << format_double(state.q_theta.cov(0, 0)) << '\n';
  if (!state.q_lambda.empty()) {
    out << "mu_lambda=" << format_double(state.q_lambda.mean(0)) << '\n';
    out << "sigma_lambda=" << format_double(state.q_lambda.cov(0, 0)) << '\n';
  }
  if (report != nullptr) {
    out << "converged=" << (report->converged ? 1 : 0) << '\n';
    out << "sweeps=" << report->sweeps << '\n';
    out << "residual_theta=" << format_double(report->residual_theta) << '\n';
    out << "residual_lambda=" << format_double(report->residual_lambda) << '\n';
    const char* names[] = {"theta", "lambda"};
    for (Eigen::Index i = 0; i < report->remainder.size(); ++i) {
      out << "remainder_" << names[i] << '=' << format_double(report->remainder(i)) << '\n';
      out << "remainder_scaled_" << names[i] << '=' << format_double(report->remainder_scaled(i)) << '\n';
    }
  } else {
    out << "converged=0\n";
    out << "iteration=" << state.iteration << '\n';
  }
  out << "initialization=prior means and variances\n";
  for (const auto& [k, v] : kv) out << "config." << k << '=' << v << '\n';
  for (const auto& o : overrides) out << "override." << o << '\n';
}

}  // namespace

int cmd_fit(const std::string& config_path, const std::string& data_path,
            const std::vector<std::string>& overrides, std::ostream& out, std::ostream& err) {
  FitConfig c;
  KeyValues kv;
  std::vector<double> y;
  try {
    kv = harness::load_key_values(config_path);
    if (!data_path.empty()) kv.emplace_back("data", data_path);
    kv = with_env_and_overrides(kv, overrides, false);
    c = make_fit_config(kv);
    y = read_data(c.data);
  } catch (const ConfigError& e) {
    err << "varlap fit: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "varlap fit: " << e.what() << '\n';
    return kConfigError;
  }

  const DataSample data(std::move(y));
  vl::TransformModel model;
  try {
    if (c.model == "linear") {
      model = models::to_transform_model(
          models::LinearLambdaModel{c.a, c.m_theta, c.s_theta * c.s_theta, c.m_lambda, c.s_lambda * c.s_lambda});
    } else {
      model = models::to_transform_model(models::SingleParamModel::from_transform(
          models::transform_by_name(c.transform), c.s * c.s, c.m_theta, c.s_theta * c.s_theta));
    }
  } catch (const std::exception& e) {
    err << "varlap fit: " << e.what() << '\n';
    return kConfigError;
  }

  const std::filesystem::path file = std::filesystem::path(c.output_dir) / "fit" / "result.txt";
  vl::FixedPointOptions opts;
  opts.tol = c.tol;
  opts.max_sweeps = c.max_sweeps;
  const vl::VariationalState init = vl::default_state(model);
  try {
    const vl::FixedPointReport report = vl::run_to_fixed_point(model, data, init, opts);
    write_fit_result(file, c, data.n(), report.state, &report,
                     report.converged ? "ok" : "not_converged", kv, overrides);
    out << "fit " << c.model << " n=" << data.n() << " mu_theta=" << format_double(report.state.q_theta.mean(0));
    if (!report.state.q_lambda.empty()) out << " mu_lambda=" << format_double(report.state.q_lambda.mean(0));
    out << " sweeps=" << report.sweeps << " converged=" << (report.converged ? "yes" : "no")
        << " -> " << file.string() << '\n';
    return report.converged ? kOk : kNumericalFailure;
  } catch (const vl::DivergedError& e) {
    write_fit_result(file, c, data.n(), e.last_finite(), nullptr, "diverged", kv, overrides);
    err << "varlap fit: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const std::exception& e) {
    write_fit_result(file, c, data.n(), init, nullptr, std::string("failed: ") + e.what(), kv, overrides);
    err << "varlap fit: " << e.what() << '\n';
    return kNumericalFailure;
  }
}

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(const std::string& config_path, const std::vector<std::string>& overrides,
                 std::ostream& out, std::ostream& err) {
  harness::ExperimentConfig config;
  try {
    config = harness::make_config(
        with_env_and_overrides(harness::load_key_values(config_path), overrides, true));
  } catch (const std::exception& e) {
    err << "varlap simulate: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    const harness::ExperimentResult result = harness::run_experiment(config);
    const auto dir = harness::write_outputs(config, result);
    out << "simulate " << config.experiment << ": rows=" << result.total
        << " excluded=" << result.excluded << " -> " << dir.string() << '\n';
    if (result.nonequivalence && !result.nonequivalence->certified) {
      err << "varlap simulate: nonequivalence not certified\n";
      return kNumericalFailure;
    }
    if (!result.within_budget()) {
      err << "varlap simulate: exclusion rate " << result.exclusion_rate() << " exceeds budget\n";
      return kNumericalFailure;
    }
    return kOk;
  } catch (const ConfigError& e) {
    err << "varlap simulate: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "varlap simulate: " << e.what() << '\n';
    return kNumericalFailure;
  }
}

// ---------------------------------------------------------------------------
// diagnose

namespace {

std::uint64_t diagnose_seed() {
  if (const char* env = std::getenv("VARLAP_SEED"); env != nullptr && *env != '\0') {
    return std::strtoull(env, nullptr, 10);
  }
  return 0;
}

bool diagnose_underdispersion(std::ostream& os) {
  const auto rep = harness::underdispersion_check(1000, diagnose_seed());
  os << "# underdispersion: entropy of the best diagonal Gaussian vs the target\n";
  os << "cases=" << rep.cases << '\n';
  os << "violations=" << rep.violations << '\n';
  os << "min_entropy_margin=" << format_double(rep.min_margin) << '\n';
  os << "max_det_ratio=" << format_double(rep.max_det_ratio) << '\n';
  os << "result=" << (rep.violations == 0 ? "PASS" : "FAIL") << '\n';
  return rep.violations == 0;
}

bool diagnose_nonequivalence(std::ostream& os) {
  bool ok = true;
  for (double y : {-1.0, -5.0}) {
    const auto r = harness::nonequivalence_report(y, 0.0, 1.0);
    os << harness::nonequivalence_text(r) << '\n';
    ok = ok && r.certified;
  }
  os << "result=" << (ok ? "PASS" : "FAIL") << '\n';
  return ok;
}

bool diagnose_oracle_gap(std::ostream& os) {
  const models::LinearLambdaModel model{3.0, 1.0, 1.0, 1.0, 1.0};
  const models::GroundTruth truth{2.0, 2.0};
  const auto rows = harness::oracle_gap_table(model, truth, {10, 100, 1000, 10000}, diagnose_seed());
  os << "# exact ELBO of the quadrature oracle minus that of the variational Laplace fixed point\n";
  os << "n,elbo_varlap,elbo_oracle,gap,gap_per_n,oracle_grad_norm,quadrature_flagged\n";
  bool ok = true;
  for (const auto& r : rows) {
    os << r.n << ',' << format_double(r.elbo_varlap) << ',' << format_double(r.elbo_oracle) << ','
       << format_double(r.gap) << ',' << format_double(r.gap_per_n) << ','
       << format_double(r.oracle_grad_norm) << ',' << (r.quadrature_flagged ? 1 : 0) << '\n';
    ok = ok && r.gap >= -1e-9;
  }
  os << "result=" << (ok ? "PASS" : "FAIL") << '\n';
  return ok;
}

}  // namespace

int cmd_diagnose(const std::string& name, const std::string& out_path, std::ostream& out,
                 std::ostream& err) {
  std::function<bool(std::ostream&)> fn;
  if (name == "underdispersion") fn = diagnose_underdispersion;
  else if (name == "nonequivalence") fn = diagnose_nonequivalence;
  else if (name == "oracle-gap") fn = diagnose_oracle_gap;
  else {
    err << "varlap diagnose: unknown diagnostic '" << name
        << "' (expected underdispersion, nonequivalence or oracle-gap)\n";
    return kConfigError;
  }
  std::ostringstream report;
  bool ok = false;
  try {
    ok = fn(report);
  } catch (const std::exception& e) {
    err << "varlap diagnose: " << e.what() << '\n';
    return kNumericalFailure;
  }
  if (out_path.empty()) {
    out << report.str();
  } else {
    const std::filesystem::path p(out_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) {
      err << "varlap diagnose: cannot write " << out_path << '\n';
      return kConfigError;
    }
    f << report.str();
    out << "diagnose " << name << ": " << (ok ? "PASS" : "FAIL") << " -> " << out_path << '\n';
  }
  return ok ? kOk : kNumericalFailure;
}

// ---------------------------------------------------------------------------
// selftest

namespace {

bool check_lambert() {
  for (int i = 0; i <= 160; ++i) {
    const double x = std::pow(10.0, -8.0 + 0.1 * i);
    const double w = lambert_w(x);
    if (std::abs(w * std::exp(w) - x) > 1e-12 * std::max(1.0, x)) return false;
  }
  return true;
}

bool check_gauss_hermite() {
  const auto r = gauss_hermite(20);
  double s = 0.0;
  for (int i = 0; i < 20; ++i) s += r.weights(i) * std::exp(std::sqrt(2.0) * r.nodes(i));
  return std::abs(s / std::sqrt(std::numbers::pi) - std::exp(0.5)) <= 1e-8;
}

bool check_tv() {
  const double tv = tv_gaussians(GaussianParams::scalar(0, 1), GaussianParams::scalar(3, 1));
  return std::abs(tv - std::erf(1.5 / std::sqrt(2.0))) < 1e-4;
}

bool check_kl() {
  RngStream rng = make_stream(1, "selftest-kl", 0, 0);
  for (int i = 0; i < 100; ++i) {
    const int d = 1 + i % 3;
    Vector m1(d), m2(d);
    for (int j = 0; j < d; ++j) {
      m1(j) = rng.normal();
      m2(j) = rng.normal();
    }
    const GaussianParams p(m1, harness::random_spd(d, rng));
    const GaussianParams q(m2, harness::random_spd(d, rng));
    if (kl_gaussians(p, q) < 0.0 || kl_gaussians(p, p) > 1e-12) return false;
  }
  return true;
}

bool check_linear_equivalence() {
  RngStream rng = make_stream(2, "selftest-linear", 0, 0);
  for (int i = 0; i < 20; ++i) {
    const models::LinearLambdaModel model{1.0 + 2.0 * rng.uniform(), rng.normal(), 0.5 + rng.uniform(),
                                          rng.normal(), 0.5 + rng.uniform()};
    const int n = 1 + static_cast<int>(rng.uniform() * 1000);
    const DataSample data = sample_data(model, {rng.normal(), rng.normal()}, n, rng);
    const models::LinearState s{rng.normal(), 0.01 + rng.uniform(), rng.normal(), 0.01 + rng.uniform()};
    const auto ref = models::linear_closed_form_step(model, data, s);
    const auto got = models::to_linear_state(
        vl::vl_step(models::to_transform_model(model), data, models::to_variational_state(s)));
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); };
    if (!close(got.mu_theta, ref.mu_theta) || !close(got.sigma_theta, ref.sigma_theta) ||
        !close(got.mu_lambda, ref.mu_lambda) || !close(got.sigma_lambda, ref.sigma_lambda)) {
      return false;
    }
  }
  return true;
}

bool check_conjugate_map() {
  const auto model = models::SingleParamModel::from_transform(models::transform_by_name("identity"), 2.0, 1.0, 3.0);
  const DataSample data({0.5, 1.5, 2.5, -0.5});
  const auto fit = models::single_param_map(model, data, 0.0);
  const double expected = (data.n() * data.mean_y() / 2.0 + 1.0 / 3.0) / (data.n() / 2.0 + 1.0 / 3.0);
  return std::abs(fit.map - expected) < 1e-10;
}

bool check_underdispersion() { return harness::underdispersion_check(200, 0).violations == 0; }

bool check_nonequivalence() { return harness::nonequivalence_report(-1.0, 0.0, 1.0).certified; }

}  // namespace

int cmd_selftest(std::ostream& out, std::ostream& err) {
  const std::pair<const char*, bool (*)()> checks[] = {
      {"lambert_w round trip", check_lambert},
      {"gauss_hermite E[exp(Z)]", check_gauss_hermite},
      {"tv_gaussians erf oracle", check_tv},
      {"kl_gaussians nonnegative", check_kl},
      {"vl_step equals linear closed form", check_linear_equivalence},
      {"single_param_map conjugate", check_conjugate_map},
      {"underdispersion", check_underdispersion},
      {"nonequivalence certificate", check_nonequivalence},
  };
  int failed = 0;
  for (const auto& [name, fn] : checks) {
    bool ok = false;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      err << name << ": " << e.what() << '\n';
    }
    out << (ok ? "PASS " : "FAIL ") << name << '\n';
    if (!ok) ++failed;
  }
  out << (failed == 0 ? "selftest passed" : "selftest failed") << '\n';
  return failed == 0 ? kOk : kFailure;
}

// ---------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Variational Laplace fits, simulation experiments and diagnostics", "varlap"};
  app.require_subcommand(1);

  std::string config_path, data_path, diag_name, diag_out;
  std::vector<std::string> fit_overrides, sim_overrides;

  auto* fit = app.add_subcommand("fit", "Fit a model to a data file");
  fit->add_option("--config", config_path, "Key-value model config")->required()->check(CLI::ExistingFile);
  fit->add_option("--data", data_path, "One observation per line");
  fit->add_option("--override", fit_overrides, "key=value, applied after the config file");

  auto* sim = app.add_subcommand("simulate", "Run a simulation experiment");
  sim->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  sim->add_option("--override", sim_overrides, "key=value, applied after the config file");

  auto* diag = app.add_subcommand("diagnose", "underdispersion | nonequivalence | oracle-gap");
  diag->add_option("name", diag_name, "Diagnostic name")->required();
  diag->add_option("--out", diag_out, "Write the report here instead of stdout");

  auto* self = app.add_subcommand("selftest", "Fast invariant suite");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "varlap: " << e.what() << '\n';
    return kConfigError;
  }

  if (fit->parsed()) return cmd_fit(config_path, data_path, fit_overrides, out, err);
  if (sim->parsed()) return cmd_simulate(config_path, sim_overrides, out, err);
  if (diag->parsed()) return cmd_diagnose(diag_name, diag_out, out, err);
  if (self->parsed()) return cmd_selftest(out, err);
  err << app.help();
  return kConfigError;
}

}  // namespace varlap::cli
