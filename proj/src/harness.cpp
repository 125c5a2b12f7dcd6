#include "varlap/harness.hpp"

#include "varlap/errors.hpp"
#include "varlap/parallel.hpp"
#include "varlap/random.hpp"
#include "varlap/vl_core.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

namespace varlap::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(x)) {
    throw ConfigError("config: '" + key + "' expects a finite number, got '" + v + "'");
  }
  return x;
}

int parse_int(const std::string& key, const std::string& v) {
  const double x = parse_real(key, v);
  if (x != std::floor(x) || std::abs(x) > std::numeric_limits<int>::max()) {
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  }
  return static_cast<int>(x);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  if (v.empty() || v[0] == '-') throw ConfigError("config: '" + key + "' expects an unsigned integer");
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size() || errno == ERANGE) {
    throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
  return static_cast<std::uint64_t>(x);
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::string join(const std::vector<int>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + std::to_string(items[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

KeyValues load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

std::pair<std::string, std::string> parse_override(const std::string& text) {
  const auto kv = parse_key_values(text);
  if (kv.size() != 1) throw ConfigError("override must look like key=value: '" + text + "'");
  return kv.front();
}

const std::vector<std::string>& experiment_tags() {
  static const std::vector<std::string> tags = {"single-consistency", "linear-asymptotics",
                                                "tv-curve", "remainder-decay", "nonequivalence"};
  return tags;
}

ExperimentConfig default_config(const std::string& experiment) {
  const auto& tags = experiment_tags();
  if (std::find(tags.begin(), tags.end(), experiment) == tags.end()) {
    throw ConfigError("unknown experiment '" + experiment + "'");
  }
  ExperimentConfig c;
  c.experiment = experiment;
  if (experiment == "single-consistency") {
    c.m_theta = 10.0;
    c.s_theta = 10.0;
    c.s = 1.0;
    c.theta0 = 1.0;
    c.transforms = {"exp", "cube", "exp2_cube"};
    c.n_grid = {10, 100, 1000};
    c.reps = 500;
  } else if (experiment == "linear-asymptotics") {
    c.n_grid = {100, 1000, 10000};
    c.reps = 500;
  } else if (experiment == "tv-curve") {
    c.n_grid = {100, 10000, 1000000};
    c.reps = 10;
  } else if (experiment == "remainder-decay") {
    c.n_grid = {100, 1000, 10000, 100000, 1000000};
    c.reps = 10;
  } else {
    c.m_theta = 0.0;
    c.s_theta = 1.0;
    c.y = -1.0;
    c.n_grid = {1};
  }
  return c;
}

ExperimentConfig make_config(const KeyValues& values) {
  std::string experiment;
  for (const auto& [k, v] : values) {
    if (k == "experiment") experiment = v;
  }
  if (experiment.empty()) throw ConfigError("config: missing 'experiment'");
  ExperimentConfig c = default_config(experiment);

  using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;
  static const std::map<std::string, Setter> setters = {
      {"experiment", [](ExperimentConfig&, const std::string&, const std::string&) {}},
      {"a", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.a = parse_real(k, v); }},
      {"m_theta", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.m_theta = parse_real(k, v); }},
      {"s_theta", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.s_theta = parse_real(k, v); }},
      {"m_lambda", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.m_lambda = parse_real(k, v); }},
      {"s_lambda", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.s_lambda = parse_real(k, v); }},
      {"s", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.s = parse_real(k, v); }},
      {"transforms", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.transforms = split_list(v); }},
      {"theta0", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.theta0 = parse_real(k, v); }},
      {"lambda0", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.lambda0 = parse_real(k, v); }},
      {"y", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.y = parse_real(k, v); }},
      {"n_grid", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.n_grid.clear();
         for (const auto& item : split_list(v)) c.n_grid.push_back(parse_int(k, item));
       }},
      {"reps", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.reps = parse_int(k, v); }},
      {"seed", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); }},
      {"bins", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.bins = parse_int(k, v); }},
      {"output_dir", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }},
      {"workers", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.workers = parse_int(k, v); }},
      {"tol", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.tol = parse_real(k, v); }},
      {"max_sweeps", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.max_sweeps = parse_int(k, v); }},
  };

  for (const auto& [k, v] : values) {
    const auto it = setters.find(k);
    if (it == setters.end()) throw ConfigError("config: unknown key '" + k + "'");
    if (k == "experiment" && v != experiment) {
      throw ConfigError("config: 'experiment' may only be set once");
    }
    it->second(c, k, v);
    c.echo.emplace_back(k, v);
  }
  c.validate();
  return c;
}

models::LinearLambdaModel ExperimentConfig::linear_model() const {
  return {a, m_theta, s_theta * s_theta, m_lambda, s_lambda * s_lambda};
}

models::SingleParamModel ExperimentConfig::single_model(const std::string& transform) const {
  return models::SingleParamModel::from_transform(models::transform_by_name(transform), s * s,
                                                  m_theta, s_theta * s_theta);
}

models::GroundTruth ExperimentConfig::truth() const { return {theta0, lambda0}; }

void ExperimentConfig::validate() const {
  if (n_grid.empty()) throw ConfigError("config: n_grid is empty");
  for (std::size_t i = 0; i < n_grid.size(); ++i) {
    if (n_grid[i] < 1) throw ConfigError("config: n_grid entries must be >= 1");
    if (i > 0 && n_grid[i] <= n_grid[i - 1]) throw ConfigError("config: n_grid must be strictly increasing");
  }
  if (reps < 1) throw ConfigError("config: reps must be >= 1");
  if (bins < 1) throw ConfigError("config: bins must be >= 1");
  if (workers < 0) throw ConfigError("config: workers must be >= 0");
  if (!(tol > 0.0)) throw ConfigError("config: tol must be > 0");
  if (max_sweeps < 1) throw ConfigError("config: max_sweeps must be >= 1");
  if (!(s_theta > 0.0) || !(s_lambda > 0.0) || !(s > 0.0)) {
    throw ConfigError("config: standard deviations must be > 0");
  }
  if (a == 0.0) throw ConfigError("config: a must be nonzero");
  if (experiment == "single-consistency") {
    if (transforms.empty()) throw ConfigError("config: transforms is empty");
    for (const auto& t : transforms) models::transform_by_name(t);
  }
  if (experiment == "nonequivalence" && !(y < 0.0)) {
    throw ConfigError("config: nonequivalence needs y < 0");
  }
  if (output_dir.empty()) throw ConfigError("config: output_dir is empty");
}

// ---------------------------------------------------------------------------
// Records

void ReplicationRecord::validate(double tol) const {
  if (!converged) return;
  std::vector<double> est = {mu_theta, sigma_theta};
  if (variant == "linear") {
    est.push_back(mu_lambda);
    est.push_back(sigma_lambda);
  }
  for (double v : est) {
    if (!std::isfinite(v)) throw InvariantError("record: converged with non-finite estimate");
  }
  if (!(residual_theta <= tol) || !(residual_lambda <= tol)) {
    throw InvariantError("record: converged with residual above tolerance");
  }
}

namespace {

// Newton-step residuals of both block energies at a linear-model state.
std::pair<double, double> linear_residuals(const vl::TransformModel& tm, const DataSample& data,
                                           const models::LinearState& s) {
  const vl::VariationalState v = models::to_variational_state(s);
  const double gt = vl::energy_theta_gradient(tm, data, v.q_theta.mean, v.q_lambda)(0);
  const double ht = vl::energy_theta_hessian(tm, data, v.q_theta.mean, v.q_lambda)(0, 0);
  const double gl = vl::energy_lambda_gradient(tm, data, v.q_lambda.mean, v.q_theta)(0);
  const double hl = vl::energy_lambda_hessian(tm, data, v.q_lambda.mean, v.q_theta)(0, 0);
  return {std::abs(gt / ht), std::abs(gl / hl)};
}

// Shared setup of the linear-model replications: draw data, iterate to the
// fixed point, fill the estimate columns.
struct LinearRun {
  DataSample data;
  models::LinearFit fit;
};

LinearRun linear_replication(const ExperimentConfig& c, const vl::TransformModel& tm,
                             ReplicationRecord& rec) {
  const models::LinearLambdaModel model = c.linear_model();
  const models::GroundTruth truth = c.truth();
  RngStream rng = make_stream(c.seed, c.experiment, rec.n, rec.rep);
  LinearRun run{sample_data(model, truth, rec.n, rng), {}};
  run.fit = models::linear_fixed_point(model, run.data, models::LinearState::from_prior(model), c.tol,
                                       c.max_sweeps);
  const models::LinearState& s = run.fit.state;
  rec.converged = run.fit.converged;
  rec.sweeps = run.fit.sweeps;
  rec.mu_theta = s.mu_theta;
  rec.sigma_theta = s.sigma_theta;
  rec.mu_lambda = s.mu_lambda;
  rec.sigma_lambda = s.sigma_lambda;
  const double root_n = std::sqrt(static_cast<double>(rec.n));
  rec.h_theta = root_n * (s.mu_theta - c.theta0);
  rec.h_lambda = root_n * (s.mu_lambda - c.lambda0);
  const auto [rt, rl] = linear_residuals(tm, run.data, s);
  rec.residual_theta = rt;
  rec.residual_lambda = rl;
  rec.status = run.fit.converged ? "ok" : "not_converged";
  return run;
}

void mark_failed(ReplicationRecord& rec, const std::exception& e) {
  rec.converged = false;
  rec.mu_theta = rec.sigma_theta = rec.mu_lambda = rec.sigma_lambda = kNaN;
  rec.h_theta = rec.h_lambda = kNaN;
  rec.residual_theta = rec.residual_lambda = kNaN;
  std::string msg = e.what();
  std::replace(msg.begin(), msg.end(), ',', ';');
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  rec.status = msg;
}

void finish(ExperimentResult& r, const ExperimentConfig& c, const std::vector<std::string>& quantities) {
  std::stable_sort(r.records.begin(), r.records.end(), [](const auto& a, const auto& b) {
    if (a.variant != b.variant) return a.variant < b.variant;
    if (a.n != b.n) return a.n < b.n;
    return a.rep < b.rep;
  });
  r.total = static_cast<int>(r.records.size());
  r.excluded = 0;
  for (const auto& rec : r.records) {
    if (!rec.converged) ++r.excluded;
    rec.validate(c.tol);
  }
  r.summary = summarize_records(r.records, quantities);
}

std::vector<ReplicationRecord> make_records(const ExperimentConfig& c, const std::string& variant) {
  std::vector<ReplicationRecord> recs;
  for (int n : c.n_grid) {
    for (int rep = 0; rep < c.reps; ++rep) {
      ReplicationRecord r;
      r.experiment = c.experiment;
      r.variant = variant;
      r.n = n;
      r.rep = rep;
      r.sigma_lambda = r.mu_lambda = r.h_lambda = kNaN;
      r.remainder_norm = r.remainder_scaled_norm = r.tv = kNaN;
      r.vl_half_width = r.vl_half_height = r.limit_half_width = r.limit_half_height = kNaN;
      recs.push_back(r);
    }
  }
  return recs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Experiments

ExperimentResult run_single_consistency(const ExperimentConfig& c) {
  if (c.experiment != "single-consistency") throw ConfigError("run_single_consistency: wrong experiment");
  ExperimentResult result;
  result.experiment = c.experiment;
  for (const auto& t : c.transforms) {
    auto recs = make_records(c, t);
    const models::SingleParamModel model = c.single_model(t);
    const std::string tag = c.experiment + "/" + t;
    parallel_for(recs.size(), c.workers, [&](std::size_t i) {
      ReplicationRecord& rec = recs[i];
      try {
        RngStream rng = make_stream(c.seed, tag, rec.n, rec.rep);
        const DataSample data = sample_data(model, c.theta0, rec.n, rng);
        const models::SingleParamFit fit = models::single_param_map(model, data, model.m_theta);
        rec.converged = true;
        rec.sweeps = fit.iterations;
        rec.fallback = fit.used_fallback;
        rec.mu_theta = fit.map;
        rec.sigma_theta = fit.laplace_sd2;
        rec.h_theta = std::sqrt(static_cast<double>(rec.n)) * (fit.map - c.theta0);
        // Newton step length at the point: |gradient| times the Laplace variance.
        rec.residual_theta = std::abs(fit.gradient) * fit.laplace_sd2;
        rec.residual_lambda = 0.0;
        rec.status = fit.used_fallback ? "fallback" : "ok";
        if (!(rec.residual_theta <= c.tol)) {
          rec.converged = false;
          rec.status = "residual";
        }
      } catch (const std::exception& e) {
        mark_failed(rec, e);
      }
    });
    result.records.insert(result.records.end(), recs.begin(), recs.end());
  }
  finish(result, c, {"mu_theta", "abs_err_theta", "h_theta", "sigma_theta"});
  return result;
}

ExperimentResult run_linear_asymptotics(const ExperimentConfig& c) {
  if (c.experiment != "linear-asymptotics") throw ConfigError("run_linear_asymptotics: wrong experiment");
  ExperimentResult result;
  result.experiment = c.experiment;
  auto recs = make_records(c, "linear");
  const vl::TransformModel tm = models::to_transform_model(c.linear_model());
  parallel_for(recs.size(), c.workers, [&](std::size_t i) {
    try {
      linear_replication(c, tm, recs[i]);
    } catch (const std::exception& e) {
      mark_failed(recs[i], e);
    }
  });
  result.records = std::move(recs);
  finish(result, c,
         {"mu_theta", "mu_lambda", "abs_err_theta", "abs_err_lambda", "h_theta", "h_lambda",
          "n_sigma_theta", "n_sigma_lambda"});

  const double var_theta = std::exp(c.lambda0) / (c.a * c.a);
  const double var_lambda = 2.0;
  auto normal_pdf = [](double x, double var) {
    return std::exp(-0.5 * x * x / var) / std::sqrt(2.0 * std::numbers::pi * var);
  };
  for (int n : c.n_grid) {
    std::vector<double> ht, hl;
    for (const auto& r : result.records) {
      if (r.n == n && r.converged) {
        ht.push_back(r.h_theta);
        hl.push_back(r.h_lambda);
      }
    }
    const std::pair<const char*, std::pair<const std::vector<double>*, double>> coords[] = {
        {"h_theta", {&ht, var_theta}}, {"h_lambda", {&hl, var_lambda}}};
    for (const auto& [name, payload] : coords) {
      const auto h = asymptotics::histogram(*payload.first, c.bins);
      for (int b = 0; b < c.bins; ++b) {
        HistogramRow row;
        row.n = n;
        row.coordinate = name;
        row.bin = b;
        row.left = h.edges[b];
        row.right = h.edges[b + 1];
        row.mass = h.mass[b];
        row.density = h.mass[b] / (row.right - row.left);
        row.limit_density = normal_pdf(0.5 * (row.left + row.right), payload.second);
        result.histograms.push_back(row);
      }
    }
  }
  return result;
}

ExperimentResult run_tv_curve(const ExperimentConfig& c) {
  if (c.experiment != "tv-curve") throw ConfigError("run_tv_curve: wrong experiment");
  ExperimentResult result;
  result.experiment = c.experiment;
  asymptotics::TvCurveOptions opts;
  opts.workers = c.workers;
  opts.tol = c.tol;
  opts.max_sweeps = c.max_sweeps;
  opts.stream_tag = c.experiment;
  const models::LinearLambdaModel model = c.linear_model();
  const auto curve = asymptotics::tv_convergence_curve(model, c.truth(), c.n_grid, c.reps, c.seed, opts);
  const vl::TransformModel tm = models::to_transform_model(model);

  auto recs = make_records(c, "linear");
  for (std::size_t i = 0; i < recs.size(); ++i) {
    ReplicationRecord& rec = recs[i];
    const asymptotics::TvRow& row = curve.rows[i];
    rec.converged = row.converged;
    rec.sweeps = row.sweeps;
    rec.status = row.status;
    std::replace(rec.status.begin(), rec.status.end(), ',', ';');
    if (row.status != "ok" && row.status != "not_converged") {
      rec.mu_theta = rec.sigma_theta = rec.h_theta = rec.residual_theta = rec.residual_lambda = kNaN;
      continue;
    }
    const auto& s = row.state;
    rec.mu_theta = s.mu_theta;
    rec.sigma_theta = s.sigma_theta;
    rec.mu_lambda = s.mu_lambda;
    rec.sigma_lambda = s.sigma_lambda;
    rec.h_theta = row.varlap.center(0);
    rec.h_lambda = row.varlap.center(1);
    rec.tv = row.tv;
    rec.vl_half_width = row.varlap.half_width;
    rec.vl_half_height = row.varlap.half_height;
    rec.limit_half_width = row.limit.half_width;
    rec.limit_half_height = row.limit.half_height;
    // Residuals need the data again; regenerate from the same stream.
    RngStream rng = make_stream(c.seed, opts.stream_tag, rec.n, rec.rep);
    const DataSample data = sample_data(model, c.truth(), rec.n, rng);
    const auto [rt, rl] = linear_residuals(tm, data, s);
    rec.residual_theta = rt;
    rec.residual_lambda = rl;
  }
  result.records = std::move(recs);
  finish(result, c, {"tv", "n_sigma_theta", "n_sigma_lambda", "half_width_gap", "half_height_gap"});
  return result;
}

ExperimentResult run_remainder_decay(const ExperimentConfig& c) {
  if (c.experiment != "remainder-decay") throw ConfigError("run_remainder_decay: wrong experiment");
  ExperimentResult result;
  result.experiment = c.experiment;
  auto recs = make_records(c, "linear");
  const vl::TransformModel tm = models::to_transform_model(c.linear_model());
  parallel_for(recs.size(), c.workers, [&](std::size_t i) {
    ReplicationRecord& rec = recs[i];
    try {
      const LinearRun run = linear_replication(c, tm, rec);
      const vl::Remainder rem =
          vl::remainder_diagnostic(tm, run.data, models::to_variational_state(run.fit.state));
      rec.remainder_norm = rem.r.norm();
      rec.remainder_scaled_norm = rem.r_scaled.norm();
    } catch (const std::exception& e) {
      mark_failed(rec, e);
    }
  });
  result.records = std::move(recs);
  finish(result, c, {"remainder_norm", "remainder_scaled_norm", "mu_theta", "mu_lambda"});
  return result;
}

NonequivalenceReport nonequivalence_report(double y, double m, double s2) {
  NonequivalenceReport r;
  r.y = y;
  r.m = m;
  r.s2 = s2;
  const models::SingleParamModel model = models::exp_model(m, s2);
  const DataSample data({y});
  const models::SingleParamFit fit = models::single_param_map(model, data, m);
  r.map = fit.map;
  r.laplace_sd2 = fit.laplace_sd2;
  r.map_gradient = models::exp_model_log_joint_gradient(y, m, s2, fit.map);
  const auto g = models::exp_model_elbo_gradient(y, m, s2, r.map, r.laplace_sd2);
  r.elbo_grad_mu = g[0];
  r.elbo_grad_sigma2 = g[1];
  r.elbo_grad_norm = std::hypot(g[0], g[1]);

  const auto density = asymptotics::exp_model_density(y, m, s2);
  const auto oracle =
      asymptotics::elbo_oracle_fit(density, GaussianParams::scalar(r.map, r.laplace_sd2));
  r.oracle_mu = oracle.q.mean(0);
  r.oracle_sigma2 = oracle.q.cov(0, 0);
  r.oracle_grad_norm = oracle.gradient_norm;
  r.oracle_converged = oracle.converged;
  const double k = models::exp_model_elbo_constant(y, s2);
  r.elbo_at_laplace = models::exp_model_elbo(y, m, s2, r.map, r.laplace_sd2) + k;
  r.elbo_at_oracle = models::exp_model_elbo(y, m, s2, r.oracle_mu, r.oracle_sigma2) + k;
  r.mu_gap = std::abs(r.oracle_mu - r.map);
  r.certified = r.elbo_grad_norm > 1e-3 && r.mu_gap > 1e-3 && r.oracle_converged;
  return r;
}

ExperimentResult run_nonequivalence(const ExperimentConfig& c) {
  if (c.experiment != "nonequivalence") throw ConfigError("run_nonequivalence: wrong experiment");
  if (!(c.y < 0.0)) throw ConfigError("nonequivalence needs y < 0");
  ExperimentResult result;
  result.experiment = c.experiment;
  result.nonequivalence = nonequivalence_report(c.y, c.m_theta, c.s_theta * c.s_theta);
  result.total = 1;
  result.excluded = result.nonequivalence->oracle_converged ? 0 : 1;
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& c) {
  if (c.experiment == "single-consistency") return run_single_consistency(c);
  if (c.experiment == "linear-asymptotics") return run_linear_asymptotics(c);
  if (c.experiment == "tv-curve") return run_tv_curve(c);
  if (c.experiment == "remainder-decay") return run_remainder_decay(c);
  if (c.experiment == "nonequivalence") return run_nonequivalence(c);
  throw ConfigError("unknown experiment '" + c.experiment + "'");
}

// ---------------------------------------------------------------------------
// Summaries

double record_quantity(const ReplicationRecord& r, const std::string& q) {
  const double n = r.n;
  if (q == "mu_theta") return r.mu_theta;
  if (q == "mu_lambda") return r.mu_lambda;
  if (q == "sigma_theta") return r.sigma_theta;
  if (q == "sigma_lambda") return r.sigma_lambda;
  if (q == "h_theta") return r.h_theta;
  if (q == "h_lambda") return r.h_lambda;
  if (q == "abs_err_theta") return std::abs(r.h_theta) / std::sqrt(n);
  if (q == "abs_err_lambda") return std::abs(r.h_lambda) / std::sqrt(n);
  if (q == "n_sigma_theta") return n * r.sigma_theta;
  if (q == "n_sigma_lambda") return n * r.sigma_lambda;
  if (q == "tv") return r.tv;
  if (q == "half_width_gap") return std::abs(r.vl_half_width - r.limit_half_width);
  if (q == "half_height_gap") return std::abs(r.vl_half_height - r.limit_half_height);
  if (q == "remainder_norm") return r.remainder_norm;
  if (q == "remainder_scaled_norm") return r.remainder_scaled_norm;
  throw InvariantError("unknown summary quantity '" + q + "'");
}

std::vector<SummaryRow> summarize_records(const std::vector<ReplicationRecord>& records,
                                          const std::vector<std::string>& quantities) {
  std::vector<std::pair<std::string, int>> groups;
  for (const auto& r : records) {
    const std::pair<std::string, int> key{r.variant, r.n};
    if (std::find(groups.begin(), groups.end(), key) == groups.end()) groups.push_back(key);
  }
  std::vector<SummaryRow> out;
  for (const auto& [variant, n] : groups) {
    for (const auto& q : quantities) {
      SummaryRow row;
      row.variant = variant;
      row.n = n;
      row.quantity = q;
      std::vector<double> vals;
      for (const auto& r : records) {
        if (r.variant != variant || r.n != n) continue;
        ++row.total;
        if (r.converged) vals.push_back(record_quantity(r, q));
      }
      row.converged = static_cast<int>(vals.size());
      row.excluded = row.total - row.converged;
      if (vals.empty()) {
        row.min = row.q1 = row.median = row.q3 = row.max = row.mean = row.variance = kNaN;
      } else {
        row.min = *std::min_element(vals.begin(), vals.end());
        row.max = *std::max_element(vals.begin(), vals.end());
        row.q1 = asymptotics::quantile(vals, 0.25);
        row.median = asymptotics::quantile(vals, 0.5);
        row.q3 = asymptotics::quantile(vals, 0.75);
        double sum = 0.0;
        for (double v : vals) sum += v;
        row.mean = sum / vals.size();
        double ss = 0.0;
        for (double v : vals) ss += (v - row.mean) * (v - row.mean);
        row.variance = vals.size() > 1 ? ss / (vals.size() - 1) : 0.0;
      }
      out.push_back(row);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Output

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string csv_preamble() {
  return "# schema_version=" + std::to_string(kSchemaVersion) + " rng=" + kRngAlgorithm + "\n";
}

}  // namespace

std::string raw_csv(const std::vector<ReplicationRecord>& records) {
  std::ostringstream os;
  os << csv_preamble();
  os << "schema_version,experiment,variant,n,rep,converged,sweeps,mu_theta,sigma_theta,mu_lambda,"
        "sigma_lambda,h_theta,h_lambda,residual_theta,residual_lambda,remainder_norm,"
        "remainder_scaled_norm,tv,vl_half_width,vl_half_height,limit_half_width,limit_half_height,"
        "fallback,status\n";
  for (const auto& r : records) {
    os << kSchemaVersion << ',' << r.experiment << ',' << r.variant << ',' << r.n << ',' << r.rep << ','
       << (r.converged ? 1 : 0) << ',' << r.sweeps;
    for (double v : {r.mu_theta, r.sigma_theta, r.mu_lambda, r.sigma_lambda, r.h_theta, r.h_lambda,
                     r.residual_theta, r.residual_lambda, r.remainder_norm, r.remainder_scaled_norm,
                     r.tv, r.vl_half_width, r.vl_half_height, r.limit_half_width,
                     r.limit_half_height}) {
      os << ',' << format_double(v);
    }
    os << ',' << (r.fallback ? 1 : 0) << ',' << r.status << '\n';
  }
  return os.str();
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << csv_preamble();
  os << "schema_version,variant,n,quantity,total,converged,excluded,min,q1,median,q3,max,mean,variance\n";
  for (const auto& r : rows) {
    os << kSchemaVersion << ',' << r.variant << ',' << r.n << ',' << r.quantity << ',' << r.total << ','
       << r.converged << ',' << r.excluded;
    for (double v : {r.min, r.q1, r.median, r.q3, r.max, r.mean, r.variance}) os << ',' << format_double(v);
    os << '\n';
  }
  return os.str();
}

std::string histograms_csv(const std::vector<HistogramRow>& rows) {
  std::ostringstream os;
  os << csv_preamble();
  os << "schema_version,n,coordinate,bin,left,right,center,mass,density,limit_density\n";
  for (const auto& r : rows) {
    os << kSchemaVersion << ',' << r.n << ',' << r.coordinate << ',' << r.bin;
    for (double v : {r.left, r.right, 0.5 * (r.left + r.right), r.mass, r.density, r.limit_density}) {
      os << ',' << format_double(v);
    }
    os << '\n';
  }
  return os.str();
}

std::string meta_text(const ExperimentConfig& c, const ExperimentResult& r) {
  std::ostringstream os;
  os << "schema_version=" << kSchemaVersion << '\n';
  os << "rng=" << kRngAlgorithm << '\n';
  os << "rng_stream_key=splitmix64(seed; fnv1a64(tag); n; rep)\n";
  os << "initialization=prior means and variances\n";
  os << "experiment=" << c.experiment << '\n';
  os << "a=" << format_double(c.a) << '\n';
  os << "m_theta=" << format_double(c.m_theta) << '\n';
  os << "s_theta=" << format_double(c.s_theta) << '\n';
  os << "m_lambda=" << format_double(c.m_lambda) << '\n';
  os << "s_lambda=" << format_double(c.s_lambda) << '\n';
  os << "s=" << format_double(c.s) << '\n';
  os << "transforms=" << join(c.transforms) << '\n';
  os << "theta0=" << format_double(c.theta0) << '\n';
  os << "lambda0=" << format_double(c.lambda0) << '\n';
  os << "y=" << format_double(c.y) << '\n';
  os << "n_grid=" << join(c.n_grid) << '\n';
  os << "reps=" << c.reps << '\n';
  os << "seed=" << c.seed << '\n';
  os << "bins=" << c.bins << '\n';
  os << "output_dir=" << c.output_dir << '\n';
  os << "workers=" << c.workers << '\n';
  os << "tol=" << format_double(c.tol) << '\n';
  os << "max_sweeps=" << c.max_sweeps << '\n';
  for (const auto& [k, v] : c.echo) os << "set." << k << '=' << v << '\n';
  os << "rows_total=" << r.total << '\n';
  os << "rows_converged=" << r.total - r.excluded << '\n';
  os << "rows_excluded=" << r.excluded << '\n';
  os << "exclusion_rate=" << format_double(r.exclusion_rate()) << '\n';
  os << "exclusion_budget=" << format_double(kExclusionBudget) << '\n';
  return os.str();
}

std::string nonequivalence_text(const NonequivalenceReport& r) {
  std::ostringstream os;
  os << "# exp model y ~ N(exp(theta), 1), theta ~ N(m, s2)\n";
  os << "y=" << format_double(r.y) << '\n';
  os << "m=" << format_double(r.m) << '\n';
  os << "s2=" << format_double(r.s2) << '\n';
  os << "map=" << format_double(r.map) << '\n';
  os << "map_log_joint_gradient=" << format_double(r.map_gradient) << '\n';
  os << "laplace_sd2=" << format_double(r.laplace_sd2) << '\n';
  os << "elbo_grad_mu=" << format_double(r.elbo_grad_mu) << '\n';
  os << "elbo_grad_sigma2=" << format_double(r.elbo_grad_sigma2) << '\n';
  os << "elbo_grad_norm=" << format_double(r.elbo_grad_norm) << '\n';
  os << "oracle_mu=" << format_double(r.oracle_mu) << '\n';
  os << "oracle_sigma2=" << format_double(r.oracle_sigma2) << '\n';
  os << "oracle_grad_norm=" << format_double(r.oracle_grad_norm) << '\n';
  os << "oracle_converged=" << (r.oracle_converged ? 1 : 0) << '\n';
  os << "elbo_at_laplace=" << format_double(r.elbo_at_laplace) << '\n';
  os << "elbo_at_oracle=" << format_double(r.elbo_at_oracle) << '\n';
  os << "mu_gap=" << format_double(r.mu_gap) << '\n';
  os << "gradient_margin=" << format_double(r.elbo_grad_norm - 1e-3) << '\n';
  os << "mu_gap_margin=" << format_double(r.mu_gap - 1e-3) << '\n';
  os << "certified=" << (r.certified ? 1 : 0) << '\n';
  return os.str();
}

std::filesystem::path write_outputs(const ExperimentConfig& c, const ExperimentResult& r) {
  const std::filesystem::path dir = std::filesystem::path(c.output_dir) / c.experiment;
  std::filesystem::create_directories(dir);
  auto write = [&dir](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << text;
  };
  if (r.nonequivalence) {
    write("report.txt", nonequivalence_text(*r.nonequivalence));
  } else {
    write("raw.csv", raw_csv(r.records));
    write("summary.csv", summary_csv(r.summary));
    if (!r.histograms.empty()) write("histograms.csv", histograms_csv(r.histograms));
  }
  write("meta.txt", meta_text(c, r));
  return dir;
}

}  // namespace varlap::harness

namespace varlap::harness {

Matrix random_spd(int d, RngStream& rng) {
  Matrix a(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
  }
  Matrix s = a * a.transpose() / d + 1e-3 * Matrix::Identity(d, d);
  return symmetrized(s);
}

UnderdispersionReport underdispersion_check(int cases, std::uint64_t seed) {
  UnderdispersionReport rep;
  rep.cases = cases;
  rep.min_margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < cases; ++i) {
    const int d = 2 + i % 4;
    RngStream rng = make_stream(seed, "underdispersion", static_cast<std::uint64_t>(d),
                                static_cast<std::uint64_t>(i));
    Vector mean(d);
    for (int j = 0; j < d; ++j) mean(j) = rng.normal();
    const GaussianParams target(mean, random_spd(d, rng));
    const GaussianParams diag = best_diagonal_approx(target);
    const double margin = gaussian_entropy(target) - gaussian_entropy(diag);
    rep.min_margin = std::min(rep.min_margin, margin);
    rep.max_det_ratio =
        std::max(rep.max_det_ratio, std::exp(log_det_spd(diag.cov) - log_det_spd(target.cov)));
    if (margin < -1e-12) ++rep.violations;
  }
  return rep;
}

std::vector<OracleGapRow> oracle_gap_table(const models::LinearLambdaModel& model,
                                           const models::GroundTruth& truth,
                                           const std::vector<int>& n_grid, std::uint64_t seed) {
  std::vector<OracleGapRow> rows;
  for (int n : n_grid) {
    RngStream rng = make_stream(seed, "oracle-gap", static_cast<std::uint64_t>(n), 0);
    const DataSample data = sample_data(model, truth, n, rng);
    const auto fit = models::linear_fixed_point(model, data, models::LinearState::from_prior(model));
    const auto& s = fit.state;
    Vector mean(2), var(2);
    mean << s.mu_theta, s.mu_lambda;
    var << s.sigma_theta, s.sigma_lambda;
    const GaussianParams q = GaussianParams::diagonal(mean, var);
    const auto density = asymptotics::log_joint_density(model, data);
    const auto at_vl = asymptotics::elbo_quadrature(density, q);
    const auto oracle = asymptotics::elbo_oracle_fit(density, q);
    OracleGapRow row;
    row.n = n;
    row.elbo_varlap = at_vl.value;
    row.elbo_oracle = oracle.elbo;
    row.gap = oracle.elbo - at_vl.value;
    row.gap_per_n = row.gap / n;
    row.oracle_grad_norm = oracle.gradient_norm;
    row.quadrature_flagged = at_vl.order_flagged;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace varlap::harness
