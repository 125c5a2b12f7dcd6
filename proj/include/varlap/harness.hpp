#pragma once

// Seeded replication engine for the simulation experiments and its CSV output.
//
// Outputs under <output_dir>/<experiment>/:
//   raw.csv         one row per (variant, n, rep)
//   summary.csv     boxplot statistics per (variant, n, quantity)
//   histograms.csv  linear-asymptotics only
//   report.txt      nonequivalence only
//   meta.txt        config echo, RNG algorithm, schema version, initialization

#include "varlap/asymptotics.hpp"
#include "varlap/models.hpp"
#include "varlap/random.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace varlap::harness {

inline constexpr int kSchemaVersion = 1;
inline constexpr double kExclusionBudget = 0.02;

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Flat `key = value` lines; `#` starts a comment. Throws ConfigError.
KeyValues parse_key_values(const std::string& text);
KeyValues load_key_values(const std::filesystem::path& path);
/// `key=value`.
std::pair<std::string, std::string> parse_override(const std::string& text);

const std::vector<std::string>& experiment_tags();

struct ExperimentConfig {
  std::string experiment;
  // model parameters; standard deviations
  double a = 3.0;
  double m_theta = 1.0;
  double s_theta = 1.0;
  double m_lambda = 1.0;
  double s_lambda = 1.0;
  double s = 1.0;
  std::vector<std::string> transforms;
  // truth
  double theta0 = 2.0;
  double lambda0 = 2.0;
  double y = -1.0;  // nonequivalence observation
  std::vector<int> n_grid;
  int reps = 1;
  std::uint64_t seed = 0;
  int bins = 40;
  std::string output_dir = "results";
  int workers = 0;
  double tol = 1e-10;
  int max_sweeps = 500;

  /// Every key that was set, in application order, for meta.txt.
  KeyValues echo;

  models::LinearLambdaModel linear_model() const;
  models::SingleParamModel single_model(const std::string& transform) const;
  models::GroundTruth truth() const;
  void validate() const;
};

/// Experiment-specific defaults.
ExperimentConfig default_config(const std::string& experiment);

/// Applies `values` (last writer wins) on top of the defaults of the
/// `experiment` key. Unknown keys and malformed values throw ConfigError.
ExperimentConfig make_config(const KeyValues& values);

struct ReplicationRecord {
  std::string experiment;
  std::string variant;  // transform name, or "linear"
  int n = 0;
  int rep = 0;
  bool converged = false;
  int sweeps = 0;
  double mu_theta = 0.0;
  double sigma_theta = 0.0;
  double mu_lambda = 0.0;
  double sigma_lambda = 0.0;
  double h_theta = 0.0;
  double h_lambda = 0.0;
  /// Length of the Newton step each block energy would still take.
  double residual_theta = 0.0;
  double residual_lambda = 0.0;
  double remainder_norm = 0.0;
  double remainder_scaled_norm = 0.0;
  double tv = 0.0;
  double vl_half_width = 0.0;
  double vl_half_height = 0.0;
  double limit_half_width = 0.0;
  double limit_half_height = 0.0;
  bool fallback = false;
  std::string status = "ok";

  /// Throws InvariantError if a converged record has a residual above `tol`
  /// or non-finite estimates.
  void validate(double tol) const;
};

struct SummaryRow {
  std::string variant;
  int n = 0;
  std::string quantity;
  int total = 0;
  int converged = 0;
  int excluded = 0;
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double variance = 0.0;  // unbiased
};

struct HistogramRow {
  int n = 0;
  std::string coordinate;
  int bin = 0;
  double left = 0.0;
  double right = 0.0;
  double mass = 0.0;
  double density = 0.0;
  double limit_density = 0.0;
};

struct NonequivalenceReport {
  double y = 0.0;
  double m = 0.0;
  double s2 = 0.0;
  double map = 0.0;
  double laplace_sd2 = 0.0;
  double map_gradient = 0.0;
  double elbo_grad_mu = 0.0;
  double elbo_grad_sigma2 = 0.0;
  double elbo_grad_norm = 0.0;
  double oracle_mu = 0.0;
  double oracle_sigma2 = 0.0;
  double oracle_grad_norm = 0.0;
  double elbo_at_laplace = 0.0;
  double elbo_at_oracle = 0.0;
  double mu_gap = 0.0;
  bool oracle_converged = false;
  bool certified = false;
};

struct ExperimentResult {
  std::string experiment;
  std::vector<ReplicationRecord> records;  // sorted by (variant, n, rep)
  std::vector<SummaryRow> summary;
  std::vector<HistogramRow> histograms;
  std::optional<NonequivalenceReport> nonequivalence;
  int total = 0;
  int excluded = 0;

  double exclusion_rate() const { return total == 0 ? 0.0 : static_cast<double>(excluded) / total; }
  bool within_budget() const { return exclusion_rate() <= kExclusionBudget; }
};

ExperimentResult run_single_consistency(const ExperimentConfig& config);
ExperimentResult run_linear_asymptotics(const ExperimentConfig& config);
ExperimentResult run_tv_curve(const ExperimentConfig& config);
ExperimentResult run_remainder_decay(const ExperimentConfig& config);
ExperimentResult run_nonequivalence(const ExperimentConfig& config);

/// Dispatches on config.experiment.
ExperimentResult run_experiment(const ExperimentConfig& config);

NonequivalenceReport nonequivalence_report(double y, double m, double s2);

/// Summary rows for `quantity` computed from converged records.
std::vector<SummaryRow> summarize_records(const std::vector<ReplicationRecord>& records,
                                          const std::vector<std::string>& quantities);
double record_quantity(const ReplicationRecord& r, const std::string& quantity);

std::string format_double(double v);
std::string raw_csv(const std::vector<ReplicationRecord>& records);
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::string histograms_csv(const std::vector<HistogramRow>& rows);
std::string meta_text(const ExperimentConfig& config, const ExperimentResult& result);
std::string nonequivalence_text(const NonequivalenceReport& r);

// ---------------------------------------------------------------------------
// Diagnostics

/// Random SPD matrix A A^T / d + 1e-3 I with standard-normal A.
Matrix random_spd(int d, RngStream& rng);

struct UnderdispersionReport {
  int cases = 0;
  int violations = 0;
  double min_margin = 0.0;  // min over cases of H[target] - H[diagonal]
  double max_det_ratio = 0.0;  // max det(diagonal) / det(target)
};

/// Entropy of best_diagonal_approx against the target for random SPD targets
/// with d cycling through 2..5.
UnderdispersionReport underdispersion_check(int cases, std::uint64_t seed);

struct OracleGapRow {
  int n = 0;
  double elbo_varlap = 0.0;
  double elbo_oracle = 0.0;
  double gap = 0.0;
  double gap_per_n = 0.0;
  double oracle_grad_norm = 0.0;
  bool quadrature_flagged = false;
};

/// Exact-ELBO gap between the quadrature oracle and the variational Laplace
/// fixed point on the linear model, one sample per n.
std::vector<OracleGapRow> oracle_gap_table(const models::LinearLambdaModel& model,
                                           const models::GroundTruth& truth,
                                           const std::vector<int>& n_grid, std::uint64_t seed);

/// Writes every applicable file and returns the experiment directory.
std::filesystem::path write_outputs(const ExperimentConfig& config, const ExperimentResult& result);

}  // namespace varlap::harness
