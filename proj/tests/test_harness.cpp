#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "varlap/errors.hpp"
#include "varlap/harness.hpp"
#include "varlap/parallel.hpp"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace varlap;
using namespace varlap::harness;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("varlap_harness_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("key-value parsing") {
  const auto kv = parse_key_values("# comment\nexperiment = linear-asymptotics\n\n reps=3 # trailing\nreps = 4\n");
  REQUIRE(kv.size() == 3);
  CHECK(kv[0].first == "experiment");
  CHECK(kv[0].second == "linear-asymptotics");
  CHECK(kv[1].second == "3");
  CHECK_THROWS_AS(parse_key_values("no equals sign\n"), ConfigError);
  CHECK_THROWS_AS(parse_key_values("= value\n"), ConfigError);
  CHECK(parse_override("seed=5").second == "5");
  CHECK_THROWS_AS(parse_override("seed"), ConfigError);
  CHECK_THROWS_AS(load_key_values("/nonexistent/varlap.cfg"), ConfigError);
}

TEST_CASE("make_config") {
  const auto c = make_config({{"experiment", "linear-asymptotics"}, {"reps", "3"}, {"reps", "7"}, {"n_grid", "10, 20"}});
  CHECK(c.reps == 7);
  CHECK(c.n_grid == std::vector<int>{10, 20});
  CHECK(c.linear_model().a == 3.0);
  CHECK(c.echo.size() == 4);

  CHECK_THROWS_AS(make_config({{"experiment", "linear-asymptotics"}, {"colour", "red"}}), ConfigError);
  CHECK_THROWS_AS(make_config({{"experiment", "linear-asymptotics"}, {"reps", "many"}}), ConfigError);
  CHECK_THROWS_AS(make_config({{"experiment", "linear-asymptotics"}, {"reps", "0"}}), ConfigError);
  CHECK_THROWS_AS(make_config({{"experiment", "bogus"}}), ConfigError);
  CHECK_THROWS_AS(make_config({{"reps", "4"}}), ConfigError);
  CHECK_THROWS_AS(make_config({{"experiment", "single-consistency"}, {"transforms", "exp,sine"}}), ConfigError);
  CHECK_THROWS_AS(make_config({{"experiment", "linear-asymptotics"}, {"s_theta", "0"}}), ConfigError);

  const auto s = make_config({{"experiment", "single-consistency"}, {"s_theta", "10"}});
  CHECK(s.single_model("exp").s2_theta == doctest::Approx(100.0));
  CHECK(default_config("single-consistency").transforms.size() == 3);
  CHECK(experiment_tags().size() == 5);
}

TEST_CASE("sample_data is a pure function of its key") {
  const auto m = models::SingleParamModel::from_transform(models::transform_by_name("exp"), 1.0, 10, 100);
  RngStream a = make_stream(3, "tag", 50, 2);
  RngStream b = make_stream(3, "tag", 50, 2);
  RngStream c = make_stream(3, "tag", 50, 3);
  const auto da = sample_data(m, 1.0, 50, a);
  const auto db = sample_data(m, 1.0, 50, b);
  const auto dc = sample_data(m, 1.0, 50, c);
  CHECK(da.y() == db.y());
  CHECK(da.y() != dc.y());

  auto zero = m;
  zero.s2 = 0.0;
  RngStream z = make_stream(3, "tag", 5, 0);
  const auto dz = sample_data(zero, 1.0, 5, z);
  for (double y : dz.y()) CHECK(y == std::exp(1.0));

  RngStream u = make_stream(4, "normal", 0, 0);
  double sum = 0, sum2 = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const double x = u.normal();
    sum += x;
    sum2 += x * x;
  }
  CHECK(std::abs(sum / draws) < 0.02);
  CHECK(sum2 / draws == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("parallel_for") {
  std::vector<int> out(100);
  parallel_for(100, 4, [&](std::size_t i) { out[i] = static_cast<int>(i * i); });
  for (int i = 0; i < 100; ++i) CHECK(out[i] == i * i);
  CHECK_THROWS_WITH(parallel_for(50, 4, [](std::size_t i) {
                      if (i == 7 || i == 30) throw std::runtime_error("idx " + std::to_string(i));
                    }),
                    "idx 7");
  CHECK(resolve_workers(0) >= 1);
  CHECK(resolve_workers(3) == 3);
}

TEST_CASE("linear-asymptotics run: records, summary, histograms, determinism") {
  auto cfg = make_config({{"experiment", "linear-asymptotics"}, {"n_grid", "50,200"}, {"reps", "12"}, {"seed", "5"}, {"workers", "1"}});
  const auto r1 = run_experiment(cfg);
  cfg.workers = 4;
  const auto r4 = run_experiment(cfg);
  CHECK(raw_csv(r1.records) == raw_csv(r4.records));
  CHECK(summary_csv(r1.summary) == summary_csv(r4.summary));

  REQUIRE(r1.records.size() == 24);
  CHECK(r1.total == 24);
  int converged = 0;
  for (const auto& rec : r1.records) {
    if (rec.converged) ++converged;
    CHECK_NOTHROW(rec.validate(cfg.tol));
  }
  CHECK(converged + r1.excluded == r1.total);
  CHECK(r1.within_budget());
  CHECK(r1.records[0].n == 50);
  CHECK(r1.records[0].rep == 0);
  CHECK(r1.records[11].rep == 11);

  // summary recomputes from raw
  const auto again = summarize_records(r1.records, {"mu_theta", "h_lambda"});
  for (const auto& row : again) {
    bool found = false;
    for (const auto& s : r1.summary) {
      if (s.variant == row.variant && s.n == row.n && s.quantity == row.quantity) {
        found = true;
        CHECK(s.median == row.median);
        CHECK(s.variance == row.variance);
        CHECK(s.total == s.converged + s.excluded);
      }
    }
    CHECK(found);
  }

  // histogram masses per (n, coordinate)
  std::map<std::pair<int, std::string>, double> mass;
  for (const auto& h : r1.histograms) mass[{h.n, h.coordinate}] += h.mass;
  CHECK_FALSE(mass.empty());
  for (const auto& [k, v] : mass) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

  const std::string raw = raw_csv(r1.records);
  CHECK(raw.rfind("# schema_version=1 rng=" + std::string(kRngAlgorithm), 0) == 0);
}

TEST_CASE("single-consistency run") {
  const auto cfg = make_config({{"experiment", "single-consistency"}, {"n_grid", "10,100"}, {"reps", "20"}, {"seed", "2"}});
  const auto r = run_experiment(cfg);
  CHECK(r.records.size() == 3 * 2 * 20);
  CHECK(r.records.front().variant <= r.records.back().variant);
  for (const auto& rec : r.records) {
    if (rec.converged) CHECK_NOTHROW(rec.validate(cfg.tol));
    CHECK(std::isnan(rec.mu_lambda));
  }
  CHECK(r.within_budget());
}

TEST_CASE("nonequivalence report") {
  for (double y : {-1.0, -5.0}) {
    const auto rep = nonequivalence_report(y, 0.0, 1.0);
    CHECK(std::abs(rep.map_gradient) <= 1e-8);
    CHECK(rep.elbo_grad_norm > 1e-3);
    CHECK(std::abs(rep.mu_gap) > 1e-3);
    CHECK(rep.oracle_converged);
    CHECK(rep.elbo_at_oracle >= rep.elbo_at_laplace);
    CHECK(rep.certified);
  }
  CHECK_THROWS_AS(make_config({{"experiment", "nonequivalence"}, {"y", "0.5"}}), ConfigError);
  const auto r = run_experiment(make_config({{"experiment", "nonequivalence"}}));
  REQUIRE(r.nonequivalence.has_value());
  CHECK(nonequivalence_text(*r.nonequivalence).find("certified") != std::string::npos);
}

TEST_CASE("format_double and write_outputs") {
  CHECK(format_double(std::nan("")) == "nan");
  CHECK(std::stod(format_double(0.1)) == 0.1);
  CHECK(format_double(1.0 / 3.0) == "0.33333333333333331");

  const auto dir = temp_dir("write");
  auto cfg = make_config({{"experiment", "remainder-decay"}, {"n_grid", "100,1000"}, {"reps", "3"},
                          {"output_dir", dir.string()}});
  const auto res = run_experiment(cfg);
  const auto out = write_outputs(cfg, res);
  CHECK(out == dir / "remainder-decay");
  CHECK(slurp(out / "raw.csv") == raw_csv(res.records));
  CHECK(std::filesystem::exists(out / "summary.csv"));
  const auto meta = slurp(out / "meta.txt");
  CHECK(meta.find("schema_version=1") != std::string::npos);
  CHECK(meta.find("n_grid") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("diagnostics") {
  const auto u = underdispersion_check(200, 1);
  CHECK(u.cases == 200);
  CHECK(u.violations == 0);
  CHECK(u.min_margin >= -1e-12);
  CHECK(u.max_det_ratio <= 1 + 1e-12);

  const auto rows = oracle_gap_table({3, 1, 1, 1, 1}, {2.0, 2.0}, {10, 100}, 1);
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.gap >= -1e-9);
    CHECK(r.gap_per_n == doctest::Approx(r.gap / r.n));
  }
}
