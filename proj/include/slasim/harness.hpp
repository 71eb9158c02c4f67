#pragma once

#include <string>
#include <vector>

#include "slasim/casformer.hpp"
#include "slasim/decompose.hpp"
#include "slasim/env.hpp"

namespace slasim {

struct ExperimentConfig {
  std::size_t n_domains = 3;
  std::size_t t_steps = 200;
  double budget_lo = 90.0;
  double budget_hi = 110.0;
  std::size_t buffer_capacity = 100;
  std::size_t warmup_probes = 50;
  int ogd_steps = 5;
  double ogd_lr = 0.01;
  std::size_t heuristic_samples = 10000;
  std::size_t refine_iters = 50;
  double refine_step = 0.5;
  std::size_t num_layers = 2;
  std::size_t hidden_size = 16;
  std::size_t num_heads = 2;
  std::size_t mlp_size = 64;
  std::size_t offline_epochs = 3;
  double student_lr = 0.01;
  double opt_grid_step = 1.0;  // widened to >= 2 ms when N >= 4
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<double> corruption_rates = {0.0, 0.1, 0.2, 0.3};
  std::vector<int> ogd_sweep = {1, 5, 20, 50};
  std::vector<std::size_t> domain_counts = {2, 3, 4};
  std::string out_dir = "out";

  // Throws a structured error naming the offending key.
  void validate() const;
};

// key = value text file with the ExperimentConfig keys; '#' comments.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config(const std::string& text);
std::string resolved_config_text(const ExperimentConfig& cfg);

struct StepRecord {
  std::uint64_t seed = 0;
  long t = 0;
  std::string method;
  double tau_e2e = 0.0;
  Assignment assignment;
  double p_e2e = 0.0;
  long long latency_ns = 0;
  std::string param;  // experiment sweep value ("default" when none)
};

struct SummaryRow {
  std::string experiment;
  std::string method;
  std::string param;
  double mean_acceptance = 0.0;
  double std_acceptance = 0.0;
  double mean_latency_ns = 0.0;
  double median_latency_ns = 0.0;  // reported in report.json only; the
                                   // summary.csv column set is fixed
};

struct Report {
  std::string experiment;
  std::size_t max_domains = 0;  // column count for steps.csv
  std::vector<StepRecord> steps;
  std::vector<SummaryRow> summary;
  // per-seed student online KL histories (filled by experiments that train)
  std::vector<std::vector<double>> training_losses;
};

// Aggregates steps into summary rows: per (method, param), the mean over
// seeds of per-seed mean p_e2e, the sample std of those per-seed means, and
// the mean latency over all steps.
std::vector<SummaryRow> summarize(const std::string& experiment,
                                  const std::vector<StepRecord>& steps);

// The four studies. Each trains teacher+student per seed on a training
// trace, then evaluates on a fresh testing trace.
Report run_longterm(const ExperimentConfig& cfg);
Report run_corruption(const ExperimentConfig& cfg);
Report run_overfit(const ExperimentConfig& cfg);
Report run_scalability(const ExperimentConfig& cfg);

// Writes steps.csv + summary.csv (csv) or report.json (json) under out_dir,
// plus config.resolved. format must be "csv" or "json".
void emit_report(const Report& report, const ExperimentConfig& cfg,
                 const std::string& format);

// Independent recursive brute-force enumerator over the same grid as
// opt_decompose; used as the oracle in tests and the selftest suite.
Assignment reference_brute_force(const Environment& env, long t,
                                 double tau_e2e, double grid_step);

// Gradient-check plus oracle-equivalence suite. Prints one line per check;
// returns the number of failures.
int selftest();

// CLI entry point: subcommands longterm, corruption, overfit, scalability,
// validate-config, selftest.
int cli_main(const std::vector<std::string>& args);

}  // namespace slasim
