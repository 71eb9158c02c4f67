#include "slasim/harness.hpp"

#include <cstdio>
#include <filesystem>
#include <functional>

#include "CLI11.hpp"

namespace slasim {

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::string format = "both";  // csv | json | both
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--config", opts.config_path,
                  "key = value config file (defaults used when omitted)");
  sub->add_option("--out", opts.out_dir, "output directory");
  sub->add_option("--format", opts.format, "csv, json, or both")
      ->check(CLI::IsMember({"csv", "json", "both"}));
  sub->add_option("--seed", opts.seed, "run a single seed instead of the list")
      ->each([&](const std::string&) { opts.seed_set = true; });
}

ExperimentConfig resolve(const CommonOpts& opts) {
  ExperimentConfig cfg;
  if (!opts.config_path.empty()) cfg = load_config(opts.config_path);
  if (opts.seed_set) cfg.seeds = {opts.seed};
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  cfg.validate();
  return cfg;
}

int run_experiment(const CommonOpts& opts,
                   const std::function<Report(const ExperimentConfig&)>& fn) {
  ExperimentConfig cfg = resolve(opts);
  Report report = fn(cfg);
  if (opts.format == "csv" || opts.format == "both")
    emit_report(report, cfg, "csv");
  if (opts.format == "json" || opts.format == "both")
    emit_report(report, cfg, "json");
  std::printf("%s: %zu step records, %zu summary rows -> %s\n",
              report.experiment.c_str(), report.steps.size(),
              report.summary.size(), cfg.out_dir.c_str());
  for (const SummaryRow& s : report.summary) {
    std::printf("  %-10s param=%-8s mean_acceptance=%.4f (std %.4f)  "
                "latency %.3f ms\n",
                s.method.c_str(), s.param.c_str(), s.mean_acceptance,
                s.std_acceptance, s.mean_latency_ns / 1e6);
  }
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"SLA delay-decomposition testbed"};
  app.require_subcommand(1);

  CommonOpts opts;
  struct Cmd {
    const char* name;
    const char* desc;
    Report (*fn)(const ExperimentConfig&);
  };
  const Cmd cmds[] = {
      {"longterm", "long-term acceptance study (all methods)", run_longterm},
      {"corruption", "feedback label-corruption sweep", run_corruption},
      {"overfit", "teacher OGD iteration sweep", run_overfit},
      {"scalability", "domain-count sweep", run_scalability},
  };
  for (const Cmd& c : cmds) add_common(app.add_subcommand(c.name, c.desc), opts);

  CLI::App* validate = app.add_subcommand(
      "validate-config", "parse and validate a config file, print it resolved");
  std::string validate_path;
  validate->add_option("--config", validate_path, "config file to check")
      ->required();

  app.add_subcommand("selftest",
                     "gradient checks and oracle equivalence checks");

  std::vector<std::string> rest(args.begin() + 1, args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (validate->parsed()) {
      ExperimentConfig cfg = load_config(validate_path);
      cfg.validate();
      std::printf("%s", resolved_config_text(cfg).c_str());
      return 0;
    }
    if (app.get_subcommand("selftest")->parsed()) {
      return selftest() == 0 ? 0 : 1;
    }
    for (const Cmd& c : cmds) {
      if (app.get_subcommand(c.name)->parsed()) return run_experiment(opts, c.fn);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  std::fprintf(stderr, "error: no subcommand selected\n");
  return 1;
}

}  // namespace slasim
