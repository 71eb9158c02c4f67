#include "slasim/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace slasim {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("config: " + msg);
  };
  if (n_domains < 2) fail("n_domains must be >= 2");
  if (t_steps < 1) fail("t_steps must be >= 1");
  if (budget_lo <= 0 || budget_hi < budget_lo)
    fail("budget interval must satisfy 0 < budget_lo <= budget_hi");
  if (buffer_capacity < 1) fail("buffer_capacity must be >= 1");
  if (ogd_steps < 0) fail("ogd_steps must be >= 0");
  if (ogd_lr <= 0) fail("ogd_lr must be positive");
  if (heuristic_samples < 1) fail("heuristic_samples must be >= 1");
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (hidden_size < 1 || num_heads < 1 || hidden_size % num_heads != 0)
    fail("hidden_size must be a positive multiple of num_heads");
  if (mlp_size < 1) fail("mlp_size must be >= 1");
  if (student_lr <= 0) fail("student_lr must be positive");
  if (opt_grid_step <= 0) fail("opt_grid_step must be positive");
  if (seeds.empty()) fail("seeds must be non-empty");
  for (double r : corruption_rates)
    if (r < 0.0 || r > 1.0) fail("corruption_rates entries must be in [0,1]");
  if (corruption_rates.empty()) fail("corruption_rates must be non-empty");
  if (ogd_sweep.empty()) fail("ogd_sweep must be non-empty");
  for (int s : ogd_sweep)
    if (s < 1) fail("ogd_sweep entries must be >= 1");
  if (domain_counts.empty()) fail("domain_counts must be non-empty");
  for (std::size_t n : domain_counts)
    if (n < 2) fail("domain_counts entries must be >= 2");
}

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string stripped = trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string val = trim(stripped.substr(eq + 1));
    auto as_u = [&](std::size_t& dst) { dst = std::stoull(val); };
    auto as_i = [&](int& dst) { dst = std::stoi(val); };
    auto as_d = [&](double& dst) { dst = std::stod(val); };
    bool known = true;
    try {
      if (key == "n_domains") as_u(cfg.n_domains);
      else if (key == "t_steps") as_u(cfg.t_steps);
      else if (key == "budget_lo") as_d(cfg.budget_lo);
      else if (key == "budget_hi") as_d(cfg.budget_hi);
      else if (key == "buffer_capacity") as_u(cfg.buffer_capacity);
      else if (key == "warmup_probes") as_u(cfg.warmup_probes);
      else if (key == "ogd_steps") as_i(cfg.ogd_steps);
      else if (key == "ogd_lr") as_d(cfg.ogd_lr);
      else if (key == "heuristic_samples") as_u(cfg.heuristic_samples);
      else if (key == "refine_iters") as_u(cfg.refine_iters);
      else if (key == "refine_step") as_d(cfg.refine_step);
      else if (key == "num_layers") as_u(cfg.num_layers);
      else if (key == "hidden_size") as_u(cfg.hidden_size);
      else if (key == "num_heads") as_u(cfg.num_heads);
      else if (key == "mlp_size") as_u(cfg.mlp_size);
      else if (key == "offline_epochs") as_u(cfg.offline_epochs);
      else if (key == "student_lr") as_d(cfg.student_lr);
      else if (key == "opt_grid_step") as_d(cfg.opt_grid_step);
      else if (key == "out_dir") cfg.out_dir = val;
      else if (key == "seeds") {
        cfg.seeds.clear();
        for (auto& tok : split_list(val)) cfg.seeds.push_back(std::stoull(trim(tok)));
      } else if (key == "corruption_rates") {
        cfg.corruption_rates.clear();
        for (auto& tok : split_list(val))
          cfg.corruption_rates.push_back(std::stod(trim(tok)));
      } else if (key == "ogd_sweep") {
        cfg.ogd_sweep.clear();
        for (auto& tok : split_list(val)) cfg.ogd_sweep.push_back(std::stoi(trim(tok)));
      } else if (key == "domain_counts") {
        cfg.domain_counts.clear();
        for (auto& tok : split_list(val))
          cfg.domain_counts.push_back(std::stoull(trim(tok)));
      } else {
        known = false;
      }
    } catch (const std::exception&) {
      // stoull/stoi/stod throw invalid_argument/out_of_range with unhelpful
      // messages; rewrap so the error names the key
      throw std::invalid_argument("config: bad value for key '" + key + "'");
    }
    if (!known) {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string resolved_config_text(const ExperimentConfig& cfg) {
  std::ostringstream os;
  auto list_u64 = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
      s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  std::string rates;
  for (std::size_t i = 0; i < cfg.corruption_rates.size(); ++i)
    rates += (i ? "," : "") + fmt_short(cfg.corruption_rates[i]);
  os << "n_domains = " << cfg.n_domains << "\n"
     << "t_steps = " << cfg.t_steps << "\n"
     << "budget_lo = " << fmt_short(cfg.budget_lo) << "\n"
     << "budget_hi = " << fmt_short(cfg.budget_hi) << "\n"
     << "buffer_capacity = " << cfg.buffer_capacity << "\n"
     << "warmup_probes = " << cfg.warmup_probes << "\n"
     << "ogd_steps = " << cfg.ogd_steps << "\n"
     << "ogd_lr = " << fmt_short(cfg.ogd_lr) << "\n"
     << "heuristic_samples = " << cfg.heuristic_samples << "\n"
     << "refine_iters = " << cfg.refine_iters << "\n"
     << "refine_step = " << fmt_short(cfg.refine_step) << "\n"
     << "num_layers = " << cfg.num_layers << "\n"
     << "hidden_size = " << cfg.hidden_size << "\n"
     << "num_heads = " << cfg.num_heads << "\n"
     << "mlp_size = " << cfg.mlp_size << "\n"
     << "offline_epochs = " << cfg.offline_epochs << "\n"
     << "student_lr = " << fmt_short(cfg.student_lr) << "\n"
     << "opt_grid_step = " << fmt_short(cfg.opt_grid_step) << "\n"
     << "seeds = " << list_u64(cfg.seeds) << "\n"
     << "corruption_rates = " << rates << "\n"
     << "ogd_sweep = " << list_u64(cfg.ogd_sweep) << "\n"
     << "domain_counts = " << list_u64(cfg.domain_counts) << "\n"
     << "out_dir = " << cfg.out_dir << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Per-seed pipeline

namespace {

struct MethodMask {
  bool nra = false, rade = false, cas = false, opt = false;
};

RadeConfig rade_config(const ExperimentConfig& cfg) {
  RadeConfig rc;
  rc.buffer_capacity = cfg.buffer_capacity;
  rc.ogd_steps = cfg.ogd_steps;
  rc.ogd_lr = cfg.ogd_lr;
  rc.heuristic_samples = cfg.heuristic_samples;
  rc.refine_iters = cfg.refine_iters;
  rc.refine_step = cfg.refine_step;
  return rc;
}

CasformerConfig student_config(const ExperimentConfig& cfg, std::size_t nd) {
  CasformerConfig cc;
  cc.n_domains = nd;
  cc.encoder.num_layers = cfg.num_layers;
  cc.encoder.hidden = cfg.hidden_size;
  cc.encoder.mlp = cfg.mlp_size;
  cc.encoder.heads = cfg.num_heads;
  cc.lr = cfg.student_lr;
  return cc;
}

double opt_grid_for(const ExperimentConfig& cfg, std::size_t nd) {
  return nd >= 4 ? std::max(cfg.opt_grid_step, 2.0) : cfg.opt_grid_step;
}

void warm_buffers(std::vector<MemoryBuffer>& bufs, Environment& env,
                  std::size_t probes, Rng& wrng, double rate, Rng& crng) {
  for (std::size_t n = 0; n < bufs.size(); ++n) {
    for (std::size_t i = 0; i < probes; ++i) {
      const double tau = wrng.uniform(5.0, 110.0);
      bufs[n].push(corrupt(env.sample_feedback(n, 0, tau), rate, crng));
    }
  }
}

struct TrainedSeed {
  std::vector<DomainParams> domains;
  Rade teacher;
  Casformer student;
  OnlineTrainingResult training;
};

TrainedSeed train_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                       std::size_t nd) {
  Rng base(seed);
  Rng env_rng = base.derive(stream::env_params);
  std::vector<DomainParams> domains = Environment::random_domains(nd, env_rng);
  Environment env(domains, mix_seed(seed, stream::train_feedback));
  Rade teacher(nd, rade_config(cfg), seed);
  Casformer student(student_config(cfg, nd), seed);
  std::vector<MemoryBuffer> buffers(nd, MemoryBuffer(cfg.buffer_capacity));
  Rng warm_rng = base.derive(stream::warmup_train);
  Rng corr_rng = base.derive(stream::corruption);
  warm_buffers(buffers, env, cfg.warmup_probes, warm_rng, 0.0, corr_rng);
  Rng trace_rng = base.derive(stream::train_trace);
  Trace trace = generate_trace(cfg.t_steps, cfg.budget_lo, cfg.budget_hi, trace_rng);
  OnlineTrainingResult training =
      train_online(student, teacher, buffers, env, trace, 0.0, corr_rng);
  if (cfg.offline_epochs > 0) {
    // replay only samples recorded after the teacher's burn-in: the earliest
    // targets come from barely-updated risk models and are not worth imitating
    const std::size_t skip = std::min(training.dataset.size() / 4,
                                      std::size_t{50});
    Rng shuffle_rng = base.derive(stream::offline_shuffle);
    student.train_offline(
        std::span(training.dataset).subspan(skip), cfg.offline_epochs,
        shuffle_rng);
  }
  return {std::move(domains), std::move(teacher), std::move(student),
          std::move(training)};
}

long long now_minus(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             std::chrono::steady_clock::now() - start)
      .count();
}

// Runs the testing trace for the selected methods. All methods observe the
// same environment; the buffers evolve under the teacher's assignments, the
// same process the student was distilled on. The frozen student predicts
// from the shared buffers each step.
std::vector<StepRecord> evaluate_seed(const ExperimentConfig& cfg,
                                      const TrainedSeed& ts,
                                      std::uint64_t seed, double rate,
                                      int ogd_override, const MethodMask& mask,
                                      const std::string& param) {
  const std::size_t nd = ts.domains.size();
  Rng base(seed);
  Rng trace_rng = base.derive(stream::test_trace);
  Trace trace = generate_trace(cfg.t_steps, cfg.budget_lo, cfg.budget_hi, trace_rng);
  std::vector<StepRecord> out;

  auto record = [&](const std::string& method, long t, double tau,
                    Assignment a, double p, long long ns) {
    StepRecord r;
    r.seed = seed;
    r.t = t;
    r.method = method;
    r.tau_e2e = tau;
    r.assignment = std::move(a);
    r.p_e2e = p;
    r.latency_ns = ns;
    r.param = param;
    out.push_back(std::move(r));
  };

  Environment env(ts.domains, mix_seed(seed, stream::test_feedback));
  Rade rade = ts.teacher;
  if (ogd_override >= 0) rade.config().ogd_steps = ogd_override;
  std::vector<MemoryBuffer> buffers(nd, MemoryBuffer(cfg.buffer_capacity));
  Rng warm_rng = base.derive(stream::warmup_test);
  Rng corr_rng = base.derive(stream::corruption).derive(stream::test_feedback);
  warm_buffers(buffers, env, cfg.warmup_probes, warm_rng, rate, corr_rng);
  const double grid = opt_grid_for(cfg, nd);

  for (std::size_t t = 0; t < trace.size(); ++t) {
    const long tl = static_cast<long>(t);
    const double tau_e2e = trace[t];
    if (mask.nra) {
      auto t0 = std::chrono::steady_clock::now();
      Assignment a = nra_decompose(tau_e2e, nd);
      const long long ns = now_minus(t0);
      record("nra", tl, tau_e2e, a, env.e2e_acceptance(tl, a), ns);
    }
    if (mask.cas) {
      auto t0 = std::chrono::steady_clock::now();
      Assignment a =
          ts.student.infer(std::span<const MemoryBuffer>(buffers), tau_e2e);
      const long long ns = now_minus(t0);
      record("casformer", tl, tau_e2e, a, env.e2e_acceptance(tl, a), ns);
    }
    if (mask.opt) {
      auto t0 = std::chrono::steady_clock::now();
      Assignment a = opt_decompose(env, tl, tau_e2e, grid);
      const long long ns = now_minus(t0);
      record("opt", tl, tau_e2e, a, env.e2e_acceptance(tl, a), ns);
    }
    // teacher goes last: its assignment drives the next buffer contents
    auto t0 = std::chrono::steady_clock::now();
    Assignment a = rade.step(buffers, tau_e2e);
    const long long ns = now_minus(t0);
    if (mask.rade) record("rade", tl, tau_e2e, a, env.e2e_acceptance(tl, a), ns);
    for (std::size_t d = 0; d < nd; ++d) {
      FeedbackRecord rec = env.sample_feedback(d, tl, a[d]);
      buffers[d].push(corrupt(rec, rate, corr_rng));
    }
  }
  return out;
}

// Runs fn(seed_index) across seeds, preserving seed order in the output.
template <class Fn>
std::vector<std::vector<StepRecord>> for_each_seed(std::size_t count, Fn fn) {
  std::vector<std::vector<StepRecord>> slots(count);
  std::exception_ptr err;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (long long i = 0; i < static_cast<long long>(count); ++i) {
    try {
      slots[static_cast<std::size_t>(i)] = fn(static_cast<std::size_t>(i));
    } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return slots;
}

}  // namespace

// ---------------------------------------------------------------------------
// Aggregation

std::vector<SummaryRow> summarize(const std::string& experiment,
                                  const std::vector<StepRecord>& steps) {
  struct Acc {
    std::map<std::uint64_t, std::pair<double, std::size_t>> per_seed;
    double latency_sum = 0.0;
    std::size_t count = 0;
    std::vector<double> latencies;
  };
  std::vector<std::pair<std::pair<std::string, std::string>, Acc>> groups;
  auto find = [&](const std::string& m, const std::string& p) -> Acc& {
    for (auto& g : groups)
      if (g.first.first == m && g.first.second == p) return g.second;
    groups.push_back({{m, p}, Acc{}});
    return groups.back().second;
  };
  for (const StepRecord& r : steps) {
    Acc& a = find(r.method, r.param);
    auto& ps = a.per_seed[r.seed];
    ps.first += r.p_e2e;
    ps.second += 1;
    a.latency_sum += static_cast<double>(r.latency_ns);
    a.count += 1;
    a.latencies.push_back(static_cast<double>(r.latency_ns));
  }
  std::vector<SummaryRow> rows;
  for (const auto& [key, acc] : groups) {
    std::vector<double> seed_means;
    for (const auto& [seed, sp] : acc.per_seed)
      seed_means.push_back(sp.first / static_cast<double>(sp.second));
    double mean = 0.0;
    for (double v : seed_means) mean += v;
    mean /= static_cast<double>(seed_means.size());
    double var = 0.0;
    if (seed_means.size() > 1) {
      for (double v : seed_means) var += (v - mean) * (v - mean);
      var /= static_cast<double>(seed_means.size() - 1);
    }
    SummaryRow row;
    row.experiment = experiment;
    row.method = key.first;
    row.param = key.second;
    row.mean_acceptance = mean;
    row.std_acceptance = std::sqrt(var);
    row.mean_latency_ns = acc.latency_sum / static_cast<double>(acc.count);
    std::vector<double> lat = acc.latencies;
    std::sort(lat.begin(), lat.end());
    const std::size_t n = lat.size();
    row.median_latency_ns =
        n % 2 ? lat[n / 2] : 0.5 * (lat[n / 2 - 1] + lat[n / 2]);
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Experiments

Report run_longterm(const ExperimentConfig& cfg) {
  cfg.validate();
  Report rep;
  rep.experiment = "longterm";
  rep.max_domains = cfg.n_domains;
  rep.training_losses.resize(cfg.seeds.size());
  auto slots = for_each_seed(cfg.seeds.size(), [&](std::size_t i) {
    TrainedSeed ts = train_seed(cfg, cfg.seeds[i], cfg.n_domains);
    rep.training_losses[i] = ts.training.loss_history;
    MethodMask mask{.nra = true, .rade = true, .cas = true, .opt = true};
    return evaluate_seed(cfg, ts, cfg.seeds[i], 0.0, -1, mask, "default");
  });
  for (auto& s : slots)
    rep.steps.insert(rep.steps.end(), s.begin(), s.end());
  rep.summary = summarize(rep.experiment, rep.steps);
  return rep;
}

Report run_corruption(const ExperimentConfig& cfg) {
  cfg.validate();
  Report rep;
  rep.experiment = "corruption";
  rep.max_domains = cfg.n_domains;
  rep.training_losses.resize(cfg.seeds.size());
  auto slots = for_each_seed(cfg.seeds.size(), [&](std::size_t i) {
    TrainedSeed ts = train_seed(cfg, cfg.seeds[i], cfg.n_domains);
    rep.training_losses[i] = ts.training.loss_history;
    std::vector<StepRecord> recs;
    MethodMask mask{.nra = true, .rade = true, .cas = true, .opt = true};
    for (double rate : cfg.corruption_rates) {
      auto r = evaluate_seed(cfg, ts, cfg.seeds[i], rate, -1, mask,
                             fmt_short(rate));
      recs.insert(recs.end(), r.begin(), r.end());
    }
    return recs;
  });
  for (auto& s : slots)
    rep.steps.insert(rep.steps.end(), s.begin(), s.end());
  rep.summary = summarize(rep.experiment, rep.steps);
  return rep;
}

Report run_overfit(const ExperimentConfig& cfg) {
  cfg.validate();
  Report rep;
  rep.experiment = "overfit";
  rep.max_domains = cfg.n_domains;
  rep.training_losses.resize(cfg.seeds.size());
  auto slots = for_each_seed(cfg.seeds.size(), [&](std::size_t i) {
    TrainedSeed ts = train_seed(cfg, cfg.seeds[i], cfg.n_domains);
    rep.training_losses[i] = ts.training.loss_history;
    std::vector<StepRecord> recs;
    MethodMask mask{.rade = true, .cas = true};
    for (int iters : cfg.ogd_sweep) {
      auto r = evaluate_seed(cfg, ts, cfg.seeds[i], 0.0, iters, mask,
                             std::to_string(iters));
      recs.insert(recs.end(), r.begin(), r.end());
    }
    return recs;
  });
  for (auto& s : slots)
    rep.steps.insert(rep.steps.end(), s.begin(), s.end());
  rep.summary = summarize(rep.experiment, rep.steps);
  return rep;
}

Report run_scalability(const ExperimentConfig& cfg) {
  cfg.validate();
  Report rep;
  rep.experiment = "scalability";
  rep.max_domains =
      *std::max_element(cfg.domain_counts.begin(), cfg.domain_counts.end());
  for (std::size_t nd : cfg.domain_counts) {
    auto slots = for_each_seed(cfg.seeds.size(), [&](std::size_t i) {
      TrainedSeed ts = train_seed(cfg, cfg.seeds[i], nd);
      MethodMask mask{.rade = true, .cas = true};
      return evaluate_seed(cfg, ts, cfg.seeds[i], 0.0, -1, mask,
                           std::to_string(nd));
    });
    for (auto& s : slots)
      rep.steps.insert(rep.steps.end(), s.begin(), s.end());
  }
  rep.summary = summarize(rep.experiment, rep.steps);
  return rep;
}

// ---------------------------------------------------------------------------
// Emission

void emit_report(const Report& report, const ExperimentConfig& cfg,
                 const std::string& format) {
  if (format != "csv" && format != "json") {
    throw std::invalid_argument("emit_report: format must be csv or json");
  }
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream out(fs::path(cfg.out_dir) / "config.resolved");
    if (!out) throw std::runtime_error("cannot write to " + cfg.out_dir);
    out << resolved_config_text(cfg);
  }
  if (format == "csv") {
    std::ofstream steps(fs::path(cfg.out_dir) / "steps.csv");
    if (!steps) throw std::runtime_error("cannot write steps.csv");
    steps << "seed,t,method,tau_e2e";
    for (std::size_t i = 1; i <= report.max_domains; ++i)
      steps << ",tau_" << i;
    steps << ",p_e2e,latency_ns\n";
    for (const StepRecord& r : report.steps) {
      steps << r.seed << "," << r.t << "," << r.method << ","
            << fmt_double(r.tau_e2e);
      for (std::size_t i = 0; i < report.max_domains; ++i) {
        steps << ",";
        if (i < r.assignment.size()) steps << fmt_double(r.assignment[i]);
      }
      steps << "," << fmt_double(r.p_e2e) << "," << r.latency_ns << "\n";
    }
    std::ofstream summary(fs::path(cfg.out_dir) / "summary.csv");
    summary << "experiment,method,param,mean_acceptance,std_acceptance,"
               "mean_latency_ns\n";
    for (const SummaryRow& s : report.summary) {
      summary << s.experiment << "," << s.method << "," << s.param << ","
              << fmt_double(s.mean_acceptance) << ","
              << fmt_double(s.std_acceptance) << ","
              << fmt_double(s.mean_latency_ns) << "\n";
    }
  } else {
    nlohmann::json j;
    j["experiment"] = report.experiment;
    j["n_domains"] = report.max_domains;
    nlohmann::json steps = nlohmann::json::array();
    for (const StepRecord& r : report.steps) {
      steps.push_back({{"seed", r.seed},
                       {"t", r.t},
                       {"method", r.method},
                       {"param", r.param},
                       {"tau_e2e", r.tau_e2e},
                       {"assignment", r.assignment},
                       {"p_e2e", r.p_e2e},
                       {"latency_ns", r.latency_ns}});
    }
    j["steps"] = std::move(steps);
    nlohmann::json summary = nlohmann::json::array();
    for (const SummaryRow& s : report.summary) {
      summary.push_back({{"experiment", s.experiment},
                         {"method", s.method},
                         {"param", s.param},
                         {"mean_acceptance", s.mean_acceptance},
                         {"std_acceptance", s.std_acceptance},
                         {"mean_latency_ns", s.mean_latency_ns},
                         {"median_latency_ns", s.median_latency_ns}});
    }
    j["summary"] = std::move(summary);
    j["training_losses"] = report.training_losses;
    std::ofstream out(fs::path(cfg.out_dir) / "report.json");
    if (!out) throw std::runtime_error("cannot write report.json");
    out << j.dump(2);
  }
}

// ---------------------------------------------------------------------------
// Reference oracle

namespace {

void brute_recurse(const Environment& env, long t, double unit, long long q,
                   std::size_t pos, std::vector<long long>& w,
                   Assignment& tau, double& best_p, Assignment& best) {
  const std::size_t n = w.size();
  if (pos == n - 1) {
    long long used = 0;
    for (std::size_t j = 0; j + 1 < n; ++j) used += w[j];
    const long long rest = q - used;
    if (rest < 1) return;
    w[n - 1] = rest;
    for (std::size_t j = 0; j < n; ++j)
      tau[j] = unit * static_cast<double>(w[j]);
    const double p = env.e2e_acceptance(t, tau);
    if (p > best_p) {
      best_p = p;
      best = tau;
    }
    return;
  }
  for (long long v = 1; v <= q; ++v) {
    w[pos] = v;
    brute_recurse(env, t, unit, q, pos + 1, w, tau, best_p, best);
  }
}

}  // namespace

Assignment reference_brute_force(const Environment& env, long t, double tau_e2e,
                                 double grid_step) {
  const std::size_t n = env.num_domains();
  const long long q = std::max<long long>(
      static_cast<long long>(n), std::llround(tau_e2e / grid_step));
  const double unit = tau_e2e / static_cast<double>(q);
  std::vector<long long> w(n, 1);
  Assignment tau(n), best;
  double best_p = -1.0;
  brute_recurse(env, t, unit, q, 0, w, tau, best_p, best);
  return best;
}

// ---------------------------------------------------------------------------
// Selftest

namespace {

bool report_check(const char* name, double err, double tol, int& failures) {
  const bool ok = err < tol;
  std::printf("[%s] %-45s err=%.3e tol=%.0e\n", ok ? "ok" : "FAIL", name, err,
              tol);
  if (!ok) ++failures;
  return ok;
}

// fd check of d(loss)/d(x) where the graph is rebuilt from x each call
double op_grad_error(
    const std::function<ad::TensorRef(ad::Tape&, ad::TensorRef)>& build,
    std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> x(rows * cols);
  for (auto& v : x) v = rng.uniform(-1.5, 1.5);
  auto eval = [&](std::span<const double> xs) {
    ad::Tape tape;
    ad::TensorRef xi = tape.input(rows, cols, xs);
    return tape.value(build(tape, xi))[0];
  };
  ad::Tape tape;
  ad::TensorRef xi = tape.input(rows, cols, x);
  ad::TensorRef loss = build(tape, xi);
  tape.backward(loss);
  std::vector<double> g(tape.grad(xi).begin(), tape.grad(xi).end());
  return ad::finite_difference_check(eval, x, g);
}

}  // namespace

int selftest() {
  int failures = 0;
  Rng rng(20240817);

  using ad::Tape;
  using ad::TensorRef;
  auto quad = [](Tape& t, TensorRef y) { return t.sum_all(t.mul(y, y)); };

  report_check("grad: matmul",
               op_grad_error(
                   [&](Tape& t, TensorRef x) {
                     std::vector<double> w = {0.3, -0.7, 1.1, 0.2, -0.4, 0.9};
                     return quad(t, t.matmul(x, t.input(3, 2, w)));
                   },
                   2, 3, rng),
               1e-4, failures);
  report_check("grad: softmax",
               op_grad_error(
                   [&](Tape& t, TensorRef x) {
                     std::vector<double> c = {1.0, -2.0, 0.5, 0.7};
                     return t.sum_all(t.mul(t.softmax_rows(x), t.input(2, 2, c)));
                   },
                   2, 2, rng),
               1e-4, failures);
  report_check("grad: layer-norm",
               op_grad_error(
                   [&](Tape& t, TensorRef x) {
                     std::vector<double> g(4, 1.3), b(4, -0.2), c = {1, -1, 2, 0.5};
                     return t.sum_all(t.mul(
                         t.layer_norm(x, t.input(1, 4, g), t.input(1, 4, b), 1e-5),
                         t.input(1, 4, c)));
                   },
                   1, 4, rng),
               1e-4, failures);
  report_check("grad: fused attention",
               op_grad_error(
                   [&](Tape& t, TensorRef x) {
                     TensorRef q = t.slice_cols(x, 0, 2);
                     TensorRef k = t.slice_cols(x, 2, 2);
                     TensorRef v = t.slice_cols(x, 4, 2);
                     return quad(t, t.attention(q, k, v, 0.7071));
                   },
                   3, 6, rng),
               1e-4, failures);
  report_check("grad: exp/log/sigmoid chain",
               op_grad_error(
                   [&](Tape& t, TensorRef x) {
                     return t.sum_all(t.log(t.add_const(t.sigmoid(t.exp(x)), 0.1)));
                   },
                   1, 5, rng),
               1e-4, failures);
  report_check("grad: mean/concat/slice/transpose",
               op_grad_error(
                   [&](Tape& t, TensorRef x) {
                     TensorRef a = t.slice_cols(x, 0, 2);
                     TensorRef b = t.slice_cols(x, 2, 2);
                     std::vector<TensorRef> parts = {t.transpose(a), t.transpose(b)};
                     return quad(t, t.mean_rows(t.concat_cols(parts)));
                   },
                   3, 4, rng),
               1e-4, failures);

  // end-to-end casformer KL gradient at tiny dims
  {
    CasformerConfig cc;
    cc.n_domains = 2;
    cc.encoder = {.num_layers = 1, .hidden = 4, .mlp = 8, .heads = 2};
    Casformer model(cc, 99);
    TrainingSample sample;
    sample.tau_e2e = 100.0;
    Rng srng(7);
    sample.buffers.resize(2);
    for (auto& b : sample.buffers)
      for (int i = 0; i < 3; ++i)
        b.push_back({srng.uniform(10, 90), srng.bernoulli(0.5) ? 1 : 0, i});
    sample.target = {0.6, 0.4};
    // flatten all parameters, compute analytic grads, then fd
    std::vector<double> flat;
    for (ad::Param* p : model.params().params())
      flat.insert(flat.end(), p->value.begin(), p->value.end());
    auto set_params = [&](std::span<const double> xs) {
      std::size_t off = 0;
      for (ad::Param* p : model.params().params()) {
        std::copy(xs.begin() + off, xs.begin() + off + p->size(),
                  p->value.begin());
        off += p->size();
      }
    };
    auto eval = [&](std::span<const double> xs) {
      set_params(xs);
      ad::Tape tape;
      auto pred = model.predict(tape, std::span(sample.buffers), sample.tau_e2e);
      return tape.value(nn::kl_div(tape, sample.target, pred.ratio_node))[0];
    };
    ad::Tape tape;
    for (ad::Param* p : model.params().params()) tape.param(*p);
    auto pred = model.predict(tape, std::span(sample.buffers), sample.tau_e2e);
    tape.backward(nn::kl_div(tape, sample.target, pred.ratio_node));
    std::vector<double> grads;
    for (ad::Param* p : model.params().params())
      grads.insert(grads.end(), p->grad.begin(), p->grad.end());
    const double err = ad::finite_difference_check(eval, flat, grads, 1e-5);
    set_params(flat);
    report_check("grad: casformer end-to-end KL", err, 1e-3, failures);
  }

  // oracle equivalence: opt_decompose vs the recursive brute force
  {
    int mismatches = 0;
    for (int trial = 0; trial < 20; ++trial) {
      Rng erng(500 + trial);
      const std::size_t n = 2 + trial % 2;
      Environment env(Environment::random_domains(n, erng), 1);
      const double tau = erng.uniform(90.0, 110.0);
      const long t = trial;
      Assignment a = opt_decompose(env, t, tau, 5.0);
      Assignment b = reference_brute_force(env, t, tau, 5.0);
      if (std::abs(env.e2e_acceptance(t, a) - env.e2e_acceptance(t, b)) > 1e-12)
        ++mismatches;
    }
    report_check("oracle: opt_decompose vs brute force", mismatches, 1,
                 failures);
  }
  std::printf("%s\n", failures == 0 ? "selftest passed" : "selftest FAILED");
  return failures;
}

}  // namespace slasim
