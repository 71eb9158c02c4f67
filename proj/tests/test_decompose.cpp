#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "slasim/decompose.hpp"
#include "slasim/harness.hpp"

using namespace slasim;

namespace {

MemoryBuffer labeled_buffer(const std::vector<double>& taus,
                            const std::function<int(double)>& label,
                            std::size_t capacity = 100) {
  MemoryBuffer buf(capacity);
  for (std::size_t i = 0; i < taus.size(); ++i) {
    buf.push({taus[i], label(taus[i]), static_cast<long>(i)});
  }
  return buf;
}

double assignment_sum(const Assignment& a) {
  double s = 0.0;
  for (double v : a) s += v;
  return s;
}

Environment saturating_env(double knee) {
  // both domains accept nearly surely above `knee` ms and nearly never below
  DomainParams d;
  d.slope = 2.0;
  d.base_threshold = knee;
  d.drift_amp = 0.0;
  return Environment({d, d}, 1);
}

}  // namespace

TEST_CASE("memory buffer is a bounded fifo") {
  MemoryBuffer buf(2);
  buf.push({1.0, 1, 0});
  CHECK(buf.size() == 1);
  buf.push({2.0, 0, 1});
  buf.push({3.0, 1, 2});
  REQUIRE(buf.size() == 2);
  CHECK(buf.at(0).tau == 2.0);
  CHECK(buf.at(1).tau == 3.0);

  MemoryBuffer big(100);
  for (int i = 0; i < 100; ++i) big.push({static_cast<double>(i + 1), 1, i});
  REQUIRE(big.size() == 100);
  for (int i = 0; i < 100; ++i) CHECK(big.at(i).tau == i + 1.0);
}

TEST_CASE("risk model outputs calibrated-range probabilities") {
  Rng rng(1);
  RiskModel model(rng);
  for (double tau : {1.0, 30.0, 75.0, 110.0, 300.0}) {
    const double p = model.predict(tau);
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    CHECK(model.predict(tau) == p);  // deterministic
  }
}

TEST_CASE("risk model learns constant-accept data") {
  Rng rng(2);
  RiskModel model(rng);
  std::vector<double> taus;
  Rng draws(3);
  for (int i = 0; i < 100; ++i) taus.push_back(draws.uniform(5.0, 110.0));
  auto buf = labeled_buffer(taus, [](double) { return 1; });
  model.ogd_update(buf, 200, 0.01);
  for (double tau : {10.0, 50.0, 100.0}) CHECK(model.predict(tau) > 0.9);
}

TEST_CASE("risk model separates a thresholded buffer") {
  Rng rng(4);
  RiskModel model(rng);
  std::vector<double> taus;
  Rng draws(5);
  for (int i = 0; i < 100; ++i) taus.push_back(draws.uniform(5.0, 110.0));
  auto buf = labeled_buffer(taus, [](double t) { return t > 50.0 ? 1 : 0; });
  auto loss = model.ogd_update(buf, 200, 0.01);
  REQUIRE(loss.has_value());
  CHECK(*loss < 0.3);
}

TEST_CASE("ogd update edge cases") {
  Rng rng(6);
  RiskModel model(rng);
  MemoryBuffer empty;
  CHECK_FALSE(model.ogd_update(empty, 5, 0.01).has_value());

  auto buf = labeled_buffer({30.0, 60.0}, [](double t) { return t > 45.0; });
  const std::vector<double> before = model.params().params()[0]->value;
  auto loss0 = model.ogd_update(buf, 0, 0.01);
  CHECK(loss0.has_value());
  CHECK(model.params().params()[0]->value == before);  // steps=0 is a no-op
}

TEST_CASE("ogd mostly descends on a fixed buffer") {
  int improved = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(1000 + trial);
    RiskModel model(rng);
    std::vector<double> taus;
    Rng draws(2000 + trial);
    for (int i = 0; i < 40; ++i) taus.push_back(draws.uniform(5.0, 110.0));
    auto buf = labeled_buffer(taus, [](double t) { return t > 55.0 ? 1 : 0; });
    const double before = *model.ogd_update(buf, 0, 0.0);
    const double after = *model.ogd_update(buf, 1, 0.001);
    if (after <= before + 1e-12) ++improved;
  }
  CHECK(improved >= 90);
}

TEST_CASE("heuristic search returns simplex points and respects M") {
  Rng rng(7);
  RiskModel m1(rng), m2(rng), m3(rng);
  std::vector<const Predictor*> models = {&m1, &m2, &m3};

  Rng search_rng(8);
  for (int i = 0; i < 50; ++i) {
    const double tau = 50.0 + i;
    auto a = heuristic_search(models, tau, 1 + i % 5, search_rng);
    REQUIRE(a.size() == 3);
    CHECK(assignment_sum(a) == doctest::Approx(tau).epsilon(1e-9));
    for (double v : a) CHECK(v > 0.0);
  }
  Rng bad(9);
  CHECK_THROWS_AS(heuristic_search(models, 100.0, 0, bad),
                  std::invalid_argument);
  CHECK_THROWS_AS(heuristic_search(models, -1.0, 10, bad),
                  std::invalid_argument);
}

TEST_CASE("heuristic search beats the even split under identical models") {
  Rng rng(10);
  RiskModel shared(rng);
  std::vector<const Predictor*> models = {&shared, &shared, &shared};
  int at_least_even = 0;
  for (int seed = 0; seed < 50; ++seed) {
    Rng search_rng(100 + seed);
    auto best = heuristic_search(models, 100.0, 10000, search_rng);
    const auto even = nra_decompose(100.0, 3);
    if (log_objective(models, best) >= log_objective(models, even) - 1e-6)
      ++at_least_even;
  }
  CHECK(at_least_even >= 50);  // spec asks >= 99%; identical models make
                               // the even split a stationary point
}

TEST_CASE("parallel heuristic search equals the serial reference") {
  Rng rng(11);
  RiskModel m1(rng), m2(rng), m3(rng);
  std::vector<const Predictor*> models = {&m1, &m2, &m3};
  for (int i = 0; i < 10; ++i) {
    Rng a(500 + i), b(500 + i);
    auto par = heuristic_search(models, 95.0 + i, 3000, a);
    auto ser = heuristic_search_serial(models, 95.0 + i, 3000, b);
    REQUIRE(par.size() == ser.size());
    for (std::size_t n = 0; n < par.size(); ++n) CHECK(par[n] == ser[n]);
  }
}

TEST_CASE("refine basics: no-op at R=0, sum preserved, never worse") {
  Rng rng(12);
  RiskModel m1(rng), m2(rng);
  std::vector<const Predictor*> models = {&m1, &m2};
  Assignment init = {30.0, 70.0};
  auto same = refine(models, 100.0, init, 0, 0.5);
  CHECK(same == init);
  for (int i = 0; i < 20; ++i) {
    Assignment start = {5.0 + i, 95.0 - i};
    auto out = refine(models, 100.0, start, 50, 0.5);
    CHECK(assignment_sum(out) == doctest::Approx(100.0).epsilon(1e-6));
    for (double v : out) CHECK(v > 0.0);
    CHECK(log_objective(models, out) >= log_objective(models, start) - 1e-12);
  }
}

TEST_CASE("refine recovers the grid optimum of a concave objective") {
  // gentle slope keeps the log-objective gradient informative everywhere;
  // a steep sigmoid underflows at the perturbed start
  DomainParams d;
  d.slope = 0.15;
  d.base_threshold = 40.0;
  d.drift_amp = 0.0;
  Environment env({d, d}, 1);
  GroundTruthPredictor g1(env, 0, 0), g2(env, 1, 0);
  std::vector<const Predictor*> models = {&g1, &g2};
  // fine-grid oracle
  Assignment best = {1.0, 99.0};
  double best_obj = log_objective(models, best);
  for (double x = 0.1; x < 100.0; x += 0.1) {
    Assignment cand = {x, 100.0 - x};
    const double obj = log_objective(models, cand);
    if (obj > best_obj) {
      best_obj = obj;
      best = cand;
    }
  }
  Assignment perturbed = {20.0, 80.0};
  // a step this size provably oscillates around the optimum here; 0.1 damps
  auto refined = refine(models, 100.0, perturbed, 200, 0.1);
  CHECK(std::abs(refined[0] - best[0]) < 1.0);
  CHECK(std::abs(refined[1] - best[1]) < 1.0);
}

TEST_CASE("even split baseline") {
  auto a = nra_decompose(99.0, 3);
  REQUIRE(a.size() == 3);
  for (double v : a) CHECK(v == doctest::Approx(33.0));
  auto b = nra_decompose(100.0, 4);
  for (double v : b) CHECK(v == doctest::Approx(25.0));
  auto c = nra_decompose(77.0, 1);
  CHECK(c[0] == doctest::Approx(77.0));
  CHECK_THROWS_AS(nra_decompose(50.0, 0), std::invalid_argument);
}

TEST_CASE("grid search picks the symmetric knee of saturating domains") {
  auto env = saturating_env(50.0);
  auto a = opt_decompose(env, 0, 100.0, 10.0);
  REQUIRE(a.size() == 2);
  CHECK(a[0] == doctest::Approx(50.0));
  CHECK(a[1] == doctest::Approx(50.0));
}

TEST_CASE("grid search matches an independent brute-force enumeration") {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 2;
    Rng drng(3000 + trial);
    auto env = Environment(Environment::random_domains(n, drng), trial);
    const long t = trial % 200;
    const double tau = 90.0 + (trial % 21);
    auto fast = opt_decompose(env, t, tau, 5.0);
    auto ref = reference_brute_force(env, t, tau, 5.0);
    CHECK(env.e2e_acceptance(t, fast) ==
          doctest::Approx(env.e2e_acceptance(t, ref)).epsilon(1e-12));
  }
}

TEST_CASE("grid search on identical domains matches the even split") {
  DomainParams d;
  d.slope = 0.3;
  d.base_threshold = 35.0;
  d.drift_amp = 0.0;
  Environment env({d, d, d}, 5);
  auto a = opt_decompose(env, 0, 99.0, 1.0);
  const double even = env.e2e_acceptance(0, nra_decompose(99.0, 3));
  CHECK(env.e2e_acceptance(0, a) >= even - 1e-12);
  CHECK(env.e2e_acceptance(0, a) == doctest::Approx(even).epsilon(1e-3));
}

TEST_CASE("grid search rejects infeasible enumeration sizes") {
  Rng rng(14);
  auto env = Environment(Environment::random_domains(8, rng), 6);
  CHECK_THROWS_AS(opt_decompose(env, 0, 100.0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(opt_decompose(env, 0, 100.0, 0.0), std::invalid_argument);
}

TEST_CASE("two-stage decomposition nearly matches the oracle when calibrated") {
  int within = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng drng(5000 + trial);
    auto env = Environment(Environment::random_domains(3, drng), trial);
    const long t = trial;
    const double tau = 90.0 + (trial % 21);
    GroundTruthPredictor g0(env, 0, t), g1(env, 1, t), g2(env, 2, t);
    std::vector<const Predictor*> models = {&g0, &g1, &g2};
    Rng search_rng(6000 + trial);
    auto init = heuristic_search(models, tau, 10000, search_rng);
    auto a = refine(models, tau, init, 50, 0.5);
    const double mine = env.e2e_acceptance(t, a);
    const double oracle =
        env.e2e_acceptance(t, opt_decompose(env, t, tau, 1.0));
    if (mine >= 0.98 * oracle) ++within;
  }
  CHECK(within == 100);
}

TEST_CASE("teacher steps are valid and deterministic given the seed") {
  RadeConfig cfg;
  cfg.heuristic_samples = 2000;
  Rade a(3, cfg, 42), b(3, cfg, 42);
  std::vector<MemoryBuffer> buffers(3);
  Rng feed(15);
  for (int i = 0; i < 30; ++i)
    for (auto& buf : buffers) {
      const double tau = feed.uniform(5.0, 110.0);
      buf.push({tau, tau > 40.0 ? 1 : 0, i});
    }
  for (int step = 0; step < 3; ++step) {
    auto av = a.step(buffers, 100.0);
    auto bv = b.step(buffers, 100.0);
    REQUIRE(av.size() == 3);
    CHECK(assignment_sum(av) == doctest::Approx(100.0).epsilon(1e-6));
    for (double v : av) CHECK(v > 0.0);
    CHECK(av == bv);
  }
}

TEST_CASE("teacher improves under stationary feedback") {
  int converging = 0;
  const int seeds = 10;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng drng(7000 + seed);
    auto domains = Environment::random_domains(2, drng);
    for (auto& d : domains) d.drift_amp = 0.0;  // stationary
    Environment env(domains, 800 + seed);
    RadeConfig cfg;
    cfg.heuristic_samples = 2000;
    Rade teacher(2, cfg, seed);
    // cold-ish start: only a handful of warm-up probes, so the first
    // window reflects an uncalibrated teacher
    std::vector<MemoryBuffer> buffers(2);
    Rng warm(900 + seed);
    for (int i = 0; i < 5; ++i)
      for (std::size_t n = 0; n < 2; ++n)
        buffers[n].push(env.sample_feedback(n, 0, warm.uniform(5.0, 110.0)));
    Rng trace_rng(1000 + seed);
    std::vector<double> first, last;
    for (long t = 0; t < 200; ++t) {
      const double tau = trace_rng.uniform(90.0, 110.0);
      auto a = teacher.step(buffers, tau);
      const double p = env.e2e_acceptance(t, a);
      if (t < 50) first.push_back(p);
      if (t >= 150) last.push_back(p);
      for (std::size_t n = 0; n < 2; ++n)
        buffers[n].push(env.sample_feedback(n, t, a[n]));
    }
    double mf = 0.0, ml = 0.0;
    for (double v : first) mf += v;
    for (double v : last) ml += v;
    if (ml / 50.0 >= mf / 50.0) ++converging;
  }
  CHECK(converging >= 8);  // >= 80% of seeds
}
