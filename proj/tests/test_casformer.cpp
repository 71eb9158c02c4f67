#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "slasim/casformer.hpp"
#include "slasim/env.hpp"

using namespace slasim;

namespace {

std::vector<std::vector<FeedbackRecord>> random_buffers(std::size_t n,
                                                        std::size_t len,
                                                        Rng& rng) {
  std::vector<std::vector<FeedbackRecord>> bufs(n);
  for (auto& b : bufs) {
    for (std::size_t i = 0; i < len; ++i) {
      b.push_back({rng.uniform(5.0, 110.0), static_cast<int>(rng.index(2)),
                   static_cast<long>(i)});
    }
  }
  return bufs;
}

// per-layer tensor suffixes of one encoder stack
const char* kLayerTensors[] = {"wq",        "bq",        "wk",
                               "bk",        "wv",        "bv",
                               "wo",        "bo",        "ln1.gamma",
                               "ln1.beta",  "ln2.gamma", "ln2.beta",
                               "mlp.w1",    "mlp.b1",    "mlp.w2",
                               "mlp.b2"};

// copy domain encoder 0's parameters into every other domain encoder so the
// model treats domains symmetrically
void tie_encoders(Casformer& model) {
  const CasformerConfig& cfg = model.config();
  for (std::size_t n = 1; n < cfg.n_domains; ++n) {
    for (std::size_t l = 0; l < cfg.encoder.num_layers; ++l) {
      for (const char* t : kLayerTensors) {
        const std::string suffix =
            ".layer" + std::to_string(l) + "." + std::string(t);
        model.params().at("enc" + std::to_string(n) + suffix).value =
            model.params().at("enc0" + suffix).value;
      }
    }
  }
}

std::vector<double> snapshot(const Casformer& model) {
  std::vector<double> all;
  for (const ad::Param* p : model.params().params())
    all.insert(all.end(), p->value.begin(), p->value.end());
  return all;
}

double dataset_mean_kl(const Casformer& model,
                       std::span<const TrainingSample> dataset) {
  double sum = 0.0;
  for (const TrainingSample& s : dataset) {
    ad::Tape tape;
    auto pred = model.predict(tape, s.buffers, s.tau_e2e);
    sum += tape.value(nn::kl_div(tape, s.target, pred.ratio_node))[0];
  }
  return sum / static_cast<double>(dataset.size());
}

}  // namespace

TEST_CASE("assignments satisfy the budget sum constraint") {
  Rng rng(1);
  CasformerConfig cfg;
  Casformer model(cfg, 7);
  for (int i = 0; i < 1000; ++i) {
    const double tau = rng.uniform(1.0, 500.0);
    auto bufs = random_buffers(3, rng.index(20), rng);
    Assignment a;
    if (i % 2 == 0) {
      a = model.infer(bufs, tau);
    } else {
      ad::Tape tape;
      a = model.predict(tape, bufs, tau).assignment;
    }
    REQUIRE(a.size() == 3);
    double sum = 0.0;
    for (double v : a) {
      CHECK(v > 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(tau).epsilon(1e-9));
  }
}

TEST_CASE("identical buffers with tied encoders give uniform ratios") {
  CasformerConfig cfg;
  Casformer model(cfg, 3);
  tie_encoders(model);
  Rng rng(2);
  auto bufs = random_buffers(1, 10, rng);
  std::vector<std::vector<FeedbackRecord>> same(3, bufs[0]);
  ad::Tape tape;
  auto pred = model.predict(tape, same, 90.0);
  for (double r : pred.ratios)
    CHECK(r == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("assignment is the ratio vector scaled by the budget") {
  Casformer model(CasformerConfig{}, 11);
  Rng rng(3);
  auto bufs = random_buffers(3, 6, rng);
  ad::Tape tape;
  auto pred = model.predict(tape, bufs, 100.0);
  REQUIRE(pred.ratios.size() == pred.assignment.size());
  for (std::size_t j = 0; j < pred.ratios.size(); ++j)
    CHECK(pred.assignment[j] ==
          doctest::Approx(pred.ratios[j] * 100.0).epsilon(1e-12));
}

TEST_CASE("norm_sum examples, scale invariance, and errors") {
  auto r = norm_sum({50.0, 30.0, 20.0});
  CHECK(r[0] == doctest::Approx(0.5));
  CHECK(r[1] == doctest::Approx(0.3));
  CHECK(r[2] == doctest::Approx(0.2));
  for (double v : norm_sum({1.0, 1.0, 1.0}))
    CHECK(v == doctest::Approx(1.0 / 3.0));
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    Assignment x = {rng.uniform(0.1, 5.0), rng.uniform(0.1, 5.0),
                    rng.uniform(0.1, 5.0)};
    const double c = rng.uniform(0.1, 10.0);
    Assignment cx = x;
    for (double& v : cx) v *= c;
    auto a = norm_sum(x), b = norm_sum(cx);
    for (std::size_t j = 0; j < a.size(); ++j)
      CHECK(a[j] == doctest::Approx(b[j]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(norm_sum({1.0, 0.0}), std::invalid_argument);
  CHECK_THROWS_AS(norm_sum({1.0, -2.0}), std::invalid_argument);
}

TEST_CASE("training on one fixed sample drives the loss to zero") {
  Casformer model(CasformerConfig{}, 5);
  Rng rng(5);
  TrainingSample sample;
  sample.buffers = random_buffers(3, 12, rng);
  sample.tau_e2e = 100.0;
  sample.target = {0.6, 0.3, 0.1};
  double loss = 0.0;
  for (int i = 0; i < 500; ++i) {
    loss = model.train_step(sample);
    CHECK(std::isfinite(loss));
  }
  CHECK(loss < 0.01);
}

TEST_CASE("a target equal to the prediction is a near fixed point") {
  Casformer model(CasformerConfig{}, 6);
  Rng rng(6);
  TrainingSample sample;
  sample.buffers = random_buffers(3, 8, rng);
  sample.tau_e2e = 80.0;
  {
    ad::Tape tape;
    sample.target = model.predict(tape, sample.buffers, 80.0).ratios;
  }
  const auto before = snapshot(model);
  const double loss = model.train_step(sample);
  CHECK(loss == doctest::Approx(0.0).epsilon(1e-9));
  const auto after = snapshot(model);
  // Adam normalizes away the gradient magnitude, so residual float noise can
  // still move a weight by up to one lr-sized step; nothing moves further
  double max_abs = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i)
    max_abs = std::max(max_abs, std::abs(after[i] - before[i]));
  CHECK(max_abs < 2.0 * model.config().lr);
}

TEST_CASE("offline training: no-op at 0 epochs, improves with more epochs") {
  Rng rng(7);
  std::vector<TrainingSample> dataset;
  for (int i = 0; i < 8; ++i) {
    TrainingSample s;
    s.buffers = random_buffers(3, 10, rng);
    s.tau_e2e = rng.uniform(90.0, 110.0);
    double a = rng.uniform(0.1, 1.0), b = rng.uniform(0.1, 1.0),
           c = rng.uniform(0.1, 1.0);
    const double sum = a + b + c;
    s.target = {a / sum, b / sum, c / sum};
    dataset.push_back(std::move(s));
  }
  {
    Casformer model(CasformerConfig{}, 8);
    const auto before = snapshot(model);
    Rng shuffle(1);
    CHECK(std::isnan(model.train_offline(dataset, 0, shuffle)));
    CHECK(snapshot(model) == before);
    Rng bad(1);
    CHECK_THROWS_AS(
        model.train_offline(std::span<const TrainingSample>{}, 1, bad),
        std::invalid_argument);
  }
  Casformer one(CasformerConfig{}, 8), twenty(CasformerConfig{}, 8);
  Rng s1(2), s20(2);
  one.train_offline(dataset, 1, s1);
  twenty.train_offline(dataset, 20, s20);
  CHECK(dataset_mean_kl(twenty, dataset) < dataset_mean_kl(one, dataset));

  // seeded shuffling makes offline training reproducible
  Casformer again(CasformerConfig{}, 8);
  Rng s20b(2);
  again.train_offline(dataset, 20, s20b);
  CHECK(snapshot(again) == snapshot(twenty));
}

TEST_CASE("checkpoint roundtrip preserves parameters and predictions") {
  Rng rng(9);
  Casformer model(CasformerConfig{}, 9);
  // train a little so the saved state is not the raw init
  TrainingSample s;
  s.buffers = random_buffers(3, 5, rng);
  s.tau_e2e = 100.0;
  s.target = {0.2, 0.3, 0.5};
  for (int i = 0; i < 10; ++i) model.train_step(s);

  const std::string path = "/tmp/slasim_test_checkpoint.json";
  model.save_checkpoint(path);
  Casformer loaded = Casformer::load_checkpoint(path);
  CHECK(snapshot(loaded) == snapshot(model));
  auto bufs = random_buffers(3, 7, rng);
  CHECK(loaded.infer(bufs, 95.0) == model.infer(bufs, 95.0));
  CHECK_THROWS_AS(Casformer::load_checkpoint(path, 4), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("inference does not mutate parameters") {
  Casformer model(CasformerConfig{}, 10);
  Rng rng(10);
  const auto before = snapshot(model);
  for (int i = 0; i < 5; ++i) {
    auto bufs = random_buffers(3, 1 + rng.index(15), rng);
    model.infer(bufs, rng.uniform(50.0, 150.0));
  }
  CHECK(snapshot(model) == before);
}

TEST_CASE("tied model is equivariant under domain permutation") {
  Casformer model(CasformerConfig{}, 12);
  tie_encoders(model);
  Rng rng(12);
  auto bufs = random_buffers(3, 9, rng);
  std::vector<std::vector<FeedbackRecord>> rotated = {bufs[1], bufs[2],
                                                      bufs[0]};
  ad::Tape t1, t2;
  auto base = model.predict(t1, bufs, 100.0).ratios;
  auto rot = model.predict(t2, rotated, 100.0).ratios;
  CHECK(rot[0] == doctest::Approx(base[1]).epsilon(1e-9));
  CHECK(rot[1] == doctest::Approx(base[2]).epsilon(1e-9));
  CHECK(rot[2] == doctest::Approx(base[0]).epsilon(1e-9));
}

TEST_CASE("models support 2, 3, and 4 domains") {
  Rng rng(13);
  for (std::size_t n : {std::size_t{2}, std::size_t{3}, std::size_t{4}}) {
    CasformerConfig cfg;
    cfg.n_domains = n;
    Casformer model(cfg, 13 + n);
    auto bufs = random_buffers(n, 5, rng);
    auto a = model.infer(bufs, 100.0);
    CHECK(a.size() == n);
    CHECK(std::accumulate(a.begin(), a.end(), 0.0) ==
          doctest::Approx(100.0).epsilon(1e-9));
  }
  CasformerConfig bad;
  bad.n_domains = 1;
  CHECK_THROWS_AS(Casformer(bad, 1), std::invalid_argument);
}

TEST_CASE("fast inference agrees with the tape forward") {
  Casformer model(CasformerConfig{}, 14);
  Rng rng(14);
  for (int i = 0; i < 20; ++i) {
    auto bufs = random_buffers(3, rng.index(30), rng);
    const double tau = rng.uniform(60.0, 140.0);
    auto fast = model.infer(bufs, tau);
    ad::Tape tape;
    auto ref = model.predict(tape, bufs, tau).assignment;
    for (std::size_t j = 0; j < fast.size(); ++j)
      CHECK(fast[j] == doctest::Approx(ref[j]).epsilon(1e-6));
  }
}

TEST_CASE("domain embeddings: width, null token, label sensitivity") {
  Casformer model(CasformerConfig{}, 15);
  {
    ad::Tape tape;
    auto h = model.encode_domain(tape, 0, std::vector<FeedbackRecord>{});
    CHECK(tape.rows(h) == 1);
    CHECK(tape.cols(h) == 16);
    ad::Tape tape2;
    auto h2 = model.encode_domain(tape2, 0, std::vector<FeedbackRecord>{});
    auto va = tape.value(h);
    auto vb = tape2.value(h2);
    CHECK(std::vector<double>(va.begin(), va.end()) ==
          std::vector<double>(vb.begin(), vb.end()));  // deterministic
  }
  {
    // records differing only in the label embed differently
    std::vector<FeedbackRecord> acc = {{40.0, 1, 0}};
    std::vector<FeedbackRecord> rej = {{40.0, 0, 0}};
    ad::Tape ta, tr;
    auto ha = ta.value(model.encode_domain(ta, 1, acc));
    auto hr = tr.value(model.encode_domain(tr, 1, rej));
    double diff = 0.0;
    for (std::size_t j = 0; j < ha.size(); ++j)
      diff = std::max(diff, std::abs(ha[j] - hr[j]));
    CHECK(diff > 1e-6);
  }
  CHECK_THROWS_AS(
      [&] {
        ad::Tape tape;
        model.encode_domain(tape, 9, std::vector<FeedbackRecord>{});
      }(),
      std::out_of_range);
}

TEST_CASE("online co-training produces one sample per step") {
  Rng rng(16);
  auto domains = Environment::random_domains(3, rng);
  Environment env(domains, 99);
  Casformer model(CasformerConfig{}, 16);
  Rade teacher(3, RadeConfig{}, 17);
  std::vector<MemoryBuffer> buffers(3, MemoryBuffer(100));
  // seed the buffers with a few probes
  Rng probe(18);
  for (int i = 0; i < 10; ++i) {
    for (std::size_t n = 0; n < 3; ++n) {
      const double tau = probe.uniform(5.0, 110.0);
      buffers[n].push(env.sample_feedback(n, -1, tau));
    }
  }
  Rng corrupt(19);
  {
    auto one = train_online(model, teacher, buffers, env, Trace{100.0}, 0.0,
                            corrupt);
    CHECK(one.dataset.size() == 1);
    CHECK(one.loss_history.size() == 1);
  }
  Rng gen(20);
  auto trace = generate_trace(10, 90.0, 110.0, gen);
  auto res = train_online(model, teacher, buffers, env, trace, 0.0, corrupt);
  CHECK(res.dataset.size() == 10);
  CHECK(res.loss_history.size() == 10);
  for (const TrainingSample& s : res.dataset) {
    REQUIRE(s.target.size() == 3);
    double sum = 0.0;
    for (double v : s.target) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s.buffers.size() == 3);
  }
  for (double l : res.loss_history) CHECK(std::isfinite(l));
}
