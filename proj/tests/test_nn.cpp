#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "slasim/nn.hpp"

using namespace slasim;
using namespace slasim::nn;

namespace {

std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0,
                                  double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

std::vector<double> random_simplex(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  double sum = 0.0;
  for (double& x : v) {
    x = rng.exponential();
    sum += x;
  }
  for (double& x : v) x /= sum;
  return v;
}

}  // namespace

TEST_CASE("encoder forward preserves shape for varying lengths") {
  Rng rng(1);
  ParamStore store;
  EncoderConfig cfg{2, 8, 16, 2};
  EncoderStack enc(cfg, store, "enc", rng);
  for (std::size_t L : {std::size_t{1}, std::size_t{3}, std::size_t{20}}) {
    Tape t;
    TensorRef out = enc.forward(t, t.input(L, 8, random_values(L * 8, rng)));
    CHECK(t.rows(out) == L);
    CHECK(t.cols(out) == 8);
    for (double v : t.value(out)) CHECK(std::isfinite(v));
  }
}

TEST_CASE("encoder rejects malformed token matrices") {
  Rng rng(2);
  ParamStore store;
  EncoderStack enc(EncoderConfig{1, 8, 16, 2}, store, "enc", rng);
  Tape t;
  CHECK_THROWS_AS(enc.forward(t, t.input(2, 4, std::vector<double>(8, 0.0))),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      EncoderStack(EncoderConfig{1, 9, 16, 2}, store, "bad", rng),
      std::invalid_argument);
}

TEST_CASE("encoder is permutation equivariant") {
  Rng rng(3);
  ParamStore store;
  EncoderStack enc(EncoderConfig{2, 8, 16, 2}, store, "enc", rng);
  const std::size_t L = 5, d = 8;
  const std::vector<double> x = random_values(L * d, rng);
  // reverse the token order
  std::vector<double> xr(L * d);
  for (std::size_t i = 0; i < L; ++i)
    std::copy_n(&x[i * d], d, &xr[(L - 1 - i) * d]);
  Tape t1, t2;
  auto out = t1.value(enc.forward(t1, t1.input(L, d, x)));
  auto outr = t2.value(enc.forward(t2, t2.input(L, d, xr)));
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(out[i * d + j] ==
            doctest::Approx(outr[(L - 1 - i) * d + j]).epsilon(1e-9));
}

TEST_CASE("zeroed output projections reduce the encoder to the identity") {
  Rng rng(4);
  ParamStore store;
  EncoderStack enc(EncoderConfig{2, 8, 16, 2}, store, "enc", rng);
  for (std::size_t l = 0; l < 2; ++l) {
    const std::string p = "enc.layer" + std::to_string(l);
    std::fill(store.at(p + ".wo").value.begin(),
              store.at(p + ".wo").value.end(), 0.0);
    std::fill(store.at(p + ".mlp.w2").value.begin(),
              store.at(p + ".mlp.w2").value.end(), 0.0);
  }
  const std::vector<double> x = random_values(3 * 8, rng);
  Tape t;
  auto out = t.value(enc.forward(t, t.input(3, 8, x)));
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(out[i] == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("tape-free encoder forward matches the tape forward") {
  Rng rng(5);
  ParamStore store;
  EncoderStack enc(EncoderConfig{2, 16, 64, 2}, store, "enc", rng);
  for (std::size_t L : {std::size_t{1}, std::size_t{7}, std::size_t{100}}) {
    std::vector<double> x = random_values(L * 16, rng);
    Tape t;
    auto ref = t.value(enc.forward(t, t.input(L, 16, x)));
    enc.forward_fast(x, L);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(x[i] == doctest::Approx(ref[i]).epsilon(1e-8));
  }
  std::vector<double> bad(7, 0.0);
  CHECK_THROWS_AS(enc.forward_fast(bad, 3), std::invalid_argument);
}

TEST_CASE("fused multi-stack forward matches per-stack forward") {
  Rng rng(11);
  ParamStore store;
  const std::size_t d = 16;
  EncoderConfig cfg{2, d, 64, 2};
  std::vector<EncoderStack> stacks;
  stacks.reserve(10);
  for (int s = 0; s < 10; ++s)
    stacks.emplace_back(cfg, store, "enc" + std::to_string(s), rng);
  // ten stacks with unequal lengths exercises both the full 8-lane block and
  // the 4-lane remainder block
  const std::size_t lens_raw[] = {1, 100, 7, 33, 2, 64, 5, 100, 9, 50};
  std::vector<std::vector<double>> bufs(10), expect(10);
  std::vector<const EncoderStack*> sp;
  std::vector<std::vector<double>*> xp;
  std::vector<std::size_t> lens;
  for (std::size_t s = 0; s < 10; ++s) {
    bufs[s] = random_values(lens_raw[s] * d, rng);
    expect[s] = bufs[s];
    stacks[s].forward_fast(expect[s], lens_raw[s]);
    sp.push_back(&stacks[s]);
    xp.push_back(&bufs[s]);
    lens.push_back(lens_raw[s]);
  }
  EncoderStack::forward_fast_multi(sp, xp, lens);
  for (std::size_t s = 0; s < 10; ++s) {
    REQUIRE(bufs[s].size() == expect[s].size());
    for (std::size_t i = 0; i < bufs[s].size(); ++i)
      CHECK(bufs[s][i] == doctest::Approx(expect[s][i]).epsilon(1e-9));
  }

  // argument validation
  std::vector<std::size_t> short_lens(lens.begin(), lens.end() - 1);
  CHECK_THROWS_AS(EncoderStack::forward_fast_multi(sp, xp, short_lens),
                  std::invalid_argument);
  EncoderStack odd(EncoderConfig{1, 8, 16, 2}, store, "odd", rng);
  std::vector<double> odd_buf(8, 0.0);
  std::vector<const EncoderStack*> sp2{&stacks[0], &odd};
  std::vector<std::vector<double>*> xp2{&bufs[0], &odd_buf};
  std::vector<std::size_t> lens2{lens[0], 1};
  CHECK_THROWS_AS(EncoderStack::forward_fast_multi(sp2, xp2, lens2),
                  std::invalid_argument);
  std::vector<double> wrong_size(d * 3, 0.0);
  std::vector<const EncoderStack*> sp3{&stacks[0]};
  std::vector<std::vector<double>*> xp3{&wrong_size};
  std::vector<std::size_t> lens3{2};
  CHECK_THROWS_AS(EncoderStack::forward_fast_multi(sp3, xp3, lens3),
                  std::invalid_argument);
}

TEST_CASE("mean pool averages rows") {
  Tape t;
  auto v = t.value(mean_pool(t, t.input(2, 2, std::vector<double>{1, 2, 3, 4})));
  CHECK(v[0] == doctest::Approx(2.0));
  CHECK(v[1] == doctest::Approx(3.0));

  Tape t2;
  auto single =
      t2.value(mean_pool(t2, t2.input(1, 3, std::vector<double>{5, 6, 7})));
  CHECK(single[0] == doctest::Approx(5.0));
  CHECK(single[2] == doctest::Approx(7.0));

  Tape t3;
  std::vector<double> rep;
  for (int i = 0; i < 100; ++i) {
    rep.push_back(0.25);
    rep.push_back(-1.5);
  }
  auto avg = t3.value(mean_pool(t3, t3.input(100, 2, rep)));
  CHECK(avg[0] == doctest::Approx(0.25));
  CHECK(avg[1] == doctest::Approx(-1.5));
}

TEST_CASE("positional encoding basics") {
  auto pe = positional_encoding(4, 6);
  REQUIRE(pe.size() == 24);
  CHECK(pe[0] == doctest::Approx(0.0));  // sin 0
  CHECK(pe[1] == doctest::Approx(1.0));  // cos 0
  // distinct positions differ
  bool differs = false;
  for (std::size_t j = 0; j < 6; ++j)
    if (pe[j] != pe[6 + j]) differs = true;
  CHECK(differs);
  // deterministic, and the cache returns the same table
  auto again = positional_encoding(4, 6);
  CHECK(pe == again);
  CHECK(positional_encoding_cached(4, 6) == pe);
}

TEST_CASE("bce loss analytic values") {
  {
    Tape t;
    std::vector<int> y = {0, 1};
    auto v = t.value(
        bce_loss(t, t.input(2, 1, std::vector<double>{0.5, 0.5}), y));
    CHECK(v[0] == doctest::Approx(std::log(2.0)));
  }
  {
    Tape t;
    std::vector<int> y = {1, 0};
    auto v = t.value(
        bce_loss(t, t.input(2, 1, std::vector<double>{1.0, 0.0}), y));
    CHECK(v[0] == doctest::Approx(0.0).epsilon(1e-5));
  }
  {
    Tape t;
    std::vector<int> y = {0};
    auto v =
        t.value(bce_loss(t, t.input(1, 1, std::vector<double>{0.9}), y));
    CHECK(v[0] == doctest::Approx(-std::log(0.1)));
  }
  {
    Tape t;
    std::vector<int> y = {2};
    CHECK_THROWS_AS(
        bce_loss(t, t.input(1, 1, std::vector<double>{0.5}), y),
        std::invalid_argument);
  }
}

TEST_CASE("bce gradient matches finite differences") {
  Rng rng(6);
  std::vector<int> y = {1, 0, 1, 1};
  const std::vector<double> p0 = random_values(4, rng, 0.05, 0.95);
  auto eval = [&](std::span<const double> p) {
    Tape t;
    return t.value(bce_loss(t, t.input(4, 1, p), y))[0];
  };
  Tape t;
  TensorRef p = t.input(4, 1, p0);
  t.backward(bce_loss(t, p, y));
  std::vector<double> analytic(t.grad(p).begin(), t.grad(p).end());
  CHECK(ad::finite_difference_check(eval, p0, analytic) < 1e-5);
}

TEST_CASE("kl divergence analytic values and positivity") {
  {
    Tape t;
    std::vector<double> target = {0.3, 0.7};
    auto v = t.value(kl_div(t, target, t.input(1, 2, target)));
    CHECK(v[0] == doctest::Approx(0.0).epsilon(1e-12));
  }
  {
    Tape t;
    std::vector<double> target = {1.0, 0.0};
    auto v = t.value(
        kl_div(t, target, t.input(1, 2, std::vector<double>{0.5, 0.5})));
    CHECK(v[0] == doctest::Approx(std::log(2.0)));
  }
  {
    Tape t;
    std::vector<double> target = {0.5, 0.5};
    CHECK_THROWS_AS(
        kl_div(t, target, t.input(1, 3, std::vector<double>{0.2, 0.3, 0.5})),
        std::invalid_argument);
  }
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng.index(4);
    auto target = random_simplex(n, rng);
    auto pred = random_simplex(n, rng);
    Tape t;
    CHECK(t.value(kl_div(t, target, t.input(1, n, pred)))[0] >= -1e-12);
    Tape t2;
    CHECK(t2.value(kl_div(t2, target, t2.input(1, n, target)))[0] ==
          doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("kl gradient matches finite differences") {
  Rng rng(8);
  const std::vector<double> target = random_simplex(3, rng);
  const std::vector<double> z0 = random_values(3, rng);
  auto eval = [&](std::span<const double> z) {
    Tape t;
    return t.value(kl_div(t, target, t.softmax_rows(t.input(1, 3, z))))[0];
  };
  Tape t;
  TensorRef z = t.input(1, 3, z0);
  t.backward(kl_div(t, target, t.softmax_rows(z)));
  std::vector<double> analytic(t.grad(z).begin(), t.grad(z).end());
  CHECK(ad::finite_difference_check(eval, z0, analytic) < 1e-5);
}
