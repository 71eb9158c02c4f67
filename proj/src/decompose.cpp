#include "slasim/decompose.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "slasim/nn.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace slasim {

// ---------------------------------------------------------------------------
// RiskModel

RiskModel::RiskModel(Rng& rng, std::size_t hidden) : hidden_(hidden) {
  w1_ = &store_.create("w1", 1, hidden_, rng, 1);
  b1_ = &store_.create_const("b1", 1, hidden_, 0.0);
  w2_ = &store_.create("w2", hidden_, hidden_, rng);
  b2_ = &store_.create_const("b2", 1, hidden_, 0.0);
  w3_ = &store_.create("w3", hidden_, 1, rng);
  b3_ = &store_.create_const("b3", 1, 1, 0.0);
}

RiskModel::RiskModel(const RiskModel& other) : hidden_(other.hidden_) {
  Rng dummy(0);
  w1_ = &store_.create("w1", 1, hidden_, dummy, 1);
  b1_ = &store_.create_const("b1", 1, hidden_, 0.0);
  w2_ = &store_.create("w2", hidden_, hidden_, dummy);
  b2_ = &store_.create_const("b2", 1, hidden_, 0.0);
  w3_ = &store_.create("w3", hidden_, 1, dummy);
  b3_ = &store_.create_const("b3", 1, 1, 0.0);
  store_.copy_values_from(other.store_);
  opt_ = other.opt_;
}

double RiskModel::predict(double tau) const {
  double out;
  predict_batch_serial(std::span(&tau, 1), std::span(&out, 1));
  return out;
}

namespace {

inline double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

void RiskModel::predict_batch_serial(std::span<const double> taus,
                                     std::span<double> out) const {
  const std::size_t h = hidden_;
  const auto& w1 = w1_->value;
  const auto& b1 = b1_->value;
  const auto& w2 = w2_->value;
  const auto& b2 = b2_->value;
  const auto& w3 = w3_->value;
  const double b3 = b3_->value[0];
  std::vector<double> z1(h), z2(h);
  for (std::size_t i = 0; i < taus.size(); ++i) {
    const double x = taus[i] * kInputScale;
    for (std::size_t j = 0; j < h; ++j) {
      const double a = x * w1[j] + b1[j];
      z1[j] = a > 0.0 ? a : 0.0;
    }
    for (std::size_t j = 0; j < h; ++j) z2[j] = b2[j];
    for (std::size_t p = 0; p < h; ++p) {
      const double v = z1[p];
      if (v == 0.0) continue;
      const double* row = &w2[p * h];
      for (std::size_t j = 0; j < h; ++j) z2[j] += v * row[j];
    }
    double acc = b3;
    for (std::size_t j = 0; j < h; ++j) acc += (z2[j] > 0.0 ? z2[j] : 0.0) * w3[j];
    out[i] = stable_sigmoid(acc);
  }
}

void RiskModel::predict_batch(std::span<const double> taus,
                              std::span<double> out) const {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (long long c = 0; c < static_cast<long long>(taus.size()); ++c) {
    const std::size_t i = static_cast<std::size_t>(c);
    predict_batch_serial(taus.subspan(i, 1), out.subspan(i, 1));
  }
#else
  predict_batch_serial(taus, out);
#endif
}

ad::TensorRef RiskModel::forward(ad::Tape& tape, ad::TensorRef x) const {
  ad::TensorRef xs = tape.scalar_mul(x, kInputScale);
  ad::TensorRef z1 = tape.relu(tape.add(
      tape.matmul(xs, tape.param(*w1_)), tape.param(*b1_)));
  ad::TensorRef z2 = tape.relu(tape.add(
      tape.matmul(z1, tape.param(*w2_)), tape.param(*b2_)));
  return tape.sigmoid(
      tape.add(tape.matmul(z2, tape.param(*w3_)), tape.param(*b3_)));
}

std::optional<double> RiskModel::ogd_update(const MemoryBuffer& buffer,
                                            int steps, double lr) {
  if (buffer.empty()) return std::nullopt;
  const std::size_t k = buffer.size();
  std::vector<double> taus(k);
  std::vector<int> labels(k);
  for (std::size_t i = 0; i < k; ++i) {
    taus[i] = buffer.at(i).tau;
    labels[i] = buffer.at(i).accepted;
  }
  auto run_loss = [&](bool update) {
    ad::Tape tape;
    ad::TensorRef x = tape.input(k, 1, taus);
    ad::TensorRef preds = forward(tape, x);
    ad::TensorRef loss = nn::bce_loss(tape, preds, labels);
    const double lv = tape.value(loss)[0];
    if (update) {
      tape.backward(loss);
      opt_.config().lr = lr;
      opt_.step(store_);
    }
    return lv;
  };
  double loss = run_loss(false);
  for (int s = 0; s < steps; ++s) run_loss(true);
  if (steps > 0) loss = run_loss(false);
  return loss;
}

ad::TensorRef GroundTruthPredictor::forward(ad::Tape& tape,
                                            ad::TensorRef x) const {
  const DomainParams& d = env_->domains()[domain_];
  const double c = env_->threshold(domain_, t_);
  return tape.sigmoid(tape.add_const(tape.scalar_mul(x, d.slope), -d.slope * c));
}

// ---------------------------------------------------------------------------
// Decomposition operators

double log_objective(std::span<const Predictor* const> models,
                     std::span<const double> assignment) {
  double obj = 0.0;
  for (std::size_t n = 0; n < models.size(); ++n) {
    obj += std::log(models[n]->predict(assignment[n]) + 1e-8);
  }
  return obj;
}

namespace {

Assignment heuristic_search_impl(std::span<const Predictor* const> models,
                                 double tau_e2e, std::size_t samples, Rng& rng,
                                 bool parallel) {
  if (samples < 1) throw std::invalid_argument("heuristic_search: M < 1");
  if (tau_e2e <= 0.0) throw std::invalid_argument("heuristic_search: tau <= 0");
  const std::size_t n = models.size();
  // candidates drawn serially so results do not depend on thread count
  std::vector<double> cand(samples * n);
  for (std::size_t i = 0; i < samples; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      cand[i * n + j] = rng.exponential();
      sum += cand[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) cand[i * n + j] *= tau_e2e / sum;
  }
  std::vector<double> scores(samples);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
  for (long long c = 0; c < static_cast<long long>(samples); ++c) {
    const std::size_t i = static_cast<std::size_t>(c);
    scores[i] =
        log_objective(models, std::span(cand.data() + i * n, n));
  }
  (void)parallel;
  std::size_t best = 0;
  for (std::size_t i = 1; i < samples; ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return Assignment(cand.begin() + best * n, cand.begin() + (best + 1) * n);
}

}  // namespace

Assignment heuristic_search(std::span<const Predictor* const> models,
                            double tau_e2e, std::size_t samples, Rng& rng) {
  return heuristic_search_impl(models, tau_e2e, samples, rng, true);
}

Assignment heuristic_search_serial(std::span<const Predictor* const> models,
                                   double tau_e2e, std::size_t samples,
                                   Rng& rng) {
  return heuristic_search_impl(models, tau_e2e, samples, rng, false);
}

Assignment refine(std::span<const Predictor* const> models, double tau_e2e,
                  const Assignment& init, std::size_t iters, double step) {
  const std::size_t n = models.size();
  if (init.size() != n) throw std::invalid_argument("refine: init size mismatch");
  if (iters == 0) return init;
  std::vector<double> z(n);
  for (std::size_t j = 0; j < n; ++j) {
    z[j] = std::log(std::max(init[j] / tau_e2e, 1e-12));
  }
  Assignment best = init;
  double best_obj = log_objective(models, init);
  for (std::size_t it = 0; it < iters; ++it) {
    ad::Tape tape;
    ad::TensorRef zl = tape.input(1, n, z);
    ad::TensorRef taus = tape.scalar_mul(tape.softmax_rows(zl), tau_e2e);
    std::vector<ad::TensorRef> terms;
    for (std::size_t j = 0; j < n; ++j) {
      ad::TensorRef xj = tape.slice_cols(taus, j, 1);
      ad::TensorRef pj = models[j]->forward(tape, xj);
      terms.push_back(tape.log(tape.add_const(pj, 1e-8)));
    }
    ad::TensorRef obj = tape.sum_all(tape.concat_rows(terms));
    const double obj_v = tape.value(obj)[0];
    if (obj_v > best_obj) {
      best_obj = obj_v;
      auto tv = tape.value(taus);
      best.assign(tv.begin(), tv.end());
    }
    tape.backward(obj);
    auto g = tape.grad(zl);
    for (std::size_t j = 0; j < n; ++j) z[j] += step * g[j];
  }
  return best;
}

Assignment nra_decompose(double tau_e2e, std::size_t n) {
  if (n < 1) throw std::invalid_argument("nra_decompose: N < 1");
  return Assignment(n, tau_e2e / static_cast<double>(n));
}

Assignment opt_decompose(const Environment& env, long t, double tau_e2e,
                         double grid_step) {
  if (grid_step <= 0.0) throw std::invalid_argument("opt_decompose: step <= 0");
  const std::size_t n = env.num_domains();
  const long long q =
      std::max<long long>(static_cast<long long>(n),
                          std::llround(tau_e2e / grid_step));
  // C(q-1, n-1) candidates; refuse absurd enumerations
  double count = 1.0;
  for (std::size_t i = 1; i < n; ++i) {
    count *= static_cast<double>(q - static_cast<long long>(i)) /
             static_cast<double>(i);
  }
  if (count > 5e6) {
    throw std::invalid_argument(
        "opt_decompose: grid too fine for this many domains; use a coarser "
        "grid step");
  }
  const double unit = tau_e2e / static_cast<double>(q);
  // positive compositions of q into n parts, lexicographic on (w_1..w_{n-1})
  std::vector<long long> w(n, 1);
  w[n - 1] = q - static_cast<long long>(n) + 1;
  Assignment best;
  double best_p = -1.0;
  Assignment tau(n);
  bool more = true;
  while (more) {
    for (std::size_t j = 0; j < n; ++j) tau[j] = unit * static_cast<double>(w[j]);
    const double p = env.e2e_acceptance(t, tau);
    if (p > best_p) {
      best_p = p;
      best = tau;
    }
    // advance the rightmost incrementable prefix position
    more = false;
    for (std::size_t i = n - 1; i-- > 0;) {
      long long prefix = 0;
      for (std::size_t j = 0; j <= i; ++j) prefix += w[j];
      // after ++w[i] and resetting the suffix to 1s, the last part must be >= 1
      if (prefix + 1 + static_cast<long long>(n - 1 - i) <= q) {
        ++w[i];
        for (std::size_t j = i + 1; j + 1 < n; ++j) w[j] = 1;
        long long rest = q;
        for (std::size_t j = 0; j + 1 < n; ++j) rest -= w[j];
        w[n - 1] = rest;
        more = true;
        break;
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Rade

Rade::Rade(std::size_t n_domains, const RadeConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), rng_(Rng(seed).derive(stream::heuristic)) {
  Rng init = Rng(seed).derive(stream::teacher_init);
  for (std::size_t n = 0; n < n_domains; ++n) {
    Rng mr = init.derive(n + 1);
    models_.emplace_back(mr);
  }
}

Assignment Rade::step(std::span<const MemoryBuffer> buffers, double tau_e2e) {
  if (buffers.size() != models_.size()) {
    throw std::invalid_argument("rade_step: buffer count mismatch");
  }
  for (std::size_t n = 0; n < models_.size(); ++n) {
    models_[n].ogd_update(buffers[n], cfg_.ogd_steps, cfg_.ogd_lr);
  }
  return decompose(tau_e2e);
}

Assignment Rade::decompose(double tau_e2e) {
  std::vector<const Predictor*> preds;
  preds.reserve(models_.size());
  for (const auto& m : models_) preds.push_back(&m);
  Assignment init =
      heuristic_search(preds, tau_e2e, cfg_.heuristic_samples, rng_);
  return refine(preds, tau_e2e, init, cfg_.refine_iters, cfg_.refine_step);
}

}  // namespace slasim
