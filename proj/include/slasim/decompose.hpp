#pragma once

#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "slasim/autodiff.hpp"
#include "slasim/env.hpp"
#include "slasim/rng.hpp"

namespace slasim {

// Bounded FIFO of the most recent feedback records for one domain.
class MemoryBuffer {
 public:
  explicit MemoryBuffer(std::size_t capacity = 100) : capacity_(capacity) {}

  void push(const FeedbackRecord& rec) {
    q_.push_back(rec);
    if (q_.size() > capacity_) q_.pop_front();
  }

  std::size_t size() const { return q_.size(); }
  bool empty() const { return q_.empty(); }
  std::size_t capacity() const { return capacity_; }

  // oldest -> newest
  const FeedbackRecord& at(std::size_t i) const { return q_[i]; }
  std::vector<FeedbackRecord> snapshot() const {
    return {q_.begin(), q_.end()};
  }

 private:
  std::size_t capacity_;
  std::deque<FeedbackRecord> q_;
};

// Anything that maps an assigned delay to an acceptance probability and can
// expose that mapping on a tape (needed by the gradient refiner).
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual double predict(double tau) const = 0;
  // x is a (1,1) tensor holding tau; returns a (1,1) probability.
  virtual ad::TensorRef forward(ad::Tape& tape, ad::TensorRef x) const = 0;
};

// Per-domain acceptance estimator: MLP 1 -> 32 -> 32 -> 1 with ReLU hidden
// activations and a sigmoid head. Input is the delay normalized by 110 ms.
class RiskModel : public Predictor {
 public:
  explicit RiskModel(Rng& rng, std::size_t hidden = 32);
  RiskModel(const RiskModel& other);
  RiskModel& operator=(const RiskModel&) = delete;

  double predict(double tau) const override;
  ad::TensorRef forward(ad::Tape& tape, ad::TensorRef x) const override;

  // Batched forward-only path used by the heuristic search hot loop.
  // The OpenMP variant chunks candidates across threads; the serial variant
  // is the reference it is tested against.
  void predict_batch(std::span<const double> taus, std::span<double> out) const;
  void predict_batch_serial(std::span<const double> taus,
                            std::span<double> out) const;

  // `steps` full-buffer Adam gradient steps on the mean BCE loss (online
  // updates with a persistent, warm-started optimizer state).
  // Empty buffer: no-op, returns nullopt. Otherwise returns the final loss.
  std::optional<double> ogd_update(const MemoryBuffer& buffer, int steps,
                                   double lr);

  ad::ParamStore& params() { return store_; }
  const ad::ParamStore& params() const { return store_; }

  static constexpr double kInputScale = 1.0 / 110.0;

 private:
  std::size_t hidden_;
  ad::ParamStore store_;
  ad::Param *w1_, *b1_, *w2_, *b2_, *w3_, *b3_;
  ad::AdamW opt_;
};

// Ground-truth predictor for one environment domain at a fixed time step.
// Used by tests and the selftest oracle suite.
class GroundTruthPredictor : public Predictor {
 public:
  GroundTruthPredictor(const Environment& env, std::size_t domain, long t)
      : env_(&env), domain_(domain), t_(t) {}
  double predict(double tau) const override {
    return env_->acceptance_prob(domain_, t_, tau);
  }
  ad::TensorRef forward(ad::Tape& tape, ad::TensorRef x) const override;

 private:
  const Environment* env_;
  std::size_t domain_;
  long t_;
};

// Model objective used for candidate scoring: sum_n log(p_n + 1e-8).
double log_objective(std::span<const Predictor* const> models,
                     std::span<const double> assignment);

// Uniform simplex sampling (flat Dirichlet via normalized exponentials) of
// `samples` candidates scaled by tau_e2e; returns the best under the model
// objective, ties broken by first occurrence (index-ordered argmax).
Assignment heuristic_search(std::span<const Predictor* const> models,
                            double tau_e2e, std::size_t samples, Rng& rng);
// Serial reference implementation, kept for testing the parallel kernel.
Assignment heuristic_search_serial(std::span<const Predictor* const> models,
                                   double tau_e2e, std::size_t samples,
                                   Rng& rng);

// Softmax-reparameterized gradient ascent on the log objective, started from
// `init`. Returns the best iterate visited (never worse than init).
Assignment refine(std::span<const Predictor* const> models, double tau_e2e,
                  const Assignment& init, std::size_t iters, double step);

// Even split baseline.
Assignment nra_decompose(double tau_e2e, std::size_t n);

// Exhaustive grid search against the ground truth: enumerates all positive
// compositions of tau_e2e at roughly grid_step resolution and returns the
// e2e_acceptance maximizer (first in lexicographic order on ties).
Assignment opt_decompose(const Environment& env, long t, double tau_e2e,
                         double grid_step);

struct RadeConfig {
  std::size_t buffer_capacity = 100;
  int ogd_steps = 5;
  double ogd_lr = 0.01;
  std::size_t heuristic_samples = 10000;
  std::size_t refine_iters = 50;
  double refine_step = 0.5;
};

// Online teacher: per-domain risk models updated by OGD over FIFO buffers,
// decomposition by heuristic search plus gradient refinement.
class Rade {
 public:
  Rade(std::size_t n_domains, const RadeConfig& cfg, std::uint64_t seed);
  Rade(const Rade& other) = default;

  // One full step: OGD update on every non-empty buffer, then heuristic
  // search and refinement for the given budget.
  Assignment step(std::span<const MemoryBuffer> buffers, double tau_e2e);

  // Decomposition only (no model update); used for latency probes.
  Assignment decompose(double tau_e2e);

  std::vector<RiskModel>& models() { return models_; }
  RadeConfig& config() { return cfg_; }
  const RadeConfig& config() const { return cfg_; }

 private:
  RadeConfig cfg_;
  std::vector<RiskModel> models_;
  Rng rng_;
};

}  // namespace slasim
