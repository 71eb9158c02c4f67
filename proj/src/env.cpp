#include "slasim/env.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace slasim {

Environment::Environment(std::vector<DomainParams> domains,
                         std::uint64_t feedback_seed)
    : domains_(std::move(domains)), feedback_rng_(feedback_seed) {
  if (domains_.size() < 2) {
    throw std::invalid_argument("environment requires at least 2 domains");
  }
  for (const auto& d : domains_) {
    if (d.slope <= 0.0 || d.base_threshold <= 0.0 || d.drift_amp < 0.0 ||
        d.drift_period < 1.0) {
      throw std::invalid_argument("invalid domain parameters");
    }
  }
}

std::vector<DomainParams> Environment::random_domains(std::size_t n, Rng& rng,
                                                      const EnvRanges& r) {
  std::vector<DomainParams> out(n);
  for (auto& d : out) {
    d.slope = rng.uniform(r.slope_lo, r.slope_hi);
    d.base_threshold = rng.uniform(r.thresh_lo, r.thresh_hi);
    d.drift_amp = rng.uniform(r.amp_lo, r.amp_hi);
    d.drift_period = rng.uniform(r.period_lo, r.period_hi);
    d.drift_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  return out;
}

void Environment::check_domain(std::size_t n) const {
  if (n >= domains_.size()) {
    throw std::out_of_range("invalid domain index " + std::to_string(n));
  }
}

double Environment::threshold(std::size_t n, long t) const {
  check_domain(n);
  const DomainParams& d = domains_[n];
  return d.base_threshold +
         d.drift_amp * std::sin(2.0 * std::numbers::pi *
                                    static_cast<double>(t) / d.drift_period +
                                d.drift_phase);
}

double Environment::acceptance_prob(std::size_t n, long t, double tau) const {
  check_domain(n);
  if (tau <= 0.0) {
    throw std::invalid_argument("acceptance_prob: tau must be positive");
  }
  const double x = domains_[n].slope * (tau - threshold(n, t));
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

double Environment::e2e_acceptance(long t,
                                   std::span<const double> assignment) const {
  if (assignment.size() != domains_.size()) {
    throw std::invalid_argument("e2e_acceptance: assignment length mismatch");
  }
  double p = 1.0;
  for (std::size_t n = 0; n < domains_.size(); ++n) {
    p *= acceptance_prob(n, t, assignment[n]);
  }
  return p;
}

FeedbackRecord Environment::sample_feedback(std::size_t n, long t, double tau) {
  const double p = acceptance_prob(n, t, tau);
  FeedbackRecord rec;
  rec.tau = tau;
  rec.step = t;
  rec.accepted = feedback_rng_.bernoulli(p) ? 1 : 0;
  return rec;
}

FeedbackRecord corrupt(const FeedbackRecord& rec, double rate, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) {
    throw std::invalid_argument("corrupt: rate must be in [0,1]");
  }
  FeedbackRecord out = rec;
  if (rng.uniform() < rate) out.accepted = 1 - out.accepted;
  return out;
}

Trace generate_trace(std::size_t t_steps, double lo, double hi, Rng& rng) {
  if (t_steps < 1) throw std::invalid_argument("generate_trace: T < 1");
  if (lo > hi) throw std::invalid_argument("generate_trace: lo > hi");
  Trace tr(t_steps);
  for (auto& v : tr) v = rng.uniform(lo, hi);
  return tr;
}

}  // namespace slasim
