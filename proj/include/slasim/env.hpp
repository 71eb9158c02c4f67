#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "slasim/rng.hpp"

namespace slasim {

// One (proposed partial delay, binary accept) observation for one domain.
struct FeedbackRecord {
  double tau = 0.0;  // ms, > 0
  int accepted = 0;  // {0, 1}
  long step = 0;
};

using Trace = std::vector<double>;  // per-step E2E delay budgets (ms)
using Assignment = std::vector<double>;

// Ground-truth admission behavior of one domain: a sigmoid in the assigned
// delay with a sinusoidally drifting threshold.
struct DomainParams {
  double slope = 0.25;        // k, 1/ms, > 0
  double base_threshold = 30; // c, ms
  double drift_amp = 5.0;     // a, ms
  double drift_period = 80;   // P, steps
  double drift_phase = 0.0;   // psi, radians
};

struct EnvRanges {
  double slope_lo = 0.1, slope_hi = 0.5;
  double thresh_lo = 20.0, thresh_hi = 45.0;
  double amp_lo = 0.0, amp_hi = 10.0;
  double period_lo = 40.0, period_hi = 120.0;
};

// Time-varying multi-domain admission environment. Feedback sampling uses
// the environment's own seeded stream; the domain parameters themselves are
// drawn once via random_domains().
class Environment {
 public:
  Environment(std::vector<DomainParams> domains, std::uint64_t feedback_seed);

  static std::vector<DomainParams> random_domains(std::size_t n, Rng& rng,
                                                  const EnvRanges& ranges = {});

  std::size_t num_domains() const { return domains_.size(); }
  const std::vector<DomainParams>& domains() const { return domains_; }

  // c_n(t) = c_n + a_n * sin(2 pi t / P_n + psi_n)
  double threshold(std::size_t n, long t) const;

  // sigma(k_n * (tau - c_n(t))); monotone non-decreasing in tau.
  double acceptance_prob(std::size_t n, long t, double tau) const;

  // product over domains of acceptance_prob
  double e2e_acceptance(long t, std::span<const double> assignment) const;

  FeedbackRecord sample_feedback(std::size_t n, long t, double tau);

 private:
  void check_domain(std::size_t n) const;
  std::vector<DomainParams> domains_;
  Rng feedback_rng_;
};

// With probability rate, flips the label; tau unchanged. rate outside [0,1]
// is an error. Always consumes one draw so streams stay aligned across rates.
FeedbackRecord corrupt(const FeedbackRecord& rec, double rate, Rng& rng);

// T i.i.d. uniform draws in [lo, hi].
Trace generate_trace(std::size_t t_steps, double lo, double hi, Rng& rng);

}  // namespace slasim
