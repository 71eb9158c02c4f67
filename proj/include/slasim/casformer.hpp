#pragma once

#include <functional>
#include <string>
#include <vector>

#include "slasim/decompose.hpp"
#include "slasim/nn.hpp"

namespace slasim {

struct CasformerConfig {
  std::size_t n_domains = 3;
  nn::EncoderConfig encoder{};  // shared dims for Layer 1 and Layer 2
  bool positional = true;       // recency positions at Layer 1
  double lr = 0.01;
  static constexpr double kBudgetScale = 1.0 / 110.0;
};

// Snapshot of the per-domain buffers plus the budget and teacher target,
// stored for offline replay.
struct TrainingSample {
  std::vector<std::vector<FeedbackRecord>> buffers;
  double tau_e2e = 0.0;
  std::vector<double> target;  // phi*, a simplex vector
};

// normSum: entry-wise division by the sum. All entries must be positive.
std::vector<double> norm_sum(const Assignment& assignment);

// The student: N per-domain Transformer feedback encoders (Layer 1), a
// budget-conditioned cross-domain aggregator (Layer 2), and a shared linear
// head whose softmax yields decomposition ratios.
class Casformer {
 public:
  Casformer(const CasformerConfig& cfg, std::uint64_t seed);

  struct Prediction {
    std::vector<double> ratios;
    Assignment assignment;
    ad::TensorRef ratio_node;  // (1, N) on the tape used for the forward
  };

  // Full forward pass on the given tape.
  Prediction predict(ad::Tape& tape,
                     std::span<const std::vector<FeedbackRecord>> buffers,
                     double tau_e2e) const;
  Prediction predict(ad::Tape& tape, std::span<const MemoryBuffer> buffers,
                     double tau_e2e) const;

  // Layer-1 embedding of one domain buffer (most-recent-first tokens; an
  // empty buffer encodes the learned null token).
  ad::TensorRef encode_domain(ad::Tape& tape, std::size_t n,
                              std::span<const FeedbackRecord> records) const;

  // Forward-only inference; no parameter mutation. Runs a tape-free forward
  // pass (the encoders may execute in parallel); predict() is the reference
  // implementation it is tested against.
  Assignment infer(std::span<const MemoryBuffer> buffers, double tau_e2e) const;
  Assignment infer(std::span<const std::vector<FeedbackRecord>> buffers,
                   double tau_e2e) const;

  // One forward + backward + AdamW step on KL(target || predicted).
  // Returns the pre-step loss.
  double train_step(const TrainingSample& sample);

  // epochs shuffled passes over the dataset. Returns mean loss of the final
  // epoch (NaN when epochs == 0).
  double train_offline(std::span<const TrainingSample> dataset,
                       std::size_t epochs, Rng& rng);

  const CasformerConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return store_; }
  const ad::ParamStore& params() const { return store_; }

  // JSON checkpoint: config plus named parameter arrays.
  void save_checkpoint(const std::string& path) const;
  static Casformer load_checkpoint(const std::string& path);
  static Casformer load_checkpoint(const std::string& path,
                                   std::size_t expect_domains);

 private:
  std::vector<double> infer_ratios(
      const std::function<std::span<const FeedbackRecord>(std::size_t)>&
          buffer_at,
      double tau_e2e) const;

  CasformerConfig cfg_;
  ad::ParamStore store_;
  std::vector<nn::EncoderStack> domain_encoders_;
  std::vector<nn::EncoderStack> aggregator_;  // exactly one stack
  ad::Param *record_w_, *record_b_;           // 2 -> d
  ad::Param* budget_w_;                       // 1 -> d
  ad::Param *head_w_, *head_b_;               // d -> 1, shared across tokens
  ad::Param* null_token_;                     // 1 x d
  ad::AdamW opt_;
};

struct OnlineTrainingResult {
  std::vector<double> loss_history;
  std::vector<TrainingSample> dataset;
};

// Alg. 2: co-run the student with the RADE teacher over a trace. Buffers are
// shared between teacher and student; feedback comes from the teacher's
// assignments, optionally label-corrupted at insertion.
OnlineTrainingResult train_online(Casformer& model, Rade& teacher,
                                  std::vector<MemoryBuffer>& buffers,
                                  Environment& env, const Trace& trace,
                                  double corruption_rate, Rng& corruption_rng);

}  // namespace slasim
