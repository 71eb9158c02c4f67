#pragma once

#include <span>
#include <string>
#include <vector>

#include "slasim/autodiff.hpp"

namespace slasim::nn {

using ad::Param;
using ad::ParamStore;
using ad::Tape;
using ad::TensorRef;

struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t hidden = 16;
  std::size_t mlp = 64;
  std::size_t heads = 2;
};

// Pre-norm Transformer encoder stack: per layer
//   x += MHSA(LN(x));  x += MLP(LN(x))   with ReLU in the MLP.
// Parameters are created in the given store under `prefix`.
class EncoderStack {
 public:
  EncoderStack(const EncoderConfig& cfg, ParamStore& store,
               const std::string& prefix, Rng& rng);

  // tokens: (L, d) with L >= 1. Returns (L, d).
  TensorRef forward(Tape& tape, TensorRef tokens) const;

  // Tape-free forward used on the latency-critical inference path; updates
  // the (L, d) row-major buffer in place. Matches forward() to float noise
  // (a polynomial exp replaces std::exp inside attention).
  void forward_fast(std::vector<double>& x, std::size_t L) const;

  // Fused forward over several same-shape stacks, 8 SIMD lanes wide with one
  // stack per lane, so the cost is nearly independent of the stack count on
  // hosts with wide vectors. Each xs[i] is a (lens[i], d) buffer updated in
  // place exactly as forward_fast would.
  static void forward_fast_multi(std::span<const EncoderStack* const> stacks,
                                 std::span<std::vector<double>* const> xs,
                                 std::span<const std::size_t> lens);

  const EncoderConfig& config() const { return cfg_; }

 private:
  struct Layer {
    Param *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    Param *ln1_g, *ln1_b, *ln2_g, *ln2_b;
    Param *w1, *b1, *w2, *b2;
  };
  EncoderConfig cfg_;
  std::vector<Layer> layers_;
};

// Arithmetic mean over sequence positions: (L, d) -> (1, d). L >= 1.
TensorRef mean_pool(Tape& tape, TensorRef tokens);

// Sinusoidal encoding indexed by recency; row 0 is the most recent record.
// Returns a (len x d) row-major matrix.
std::vector<double> positional_encoding(std::size_t len, std::size_t d);

// Cached variant (the table is pure in len and d, and rebuilding it per
// forward pass costs more than the encoder itself at long sequences).
const std::vector<double>& positional_encoding_cached(std::size_t len,
                                                      std::size_t d);

// Mean binary cross-entropy. preds is (K, 1); labels must be 0/1.
// Predictions are clamped to [1e-7, 1 - 1e-7].
TensorRef bce_loss(Tape& tape, TensorRef preds, std::span<const int> labels);

// Forward KL(target || pred). pred is (1, N) on the tape, target a constant
// simplex vector. Pred entries are floored at 1e-8 before the log.
TensorRef kl_div(Tape& tape, std::span<const double> target, TensorRef pred);

}  // namespace slasim::nn
