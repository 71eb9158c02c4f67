#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "slasim/rng.hpp"

namespace slasim::ad {

// Learnable parameter. Values live here permanently; gradients are filled
// in by Tape::backward and consumed by AdamW. m/v are the optimizer moments.
struct Param {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<double> m, v;
  bool has_grad = false;

  std::size_t size() const { return rows * cols; }
};

class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  // uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]
  Param& create(const std::string& name, std::size_t rows, std::size_t cols,
                Rng& rng, std::size_t fan_in = 0);
  Param& create_const(const std::string& name, std::size_t rows,
                      std::size_t cols, double fill);

  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Param*>& params() { return order_; }
  const std::vector<Param*>& params() const { return order_; }
  std::size_t total_values() const;

  // deep copy of values and optimizer state
  void copy_values_from(const ParamStore& other);

 private:
  std::vector<std::unique_ptr<Param>> owned_;
  std::vector<Param*> order_;
  std::unordered_map<std::string, Param*> index_;
};

// Handle into a Tape node. All tensors are dense row-major 2-D matrices of
// doubles; scalars are 1x1.
struct TensorRef {
  int id = -1;
};

// Eager-recording reverse-mode tape. One tape per forward/backward pass,
// confined to one thread.
class Tape {
 public:
  TensorRef input(std::size_t rows, std::size_t cols,
                  std::span<const double> values);
  TensorRef scalar(double v);
  // Registers a parameter as a leaf (once per tape; repeated calls return
  // the same node). After backward() its gradient is copied into the Param.
  TensorRef param(Param& p);

  TensorRef matmul(TensorRef a, TensorRef b);
  TensorRef transpose(TensorRef a);
  TensorRef add(TensorRef a, TensorRef b);  // same shape, or b 1 x cols
  TensorRef sub(TensorRef a, TensorRef b);  // same shape
  TensorRef mul(TensorRef a, TensorRef b);  // elementwise, same shape
  TensorRef scalar_mul(TensorRef a, double c);
  TensorRef add_const(TensorRef a, double c);
  TensorRef exp(TensorRef a);
  TensorRef log(TensorRef a);  // inputs <= 0 -> domain error; floor 1e-12
  TensorRef relu(TensorRef a);
  TensorRef sigmoid(TensorRef a);
  TensorRef clamp(TensorRef a, double lo, double hi);
  TensorRef softmax_rows(TensorRef a);
  // Fused softmax(q k^T * scale) v for one attention head; q/k/v are
  // (L, dh). Equivalent to the composed ops but avoids materializing the
  // L x L intermediates, which dominate encoder cost at long sequences.
  TensorRef attention(TensorRef q, TensorRef k, TensorRef v, double scale);
  TensorRef layer_norm(TensorRef x, TensorRef gamma, TensorRef beta,
                       double eps);
  TensorRef mean_rows(TensorRef a);  // (L,d) -> (1,d)
  TensorRef mean_all(TensorRef a);   // scalar
  TensorRef sum_all(TensorRef a);    // scalar
  TensorRef concat_rows(std::span<const TensorRef> parts);
  TensorRef concat_cols(std::span<const TensorRef> parts);
  TensorRef slice_cols(TensorRef a, std::size_t start, std::size_t count);
  TensorRef slice_rows(TensorRef a, std::size_t start, std::size_t count);

  // Reverse sweep from a scalar loss. Throws if the tape is stale (backward
  // already ran) or the loss is not scalar. Every Param registered on this
  // tape receives a gradient (zero if unreachable).
  void backward(TensorRef loss);

  std::span<const double> value(TensorRef t) const;
  std::span<const double> grad(TensorRef t) const;
  std::size_t rows(TensorRef t) const;
  std::size_t cols(TensorRef t) const;
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    std::size_t rows, cols;
    std::vector<double> val;
    std::vector<double> grad;
    std::function<void()> back;  // empty for leaves
    Param* bound = nullptr;
  };

  int push(std::size_t rows, std::size_t cols);
  Node& node(TensorRef t);
  const Node& node(TensorRef t) const;
  void check(TensorRef t) const;

  std::vector<Node> nodes_;
  std::unordered_map<const Param*, int> param_nodes_;
  bool backward_done_ = false;
};

// Decoupled weight decay Adam. Moments are stored on the Params.
struct AdamWConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // One update over every param in the store. Throws naming the parameter
  // if one is missing its gradient.
  void step(ParamStore& store);
  long step_count() const { return t_; }
  AdamWConfig& config() { return cfg_; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
};

// Central finite-difference oracle: max over coordinates of
// |analytic - central| / max(|analytic|, 1e-8).
// f evaluates the scalar objective at x; analytic is dL/dx at x.
double finite_difference_check(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x, std::span<const double> analytic,
    double h = 1e-5);

}  // namespace slasim::ad
