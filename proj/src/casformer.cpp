#include "slasim/casformer.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace slasim {

using ad::Tape;
using ad::TensorRef;

std::vector<double> norm_sum(const Assignment& assignment) {
  double sum = 0.0;
  for (double v : assignment) {
    if (v <= 0.0) {
      throw std::invalid_argument("norm_sum: entries must be positive");
    }
    sum += v;
  }
  std::vector<double> out(assignment.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = assignment[i] / sum;
  return out;
}

Casformer::Casformer(const CasformerConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), opt_(ad::AdamWConfig{.lr = cfg.lr}) {
  if (cfg.n_domains < 2) {
    throw std::invalid_argument("casformer: needs at least 2 domains");
  }
  Rng rng = Rng(seed).derive(stream::student_init);
  const std::size_t d = cfg_.encoder.hidden;
  record_w_ = &store_.create("record.w", 2, d, rng, 2);
  record_b_ = &store_.create_const("record.b", 1, d, 0.0);
  budget_w_ = &store_.create("budget.w", 1, d, rng, 1);
  null_token_ = &store_.create("null_token", 1, d, rng, d);
  head_w_ = &store_.create("head.w", d, 1, rng, d);
  head_b_ = &store_.create_const("head.b", 1, 1, 0.0);
  for (std::size_t n = 0; n < cfg_.n_domains; ++n) {
    domain_encoders_.emplace_back(cfg_.encoder, store_,
                                  "enc" + std::to_string(n), rng);
  }
  aggregator_.emplace_back(cfg_.encoder, store_, "agg", rng);
}

TensorRef Casformer::encode_domain(
    Tape& tape, std::size_t n, std::span<const FeedbackRecord> records) const {
  if (n >= domain_encoders_.size()) {
    throw std::out_of_range("encode_domain: bad domain index");
  }
  const std::size_t d = cfg_.encoder.hidden;
  TensorRef tokens;
  if (records.empty()) {
    tokens = tape.param(*null_token_);
  } else {
    const std::size_t len = records.size();
    // most-recent-first rows of (tau/110, y)
    std::vector<double> raw(len * 2);
    for (std::size_t i = 0; i < len; ++i) {
      const FeedbackRecord& r = records[len - 1 - i];
      raw[i * 2] = r.tau * CasformerConfig::kBudgetScale;
      raw[i * 2 + 1] = static_cast<double>(r.accepted);
    }
    TensorRef x = tape.input(len, 2, raw);
    tokens = tape.add(tape.matmul(x, tape.param(*record_w_)),
                      tape.param(*record_b_));
    if (cfg_.positional) {
      const std::vector<double>& pe = nn::positional_encoding_cached(len, d);
      tokens = tape.add(tokens, tape.input(len, d, pe));
    }
  }
  return nn::mean_pool(tape, domain_encoders_[n].forward(tape, tokens));
}

Casformer::Prediction Casformer::predict(
    Tape& tape, std::span<const std::vector<FeedbackRecord>> buffers,
    double tau_e2e) const {
  if (buffers.size() != cfg_.n_domains || cfg_.n_domains < 2) {
    throw std::invalid_argument("predict: need one buffer per domain (N >= 2)");
  }
  if (tau_e2e <= 0.0) throw std::invalid_argument("predict: tau_e2e <= 0");
  const std::size_t n = cfg_.n_domains;
  std::vector<TensorRef> embeds;
  for (std::size_t i = 0; i < n; ++i) {
    embeds.push_back(encode_domain(tape, i, buffers[i]));
  }
  TensorRef h = tape.concat_rows(embeds);  // (N, d)
  TensorRef budget = tape.scalar_mul(tape.param(*budget_w_),
                                     tau_e2e * CasformerConfig::kBudgetScale);
  TensorRef ht = tape.add(h, budget);
  TensorRef agg = aggregator_[0].forward(tape, ht);
  TensorRef logits = tape.add(tape.matmul(agg, tape.param(*head_w_)),
                              tape.param(*head_b_));  // (N, 1)
  TensorRef ratios = tape.softmax_rows(tape.transpose(logits));  // (1, N)
  Prediction pred;
  pred.ratio_node = ratios;
  auto rv = tape.value(ratios);
  pred.ratios.assign(rv.begin(), rv.end());
  pred.assignment.resize(n);
  for (std::size_t i = 0; i < n; ++i) pred.assignment[i] = pred.ratios[i] * tau_e2e;
  return pred;
}

Casformer::Prediction Casformer::predict(Tape& tape,
                                         std::span<const MemoryBuffer> buffers,
                                         double tau_e2e) const {
  std::vector<std::vector<FeedbackRecord>> snaps;
  snaps.reserve(buffers.size());
  for (const auto& b : buffers) snaps.push_back(b.snapshot());
  return predict(tape, snaps, tau_e2e);
}

// Tape-free forward pass. The tape-based predict() is the reference this is
// tested against; this path exists because inference latency is the product.
std::vector<double> Casformer::infer_ratios(
    const std::function<std::span<const FeedbackRecord>(std::size_t)>& buffer_at,
    double tau_e2e) const {
  if (tau_e2e <= 0.0) throw std::invalid_argument("infer: tau_e2e <= 0");
  const std::size_t n = cfg_.n_domains;
  const std::size_t d = cfg_.encoder.hidden;
  // token buffers for every domain, then one fused lane-parallel encoder
  // pass over all of them
  std::vector<std::vector<double>> tokens(n);
  std::vector<std::size_t> lens(n);
  for (std::size_t dom = 0; dom < n; ++dom) {
    std::span<const FeedbackRecord> records = buffer_at(dom);
    std::vector<double>& x = tokens[dom];
    if (records.empty()) {
      lens[dom] = 1;
      x = null_token_->value;
      continue;
    }
    const std::size_t len = records.size();
    lens[dom] = len;
    x.assign(len * d, 0.0);
    const auto& w = record_w_->value;
    const auto& b = record_b_->value;
    for (std::size_t i = 0; i < len; ++i) {
      const FeedbackRecord& r = records[len - 1 - i];
      const double tau = r.tau * CasformerConfig::kBudgetScale;
      const double y = static_cast<double>(r.accepted);
      double* row = &x[i * d];
      for (std::size_t j = 0; j < d; ++j)
        row[j] = tau * w[j] + y * w[d + j] + b[j];
    }
    if (cfg_.positional) {
      const std::vector<double>& pe = nn::positional_encoding_cached(len, d);
      for (std::size_t i = 0; i < len * d; ++i) x[i] += pe[i];
    }
  }
  std::vector<const nn::EncoderStack*> stacks(n);
  std::vector<std::vector<double>*> bufs(n);
  for (std::size_t dom = 0; dom < n; ++dom) {
    stacks[dom] = &domain_encoders_[dom];
    bufs[dom] = &tokens[dom];
  }
  nn::EncoderStack::forward_fast_multi(stacks, bufs, lens);
  std::vector<double> embeds(n * d);
  for (std::size_t dom = 0; dom < n; ++dom) {
    const std::vector<double>& x = tokens[dom];
    double* h = &embeds[dom * d];
    for (std::size_t j = 0; j < d; ++j) h[j] = 0.0;
    for (std::size_t i = 0; i < lens[dom]; ++i)
      for (std::size_t j = 0; j < d; ++j) h[j] += x[i * d + j];
    const double inv = 1.0 / static_cast<double>(lens[dom]);
    for (std::size_t j = 0; j < d; ++j) h[j] *= inv;
  }
  const double budget = tau_e2e * CasformerConfig::kBudgetScale;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      embeds[i * d + j] += budget * budget_w_->value[j];
  aggregator_[0].forward_fast(embeds, n);
  std::vector<double> logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = head_b_->value[0];
    for (std::size_t j = 0; j < d; ++j)
      acc += embeds[i * d + j] * head_w_->value[j];
    logits[i] = acc;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& l : logits) {
    l = std::exp(l - mx);
    sum += l;
  }
  for (double& l : logits) l /= sum;
  return logits;
}

Assignment Casformer::infer(std::span<const MemoryBuffer> buffers,
                            double tau_e2e) const {
  if (buffers.size() != cfg_.n_domains) {
    throw std::invalid_argument("infer: need one buffer per domain");
  }
  std::vector<std::vector<FeedbackRecord>> snaps;
  snaps.reserve(buffers.size());
  for (const auto& b : buffers) snaps.push_back(b.snapshot());
  return infer(std::span<const std::vector<FeedbackRecord>>(snaps), tau_e2e);
}

Assignment Casformer::infer(
    std::span<const std::vector<FeedbackRecord>> buffers,
    double tau_e2e) const {
  if (buffers.size() != cfg_.n_domains) {
    throw std::invalid_argument("infer: need one buffer per domain");
  }
  std::vector<double> ratios = infer_ratios(
      [&](std::size_t n) {
        return std::span<const FeedbackRecord>(buffers[n]);
      },
      tau_e2e);
  Assignment out(ratios.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ratios[i] * tau_e2e;
  return out;
}

double Casformer::train_step(const TrainingSample& sample) {
  if (sample.target.size() != cfg_.n_domains) {
    throw std::invalid_argument("train_step: target length mismatch");
  }
  Tape tape;
  // register every parameter so all of them carry gradients after backward
  for (ad::Param* p : store_.params()) tape.param(*p);
  Prediction pred = predict(tape, std::span(sample.buffers), sample.tau_e2e);
  TensorRef loss = nn::kl_div(tape, sample.target, pred.ratio_node);
  const double loss_v = tape.value(loss)[0];
  tape.backward(loss);
  opt_.step(store_);
  return loss_v;
}

double Casformer::train_offline(std::span<const TrainingSample> dataset,
                                std::size_t epochs, Rng& rng) {
  if (dataset.empty()) {
    throw std::invalid_argument("train_offline: empty dataset");
  }
  double last_epoch_mean = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    double sum = 0.0;
    for (std::size_t idx : order) sum += train_step(dataset[idx]);
    last_epoch_mean = sum / static_cast<double>(dataset.size());
  }
  return last_epoch_mean;
}

OnlineTrainingResult train_online(Casformer& model, Rade& teacher,
                                  std::vector<MemoryBuffer>& buffers,
                                  Environment& env, const Trace& trace,
                                  double corruption_rate, Rng& corruption_rng) {
  const std::size_t n = env.num_domains();
  if (buffers.size() != n) {
    throw std::invalid_argument("train_online: buffer count mismatch");
  }
  OnlineTrainingResult result;
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const double tau_e2e = trace[t];
    TrainingSample sample;
    sample.tau_e2e = tau_e2e;
    for (const auto& b : buffers) sample.buffers.push_back(b.snapshot());
    Assignment target = teacher.step(buffers, tau_e2e);
    sample.target = norm_sum(target);
    result.loss_history.push_back(model.train_step(sample));
    result.dataset.push_back(std::move(sample));
    for (std::size_t d = 0; d < n; ++d) {
      FeedbackRecord rec =
          env.sample_feedback(d, static_cast<long>(t), target[d]);
      buffers[d].push(corrupt(rec, corruption_rate, corruption_rng));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpointing

void Casformer::save_checkpoint(const std::string& path) const {
  nlohmann::json j;
  j["format"] = "casformer-checkpoint-v1";
  j["n_domains"] = cfg_.n_domains;
  j["num_layers"] = cfg_.encoder.num_layers;
  j["hidden"] = cfg_.encoder.hidden;
  j["mlp"] = cfg_.encoder.mlp;
  j["heads"] = cfg_.encoder.heads;
  j["positional"] = cfg_.positional;
  j["lr"] = cfg_.lr;
  nlohmann::json params = nlohmann::json::object();
  for (const ad::Param* p : store_.params()) {
    params[p->name] = p->value;
  }
  j["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump();
}

Casformer Casformer::load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "casformer-checkpoint-v1") {
    throw std::runtime_error("unrecognized checkpoint format in " + path);
  }
  CasformerConfig cfg;
  cfg.n_domains = j.at("n_domains").get<std::size_t>();
  cfg.encoder.num_layers = j.at("num_layers").get<std::size_t>();
  cfg.encoder.hidden = j.at("hidden").get<std::size_t>();
  cfg.encoder.mlp = j.at("mlp").get<std::size_t>();
  cfg.encoder.heads = j.at("heads").get<std::size_t>();
  cfg.positional = j.at("positional").get<bool>();
  cfg.lr = j.at("lr").get<double>();
  Casformer model(cfg, 0);
  const auto& params = j.at("params");
  for (ad::Param* p : model.store_.params()) {
    auto it = params.find(p->name);
    if (it == params.end()) {
      throw std::runtime_error("checkpoint missing parameter " + p->name);
    }
    std::vector<double> vals = it->get<std::vector<double>>();
    if (vals.size() != p->size()) {
      throw std::runtime_error("checkpoint size mismatch for " + p->name);
    }
    p->value = std::move(vals);
  }
  return model;
}

Casformer Casformer::load_checkpoint(const std::string& path,
                                     std::size_t expect_domains) {
  Casformer model = load_checkpoint(path);
  if (model.cfg_.n_domains != expect_domains) {
    throw std::runtime_error(
        "checkpoint domain count " + std::to_string(model.cfg_.n_domains) +
        " does not match expected " + std::to_string(expect_domains));
  }
  return model;
}

}  // namespace slasim
