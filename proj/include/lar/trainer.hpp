#pragma once
// Optimization: multi-sample Monte-Carlo loss, Adam with per-group learning
// rates, cosine schedule, probability decay, and the two-stage
// pretrain -> LR -> LAR pipeline.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "lar/data.hpp"
#include "lar/model.hpp"

namespace lar {

struct TrainConfig {
  double lr = 0.01;
  double last_fc_lr_mult = 0.1;
  int epochs = 300;
  int batch_size = 64;
  int mc_samples = 2;       // S in the multi-sample loss
  double tau = 1.2;         // Gumbel-Softmax temperature, fixed
  double prob_decay = 1e-12;
  double weight_decay = 1e-4;  // full-precision parameters only
  RunMode mode = RunMode::LAR;
  ContinuousAct lr_act = ContinuousAct::Relu;
  bool hard = true;
  uint64_t seed = 0;
  AugmentationPolicy augment{0, 0.0, false};

  void validate() const {
    if (lr < 0 || last_fc_lr_mult < 0 || prob_decay < 0 || weight_decay < 0)
      throw std::invalid_argument("TrainConfig: rates must be >= 0");
    if (mc_samples < 1) throw std::invalid_argument("TrainConfig: S >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch >= 1");
  }
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0, test_acc = 0.0;
  double lr = 0.0;
  double sparsity = 0.0;
  std::vector<double> weight_entropy_per_layer;
  std::vector<double> act_entropy_per_layer;
};

inline double cosine_lr(int epoch, int total_epochs, double base_lr) {
  if (epoch < 0 || epoch > total_epochs)
    throw std::invalid_argument("cosine_lr: epoch out of range");
  return base_lr * 0.5 *
         (1.0 + std::cos(M_PI * (double)epoch / (double)total_epochs));
}

// ---- Adam -----------------------------------------------------------------

template <typename S>
struct AdamState {
  struct Slot {
    std::vector<S> m, v;
  };
  std::vector<Slot> slots;
  int64_t step = 0;
  int64_t skipped = 0;
  S beta1 = (S)0.9, beta2 = (S)0.999, eps = (S)1e-8;
};

// One Adam update over all parameter groups.  A non-finite gradient anywhere
// skips the whole step (logged), leaving parameters and moments untouched.
template <typename S>
void adam_step(std::vector<ParamRef<S>>& params, AdamState<S>& state,
               double base_lr, double last_fc_lr_mult, double weight_decay) {
  if (state.slots.size() != params.size()) {
    state.slots.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m.assign(params[i].tensor.numel(), S(0));
      state.slots[i].v.assign(params[i].tensor.numel(), S(0));
    }
  }
  for (auto& p : params)
    for (S g : p.tensor.grad())
      if (!std::isfinite((double)g)) {
        ++state.skipped;
        std::cerr << "adam_step: non-finite gradient, step skipped (total "
                  << state.skipped << ")\n";
        return;
      }
  ++state.step;
  S bc1 = S(1) - std::pow(state.beta1, (S)state.step);
  S bc2 = S(1) - std::pow(state.beta2, (S)state.step);
  for (size_t i = 0; i < params.size(); ++i) {
    ParamRef<S>& p = params[i];
    double lr = base_lr;
    double wd = 0.0;
    if (p.group == ParamGroup::LastLayer) {
      lr *= last_fc_lr_mult;
      wd = weight_decay;
    } else if (p.group == ParamGroup::FullPrecision) {
      wd = weight_decay;
    }
    auto& data = p.tensor.data();
    auto& grad = p.tensor.grad();
    auto& m = state.slots[i].m;
    auto& v = state.slots[i].v;
    for (size_t j = 0; j < data.size(); ++j) {
      S g = grad[j] + (S)wd * data[j];
      m[j] = state.beta1 * m[j] + (S(1) - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (S(1) - state.beta2) * g * g;
      data[j] -= (S)lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + state.eps);
    }
  }
}

// ---- Monte-Carlo loss -----------------------------------------------------

template <typename S>
struct McResult {
  Tensor<S> loss;
  int64_t correct = 0;  // argmax agreement of the first sample
};

// (1 / (S * |batch|)) * sum over S draws of the batch cross-entropy sum,
// plus the probability decay penalty.  Each draw gets a derived seed.
template <typename S>
McResult<S> mc_loss(Model<S>& model, const Tensor<S>& x,
                    const std::vector<int>& labels, int samples, uint64_t seed,
                    const TrainConfig& cfg, bool training = true) {
  if (labels.empty()) throw std::invalid_argument("mc_loss: empty batch");
  if (samples < 1) throw std::invalid_argument("mc_loss: S >= 1");
  McResult<S> res;
  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (int s = 0; s < samples; ++s) {
    ForwardOptions<S> opt;
    opt.mode = cfg.mode;
    opt.training = training;
    opt.noise_seed = derive_seed(seed, (uint64_t)s);
    opt.tau = (S)cfg.tau;
    opt.hard = cfg.hard;
    opt.cont_act = cfg.lr_act;
    Tensor<S> logits = model_forward(model, x, opt);
    if (s == 0) {
      int64_t K = logits.shape()[1];
      for (size_t i = 0; i < labels.size(); ++i)
        res.correct += argmax_row(logits.data(), (int64_t)i, K) == labels[i];
    }
    total = add(total, softmax_ce_sum(logits, labels));
  }
  total = muls(total, S(1) / (S)(samples * (int64_t)labels.size()));
  auto dists = collect_dists(model);
  if (!dists.empty() && cfg.prob_decay > 0)
    total = add(total, probability_decay_penalty(dists, (S)cfg.prob_decay));
  res.loss = total;
  return res;
}

// ---- evaluation during training -------------------------------------------

template <typename S>
Tensor<S> batch_tensor(const Dataset& ds, const std::vector<int64_t>& idx,
                       std::vector<int>& labels_out,
                       const AugmentationPolicy* aug = nullptr,
                       uint64_t aug_seed = 0) {
  int64_t sz = ds.image_size();
  std::vector<S> data(idx.size() * sz);
  labels_out.resize(idx.size());
  std::vector<float> buf(sz);
  for (size_t i = 0; i < idx.size(); ++i) {
    const float* src = ds.image(idx[i]);
    if (aug && aug->enabled) {
      augment_image(src, ds.channels, ds.height, ds.width, *aug,
                    derive_seed(aug_seed, (uint64_t)idx[i]), buf.data());
      src = buf.data();
    }
    for (int64_t j = 0; j < sz; ++j) data[i * sz + j] = (S)src[j];
    labels_out[i] = ds.labels[idx[i]];
  }
  return Tensor<S>::from_data(
      {(int64_t)idx.size(), ds.channels, ds.height, ds.width},
      std::move(data));
}

// Stochastic-model accuracy (eval-mode forward, derived noise).  Final
// numbers come from sampled discrete networks in the inference engine; this
// is the per-epoch progress metric.
template <typename S>
double stochastic_accuracy(Model<S>& model, const Dataset& ds,
                           const TrainConfig& cfg, uint64_t seed,
                           ForwardTrace<S>* trace = nullptr,
                           int64_t max_items = -1) {
  int64_t n = max_items > 0 ? std::min(max_items, ds.n) : ds.n;
  int64_t correct = 0;
  int64_t bs = 256;
  for (int64_t start = 0; start < n; start += bs) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(start + bs, n); ++i) idx.push_back(i);
    std::vector<int> labels;
    Tensor<S> x = batch_tensor<S>(ds, idx, labels);
    ForwardOptions<S> opt;
    opt.mode = cfg.mode;
    opt.training = false;
    opt.noise_seed = derive_seed(seed, (uint64_t)start);
    opt.tau = (S)cfg.tau;
    opt.hard = cfg.hard;
    opt.cont_act = cfg.lr_act;
    Tensor<S> logits =
        model_forward(model, x, opt, start == 0 ? trace : nullptr);
    int64_t K = logits.shape()[1];
    for (size_t i = 0; i < labels.size(); ++i)
      correct += argmax_row(logits.data(), (int64_t)i, K) == labels[i];
  }
  return (double)correct / (double)n;
}

// ---- training loop --------------------------------------------------------

template <typename S>
EpochMetrics epoch_diagnostics(Model<S>& model, const Dataset& test,
                               const TrainConfig& cfg, uint64_t seed) {
  EpochMetrics m;
  ForwardTrace<S> trace;
  m.test_acc = stochastic_accuracy(model, test, cfg, seed, &trace);
  int64_t zero = 0, total = 0;
  for (auto& l : model.layers) {
    if (!l.is_distributional) continue;
    auto w = map_weights(l.dist);
    for (int8_t v : w) zero += (v == 0);
    total += (int64_t)w.size();
    auto h = weight_entropy(l.dist);
    double s = 0;
    for (double v : h) s += v;
    m.weight_entropy_per_layer.push_back(s / (double)h.size());
  }
  m.sparsity = total > 0 ? (double)zero / (double)total : 0.0;
  if (cfg.mode == RunMode::LAR)
    for (auto& p : trace.sign_probs) {
      if (!p.defined()) continue;
      double s = 0;
      for (S v : p.data()) s += binary_entropy((double)v);
      m.act_entropy_per_layer.push_back(s / (double)p.numel());
    }
  return m;
}

template <typename S>
std::vector<S> snapshot_params(const std::vector<ParamRef<S>>& params) {
  std::vector<S> out;
  for (const auto& p : params)
    out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

template <typename S>
void restore_params(std::vector<ParamRef<S>>& params,
                    const std::vector<S>& snap) {
  size_t off = 0;
  for (auto& p : params) {
    std::copy(snap.begin() + off, snap.begin() + off + p.tensor.numel(),
              p.tensor.data().begin());
    off += p.tensor.numel();
  }
}

// Runs cfg.epochs of mc_loss -> backward -> adam_step under a cosine
// schedule.  On a non-finite epoch loss the last finite-epoch parameters are
// restored before throwing.
template <typename S>
std::vector<EpochMetrics> train(Model<S>& model, const Dataset& train_ds,
                                const Dataset& test_ds, const TrainConfig& cfg,
                                std::ostream* log = nullptr) {
  cfg.validate();
  auto params = collect_params(model);
  AdamState<S> adam;
  std::vector<EpochMetrics> metrics;
  std::vector<S> last_good = snapshot_params(params);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
    auto batches = make_batches(train_ds.n, cfg.batch_size,
                                derive_seed(cfg.seed, 0xe9ull, epoch));
    double loss_sum = 0.0;
    int64_t correct = 0;
    for (size_t b = 0; b < batches.size(); ++b) {
      std::vector<int> labels;
      uint64_t aug_seed = derive_seed(cfg.seed, 0xa9ull, epoch, b);
      Tensor<S> x =
          batch_tensor<S>(train_ds, batches[b], labels, &cfg.augment, aug_seed);
      for (auto& p : params) p.tensor.zero_grad();
      uint64_t noise = derive_seed(cfg.seed, 0x70ull, epoch, b);
      McResult<S> res =
          mc_loss(model, x, labels, cfg.mc_samples, noise, cfg, true);
      backward(res.loss);
      adam_step(params, adam, lr, cfg.last_fc_lr_mult, cfg.weight_decay);
      loss_sum += (double)res.loss.item() * (double)labels.size();
      correct += res.correct;
    }
    double mean_loss = loss_sum / (double)train_ds.n;
    if (!std::isfinite(mean_loss)) {
      restore_params(params, last_good);
      throw std::runtime_error("train: non-finite loss at epoch " +
                               std::to_string(epoch) +
                               "; last finite-epoch parameters restored");
    }
    last_good = snapshot_params(params);
    EpochMetrics m = epoch_diagnostics(model, test_ds, cfg,
                                       derive_seed(cfg.seed, 0xe7a1ull, epoch));
    m.epoch = epoch;
    m.loss = mean_loss;
    m.train_acc = (double)correct / (double)train_ds.n;
    m.lr = lr;
    if (log)
      (*log) << "epoch " << epoch << " loss " << mean_loss << " train_acc "
             << m.train_acc << " test_acc " << m.test_acc << " sparsity "
             << m.sparsity << "\n";
    metrics.push_back(std::move(m));
  }
  return metrics;
}

// Stage-0 pretraining: a full-precision network with tanh at the positions
// where LAR layers will place sign activations.
template <typename S>
std::vector<EpochMetrics> pretrain_continuous(Model<S>& model,
                                              const Dataset& train_ds,
                                              const Dataset& test_ds,
                                              TrainConfig cfg,
                                              std::ostream* log = nullptr) {
  cfg.mode = RunMode::Pretrain;
  return train(model, train_ds, test_ds, cfg, log);
}

}  // namespace lar
