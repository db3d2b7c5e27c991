#pragma once
// Bridges the training-time model to the inference engine: discrete weight
// sampling and best-of-k model selection.

#include <cstdint>
#include <stdexcept>

#include "lar/model.hpp"
#include "lar/packed.hpp"

namespace lar {

template <typename S>
SampledModel sample_model(const Model<S>& model, uint64_t seed) {
  SampledModel out;
  for (size_t i = 0; i < model.layers.size(); ++i) {
    const Layer<S>& l = model.layers[i];
    SampledLayer sl;
    sl.spec = l.spec;
    if (l.is_distributional) {
      sl.qweight = sample_weights(l.dist, derive_seed(seed, (uint64_t)i));
    } else {
      sl.fp_weight.assign(l.weight.data().begin(), l.weight.data().end());
      sl.fp_bias.assign(l.bias.data().begin(), l.bias.data().end());
    }
    if (l.spec.has_bn) {
      sl.gamma.assign(l.bn.gamma.data().begin(), l.bn.gamma.data().end());
      sl.beta.assign(l.bn.beta.data().begin(), l.bn.beta.data().end());
      sl.running_mean.assign(l.bn.running_mean.begin(),
                             l.bn.running_mean.end());
      sl.running_var.assign(l.bn.running_var.begin(), l.bn.running_var.end());
      sl.bn_eps = (double)l.bn.eps;
    }
    out.layers.push_back(std::move(sl));
  }
  return out;
}

struct BestOfK {
  SampledModel model;
  double accuracy = 0.0;
  int index = 0;
  std::vector<double> accuracies;  // all k samples, in draw order
};

// Draw k discrete models, evaluate each on the validation set with the float
// reference path, keep the best (ties -> lowest sample index).
template <typename S>
BestOfK best_of_k(const Model<S>& model, int k, const Dataset& validation,
                  uint64_t seed) {
  if (k < 1) throw std::invalid_argument("best_of_k: k >= 1");
  if (validation.n == 0)
    throw std::invalid_argument("best_of_k: empty validation set");
  BestOfK best;
  for (int i = 0; i < k; ++i) {
    SampledModel sm = sample_model(model, derive_seed(seed, 0xb0f6ull, i));
    double acc = evaluate_sampled(sm, validation);
    best.accuracies.push_back(acc);
    if (i == 0 || acc > best.accuracy) {
      best.accuracy = acc;
      best.index = i;
      best.model = std::move(sm);
    }
  }
  return best;
}

}  // namespace lar
