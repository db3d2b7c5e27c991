#pragma once
// Per-weight multinomial distributions over {-1,0,+1} (ternary) or {+-1}
// (binary), parameterized by unconstrained logits:
//   ternary: l0 -> p(w=0),  l1 -> p(w=+1 | w!=0)   (both via logistic map)
//   binary:  l1 -> p(w=+1)
// The factorization mirrors the initialization equations, so clipped
// probabilities map directly to bounded logits.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lar/rng.hpp"
#include "lar/tensor.hpp"

namespace lar {

enum class WeightMode { Ternary, Binary };

template <typename S>
struct WeightDistribution {
  WeightMode mode = WeightMode::Ternary;
  Tensor<S> l0;  // ternary only
  Tensor<S> l1;

  static WeightDistribution uniform(WeightMode mode, Shape shape) {
    // zero logits: p(0)=0.5, p(+1|!=0)=0.5 -> [0.25, 0.5, 0.25]
    WeightDistribution d;
    d.mode = mode;
    if (mode == WeightMode::Ternary)
      d.l0 = Tensor<S>::zeros(shape, /*requires_grad=*/true);
    d.l1 = Tensor<S>::zeros(shape, /*requires_grad=*/true);
    return d;
  }

  const Shape& shape() const { return l1.shape(); }
  int64_t numel() const { return l1.numel(); }
};

// Category probabilities as plain arrays (current logit values, no graph).
template <typename S>
struct CategoryProbs {
  std::vector<S> p_minus, p_zero, p_plus;
};

template <typename S>
CategoryProbs<S> category_probs(const WeightDistribution<S>& dist) {
  int64_t n = dist.numel();
  CategoryProbs<S> p;
  p.p_minus.resize(n);
  p.p_zero.resize(n);
  p.p_plus.resize(n);
  const auto& l1 = dist.l1.data();
  for (int64_t i = 0; i < n; ++i) {
    S q = S(1) / (S(1) + std::exp(-l1[i]));  // p(+1 | != 0) or p(+1)
    S p0 = S(0);
    if (dist.mode == WeightMode::Ternary) {
      S l0 = dist.l0.data()[i];
      p0 = S(1) / (S(1) + std::exp(-l0));
    }
    p.p_zero[i] = p0;
    p.p_plus[i] = (S(1) - p0) * q;
    p.p_minus[i] = (S(1) - p0) * (S(1) - q);
  }
  return p;
}

// Differentiable mean/variance of each weight under its categorical.
//   mu = p(+1) - p(-1),  sigma2 = p(+1) + p(-1) - mu^2
template <typename S>
struct Moments {
  Tensor<S> mu, sigma2;
};

template <typename S>
Moments<S> moments(const WeightDistribution<S>& dist) {
  for (S v : dist.l1.data())
    if (!std::isfinite(v))
      throw std::invalid_argument("moments: non-finite logit");
  Tensor<S> q = sigmoid_t(dist.l1);
  Tensor<S> two_q_m1 = adds(muls(q, S(2)), S(-1));
  Moments<S> m;
  if (dist.mode == WeightMode::Ternary) {
    for (S v : dist.l0.data())
      if (!std::isfinite(v))
        throw std::invalid_argument("moments: non-finite logit");
    Tensor<S> p0 = sigmoid_t(dist.l0);
    Tensor<S> not0 = adds(neg(p0), S(1));        // 1 - p(0) = p(+1)+p(-1)
    m.mu = mul(not0, two_q_m1);
    m.sigma2 = sub(not0, square_t(m.mu));
  } else {
    m.mu = two_q_m1;                             // 2p(+1) - 1
    m.sigma2 = adds(neg(square_t(m.mu)), S(1));  // 1 - mu^2
  }
  return m;
}

inline double logit_of(double p) { return std::log(p / (1.0 - p)); }

// Distribution initialization from pretrained continuous weights.  Weights
// are normalized per layer by their standard deviation; then
//   p(w=0)        = p_hi - (p_hi - p_lo) * |w~|          clipped to [p_lo,p_hi]
//   p(w=+1|w!=0)  = 0.5 * (1 + w~ / (1 - p(w=0)))        clipped to [p_lo,p_hi]
// using the already-clipped p(w=0) in the second equation.
template <typename S>
WeightDistribution<S> init_from_pretrained(const Tensor<S>& pretrained,
                                           WeightMode mode, double p_lo = 0.05,
                                           double p_hi = 0.95) {
  if (!(0.0 < p_lo && p_lo < p_hi && p_hi < 1.0))
    throw std::invalid_argument("init_from_pretrained: need 0 < p_lo < p_hi < 1");
  const auto& w = pretrained.data();
  int64_t n = (int64_t)w.size();
  if (n == 0) throw std::invalid_argument("init_from_pretrained: empty layer");
  double mean = 0.0, sq = 0.0;
  for (S v : w) {
    if (!std::isfinite((double)v))
      throw std::invalid_argument("init_from_pretrained: non-finite weight");
    mean += (double)v;
    sq += (double)v * (double)v;
  }
  mean /= (double)n;
  double var = sq / (double)n - mean * mean;
  if (var <= 0.0)
    throw std::invalid_argument(
        "init_from_pretrained: zero std in pretrained layer");
  double inv_std = 1.0 / std::sqrt(var);

  auto clip = [&](double p) { return std::min(std::max(p, p_lo), p_hi); };
  std::vector<S> l0(n), l1(n);
  for (int64_t i = 0; i < n; ++i) {
    double wn = (double)w[i] * inv_std;
    if (mode == WeightMode::Ternary) {
      double p0 = clip(p_hi - (p_hi - p_lo) * std::abs(wn));
      double p1 = clip(0.5 * (1.0 + wn / (1.0 - p0)));
      l0[i] = (S)logit_of(p0);
      l1[i] = (S)logit_of(p1);
    } else {
      l1[i] = (S)logit_of(clip(0.5 * (1.0 + wn)));
    }
  }
  WeightDistribution<S> d;
  d.mode = mode;
  if (mode == WeightMode::Ternary)
    d.l0 = Tensor<S>::from_data(pretrained.shape(), std::move(l0), true);
  d.l1 = Tensor<S>::from_data(pretrained.shape(), std::move(l1), true);
  return d;
}

// Probability decay: lambda * sum of squared logits across all distributions.
// Pushes logits toward 0, i.e. probabilities toward maximum entropy.
template <typename S>
Tensor<S> probability_decay_penalty(
    const std::vector<const WeightDistribution<S>*>& dists, S lambda) {
  if (lambda < S(0))
    throw std::invalid_argument("probability_decay_penalty: lambda < 0");
  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (const auto* d : dists) {
    if (d->mode == WeightMode::Ternary)
      total = add(total, sum_t(square_t(d->l0)));
    total = add(total, sum_t(square_t(d->l1)));
  }
  return muls(total, lambda);
}

// I.i.d. categorical draw per weight; deterministic given seed.
template <typename S>
std::vector<int8_t> sample_weights(const WeightDistribution<S>& dist,
                                   uint64_t seed) {
  CategoryProbs<S> p = category_probs(dist);
  int64_t n = dist.numel();
  std::vector<int8_t> w(n);
  SplitMix64 rng(derive_seed(seed, 0x5a3d7e1ull));
  for (int64_t i = 0; i < n; ++i) {
    double u = rng.u01();
    if (u < (double)p.p_minus[i])
      w[i] = -1;
    else if (u < (double)p.p_minus[i] + (double)p.p_zero[i])
      w[i] = 0;
    else
      w[i] = 1;
  }
  return w;
}

// Most likely weight per entry (used for sparsity reporting during training).
template <typename S>
std::vector<int8_t> map_weights(const WeightDistribution<S>& dist) {
  CategoryProbs<S> p = category_probs(dist);
  std::vector<int8_t> w(dist.numel());
  for (int64_t i = 0; i < dist.numel(); ++i) {
    if (p.p_zero[i] >= p.p_plus[i] && p.p_zero[i] >= p.p_minus[i])
      w[i] = 0;
    else
      w[i] = p.p_plus[i] >= p.p_minus[i] ? 1 : -1;
  }
  return w;
}

// Shannon entropy (nats) of each per-weight categorical.
template <typename S>
std::vector<double> weight_entropy(const WeightDistribution<S>& dist) {
  CategoryProbs<S> p = category_probs(dist);
  std::vector<double> h(dist.numel());
  auto term = [](double q) { return q > 0.0 ? -q * std::log(q) : 0.0; };
  for (int64_t i = 0; i < dist.numel(); ++i)
    h[i] = term((double)p.p_minus[i]) + term((double)p.p_zero[i]) +
           term((double)p.p_plus[i]);
  return h;
}

// Fraction of exactly-zero entries.
inline double sparsity(const std::vector<int8_t>& weights) {
  if (weights.empty()) return 0.0;
  int64_t zeros = 0;
  for (int8_t w : weights) zeros += (w == 0);
  return (double)zeros / (double)weights.size();
}

}  // namespace lar
