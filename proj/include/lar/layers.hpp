#pragma once
// The training-time layer machinery: CLT propagation of pre-activation
// moments, batch normalization over Gaussian moment pairs, sign
// probabilities via the normal CDF, and Gumbel-Softmax binary activations.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lar/rng.hpp"
#include "lar/tensor.hpp"
#include "lar/weight_dist.hpp"

namespace lar {

// Guards for degenerate distributions; far below any trained signal.
inline constexpr double kVarFloor = 1e-8;   // std floor in sign_probability
inline constexpr double kProbFloor = 1e-6;  // floor inside log(pi)
inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// Gaussian pre-activation moments; v is a standard deviation.
template <typename S>
struct PreActivationDistribution {
  Tensor<S> m;
  Tensor<S> v;
};

template <typename S>
Tensor<S> gumbel_noise(Shape shape, uint64_t seed) {
  SplitMix64 rng(derive_seed(seed, 0x6b7e151628ull));
  std::vector<S> g(shape_numel(shape));
  for (auto& x : g) x = (S)rng.gumbel();
  return Tensor<S>::from_data(std::move(shape), std::move(g));
}

template <typename S>
Tensor<S> normal_noise(Shape shape, uint64_t seed) {
  SplitMix64 rng(derive_seed(seed, 0x243f6a8885ull));
  std::vector<S> g(shape_numel(shape));
  for (auto& x : g) x = (S)rng.normal();
  return Tensor<S>::from_data(std::move(shape), std::move(g));
}

// ---- CLT forward ----------------------------------------------------------
// m = <mu, h>,  v = sqrt(<sigma^2, h^2>)  per output unit.

template <typename S>
PreActivationDistribution<S> clt_forward_linear(
    const Tensor<S>& h, const WeightDistribution<S>& dist) {
  Moments<S> mom = moments(dist);
  PreActivationDistribution<S> out;
  out.m = linear(h, mom.mu);
  out.v = sqrt_t(clamp_min_t(linear(square_t(h), mom.sigma2), S(0)));
  return out;
}

template <typename S>
PreActivationDistribution<S> clt_forward_conv(const Tensor<S>& h,
                                              const WeightDistribution<S>& dist,
                                              int64_t stride, int64_t pad) {
  Moments<S> mom = moments(dist);
  PreActivationDistribution<S> out;
  out.m = conv2d(h, mom.mu, stride, pad);
  out.v = sqrt_t(clamp_min_t(conv2d(square_t(h), mom.sigma2, stride, pad), S(0)));
  return out;
}

// ---- distributional batch normalization -----------------------------------

template <typename S>
struct BatchNormState {
  Tensor<S> gamma, beta;              // learnable, [C]
  std::vector<S> running_mean;        // [C]
  std::vector<S> running_var;         // [C]
  S eps = (S)kBnEps;
  S momentum = (S)kBnMomentum;

  explicit BatchNormState(int64_t channels = 0) {
    gamma = Tensor<S>::from_data({channels},
                                 std::vector<S>(channels, S(1)), true);
    beta = Tensor<S>::zeros({channels}, true);
    running_mean.assign(channels, S(0));
    running_var.assign(channels, S(1));
  }

  int64_t channels() const { return gamma.numel(); }
};

// Batch statistics use the law of total variance:
//   mu_c    = mean(m)  over batch and spatial positions
//   sigma_c = mean((m - mu_c)^2) + mean(v^2)
// Output: m' = gamma (m - mu_c)/sqrt(sigma_c^2 + eps) + beta,
//         v' = |gamma| v / sqrt(sigma_c^2 + eps).
template <typename S>
PreActivationDistribution<S> dist_batch_norm(
    const PreActivationDistribution<S>& pre, BatchNormState<S>& bn,
    bool training) {
  const Tensor<S>& m = pre.m;
  if (m.shape().size() < 2 || m.shape()[0] < 1)
    throw std::invalid_argument("dist_batch_norm: empty batch");
  if (m.shape()[1] != bn.channels())
    throw std::invalid_argument("dist_batch_norm: channel mismatch");

  Tensor<S> mu_c, var_c;
  if (training) {
    mu_c = channel_mean(m);
    var_c = add(channel_mean(square_t(sub_channel(m, mu_c))),
                channel_mean(square_t(pre.v)));
    // running stats track the batch statistics (values only, no graph)
    for (int64_t c = 0; c < bn.channels(); ++c) {
      bn.running_mean[c] = (S(1) - bn.momentum) * bn.running_mean[c] +
                           bn.momentum * mu_c.data()[c];
      bn.running_var[c] = (S(1) - bn.momentum) * bn.running_var[c] +
                          bn.momentum * var_c.data()[c];
    }
  } else {
    mu_c = Tensor<S>::from_data({bn.channels()}, bn.running_mean);
    var_c = Tensor<S>::from_data({bn.channels()}, bn.running_var);
  }
  Tensor<S> ginv = div(bn.gamma, sqrt_t(adds(var_c, bn.eps)));
  PreActivationDistribution<S> out;
  out.m = add_channel(mul_channel(sub_channel(m, mu_c), ginv), bn.beta);
  out.v = mul_channel(pre.v, abs_t(ginv));
  return out;
}

// ---- sign probability -----------------------------------------------------

// p_i = Phi(m_i / v_i); degenerate v handled by the std floor, which
// saturates p to {0,1} for any non-vanishing mean.
template <typename S>
Tensor<S> sign_probability(const PreActivationDistribution<S>& pre) {
  const S inv_sqrt2 = S(0.7071067811865475);
  Tensor<S> v_eff = clamp_min_t(pre.v, (S)kVarFloor);
  Tensor<S> z = div(muls(pre.m, inv_sqrt2), v_eff);
  return muls(adds(erf_t(z), S(1)), S(0.5));
}

// ---- Gumbel-Softmax -------------------------------------------------------

// Noise-explicit core: y = softmax((log pi + g)/tau) along the last dim of
// [N,K]; hard mode forwards the one-hot argmax with the soft gradient.
template <typename S>
Tensor<S> gumbel_softmax(const Tensor<S>& pi, const Tensor<S>& g, S tau,
                         bool hard) {
  if (tau <= S(0))
    throw std::invalid_argument("gumbel_softmax: tau must be positive");
  check_same_shape("gumbel_softmax", pi, g);
  if (pi.shape().size() != 2)
    throw std::invalid_argument("gumbel_softmax: expected [N,K], got " +
                                shape_str(pi.shape()));
  Tensor<S> log_pi = log_t(clamp_min_t(pi, (S)kProbFloor));
  Tensor<S> y = softmax_lastdim(muls(add(log_pi, g), S(1) / tau));
  if (!hard) return y;
  int64_t N = pi.shape()[0], K = pi.shape()[1];
  std::vector<S> onehot(y.numel(), S(0));
  for (int64_t i = 0; i < N; ++i)
    onehot[i * K + argmax_row(y.data(), i, K)] = S(1);
  return straight_through(y, std::move(onehot));
}

template <typename S>
Tensor<S> gumbel_softmax_sample(const Tensor<S>& pi, S tau, bool hard,
                                uint64_t seed) {
  return gumbel_softmax(pi, gumbel_noise<S>(pi.shape(), seed), tau, hard);
}

// ---- binary activation ----------------------------------------------------

// Two-class Gumbel-Softmax of pi = [1-p, p] collapsed through h = h_1 - h_-1:
// the softmax difference reduces to tanh of half the perturbed log-odds.
// Hard mode yields exactly {-1,+1} (sign(0) := +1) with the soft gradient.
template <typename S>
Tensor<S> binary_activation(const Tensor<S>& p, S tau, bool hard,
                            uint64_t seed) {
  if (tau <= S(0))
    throw std::invalid_argument("binary_activation: tau must be positive");
  // draw per-element Gumbel pairs in [N,2] row order so that results match
  // gumbel_softmax_sample on stacked [1-p, p] with the same seed
  Tensor<S> g = gumbel_noise<S>({p.numel(), 2}, seed);
  std::vector<S> gd(p.numel());
  for (int64_t i = 0; i < p.numel(); ++i)
    gd[i] = g.data()[2 * i + 1] - g.data()[2 * i];
  Tensor<S> noise = Tensor<S>::from_data(p.shape(), std::move(gd));

  Tensor<S> log_odds =
      sub(log_t(clamp_min_t(p, (S)kProbFloor)),
          log_t(clamp_min_t(adds(neg(p), S(1)), (S)kProbFloor)));
  Tensor<S> soft =
      tanh_t(muls(add(log_odds, noise), S(0.5) / tau));
  if (!hard) return soft;
  std::vector<S> hard_val(soft.numel());
  for (int64_t i = 0; i < soft.numel(); ++i)
    hard_val[i] = soft.data()[i] >= S(0) ? S(1) : S(-1);
  return straight_through(soft, std::move(hard_val));
}

// Binary entropy (nats) of activation probabilities, 0 log 0 := 0.
inline double binary_entropy(double p) {
  auto term = [](double q) { return q > 0.0 ? -q * std::log(q) : 0.0; };
  return term(p) + term(1.0 - p);
}

template <typename S>
std::vector<double> activation_entropy(const std::vector<S>& p) {
  std::vector<double> h(p.size());
  for (size_t i = 0; i < p.size(); ++i) h[i] = binary_entropy((double)p[i]);
  return h;
}

// ---- composed LAR layer ---------------------------------------------------

enum class LayerOpKind { Linear, Conv2d };

template <typename S>
struct LarLayerConfig {
  LayerOpKind kind = LayerOpKind::Linear;
  int64_t stride = 1, pad = 0;
  bool has_batchnorm = true;
  bool binary_act = true;  // false: return pre-activation mean path untouched
  S tau = (S)1.2;
  bool hard = true;
};

template <typename S>
struct LarLayerTrace {
  PreActivationDistribution<S> pre;  // after BN when present
  Tensor<S> p;                       // sign probabilities
};

// clt_forward -> dist_batch_norm -> sign_probability -> binary_activation
template <typename S>
Tensor<S> lar_layer_forward(const Tensor<S>& h,
                            const WeightDistribution<S>& dist,
                            const LarLayerConfig<S>& cfg,
                            BatchNormState<S>* bn, bool training,
                            uint64_t seed, LarLayerTrace<S>* trace = nullptr) {
  PreActivationDistribution<S> pre =
      cfg.kind == LayerOpKind::Linear
          ? clt_forward_linear(h, dist)
          : clt_forward_conv(h, dist, cfg.stride, cfg.pad);
  if (cfg.has_batchnorm) {
    if (!bn) throw std::invalid_argument("lar_layer_forward: missing BN state");
    pre = dist_batch_norm(pre, *bn, training);
  }
  Tensor<S> p = sign_probability(pre);
  if (trace) {
    trace->pre = pre;
    trace->p = p;
  }
  if (!cfg.binary_act) return pre.m;
  return binary_activation(p, cfg.tau, cfg.hard, seed);
}

}  // namespace lar
