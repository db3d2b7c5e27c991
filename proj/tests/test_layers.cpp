#include <doctest.h>

#include <cmath>
#include <vector>

#include "lar/layers.hpp"

using namespace lar;
using D = double;

namespace {

WeightDistribution<D> dist_from_probs(Shape shape, const std::vector<D>& p0,
                                      const std::vector<D>& q) {
  WeightDistribution<D> d;
  d.mode = WeightMode::Ternary;
  std::vector<D> l0(p0.size()), l1(q.size());
  for (size_t i = 0; i < p0.size(); ++i) l0[i] = logit_of(p0[i]);
  for (size_t i = 0; i < q.size(); ++i) l1[i] = logit_of(q[i]);
  d.l0 = Tensor<D>::from_data(shape, std::move(l0), true);
  d.l1 = Tensor<D>::from_data(shape, std::move(l1), true);
  return d;
}

double phi(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

TEST_CASE("CLT moments: hand-computed linear example") {
  // one output unit, three inputs with chosen category probabilities
  std::vector<D> p0{0.5, 0.2, 0.8}, q{0.5, 0.9, 0.3};
  auto d = dist_from_probs({1, 3}, p0, q);
  std::vector<D> h{0.5, -1.5, 2.0};
  auto x = Tensor<D>::from_data({1, 3}, h);
  auto pre = clt_forward_linear(x, d);
  double m = 0.0, var = 0.0;
  for (int i = 0; i < 3; ++i) {
    double pp = (1 - p0[i]) * q[i], pm = (1 - p0[i]) * (1 - q[i]);
    double mu = pp - pm, s2 = pp + pm - mu * mu;
    m += mu * h[i];
    var += s2 * h[i] * h[i];
  }
  CHECK(pre.m.item() == doctest::Approx(m).epsilon(1e-12));
  CHECK(pre.v.item() == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
}

TEST_CASE("CLT moments match Monte Carlo over sampled weights") {
  std::vector<D> p0{0.5, 0.2, 0.8, 0.3, 0.6, 0.1},
      q{0.5, 0.9, 0.3, 0.7, 0.4, 0.55};
  auto d = dist_from_probs({2, 3}, p0, q);
  std::vector<D> h{0.5, -1.5, 2.0};
  auto x = Tensor<D>::from_data({1, 3}, h);
  auto pre = clt_forward_linear(x, d);
  const int n = 40000;
  std::vector<double> sum(2, 0.0), sumsq(2, 0.0);
  for (int s = 0; s < n; ++s) {
    auto w = sample_weights(d, 1000 + s);
    for (int o = 0; o < 2; ++o) {
      double z = 0.0;
      for (int i = 0; i < 3; ++i) z += (double)w[o * 3 + i] * h[i];
      sum[o] += z;
      sumsq[o] += z * z;
    }
  }
  for (int o = 0; o < 2; ++o) {
    double mean = sum[o] / n;
    double sd = std::sqrt(sumsq[o] / n - mean * mean);
    CHECK(pre.m.data()[o] == doctest::Approx(mean).epsilon(0.05));
    CHECK(pre.v.data()[o] == doctest::Approx(sd).epsilon(0.05));
  }
}

TEST_CASE("CLT conv with 1x1 kernel equals CLT linear") {
  std::vector<D> p0{0.4, 0.7}, q{0.8, 0.25};
  auto dl = dist_from_probs({2, 1}, p0, q);
  auto dc = dist_from_probs({2, 1, 1, 1}, p0, q);
  auto xl = Tensor<D>::from_data({3, 1}, {0.3, -1.1, 0.9});
  auto xc = Tensor<D>::from_data({3, 1, 1, 1}, {0.3, -1.1, 0.9});
  auto pl = clt_forward_linear(xl, dl);
  auto pc = clt_forward_conv(xc, dc, 1, 0);
  for (int i = 0; i < 6; ++i) {
    CHECK(pc.m.data()[i] == doctest::Approx(pl.m.data()[i]).epsilon(1e-12));
    CHECK(pc.v.data()[i] == doctest::Approx(pl.v.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("distributional batch norm: hand-computed batch of two") {
  // one channel, batch m = {1, 5}, v = {1, 2}
  PreActivationDistribution<D> pre;
  pre.m = Tensor<D>::from_data({2, 1}, {1.0, 5.0});
  pre.v = Tensor<D>::from_data({2, 1}, {1.0, 2.0});
  BatchNormState<D> bn(1);
  bn.gamma.data()[0] = 2.0;
  bn.beta.data()[0] = 0.5;
  auto out = dist_batch_norm(pre, bn, /*training=*/true);
  // mu_c = 3; var_c = mean((m-3)^2) + mean(v^2) = 4 + 2.5 = 6.5
  double ginv = 2.0 / std::sqrt(6.5 + kBnEps);
  CHECK(out.m.data()[0] == doctest::Approx(ginv * -2.0 + 0.5).epsilon(1e-12));
  CHECK(out.m.data()[1] == doctest::Approx(ginv * 2.0 + 0.5).epsilon(1e-12));
  CHECK(out.v.data()[0] == doctest::Approx(ginv).epsilon(1e-12));
  CHECK(out.v.data()[1] == doctest::Approx(2.0 * ginv).epsilon(1e-12));
  // running stats blend with momentum 0.1 from (0, 1)
  CHECK(bn.running_mean[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(bn.running_var[0] == doctest::Approx(0.9 + 0.65).epsilon(1e-12));
}

TEST_CASE("batch norm eval mode uses running statistics") {
  PreActivationDistribution<D> pre;
  pre.m = Tensor<D>::from_data({1, 1}, {2.0});
  pre.v = Tensor<D>::from_data({1, 1}, {0.5});
  BatchNormState<D> bn(1);
  bn.running_mean[0] = 1.0;
  bn.running_var[0] = 4.0;
  bn.gamma.data()[0] = -3.0;  // negative gamma: v must use |gamma|
  auto out = dist_batch_norm(pre, bn, /*training=*/false);
  double ginv = -3.0 / std::sqrt(4.0 + kBnEps);
  CHECK(out.m.data()[0] == doctest::Approx(ginv * 1.0).epsilon(1e-12));
  CHECK(out.v.data()[0] == doctest::Approx(0.5 * -ginv).epsilon(1e-12));
  // eval mode must not touch running stats
  CHECK(bn.running_mean[0] == 1.0);
  CHECK(bn.running_var[0] == 4.0);
}

TEST_CASE("batch norm rejects malformed input") {
  PreActivationDistribution<D> pre;
  pre.m = Tensor<D>::from_data({1, 2}, {1.0, 2.0});
  pre.v = Tensor<D>::from_data({1, 2}, {1.0, 1.0});
  BatchNormState<D> bn(3);
  CHECK_THROWS_AS((void)dist_batch_norm(pre, bn, true),
                  std::invalid_argument);
}

TEST_CASE("sign probability is the normal CDF of m/v") {
  PreActivationDistribution<D> pre;
  pre.m = Tensor<D>::from_data({1, 4}, {1.0, 0.0, -2.0, 1.0});
  pre.v = Tensor<D>::from_data({1, 4}, {1.0, 3.0, 2.0, 1e-15});
  auto p = sign_probability(pre);
  CHECK(p.data()[0] == doctest::Approx(phi(1.0)).epsilon(1e-12));
  CHECK(p.data()[0] == doctest::Approx(0.841344746).epsilon(1e-8));
  CHECK(p.data()[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.data()[2] == doctest::Approx(phi(-1.0)).epsilon(1e-12));
  // degenerate v saturates through the std floor
  CHECK(p.data()[3] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("hard Gumbel-Softmax draws follow the categorical distribution") {
  const int n = 20000;
  std::vector<D> pv(n * 2);
  for (int i = 0; i < n; ++i) {
    pv[2 * i] = 0.3;
    pv[2 * i + 1] = 0.7;
  }
  auto pi = Tensor<D>::from_data({n, 2}, pv);
  auto y = gumbel_softmax_sample(pi, 1.2, /*hard=*/true, 4242);
  double ones = 0.0;
  for (int i = 0; i < n; ++i) {
    // hard output must be exactly one-hot
    CHECK(y.data()[2 * i] + y.data()[2 * i + 1] == 1.0);
    CHECK((y.data()[2 * i] == 0.0 || y.data()[2 * i] == 1.0));
    ones += y.data()[2 * i + 1];
  }
  CHECK(ones / n == doctest::Approx(0.7).epsilon(0.03));
}

TEST_CASE("soft-hard gap shrinks monotonically as tau decreases") {
  std::vector<D> pv{0.2, 0.8, 0.55, 0.45, 0.9, 0.1};
  auto pi = Tensor<D>::from_data({3, 2}, pv);
  auto g = gumbel_noise<D>({3, 2}, 77);  // frozen noise across temperatures
  double prev_gap = 2.0;
  for (double tau : {1.2, 0.5, 0.1, 0.01}) {
    auto soft = gumbel_softmax(pi, g, tau, false);
    auto hard = gumbel_softmax(pi, g, tau, true);
    double gap = 0.0;
    for (int i = 0; i < 6; ++i)
      gap = std::max(gap, std::abs(soft.data()[i] - hard.data()[i]));
    CHECK(gap <= prev_gap);
    prev_gap = gap;
  }
  CHECK(prev_gap < 1e-6);  // near-discrete at tau = 0.01
}

TEST_CASE("binary activation equals two-class Gumbel-Softmax difference") {
  std::vector<D> pv{0.8, 0.45, 0.1, 0.99, 0.5, 0.3};
  auto p = Tensor<D>::from_data({2, 3}, pv, true);
  double tau = 1.2;
  uint64_t seed = 9001;
  auto h = binary_activation(p, tau, /*hard=*/false, seed);
  // same seed, same [N,2] noise order, classes ordered [1-p, p]
  std::vector<D> stacked(12);
  for (int i = 0; i < 6; ++i) {
    stacked[2 * i] = 1.0 - pv[i];
    stacked[2 * i + 1] = pv[i];
  }
  auto y = gumbel_softmax_sample(Tensor<D>::from_data({6, 2}, stacked), tau,
                                 false, seed);
  for (int i = 0; i < 6; ++i) {
    double diff = y.data()[2 * i + 1] - y.data()[2 * i];
    CHECK(h.data()[i] == doctest::Approx(diff).epsilon(1e-12));
  }
}

TEST_CASE("hard binary activation is exactly +-1 with soft gradients") {
  std::vector<D> pv{0.9, 0.2, 0.5, 0.7};
  auto p = Tensor<D>::from_data({1, 4}, pv, true);
  uint64_t seed = 31337;
  auto soft = binary_activation(p, (D)1.2, false, seed);
  auto hard = binary_activation(p, (D)1.2, true, seed);
  for (int i = 0; i < 4; ++i) {
    CHECK((hard.data()[i] == 1.0 || hard.data()[i] == -1.0));
    CHECK(hard.data()[i] == (soft.data()[i] >= 0.0 ? 1.0 : -1.0));
  }
  // straight-through: gradients of sum(hard) equal gradients of sum(soft)
  p.zero_grad();
  backward(sum_t(hard));
  auto gh = p.grad();
  p.zero_grad();
  backward(sum_t(soft));
  auto gs = p.grad();
  for (int i = 0; i < 4; ++i) CHECK(gh[i] == doctest::Approx(gs[i]).epsilon(1e-14));
}

TEST_CASE("binary activation frequencies follow p") {
  const int n = 50000;
  std::vector<D> pv(n, 0.75);
  auto p = Tensor<D>::from_data({n}, pv);
  auto h = binary_activation(p, (D)1.2, true, 555);
  double plus = 0.0;
  for (int i = 0; i < n; ++i) plus += h.data()[i] > 0 ? 1.0 : 0.0;
  CHECK(plus / n == doctest::Approx(0.75).epsilon(0.02));
}

TEST_CASE("invalid temperature is rejected") {
  auto p = Tensor<D>::from_data({1}, {0.5});
  CHECK_THROWS_AS((void)binary_activation(p, (D)0.0, true, 1),
                  std::invalid_argument);
  auto pi = Tensor<D>::from_data({1, 2}, {0.5, 0.5});
  CHECK_THROWS_AS((void)gumbel_softmax_sample(pi, (D)-1.0, true, 1),
                  std::invalid_argument);
}

TEST_CASE("full LAR layer chain passes finite differences (frozen noise)") {
  SplitMix64 rng(71);
  std::vector<D> p0(8), q(8);
  for (auto& v : p0) v = 0.2 + 0.6 * rng.u01();
  for (auto& v : q) v = 0.2 + 0.6 * rng.u01();
  auto d = dist_from_probs({2, 4}, p0, q);
  BatchNormState<D> bn(2);
  bn.gamma.data() = {1.3, 0.8};
  bn.beta.data() = {0.2, -0.1};
  std::vector<D> xv(3 * 4);
  for (auto& v : xv) v = rng.u01() * 2.0 - 1.0;
  auto x = Tensor<D>::from_data({3, 4}, xv);
  LarLayerConfig<D> cfg;
  cfg.kind = LayerOpKind::Linear;
  cfg.hard = false;  // soft path so the loss is differentiable everywhere
  auto f = [&] {
    auto out = lar_layer_forward(x, d, cfg, &bn, /*training=*/true, 123);
    return sum_t(square_t(out));
  };
  double err = finite_difference_check<D>(
      f, {d.l0, d.l1, bn.gamma, bn.beta}, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("activation entropy of p = 0.9") {
  CHECK(binary_entropy(0.9) == doctest::Approx(0.325083).epsilon(1e-5));
  CHECK(binary_entropy(0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(binary_entropy(0.0) == 0.0);
  CHECK(binary_entropy(1.0) == 0.0);
  auto h = activation_entropy<D>({0.9, 0.5});
  CHECK(h[0] == doctest::Approx(0.325083).epsilon(1e-5));
  CHECK(h[1] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}
