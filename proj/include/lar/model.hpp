#pragma once
// The training-time model: ordered layers holding either full-precision
// weights or weight distributions, plus distributional batch norm state.
// One forward routine covers all three run modes:
//   Pretrain - everything full precision, tanh at activation positions
//   LR       - distributional weights, sampled pre-activations, continuous act
//   LAR      - distributional weights and Gumbel-Softmax sign activations

#include <cstdint>
#include <string>
#include <vector>

#include "lar/arch.hpp"
#include "lar/layers.hpp"
#include "lar/rng.hpp"
#include "lar/tensor.hpp"
#include "lar/weight_dist.hpp"

namespace lar {

enum class RunMode { Pretrain, LR, LAR };
enum class ContinuousAct { Relu, Tanh };

template <typename S>
struct Layer {
  LayerSpec spec;
  // full-precision parameters (FP layers, and all layers of a pretrain model)
  Tensor<S> weight, bias;
  // distribution parameters (LAR layers after init)
  WeightDistribution<S> dist;
  BatchNormState<S> bn;
  bool is_distributional = false;
};

template <typename S>
struct Model {
  std::vector<Layer<S>> layers;
  WeightMode wmode = WeightMode::Ternary;
  Stage stage = Stage::Pretrained;
  std::string arch;
};

template <typename S>
Shape weight_shape(const LayerSpec& s) {
  return is_conv(s.kind) ? Shape{s.out_ch, s.in_ch, s.kh, s.kw}
                         : Shape{s.out_ch, s.in_ch};
}

// Kaiming-normal full-precision init.
template <typename S>
Tensor<S> kaiming_init(const LayerSpec& s, uint64_t seed) {
  SplitMix64 rng(derive_seed(seed, 0x4b61696dull));
  double std = std::sqrt(2.0 / (double)s.fan_in());
  std::vector<S> w(s.weight_count());
  for (auto& x : w) x = (S)(std * rng.normal());
  return Tensor<S>::from_data(weight_shape<S>(s), std::move(w), true);
}

// Full-precision model over the given specs (LAR kinds included; they are
// simply trained as dense layers).  Used for pretraining.
template <typename S>
Model<S> make_pretrain_model(const std::vector<LayerSpec>& specs,
                             const std::string& arch, uint64_t seed) {
  Model<S> m;
  m.arch = arch;
  m.stage = Stage::Pretrained;
  for (size_t i = 0; i < specs.size(); ++i) {
    Layer<S> l;
    l.spec = specs[i];
    l.weight = kaiming_init<S>(specs[i], derive_seed(seed, i));
    l.bias = Tensor<S>::zeros({specs[i].out_ch}, true);
    if (specs[i].has_bn) l.bn = BatchNormState<S>(specs[i].out_ch);
    m.layers.push_back(std::move(l));
  }
  return m;
}

// Distributional model initialized from a pretrained full-precision model:
// interior LAR layers get logits from the pretrained weights, FP layers and
// batch-norm state are copied.
template <typename S>
Model<S> make_lar_model(const Model<S>& pretrained, WeightMode wmode,
                        double p_lo = 0.05, double p_hi = 0.95) {
  Model<S> m;
  m.arch = pretrained.arch;
  m.wmode = wmode;
  m.stage = Stage::LR;
  for (const auto& src : pretrained.layers) {
    Layer<S> l;
    l.spec = src.spec;
    if (is_lar(src.spec.kind)) {
      l.is_distributional = true;
      l.dist = init_from_pretrained(src.weight, wmode, p_lo, p_hi);
    } else {
      l.weight = Tensor<S>::from_data(src.weight.shape(), src.weight.data(), true);
      l.bias = Tensor<S>::from_data(src.bias.shape(), src.bias.data(), true);
    }
    if (src.spec.has_bn) {
      l.bn = BatchNormState<S>(src.spec.out_ch);
      l.bn.gamma = Tensor<S>::from_data({src.spec.out_ch}, src.bn.gamma.data(), true);
      l.bn.beta = Tensor<S>::from_data({src.spec.out_ch}, src.bn.beta.data(), true);
      l.bn.running_mean = src.bn.running_mean;
      l.bn.running_var = src.bn.running_var;
    }
    m.layers.push_back(std::move(l));
  }
  return m;
}

// Distributional model with maximum-entropy distributions and random FP
// layers; handy for tests that skip pretraining.
template <typename S>
Model<S> make_uniform_lar_model(const std::vector<LayerSpec>& specs,
                                const std::string& arch, WeightMode wmode,
                                uint64_t seed) {
  Model<S> m = make_pretrain_model<S>(specs, arch, seed);
  m.arch = arch;
  m.wmode = wmode;
  m.stage = Stage::LAR;
  for (auto& l : m.layers)
    if (is_lar(l.spec.kind)) {
      l.is_distributional = true;
      l.dist = WeightDistribution<S>::uniform(wmode, weight_shape<S>(l.spec));
      l.weight = Tensor<S>();
      l.bias = Tensor<S>();
    }
  return m;
}

template <typename S>
struct ForwardOptions {
  RunMode mode = RunMode::LAR;
  bool training = true;
  uint64_t noise_seed = 0;
  S tau = (S)1.2;
  bool hard = true;
  ContinuousAct cont_act = ContinuousAct::Relu;  // LR-stage activation
};

template <typename S>
struct ForwardTrace {
  // sign probabilities per activation position (empty tensor where none)
  std::vector<Tensor<S>> sign_probs;
};

template <typename S>
Tensor<S> model_forward(Model<S>& model, const Tensor<S>& x,
                        const ForwardOptions<S>& opt,
                        ForwardTrace<S>* trace = nullptr) {
  Tensor<S> h = x;
  std::vector<Tensor<S>> acts(model.layers.size());
  if (trace) trace->sign_probs.assign(model.layers.size(), Tensor<S>());
  for (size_t i = 0; i < model.layers.size(); ++i) {
    Layer<S>& l = model.layers[i];
    const LayerSpec& sp = l.spec;
    if (!is_conv(sp.kind) && h.shape().size() > 2)
      h = reshape(h, {h.shape()[0], h.numel() / h.shape()[0]});

    PreActivationDistribution<S> pre;
    if (l.is_distributional) {
      pre = is_conv(sp.kind)
                ? clt_forward_conv(h, l.dist, sp.stride, sp.pad)
                : clt_forward_linear(h, l.dist);
    } else {
      pre.m = is_conv(sp.kind)
                  ? add_channel(conv2d(h, l.weight, sp.stride, sp.pad), l.bias)
                  : add_channel(linear(h, l.weight), l.bias);
      pre.v = Tensor<S>::zeros(pre.m.shape());
    }
    if (sp.skip_from >= 0) {
      if (!acts[sp.skip_from].defined() ||
          acts[sp.skip_from].shape() != pre.m.shape())
        throw std::invalid_argument("model_forward: bad residual source");
      pre.m = add(pre.m, acts[sp.skip_from]);
    }
    if (sp.has_bn) pre = dist_batch_norm(pre, l.bn, opt.training);

    if (!sp.has_act) {
      h = pre.m;
    } else if (opt.mode == RunMode::LAR) {
      Tensor<S> p = sign_probability(pre);
      if (trace) trace->sign_probs[i] = p;
      h = binary_activation(p, opt.tau, opt.hard,
                            derive_seed(opt.noise_seed, i));
    } else {
      Tensor<S> z = pre.m;
      if (l.is_distributional) {  // local reparameterization sample
        Tensor<S> eps =
            normal_noise<S>(pre.m.shape(), derive_seed(opt.noise_seed, i));
        z = add(pre.m, mul(eps, pre.v));
      }
      bool use_tanh = opt.mode == RunMode::Pretrain ||
                      opt.cont_act == ContinuousAct::Tanh;
      h = use_tanh ? tanh_t(z) : relu_t(z);
    }
    acts[i] = h;
  }
  return h;
}

// ---- parameter collection -------------------------------------------------

enum class ParamGroup { FullPrecision, LastLayer, Logits, BatchNorm };

template <typename S>
struct ParamRef {
  Tensor<S> tensor;
  ParamGroup group;
};

template <typename S>
std::vector<ParamRef<S>> collect_params(Model<S>& model) {
  std::vector<ParamRef<S>> out;
  size_t last_fp = model.layers.size();
  for (size_t i = model.layers.size(); i-- > 0;)
    if (!model.layers[i].is_distributional) {
      last_fp = i;
      break;
    }
  for (size_t i = 0; i < model.layers.size(); ++i) {
    Layer<S>& l = model.layers[i];
    if (l.is_distributional) {
      if (l.dist.mode == WeightMode::Ternary)
        out.push_back({l.dist.l0, ParamGroup::Logits});
      out.push_back({l.dist.l1, ParamGroup::Logits});
    } else {
      ParamGroup g = (i == last_fp && i + 1 == model.layers.size())
                         ? ParamGroup::LastLayer
                         : ParamGroup::FullPrecision;
      out.push_back({l.weight, g});
      out.push_back({l.bias, g});
    }
    if (l.spec.has_bn) {
      out.push_back({l.bn.gamma, ParamGroup::BatchNorm});
      out.push_back({l.bn.beta, ParamGroup::BatchNorm});
    }
  }
  return out;
}

template <typename S>
std::vector<const WeightDistribution<S>*> collect_dists(const Model<S>& model) {
  std::vector<const WeightDistribution<S>*> out;
  for (const auto& l : model.layers)
    if (l.is_distributional) out.push_back(&l.dist);
  return out;
}

}  // namespace lar
