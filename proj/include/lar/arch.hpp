#pragma once
// Data-driven architecture descriptors shared by the training model, the
// sampled/packed inference models, and the file formats.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lar {

enum class LayerKind : uint8_t { FpLinear = 0, FpConv = 1, LarLinear = 2, LarConv = 3 };

inline bool is_conv(LayerKind k) {
  return k == LayerKind::FpConv || k == LayerKind::LarConv;
}
inline bool is_lar(LayerKind k) {
  return k == LayerKind::LarLinear || k == LayerKind::LarConv;
}

struct LayerSpec {
  LayerKind kind = LayerKind::FpLinear;
  int64_t in_ch = 0, out_ch = 0;
  int64_t kh = 1, kw = 1, stride = 1, pad = 0;
  bool has_bn = false;
  bool has_act = false;   // activation position: sign in LAR mode
  int32_t skip_from = -1; // residual: add that layer's activation to the mean

  int64_t weight_count() const { return out_ch * in_ch * kh * kw; }
  int64_t fan_in() const { return in_ch * kh * kw; }
};

inline int64_t conv_out(int64_t n, int64_t k, int64_t stride, int64_t pad) {
  return (n + 2 * pad - k) / stride + 1;
}

// Named architectures.  First and last layers stay full precision; interior
// layers carry weight distributions.
inline std::vector<LayerSpec> build_arch(const std::string& name,
                                         int64_t in_ch, int64_t H, int64_t W,
                                         int64_t num_classes) {
  std::vector<LayerSpec> specs;
  auto conv = [](LayerKind k, int64_t ci, int64_t co, int64_t s,
                 int32_t skip = -1) {
    LayerSpec l;
    l.kind = k;
    l.in_ch = ci;
    l.out_ch = co;
    l.kh = l.kw = 3;
    l.stride = s;
    l.pad = 1;
    l.has_bn = true;
    l.has_act = true;
    l.skip_from = skip;
    return l;
  };
  auto fc = [](LayerKind k, int64_t ci, int64_t co, bool bn, bool act) {
    LayerSpec l;
    l.kind = k;
    l.in_ch = ci;
    l.out_ch = co;
    l.has_bn = bn;
    l.has_act = act;
    return l;
  };
  if (name == "mlp-small") {
    int64_t in = in_ch * H * W;
    specs.push_back(fc(LayerKind::FpLinear, in, 256, true, true));
    specs.push_back(fc(LayerKind::LarLinear, 256, 256, true, true));
    specs.push_back(fc(LayerKind::FpLinear, 256, num_classes, false, false));
  } else if (name == "cnn-small") {
    int64_t h1 = conv_out(H, 3, 2, 1), w1 = conv_out(W, 3, 2, 1);
    int64_t h2 = conv_out(h1, 3, 2, 1), w2 = conv_out(w1, 3, 2, 1);
    specs.push_back(conv(LayerKind::FpConv, in_ch, 16, 2));
    specs.push_back(conv(LayerKind::LarConv, 16, 32, 2));
    specs.push_back(
        fc(LayerKind::FpLinear, 32 * h2 * w2, num_classes, false, false));
  } else if (name == "mini-resnet") {
    int64_t h1 = conv_out(H, 3, 2, 1), w1 = conv_out(W, 3, 2, 1);
    int64_t h2 = conv_out(h1, 3, 2, 1), w2 = conv_out(w1, 3, 2, 1);
    specs.push_back(conv(LayerKind::FpConv, in_ch, 16, 2));
    specs.push_back(conv(LayerKind::LarConv, 16, 16, 1, /*skip=*/0));
    specs.push_back(conv(LayerKind::LarConv, 16, 32, 2));
    specs.push_back(conv(LayerKind::LarConv, 32, 32, 1, /*skip=*/2));
    specs.push_back(
        fc(LayerKind::FpLinear, 32 * h2 * w2, num_classes, false, false));
  } else {
    throw std::invalid_argument("unknown architecture: " + name);
  }
  return specs;
}

enum class Stage : uint8_t { Pretrained = 0, LR = 1, LAR = 2 };

}  // namespace lar
