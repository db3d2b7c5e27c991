#include "lar/packed.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "lar/rng.hpp"

namespace lar {

namespace {
constexpr int64_t kWordBits = 64;

int64_t words_for(int64_t bits) { return (bits + kWordBits - 1) / kWordBits; }

inline int pop(uint64_t x) { return __builtin_popcountll(x); }
}  // namespace

PackedTernaryMatrix pack_ternary(const int8_t* w, int64_t rows, int64_t cols) {
  PackedTernaryMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.words = words_for(cols);
  m.plus.assign(rows * m.words, 0);
  m.minus.assign(rows * m.words, 0);
  m.plus_pop.assign(rows, 0);
  m.minus_pop.assign(rows, 0);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) {
      int8_t v = w[r * cols + c];
      if (v == 0) continue;
      if (v != 1 && v != -1)
        throw std::invalid_argument("pack_ternary: entry " +
                                    std::to_string((int)v) + " at (" +
                                    std::to_string(r) + "," +
                                    std::to_string(c) + ") not in {-1,0,+1}");
      uint64_t bit = 1ull << (c % kWordBits);
      if (v == 1) {
        m.plus[r * m.words + c / kWordBits] |= bit;
        ++m.plus_pop[r];
      } else {
        m.minus[r * m.words + c / kWordBits] |= bit;
        ++m.minus_pop[r];
      }
    }
  return m;
}

std::vector<int8_t> unpack_ternary(const PackedTernaryMatrix& m) {
  std::vector<int8_t> w(m.rows * m.cols, 0);
  for (int64_t r = 0; r < m.rows; ++r)
    for (int64_t c = 0; c < m.cols; ++c) {
      uint64_t bit = 1ull << (c % kWordBits);
      bool p = m.plus[r * m.words + c / kWordBits] & bit;
      bool n = m.minus[r * m.words + c / kWordBits] & bit;
      if (p && n) throw std::runtime_error("unpack_ternary: planes overlap");
      w[r * m.cols + c] = p ? 1 : (n ? -1 : 0);
    }
  return w;
}

PackedBinaryVector pack_binary(const int8_t* a, int64_t length) {
  PackedBinaryVector v;
  v.length = length;
  v.words = words_for(length);
  v.bits.assign(v.words, 0);
  for (int64_t i = 0; i < length; ++i)
    if (a[i] > 0) v.bits[i / kWordBits] |= 1ull << (i % kWordBits);
  return v;
}

int32_t ternary_dot(const PackedTernaryMatrix& m, int64_t row,
                    const PackedBinaryVector& a) {
  if (a.length != m.cols)
    throw std::invalid_argument("ternary_dot: length mismatch " +
                                std::to_string(a.length) + " vs " +
                                std::to_string(m.cols));
  const uint64_t* p = &m.plus[row * m.words];
  const uint64_t* n = &m.minus[row * m.words];
  const uint64_t* act = a.bits.data();
  int32_t pa = 0, na = 0;
  for (int64_t i = 0; i < m.words; ++i) {
    pa += pop(p[i] & act[i]);
    na += pop(n[i] & act[i]);
  }
  return (2 * pa - m.plus_pop[row]) - (2 * na - m.minus_pop[row]);
}

int32_t ternary_dot_masked(const uint64_t* plus, const uint64_t* minus,
                           const uint64_t* act, const uint64_t* valid,
                           int64_t words) {
  int32_t pa = 0, pt = 0, na = 0, nt = 0;
  for (int64_t i = 0; i < words; ++i) {
    uint64_t p = plus[i] & valid[i];
    uint64_t n = minus[i] & valid[i];
    pa += pop(p & act[i]);
    pt += pop(p);
    na += pop(n & act[i]);
    nt += pop(n);
  }
  return (2 * pa - pt) - (2 * na - nt);
}

FoldedThreshold fold_channel(double gamma, double beta, double running_mean,
                             double running_var, double eps) {
  FoldedThreshold f;
  double sigma = std::sqrt(running_var + eps);
  if (gamma == 0.0) {
    f.const_sign = beta >= 0.0 ? 1 : -1;
    return f;
  }
  f.t = running_mean - beta * sigma / gamma;
  f.flip = gamma > 0.0 ? 1 : -1;
  return f;
}

// ---- shared full-precision kernels ----------------------------------------

namespace {

// Straightforward float32 accumulation; both forward paths use these so the
// full-precision layers are bit-identical between them.
void conv_f32(const float* x, int64_t C, int64_t H, int64_t W, const float* w,
              int64_t O, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
              const float* bias, float* out, int64_t& Ho, int64_t& Wo) {
  Ho = conv_out(H, kh, stride, pad);
  Wo = conv_out(W, kw, stride, pad);
  for (int64_t o = 0; o < O; ++o)
    for (int64_t oy = 0; oy < Ho; ++oy)
      for (int64_t ox = 0; ox < Wo; ++ox) {
        float acc = bias ? bias[o] : 0.0f;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t ky = 0; ky < kh; ++ky) {
            int64_t iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              acc += w[((o * C + c) * kh + ky) * kw + kx] *
                     x[(c * H + iy) * W + ix];
            }
          }
        out[(o * Ho + oy) * Wo + ox] = acc;
      }
}

void linear_f32(const float* x, int64_t in, const float* w, int64_t out_n,
                const float* bias, float* out) {
  for (int64_t o = 0; o < out_n; ++o) {
    float acc = bias ? bias[o] : 0.0f;
    for (int64_t i = 0; i < in; ++i) acc += w[o * in + i] * x[i];
    out[o] = acc;
  }
}

int8_t bn_sign(const SampledLayer& l, int64_t channel, double z) {
  if (l.spec.has_bn) {
    double sigma = std::sqrt(l.running_var[channel] + l.bn_eps);
    double g = l.gamma[channel];
    z = g * (z - l.running_mean[channel]) / sigma + l.beta[channel];
  }
  return z >= 0.0 ? 1 : -1;
}

}  // namespace

// ---- reference path -------------------------------------------------------

std::vector<float> reference_forward(const SampledModel& model, const float* x,
                                     int64_t c, int64_t h, int64_t w,
                                     std::vector<std::vector<int8_t>>* acts) {
  std::vector<float> cur(x, x + c * h * w);
  int64_t C = c, H = h, W = w;
  std::vector<std::vector<float>> layer_out(model.layers.size());
  if (acts) acts->assign(model.layers.size(), {});
  for (size_t li = 0; li < model.layers.size(); ++li) {
    const SampledLayer& l = model.layers[li];
    const LayerSpec& sp = l.spec;
    std::vector<float> z;
    if (is_conv(sp.kind)) {
      int64_t Ho, Wo;
      z.resize(sp.out_ch * conv_out(H, sp.kh, sp.stride, sp.pad) *
               conv_out(W, sp.kw, sp.stride, sp.pad));
      if (is_lar(sp.kind)) {
        std::vector<float> wf(l.qweight.begin(), l.qweight.end());
        conv_f32(cur.data(), C, H, W, wf.data(), sp.out_ch, sp.kh, sp.kw,
                 sp.stride, sp.pad, nullptr, z.data(), Ho, Wo);
      } else {
        conv_f32(cur.data(), C, H, W, l.fp_weight.data(), sp.out_ch, sp.kh,
                 sp.kw, sp.stride, sp.pad, l.fp_bias.data(), z.data(), Ho, Wo);
      }
      H = Ho;
      W = Wo;
      C = sp.out_ch;
    } else {
      z.resize(sp.out_ch);
      if (is_lar(sp.kind)) {
        std::vector<float> wf(l.qweight.begin(), l.qweight.end());
        linear_f32(cur.data(), sp.in_ch, wf.data(), sp.out_ch, nullptr,
                   z.data());
      } else {
        linear_f32(cur.data(), sp.in_ch, l.fp_weight.data(), sp.out_ch,
                   l.fp_bias.data(), z.data());
      }
      C = sp.out_ch;
      H = W = 1;
    }
    if (sp.skip_from >= 0) {
      const auto& s = layer_out[sp.skip_from];
      if (s.size() != z.size())
        throw std::runtime_error("reference_forward: bad residual source");
      for (size_t i = 0; i < z.size(); ++i) z[i] += s[i];
    }
    if (!sp.has_act) {
      cur = z;  // final scores
    } else {
      int64_t sp_sz = H * W;
      cur.resize(z.size());
      if (acts) (*acts)[li].resize(z.size());
      for (int64_t ch = 0; ch < C; ++ch)
        for (int64_t s = 0; s < sp_sz; ++s) {
          int8_t b = bn_sign(l, ch, (double)z[ch * sp_sz + s]);
          cur[ch * sp_sz + s] = (float)b;
          if (acts) (*acts)[li][ch * sp_sz + s] = b;
        }
    }
    layer_out[li] = cur;
  }
  return cur;
}

// ---- packing --------------------------------------------------------------

PackedModel pack_model(const SampledModel& model) {
  PackedModel out;
  for (const auto& l : model.layers) {
    const LayerSpec& sp = l.spec;
    if (sp.has_bn && !sp.has_act)
      throw std::invalid_argument(
          "pack_model: batch norm without a sign activation cannot be folded");
    if (sp.has_bn && l.running_var.empty())
      throw std::invalid_argument("pack_model: missing BN running stats");
    PackedLayer pl;
    pl.spec = sp;
    if (is_lar(sp.kind)) {
      pl.w = pack_ternary(l.qweight.data(), sp.out_ch, sp.fan_in());
    } else {
      pl.fp_weight = l.fp_weight;
      pl.fp_bias = l.fp_bias;
    }
    if (sp.has_act) {
      pl.thr.resize(sp.out_ch);
      for (int64_t ch = 0; ch < sp.out_ch; ++ch)
        pl.thr[ch] = sp.has_bn
                         ? fold_channel(l.gamma[ch], l.beta[ch],
                                        l.running_mean[ch], l.running_var[ch],
                                        l.bn_eps)
                         : FoldedThreshold{};
    }
    out.layers.push_back(std::move(pl));
  }
  return out;
}

// ---- packed path ----------------------------------------------------------

namespace {

// Gather one conv patch from an int8 +-1 activation image into packed
// activation and validity words (validity 0 on zero-padding lanes).
void gather_patch(const int8_t* act, int64_t C, int64_t H, int64_t W,
                  int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                  int64_t oy, int64_t ox, uint64_t* abits, uint64_t* vbits,
                  int64_t words) {
  std::memset(abits, 0, words * sizeof(uint64_t));
  std::memset(vbits, 0, words * sizeof(uint64_t));
  int64_t lane = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < kh; ++ky) {
      int64_t iy = oy * stride - pad + ky;
      for (int64_t kx = 0; kx < kw; ++kx, ++lane) {
        int64_t ix = ox * stride - pad + kx;
        if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
        vbits[lane / kWordBits] |= 1ull << (lane % kWordBits);
        if (act[(c * H + iy) * W + ix] > 0)
          abits[lane / kWordBits] |= 1ull << (lane % kWordBits);
      }
    }
}

}  // namespace

std::vector<float> packed_forward(const PackedModel& model, const float* x,
                                  int64_t c, int64_t h, int64_t w,
                                  std::vector<std::vector<int8_t>>* acts) {
  int64_t C = c, H = h, W = w;
  std::vector<int8_t> act;        // current +-1 activations
  std::vector<float> scores;
  std::vector<std::vector<int8_t>> layer_act(model.layers.size());
  if (acts) acts->assign(model.layers.size(), {});
  bool first = true;
  for (size_t li = 0; li < model.layers.size(); ++li) {
    const PackedLayer& l = model.layers[li];
    const LayerSpec& sp = l.spec;
    if (is_lar(sp.kind) && first)
      throw std::invalid_argument("packed_forward: first layer must be FP");
    if (is_lar(sp.kind)) {
      // integer path
      std::vector<int32_t> z;
      if (is_conv(sp.kind)) {
        int64_t Ho = conv_out(H, sp.kh, sp.stride, sp.pad);
        int64_t Wo = conv_out(W, sp.kw, sp.stride, sp.pad);
        z.assign(sp.out_ch * Ho * Wo, 0);
        int64_t words = l.w.words;
        std::vector<uint64_t> abits(words), vbits(words);
        for (int64_t oy = 0; oy < Ho; ++oy)
          for (int64_t ox = 0; ox < Wo; ++ox) {
            gather_patch(act.data(), C, H, W, sp.kh, sp.kw, sp.stride, sp.pad,
                         oy, ox, abits.data(), vbits.data(), words);
            for (int64_t o = 0; o < sp.out_ch; ++o)
              z[(o * Ho + oy) * Wo + ox] = ternary_dot_masked(
                  &l.w.plus[o * words], &l.w.minus[o * words], abits.data(),
                  vbits.data(), words);
          }
        H = Ho;
        W = Wo;
        C = sp.out_ch;
      } else {
        PackedBinaryVector a = pack_binary(act.data(), (int64_t)act.size());
        z.resize(sp.out_ch);
        for (int64_t o = 0; o < sp.out_ch; ++o) z[o] = ternary_dot(l.w, o, a);
        C = sp.out_ch;
        H = W = 1;
      }
      if (sp.skip_from >= 0) {
        const auto& s = layer_act[sp.skip_from];
        if (s.size() != z.size())
          throw std::runtime_error("packed_forward: bad residual source");
        for (size_t i = 0; i < z.size(); ++i) z[i] += s[i];
      }
      if (l.thr.empty())
        throw std::invalid_argument("packed_forward: missing fold data");
      int64_t sp_sz = H * W;
      act.resize(z.size());
      for (int64_t ch = 0; ch < C; ++ch)
        for (int64_t s = 0; s < sp_sz; ++s)
          act[ch * sp_sz + s] =
              apply_threshold((double)z[ch * sp_sz + s], l.thr[ch]);
    } else {
      // full precision in float32
      std::vector<float> in;
      if (first) {
        in.assign(x, x + C * H * W);
      } else {
        in.resize(act.size());
        for (size_t i = 0; i < act.size(); ++i) in[i] = (float)act[i];
      }
      std::vector<float> z;
      if (is_conv(sp.kind)) {
        int64_t Ho, Wo;
        z.resize(sp.out_ch * conv_out(H, sp.kh, sp.stride, sp.pad) *
                 conv_out(W, sp.kw, sp.stride, sp.pad));
        conv_f32(in.data(), C, H, W, l.fp_weight.data(), sp.out_ch, sp.kh,
                 sp.kw, sp.stride, sp.pad, l.fp_bias.data(), z.data(), Ho, Wo);
        H = Ho;
        W = Wo;
        C = sp.out_ch;
      } else {
        z.resize(sp.out_ch);
        linear_f32(in.data(), sp.in_ch, l.fp_weight.data(), sp.out_ch,
                   l.fp_bias.data(), z.data());
        C = sp.out_ch;
        H = W = 1;
      }
      if (!sp.has_act) {
        scores = z;
        act.clear();
      } else {
        if (l.thr.empty())
          throw std::invalid_argument("packed_forward: missing fold data");
        int64_t sp_sz = H * W;
        act.resize(z.size());
        for (int64_t ch = 0; ch < C; ++ch)
          for (int64_t s = 0; s < sp_sz; ++s)
            act[ch * sp_sz + s] =
                apply_threshold((double)z[ch * sp_sz + s], l.thr[ch]);
      }
    }
    first = false;
    layer_act[li] = act;
    if (acts) (*acts)[li] = act;
  }
  return scores;
}

// ---- evaluation -----------------------------------------------------------

namespace {
template <typename Fwd>
double eval_loop(const Dataset& ds, Fwd fwd) {
  int64_t correct = 0;
  for (int64_t i = 0; i < ds.n; ++i) {
    std::vector<float> scores = fwd(ds.image(i));
    int64_t best = 0;
    for (size_t k = 1; k < scores.size(); ++k)
      if (scores[k] > scores[best]) best = (int64_t)k;
    correct += best == ds.labels[i];
  }
  return (double)correct / (double)ds.n;
}
}  // namespace

double evaluate_sampled(const SampledModel& model, const Dataset& ds) {
  return eval_loop(ds, [&](const float* img) {
    return reference_forward(model, img, ds.channels, ds.height, ds.width);
  });
}

double evaluate_packed(const PackedModel& model, const Dataset& ds) {
  return eval_loop(ds, [&](const float* img) {
    return packed_forward(model, img, ds.channels, ds.height, ds.width);
  });
}

// ---- benchmark ------------------------------------------------------------

DotBenchmark benchmark_ternary_dot(int64_t length, int64_t iters,
                                   uint64_t seed) {
  SplitMix64 rng(derive_seed(seed, 0xbe9c4ull));
  std::vector<int8_t> w(length), a(length);
  std::vector<float> wf(length), af(length);
  for (int64_t i = 0; i < length; ++i) {
    int r = (int)(rng.next() % 3) - 1;
    w[i] = (int8_t)r;
    wf[i] = (float)r;
    a[i] = rng.u01() < 0.5 ? -1 : 1;
    af[i] = (float)a[i];
  }
  PackedTernaryMatrix m = pack_ternary(w.data(), 1, length);
  PackedBinaryVector av = pack_binary(a.data(), length);

  volatile int64_t sink = 0;
  auto t0 = std::chrono::steady_clock::now();
  for (int64_t it = 0; it < iters; ++it) sink = sink + ternary_dot(m, 0, av);
  auto t1 = std::chrono::steady_clock::now();
  volatile float fsink = 0;
  for (int64_t it = 0; it < iters; ++it) {
    float acc = 0.0f;
    const float* wp = wf.data();
    const float* ap = af.data();
    for (int64_t i = 0; i < length; ++i) acc += wp[i] * ap[i];
    fsink = fsink + acc;
  }
  auto t2 = std::chrono::steady_clock::now();
  (void)sink;
  (void)fsink;
  DotBenchmark b;
  b.length = length;
  b.ns_packed = std::chrono::duration<double, std::nano>(t1 - t0).count() /
                (double)iters;
  b.ns_float = std::chrono::duration<double, std::nano>(t2 - t1).count() /
               (double)iters;
  b.speedup = b.ns_float / b.ns_packed;
  return b;
}

}  // namespace lar
