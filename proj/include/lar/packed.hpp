#pragma once
// Inference on sampled discrete networks: bitplane packing, popcount dot
// products, batch-norm threshold folding, and a float reference path that
// serves as the exactness oracle for the packed path.

#include <cstdint>
#include <string>
#include <vector>

#include "lar/arch.hpp"
#include "lar/data.hpp"

namespace lar {

// ---- sampled (discrete) model ---------------------------------------------

struct SampledLayer {
  LayerSpec spec;
  std::vector<float> fp_weight, fp_bias;  // FP layers
  std::vector<int8_t> qweight;            // LAR layers: out_ch x (in*kh*kw)
  std::vector<double> gamma, beta, running_mean, running_var;  // if has_bn
  double bn_eps = 1e-5;
};

struct SampledModel {
  std::vector<SampledLayer> layers;
};

// ---- bitplane types -------------------------------------------------------

// bit j of plus = 1 iff w_j = +1; of minus = 1 iff w_j = -1.  LSB-first,
// bits beyond cols are zero in both planes, and plus & minus = 0.
struct PackedTernaryMatrix {
  int64_t rows = 0, cols = 0, words = 0;
  std::vector<uint64_t> plus, minus;       // rows * words each
  std::vector<int32_t> plus_pop, minus_pop;  // per-row popcounts
};

// bit = 1 encodes +1, bit = 0 encodes -1; tail bits are zero.
struct PackedBinaryVector {
  int64_t length = 0, words = 0;
  std::vector<uint64_t> bits;
};

PackedTernaryMatrix pack_ternary(const int8_t* w, int64_t rows, int64_t cols);
std::vector<int8_t> unpack_ternary(const PackedTernaryMatrix& m);
PackedBinaryVector pack_binary(const int8_t* a, int64_t length);

// Exact integer dot product of a ternary weight row with a +-1 vector:
//   (2 pc(P & A) - pc(P)) - (2 pc(M & A) - pc(M))
int32_t ternary_dot(const PackedTernaryMatrix& m, int64_t row,
                    const PackedBinaryVector& a);

// Masked variant: lanes with valid bit 0 contribute exactly 0 (conv padding).
int32_t ternary_dot_masked(const uint64_t* plus, const uint64_t* minus,
                           const uint64_t* act, const uint64_t* valid,
                           int64_t words);

// ---- batch-norm folding ---------------------------------------------------

// sign(gamma (z - mu)/sigma' + beta) == +1  iff  flip * (z - t) >= 0,
// with t = mu - beta sigma'/gamma and flip = sign(gamma).  A zero gamma
// collapses the channel to constant sign(beta) (const_sign != 0).
struct FoldedThreshold {
  double t = 0.0;
  int8_t flip = 1;
  int8_t const_sign = 0;
};

FoldedThreshold fold_channel(double gamma, double beta, double running_mean,
                             double running_var, double eps);

inline int8_t apply_threshold(double z, const FoldedThreshold& f) {
  if (f.const_sign != 0) return f.const_sign;
  double d = f.flip > 0 ? z - f.t : f.t - z;
  return d >= 0.0 ? 1 : -1;
}

// ---- packed model ---------------------------------------------------------

struct PackedLayer {
  LayerSpec spec;
  std::vector<float> fp_weight, fp_bias;  // FP layers
  PackedTernaryMatrix w;                  // LAR layers
  std::vector<FoldedThreshold> thr;       // per output channel, if has_act
};

struct PackedModel {
  std::vector<PackedLayer> layers;
};

PackedModel pack_model(const SampledModel& model);

// ---- forward paths --------------------------------------------------------

// Float oracle: discrete weights evaluated densely, BN from running stats in
// double, sign(0) := +1.  First/last FP layers in float32.
std::vector<float> reference_forward(const SampledModel& model, const float* x,
                                     int64_t c, int64_t h, int64_t w,
                                     std::vector<std::vector<int8_t>>* acts = nullptr);

// Popcount path; must agree with reference_forward bit-for-bit.
std::vector<float> packed_forward(const PackedModel& model, const float* x,
                                  int64_t c, int64_t h, int64_t w,
                                  std::vector<std::vector<int8_t>>* acts = nullptr);

enum class EvalMode { Reference, Packed };

double evaluate_sampled(const SampledModel& model, const Dataset& ds);
double evaluate_packed(const PackedModel& model, const Dataset& ds);

// ---- benchmark ------------------------------------------------------------

struct DotBenchmark {
  int64_t length = 0;
  double ns_packed = 0.0, ns_float = 0.0, speedup = 0.0;
};

DotBenchmark benchmark_ternary_dot(int64_t length, int64_t iters,
                                   uint64_t seed);

}  // namespace lar
