#pragma once
// Dataset ingestion (MNIST IDX, CIFAR-10 binary), per-channel normalization,
// pad/crop/flip augmentation, deterministic batch iteration, and a synthetic
// blob generator for tests that need no downloads.

#include <cstdint>
#include <string>
#include <vector>

namespace lar {

struct Dataset {
  int64_t n = 0, channels = 0, height = 0, width = 0;
  int64_t num_classes = 0;
  std::vector<float> images;  // n * c * h * w
  std::vector<int> labels;
  std::string split;

  int64_t image_size() const { return channels * height * width; }
  const float* image(int64_t i) const { return &images[i * image_size()]; }
};

struct ChannelStats {
  std::vector<float> mean, std;
};

// IDX (big-endian) readers; pixel bytes scaled to [0,1].
Dataset load_idx(const std::string& image_path, const std::string& label_path);

// CIFAR-10 binary batches: 3073-byte records (label + 3x1024 channel bytes).
Dataset load_cifar_binary(const std::vector<std::string>& paths);

// Train-split statistics; per_image=false is per-channel dataset stats.
ChannelStats compute_channel_stats(const Dataset& ds);
void apply_normalization(Dataset& ds, const ChannelStats& stats);
void apply_per_image_normalization(Dataset& ds);

struct AugmentationPolicy {
  int pad = 4;
  double flip_prob = 0.5;
  bool enabled = true;
};

// Zero-pad, random crop back to the original size, random horizontal flip.
// Identity when disabled.  Deterministic given seed.
void augment_image(const float* src, int64_t c, int64_t h, int64_t w,
                   const AugmentationPolicy& policy, uint64_t seed, float* dst);

// Deterministic permutation split into batches; final partial batch kept.
std::vector<std::vector<int64_t>> make_batches(int64_t n, int64_t batch_size,
                                               uint64_t shuffle_seed);

// Gaussian blobs, one cluster per class, shaped as [dims,1,1] images.
Dataset make_blobs(int64_t n, int64_t dims, int64_t num_classes, uint64_t seed,
                   double spread = 0.15);

}  // namespace lar
