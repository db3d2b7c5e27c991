#include "lar/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "lar/rng.hpp"

namespace lar {

namespace {

uint32_t read_be32(std::ifstream& f, const std::string& path,
                   const char* field) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f)
    throw std::runtime_error(path + ": truncated while reading " + field +
                             " at offset " + std::to_string((long)f.tellg()));
  return ((uint32_t)b[0] << 24) | ((uint32_t)b[1] << 16) |
         ((uint32_t)b[2] << 8) | (uint32_t)b[3];
}

std::vector<unsigned char> read_bytes(std::ifstream& f, const std::string& path,
                                      size_t count) {
  std::vector<unsigned char> buf(count);
  f.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)count);
  if ((size_t)f.gcount() != count)
    throw std::runtime_error(path + ": truncated, expected " +
                             std::to_string(count) + " data bytes, got " +
                             std::to_string((size_t)f.gcount()));
  return buf;
}

}  // namespace

Dataset load_idx(const std::string& image_path, const std::string& label_path) {
  std::ifstream fi(image_path, std::ios::binary);
  if (!fi) throw std::runtime_error("cannot open " + image_path);
  uint32_t magic = read_be32(fi, image_path, "magic");
  if (magic != 0x00000803u)
    throw std::runtime_error(image_path + ": bad image magic 0x" +
                             std::to_string(magic) + " at offset 0");
  uint32_t n = read_be32(fi, image_path, "count");
  uint32_t h = read_be32(fi, image_path, "rows");
  uint32_t w = read_be32(fi, image_path, "cols");
  auto pixels = read_bytes(fi, image_path, (size_t)n * h * w);

  std::ifstream fl(label_path, std::ios::binary);
  if (!fl) throw std::runtime_error("cannot open " + label_path);
  uint32_t lmagic = read_be32(fl, label_path, "magic");
  if (lmagic != 0x00000801u)
    throw std::runtime_error(label_path + ": bad label magic at offset 0");
  uint32_t ln = read_be32(fl, label_path, "count");
  if (ln != n)
    throw std::runtime_error(label_path + ": label count " +
                             std::to_string(ln) + " != image count " +
                             std::to_string(n));
  auto labels = read_bytes(fl, label_path, ln);

  Dataset ds;
  ds.n = n;
  ds.channels = 1;
  ds.height = h;
  ds.width = w;
  ds.images.resize((size_t)n * h * w);
  for (size_t i = 0; i < ds.images.size(); ++i)
    ds.images[i] = (float)pixels[i] / 255.0f;
  ds.labels.resize(n);
  int maxl = 0;
  for (uint32_t i = 0; i < n; ++i) {
    ds.labels[i] = labels[i];
    maxl = std::max(maxl, (int)labels[i]);
  }
  ds.num_classes = maxl + 1;
  return ds;
}

Dataset load_cifar_binary(const std::vector<std::string>& paths) {
  constexpr int64_t kRecord = 3073;
  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.num_classes = 10;
  for (const auto& path : paths) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open " + path);
    int64_t size = (int64_t)f.tellg();
    if (size % kRecord != 0)
      throw std::runtime_error(path + ": size " + std::to_string(size) +
                               " is not a multiple of " +
                               std::to_string(kRecord));
    f.seekg(0);
    int64_t count = size / kRecord;
    std::vector<unsigned char> rec(kRecord);
    for (int64_t i = 0; i < count; ++i) {
      f.read(reinterpret_cast<char*>(rec.data()), kRecord);
      if (!f) throw std::runtime_error(path + ": short read");
      ds.labels.push_back(rec[0]);
      for (int64_t j = 1; j < kRecord; ++j)
        ds.images.push_back((float)rec[j] / 255.0f);
    }
    ds.n += count;
  }
  return ds;
}

ChannelStats compute_channel_stats(const Dataset& ds) {
  ChannelStats st;
  int64_t sp = ds.height * ds.width;
  st.mean.assign(ds.channels, 0.0f);
  st.std.assign(ds.channels, 0.0f);
  std::vector<double> sum(ds.channels, 0.0), sq(ds.channels, 0.0);
  for (int64_t i = 0; i < ds.n; ++i)
    for (int64_t c = 0; c < ds.channels; ++c) {
      const float* p = ds.image(i) + c * sp;
      for (int64_t s = 0; s < sp; ++s) {
        sum[c] += p[s];
        sq[c] += (double)p[s] * p[s];
      }
    }
  double count = (double)ds.n * sp;
  for (int64_t c = 0; c < ds.channels; ++c) {
    double m = sum[c] / count;
    st.mean[c] = (float)m;
    st.std[c] = (float)std::sqrt(std::max(sq[c] / count - m * m, 1e-12));
  }
  return st;
}

void apply_normalization(Dataset& ds, const ChannelStats& stats) {
  int64_t sp = ds.height * ds.width;
  for (int64_t i = 0; i < ds.n; ++i)
    for (int64_t c = 0; c < ds.channels; ++c) {
      float* p = &ds.images[(i * ds.channels + c) * sp];
      for (int64_t s = 0; s < sp; ++s)
        p[s] = (p[s] - stats.mean[c]) / stats.std[c];
    }
}

void apply_per_image_normalization(Dataset& ds) {
  int64_t sz = ds.image_size();
  for (int64_t i = 0; i < ds.n; ++i) {
    float* p = &ds.images[i * sz];
    double sum = 0.0, sq = 0.0;
    for (int64_t s = 0; s < sz; ++s) {
      sum += p[s];
      sq += (double)p[s] * p[s];
    }
    double m = sum / (double)sz;
    double sd = std::sqrt(std::max(sq / (double)sz - m * m, 1e-12));
    for (int64_t s = 0; s < sz; ++s) p[s] = (float)((p[s] - m) / sd);
  }
}

void augment_image(const float* src, int64_t c, int64_t h, int64_t w,
                   const AugmentationPolicy& policy, uint64_t seed,
                   float* dst) {
  if (!policy.enabled || (policy.pad == 0 && policy.flip_prob <= 0.0)) {
    std::memcpy(dst, src, sizeof(float) * c * h * w);
    return;
  }
  SplitMix64 rng(derive_seed(seed, 0xa06u));
  int64_t pad = policy.pad;
  int64_t oy = pad > 0 ? (int64_t)(rng.next() % (uint64_t)(2 * pad + 1)) : 0;
  int64_t ox = pad > 0 ? (int64_t)(rng.next() % (uint64_t)(2 * pad + 1)) : 0;
  bool flip = rng.u01() < policy.flip_prob;
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        int64_t sy = y + oy - pad;
        int64_t sx = x + ox - pad;
        float v = 0.0f;
        if (sy >= 0 && sy < h && sx >= 0 && sx < w)
          v = src[(ch * h + sy) * w + sx];
        int64_t tx = flip ? (w - 1 - x) : x;
        dst[(ch * h + y) * w + tx] = v;
      }
}

std::vector<std::vector<int64_t>> make_batches(int64_t n, int64_t batch_size,
                                               uint64_t shuffle_seed) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<int64_t> perm(n);
  for (int64_t i = 0; i < n; ++i) perm[i] = i;
  SplitMix64 rng(derive_seed(shuffle_seed, 0x5b1ull));
  for (int64_t i = n - 1; i > 0; --i) {
    int64_t j = (int64_t)(rng.next() % (uint64_t)(i + 1));
    std::swap(perm[i], perm[j]);
  }
  std::vector<std::vector<int64_t>> out;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t end = std::min(start + batch_size, n);
    out.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return out;
}

Dataset make_blobs(int64_t n, int64_t dims, int64_t num_classes, uint64_t seed,
                   double spread) {
  Dataset ds;
  ds.n = n;
  ds.channels = dims;
  ds.height = 1;
  ds.width = 1;
  ds.num_classes = num_classes;
  ds.images.resize(n * dims);
  ds.labels.resize(n);
  // fixed random unit-ish centers per class
  SplitMix64 crng(derive_seed(seed, 0xb10b5ull));
  std::vector<double> centers(num_classes * dims);
  for (auto& v : centers) v = crng.normal();
  SplitMix64 rng(derive_seed(seed, 0xda7aull));
  for (int64_t i = 0; i < n; ++i) {
    int64_t cls = i % num_classes;
    ds.labels[i] = (int)cls;
    for (int64_t d = 0; d < dims; ++d)
      ds.images[i * dims + d] =
          (float)(centers[cls * dims + d] + spread * rng.normal());
  }
  return ds;
}

}  // namespace lar
