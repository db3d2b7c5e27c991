#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "lar/data.hpp"

using namespace lar;

namespace {

std::string temp_path(const std::string& name) {
  return "/tmp/lar_test_" + name;
}

void write_file(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(b.data()), (std::streamsize)b.size());
}

void push_be32(std::vector<unsigned char>& b, uint32_t v) {
  b.push_back((unsigned char)(v >> 24));
  b.push_back((unsigned char)(v >> 16));
  b.push_back((unsigned char)(v >> 8));
  b.push_back((unsigned char)v);
}

std::vector<unsigned char> idx_images(uint32_t n, uint32_t h, uint32_t w,
                                      const std::vector<unsigned char>& px) {
  std::vector<unsigned char> b;
  push_be32(b, 0x803);
  push_be32(b, n);
  push_be32(b, h);
  push_be32(b, w);
  b.insert(b.end(), px.begin(), px.end());
  return b;
}

std::vector<unsigned char> idx_labels(uint32_t n,
                                      const std::vector<unsigned char>& lab) {
  std::vector<unsigned char> b;
  push_be32(b, 0x801);
  push_be32(b, n);
  b.insert(b.end(), lab.begin(), lab.end());
  return b;
}

}  // namespace

TEST_CASE("IDX loader parses a hand-built file") {
  std::vector<unsigned char> px{0, 51, 102, 153, 204, 255,
                                10, 20, 30, 40, 50, 60};
  write_file(temp_path("img.idx"), idx_images(2, 2, 3, px));
  write_file(temp_path("lab.idx"), idx_labels(2, {3, 1}));
  Dataset ds = load_idx(temp_path("img.idx"), temp_path("lab.idx"));
  CHECK(ds.n == 2);
  CHECK(ds.channels == 1);
  CHECK(ds.height == 2);
  CHECK(ds.width == 3);
  CHECK(ds.num_classes == 4);
  CHECK(ds.labels[0] == 3);
  CHECK(ds.labels[1] == 1);
  for (int i = 0; i < 12; ++i)
    CHECK(ds.images[i] == doctest::Approx((float)px[i] / 255.0f).epsilon(1e-7));
}

TEST_CASE("IDX loader rejects malformed files") {
  std::vector<unsigned char> px(12, 7);
  auto good_img = idx_images(2, 2, 3, px);
  auto good_lab = idx_labels(2, {0, 1});

  SUBCASE("bad image magic") {
    auto bad = good_img;
    bad[3] = 0x99;
    write_file(temp_path("bad1.idx"), bad);
    write_file(temp_path("bad1l.idx"), good_lab);
    CHECK_THROWS_AS((void)load_idx(temp_path("bad1.idx"), temp_path("bad1l.idx")),
                    std::runtime_error);
  }
  SUBCASE("truncated pixel data") {
    auto bad = good_img;
    bad.resize(bad.size() - 5);
    write_file(temp_path("bad2.idx"), bad);
    write_file(temp_path("bad2l.idx"), good_lab);
    CHECK_THROWS_AS((void)load_idx(temp_path("bad2.idx"), temp_path("bad2l.idx")),
                    std::runtime_error);
  }
  SUBCASE("label count mismatch") {
    write_file(temp_path("bad3.idx"), good_img);
    write_file(temp_path("bad3l.idx"), idx_labels(3, {0, 1, 0}));
    CHECK_THROWS_AS((void)load_idx(temp_path("bad3.idx"), temp_path("bad3l.idx")),
                    std::runtime_error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS((void)load_idx(temp_path("nope.idx"), temp_path("nope.idx")),
                    std::runtime_error);
  }
}

TEST_CASE("CIFAR binary loader parses record layout") {
  std::vector<unsigned char> b;
  for (int rec = 0; rec < 2; ++rec) {
    b.push_back((unsigned char)(rec == 0 ? 5 : 2));  // label
    for (int i = 0; i < 3072; ++i) b.push_back((unsigned char)((rec + i) % 256));
  }
  write_file(temp_path("cifar.bin"), b);
  Dataset ds = load_cifar_binary({temp_path("cifar.bin")});
  CHECK(ds.n == 2);
  CHECK(ds.channels == 3);
  CHECK(ds.height == 32);
  CHECK(ds.width == 32);
  CHECK(ds.labels[0] == 5);
  CHECK(ds.labels[1] == 2);
  CHECK(ds.image(0)[0] == doctest::Approx(0.0f));
  CHECK(ds.image(1)[0] == doctest::Approx(1.0f / 255.0f));
  CHECK(ds.image(0)[3071] == doctest::Approx((3071 % 256) / 255.0f));

  SUBCASE("size not a record multiple is rejected") {
    b.pop_back();
    write_file(temp_path("cifar_bad.bin"), b);
    CHECK_THROWS_AS((void)load_cifar_binary({temp_path("cifar_bad.bin")}),
                    std::runtime_error);
  }
}

TEST_CASE("channel normalization yields zero mean, unit variance") {
  Dataset ds = make_blobs(512, 3, 4, 17, 0.5);
  ds.height = 1;
  ds.width = 1;
  auto st = compute_channel_stats(ds);
  apply_normalization(ds, st);
  auto post = compute_channel_stats(ds);
  for (int c = 0; c < 3; ++c) {
    CHECK(post.mean[c] == doctest::Approx(0.0).epsilon(1e-4));
    CHECK(post.std[c] == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("per-image normalization") {
  Dataset ds = make_blobs(8, 16, 2, 3, 0.5);
  apply_per_image_normalization(ds);
  for (int64_t i = 0; i < ds.n; ++i) {
    double sum = 0, sq = 0;
    for (int64_t s = 0; s < 16; ++s) {
      sum += ds.image(i)[s];
      sq += (double)ds.image(i)[s] * ds.image(i)[s];
    }
    CHECK(sum / 16 == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(sq / 16 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("augmentation") {
  const int64_t c = 2, h = 4, w = 4;
  std::vector<float> src(c * h * w);
  for (size_t i = 0; i < src.size(); ++i) src[i] = (float)i;
  std::vector<float> dst(src.size()), dst2(src.size());

  SUBCASE("disabled policy is a bit-exact copy") {
    AugmentationPolicy off{4, 0.5, false};
    augment_image(src.data(), c, h, w, off, 9, dst.data());
    CHECK(dst == src);
  }
  SUBCASE("deterministic per seed") {
    AugmentationPolicy pol{2, 0.5, true};
    augment_image(src.data(), c, h, w, pol, 42, dst.data());
    augment_image(src.data(), c, h, w, pol, 42, dst2.data());
    CHECK(dst == dst2);
  }
  SUBCASE("pure flip reverses rows and is an involution") {
    AugmentationPolicy flip{0, 1.0, true};
    augment_image(src.data(), c, h, w, flip, 1, dst.data());
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          CHECK(dst[(ch * h + y) * w + x] ==
                src[(ch * h + y) * w + (w - 1 - x)]);
    augment_image(dst.data(), c, h, w, flip, 1, dst2.data());
    CHECK(dst2 == src);
  }
  SUBCASE("crop output pixels come from the source or the zero padding") {
    AugmentationPolicy pol{2, 0.0, true};
    augment_image(src.data(), c, h, w, pol, 7, dst.data());
    for (float v : dst) {
      bool ok = v == 0.0f;
      for (float s : src) ok = ok || v == s;
      CHECK(ok);
    }
  }
}

TEST_CASE("batches form a permutation of the dataset") {
  auto batches = make_batches(103, 32, 5);
  CHECK(batches.size() == 4);
  CHECK(batches[0].size() == 32);
  CHECK(batches[3].size() == 7);  // final partial batch kept
  std::vector<int> seen(103, 0);
  for (const auto& b : batches)
    for (int64_t i : b) seen[i]++;
  for (int v : seen) CHECK(v == 1);

  auto again = make_batches(103, 32, 5);
  CHECK(batches == again);
  auto other = make_batches(103, 32, 6);
  CHECK(batches != other);
  CHECK_THROWS_AS((void)make_batches(10, 0, 1), std::invalid_argument);
}

TEST_CASE("synthetic blobs are deterministic and well separated") {
  Dataset a = make_blobs(60, 4, 3, 11);
  Dataset b = make_blobs(60, 4, 3, 11);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.n == 60);
  CHECK(a.channels == 4);
  CHECK(a.num_classes == 3);
  for (int64_t i = 0; i < a.n; ++i) CHECK(a.labels[i] == i % 3);
  // same-class points cluster: distance to own class mean is far below the
  // distance to other class means
  std::vector<double> centers(3 * 4, 0.0);
  for (int64_t i = 0; i < a.n; ++i)
    for (int d = 0; d < 4; ++d)
      centers[a.labels[i] * 4 + d] += a.image(i)[d] / 20.0;
  for (int64_t i = 0; i < a.n; ++i) {
    double own = 0.0, best_other = 1e30;
    for (int cls = 0; cls < 3; ++cls) {
      double d2 = 0.0;
      for (int d = 0; d < 4; ++d) {
        double diff = a.image(i)[d] - centers[cls * 4 + d];
        d2 += diff * diff;
      }
      if (cls == a.labels[i]) own = d2;
      else best_other = std::min(best_other, d2);
    }
    CHECK(own < best_other);
  }
}
