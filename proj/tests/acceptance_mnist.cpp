// Acceptance criteria that need the real MNIST dataset:
//   6. two-stage pipeline on cnn-small reaches 0.96 test accuracy with low
//      sample spread and ternary sparsity in [0.25, 0.60]
//   7. batch norm ablation: with-BN beats no-BN by >= 2 points, paired seeds
//   8. a last-FC learning-rate multiplier of 0.1 gives strictly lower
//      activation entropy in the last binary layer than 1.0, paired seeds
//
// Looks for the four IDX files under $LARNET_MNIST_DIR, ./data/mnist, or
// ../../data/mnist (ctest working directory).  Exits 77 (ctest SKIP) when
// they are absent.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "lar/model_io.hpp"
#include "lar/trainer.hpp"

using namespace lar;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int crit, const std::string& name, bool ok,
            const std::string& detail, double seconds) {
  std::printf("%s criterion %d (%s): %s [%.0fs]\n", ok ? "PASS" : "FAIL", crit,
              name.c_str(), detail.c_str(), seconds);
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

std::string find_mnist_dir() {
  std::vector<std::string> candidates;
  if (const char* env = std::getenv("LARNET_MNIST_DIR")) candidates.push_back(env);
  candidates.push_back("data/mnist");
  candidates.push_back("../../data/mnist");
  for (const auto& dir : candidates)
    if (fs::exists(dir + "/train-images-idx3-ubyte") &&
        fs::exists(dir + "/train-labels-idx1-ubyte") &&
        fs::exists(dir + "/t10k-images-idx3-ubyte") &&
        fs::exists(dir + "/t10k-labels-idx1-ubyte"))
      return dir;
  return "";
}

Dataset subset(const Dataset& ds, int64_t n) {
  Dataset out = ds;
  out.n = std::min(n, ds.n);
  out.images.assign(ds.images.begin(),
                    ds.images.begin() + out.n * ds.image_size());
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + out.n);
  return out;
}

std::vector<LayerSpec> cnn_specs(const Dataset& ds, bool with_bn) {
  auto specs = build_arch("cnn-small", ds.channels, ds.height, ds.width,
                          ds.num_classes);
  if (!with_bn)
    for (auto& sp : specs) sp.has_bn = false;
  return specs;
}

struct PipelineResult {
  Model<float> model;
  double lar_test_acc = 0.0;
};

// pretrain (tanh) -> distribution init -> LR stage -> LAR stage
PipelineResult run_pipeline(const Dataset& train_ds, const Dataset& test_ds,
                            bool with_bn, uint64_t seed, int pre_epochs,
                            int lr_epochs, int lar_epochs,
                            double last_fc_lr_mult = 0.1) {
  auto specs = cnn_specs(train_ds, with_bn);
  Model<float> pre = make_pretrain_model<float>(specs, "cnn-small", seed);
  TrainConfig cfg;
  cfg.lr = 0.002;  // full-precision stage
  cfg.epochs = pre_epochs;
  cfg.seed = seed;
  cfg.last_fc_lr_mult = last_fc_lr_mult;
  pretrain_continuous(pre, train_ds, test_ds, cfg, &std::cout);

  Model<float> m = make_lar_model(pre, WeightMode::Ternary);

  cfg.lr = 0.01;
  cfg.mode = RunMode::LR;
  cfg.epochs = lr_epochs;
  lar::train(m, train_ds, test_ds, cfg, &std::cout);

  cfg.mode = RunMode::LAR;
  cfg.epochs = lar_epochs;
  auto metrics = lar::train(m, train_ds, test_ds, cfg, &std::cout);
  m.stage = Stage::LAR;
  return {std::move(m), metrics.back().test_acc};
}

void criterion6(const Dataset& train, const Dataset& test) {
  Timer t;
  PipelineResult r = run_pipeline(train, test, true, 1, 2, 3, 10);
  BestOfK best = best_of_k(r.model, 5, test, 100);
  double lo = best.accuracies[0], hi = best.accuracies[0];
  for (double a : best.accuracies) {
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  double spread = hi - lo;
  double sp = sparsity(best.model.layers[1].qweight);
  bool ok = best.accuracy >= 0.96 && spread < 0.005 && sp >= 0.25 &&
            sp <= 0.60 && t.seconds() < 3600.0;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "best-of-5 accuracy %.4f, spread %.4f, sparsity %.3f",
                best.accuracy, spread, sp);
  report(6, "MNIST two-stage end-to-end", ok, buf, t.seconds());
}

void criterion7(const Dataset& train, const Dataset& test) {
  Timer t;
  Dataset small = subset(train, 10000);
  double gap_sum = 0.0;
  int n_seeds = 2;
  for (uint64_t seed : {1ull, 2ull}) {
    double with_bn = run_pipeline(small, test, true, seed, 1, 2, 5).lar_test_acc;
    double no_bn = run_pipeline(small, test, false, seed, 1, 2, 5).lar_test_acc;
    gap_sum += with_bn - no_bn;
  }
  double gap = gap_sum / n_seeds;
  bool ok = gap >= 0.02;
  char buf[120];
  std::snprintf(buf, sizeof(buf), "mean with-BN minus no-BN gap %.4f over %d paired seeds",
                gap, n_seeds);
  report(7, "batch-norm ablation", ok, buf, t.seconds());
}

void criterion8(const Dataset& train, const Dataset& test) {
  Timer t;
  Dataset small = subset(train, 10000);
  bool ok = true;
  std::string detail;
  for (uint64_t seed : {1ull, 2ull}) {
    double ent[2];
    int i = 0;
    for (double mult : {0.1, 1.0}) {
      Model<float> m =
          run_pipeline(small, test, true, seed, 1, 2, 5, mult).model;
      TrainConfig cfg;
      cfg.mode = RunMode::LAR;
      cfg.seed = seed;
      EpochMetrics d = epoch_diagnostics(m, test, cfg, derive_seed(seed, 0xd1));
      ent[i++] = d.act_entropy_per_layer.back();  // last binary layer
    }
    ok = ok && ent[0] < ent[1];
    detail += "seed " + std::to_string(seed) + ": " + std::to_string(ent[0]) +
              " vs " + std::to_string(ent[1]) + "; ";
  }
  report(8, "entropy control via last-FC lr", ok,
         detail + "(mult 0.1 vs 1.0)", t.seconds());
}

}  // namespace

int main() {
  std::string dir = find_mnist_dir();
  if (dir.empty()) {
    std::printf("SKIP criteria 6-8: MNIST IDX files not found (set "
                "LARNET_MNIST_DIR or place them under data/mnist; see "
                "README)\n");
    return 77;
  }
  Dataset train = load_idx(dir + "/train-images-idx3-ubyte",
                           dir + "/train-labels-idx1-ubyte");
  Dataset test = load_idx(dir + "/t10k-images-idx3-ubyte",
                          dir + "/t10k-labels-idx1-ubyte");
  test.num_classes = train.num_classes =
      std::max(train.num_classes, test.num_classes);
  ChannelStats st = compute_channel_stats(train);
  apply_normalization(train, st);
  apply_normalization(test, st);

  criterion6(train, test);
  criterion7(train, test);
  criterion8(train, test);
  std::printf("%s: %d criterion(s) failed\n",
              g_failures == 0 ? "ALL PASS" : "FAILURES", g_failures);
  return g_failures == 0 ? 0 : 1;
}
