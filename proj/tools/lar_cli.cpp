// lar: command-line driver for the two-stage discrete-network pipeline.
//
//   pretrain  full-precision tanh network
//   init      weight distributions from a pretrained model
//   train     LR or LAR stage on an initialized model
//   eval      accuracy of a training model (sampled) or a packed model
//   export    best-of-k sampled discrete model -> packed file
//   bench     popcount kernel benchmark
//   diag      per-layer entropy histograms
//
// Every command writes a resolved-config JSON snapshot into its output
// directory; metrics files contain no timestamps, so a rerun from the same
// snapshot and seed reproduces them byte for byte.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "lar/model_io.hpp"
#include "lar/trainer.hpp"

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;
using S = float;

namespace {

struct DataOpts {
  std::string format = "blobs";  // blobs | idx | cifar
  std::string train_images, train_labels, test_images, test_labels;
  std::vector<std::string> cifar_train, cifar_test;
  int64_t blob_n = 2048, blob_dims = 16, blob_classes = 10;
  uint64_t blob_seed = 1;
  std::string normalize = "channel";  // channel | image | none
};

void add_data_flags(CLI::App* cmd, DataOpts& d) {
  cmd->add_option("--dataset", d.format, "Dataset format: blobs | idx | cifar")
      ->check(CLI::IsMember({"blobs", "idx", "cifar"}));
  cmd->add_option("--train-images", d.train_images, "IDX train image file");
  cmd->add_option("--train-labels", d.train_labels, "IDX train label file");
  cmd->add_option("--test-images", d.test_images, "IDX test image file");
  cmd->add_option("--test-labels", d.test_labels, "IDX test label file");
  cmd->add_option("--cifar-train", d.cifar_train, "CIFAR binary train batches");
  cmd->add_option("--cifar-test", d.cifar_test, "CIFAR binary test batches");
  cmd->add_option("--blob-n", d.blob_n, "Synthetic blob training points");
  cmd->add_option("--blob-dims", d.blob_dims, "Synthetic blob dimensions");
  cmd->add_option("--blob-classes", d.blob_classes, "Synthetic blob classes");
  cmd->add_option("--blob-seed", d.blob_seed, "Synthetic blob seed");
  cmd->add_option("--normalize", d.normalize,
                  "Input normalization: channel | image | none")
      ->check(CLI::IsMember({"channel", "image", "none"}));
}

json data_config(const DataOpts& d) {
  return json{{"format", d.format},
              {"train_images", d.train_images},
              {"train_labels", d.train_labels},
              {"test_images", d.test_images},
              {"test_labels", d.test_labels},
              {"cifar_train", d.cifar_train},
              {"cifar_test", d.cifar_test},
              {"blob_n", d.blob_n},
              {"blob_dims", d.blob_dims},
              {"blob_classes", d.blob_classes},
              {"blob_seed", d.blob_seed},
              {"normalize", d.normalize}};
}

void require_readable(const std::string& path, const char* what) {
  if (path.empty())
    throw std::invalid_argument(std::string(what) + " path is required");
  if (!fs::exists(path))
    throw std::invalid_argument(std::string(what) + " not found: " + path);
}

std::pair<lar::Dataset, lar::Dataset> load_data(const DataOpts& d) {
  lar::Dataset train, test;
  if (d.format == "blobs") {
    int64_t n_test = std::max<int64_t>(d.blob_n / 4, 1);
    lar::Dataset all = lar::make_blobs(d.blob_n + n_test, d.blob_dims,
                                       d.blob_classes, d.blob_seed);
    auto slice = [&](int64_t start, int64_t count) {
      lar::Dataset out = all;
      out.n = count;
      out.images.assign(all.images.begin() + start * all.image_size(),
                        all.images.begin() + (start + count) * all.image_size());
      out.labels.assign(all.labels.begin() + start,
                        all.labels.begin() + start + count);
      return out;
    };
    train = slice(0, d.blob_n);
    test = slice(d.blob_n, n_test);
  } else if (d.format == "idx") {
    require_readable(d.train_images, "--train-images");
    require_readable(d.train_labels, "--train-labels");
    require_readable(d.test_images, "--test-images");
    require_readable(d.test_labels, "--test-labels");
    train = lar::load_idx(d.train_images, d.train_labels);
    test = lar::load_idx(d.test_images, d.test_labels);
    test.num_classes = train.num_classes =
        std::max(train.num_classes, test.num_classes);
  } else {
    for (const auto& p : d.cifar_train) require_readable(p, "--cifar-train");
    for (const auto& p : d.cifar_test) require_readable(p, "--cifar-test");
    if (d.cifar_train.empty() || d.cifar_test.empty())
      throw std::invalid_argument("cifar requires --cifar-train and --cifar-test");
    train = lar::load_cifar_binary(d.cifar_train);
    test = lar::load_cifar_binary(d.cifar_test);
  }
  train.split = "train";
  test.split = "test";
  if (d.normalize == "channel") {
    lar::ChannelStats st = lar::compute_channel_stats(train);
    lar::apply_normalization(train, st);
    lar::apply_normalization(test, st);
  } else if (d.normalize == "image") {
    lar::apply_per_image_normalization(train);
    lar::apply_per_image_normalization(test);
  }
  return {std::move(train), std::move(test)};
}

struct TrainFlags {
  lar::TrainConfig cfg;
  std::string out = "run";
};

void add_train_flags(CLI::App* cmd, TrainFlags& t) {
  cmd->add_option("--lr", t.cfg.lr, "Initial learning rate (cosine decay)");
  cmd->add_option("--last-fc-lr-mult", t.cfg.last_fc_lr_mult,
                  "Learning-rate multiplier for the last FC layer");
  cmd->add_option("--epochs", t.cfg.epochs, "Training epochs");
  cmd->add_option("--batch", t.cfg.batch_size, "Batch size");
  cmd->add_option("--mc-samples", t.cfg.mc_samples,
                  "Monte-Carlo samples per batch (S)");
  cmd->add_option("--tau", t.cfg.tau, "Gumbel-Softmax temperature");
  cmd->add_option("--prob-decay", t.cfg.prob_decay,
                  "Probability decay coefficient on logits");
  cmd->add_option("--weight-decay", t.cfg.weight_decay,
                  "Weight decay on full-precision parameters");
  cmd->add_option("--seed", t.cfg.seed, "Global seed");
  cmd->add_option("--out", t.out, "Output directory");
  cmd->add_flag("--augment", t.cfg.augment.enabled,
                "Enable pad/crop/flip augmentation");
  cmd->add_option("--aug-pad", t.cfg.augment.pad, "Augmentation padding");
  cmd->add_option("--flip-prob", t.cfg.augment.flip_prob,
                  "Horizontal flip probability");
}

json train_config_json(const lar::TrainConfig& c) {
  return json{{"lr", c.lr},
              {"last_fc_lr_mult", c.last_fc_lr_mult},
              {"epochs", c.epochs},
              {"batch", c.batch_size},
              {"mc_samples", c.mc_samples},
              {"tau", c.tau},
              {"prob_decay", c.prob_decay},
              {"weight_decay", c.weight_decay},
              {"mode", c.mode == lar::RunMode::Pretrain
                           ? "pretrain"
                           : (c.mode == lar::RunMode::LR ? "lr" : "lar")},
              {"lr_act",
               c.lr_act == lar::ContinuousAct::Relu ? "relu" : "tanh"},
              {"hard", c.hard},
              {"seed", c.seed},
              {"augment", c.augment.enabled},
              {"aug_pad", c.augment.pad},
              {"flip_prob", c.augment.flip_prob}};
}

void write_snapshot(const std::string& out_dir, const json& config) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir + "/config.json");
  if (!os) throw std::runtime_error("cannot write " + out_dir + "/config.json");
  os << config.dump(2) << "\n";
}

void write_metrics(const std::string& out_dir,
                   const std::vector<lar::EpochMetrics>& metrics) {
  std::ofstream os(out_dir + "/metrics.jsonl", std::ios::app);
  if (!os)
    throw std::runtime_error("cannot write " + out_dir + "/metrics.jsonl");
  for (const auto& m : metrics) {
    json line{{"epoch", m.epoch},
              {"loss", m.loss},
              {"train_acc", m.train_acc},
              {"test_acc", m.test_acc},
              {"lr", m.lr},
              {"sparsity", m.sparsity},
              {"weight_entropy", m.weight_entropy_per_layer},
              {"act_entropy", m.act_entropy_per_layer}};
    os << line.dump() << "\n";
  }
}

std::string file_magic(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot open " + path);
  char m[4] = {0, 0, 0, 0};
  is.read(m, 4);
  return std::string(m, 4);
}

// ---- commands -------------------------------------------------------------

int cmd_pretrain(const DataOpts& data, TrainFlags& t, const std::string& arch) {
  auto [train_ds, test_ds] = load_data(data);
  t.cfg.mode = lar::RunMode::Pretrain;
  write_snapshot(t.out, json{{"command", "pretrain"},
                             {"arch", arch},
                             {"data", data_config(data)},
                             {"train", train_config_json(t.cfg)}});
  auto specs = lar::build_arch(arch, train_ds.channels, train_ds.height,
                               train_ds.width, train_ds.num_classes);
  lar::Model<S> model = lar::make_pretrain_model<S>(specs, arch, t.cfg.seed);
  auto metrics = lar::pretrain_continuous(model, train_ds, test_ds, t.cfg,
                                          &std::cout);
  write_metrics(t.out, metrics);
  lar::save_model(model, t.out + "/model.larn");
  std::cout << "saved " << t.out << "/model.larn test_acc "
            << metrics.back().test_acc << "\n";
  return 0;
}

int cmd_init(const std::string& from, const std::string& out,
             const std::string& weight_mode, double p_lo, double p_hi) {
  require_readable(from, "--from");
  write_snapshot(out, json{{"command", "init"},
                           {"from", from},
                           {"weight_mode", weight_mode},
                           {"p_zero_lo", p_lo},
                           {"p_zero_hi", p_hi}});
  lar::Model<S> pre = lar::load_model<S>(from);
  lar::WeightMode wm = weight_mode == "binary" ? lar::WeightMode::Binary
                                               : lar::WeightMode::Ternary;
  lar::Model<S> m = lar::make_lar_model(pre, wm, p_lo, p_hi);
  lar::save_model(m, out + "/model.larn");
  std::cout << "saved " << out << "/model.larn\n";
  return 0;
}

int cmd_train(const DataOpts& data, TrainFlags& t, const std::string& from,
              const std::string& stage, const std::string& lr_act, bool soft) {
  require_readable(from, "--from");
  auto [train_ds, test_ds] = load_data(data);
  t.cfg.mode = stage == "lr" ? lar::RunMode::LR : lar::RunMode::LAR;
  t.cfg.lr_act = lr_act == "tanh" ? lar::ContinuousAct::Tanh
                                  : lar::ContinuousAct::Relu;
  t.cfg.hard = !soft;
  write_snapshot(t.out, json{{"command", "train"},
                             {"from", from},
                             {"stage", stage},
                             {"data", data_config(data)},
                             {"train", train_config_json(t.cfg)}});
  lar::Model<S> model = lar::load_model<S>(from);
  auto metrics = lar::train(model, train_ds, test_ds, t.cfg, &std::cout);
  model.stage = t.cfg.mode == lar::RunMode::LR ? lar::Stage::LR
                                               : lar::Stage::LAR;
  write_metrics(t.out, metrics);
  lar::save_model(model, t.out + "/model.larn");
  std::cout << "saved " << t.out << "/model.larn test_acc "
            << metrics.back().test_acc << "\n";
  return 0;
}

int cmd_eval(const DataOpts& data, const std::string& model_path,
             const std::string& out, uint64_t seed) {
  require_readable(model_path, "--model");
  auto [train_ds, test_ds] = load_data(data);
  (void)train_ds;
  write_snapshot(out, json{{"command", "eval"},
                           {"model", model_path},
                           {"data", data_config(data)},
                           {"seed", seed}});
  double acc;
  std::string kind;
  std::string magic = file_magic(model_path);
  if (magic == "LARP") {
    lar::PackedModel pm = lar::load_packed(model_path);
    acc = lar::evaluate_packed(pm, test_ds);
    kind = "packed";
  } else {
    lar::Model<S> m = lar::load_model<S>(model_path);
    lar::SampledModel sm = lar::sample_model(m, seed);
    acc = lar::evaluate_sampled(sm, test_ds);
    kind = "sampled";
  }
  json record{{"model", model_path},
              {"kind", kind},
              {"n", test_ds.n},
              {"accuracy", acc}};
  std::ofstream os(out + "/eval.json");
  os << record.dump(2) << "\n";
  std::cout << record.dump() << "\n";
  return 0;
}

int cmd_export(const DataOpts& data, const std::string& from,
               const std::string& out, int k, uint64_t seed) {
  require_readable(from, "--from");
  auto [train_ds, test_ds] = load_data(data);
  (void)train_ds;
  write_snapshot(out, json{{"command", "export"},
                           {"from", from},
                           {"data", data_config(data)},
                           {"k", k},
                           {"seed", seed}});
  lar::Model<S> m = lar::load_model<S>(from);
  lar::BestOfK best = lar::best_of_k(m, k, test_ds, seed);
  lar::PackedModel pm = lar::pack_model(best.model);
  lar::save_packed(pm, out + "/model.larp");
  json record{{"k", k},
              {"chosen", best.index},
              {"accuracy", best.accuracy},
              {"accuracies", best.accuracies}};
  std::ofstream os(out + "/export.json");
  os << record.dump(2) << "\n";
  std::cout << record.dump() << "\n";
  return 0;
}

int cmd_bench(const std::string& out, std::vector<int64_t> lengths,
              int64_t iters, uint64_t seed) {
  write_snapshot(out, json{{"command", "bench"},
                           {"lengths", lengths},
                           {"iters", iters},
                           {"seed", seed}});
  std::ofstream os(out + "/bench.jsonl", std::ios::app);
  for (int64_t len : lengths) {
    lar::DotBenchmark b = lar::benchmark_ternary_dot(len, iters, seed);
    json line{{"op", "ternary_dot"},
              {"length", b.length},
              {"ns_packed", b.ns_packed},
              {"ns_float", b.ns_float},
              {"speedup", b.speedup}};
    os << line.dump() << "\n";
    std::cout << line.dump() << "\n";
  }
  return 0;
}

int cmd_diag(const DataOpts& data, const std::string& model_path,
             const std::string& out, uint64_t seed) {
  require_readable(model_path, "--model");
  auto [train_ds, test_ds] = load_data(data);
  (void)train_ds;
  write_snapshot(out, json{{"command", "diag"},
                           {"model", model_path},
                           {"data", data_config(data)},
                           {"seed", seed}});
  lar::Model<S> m = lar::load_model<S>(model_path);
  const int kBins = 20;
  auto histogram = [&](const std::vector<double>& values, double hi) {
    std::vector<int64_t> bins(kBins, 0);
    for (double v : values) {
      int b = (int)(v / hi * kBins);
      bins[std::min(std::max(b, 0), kBins - 1)]++;
    }
    return bins;
  };
  auto write_csv = [&](const std::string& name, const std::vector<int64_t>& bins,
                       double hi) {
    std::ofstream os(out + "/" + name);
    os << "bin_lo,bin_hi,count\n";
    for (int b = 0; b < kBins; ++b)
      os << (hi * b / kBins) << "," << (hi * (b + 1) / kBins) << ","
         << bins[b] << "\n";
  };
  for (size_t i = 0; i < m.layers.size(); ++i) {
    if (!m.layers[i].is_distributional) continue;
    auto h = lar::weight_entropy(m.layers[i].dist);
    write_csv("layer" + std::to_string(i) + "_weight_entropy.csv",
              histogram(h, std::log(3.0) + 1e-9), std::log(3.0) + 1e-9);
  }
  // activation entropies from an eval-mode forward over the test set
  lar::TrainConfig cfg;
  cfg.seed = seed;
  lar::ForwardTrace<S> trace;
  lar::stochastic_accuracy(m, test_ds, cfg, seed, &trace,
                           std::min<int64_t>(test_ds.n, 1024));
  for (size_t i = 0; i < trace.sign_probs.size(); ++i) {
    if (!trace.sign_probs[i].defined()) continue;
    std::vector<double> h;
    for (S p : trace.sign_probs[i].data())
      h.push_back(lar::binary_entropy((double)p));
    write_csv("layer" + std::to_string(i) + "_act_entropy.csv",
              histogram(h, std::log(2.0) + 1e-9), std::log(2.0) + 1e-9);
  }
  std::cout << "diagnostics written to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete-weight network training and inference"};
  app.require_subcommand(1);

  DataOpts data;
  TrainFlags tf;
  std::string arch = "mlp-small";
  std::string from, model_path, stage = "lar", lr_act = "relu";
  std::string weight_mode = "ternary";
  std::string out = "run";
  double p_lo = 0.05, p_hi = 0.95;
  bool soft = false;
  int k = 5;
  uint64_t seed = 0;
  std::vector<int64_t> lengths{4096};
  int64_t iters = 20000;

  auto* pre = app.add_subcommand("pretrain", "Full-precision pretraining");
  add_data_flags(pre, data);
  add_train_flags(pre, tf);
  pre->add_option("--arch", arch, "mlp-small | cnn-small | mini-resnet");

  auto* init = app.add_subcommand("init", "Distributions from a pretrained model");
  init->add_option("--from", from, "Pretrained model file")->required();
  init->add_option("--out", out, "Output directory");
  init->add_option("--weight-mode", weight_mode, "ternary | binary")
      ->check(CLI::IsMember({"ternary", "binary"}));
  init->add_option("--p-zero-lo", p_lo, "Probability clip lower bound");
  init->add_option("--p-zero-hi", p_hi, "Probability clip upper bound");

  auto* train = app.add_subcommand("train", "LR- or LAR-stage training");
  add_data_flags(train, data);
  add_train_flags(train, tf);
  train->add_option("--from", from, "Initialized model file")->required();
  train->add_option("--stage", stage, "lr | lar")
      ->check(CLI::IsMember({"lr", "lar"}));
  train->add_option("--lr-act", lr_act, "LR-stage activation: relu | tanh")
      ->check(CLI::IsMember({"relu", "tanh"}));
  train->add_flag("--soft", soft, "Soft (non-straight-through) activations");

  auto* eval = app.add_subcommand("eval", "Evaluate a model file");
  add_data_flags(eval, data);
  eval->add_option("--model", model_path, "Model file (.larn or .larp)")
      ->required();
  eval->add_option("--out", out, "Output directory");
  eval->add_option("--seed", seed, "Sampling seed for training models");

  auto* exp = app.add_subcommand("export", "Best-of-k export to a packed model");
  add_data_flags(exp, data);
  exp->add_option("--from", from, "Trained model file")->required();
  exp->add_option("--out", out, "Output directory");
  exp->add_option("--k", k, "Discrete samples to draw");
  exp->add_option("--seed", seed, "Sampling seed");

  auto* bench = app.add_subcommand("bench", "Popcount kernel benchmark");
  bench->add_option("--out", out, "Output directory");
  bench->add_option("--lengths", lengths, "Dot-product lengths");
  bench->add_option("--iters", iters, "Iterations per length");
  bench->add_option("--seed", seed, "Data seed");

  auto* diag = app.add_subcommand("diag", "Entropy histograms per layer");
  add_data_flags(diag, data);
  diag->add_option("--model", model_path, "Model file (.larn)")->required();
  diag->add_option("--out", out, "Output directory");
  diag->add_option("--seed", seed, "Noise seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(data, tf, arch);
    if (init->parsed()) return cmd_init(from, out, weight_mode, p_lo, p_hi);
    if (train->parsed()) return cmd_train(data, tf, from, stage, lr_act, soft);
    if (eval->parsed()) return cmd_eval(data, model_path, out, seed);
    if (exp->parsed()) return cmd_export(data, from, out, k, seed);
    if (bench->parsed()) return cmd_bench(out, lengths, iters, seed);
    if (diag->parsed()) return cmd_diag(data, model_path, out, seed);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
