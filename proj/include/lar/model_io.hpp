#pragma once
// Bit-exact serialization of training models ("LARN") and packed inference
// models ("LARP").  Little-endian throughout; files are written atomically
// (temp + rename).  Layer descriptors are data-driven so files are
// self-describing.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "lar/model.hpp"
#include "lar/packed.hpp"
#include "lar/sampling.hpp"
#include "lar/serialize.hpp"

namespace lar {

inline constexpr uint32_t kModelFormatVersion = 1;

// implemented in src/model_io.cpp
void atomic_write(const std::string& path, const std::string& bytes);
void save_packed(const PackedModel& model, const std::string& path);
PackedModel load_packed(const std::string& path);
void write_layer_spec(std::ostream& os, const LayerSpec& sp);
LayerSpec read_layer_spec(std::istream& is);

// ---- training model (LARN) ------------------------------------------------

template <typename S>
void save_model(const Model<S>& model, const std::string& path) {
  std::ostringstream os(std::ios::binary);
  io::write_magic(os, "LARN");
  io::write_le<uint32_t>(os, kModelFormatVersion);
  io::write_le<uint8_t>(os, (uint8_t)model.stage);
  io::write_le<uint8_t>(os, (uint8_t)model.wmode);
  io::write_le<uint32_t>(os, (uint32_t)model.arch.size());
  io::write_bytes(os, model.arch.data(), model.arch.size());
  io::write_le<uint32_t>(os, (uint32_t)model.layers.size());
  for (const auto& l : model.layers) {
    write_layer_spec(os, l.spec);
    io::write_le<uint8_t>(os, l.is_distributional ? 1 : 0);
  }
  auto write_f32 = [&os](const std::vector<S>& v) {
    std::vector<float> f(v.begin(), v.end());
    io::write_blob(os, f);
  };
  for (const auto& l : model.layers) {
    if (l.is_distributional) {
      if (l.dist.mode == WeightMode::Ternary) write_f32(l.dist.l0.data());
      write_f32(l.dist.l1.data());
    } else {
      write_f32(l.weight.data());
      write_f32(l.bias.data());
    }
    if (l.spec.has_bn) {
      write_f32(l.bn.gamma.data());
      write_f32(l.bn.beta.data());
      write_f32(l.bn.running_mean);
      write_f32(l.bn.running_var);
    }
  }
  atomic_write(path, os.str());
}

template <typename S>
Model<S> load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model file " + path);
  io::check_magic(is, "LARN");
  uint32_t version = io::read_le<uint32_t>(is, "version");
  if (version != kModelFormatVersion)
    throw std::runtime_error("unsupported version " + std::to_string(version) +
                             " (expected " +
                             std::to_string(kModelFormatVersion) + ")");
  Model<S> m;
  m.stage = (Stage)io::read_le<uint8_t>(is, "stage");
  m.wmode = (WeightMode)io::read_le<uint8_t>(is, "weight mode");
  uint32_t alen = io::read_le<uint32_t>(is, "arch name length");
  m.arch.resize(alen);
  io::read_bytes(is, m.arch.data(), alen, "arch name");
  uint32_t nlayers = io::read_le<uint32_t>(is, "layer count");
  std::vector<uint8_t> dist_flags;
  for (uint32_t i = 0; i < nlayers; ++i) {
    Layer<S> l;
    l.spec = read_layer_spec(is);
    dist_flags.push_back(io::read_le<uint8_t>(is, "distributional flag"));
    m.layers.push_back(std::move(l));
  }
  auto read_f32 = [&is](Shape shape, bool grad, const char* field) {
    auto f = io::read_blob<float>(is, (uint64_t)shape_numel(shape), field);
    return Tensor<S>::from_data(std::move(shape),
                                std::vector<S>(f.begin(), f.end()), grad);
  };
  for (uint32_t i = 0; i < nlayers; ++i) {
    Layer<S>& l = m.layers[i];
    Shape wshape = weight_shape<S>(l.spec);
    if (dist_flags[i]) {
      l.is_distributional = true;
      l.dist.mode = m.wmode;
      if (m.wmode == WeightMode::Ternary)
        l.dist.l0 = read_f32(wshape, true, "l0 logits");
      l.dist.l1 = read_f32(wshape, true, "l1 logits");
    } else {
      l.weight = read_f32(wshape, true, "weight");
      l.bias = read_f32({l.spec.out_ch}, true, "bias");
    }
    if (l.spec.has_bn) {
      l.bn = BatchNormState<S>(l.spec.out_ch);
      l.bn.gamma = read_f32({l.spec.out_ch}, true, "bn gamma");
      l.bn.beta = read_f32({l.spec.out_ch}, true, "bn beta");
      auto rm = io::read_blob<float>(is, (uint64_t)l.spec.out_ch, "bn mean");
      auto rv = io::read_blob<float>(is, (uint64_t)l.spec.out_ch, "bn var");
      l.bn.running_mean.assign(rm.begin(), rm.end());
      l.bn.running_var.assign(rv.begin(), rv.end());
    }
  }
  return m;
}

// Sample discrete weights, fold BN, and write a packed model file.  The
// written file evaluates identically to the float reference on the sample.
template <typename S>
PackedModel export_packed(const Model<S>& model, uint64_t seed,
                          const std::string& path) {
  SampledModel sm = sample_model(model, seed);
  PackedModel pm = pack_model(sm);
  save_packed(pm, path);
  return pm;
}

}  // namespace lar
