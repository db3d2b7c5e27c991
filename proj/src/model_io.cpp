#include "lar/model_io.hpp"

#include <cstdio>
#include <fstream>

namespace lar {

void atomic_write(const std::string& path, const std::string& bytes) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write(bytes.data(), (std::streamsize)bytes.size());
    if (!os) throw std::runtime_error("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("rename " + tmp + " -> " + path + " failed");
}

void write_layer_spec(std::ostream& os, const LayerSpec& sp) {
  io::write_le<uint8_t>(os, (uint8_t)sp.kind);
  io::write_le<uint8_t>(os, sp.has_bn ? 1 : 0);
  io::write_le<uint8_t>(os, sp.has_act ? 1 : 0);
  io::write_le<int32_t>(os, sp.skip_from);
  io::write_le<uint32_t>(os, (uint32_t)sp.in_ch);
  io::write_le<uint32_t>(os, (uint32_t)sp.out_ch);
  io::write_le<uint32_t>(os, (uint32_t)sp.kh);
  io::write_le<uint32_t>(os, (uint32_t)sp.kw);
  io::write_le<uint32_t>(os, (uint32_t)sp.stride);
  io::write_le<uint32_t>(os, (uint32_t)sp.pad);
}

LayerSpec read_layer_spec(std::istream& is) {
  LayerSpec sp;
  uint8_t kind = io::read_le<uint8_t>(is, "layer kind");
  if (kind > 3) throw std::runtime_error("invalid layer kind");
  sp.kind = (LayerKind)kind;
  sp.has_bn = io::read_le<uint8_t>(is, "has_bn") != 0;
  sp.has_act = io::read_le<uint8_t>(is, "has_act") != 0;
  sp.skip_from = io::read_le<int32_t>(is, "skip_from");
  sp.in_ch = io::read_le<uint32_t>(is, "in_ch");
  sp.out_ch = io::read_le<uint32_t>(is, "out_ch");
  sp.kh = io::read_le<uint32_t>(is, "kh");
  sp.kw = io::read_le<uint32_t>(is, "kw");
  sp.stride = io::read_le<uint32_t>(is, "stride");
  sp.pad = io::read_le<uint32_t>(is, "pad");
  return sp;
}

void save_packed(const PackedModel& model, const std::string& path) {
  std::ostringstream os(std::ios::binary);
  io::write_magic(os, "LARP");
  io::write_le<uint32_t>(os, kModelFormatVersion);
  io::write_le<uint32_t>(os, (uint32_t)model.layers.size());
  for (const auto& l : model.layers) write_layer_spec(os, l.spec);
  for (const auto& l : model.layers) {
    if (is_lar(l.spec.kind)) {
      io::write_le<uint64_t>(os, (uint64_t)l.w.rows);
      io::write_le<uint64_t>(os, (uint64_t)l.w.cols);
      io::write_blob(os, l.w.plus);
      io::write_blob(os, l.w.minus);
    } else {
      io::write_blob(os, l.fp_weight);
      io::write_blob(os, l.fp_bias);
    }
    if (l.spec.has_act) {
      for (const auto& t : l.thr) {
        io::write_le<double>(os, t.t);
        io::write_le<int8_t>(os, t.flip);
        io::write_le<int8_t>(os, t.const_sign);
      }
    }
  }
  atomic_write(path, os.str());
}

PackedModel load_packed(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open packed model " + path);
  io::check_magic(is, "LARP");
  uint32_t version = io::read_le<uint32_t>(is, "version");
  if (version != kModelFormatVersion)
    throw std::runtime_error("unsupported version " + std::to_string(version) +
                             " (expected " +
                             std::to_string(kModelFormatVersion) + ")");
  uint32_t nlayers = io::read_le<uint32_t>(is, "layer count");
  PackedModel m;
  for (uint32_t i = 0; i < nlayers; ++i) {
    PackedLayer l;
    l.spec = read_layer_spec(is);
    m.layers.push_back(std::move(l));
  }
  for (auto& l : m.layers) {
    if (is_lar(l.spec.kind)) {
      uint64_t rows = io::read_le<uint64_t>(is, "rows");
      uint64_t cols = io::read_le<uint64_t>(is, "cols");
      if ((int64_t)rows != l.spec.out_ch || (int64_t)cols != l.spec.fan_in())
        throw std::runtime_error("packed layer dims do not match descriptor");
      int64_t words = (int64_t)((cols + 63) / 64);
      l.w.rows = (int64_t)rows;
      l.w.cols = (int64_t)cols;
      l.w.words = words;
      l.w.plus = io::read_blob<uint64_t>(is, rows * words, "plus plane");
      l.w.minus = io::read_blob<uint64_t>(is, rows * words, "minus plane");
      l.w.plus_pop.resize(rows);
      l.w.minus_pop.resize(rows);
      uint64_t tail = cols % 64 ? ((1ull << (cols % 64)) - 1) : ~0ull;
      for (uint64_t r = 0; r < rows; ++r) {
        int32_t pp = 0, np = 0;
        for (int64_t wd = 0; wd < words; ++wd) {
          uint64_t p = l.w.plus[r * words + wd];
          uint64_t n = l.w.minus[r * words + wd];
          if (p & n)
            throw std::runtime_error("packed planes overlap in row " +
                                     std::to_string(r));
          if (wd == words - 1 && ((p | n) & ~tail))
            throw std::runtime_error("packed plane has bits beyond cols");
          pp += __builtin_popcountll(p);
          np += __builtin_popcountll(n);
        }
        l.w.plus_pop[r] = pp;
        l.w.minus_pop[r] = np;
      }
    } else {
      l.fp_weight = io::read_blob<float>(is, (uint64_t)l.spec.weight_count(),
                                         "fp weight");
      l.fp_bias =
          io::read_blob<float>(is, (uint64_t)l.spec.out_ch, "fp bias");
    }
    if (l.spec.has_act) {
      l.thr.resize(l.spec.out_ch);
      for (auto& t : l.thr) {
        t.t = io::read_le<double>(is, "threshold");
        t.flip = io::read_le<int8_t>(is, "flip");
        t.const_sign = io::read_le<int8_t>(is, "const_sign");
      }
    }
  }
  return m;
}

}  // namespace lar
