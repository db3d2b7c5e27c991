#pragma once
// Little-endian binary primitives for the model file formats.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lar::io {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(reinterpret_cast<const char*>(p), (std::streamsize)n);
}

inline void read_bytes(std::istream& is, void* p, size_t n,
                       const char* field) {
  is.read(reinterpret_cast<char*>(p), (std::streamsize)n);
  if ((size_t)is.gcount() != n)
    throw std::runtime_error(std::string("model file truncated reading ") +
                             field);
}

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));  // host is little-endian (x86)
  write_bytes(os, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* field) {
  unsigned char buf[sizeof(T)];
  read_bytes(is, buf, sizeof(T), field);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

template <typename T>
void write_blob(std::ostream& os, const std::vector<T>& v) {
  write_le<uint64_t>(os, (uint64_t)v.size());
  write_bytes(os, v.data(), v.size() * sizeof(T));
}

template <typename T>
std::vector<T> read_blob(std::istream& is, uint64_t expected,
                         const char* field) {
  uint64_t n = read_le<uint64_t>(is, field);
  if (n != expected)
    throw std::runtime_error(std::string("field ") + field + ": length " +
                             std::to_string(n) + " does not match expected " +
                             std::to_string(expected));
  std::vector<T> v(n);
  read_bytes(is, v.data(), n * sizeof(T), field);
  return v;
}

inline void write_magic(std::ostream& os, const char m[4]) {
  write_bytes(os, m, 4);
}

inline void check_magic(std::istream& is, const char expect[4]) {
  char m[4];
  read_bytes(is, m, 4, "magic");
  if (std::memcmp(m, expect, 4) != 0)
    throw std::runtime_error(std::string("bad magic, expected ") +
                             std::string(expect, 4));
}

}  // namespace lar::io
