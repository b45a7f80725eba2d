#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "vcnn/errors.hpp"

namespace vcnn {

static_assert(std::endian::native == std::endian::little,
              "container formats are little-endian; big-endian hosts need byte swaps");

// Minimal little-endian framing shared by the VCNN and VCNR containers.
class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& out) : out_(out) {}

  void magic(const char (&m)[5]) { out_.write(m, 4); }
  void u8(uint8_t v) { out_.write(reinterpret_cast<const char*>(&v), 1); }
  void u32(uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), 4); }
  void u64(uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), 8); }
  void f32(float v) { out_.write(reinterpret_cast<const char*>(&v), 4); }
  void f64(double v) { out_.write(reinterpret_cast<const char*>(&v), 8); }
  void f32_array(const std::vector<float>& v) {
    out_.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& out_;
};

class ByteReader {
 public:
  ByteReader(std::istream& in, std::string context)
      : in_(in), context_(std::move(context)) {}

  void expect_magic(const char (&m)[5]) {
    char buf[4];
    read(buf, 4, "magic");
    if (std::memcmp(buf, m, 4) != 0) {
      throw DataError(context_ + ": bad magic (expected '" + std::string(m) + "')");
    }
  }
  uint8_t u8() { uint8_t v; read(&v, 1, "u8"); return v; }
  uint32_t u32() { uint32_t v; read(&v, 4, "u32"); return v; }
  uint64_t u64() { uint64_t v; read(&v, 8, "u64"); return v; }
  float f32() { float v; read(&v, 4, "f32"); return v; }
  double f64() { double v; read(&v, 8, "f64"); return v; }
  std::vector<float> f32_array(uint64_t n) {
    std::vector<float> v(n);
    read(v.data(), n * sizeof(float), "f32 array");
    return v;
  }
  std::string str() {
    const uint32_t n = u32();
    std::string s(n, '\0');
    read(s.data(), n, "string");
    return s;
  }
  void expect_eof() {
    char c;
    if (in_.read(&c, 1)) throw DataError(context_ + ": trailing bytes");
  }

 private:
  void read(void* dst, size_t n, const char* what) {
    if (!in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n))) {
      throw DataError(context_ + ": truncated while reading " + what);
    }
  }

  std::istream& in_;
  std::string context_;
};

}  // namespace vcnn
