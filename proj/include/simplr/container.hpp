#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "simplr/tensor.hpp"

// Binary tensor container. Layout, all little-endian:
//   magic "SPLR" | version u32 | record count u32
//   per record: name length u16, name bytes (UTF-8), dtype u8 (0=f32, 1=f64),
//               rank u8, extents u64 each, then the flat data.

namespace simplr {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool store_f32 = true;
};

namespace detail {

template <typename T>
inline void put_le(std::string& buf, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
inline T get_le(const char* p) {
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& buf, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_le<uint32_t>(buf, bits);
}

inline void put_f64(std::string& buf, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_le<uint64_t>(buf, bits);
}

inline float get_f32(const char* p) {
  uint32_t bits = get_le<uint32_t>(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline double get_f64(const char* p) {
  uint64_t bits = get_le<uint64_t>(p);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

inline void write_container(const std::string& path, const std::vector<NamedTensor>& records) {
  std::string buf;
  buf += "SPLR";
  detail::put_le<uint32_t>(buf, 1u);
  detail::put_le<uint32_t>(buf, static_cast<uint32_t>(records.size()));
  for (const NamedTensor& r : records) {
    if (r.name.size() > 0xffff) throw Error("container: record name too long: " + r.name);
    detail::put_le<uint16_t>(buf, static_cast<uint16_t>(r.name.size()));
    buf += r.name;
    buf.push_back(r.store_f32 ? 0 : 1);
    buf.push_back(static_cast<char>(r.tensor.rank()));
    for (int e : r.tensor.shape) detail::put_le<uint64_t>(buf, static_cast<uint64_t>(e));
    if (r.store_f32)
      for (double v : r.tensor.data) detail::put_f32(buf, static_cast<float>(v));
    else
      for (double v : r.tensor.data) detail::put_f64(buf, v);
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("container: cannot open " + path + " for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw Error("container: write failed for " + path);
}

inline std::vector<NamedTensor> read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("container: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  size_t pos = 0;
  auto need = [&](size_t n, const std::string& what) {
    if (pos + n > buf.size())
      throw Error("container: " + path + " truncated while reading " + what);
  };
  need(4, "magic");
  if (buf.compare(0, 4, "SPLR") != 0) throw Error("container: " + path + " has bad magic");
  pos = 4;
  need(4, "version");
  uint32_t version = detail::get_le<uint32_t>(buf.data() + pos);
  pos += 4;
  if (version != 1)
    throw Error("container: " + path + " has unsupported version " + std::to_string(version));
  need(4, "record count");
  uint32_t count = detail::get_le<uint32_t>(buf.data() + pos);
  pos += 4;
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    need(2, "name length");
    uint16_t nlen = detail::get_le<uint16_t>(buf.data() + pos);
    pos += 2;
    need(nlen, "record name");
    std::string name = buf.substr(pos, nlen);
    pos += nlen;
    need(2, "dtype/rank of " + name);
    uint8_t dtype = static_cast<uint8_t>(buf[pos++]);
    uint8_t rank = static_cast<uint8_t>(buf[pos++]);
    if (dtype > 1)
      throw Error("container: record " + name + " in " + path + " has unknown dtype " +
                  std::to_string(dtype));
    std::vector<int> shape;
    int64_t n = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      need(8, "extents of " + name);
      uint64_t e = detail::get_le<uint64_t>(buf.data() + pos);
      pos += 8;
      if (e == 0 || e > (1ull << 31))
        throw Error("container: record " + name + " has invalid extent " + std::to_string(e));
      shape.push_back(static_cast<int>(e));
      n *= static_cast<int64_t>(e);
    }
    size_t elem = dtype == 0 ? 4 : 8;
    need(static_cast<size_t>(n) * elem, "data of " + name);
    if (shape.empty()) shape = {1};
    Tensor t(shape);
    for (int64_t j = 0; j < n; ++j) {
      if (dtype == 0)
        t.data[static_cast<size_t>(j)] = static_cast<double>(detail::get_f32(buf.data() + pos));
      else
        t.data[static_cast<size_t>(j)] = detail::get_f64(buf.data() + pos);
      pos += elem;
    }
    out.push_back(NamedTensor{std::move(name), std::move(t), dtype == 0});
  }
  return out;
}

}  // namespace simplr
