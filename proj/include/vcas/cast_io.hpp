#pragma once

// Tensor container files ("CAST"): 4-byte magic, u16 LE version (1), u8 dtype
// (1 = f32, 2 = f64, 3 = u8), u8 ndim, ndim × u32 LE dims, then row-major
// little-endian data.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "vcas/errors.hpp"
#include "vcas/tensor.hpp"

namespace vcas {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3 };

inline constexpr std::uint16_t kCastVersion = 1;

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw FormatError("unknown dtype");
}

// Decoded container; values are kept as doubles regardless of on-disk type
// (f32 and u8 convert exactly).
struct CastArray {
  DType dtype = DType::f64;
  std::vector<std::size_t> dims;
  std::vector<double> values;

  Shape shape() const { return Shape(dims); }
};

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(const std::uint8_t* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::vector<std::uint8_t> cast_header(DType dtype, const Shape& shape) {
  if (shape.rank() > 255) throw InvalidArgument("CAST supports at most 255 dimensions");
  std::vector<std::uint8_t> out{'C', 'A', 'S', 'T'};
  put_le(out, kCastVersion, 2);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(shape.rank()));
  for (auto d : shape.dims()) {
    if (d > 0xffffffffu) throw InvalidArgument("CAST dimension exceeds u32");
    put_le(out, d, 4);
  }
  return out;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_cast(const Tensor<T>& t) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  constexpr DType dt = std::is_same_v<T, float> ? DType::f32 : DType::f64;
  auto out = detail::cast_header(dt, t.shape());
  out.reserve(out.size() + t.numel() * sizeof(T));
  for (T v : t.values()) {
    if constexpr (std::is_same_v<T, float>)
      detail::put_le(out, std::bit_cast<std::uint32_t>(v), 4);
    else
      detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

inline std::vector<std::uint8_t> encode_cast(const Mask& m) {
  auto out = detail::cast_header(DType::u8, m.shape);
  out.insert(out.end(), m.values.begin(), m.values.end());
  return out;
}

inline CastArray decode_cast(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& why) { return FormatError(origin + ": " + why); };
  if (bytes.size() < 8) throw fail("truncated header");
  if (std::memcmp(bytes.data(), "CAST", 4) != 0) throw fail("bad magic");
  const auto version = detail::get_le(bytes.data() + 4, 2);
  if (version != kCastVersion) throw fail("unsupported version " + std::to_string(version));
  const auto code = bytes[6];
  if (code < 1 || code > 3) throw fail("unknown dtype code " + std::to_string(code));
  CastArray a;
  a.dtype = static_cast<DType>(code);
  const std::size_t ndim = bytes[7];
  std::size_t pos = 8;
  if (bytes.size() < pos + 4 * ndim) throw fail("truncated dims");
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const auto d = static_cast<std::size_t>(detail::get_le(bytes.data() + pos, 4));
    if (d == 0) throw fail("zero dimension");
    a.dims.push_back(d);
    count *= d;
    pos += 4;
  }
  const std::size_t esz = dtype_size(a.dtype);
  if (bytes.size() != pos + count * esz)
    throw fail("payload size " + std::to_string(bytes.size() - pos) + " != expected " + std::to_string(count * esz));
  a.values.resize(count);
  const std::uint8_t* p = bytes.data() + pos;
  for (std::size_t i = 0; i < count; ++i, p += esz) {
    switch (a.dtype) {
      case DType::f32: a.values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(p, 4))); break;
      case DType::f64: a.values[i] = std::bit_cast<double>(detail::get_le(p, 8)); break;
      case DType::u8: a.values[i] = *p; break;
    }
  }
  return a;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

template <typename T>
void write_cast(const std::filesystem::path& path, const Tensor<T>& t) {
  write_bytes(path, encode_cast(t));
}

inline void write_cast(const std::filesystem::path& path, const Mask& m) { write_bytes(path, encode_cast(m)); }

inline CastArray read_cast(const std::filesystem::path& path) { return decode_cast(read_bytes(path), path.string()); }

template <typename T>
Tensor<T> to_tensor(const CastArray& a) {
  if (a.dtype == DType::u8) throw FormatError("expected a real-valued container, got u8");
  std::vector<T> v(a.values.begin(), a.values.end());
  return Tensor<T>(a.shape(), std::move(v));
}

inline Mask to_mask(const CastArray& a) {
  if (a.dtype != DType::u8) throw FormatError("expected a u8 container");
  std::vector<std::uint8_t> v(a.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::uint8_t>(a.values[i]);
  return Mask(a.shape(), std::move(v));
}

}  // namespace vcas
