#pragma once

// KTNT tensor container:
//   "KTNT" | version u16 | dtype u8 | rank u8 | dims u32[rank] | payload
// All integers little-endian; payload is row-major. dtype 0 = f32 (4 bytes per
// element), dtype 1 = u8 (1 byte per element, value = byte / 255).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ktn/error.hpp"
#include "ktn/tensor.hpp"

namespace ktn::io {

inline constexpr std::uint16_t kKtntVersion = 1;

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 1; }

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw std::runtime_error("short read on " + path.string());
  }
  return bytes;
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed on " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto b = read_file(path);
  return {b.begin(), b.end()};
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
  return fnv1a({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t& off, const char* what) {
  if (off + sizeof(T) > in.size()) throw FormatError(std::string("truncated ") + what, off);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(in[off + i]) << (8 * i);
  off += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace detail

struct KtntHeader {
  std::uint16_t version = kKtntVersion;
  DType dtype = DType::f32;
  std::vector<std::uint32_t> dims;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  std::size_t payload_bytes() const { return element_count() * dtype_size(dtype); }
  std::size_t header_bytes() const { return 4 + 2 + 1 + 1 + 4 * dims.size(); }
};

inline KtntHeader make_header(const Tensor& t, DType dtype) {
  if (t.rank() == 0) throw ShapeError("cannot serialize a rank-0 tensor");
  if (t.rank() > 255) throw ShapeError("rank too large for KTNT");
  KtntHeader h;
  h.dtype = dtype;
  for (auto d : t.dims()) h.dims.push_back(static_cast<std::uint32_t>(d));
  return h;
}

inline std::uint8_t quantize_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Appends one encoded tensor to `out`.
inline void encode_tensor(const Tensor& t, std::vector<std::uint8_t>& out,
                          DType dtype = DType::f32) {
  const KtntHeader h = make_header(t, dtype);
  out.insert(out.end(), {'K', 'T', 'N', 'T'});
  detail::put_le<std::uint16_t>(out, h.version);
  out.push_back(static_cast<std::uint8_t>(h.dtype));
  out.push_back(static_cast<std::uint8_t>(h.dims.size()));
  for (auto d : h.dims) detail::put_le<std::uint32_t>(out, d);
  out.reserve(out.size() + h.payload_bytes());
  if (dtype == DType::f32) {
    for (double v : t.values()) {
      detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  } else {
    for (double v : t.values()) out.push_back(quantize_u8(v));
  }
}

inline KtntHeader decode_header(std::span<const std::uint8_t> in, std::size_t& off) {
  const std::size_t start = off;
  if (off + 4 > in.size()) throw FormatError("truncated KTNT magic", off);
  if (std::memcmp(in.data() + off, "KTNT", 4) != 0) throw FormatError("bad KTNT magic", start);
  off += 4;
  KtntHeader h;
  h.version = detail::get_le<std::uint16_t>(in, off, "KTNT version");
  if (h.version != kKtntVersion) {
    throw FormatError("unsupported KTNT version " + std::to_string(h.version), off - 2);
  }
  const auto dt = detail::get_le<std::uint8_t>(in, off, "KTNT dtype");
  if (dt > 1) throw FormatError("unknown KTNT dtype " + std::to_string(dt), off - 1);
  h.dtype = static_cast<DType>(dt);
  const auto rank = detail::get_le<std::uint8_t>(in, off, "KTNT rank");
  if (rank == 0) throw FormatError("KTNT rank must be >= 1", off - 1);
  for (int i = 0; i < rank; ++i) {
    const auto d = detail::get_le<std::uint32_t>(in, off, "KTNT dims");
    if (d == 0) throw FormatError("KTNT extent must be >= 1", off - 4);
    h.dims.push_back(d);
  }
  return h;
}

/// Decodes one tensor starting at `off` and advances past it.
inline Tensor decode_tensor(std::span<const std::uint8_t> in, std::size_t& off) {
  const KtntHeader h = decode_header(in, off);
  const std::size_t n = h.element_count();
  if (off + h.payload_bytes() > in.size()) {
    throw FormatError("KTNT payload truncated: need " + std::to_string(h.payload_bytes()) +
                          " bytes, have " + std::to_string(in.size() - off),
                      in.size());
  }
  std::vector<double> data(n);
  if (h.dtype == DType::f32) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(in[off + 4 * i + b]) << (8 * b);
      data[i] = std::bit_cast<float>(bits);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) data[i] = in[off + i] / 255.0;
  }
  off += h.payload_bytes();
  std::vector<std::size_t> dims(h.dims.begin(), h.dims.end());
  return Tensor(std::move(dims), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t,
                        DType dtype = DType::f32) {
  std::vector<std::uint8_t> bytes;
  encode_tensor(t, bytes, dtype);
  write_file(path, bytes);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t off = 0;
  Tensor t = decode_tensor(bytes, off);
  if (off != bytes.size()) throw FormatError("trailing bytes after KTNT tensor", off);
  return t;
}

/// Several tensors back to back in one file.
inline void save_tensors(const std::filesystem::path& path, std::span<const Tensor> ts,
                         DType dtype = DType::f32) {
  std::vector<std::uint8_t> bytes;
  for (const auto& t : ts) encode_tensor(t, bytes, dtype);
  write_file(path, bytes);
}

inline std::vector<Tensor> load_tensors(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::vector<Tensor> out;
  std::size_t off = 0;
  while (off < bytes.size()) out.push_back(decode_tensor(bytes, off));
  return out;
}

/// Raw u8 array kept in its stored form (large image sets stay compact in memory).
struct U8Array {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> bytes;
};

inline void save_u8(const std::filesystem::path& path, const U8Array& a) {
  KtntHeader h;
  h.dtype = DType::u8;
  for (auto d : a.dims) h.dims.push_back(static_cast<std::uint32_t>(d));
  if (h.dims.empty()) throw ShapeError("cannot serialize a rank-0 tensor");
  if (h.element_count() != a.bytes.size()) throw ShapeError("u8 array size does not match dims");
  std::vector<std::uint8_t> out{'K', 'T', 'N', 'T'};
  detail::put_le<std::uint16_t>(out, h.version);
  out.push_back(static_cast<std::uint8_t>(h.dtype));
  out.push_back(static_cast<std::uint8_t>(h.dims.size()));
  for (auto d : h.dims) detail::put_le<std::uint32_t>(out, d);
  out.insert(out.end(), a.bytes.begin(), a.bytes.end());
  write_file(path, out);
}

inline U8Array load_u8(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t off = 0;
  const KtntHeader h = decode_header(bytes, off);
  if (h.dtype != DType::u8) throw FormatError("expected a u8 KTNT tensor", 6);
  if (bytes.size() - off != h.payload_bytes()) {
    throw FormatError("u8 payload length mismatch", bytes.size());
  }
  U8Array a;
  a.dims.assign(h.dims.begin(), h.dims.end());
  a.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return a;
}

}  // namespace ktn::io
