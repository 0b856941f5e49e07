#pragma once

// PTF1 tensor files:
//   "PTF1" | u8 rank | rank x u32 LE dims | prod(dims) x float64 LE
// The encoding is independent of host byte order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "protego/error.hpp"
#include "protego/tensor.hpp"

namespace protego::ptf {

inline constexpr char kMagic[4] = {'P', 'T', 'F', '1'};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

/// Serialized size in bytes.
inline std::size_t encoded_size(const Tensor& t) { return 5 + 4 * t.rank() + 8 * t.size(); }

inline std::string encode(const Tensor& t) {
  if (t.rank() > 255) throw FormatError("PTF1: rank " + std::to_string(t.rank()) + " exceeds 255");
  std::string out;
  out.reserve(encoded_size(t));
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xffffffffu) throw FormatError("PTF1: dimension too large");
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (double v : t.values()) detail::put_f64(out, v);
  return out;
}

/// Decodes one tensor starting at bytes[offset]; advances offset past it.
inline Tensor decode(std::string_view bytes, std::size_t& offset) {
  auto need = [&](std::size_t n) {
    if (bytes.size() < offset + n) throw FormatError("PTF1: truncated data");
  };
  need(5);
  if (std::memcmp(bytes.data() + offset, kMagic, 4) != 0) throw FormatError("PTF1: bad magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t rank = p[offset + 4];
  offset += 5;
  need(4 * rank);
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(detail::get_le(p + offset, 4));
    if (shape[i] == 0) throw FormatError("PTF1: zero dimension");
    offset += 4;
  }
  const std::size_t n = numel(shape);
  need(8 * n);
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    values[i] = std::bit_cast<double>(detail::get_le(p + offset, 8));
    offset += 8;
  }
  return Tensor(std::move(shape), std::move(values));
}

inline Tensor decode(std::string_view bytes) {
  std::size_t offset = 0;
  Tensor t = decode(bytes, offset);
  if (offset != bytes.size()) throw FormatError("PTF1: trailing bytes after tensor");
  return t;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

/// create_directories that reports failure as IoError.
inline void make_dirs(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void save(const Tensor& t, const std::filesystem::path& path) { write_file_bytes(path, encode(t)); }

inline Tensor load(const std::filesystem::path& path) {
  try {
    return decode(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace protego::ptf
