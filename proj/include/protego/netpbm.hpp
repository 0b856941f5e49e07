#pragma once

// Binary PGM (P5) and PPM (P6) images with maxval <= 255.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "protego/error.hpp"
#include "protego/ptf.hpp"

namespace protego::netpbm {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;           // 1 for P5, 3 for P6
  std::vector<std::uint8_t> pixels;   // interleaved, row-major
};

inline std::string encode(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError("netpbm: channels must be 1 or 3");
  if (img.pixels.size() != img.width * img.height * img.channels) throw FormatError("netpbm: pixel count mismatch");
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline Image decode(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&] {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw FormatError("netpbm: malformed header");
    }
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (v > (1u << 24)) throw FormatError("netpbm: header value too large");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("netpbm: expected binary P5 or P6 magic");
  }
  Image img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  img.width = read_uint();
  img.height = read_uint();
  const std::size_t maxval = read_uint();
  if (img.width == 0 || img.height == 0) throw FormatError("netpbm: zero image dimension");
  if (maxval == 0 || maxval > 255) throw FormatError("netpbm: only maxval 1..255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError("netpbm: missing separator after header");
  }
  ++pos;
  const std::size_t n = img.width * img.height * img.channels;
  if (bytes.size() - pos < n) throw FormatError("netpbm: truncated pixel data");
  img.pixels.assign(reinterpret_cast<const std::uint8_t*>(bytes.data() + pos),
                    reinterpret_cast<const std::uint8_t*>(bytes.data() + pos + n));
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
  }
  return img;
}

inline void write(const Image& img, const std::filesystem::path& path) { ptf::write_file_bytes(path, encode(img)); }

inline Image read(const std::filesystem::path& path) {
  try {
    return decode(ptf::read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// [C, H, W] tensor with values pixel / 255.
inline Tensor to_tensor(const Image& img) {
  std::vector<double> v(img.pixels.size());
  const std::size_t hw = img.width * img.height;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < img.channels; ++c) v[c * hw + i] = img.pixels[i * img.channels + c] / 255.0;
  return Tensor({img.channels, img.height, img.width}, std::move(v));
}

}  // namespace protego::netpbm
