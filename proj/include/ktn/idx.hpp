#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ktn/error.hpp"
#include "ktn/io.hpp"

namespace ktn::idx {

inline constexpr std::uint32_t kImageMagic = 0x00000803;
inline constexpr std::uint32_t kLabelMagic = 0x00000801;

/// Grayscale images with pixels rescaled to [0, 1].
struct Images {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<double> pixels;  ///< count x rows x cols

  std::span<const double> image(std::size_t i) const {
    return {pixels.data() + i * rows * cols, rows * cols};
  }
};

namespace detail {
inline std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t& off) {
  if (off + 4 > b.size()) throw FormatError("truncated IDX header", off);
  const std::uint32_t v = (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
                          (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
  off += 4;
  return v;
}
}  // namespace detail

inline Images parse_images(std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  const auto magic = detail::be32(bytes, off);
  if (magic != kImageMagic) {
    throw FormatError("IDX image magic expected 0x803, got 0x" + io::hex64(magic), 0);
  }
  Images im;
  im.count = detail::be32(bytes, off);
  im.rows = detail::be32(bytes, off);
  im.cols = detail::be32(bytes, off);
  const std::size_t n = im.count * im.rows * im.cols;
  if (bytes.size() - off < n) {
    throw FormatError("IDX image payload truncated", bytes.size());
  }
  im.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) im.pixels[i] = bytes[off + i] / 255.0;
  return im;
}

inline std::vector<int> parse_labels(std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  const auto magic = detail::be32(bytes, off);
  if (magic != kLabelMagic) {
    throw FormatError("IDX label magic expected 0x801, got 0x" + io::hex64(magic), 0);
  }
  const std::size_t count = detail::be32(bytes, off);
  if (bytes.size() - off < count) throw FormatError("IDX label payload truncated", bytes.size());
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    labels[i] = bytes[off + i];
    if (labels[i] > 9) throw FormatError("label out of range", off + i);
  }
  return labels;
}

struct Dataset {
  Images images;
  std::vector<int> labels;
};

/// Reads `<dir>/{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
inline Dataset load_mnist(const std::filesystem::path& dir, const std::string& split) {
  const std::string prefix = split == "train" ? "train" : "t10k";
  Dataset d;
  d.images = parse_images(io::read_file(dir / (prefix + "-images-idx3-ubyte")));
  d.labels = parse_labels(io::read_file(dir / (prefix + "-labels-idx1-ubyte")));
  if (d.labels.size() != d.images.count) {
    throw FormatError("image/label count mismatch in " + dir.string(), 0);
  }
  return d;
}

}  // namespace ktn::idx
