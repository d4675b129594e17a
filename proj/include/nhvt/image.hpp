#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nhvt {

// 8-bit raster, interleaved HWC. channels is 1 (gray / class mask) or 3 (RGB).
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::int64_t h, std::int64_t w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), fill) {}

  std::uint8_t& at(std::int64_t y, std::int64_t x, int c = 0) { return pixels[index(y, x, c)]; }
  std::uint8_t at(std::int64_t y, std::int64_t x, int c = 0) const { return pixels[index(y, x, c)]; }
  std::size_t index(std::int64_t y, std::int64_t x, int c = 0) const {
    return static_cast<std::size_t>((y * width + x) * channels + c);
  }
  bool operator==(const Image&) const = default;
};

// Class-index masks for a batch, laid out (N, H, W).
struct LabelBatch {
  std::int64_t n = 0, height = 0, width = 0;
  std::vector<std::uint8_t> labels;

  LabelBatch() = default;
  LabelBatch(std::int64_t n_, std::int64_t h, std::int64_t w, std::uint8_t fill = 0)
      : n(n_), height(h), width(w), labels(static_cast<std::size_t>(n_ * h * w), fill) {}
  // Single-image batch from a one-channel mask.
  static LabelBatch from_mask(const Image& mask);
  // Stacks equally sized one-channel masks.
  static LabelBatch stack(const std::vector<Image>& masks);
  Image mask(std::int64_t i) const;

  std::int64_t pixels() const { return n * height * width; }
  bool operator==(const LabelBatch&) const = default;
};

}  // namespace nhvt
