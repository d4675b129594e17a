#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "nhvt/image.hpp"
#include "nhvt/rng.hpp"
#include "nhvt/tensor.hpp"

namespace nhvt {

// ---- codecs: binary PPM (P6, RGB) and PGM (P5, class indices), maxval 255 ----

// Malformed or missing data on disk (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CodecError : public DataError {
 public:
  CodecError(const std::string& what, std::size_t offset)
      : DataError(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

std::vector<std::uint8_t> encode_pnm(const Image& img);  // P6 for 3 channels, P5 for 1
// `channels` 3 expects P6, 1 expects P5.
Image decode_pnm(const std::vector<std::uint8_t>& bytes, int channels);

Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& rgb);
Image read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image& gray);

// RGB tensor (3, H, W) with values in [0, 1].
Tensorf image_to_tensor(const Image& rgb);
// Inverse of image_to_tensor; rounds and clamps to 0..255.
Image tensor_to_image(const Tensorf& chw);

Tensorf read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Tensorf& chw);
// With num_classes > 0, values >= num_classes are rejected naming the pixel.
Image read_mask(const std::filesystem::path& path, int num_classes = 0);
void write_mask(const std::filesystem::path& path, const Image& mask);
void validate_mask(const Image& mask, int num_classes);

// ---- patches ----

// Index into [0, n) under reflection without edge repeat (… 2 1 | 0 1 2 … n-1 | n-2 …).
std::int64_t reflect_index(std::int64_t i, std::int64_t n);
// Smallest extent >= max(n, size) tiled exactly by windows of `size` at `stride`.
std::int64_t padded_extent(std::int64_t n, std::int64_t size, std::int64_t stride);
Image reflect_pad(const Image& img, std::int64_t height, std::int64_t width);

struct Patch {
  Image image;  // RGB
  Image mask;
  std::string source;
  std::int64_t y = 0, x = 0;  // offset in the padded source
  std::string name() const;   // "<source>_r<y>_c<x>"
};

// Reflect-pads to padded_extent in both axes, then tiles row-major.
std::vector<Patch> extract_patches(const Image& rgb, const Image& mask, std::int64_t size, std::int64_t stride,
                                   const std::string& source = "img");

// ---- samples and augmentation ----

struct Sample {
  Tensorf image;  // (3, h, w), intensities in [0, 1] until normalized
  Image mask;
  std::string id;
};

Sample to_sample(const Patch& p);

struct AugmentPolicy {
  bool flip_h = true;
  double flip_h_prob = 0.5;
  bool flip_v = true;
  double flip_v_prob = 0.5;
  bool affine = true;
  double rotation_deg = 15.0;
  double translate = 0.05;  // fraction of the extent
  double scale_min = 0.9, scale_max = 1.1;
  bool photometric = true;
  double brightness = 0.2, contrast = 0.2, saturation = 0.2;

  void validate() const;
  static AugmentPolicy none();
};

Sample flip_horizontal(const Sample& s);
Sample flip_vertical(const Sample& s);

// Transforms draw from `rng` in a fixed order: h-flip, v-flip, affine
// (angle, tx, ty, scale), photometric (brightness, contrast, saturation).
// Geometry uses bilinear sampling for the image and nearest for the mask,
// both with reflected borders.
Sample augment(const Sample& s, Rng& rng, const AugmentPolicy& policy);

// ---- normalization ----

struct NormStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> std{1, 1, 1};

  void validate() const;  // std > 0 per channel
  void save(const std::filesystem::path& path) const;
  static NormStats load(const std::filesystem::path& path);
};

inline constexpr double kStdFloor = 1e-6;

Tensorf normalize(const Tensorf& chw, const NormStats& stats);
Tensorf denormalize(const Tensorf& chw, const NormStats& stats);

// Two-pass per-channel mean and population std over every pixel. Channels
// with std below kStdFloor are floored; `warning` then describes which.
NormStats compute_norm_stats(const std::vector<Tensorf>& images, std::string* warning = nullptr);

// ---- dataset directory: images/<stem>.ppm, masks/<stem>.pgm, dataset.txt ----

class Dataset {
 public:
  // Verifies every listed stem has both files; lists all problems at once.
  static Dataset open(const std::filesystem::path& root);

  std::size_t size() const { return stems_.size(); }
  const std::vector<std::string>& stems() const { return stems_; }
  const std::filesystem::path& root() const { return root_; }
  Image image(std::size_t i) const;
  Image mask(std::size_t i, int num_classes = 0) const;

 private:
  std::filesystem::path root_;
  std::vector<std::string> stems_;
};

struct NamedPair {
  std::string stem;
  Image image;
  Image mask;
};

void write_dataset(const std::filesystem::path& root, const std::vector<NamedPair>& pairs);

// Loads every pair of a dataset as samples in manifest order.
std::vector<Sample> load_samples(const Dataset& ds, int num_classes);

// ---- synthetic data ----

// Pale stained background with dark elliptical "nuclei"; the mask holds the
// class of each blob (1..num_classes-1) over background 0.
NamedPair synthetic_pair(std::int64_t height, std::int64_t width, int num_classes, Rng& rng,
                         const std::string& stem = "synthetic");

}  // namespace nhvt
