#include "nhvt/datapipe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace nhvt {

namespace fs = std::filesystem;

// ---- codecs ----

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(const std::vector<std::uint8_t>& b) : b_(b) {}

  std::size_t pos() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::int64_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::int64_t v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > (1 << 24)) throw CodecError(std::string(what) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw CodecError(std::string("expected ") + what, start);
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  void single_space() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) throw CodecError("expected whitespace after maxval", pos_);
    ++pos_;
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 2;
};

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write " + path.string());
}

Image decode_file(const fs::path& path, int channels) {
  try {
    return decode_pnm(read_bytes(path), channels);
  } catch (const CodecError& e) {
    throw CodecError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace

std::vector<std::uint8_t> encode_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("PNM needs 1 or 3 channels");
  if (img.pixels.size() != static_cast<std::size_t>(img.height * img.width * img.channels)) {
    throw std::invalid_argument("pixel buffer does not match image extent");
  }
  const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

Image decode_pnm(const std::vector<std::uint8_t>& bytes, int channels) {
  const char want = channels == 3 ? '6' : '5';
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != want) {
    throw CodecError(std::string("bad magic, expected P") + want, 0);
  }
  HeaderReader r(bytes);
  const std::int64_t w = r.number("width");
  const std::int64_t h = r.number("height");
  const std::size_t maxval_at = (r.skip_space_and_comments(), r.pos());
  const std::int64_t maxval = r.number("maxval");
  if (maxval != 255) throw CodecError("maxval " + std::to_string(maxval) + " unsupported (need 255)", maxval_at);
  if (w <= 0 || h <= 0) throw CodecError("empty image", maxval_at);
  r.single_space();
  const std::size_t need = static_cast<std::size_t>(w * h * channels);
  if (bytes.size() - r.pos() < need) {
    throw CodecError("truncated payload: " + std::to_string(bytes.size() - r.pos()) + " of " + std::to_string(need) +
                         " bytes",
                     bytes.size());
  }
  Image img(h, w, channels);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos()), need, img.pixels.begin());
  return img;
}

Image read_ppm(const fs::path& path) { return decode_file(path, 3); }
Image read_pgm(const fs::path& path) { return decode_file(path, 1); }

void write_ppm(const fs::path& path, const Image& rgb) {
  if (rgb.channels != 3) throw std::invalid_argument("PPM needs 3 channels");
  write_bytes(path, encode_pnm(rgb));
}

void write_pgm(const fs::path& path, const Image& gray) {
  if (gray.channels != 1) throw std::invalid_argument("PGM needs 1 channel");
  write_bytes(path, encode_pnm(gray));
}

Tensorf image_to_tensor(const Image& rgb) {
  if (rgb.channels != 3) throw std::invalid_argument("expected an RGB image");
  const std::int64_t hw = rgb.height * rgb.width;
  std::vector<float> v(static_cast<std::size_t>(3 * hw));
  for (std::int64_t i = 0; i < hw; ++i) {
    for (int c = 0; c < 3; ++c) {
      v[static_cast<std::size_t>(c * hw + i)] = static_cast<float>(rgb.pixels[static_cast<std::size_t>(i * 3 + c)]) / 255.0f;
    }
  }
  return Tensorf({3, rgb.height, rgb.width}, std::move(v));
}

Image tensor_to_image(const Tensorf& chw) {
  if (chw.ndim() != 3 || chw.dim(0) != 3) throw ShapeError("expected a (3, H, W) tensor");
  const std::int64_t h = chw.dim(1), w = chw.dim(2), hw = h * w;
  Image img(h, w, 3);
  const auto d = chw.data();
  for (std::int64_t i = 0; i < hw; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(d[static_cast<std::size_t>(c * hw + i)]), 0.0, 1.0);
      img.pixels[static_cast<std::size_t>(i * 3 + c)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return img;
}

Tensorf read_image(const fs::path& path) { return image_to_tensor(read_ppm(path)); }
void write_image(const fs::path& path, const Tensorf& chw) { write_ppm(path, tensor_to_image(chw)); }

void validate_mask(const Image& mask, int num_classes) {
  if (mask.channels != 1) throw DataError("mask must have one channel");
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    if (mask.pixels[i] >= num_classes) {
      const auto y = static_cast<std::int64_t>(i) / mask.width, x = static_cast<std::int64_t>(i) % mask.width;
      throw DataError("mask value " + std::to_string(mask.pixels[i]) + " at (" + std::to_string(y) + ", " +
                      std::to_string(x) + ") is not a class in [0, " + std::to_string(num_classes) + ")");
    }
  }
}

Image read_mask(const fs::path& path, int num_classes) {
  Image m = read_pgm(path);
  if (num_classes > 0) {
    try {
      validate_mask(m, num_classes);
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  return m;
}

void write_mask(const fs::path& path, const Image& mask) { write_pgm(path, mask); }

// ---- patches ----

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::int64_t padded_extent(std::int64_t n, std::int64_t size, std::int64_t stride) {
  if (size <= 0 || stride <= 0) throw std::invalid_argument("patch size and stride must be positive");
  const std::int64_t target = std::max(n, size);
  return size + (target - size + stride - 1) / stride * stride;
}

Image reflect_pad(const Image& img, std::int64_t height, std::int64_t width) {
  if (height < img.height || width < img.width) throw std::invalid_argument("reflect_pad cannot shrink");
  Image out(height, width, img.channels);
  for (std::int64_t y = 0; y < height; ++y) {
    const std::int64_t sy = reflect_index(y, img.height);
    for (std::int64_t x = 0; x < width; ++x) {
      const std::int64_t sx = reflect_index(x, img.width);
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

std::string Patch::name() const { return source + "_r" + std::to_string(y) + "_c" + std::to_string(x); }

static Image crop(const Image& img, std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w) {
  Image out(h, w, img.channels);
  const auto row = static_cast<std::size_t>(w * img.channels);
  for (std::int64_t y = 0; y < h; ++y) {
    std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(img.index(y0 + y, x0)), row,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(out.index(y, 0)));
  }
  return out;
}

std::vector<Patch> extract_patches(const Image& rgb, const Image& mask, std::int64_t size, std::int64_t stride,
                                   const std::string& source) {
  if (size <= 0) throw std::invalid_argument("patch size must be positive");
  if (stride <= 0) throw std::invalid_argument("patch stride must be positive");
  if (rgb.channels != 3 || mask.channels != 1) throw std::invalid_argument("expected an RGB image and a 1-channel mask");
  if (rgb.height != mask.height || rgb.width != mask.width) throw std::invalid_argument("image and mask differ in size");
  if (rgb.height == 0 || rgb.width == 0) throw std::invalid_argument("empty image");
  const std::int64_t ph = padded_extent(rgb.height, size, stride), pw = padded_extent(rgb.width, size, stride);
  const Image pi = reflect_pad(rgb, ph, pw), pm = reflect_pad(mask, ph, pw);
  std::vector<Patch> out;
  for (std::int64_t y = 0; y + size <= ph; y += stride) {
    for (std::int64_t x = 0; x + size <= pw; x += stride) {
      out.push_back({crop(pi, y, x, size, size), crop(pm, y, x, size, size), source, y, x});
    }
  }
  return out;
}

Sample to_sample(const Patch& p) { return {image_to_tensor(p.image), p.mask, p.name()}; }

// ---- augmentation ----

void AugmentPolicy::validate() const {
  std::vector<std::string> errs;
  auto prob = [&](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) errs.push_back(std::string(name) + " must be in [0, 1]");
  };
  prob(flip_h_prob, "flip_h_prob");
  prob(flip_v_prob, "flip_v_prob");
  if (!(rotation_deg >= 0.0 && rotation_deg <= 180.0)) errs.push_back("rotation_deg must be in [0, 180]");
  if (!(translate >= 0.0 && translate < 1.0)) errs.push_back("translate must be in [0, 1)");
  if (!(scale_min > 0.0 && scale_max >= scale_min)) errs.push_back("scale range must be positive with min <= max");
  for (auto [v, name] : {std::pair{brightness, "brightness"}, {contrast, "contrast"}, {saturation, "saturation"}}) {
    if (!(v >= 0.0 && v < 1.0)) errs.push_back(std::string(name) + " must be in [0, 1)");
  }
  if (errs.empty()) return;
  std::string msg = "invalid augmentation policy:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw std::invalid_argument(msg);
}

AugmentPolicy AugmentPolicy::none() {
  AugmentPolicy p;
  p.flip_h = p.flip_v = p.affine = p.photometric = false;
  return p;
}

namespace {

Tensorf clone(const Tensorf& t) {
  const auto d = t.data();
  return Tensorf(t.shape(), std::vector<float>(d.begin(), d.end()));
}

void check_sample(const Sample& s) {
  if (s.image.ndim() != 3 || s.image.dim(0) != 3) throw ShapeError("sample image must be (3, H, W)");
  if (s.mask.channels != 1 || s.mask.height != s.image.dim(1) || s.mask.width != s.image.dim(2)) {
    throw ShapeError("sample mask does not match image extent");
  }
}

// Maps every output pixel through `src(y, x) -> (sy, sx)` (index space).
template <typename Map>
Sample remap(const Sample& s, Map src, bool bilinear) {
  const std::int64_t h = s.image.dim(1), w = s.image.dim(2), hw = h * w;
  std::vector<float> img(static_cast<std::size_t>(3 * hw));
  Image mask(h, w, 1);
  const auto in = s.image.data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto [sy, sx] = src(static_cast<double>(y), static_cast<double>(x));
      const std::int64_t o = y * w + x;
      mask.pixels[static_cast<std::size_t>(o)] =
          s.mask.at(reflect_index(std::llround(sy), h), reflect_index(std::llround(sx), w));
      if (!bilinear) {
        const std::int64_t i = reflect_index(std::llround(sy), h) * w + reflect_index(std::llround(sx), w);
        for (int c = 0; c < 3; ++c) img[static_cast<std::size_t>(c * hw + o)] = in[static_cast<std::size_t>(c * hw + i)];
        continue;
      }
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double ty = sy - fy, tx = sx - fx;
      const auto y0 = reflect_index(static_cast<std::int64_t>(fy), h), y1 = reflect_index(static_cast<std::int64_t>(fy) + 1, h);
      const auto x0 = reflect_index(static_cast<std::int64_t>(fx), w), x1 = reflect_index(static_cast<std::int64_t>(fx) + 1, w);
      for (int c = 0; c < 3; ++c) {
        const auto at = [&](std::int64_t yy, std::int64_t xx) {
          return static_cast<double>(in[static_cast<std::size_t>(c * hw + yy * w + xx)]);
        };
        const double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
        img[static_cast<std::size_t>(c * hw + o)] = static_cast<float>(v);
      }
    }
  }
  return {Tensorf(s.image.shape(), std::move(img)), std::move(mask), s.id};
}

void photometric(Tensorf& image, double brightness, double contrast, double saturation) {
  auto d = image.data();
  const std::size_t hw = d.size() / 3;
  // Luma per pixel and its image mean.
  std::vector<double> gray(hw);
  double mean = 0;
  for (std::size_t i = 0; i < hw; ++i) {
    gray[i] = 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i];
    mean += gray[i];
  }
  mean /= static_cast<double>(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    for (int c = 0; c < 3; ++c) {
      double v = d[c * hw + i];
      v = gray[i] + (v - gray[i]) * saturation;
      v = mean + (v - mean) * contrast;
      v += brightness;
      d[c * hw + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

}  // namespace

Sample flip_horizontal(const Sample& s) {
  check_sample(s);
  const double w = static_cast<double>(s.image.dim(2));
  return remap(s, [&](double y, double x) { return std::pair{y, w - 1 - x}; }, false);
}

Sample flip_vertical(const Sample& s) {
  check_sample(s);
  const double h = static_cast<double>(s.image.dim(1));
  return remap(s, [&](double y, double x) { return std::pair{h - 1 - y, x}; }, false);
}

Sample augment(const Sample& s, Rng& rng, const AugmentPolicy& p) {
  check_sample(s);
  Sample out{clone(s.image), s.mask, s.id};
  if (p.flip_h && rng.bernoulli(p.flip_h_prob)) out = flip_horizontal(out);
  if (p.flip_v && rng.bernoulli(p.flip_v_prob)) out = flip_vertical(out);
  if (p.affine) {
    const double angle = rng.uniform(-p.rotation_deg, p.rotation_deg) * std::numbers::pi / 180.0;
    const double h = static_cast<double>(s.image.dim(1)), w = static_cast<double>(s.image.dim(2));
    const double ty = rng.uniform(-p.translate, p.translate) * h;
    const double tx = rng.uniform(-p.translate, p.translate) * w;
    const double scale = rng.uniform(p.scale_min, p.scale_max);
    const double cy = (h - 1) / 2, cx = (w - 1) / 2;
    const double cs = std::cos(angle), sn = std::sin(angle);
    // Inverse of: translate(t) * rotate * scale about the centre.
    out = remap(
        out,
        [&](double y, double x) {
          const double dy = (y - cy - ty) / scale, dx = (x - cx - tx) / scale;
          return std::pair{cy + sn * dx + cs * dy, cx + cs * dx - sn * dy};
        },
        true);
  }
  if (p.photometric) {
    const double b = rng.uniform(-p.brightness, p.brightness);
    const double c = 1.0 + rng.uniform(-p.contrast, p.contrast);
    const double sat = 1.0 + rng.uniform(-p.saturation, p.saturation);
    photometric(out.image, b, c, sat);
  }
  return out;
}

// ---- normalization ----

void NormStats::validate() const {
  for (int c = 0; c < 3; ++c) {
    if (!std::isfinite(mean[c])) throw std::invalid_argument("norm mean of channel " + std::to_string(c) + " is not finite");
    if (!(std[c] > 0.0) || !std::isfinite(std[c])) {
      throw std::invalid_argument("norm std of channel " + std::to_string(c) + " must be positive");
    }
  }
}

void NormStats::save(const fs::path& path) const {
  validate();
  std::ostringstream out;
  out << std::setprecision(17);
  out << mean[0] << ' ' << mean[1] << ' ' << mean[2] << '\n' << std[0] << ' ' << std[1] << ' ' << std[2] << '\n';
  const std::string s = out.str();
  write_bytes(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

NormStats NormStats::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  NormStats s;
  for (auto& v : s.mean) in >> v;
  for (auto& v : s.std) in >> v;
  if (!in) throw DataError(path.string() + ": expected 6 numbers (3 means, 3 stds)");
  std::string extra;
  if (in >> extra) throw DataError(path.string() + ": unexpected trailing text '" + extra + "'");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return s;
}

static Tensorf apply_norm(const Tensorf& chw, const NormStats& s, bool forward) {
  s.validate();
  if (chw.ndim() != 3 || chw.dim(0) != 3) throw ShapeError("expected a (3, H, W) tensor");
  const auto in = chw.data();
  const std::size_t hw = in.size() / 3;
  std::vector<float> out(in.size());
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = in[c * hw + i];
      out[c * hw + i] = static_cast<float>(forward ? (v - s.mean[c]) / s.std[c] : v * s.std[c] + s.mean[c]);
    }
  }
  return Tensorf(chw.shape(), std::move(out));
}

Tensorf normalize(const Tensorf& chw, const NormStats& stats) { return apply_norm(chw, stats, true); }
Tensorf denormalize(const Tensorf& chw, const NormStats& stats) { return apply_norm(chw, stats, false); }

NormStats compute_norm_stats(const std::vector<Tensorf>& images, std::string* warning) {
  if (images.empty()) throw DataError("cannot compute normalization statistics of an empty dataset");
  for (const auto& t : images) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw ShapeError("expected (3, H, W) images");
  }
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  double count = 0;
  for (const auto& t : images) {
    const auto d = t.data();
    const std::size_t hw = d.size() / 3;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < hw; ++i) sum[c] += d[c * hw + i];
    }
    count += static_cast<double>(hw);
  }
  NormStats s;
  for (int c = 0; c < 3; ++c) s.mean[c] = sum[c] / count;
  for (const auto& t : images) {
    const auto d = t.data();
    const std::size_t hw = d.size() / 3;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < hw; ++i) {
        const double e = d[c * hw + i] - s.mean[c];
        sq[c] += e * e;
      }
    }
  }
  std::string floored;
  for (int c = 0; c < 3; ++c) {
    s.std[c] = std::sqrt(sq[c] / count);
    if (s.std[c] < kStdFloor) {
      s.std[c] = kStdFloor;
      floored += (floored.empty() ? "" : ", ") + std::to_string(c);
    }
  }
  if (warning) {
    *warning = floored.empty() ? "" : "std of channel(s) " + floored + " below 1e-6; floored";
  }
  return s;
}

// ---- dataset directory ----

Dataset Dataset::open(const fs::path& root) {
  const fs::path manifest = root / "dataset.txt";
  std::ifstream in(manifest);
  if (!in) throw DataError("missing manifest " + manifest.string());
  Dataset ds;
  ds.root_ = root;
  std::vector<std::string> errs;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (line.empty()) continue;
    if (line.find('/') != std::string::npos) {
      errs.push_back("line " + std::to_string(n) + ": stem '" + line + "' contains a path separator");
      continue;
    }
    if (!fs::exists(root / "images" / (line + ".ppm"))) errs.push_back("missing images/" + line + ".ppm");
    if (!fs::exists(root / "masks" / (line + ".pgm"))) errs.push_back("missing masks/" + line + ".pgm");
    ds.stems_.push_back(line);
  }
  if (ds.stems_.empty() && errs.empty()) errs.push_back("manifest lists no samples");
  if (!errs.empty()) {
    std::string msg = "invalid dataset " + root.string() + ":";
    for (const auto& e : errs) msg += "\n  " + e;
    throw DataError(msg);
  }
  return ds;
}

Image Dataset::image(std::size_t i) const { return read_ppm(root_ / "images" / (stems_.at(i) + ".ppm")); }

Image Dataset::mask(std::size_t i, int num_classes) const {
  return read_mask(root_ / "masks" / (stems_.at(i) + ".pgm"), num_classes);
}

void write_dataset(const fs::path& root, const std::vector<NamedPair>& pairs) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::string manifest;
  for (const auto& p : pairs) {
    write_ppm(root / "images" / (p.stem + ".ppm"), p.image);
    write_pgm(root / "masks" / (p.stem + ".pgm"), p.mask);
    manifest += p.stem + "\n";
  }
  write_bytes(root / "dataset.txt", std::vector<std::uint8_t>(manifest.begin(), manifest.end()));
}

std::vector<Sample> load_samples(const Dataset& ds, int num_classes) {
  std::vector<Sample> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Image img = ds.image(i), m = ds.mask(i, num_classes);
    if (img.height != m.height || img.width != m.width) {
      throw DataError("image and mask of '" + ds.stems()[i] + "' differ in size");
    }
    out.push_back({image_to_tensor(img), std::move(m), ds.stems()[i]});
  }
  return out;
}

// ---- synthetic data ----

NamedPair synthetic_pair(std::int64_t height, std::int64_t width, int num_classes, Rng& rng, const std::string& stem) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("synthetic image must be non-empty");
  if (num_classes < 2 || num_classes > 8) throw std::invalid_argument("synthetic data needs 2..8 classes");
  NamedPair p{stem, Image(height, width, 3), Image(height, width, 1)};
  // Per-class stain tints; class 1 is the classic dark purple.
  static constexpr std::array<std::array<double, 3>, 8> tint{{{236, 205, 220},
                                                              {95, 55, 135},
                                                              {60, 40, 100},
                                                              {140, 70, 150},
                                                              {110, 90, 170},
                                                              {70, 70, 140},
                                                              {150, 60, 110},
                                                              {120, 50, 90}}};
  const double side = static_cast<double>(std::min(height, width));
  const int blobs = std::max<int>(2, static_cast<int>(height * width / 500));
  struct Blob {
    double cy, cx, ry, rx, angle;
    int cls;
  };
  std::vector<Blob> list;
  for (int b = 0; b < blobs; ++b) {
    Blob bl;
    bl.cy = rng.uniform(0, static_cast<double>(height));
    bl.cx = rng.uniform(0, static_cast<double>(width));
    bl.ry = rng.uniform(0.04, 0.09) * side + 2;
    bl.rx = bl.ry * rng.uniform(0.6, 1.0);
    bl.angle = rng.uniform(0, std::numbers::pi);
    bl.cls = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
    list.push_back(bl);
  }
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      int cls = 0;
      for (const auto& b : list) {
        const double dy = static_cast<double>(y) - b.cy, dx = static_cast<double>(x) - b.cx;
        const double u = (dx * std::cos(b.angle) + dy * std::sin(b.angle)) / b.rx;
        const double v = (-dx * std::sin(b.angle) + dy * std::cos(b.angle)) / b.ry;
        if (u * u + v * v <= 1.0) cls = b.cls;
      }
      p.mask.at(y, x) = static_cast<std::uint8_t>(cls);
      const double noise = rng.uniform(-12, 12);
      for (int c = 0; c < 3; ++c) {
        p.image.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(tint[cls][c] + noise), 0L, 255L));
      }
    }
  }
  return p;
}

}  // namespace nhvt
