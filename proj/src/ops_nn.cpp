#include <algorithm>
#include <cmath>
#include <limits>

#include "kernels.hpp"
#include "nhvt/ops.hpp"
#include "ops_common.hpp"

namespace nhvt {

namespace {

std::string dims(const Shape& s) { return to_string(s); }

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " + dims(s));
  }
}

// Patch gathering for one image/group: rows are (channel, ky, kx), columns
// are output positions (oy, ox).
struct ConvGeometry {
  std::int64_t channels, height, width;  // image side
  std::int64_t kh, kw;
  int stride, padding, dilation;
  std::int64_t out_h, out_w;  // patch grid
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::int64_t cols = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const T* plane = img + c * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky * g.dilation;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + iy * g.width;
          const std::int64_t x0 = kx * g.dilation - g.padding;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride + x0;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::int64_t cols = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    T* plane = img + c * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky * g.dilation;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = plane + iy * g.width;
          const T* src = row + oy * g.out_w;
          const std::int64_t x0 = kx * g.dilation - g.padding;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride + x0;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
}

template <typename T>
void add_bias(T* out, const T* bias, std::int64_t batch, std::int64_t channels, std::int64_t plane) {
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      T* p = out + (n * channels + c) * plane;
      const T b = bias[c];
      for (std::int64_t i = 0; i < plane; ++i) p[i] += b;
    }
  }
}

template <typename T>
void bias_grad(const T* g, T* gb, std::int64_t batch, std::int64_t channels, std::int64_t plane) {
  for (std::int64_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* p = g + (n * channels + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
    }
    gb[c] += static_cast<T>(acc);
  }
}

}  // namespace

std::int64_t conv_output_extent(std::int64_t in, int kernel, int stride, int padding, int dilation) {
  const std::int64_t span = static_cast<std::int64_t>(dilation) * (kernel - 1) + 1;
  const std::int64_t padded = in + 2 * static_cast<std::int64_t>(padding);
  if (padded < span) return 0;
  return (padded - span) / stride + 1;
}

// ---- matmul / linear ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + dims(a.shape()) + " and " + dims(b.shape()));
  }
  const std::int64_t m = a.dim(-2), k = a.dim(-1);
  const std::int64_t kb = b.dim(-2), n = b.dim(-1);
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(k) + " vs " + std::to_string(kb) +
                     ") for " + dims(a.shape()) + " x " + dims(b.shape()));
  }
  const Shape batch_shape(a.shape().begin(), a.shape().end() - 2);
  const bool shared_b = b.ndim() == 2;
  if (!shared_b && Shape(b.shape().begin(), b.shape().end() - 2) != batch_shape) {
    throw ShapeError("matmul: batch dimensions differ for " + dims(a.shape()) + " x " + dims(b.shape()));
  }
  const std::int64_t batch = numel(batch_shape);
  Shape out_shape = batch_shape;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::int64_t i = 0; i < batch; ++i) {
    kernels::gemm<T>(false, false, m, n, k, pa + i * m * k, pb + (shared_b ? 0 : i * k * n), po + i * m * n, false);
  }
  if (detail::recording<T>({&a, &b})) {
    detail::record<T>(out, [a, b, batch, m, n, k, shared_b](std::span<const T> g) mutable {
      const T* pg = g.data();
      if (a.requires_grad()) {
        T* ga = a.mutable_grad().data();
        const T* pb = b.data().data();
        for (std::int64_t i = 0; i < batch; ++i) {
          kernels::gemm<T>(false, true, m, k, n, pg + i * m * n, pb + (shared_b ? 0 : i * k * n), ga + i * m * k, true);
        }
      }
      if (b.requires_grad()) {
        T* gb = b.mutable_grad().data();
        const T* pa = a.data().data();
        for (std::int64_t i = 0; i < batch; ++i) {
          kernels::gemm<T>(true, false, k, n, m, pa + i * m * k, pg + i * m * n, gb + (shared_b ? 0 : i * k * n), true);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight.shape(), 2, "linear", "weight");
  const std::int64_t out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.ndim() < 1 || x.dim(-1) != in_f) {
    throw ShapeError("linear: input last dimension " + (x.ndim() ? std::to_string(x.dim(-1)) : std::string("?")) +
                     " != weight in_features " + std::to_string(in_f));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_f)) {
    throw ShapeError("linear: bias shape " + dims(bias.shape()) + " does not match out_features " + std::to_string(out_f));
  }
  const std::int64_t rows = x.numel() / std::max<std::int64_t>(1, in_f);
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor<T> out(out_shape);
  kernels::gemm<T>(false, true, rows, out_f, in_f, x.data().data(), weight.data().data(), out.data().data(), false);
  if (bias.defined()) add_bias(out.data().data(), bias.data().data(), rows, out_f, 1);
  if (detail::recording<T>({&x, &weight, &bias})) {
    detail::record<T>(out, [x, weight, bias, rows, out_f, in_f](std::span<const T> g) mutable {
      if (x.requires_grad()) {
        kernels::gemm<T>(false, false, rows, in_f, out_f, g.data(), weight.data().data(), x.mutable_grad().data(), true);
      }
      if (weight.requires_grad()) {
        kernels::gemm<T>(true, false, out_f, in_f, rows, g.data(), x.data().data(), weight.mutable_grad().data(), true);
      }
      if (bias.defined() && bias.requires_grad()) bias_grad(g.data(), bias.mutable_grad().data(), rows, out_f, 1);
    });
  }
  return out;
}

// ---- convolution ----

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const Conv2dOptions& opt) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  if (opt.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (opt.dilation < 1) throw ShapeError("conv2d: dilation must be >= 1");
  if (opt.padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  if (opt.groups < 1) throw ShapeError("conv2d: groups must be >= 1");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t o = weight.dim(0), cg = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const std::int64_t groups = opt.groups;
  if (c % groups != 0 || o % groups != 0) {
    throw ShapeError("conv2d: channels (in " + std::to_string(c) + ", out " + std::to_string(o) +
                     ") not divisible by groups " + std::to_string(groups));
  }
  if (cg * groups != c) {
    throw ShapeError("conv2d: input channel dimension " + std::to_string(c) + " does not match weight in-channels " +
                     std::to_string(cg) + " x groups " + std::to_string(groups));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != o)) {
    throw ShapeError("conv2d: bias shape " + dims(bias.shape()) + " does not match output channels " + std::to_string(o));
  }
  const std::int64_t oh = conv_output_extent(h, static_cast<int>(kh), opt.stride, opt.padding, opt.dilation);
  const std::int64_t ow = conv_output_extent(w, static_cast<int>(kw), opt.stride, opt.padding, opt.dilation);
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " (dilation " +
                     std::to_string(opt.dilation) + ") larger than padded input height/width " +
                     std::to_string(h + 2 * opt.padding) + "x" + std::to_string(w + 2 * opt.padding));
  }
  const ConvGeometry geo{cg, h, w, kh, kw, opt.stride, opt.padding, opt.dilation, oh, ow};
  const std::int64_t og = o / groups;
  const std::int64_t patch = cg * kh * kw;
  const std::int64_t plane_out = oh * ow;
  const bool pointwise = is_pointwise(geo);

  Tensor<T> out({n, o, oh, ow});
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(patch * plane_out));
  const T* pin = input.data().data();
  const T* pw = weight.data().data();
  T* po = out.data().data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const T* img = pin + (b * c + gi * cg) * h * w;
      const T* src = img;
      if (!pointwise) {
        im2col(img, geo, col.data());
        src = col.data();
      }
      kernels::gemm<T>(false, false, og, plane_out, patch, pw + gi * og * patch, src,
                       po + (b * o + gi * og) * plane_out, false);
    }
  }
  if (bias.defined()) add_bias(po, bias.data().data(), n, o, plane_out);

  if (detail::recording<T>({&input, &weight, &bias})) {
    detail::record<T>(out, [input, weight, bias, geo, n, c, o, groups, og, patch, plane_out, pointwise](
                               std::span<const T> g) mutable {
      const T* pg = g.data();
      const T* pin = input.data().data();
      const T* pw = weight.data().data();
      const bool need_x = input.requires_grad();
      const bool need_w = weight.requires_grad();
      T* gx = need_x ? input.mutable_grad().data() : nullptr;
      T* gw = need_w ? weight.mutable_grad().data() : nullptr;
      const std::int64_t plane_in = geo.height * geo.width;
      std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(patch * plane_out));
      std::vector<T> dcol(pointwise ? 0 : static_cast<std::size_t>(patch * plane_out));
      for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t gi = 0; gi < groups; ++gi) {
          const T* gout = pg + (b * o + gi * og) * plane_out;
          const T* img = pin + (b * c + gi * geo.channels) * plane_in;
          if (need_w) {
            const T* src = img;
            if (!pointwise) {
              im2col(img, geo, col.data());
              src = col.data();
            }
            kernels::gemm<T>(false, true, og, patch, plane_out, gout, src, gw + gi * og * patch, true);
          }
          if (need_x) {
            T* gimg = gx + (b * c + gi * geo.channels) * plane_in;
            if (pointwise) {
              kernels::gemm<T>(true, false, patch, plane_out, og, pw + gi * og * patch, gout, gimg, true);
            } else {
              kernels::gemm<T>(true, false, patch, plane_out, og, pw + gi * og * patch, gout, dcol.data(), false);
              col2im(dcol.data(), geo, gimg);
            }
          }
        }
      }
      if (bias.defined() && bias.requires_grad()) bias_grad(pg, bias.mutable_grad().data(), n, o, plane_out);
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                           int padding) {
  require_rank(input.shape(), 4, "conv_transpose2d", "input");
  require_rank(weight.shape(), 4, "conv_transpose2d", "weight");
  if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv_transpose2d: padding must be >= 0");
  const std::int64_t n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (weight.dim(0) != ci) {
    throw ShapeError("conv_transpose2d: input channel dimension " + std::to_string(ci) +
                     " does not match weight in-channels " + std::to_string(weight.dim(0)));
  }
  const std::int64_t co = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != co)) {
    throw ShapeError("conv_transpose2d: bias shape " + dims(bias.shape()) + " does not match output channels " +
                     std::to_string(co));
  }
  const std::int64_t oh = (h - 1) * stride - 2 * padding + kh;
  const std::int64_t ow = (w - 1) * stride - 2 * padding + kw;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: non-positive output extent");
  // The adjoint of a convolution mapping (oh, ow) onto the (h, w) grid.
  const ConvGeometry geo{co, oh, ow, kh, kw, stride, padding, 1, h, w};
  const std::int64_t patch = co * kh * kw;
  const std::int64_t plane_in = h * w;
  const std::int64_t plane_out = oh * ow;

  Tensor<T> out({n, co, oh, ow});
  std::vector<T> col(static_cast<std::size_t>(patch * plane_in));
  const T* pin = input.data().data();
  const T* pw = weight.data().data();
  T* po = out.data().data();
  for (std::int64_t b = 0; b < n; ++b) {
    kernels::gemm<T>(true, false, patch, plane_in, ci, pw, pin + b * ci * plane_in, col.data(), false);
    col2im(col.data(), geo, po + b * co * plane_out);
  }
  if (bias.defined()) add_bias(po, bias.data().data(), n, co, plane_out);

  if (detail::recording<T>({&input, &weight, &bias})) {
    detail::record<T>(out, [input, weight, bias, geo, n, ci, co, patch, plane_in, plane_out](std::span<const T> g) mutable {
      std::vector<T> gcol(static_cast<std::size_t>(patch * plane_in));
      const bool need_x = input.requires_grad();
      const bool need_w = weight.requires_grad();
      T* gx = need_x ? input.mutable_grad().data() : nullptr;
      T* gw = need_w ? weight.mutable_grad().data() : nullptr;
      const T* pin = input.data().data();
      const T* pw = weight.data().data();
      for (std::int64_t b = 0; b < n; ++b) {
        im2col(g.data() + b * co * plane_out, geo, gcol.data());
        if (need_x) kernels::gemm<T>(false, false, ci, plane_in, patch, pw, gcol.data(), gx + b * ci * plane_in, true);
        if (need_w) kernels::gemm<T>(false, true, ci, patch, plane_in, pin + b * ci * plane_in, gcol.data(), gw, true);
      }
      if (bias.defined() && bias.requires_grad()) bias_grad(g.data(), bias.mutable_grad().data(), n, co, plane_out);
    });
  }
  return out;
}

// ---- pooling / resampling ----

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kernel, int stride, int padding) {
  require_rank(input.shape(), 4, "maxpool2d", "input");
  if (kernel < 1) throw ShapeError("maxpool2d: kernel must be >= 1");
  if (stride < 1) throw ShapeError("maxpool2d: stride must be >= 1");
  if (padding < 0 || 2 * padding > kernel) throw ShapeError("maxpool2d: padding must be in [0, kernel/2]");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (kernel > h + 2 * padding || kernel > w + 2 * padding) {
    throw ShapeError("maxpool2d: window " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(h + 2 * padding) + "x" + std::to_string(w + 2 * padding));
  }
  const std::int64_t oh = (h + 2 * padding - kernel) / stride + 1;
  const std::int64_t ow = (w + 2 * padding - kernel) / stride + 1;
  Tensor<T> out({n, c, oh, ow});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(n * c * oh * ow));
  const T* pin = input.data().data();
  T* po = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* plane = pin + p * h * w;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_at = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const std::int64_t iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const std::int64_t ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= w) continue;
            const T v = plane[iy * w + ix];
            if (best_at < 0 || v > best) {
              best = v;
              best_at = iy * w + ix;
            }
          }
        }
        const std::int64_t oi = (p * oh + oy) * ow + ox;
        po[oi] = best;
        argmax[static_cast<std::size_t>(oi)] = p * h * w + best_at;
      }
    }
  }
  if (BranchTrace::active()) {
    for (auto a : argmax) BranchTrace::note(static_cast<std::uint64_t>(a));
  }
  if (detail::recording<T>({&input})) {
    detail::record<T>(out, [input, argmax = std::move(argmax)](std::span<const T> g) mutable {
      auto gx = input.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>(argmax[i])] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& input, int kernel, int stride) {
  require_rank(input.shape(), 4, "avgpool2d", "input");
  if (kernel < 1 || stride < 1) throw ShapeError("avgpool2d: kernel and stride must be >= 1");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (kernel > h || kernel > w) throw ShapeError("avgpool2d: window larger than input");
  const std::int64_t oh = (h - kernel) / stride + 1;
  const std::int64_t ow = (w - kernel) / stride + 1;
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  Tensor<T> out({n, c, oh, ow});
  const T* pin = input.data().data();
  T* po = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        detail::Accum<T> acc = 0;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) acc += pin[(p * h + oy * stride + ky) * w + ox * stride + kx];
        }
        po[(p * oh + oy) * ow + ox] = static_cast<T>(acc) * inv;
      }
    }
  }
  if (detail::recording<T>({&input})) {
    detail::record<T>(out, [input, n, c, h, w, oh, ow, kernel, stride, inv](std::span<const T> g) mutable {
      T* gx = input.mutable_grad().data();
      for (std::int64_t p = 0; p < n * c; ++p) {
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const T gv = g[static_cast<std::size_t>((p * oh + oy) * ow + ox)] * inv;
            for (int ky = 0; ky < kernel; ++ky) {
              for (int kx = 0; kx < kernel; ++kx) gx[(p * h + oy * stride + ky) * w + ox * stride + kx] += gv;
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor) {
  require_rank(input.shape(), 4, "upsample_nearest", "input");
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  Tensor<T> out({n, c, oh, ow});
  const T* pin = input.data().data();
  T* po = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) po[(p * oh + y) * ow + x] = pin[(p * h + y / factor) * w + x / factor];
    }
  }
  if (detail::recording<T>({&input})) {
    detail::record<T>(out, [input, n, c, h, w, oh, ow, factor](std::span<const T> g) mutable {
      T* gx = input.mutable_grad().data();
      for (std::int64_t p = 0; p < n * c; ++p) {
        for (std::int64_t y = 0; y < oh; ++y) {
          for (std::int64_t x = 0; x < ow; ++x) {
            gx[(p * h + y / factor) * w + x / factor] += g[static_cast<std::size_t>((p * oh + y) * ow + x)];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> adaptive_avgpool2d(const Tensor<T>& input, std::int64_t oh, std::int64_t ow) {
  require_rank(input.shape(), 4, "adaptive_avgpool2d", "input");
  if (oh < 1 || ow < 1) throw ShapeError("adaptive_avgpool2d: output extents must be >= 1");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < 1 || w < 1) throw ShapeError("adaptive_avgpool2d: empty input");
  auto lo = [](std::int64_t i, std::int64_t in, std::int64_t out) { return i * in / out; };
  auto hi = [](std::int64_t i, std::int64_t in, std::int64_t out) { return ((i + 1) * in + out - 1) / out; };
  Tensor<T> out({n, c, oh, ow});
  const T* pin = input.data().data();
  T* po = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const std::int64_t y0 = lo(oy, h, oh), y1 = hi(oy, h, oh), x0 = lo(ox, w, ow), x1 = hi(ox, w, ow);
        detail::Accum<T> acc = 0;
        for (std::int64_t y = y0; y < y1; ++y)
          for (std::int64_t x = x0; x < x1; ++x) acc += pin[(p * h + y) * w + x];
        po[(p * oh + oy) * ow + ox] = static_cast<T>(acc / static_cast<double>((y1 - y0) * (x1 - x0)));
      }
    }
  }
  if (detail::recording<T>({&input})) {
    detail::record<T>(out, [input, n, c, h, w, oh, ow, lo, hi](std::span<const T> g) mutable {
      T* gx = input.mutable_grad().data();
      for (std::int64_t p = 0; p < n * c; ++p) {
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t y0 = lo(oy, h, oh), y1 = hi(oy, h, oh), x0 = lo(ox, w, ow), x1 = hi(ox, w, ow);
            const T gv = static_cast<T>(g[static_cast<std::size_t>((p * oh + oy) * ow + ox)] /
                                        static_cast<double>((y1 - y0) * (x1 - x0)));
            for (std::int64_t y = y0; y < y1; ++y)
              for (std::int64_t x = x0; x < x1; ++x) gx[(p * h + y) * w + x] += gv;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& input, std::int64_t oh, std::int64_t ow) {
  require_rank(input.shape(), 4, "resize_nearest", "input");
  if (oh < 1 || ow < 1) throw ShapeError("resize_nearest: output extents must be >= 1");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  std::vector<std::int64_t> src(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) src[static_cast<std::size_t>(y * ow + x)] = (y * h / oh) * w + x * w / ow;
  Tensor<T> out({n, c, oh, ow});
  const T* pin = input.data().data();
  T* po = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p)
    for (std::int64_t i = 0; i < oh * ow; ++i) po[p * oh * ow + i] = pin[p * h * w + src[static_cast<std::size_t>(i)]];
  if (detail::recording<T>({&input})) {
    detail::record<T>(out, [input, n, c, h, w, oh, ow, src = std::move(src)](std::span<const T> g) mutable {
      T* gx = input.mutable_grad().data();
      for (std::int64_t p = 0; p < n * c; ++p)
        for (std::int64_t i = 0; i < oh * ow; ++i)
          gx[p * h * w + src[static_cast<std::size_t>(i)]] += g[static_cast<std::size_t>(p * oh * ow + i)];
    });
  }
  return out;
}

// ---- normalisation ----

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      const BatchNormOptions& opt) {
  require_rank(input.shape(), 4, "batchnorm2d", "input");
  const std::int64_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("batchnorm2d: gamma/beta length (" + std::to_string(gamma.numel()) + "/" +
                     std::to_string(beta.numel()) + ") != channel count " + std::to_string(c));
  }
  if (state.running_mean.numel() != c || state.running_var.numel() != c) {
    throw ShapeError("batchnorm2d: running state length != channel count " + std::to_string(c));
  }
  const std::int64_t count = n * plane;
  if (count == 0) throw ShapeError("batchnorm2d: zero-size batch");

  std::vector<T> mean_c(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
  const T* x = input.data().data();
  if (opt.training) {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      using A = detail::Accum<T>;
      A s = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      const A mu_a = s / static_cast<A>(count);
      const double mu = static_cast<double>(mu_a);
      A ss = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const A d = p[i] - mu_a;
          ss += d * d;
        }
      }
      const double var = static_cast<double>(ss / static_cast<A>(count));
      mean_c[static_cast<std::size_t>(ch)] = static_cast<T>(mu);
      invstd[static_cast<std::size_t>(ch)] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = count > 1 ? static_cast<double>(ss / static_cast<A>(count - 1)) : var;
      rm[static_cast<std::size_t>(ch)] =
          static_cast<T>((1.0 - opt.momentum) * rm[static_cast<std::size_t>(ch)] + opt.momentum * mu);
      rv[static_cast<std::size_t>(ch)] =
          static_cast<T>((1.0 - opt.momentum) * rv[static_cast<std::size_t>(ch)] + opt.momentum * unbiased);
    }
  } else {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean_c[static_cast<std::size_t>(ch)] = rm[static_cast<std::size_t>(ch)];
      invstd[static_cast<std::size_t>(ch)] =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[static_cast<std::size_t>(ch)]) + opt.eps));
    }
  }

  Tensor<T> out(input.shape());
  Tensor<T> xhat(input.shape());
  {
    T* po = out.data().data();
    T* ph = xhat.data().data();
    auto gm = gamma.data();
    auto bt = beta.data();
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t base = (b * c + ch) * plane;
        const T mu = mean_c[static_cast<std::size_t>(ch)], is = invstd[static_cast<std::size_t>(ch)];
        const T gv = gm[static_cast<std::size_t>(ch)], bv = bt[static_cast<std::size_t>(ch)];
        for (std::int64_t i = 0; i < plane; ++i) {
          const T hval = (x[base + i] - mu) * is;
          ph[base + i] = hval;
          po[base + i] = gv * hval + bv;
        }
      }
    }
  }
  if (detail::recording<T>({&input, &gamma, &beta})) {
    const bool training = opt.training;
    detail::record<T>(out, [input, gamma, beta, xhat, invstd, n, c, plane, count, training](std::span<const T> g) mutable {
      const T* ph = xhat.data().data();
      auto gm = gamma.data();
      std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0), sum_gh(static_cast<std::size_t>(c), 0.0);
      for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const std::int64_t base = (b * c + ch) * plane;
          double sg = 0.0, sgh = 0.0;
          for (std::int64_t i = 0; i < plane; ++i) {
            sg += g[static_cast<std::size_t>(base + i)];
            sgh += static_cast<double>(g[static_cast<std::size_t>(base + i)]) * ph[base + i];
          }
          sum_g[static_cast<std::size_t>(ch)] += sg;
          sum_gh[static_cast<std::size_t>(ch)] += sgh;
        }
      }
      if (gamma.requires_grad()) {
        auto gg = gamma.mutable_grad();
        for (std::int64_t ch = 0; ch < c; ++ch) gg[static_cast<std::size_t>(ch)] += static_cast<T>(sum_gh[static_cast<std::size_t>(ch)]);
      }
      if (beta.requires_grad()) {
        auto gb = beta.mutable_grad();
        for (std::int64_t ch = 0; ch < c; ++ch) gb[static_cast<std::size_t>(ch)] += static_cast<T>(sum_g[static_cast<std::size_t>(ch)]);
      }
      if (input.requires_grad()) {
        T* gx = input.mutable_grad().data();
        const double inv_count = 1.0 / static_cast<double>(count);
        for (std::int64_t b = 0; b < n; ++b) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t base = (b * c + ch) * plane;
            const double k = static_cast<double>(gm[static_cast<std::size_t>(ch)]) * invstd[static_cast<std::size_t>(ch)];
            if (training) {
              const double mg = sum_g[static_cast<std::size_t>(ch)] * inv_count;
              const double mgh = sum_gh[static_cast<std::size_t>(ch)] * inv_count;
              for (std::int64_t i = 0; i < plane; ++i) {
                gx[base + i] += static_cast<T>(k * (g[static_cast<std::size_t>(base + i)] - mg - ph[base + i] * mgh));
              }
            } else {
              for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += static_cast<T>(k * g[static_cast<std::size_t>(base + i)]);
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (input.ndim() < 1) throw ShapeError("layer_norm: scalar input");
  const std::int64_t d = input.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: gamma/beta length != normalised dimension " + std::to_string(d));
  }
  const std::int64_t rows = d == 0 ? 0 : input.numel() / d;
  Tensor<T> out(input.shape());
  Tensor<T> xhat(input.shape());
  std::vector<T> invstd(static_cast<std::size_t>(rows));
  const T* x = input.data().data();
  T* po = out.data().data();
  T* ph = xhat.data().data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = x + r * d;
    using A = detail::Accum<T>;
    A s = 0;
    for (std::int64_t i = 0; i < d; ++i) s += row[i];
    const A mu_a = s / static_cast<A>(d);
    const double mu = static_cast<double>(mu_a);
    A ss = 0;
    for (std::int64_t i = 0; i < d; ++i) ss += (row[i] - mu_a) * (row[i] - mu_a);
    const T is = static_cast<T>(1.0 / std::sqrt(static_cast<double>(ss / static_cast<A>(d)) + eps));
    invstd[static_cast<std::size_t>(r)] = is;
    for (std::int64_t i = 0; i < d; ++i) {
      const T hval = (row[i] - static_cast<T>(mu)) * is;
      ph[r * d + i] = hval;
      po[r * d + i] = gm[static_cast<std::size_t>(i)] * hval + bt[static_cast<std::size_t>(i)];
    }
  }
  if (detail::recording<T>({&input, &gamma, &beta})) {
    detail::record<T>(out, [input, gamma, beta, xhat, invstd, rows, d](std::span<const T> g) mutable {
      const T* ph = xhat.data().data();
      auto gm = gamma.data();
      const bool need_x = input.requires_grad();
      T* gx = need_x ? input.mutable_grad().data() : nullptr;
      std::vector<double> ggamma(static_cast<std::size_t>(d), 0.0), gbeta(static_cast<std::size_t>(d), 0.0);
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* gr = g.data() + r * d;
        const T* hr = ph + r * d;
        double s1 = 0.0, s2 = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
          const double gy = static_cast<double>(gr[i]) * gm[static_cast<std::size_t>(i)];
          s1 += gy;
          s2 += gy * hr[i];
          ggamma[static_cast<std::size_t>(i)] += static_cast<double>(gr[i]) * hr[i];
          gbeta[static_cast<std::size_t>(i)] += gr[i];
        }
        if (need_x) {
          const double is = invstd[static_cast<std::size_t>(r)];
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::int64_t i = 0; i < d; ++i) {
            const double gy = static_cast<double>(gr[i]) * gm[static_cast<std::size_t>(i)];
            gx[r * d + i] += static_cast<T>(is * (gy - s1 * inv_d - hr[i] * s2 * inv_d));
          }
        }
      }
      if (gamma.requires_grad()) {
        auto gg = gamma.mutable_grad();
        for (std::int64_t i = 0; i < d; ++i) gg[static_cast<std::size_t>(i)] += static_cast<T>(ggamma[static_cast<std::size_t>(i)]);
      }
      if (beta.requires_grad()) {
        auto gb = beta.mutable_grad();
        for (std::int64_t i = 0; i < d; ++i) gb[static_cast<std::size_t>(i)] += static_cast<T>(gbeta[static_cast<std::size_t>(i)]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int nd = x.ndim();
  const int ax = detail::normalize_axis(axis, nd, "softmax");
  const std::int64_t len = x.shape()[static_cast<std::size_t>(ax)];
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= x.shape()[static_cast<std::size_t>(d)];
  for (int d = ax + 1; d < nd; ++d) inner *= x.shape()[static_cast<std::size_t>(d)];
  Tensor<T> out(x.shape());
  const T* in = x.data().data();
  T* po = out.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * len * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t k = 0; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
      detail::Accum<T> total = 0;
      for (std::int64_t k = 0; k < len; ++k) {
        const T e = std::exp(in[base + k * inner] - mx);
        po[base + k * inner] = e;
        total += e;
      }
      const T inv = static_cast<T>(1.0 / total);
      for (std::int64_t k = 0; k < len; ++k) po[base + k * inner] *= inv;
    }
  }
  if (detail::recording<T>({&x})) {
    detail::record<T>(out, [x, out, outer, inner, len](std::span<const T> g) mutable {
      T* gx = x.mutable_grad().data();
      const T* y = out.data().data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::int64_t k = 0; k < len; ++k) dot += static_cast<double>(g[static_cast<std::size_t>(base + k * inner)]) * y[base + k * inner];
          for (std::int64_t k = 0; k < len; ++k) {
            const std::int64_t idx = base + k * inner;
            gx[idx] += static_cast<T>(y[idx] * (g[static_cast<std::size_t>(idx)] - dot));
          }
        }
      }
    });
  }
  return out;
}

#define NHVT_NN_OPS(T)                                                                                         \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2dOptions&);    \
  template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);      \
  template Tensor<T> maxpool2d<T>(const Tensor<T>&, int, int, int);                                            \
  template Tensor<T> avgpool2d<T>(const Tensor<T>&, int, int);                                                 \
  template Tensor<T> upsample_nearest<T>(const Tensor<T>&, int);                                               \
  template Tensor<T> adaptive_avgpool2d<T>(const Tensor<T>&, std::int64_t, std::int64_t);                      \
  template Tensor<T> resize_nearest<T>(const Tensor<T>&, std::int64_t, std::int64_t);                          \
  template Tensor<T> batchnorm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&,  \
                                    const BatchNormOptions&);                                                  \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);              \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);
NHVT_INSTANTIATE(NHVT_NN_OPS)

}  // namespace nhvt
