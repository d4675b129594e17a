#include <algorithm>
#include <numeric>

#include "nhvt/ops.hpp"
#include "ops_common.hpp"

namespace nhvt {

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t infer_at = -1;
  std::int64_t known = 1;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (shape[d] == -1) {
      if (infer_at >= 0) throw ShapeError("reshape: more than one inferred dimension");
      infer_at = static_cast<std::int64_t>(d);
    } else {
      known *= shape[d];
    }
  }
  if (infer_at >= 0) {
    if (known == 0 || x.numel() % known != 0) {
      throw ShapeError("reshape: cannot infer dimension for " + to_string(x.shape()) + " -> " + to_string(shape));
    }
    shape[static_cast<std::size_t>(infer_at)] = x.numel() / known;
  }
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " has " + std::to_string(x.numel()) +
                     " elements, target " + to_string(shape) + " has " + std::to_string(numel(shape)));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (detail::recording<T>({&x})) {
    detail::record<T>(out, [x](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes) {
  const int nd = x.ndim();
  if (static_cast<int>(axes.size()) != nd) {
    throw ShapeError("permute: expected " + std::to_string(nd) + " axes, got " + std::to_string(axes.size()));
  }
  std::vector<int> seen(static_cast<std::size_t>(nd), 0);
  for (int a : axes) {
    const int n = detail::normalize_axis(a, nd, "permute");
    if (seen[static_cast<std::size_t>(n)]++) throw ShapeError("permute: repeated axis " + std::to_string(a));
  }
  const auto in_strides = detail::contiguous_strides(x.shape());
  Shape out_shape(static_cast<std::size_t>(nd));
  std::vector<std::int64_t> gather(static_cast<std::size_t>(nd));
  for (int d = 0; d < nd; ++d) {
    const int src = detail::normalize_axis(axes[static_cast<std::size_t>(d)], nd, "permute");
    out_shape[static_cast<std::size_t>(d)] = x.shape()[static_cast<std::size_t>(src)];
    gather[static_cast<std::size_t>(d)] = in_strides[static_cast<std::size_t>(src)];
  }
  Tensor<T> out(out_shape);
  auto o = out.data();
  auto in = x.data();
  detail::strided_loop<1>(out_shape, {&gather}, [&](std::int64_t i, const std::array<std::int64_t, 1>& off) {
    o[static_cast<std::size_t>(i)] = in[static_cast<std::size_t>(off[0])];
  });
  if (detail::recording<T>({&x})) {
    detail::record<T>(out, [x, out_shape, gather](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      detail::strided_loop<1>(out_shape, {&gather}, [&](std::int64_t i, const std::array<std::int64_t, 1>& off) {
        gx[static_cast<std::size_t>(off[0])] += g[static_cast<std::size_t>(i)];
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
  const int nd = x.ndim();
  std::vector<int> axes(static_cast<std::size_t>(nd));
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[static_cast<std::size_t>(detail::normalize_axis(axis0, nd, "transpose"))],
            axes[static_cast<std::size_t>(detail::normalize_axis(axis1, nd, "transpose"))]);
  return permute(x, axes);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int nd = parts.front().ndim();
  const int ax = detail::normalize_axis(axis, nd, "concat");
  Shape out_shape = parts.front().shape();
  out_shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch " + to_string(p.shape()));
    for (int d = 0; d < nd; ++d) {
      if (d != ax && p.shape()[static_cast<std::size_t>(d)] != parts.front().shape()[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: dimension " + std::to_string(d) + " mismatch between " +
                         to_string(parts.front().shape()) + " and " + to_string(p.shape()));
      }
    }
    out_shape[static_cast<std::size_t>(ax)] += p.shape()[static_cast<std::size_t>(ax)];
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = ax + 1; d < nd; ++d) inner *= out_shape[static_cast<std::size_t>(d)];
  const std::int64_t out_block = out_shape[static_cast<std::size_t>(ax)] * inner;

  Tensor<T> out(out_shape);
  auto o = out.data();
  std::int64_t offset = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::int64_t block = p.shape()[static_cast<std::size_t>(ax)] * inner;
    auto in = p.data();
    for (std::int64_t r = 0; r < outer; ++r) {
      std::copy_n(in.begin() + r * block, block, o.begin() + r * out_block + offset);
    }
    offset += block;
  }
  bool any = false;
  for (const auto& p : parts) any = any || detail::recording<T>({&p});
  if (any) {
    detail::record<T>(out, [parts, offsets, outer, inner, out_block, ax](std::span<const T> g) mutable {
      for (std::size_t k = 0; k < parts.size(); ++k) {
        auto& p = parts[k];
        if (!p.requires_grad()) continue;
        const std::int64_t block = p.shape()[static_cast<std::size_t>(ax)] * inner;
        auto gp = p.mutable_grad();
        for (std::int64_t r = 0; r < outer; ++r) {
          const T* src = g.data() + r * out_block + offsets[k];
          T* dst = gp.data() + r * block;
          for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  const int nd = x.ndim();
  const int ax = detail::normalize_axis(axis, nd, "slice");
  const std::int64_t extent = x.shape()[static_cast<std::size_t>(ax)];
  if (start < 0 || length < 0 || start + length > extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis " + std::to_string(ax) + " of extent " + std::to_string(extent));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = ax + 1; d < nd; ++d) inner *= out_shape[static_cast<std::size_t>(d)];
  Tensor<T> out(out_shape);
  auto o = out.data();
  auto in = x.data();
  for (std::int64_t r = 0; r < outer; ++r) {
    std::copy_n(in.begin() + (r * extent + start) * inner, length * inner, o.begin() + r * length * inner);
  }
  if (detail::recording<T>({&x})) {
    detail::record<T>(out, [x, outer, inner, extent, start, length](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      for (std::int64_t r = 0; r < outer; ++r) {
        T* dst = gx.data() + (r * extent + start) * inner;
        const T* src = g.data() + r * length * inner;
        for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

namespace {

// Copies the overlapping top-left region between two NCHW planes.
template <typename T, bool kAccumulate>
void copy_region(const T* src, std::int64_t sh, std::int64_t sw, T* dst, std::int64_t dh, std::int64_t dw,
                 std::int64_t planes) {
  const std::int64_t h = std::min(sh, dh);
  const std::int64_t w = std::min(sw, dw);
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t y = 0; y < h; ++y) {
      const T* s = src + (p * sh + y) * sw;
      T* d = dst + (p * dh + y) * dw;
      for (std::int64_t x = 0; x < w; ++x) {
        if constexpr (kAccumulate) d[x] += s[x];
        else d[x] = s[x];
      }
    }
  }
}

template <typename T>
Tensor<T> resize_region(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w, const char* op) {
  if (x.ndim() != 4) throw ShapeError(std::string(op) + ": expected NCHW input, got " + to_string(x.shape()));
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t h = x.dim(2), w = x.dim(3);
  if (out_h == h && out_w == w) return x;
  Tensor<T> out({x.dim(0), x.dim(1), out_h, out_w});
  copy_region<T, false>(x.data().data(), h, w, out.data().data(), out_h, out_w, planes);
  if (detail::recording<T>({&x})) {
    detail::record<T>(out, [x, planes, h, w, out_h, out_w](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      copy_region<T, true>(g.data(), out_h, out_w, gx.data(), h, w, planes);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> pad_bottom_right(const Tensor<T>& x, std::int64_t pad_h, std::int64_t pad_w) {
  if (pad_h < 0 || pad_w < 0) throw ShapeError("pad_bottom_right: negative padding");
  if (x.ndim() != 4) throw ShapeError("pad_bottom_right: expected NCHW input, got " + to_string(x.shape()));
  return resize_region(x, x.dim(2) + pad_h, x.dim(3) + pad_w, "pad_bottom_right");
}

template <typename T>
Tensor<T> crop_top_left(const Tensor<T>& x, std::int64_t height, std::int64_t width) {
  if (x.ndim() != 4) throw ShapeError("crop_top_left: expected NCHW input, got " + to_string(x.shape()));
  if (height > x.dim(2) || width > x.dim(3) || height < 0 || width < 0) {
    throw ShapeError("crop_top_left: " + std::to_string(height) + "x" + std::to_string(width) +
                     " exceeds input " + to_string(x.shape()));
  }
  return resize_region(x, height, width, "crop_top_left");
}

template <typename T>
Tensor<T> take(const Tensor<T>& table, const std::vector<std::int64_t>& indices, Shape shape) {
  if (numel(shape) != static_cast<std::int64_t>(indices.size())) {
    throw ShapeError("take: " + std::to_string(indices.size()) + " indices cannot fill " + to_string(shape));
  }
  const std::int64_t n = table.numel();
  Tensor<T> out(std::move(shape));
  auto o = out.data();
  auto in = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= n) throw ShapeError("take: index " + std::to_string(indices[i]) + " out of range");
    o[i] = in[static_cast<std::size_t>(indices[i])];
  }
  if (detail::recording<T>({&table})) {
    detail::record<T>(out, [table, indices](std::span<const T> g) mutable {
      auto gt = table.mutable_grad();
      for (std::size_t i = 0; i < indices.size(); ++i) gt[static_cast<std::size_t>(indices[i])] += g[i];
    });
  }
  return out;
}

#define NHVT_SHAPE_OPS(T)                                                                        \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                        \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                      \
  template Tensor<T> transpose<T>(const Tensor<T>&, int, int);                                   \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                              \
  template Tensor<T> slice<T>(const Tensor<T>&, int, std::int64_t, std::int64_t);                \
  template Tensor<T> pad_bottom_right<T>(const Tensor<T>&, std::int64_t, std::int64_t);          \
  template Tensor<T> crop_top_left<T>(const Tensor<T>&, std::int64_t, std::int64_t);             \
  template Tensor<T> take<T>(const Tensor<T>&, const std::vector<std::int64_t>&, Shape);
NHVT_INSTANTIATE(NHVT_SHAPE_OPS)

}  // namespace nhvt
