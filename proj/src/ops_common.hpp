#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "nhvt/tensor.hpp"

namespace nhvt::detail {

// Accumulator for forward reductions. 64-bit tensors exist for gradient
// checks, where rounding in reductions becomes finite-difference noise.
template <typename T>
using Accum = std::conditional_t<std::is_same_v<T, double>, long double, double>;

inline std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
  return strides;
}

inline int normalize_axis(int axis, int ndim, const char* op) {
  const int a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(ndim));
  }
  return a;
}

// Visits every index of `shape` in row-major order, tracking K strided
// offsets. `f(linear_index, offsets)` is called once per element.
template <std::size_t K, typename F>
void strided_loop(const Shape& shape, const std::array<const std::vector<std::int64_t>*, K>& strides, F&& f) {
  const std::size_t nd = shape.size();
  std::array<std::int64_t, K> off{};
  if (nd == 0) {
    f(std::int64_t{0}, off);
    return;
  }
  std::int64_t total = 1;
  for (std::int64_t d : shape) total *= d;
  if (total == 0) return;
  const std::int64_t inner = shape[nd - 1];
  std::array<std::int64_t, K> inner_stride{};
  for (std::size_t k = 0; k < K; ++k) inner_stride[k] = (*strides[k])[nd - 1];
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t linear = 0;
  const std::int64_t outer = total / inner;
  for (std::int64_t o = 0; o < outer; ++o) {
    std::array<std::int64_t, K> cur = off;
    for (std::int64_t j = 0; j < inner; ++j) {
      f(linear++, cur);
      for (std::size_t k = 0; k < K; ++k) cur[k] += inner_stride[k];
    }
    for (std::size_t d = nd - 1; d-- > 0;) {
      ++idx[d];
      for (std::size_t k = 0; k < K; ++k) off[k] += (*strides[k])[d];
      if (idx[d] < shape[d]) break;
      for (std::size_t k = 0; k < K; ++k) off[k] -= (*strides[k])[d] * shape[d];
      idx[d] = 0;
    }
  }
}

// Strides of `in` aligned to `out` with zero stride on broadcast axes.
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> result(out.size(), 0);
  const auto base = contiguous_strides(in);
  const std::size_t shift = out.size() - in.size();
  for (std::size_t d = 0; d < in.size(); ++d) {
    result[d + shift] = in[d] == 1 && out[d + shift] != 1 ? 0 : base[d];
  }
  return result;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b) +
                       " (dimension " + std::to_string(i) + ")");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

}  // namespace nhvt::detail

#define NHVT_INSTANTIATE(MACRO) \
  MACRO(float)                  \
  MACRO(double)
