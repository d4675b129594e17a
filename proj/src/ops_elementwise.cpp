#include <algorithm>
#include <cmath>

#include "nhvt/ops.hpp"
#include "ops_common.hpp"

namespace nhvt {

namespace {

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* name) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    const std::size_t n = o.size();
    switch (kind) {
      case BinaryKind::kAdd:
        for (std::size_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
        break;
      case BinaryKind::kSub:
        for (std::size_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
        break;
      case BinaryKind::kMul:
        for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
        break;
    }
    if (detail::recording<T>({&a, &b})) {
      detail::record<T>(out, [a, b, kind](std::span<const T> g) mutable {
        const std::size_t m = g.size();
        if (a.requires_grad()) {
          auto ga = a.mutable_grad();
          if (kind == BinaryKind::kMul) {
            auto y = b.data();
            for (std::size_t i = 0; i < m; ++i) ga[i] += g[i] * y[i];
          } else {
            for (std::size_t i = 0; i < m; ++i) ga[i] += g[i];
          }
        }
        if (b.requires_grad()) {
          auto gb = b.mutable_grad();
          if (kind == BinaryKind::kMul) {
            auto x = a.data();
            for (std::size_t i = 0; i < m; ++i) gb[i] += g[i] * x[i];
          } else if (kind == BinaryKind::kSub) {
            for (std::size_t i = 0; i < m; ++i) gb[i] -= g[i];
          } else {
            for (std::size_t i = 0; i < m; ++i) gb[i] += g[i];
          }
        }
      });
    }
    return out;
  }

  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), name);
  auto sa = detail::broadcast_strides(a.shape(), out_shape);
  auto sb = detail::broadcast_strides(b.shape(), out_shape);
  Tensor<T> out(out_shape);
  {
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    detail::strided_loop<2>(out_shape, {&sa, &sb}, [&](std::int64_t i, const std::array<std::int64_t, 2>& off) {
      switch (kind) {
        case BinaryKind::kAdd: o[i] = x[off[0]] + y[off[1]]; break;
        case BinaryKind::kSub: o[i] = x[off[0]] - y[off[1]]; break;
        case BinaryKind::kMul: o[i] = x[off[0]] * y[off[1]]; break;
      }
    });
  }
  if (detail::recording<T>({&a, &b})) {
    detail::record<T>(out, [a, b, kind, out_shape, sa, sb](std::span<const T> g) mutable {
      const bool need_a = a.requires_grad();
      const bool need_b = b.requires_grad();
      std::span<T> ga, gb;
      if (need_a) ga = a.mutable_grad();
      if (need_b) gb = b.mutable_grad();
      auto x = a.data();
      auto y = b.data();
      detail::strided_loop<2>(out_shape, {&sa, &sb}, [&](std::int64_t i, const std::array<std::int64_t, 2>& off) {
        const T gi = g[static_cast<std::size_t>(i)];
        if (need_a) ga[off[0]] += kind == BinaryKind::kMul ? gi * y[off[1]] : gi;
        if (need_b) {
          if (kind == BinaryKind::kMul) gb[off[1]] += gi * x[off[0]];
          else if (kind == BinaryKind::kSub) gb[off[1]] -= gi;
          else gb[off[1]] += gi;
        }
      });
    });
  }
  return out;
}

// y = f(x); backward multiplies by dfdx(x, y).
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(in[i]);
  if (detail::recording<T>({&x})) {
    detail::record<T>(out, [x, out, dfdx](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      auto in = x.data();
      auto y = out.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(in[i], y[i]);
    });
  }
  return out;
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
T softplus(T v) {
  return v > T(20) ? v : std::log1p(std::exp(v));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(x, [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return unary(
      x, [](T v) { return T(0.5) * v * std::erfc(-v * kInvSqrt2); },
      [](T v, T) {
        const T cdf = T(0.5) * std::erfc(-v * kInvSqrt2);
        return cdf + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> mish(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v * std::tanh(softplus(v)); },
      [](T v, T) {
        const T t = std::tanh(softplus(v));
        return t + v * (T(1) - t * t) * stable_sigmoid(v);
      });
}

// ---- reductions ----

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  detail::Accum<T> acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (detail::recording<T>({&x})) {
    detail::record<T>(out, [x](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      for (auto& v : gx) v += g[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::vector<int> axes, bool keepdim) {
  const int nd = x.ndim();
  std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
  for (int& a : axes) {
    a = detail::normalize_axis(a, nd, "sum");
    reduced[static_cast<std::size_t>(a)] = true;
  }
  Shape kept_shape = x.shape();
  for (int d = 0; d < nd; ++d) {
    if (reduced[static_cast<std::size_t>(d)]) kept_shape[static_cast<std::size_t>(d)] = 1;
  }
  auto ostrides = detail::contiguous_strides(kept_shape);
  for (int d = 0; d < nd; ++d) {
    if (reduced[static_cast<std::size_t>(d)]) ostrides[static_cast<std::size_t>(d)] = 0;
  }
  std::vector<detail::Accum<T>> acc(static_cast<std::size_t>(numel(kept_shape)), 0);
  auto in = x.data();
  detail::strided_loop<1>(x.shape(), {&ostrides}, [&](std::int64_t i, const std::array<std::int64_t, 1>& off) {
    acc[static_cast<std::size_t>(off[0])] += in[static_cast<std::size_t>(i)];
  });
  Shape out_shape;
  if (keepdim) {
    out_shape = kept_shape;
  } else {
    for (int d = 0; d < nd; ++d) {
      if (!reduced[static_cast<std::size_t>(d)]) out_shape.push_back(x.shape()[static_cast<std::size_t>(d)]);
    }
  }
  Tensor<T> out(out_shape);
  auto o = out.data();
  for (std::size_t i = 0; i < acc.size(); ++i) o[i] = static_cast<T>(acc[i]);
  if (detail::recording<T>({&x})) {
    detail::record<T>(out, [x, ostrides](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      detail::strided_loop<1>(x.shape(), {&ostrides}, [&](std::int64_t i, const std::array<std::int64_t, 1>& off) {
        gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(off[0])];
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::vector<int> axes, bool keepdim) {
  std::int64_t count = 1;
  for (int a : axes) count *= x.dim(a);
  if (count == 0) throw ShapeError("mean over an empty axis");
  return scale(sum(x, std::move(axes), keepdim), T(1) / static_cast<T>(count));
}

#define NHVT_ELEMENTWISE(T)                                                       \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                               \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                          \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                   \
  template Tensor<T> mish<T>(const Tensor<T>&);                                   \
  template Tensor<T> sum<T>(const Tensor<T>&);                                    \
  template Tensor<T> sum<T>(const Tensor<T>&, std::vector<int>, bool);            \
  template Tensor<T> mean<T>(const Tensor<T>&);                                   \
  template Tensor<T> mean<T>(const Tensor<T>&, std::vector<int>, bool);
NHVT_INSTANTIATE(NHVT_ELEMENTWISE)

}  // namespace nhvt
