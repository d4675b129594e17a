#pragma once

#include <cstdint>
#include <vector>

#include "nhvt/tensor.hpp"

// Differentiable tensor operations. Every function records itself on the
// active tape when one of its tensor inputs requires grad; otherwise it is a
// plain computation. Optional tensor arguments (biases) are passed as an
// undefined Tensor{}.
namespace nhvt {

// ---- elementwise (numpy-style broadcasting for binary ops) ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);

template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);  // exact erf form
template <typename T> Tensor<T> mish(const Tensor<T>& x);  // x * tanh(softplus(x))

// ---- shape manipulation ----
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
// Zero-pads an NCHW tensor at the bottom and right edges.
template <typename T> Tensor<T> pad_bottom_right(const Tensor<T>& x, std::int64_t pad_h, std::int64_t pad_w);
// Keeps the top-left height x width region of an NCHW tensor.
template <typename T> Tensor<T> crop_top_left(const Tensor<T>& x, std::int64_t height, std::int64_t width);
// out[i] = table.flat[indices[i]], reshaped to `shape`. Backward scatter-adds.
template <typename T>
Tensor<T> take(const Tensor<T>& table, const std::vector<std::int64_t>& indices, Shape shape);

// ---- reductions ----
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::vector<int> axes, bool keepdim);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::vector<int> axes, bool keepdim);

// ---- linear algebra ----
// a: (..., m, k), b: (..., k, n) with equal batch dims, or b: (k, n) shared.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x: (..., in), weight: (out, in), bias: (out) optional -> (..., out)
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// ---- neural network kernels (NCHW) ----
struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

std::int64_t conv_output_extent(std::int64_t in, int kernel, int stride, int padding, int dilation);

// weight: (out, in / groups, k, k); bias: (out) optional.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& options = {});

// weight: (in, out, k, k); output extent (H-1)*stride - 2*padding + k.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding);

// Padded positions never win; ties go to the first element in row-major window order.
template <typename T> Tensor<T> maxpool2d(const Tensor<T>& input, int kernel, int stride, int padding);
template <typename T> Tensor<T> avgpool2d(const Tensor<T>& input, int kernel, int stride);
template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& input, int factor);
// Bin (i, j) averages rows [floor(i*H/oh), ceil((i+1)*H/oh)) and likewise for columns.
template <typename T> Tensor<T> adaptive_avgpool2d(const Tensor<T>& input, std::int64_t out_h, std::int64_t out_w);
// Output pixel (y, x) copies input (floor(y*H/oh), floor(x*W/ow)).
template <typename T> Tensor<T> resize_nearest(const Tensor<T>& input, std::int64_t out_h, std::int64_t out_w);

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

struct BatchNormOptions {
  bool training = true;
  double eps = 1e-5;
  double momentum = 0.1;
};

// Training mode normalises with biased batch statistics and folds the
// unbiased variance into the running state; eval mode uses the running state.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, const BatchNormOptions& options = {});

// Normalises over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);

}  // namespace nhvt
