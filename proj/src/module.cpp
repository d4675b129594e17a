#include "nhvt/module.hpp"

#include <cmath>

#include "ops_common.hpp"

namespace nhvt {

namespace {

template <typename T>
Tensor<T> he_normal(const Shape& shape, std::int64_t fan, Rng& rng) {
  Tensor<T> t(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

}  // namespace

template <typename T>
Tensor<T> Module<T>::register_parameter(const std::string& name, Tensor<T> t) {
  t.set_requires_grad(true);
  params_.emplace_back(name, t);
  return t;
}

template <typename T>
Tensor<T> Module<T>::register_buffer(const std::string& name, Tensor<T> t) {
  buffers_.emplace_back(name, t);
  return t;
}

template <typename T>
void Module<T>::collect(const std::string& prefix, ParamStore<T>& params, ParamStore<T>& bufs) const {
  for (const auto& [name, t] : params_) {
    if (!params.emplace(prefix + name, t).second) throw std::logic_error("duplicate parameter name " + prefix + name);
  }
  for (const auto& [name, t] : buffers_) {
    if (!bufs.emplace(prefix + name, t).second) throw std::logic_error("duplicate buffer name " + prefix + name);
  }
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", params, bufs);
}

template <typename T>
ParamStore<T> Module<T>::parameters() const {
  ParamStore<T> params, bufs;
  collect("", params, bufs);
  return params;
}

template <typename T>
ParamStore<T> Module<T>::buffers() const {
  ParamStore<T> params, bufs;
  collect("", params, bufs);
  return bufs;
}

template <typename T>
void Module<T>::set_training(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->set_training(on);
}

template <typename T>
void Module<T>::set_requires_grad(bool on) {
  for (auto& [name, t] : parameters()) {
    Tensor<T> h = t;
    h.set_requires_grad(on);
  }
}

template <typename T>
void Module<T>::zero_grad() {
  for (auto& [name, t] : parameters()) {
    Tensor<T> h = t;
    h.zero_grad();
  }
}

template <typename T>
Conv2d<T>::Conv2d(std::int64_t in, std::int64_t out, int kernel, Conv2dOptions opt, bool with_bias, Rng& rng)
    : options(opt) {
  const std::int64_t fan = in / opt.groups * kernel * kernel;
  weight = this->register_parameter("weight", he_normal<T>({out, in / opt.groups, kernel, kernel}, fan, rng));
  if (with_bias) bias = this->register_parameter("bias", Tensor<T>({out}, T(0)));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return conv2d(x, weight, bias, options);
}

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(std::int64_t in, std::int64_t out, int kernel, int s, bool with_bias, Rng& rng)
    : stride(s) {
  weight = this->register_parameter("weight", he_normal<T>({in, out, kernel, kernel}, out * kernel * kernel, rng));
  if (with_bias) bias = this->register_parameter("bias", Tensor<T>({out}, T(0)));
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::forward(const Tensor<T>& x) const {
  return conv_transpose2d(x, weight, bias, stride, 0);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels) {
  weight = this->register_parameter("weight", Tensor<T>({channels}, T(1)));
  bias = this->register_parameter("bias", Tensor<T>({channels}, T(0)));
  state.running_mean = this->register_buffer("running_mean", Tensor<T>({channels}, T(0)));
  state.running_var = this->register_buffer("running_var", Tensor<T>({channels}, T(1)));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) {
  return batchnorm2d(x, weight, bias, state, {.training = this->training()});
}

template <typename T>
Linear<T>::Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng) {
  Tensor<T> w({out, in});
  for (auto& v : w.data()) v = static_cast<T>(rng.trunc_normal(0.02));
  weight = this->register_parameter("weight", w);
  if (with_bias) bias = this->register_parameter("bias", Tensor<T>({out}, T(0)));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return linear(x, weight, bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::int64_t dim) {
  weight = this->register_parameter("weight", Tensor<T>({dim}, T(1)));
  bias = this->register_parameter("bias", Tensor<T>({dim}, T(0)));
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const {
  return layer_norm(x, weight, bias);
}

template <typename T>
ConvBnMish<T>::ConvBnMish(std::int64_t in, std::int64_t out, int kernel, int dilation, Rng& rng)
    : conv_(this->register_module(
          "conv", std::make_unique<Conv2d<T>>(in, out, kernel,
                                              Conv2dOptions{.padding = dilation * (kernel - 1) / 2, .dilation = dilation},
                                              false, rng))),
      bn_(this->register_module("bn", std::make_unique<BatchNorm2d<T>>(out))) {}

template <typename T>
Tensor<T> ConvBnMish<T>::forward(const Tensor<T>& x) {
  return mish(bn_.forward(conv_.forward(x)));
}

#define NHVT_MODULES(T)              \
  template class Module<T>;          \
  template class Conv2d<T>;          \
  template class ConvTranspose2d<T>; \
  template class BatchNorm2d<T>;     \
  template class Linear<T>;          \
  template class LayerNorm<T>;       \
  template class ConvBnMish<T>;
NHVT_INSTANTIATE(NHVT_MODULES)

}  // namespace nhvt
