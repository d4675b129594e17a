#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "nhvt/ops.hpp"
#include "nhvt/rng.hpp"
#include "nhvt/tensor.hpp"

namespace nhvt {

// Hierarchical name -> tensor, iterated lexicographically.
template <typename T>
using ParamStore = std::map<std::string, Tensor<T>>;

// Base for layers and networks. A module owns its parameters (trainable),
// buffers (running statistics) and child modules. Names are joined with '.'.
template <typename T>
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  ParamStore<T> parameters() const;
  ParamStore<T> buffers() const;

  // Switches batch-norm behaviour for this module and all descendants.
  void set_training(bool on);
  bool training() const { return training_; }

  void set_requires_grad(bool on);
  void zero_grad();

 protected:
  Tensor<T> register_parameter(const std::string& name, Tensor<T> t);
  Tensor<T> register_buffer(const std::string& name, Tensor<T> t);

  template <typename M>
  M& register_module(const std::string& name, std::unique_ptr<M> child) {
    M& ref = *child;
    children_.emplace_back(name, std::move(child));
    return ref;
  }

 private:
  void collect(const std::string& prefix, ParamStore<T>& params, ParamStore<T>& bufs) const;

  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::pair<std::string, Tensor<T>>> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
  bool training_ = true;
};

// Named container for modules that are not fields of a parent.
template <typename T>
class ModuleList : public Module<T> {
 public:
  template <typename M>
  M& add(const std::string& name, std::unique_ptr<M> child) {
    return this->register_module(name, std::move(child));
  }
};

// ---- layers ----

template <typename T>
class Conv2d : public Module<T> {
 public:
  // He-normal weights; bias zero when present.
  Conv2d(std::int64_t in, std::int64_t out, int kernel, Conv2dOptions options, bool bias, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T> weight, bias;
  Conv2dOptions options;
};

// Weight (in, out, k, k); He-normal with fan = out * k * k.
template <typename T>
class ConvTranspose2d : public Module<T> {
 public:
  ConvTranspose2d(std::int64_t in, std::int64_t out, int kernel, int stride, bool bias, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T> weight, bias;
  int stride;
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::int64_t channels);
  Tensor<T> forward(const Tensor<T>& x);

  Tensor<T> weight, bias;
  BatchNormState<T> state;
};

// Weight (out, in), truncated normal std 0.02; bias zero.
template <typename T>
class Linear : public Module<T> {
 public:
  Linear(std::int64_t in, std::int64_t out, bool bias, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T> weight, bias;
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(std::int64_t dim);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T> weight, bias;
};

// conv -> batchnorm -> mish, the convolutional unit of the encoder/decoder.
template <typename T>
class ConvBnMish : public Module<T> {
 public:
  ConvBnMish(std::int64_t in, std::int64_t out, int kernel, int dilation, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);

 private:
  Conv2d<T>& conv_;
  BatchNorm2d<T>& bn_;
};

}  // namespace nhvt
