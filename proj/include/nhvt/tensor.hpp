#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nhvt {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand shapes violate an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on misuse of the gradient tape (double backward, non-scalar root...).
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when no gradient has been accumulated
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0: not produced on a tape
};

// Dense row-major n-dimensional array. Image data is laid out NCHW.
//
// Tensor is a handle: copies share storage, like a shared_ptr. Use clone()
// for an independent deep copy. This is what lets the tape and the
// parameter store reference the same buffers a module holds.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  // Gradient accumulator, zero-initialised on first access.
  std::span<T> mutable_grad() const;
  void zero_grad() { impl_->grad.clear(); }

  bool on_tape() const { return impl_ && impl_->tape_id != 0; }
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  TensorImpl<T>& impl() const { return *impl_; }
  const std::shared_ptr<TensorImpl<T>>& handle() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
class TapeScope;

// Ordered record of differentiable operations. Operations executed while a
// tape is active (see TapeScope) and touching a tensor that requires grad are
// appended in execution order, which is a valid topological order.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T> grad_out)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  // Propagates d(root)/d(leaf) into every requires_grad leaf. Allowed once.
  void backward(const Tensor<T>& root);

  // Appends `out` as the result of an operation. No-op when `out` already
  // has no grad requirement (callers check requires_grad on inputs first).
  void record(Tensor<T>& out, BackwardFn fn);

  static Tape* active() { return active_; }

 private:
  friend class TapeScope<T>;
  struct Record {
    std::shared_ptr<TensorImpl<T>> output;
    BackwardFn backward;
  };

  std::uint64_t id_;
  bool consumed_ = false;
  std::vector<Record> records_;
  static inline thread_local Tape* active_ = nullptr;
};

// Makes `tape` the active tape of the calling thread for the scope's
// lifetime. Constructing with nullptr suspends recording.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>* tape) : previous_(Tape<T>::active_) { Tape<T>::active_ = tape; }
  explicit TapeScope(Tape<T>& tape) : TapeScope(&tape) {}
  ~TapeScope() { Tape<T>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Runs backward on the active tape.
template <typename T>
void backward(const Tensor<T>& root);

namespace detail {

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void record(Tensor<T>& out, typename Tape<T>::BackwardFn fn) {
  Tape<T>::active()->record(out, std::move(fn));
}

}  // namespace detail

// Multiply-add counter for flop estimates. Kernels add 2*M*N*K per GEMM
// (and the direct-convolution equivalent) to the calling thread's counter.
class FlopCounter {
 public:
  FlopCounter();
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;
  std::int64_t flops() const { return count_; }

  static void add(std::int64_t flops);

 private:
  std::int64_t count_ = 0;
  FlopCounter* previous_;
};

// Fingerprint of the discrete choices made by piecewise operations (max-pool
// winners, loss clamps) on the calling thread. Two evaluations with equal
// fingerprints lie on the same smooth piece.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;
  std::uint64_t value() const { return hash_; }

  static bool active();
  static void note(std::uint64_t choice);

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  BranchTrace* previous_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace nhvt
