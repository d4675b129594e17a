#include "nhvt/tensor.hpp"

#include <atomic>
#include <sstream>

namespace nhvt {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<TensorImpl<T>>()) {
  const std::int64_t n = nhvt::numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<std::size_t>(n), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
  const std::int64_t n = nhvt::numel(shape);
  if (static_cast<std::int64_t>(values.size()) != n) {
    throw ShapeError("tensor of shape " + to_string(shape) + " needs " + std::to_string(n) +
                     " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int nd = ndim();
  const int a = axis < 0 ? axis + nd : axis;
  if (a < 0 || a >= nd) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() const {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor<T>(impl_->shape, impl_->data);
}

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

template <typename T>
Tape<T>::Tape() : id_(next_tape_id.fetch_add(1)) {}

template <typename T>
void Tape<T>::record(Tensor<T>& out, BackwardFn fn) {
  if (consumed_) throw AutogradError("recording onto a tape whose backward pass already ran");
  out.impl().requires_grad = true;
  out.impl().tape_id = id_;
  records_.push_back(Record{out.handle(), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
  if (consumed_) throw AutogradError("backward already ran on this tape; record a new forward pass");
  if (!root.defined() || root.numel() != 1) {
    throw AutogradError("backward root must be a scalar, got shape " +
                        (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
  }
  if (root.impl().tape_id != id_) throw AutogradError("backward root was not recorded on this tape");

  std::size_t start = records_.size();
  while (start > 0 && records_[start - 1].output != root.handle()) --start;
  if (start == 0) throw AutogradError("backward root not found on tape");

  consumed_ = true;
  root.impl().grad.assign(1, T(1));
  for (std::size_t i = start; i-- > 0;) {
    Record& r = records_[i];
    if (!r.output->grad.empty()) {
      r.backward(r.output->grad);
      r.output->grad.clear();
      r.output->grad.shrink_to_fit();
    }
  }
  records_.clear();
}

template <typename T>
void backward(const Tensor<T>& root) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) throw AutogradError("backward called with no active tape");
  tape->backward(root);
}

namespace {
thread_local FlopCounter* active_counter = nullptr;
}

FlopCounter::FlopCounter() : previous_(active_counter) { active_counter = this; }
FlopCounter::~FlopCounter() {
  active_counter = previous_;
  if (previous_ != nullptr) previous_->count_ += count_;
}
void FlopCounter::add(std::int64_t flops) {
  if (active_counter != nullptr) active_counter->count_ += flops;
}

namespace {
thread_local BranchTrace* active_trace = nullptr;
}

BranchTrace::BranchTrace() : previous_(active_trace) { active_trace = this; }
BranchTrace::~BranchTrace() { active_trace = previous_; }
bool BranchTrace::active() { return active_trace != nullptr; }
void BranchTrace::note(std::uint64_t choice) {
  if (active_trace == nullptr) return;
  active_trace->hash_ = (active_trace->hash_ ^ choice) * 0x100000001b3ULL;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace nhvt
