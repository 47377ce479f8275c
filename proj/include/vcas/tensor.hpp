#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vcas/errors.hpp"

namespace vcas {

// Dimensions of a dense row-major array. Every dimension is positive.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims_) n *= d;
    return n;
  }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    for (std::size_t i = 0; i < dims_.size(); ++i)
      if (dims_[i] == 0)
        throw InvalidArgument("shape dimension " + std::to_string(i) + " is zero");
  }

  std::vector<std::size_t> dims_;
};

template <typename T>
class Tape;

// Dense tensor with shared storage. Copies alias the same buffer, like a
// handle; use clone() or detach() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : s_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<Storage>()) {
    s_->shape = std::move(shape);
    s_->data.assign(s_->shape.numel(), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<Storage>()) {
    if (values.size() != shape.numel())
      throw InvalidArgument("tensor of shape " + shape.str() + " needs " +
                            std::to_string(shape.numel()) + " values, got " +
                            std::to_string(values.size()));
    s_->shape = std::move(shape);
    s_->data = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return s_->shape; }
  std::size_t dim(std::size_t i) const { return s_->shape[i]; }
  std::size_t rank() const { return s_->shape.rank(); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<T> values() { return s_->data; }
  std::span<const T> values() const { return s_->data; }
  T* data() { return s_->data.data(); }
  const T* data() const { return s_->data.data(); }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }

  T item() const {
    if (numel() != 1) throw InvalidArgument("item() on tensor of shape " + shape().str());
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  // Allocates a zero gradient on first use. The gradient buffer belongs to
  // the shared storage, so it is writable through any handle.
  std::span<T> grad() const {
    if (s_->grad.empty()) s_->grad.assign(numel(), T(0));
    return s_->grad;
  }
  void zero_grad() { s_->grad.clear(); }

  // Same values, fresh storage, no gradient tracking.
  Tensor detach() const { return Tensor(shape(), s_->data); }
  Tensor clone() const {
    Tensor t = detach();
    t.set_requires_grad(requires_grad());
    return t;
  }

  // Shares storage with a different view of the shape (same element count).
  Tensor reshaped(Shape shape) const {
    if (shape.numel() != numel())
      throw InvalidArgument("cannot reshape " + this->shape().str() + " to " + shape.str());
    Tensor t = detach();
    t.s_->shape = std::move(shape);
    return t;
  }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

// Ordered record of executed differentiable operations. A tape becomes the
// recording target for the current thread while a TapeScope is alive.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) { ops_.push_back(std::move(fn)); }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  // Seeds d(root)/d(root) = 1 and runs every recorded backward in exact
  // reverse order. The root must be a scalar.
  void backward(Tensor<T>& root) {
    if (root.numel() != 1) throw InvalidArgument("backward() root must be a scalar");
    root.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  static Tape*& current() {
    thread_local Tape* active = nullptr;
    return active;
  }

 private:
  std::vector<Backward> ops_;
};

template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::current()) { Tape<T>::current() = &tape; }
  ~TapeScope() { Tape<T>::current() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording (evaluation, queue snapshots).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::current()) { Tape<T>::current() = nullptr; }
  ~NoGradScope() { Tape<T>::current() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// True when a tape is active and any input tracks gradients.
template <typename T>
bool grad_enabled(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::current()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

// Records `backward` on the active tape and marks `out` as tracking. Callers
// check grad_enabled() first so that saved intermediates are only built when
// needed.
template <typename T>
void record_op(Tensor<T>& out, typename Tape<T>::Backward backward) {
  out.set_requires_grad(true);
  Tape<T>::current()->record(std::move(backward));
}

// Integer label map or boolean mask with an NCHW-style shape.
template <typename V>
struct Grid {
  Shape shape;
  std::vector<V> values;

  Grid() = default;
  explicit Grid(Shape s, V fill = V{}) : shape(std::move(s)), values(shape.numel(), fill) {}
  Grid(Shape s, std::vector<V> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != shape.numel()) throw InvalidArgument("grid size does not match shape " + shape.str());
  }
  std::size_t size() const { return values.size(); }
  V& operator[](std::size_t i) { return values[i]; }
  const V& operator[](std::size_t i) const { return values[i]; }
  bool operator==(const Grid&) const = default;
};

using LabelMap = Grid<int>;
using Mask = Grid<std::uint8_t>;

}  // namespace vcas
