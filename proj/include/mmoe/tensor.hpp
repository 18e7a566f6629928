#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mmoe {

// Error taxonomy shared across the library. The CLI maps these onto exit codes.
class ShapeError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
class ConfigError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
class IndexError : public std::out_of_range {
  using std::out_of_range::out_of_range;
};
class FormatError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// 64-byte aligned storage. Vectorised kernels peel scalar iterations until the
// destination is aligned, so a fixed alignment keeps results independent of
// where a buffer happens to be allocated.
inline constexpr std::size_t kBufferAlign = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kBufferAlign)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(kBufferAlign)); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor with an optional gradient buffer of the same shape.
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;

  explicit TensorT(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T{0}) {}

  TensorT(Shape shape, std::initializer_list<T> data) : TensorT(std::move(shape), Buffer<T>(data)) {}

  TensorT(Shape shape, const std::vector<T>& data) : TensorT(std::move(shape), Buffer<T>(data.begin(), data.end())) {}

  TensorT(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static TensorT full(Shape shape, T value) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }
  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
  static TensorT ones(Shape shape) { return full(std::move(shape), T{1}); }
  static TensorT scalar(T value) { return TensorT(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }

  // 2-D helpers. A rank-1 tensor is treated as a single row.
  std::size_t rows() const { return shape_.size() >= 2 ? numel() / shape_.back() : 1; }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  Buffer<T>& vec() { return data_; }
  const Buffer<T>& vec() const { return data_; }
  std::vector<T> to_vector() const { return std::vector<T>(data_.begin(), data_.end()); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols(), cols()); }
  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }

  bool has_grad() const { return grad_.has_value(); }
  std::span<T> grad() {
    ensure_grad();
    return *grad_;
  }
  std::span<const T> grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient");
    return *grad_;
  }
  void ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), T{0});
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T{0});
  }
  void drop_grad() { grad_.reset(); }

  TensorT reshaped(Shape shape) const {
    TensorT out(std::move(shape), data_);
    return out;
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    return TensorT<U>(shape_, Buffer<U>(data_.begin(), data_.end()));
  }

 private:
  Shape shape_;
  Buffer<T> data_;
  std::optional<Buffer<T>> grad_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace mmoe
