#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace convlora {

// Dense row-major n-d array. Plain value type: copy/move do what you expect,
// no views, no aliasing.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(numel(shape_)) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape/data size mismatch: shape holds " +
                                  std::to_string(numel(shape_)) + " values, data holds " +
                                  std::to_string(data_.size()));
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 4-d accessors (N,C,H,W); unchecked in release builds
  T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  T& at3(std::size_t a, std::size_t b, std::size_t c) {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  const T& at3(std::size_t a, std::size_t b, std::size_t c) const {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  T& at2(std::size_t a, std::size_t b) { return data_[a * shape_[1] + b]; }
  const T& at2(std::size_t a, std::size_t b) const { return data_[a * shape_[1] + b]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (numel(shape) != data_.size())
      throw std::invalid_argument("tensor: reshape from " + shape_str() + " to " +
                                  shape_str(shape) + " changes element count");
    return Tensor(std::move(shape), data_);
  }

  std::string shape_str() const { return shape_str(shape_); }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
  }

  static std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw std::invalid_argument("tensor: zero dimension in shape " + shape_str(shape));
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorI = Tensor<std::int32_t>;

// NaN/Inf anywhere is an error condition, never a silent result.
template <typename T>
void ensure_finite(const Tensor<T>& t, const char* context) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(static_cast<double>(t[i])))
      throw std::runtime_error(std::string(context) + ": non-finite value at flat index " +
                               std::to_string(i));
  }
}

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<std::size_t>& shape,
                   const char* what) {
  if (t.shape() != shape)
    throw std::invalid_argument(std::string(what) + ": expected shape " +
                                Tensor<T>::shape_str(shape) + ", got " + t.shape_str());
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                " tensor, got shape " + t.shape_str());
}

}  // namespace convlora
