#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "chaincnn/error.hpp"

namespace chaincnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major float32 array with an optional gradient buffer of the
/// same shape.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_size(shape_) != data_.size())
      throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* raw() noexcept { return data_.data(); }
  const float* raw() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  void fill(float value) { std::fill(data_.begin(), data_.end(), value); }

  /// Same data, new shape of equal element count. The gradient is dropped.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  bool has_grad() const noexcept { return grad_.has_value(); }

  /// Allocates a zero gradient on first use.
  std::span<float> grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0f);
    return *grad_;
  }
  std::span<const float> grad() const {
    if (!grad_) throw ShapeError("tensor has no gradient buffer");
    return *grad_;
  }
  void clear_grad() { grad_.reset(); }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<float> data_;
  std::optional<std::vector<float>> grad_;
};

inline void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw ShapeError(std::string(what) + " expected " + shape_string(expected) + ", got " +
                     shape_string(t.shape()));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + " expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
}

}  // namespace chaincnn
