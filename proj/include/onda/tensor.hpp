#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "onda/error.hpp"

namespace onda {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-d array with an optional gradient slot.
///
/// Storage is an Eigen column array so whole-tensor arithmetic stays an
/// Eigen expression; 4-d NCHW tensors expose per-sample [C, H*W] row-major
/// maps for the convolution kernels.
template <typename Scalar>
class BasicTensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using PlaneMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstPlaneMap = Eigen::Map<const RowMatrix<Scalar>>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)) {
    validate_shape();
    data_ = Array::Constant(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_),
                       -1);
    }
  }

  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.size() == 0; }

  Array& data() noexcept { return data_; }
  const Array& data() const noexcept { return data_; }
  Scalar* ptr() noexcept { return data_.data(); }
  const Scalar* ptr() const noexcept { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_), -1);
    return data_[0];
  }

  // NCHW accessors.
  Scalar& at(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Sample n of an NCHW tensor viewed as a [C, H*W] row-major matrix.
  PlaneMap plane(Index n) {
    const Index c = shape_[1], hw = shape_[2] * shape_[3];
    return PlaneMap(data_.data() + n * c * hw, c, hw);
  }
  ConstPlaneMap plane(Index n) const {
    const Index c = shape_[1], hw = shape_[2] * shape_[3];
    return ConstPlaneMap(data_.data() + n * c * hw, c, hw);
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  BasicTensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  bool has_grad() const noexcept { return grad_.has_value(); }
  /// Gradient slot; allocated as zeros on first access.
  Array& grad() {
    if (!grad_) grad_ = Array::Zero(data_.size());
    return *grad_;
  }
  const Array& grad() const {
    if (!grad_) throw Error("tensor has no gradient");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) grad_->setZero();
  }
  void clear_grad() { grad_.reset(); }

  bool all_finite() const { return data_.isFinite().all(); }

  void check_finite(std::string_view where) const {
    if (!all_finite()) throw NonFiniteError("non-finite value in " + std::string(where));
  }

  bool same_values(const BasicTensor& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  void validate_shape() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] <= 0) {
        throw ShapeError("dimension " + std::to_string(i) + " of shape " + shape_string(shape_) +
                             " is not positive",
                         static_cast<int>(i));
      }
    }
  }

  Shape shape_;
  Array data_;
  std::optional<Array> grad_;
  bool requires_grad_ = false;
};

using Tensor = BasicTensor<double>;

/// Throws ShapeError naming the first dimension where `actual` differs.
inline void expect_shape(const Shape& actual, const Shape& expected, std::string_view what) {
  if (actual.size() != expected.size()) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(expected.size()) +
                         ", got shape " + shape_string(actual),
                     -1);
  }
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (expected[i] >= 0 && actual[i] != expected[i]) {
      throw ShapeError(std::string(what) + ": dimension " + std::to_string(i) + " is " +
                           std::to_string(actual[i]) + ", expected " + std::to_string(expected[i]),
                       static_cast<int>(i));
    }
  }
}

}  // namespace onda
