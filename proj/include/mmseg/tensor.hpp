#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mmseg/error.hpp"

namespace mmseg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major N-d array. Values live in an Eigen column array so whole-tensor
/// arithmetic can be written as Eigen expressions over `array()`.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    validate_shape();
    values_ = Array::Constant(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    validate_shape();
    if (static_cast<Index>(values.size()) != shape_size(shape_))
      throw ShapeError("tensor initializer has " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape_));
    values_.resize(shape_size(shape_));
    std::copy(values.begin(), values.end(), values_.data());
  }

  Tensor(Shape shape, Array values) : shape_(std::move(shape)), values_(std::move(values)) {
    validate_shape();
    if (values_.size() != shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(values_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return values_.size(); }
  bool empty() const { return values_.size() == 0; }

  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Array& array() { return values_; }
  const Array& array() const { return values_; }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  template <typename... Ix>
  Scalar& operator()(Ix... ix) {
    return values_[offset({static_cast<Index>(ix)...})];
  }
  template <typename... Ix>
  Scalar operator()(Ix... ix) const {
    return values_[offset({static_cast<Index>(ix)...})];
  }

  Index offset(std::initializer_list<Index> ix) const {
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : ix) off = off * shape_[axis++] + i;
    return off;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), values_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, values_.template cast<Other>());
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<Scalar>)
      return values_.isFinite().all();
    else
      return true;
  }

  /// Exact value equality, including shape.
  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && (values_ == other.values_).all();
  }

 private:
  void validate_shape() const {
    for (Index e : shape_)
      if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  Array values_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using LabelTensor = Tensor<std::uint8_t>;

template <typename Scalar>
void require_shape(const Tensor<Scalar>& t, const Shape& expected, const std::string& what) {
  if (t.shape() != expected)
    throw ShapeError(what + ": expected shape " + shape_str(expected) + ", got " +
                     shape_str(t.shape()));
}

template <typename Scalar>
void require_rank(const Tensor<Scalar>& t, Index rank, const std::string& what) {
  if (t.rank() != rank)
    throw ShapeError(what + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
}

template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const std::string& where) {
  if (!t.all_finite()) throw NumericalError("non-finite values produced by " + where);
}

/// Copies `count` consecutive samples along the leading axis, starting at `first`.
template <typename Scalar>
Tensor<Scalar> narrow_leading(const Tensor<Scalar>& t, Index first, Index count) {
  if (first < 0 || count <= 0 || first + count > t.dim(0))
    throw ShapeError("narrow_leading out of range for shape " + shape_str(t.shape()));
  Shape shape = t.shape();
  shape[0] = count;
  const Index stride = t.size() / t.dim(0);
  return Tensor<Scalar>(shape, t.array().segment(first * stride, count * stride));
}

template <typename Scalar>
Tensor<Scalar> concat_leading(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_leading of zero tensors");
  Shape shape = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<Index>(shape.size()) ||
        !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      throw ShapeError("concat_leading shape mismatch: " + shape_str(shape) + " vs " +
                       shape_str(p.shape()));
    total += p.dim(0);
  }
  shape[0] = total;
  Tensor<Scalar> out(shape);
  Index off = 0;
  for (const auto& p : parts) {
    out.array().segment(off, p.size()) = p.array();
    off += p.size();
  }
  return out;
}

}  // namespace mmseg
