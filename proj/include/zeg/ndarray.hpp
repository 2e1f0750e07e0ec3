#pragma once

#include <Eigen/Core>

#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace zeg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Thrown when operand extents are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major N-dimensional array. A rank-0 shape holds one element.
template <typename Scalar>
struct NDArray {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Shape shape;
  Vector data;

  NDArray() = default;
  explicit NDArray(Shape s) : shape(std::move(s)), data(Vector::Zero(numel(shape))) {}
  NDArray(Shape s, Vector values) : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size()) {
      throw ShapeError("NDArray: shape " + shape_string(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
  }

  static NDArray filled(Shape s, Scalar value) {
    NDArray out(std::move(s));
    out.data.setConstant(value);
    return out;
  }

  static NDArray of(Shape s, std::initializer_list<Scalar> values) {
    Vector v(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar x : values) v[i++] = x;
    return NDArray(std::move(s), std::move(v));
  }

  template <typename Rng>
  static NDArray normal(Shape s, Rng& rng, double stddev) {
    NDArray out(std::move(s));
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < out.data.size(); ++i) out.data[i] = static_cast<Scalar>(dist(rng));
    return out;
  }

  Index size() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(Index axis) const { return shape.at(static_cast<std::size_t>(axis)); }
  // Default-constructed arrays (no shape, no storage) mark "absent", e.g. an unset gradient.
  bool is_null() const { return shape.empty() && data.size() == 0; }

  Scalar& operator[](Index i) { return data[i]; }
  Scalar operator[](Index i) const { return data[i]; }

  Scalar item() const {
    if (data.size() != 1) throw ShapeError("item(): tensor has " + std::to_string(data.size()) + " elements");
    return data[0];
  }

  /// Views the array as rows x last-extent.
  MatrixMap matrix() & {
    const Index cols = shape.empty() ? 1 : shape.back();
    return MatrixMap(data.data(), cols == 0 ? 0 : data.size() / cols, cols);
  }
  ConstMatrixMap matrix() const& {
    const Index cols = shape.empty() ? 1 : shape.back();
    return ConstMatrixMap(data.data(), cols == 0 ? 0 : data.size() / cols, cols);
  }
  ConstMatrixMap matrix() const&& = delete;

  template <typename Other>
  NDArray<Other> cast() const {
    return NDArray<Other>(shape, data.template cast<Other>());
  }
};

}  // namespace zeg
