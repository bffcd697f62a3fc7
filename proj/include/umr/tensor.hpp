#pragma once

#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "umr/errors.hpp"

namespace umr {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Immutable dense row-major array of doubles. Copies share storage.
///
/// A rank-0 shape (`{}`) is a scalar holding one value. Extents must be
/// positive except for the leading extent of an empty matrix (0 rows), which
/// is allowed so empty batches and indexes can be represented.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(data))) {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0 && i != 0) throw DimensionError("zero extent in shape " + shape_str(shape_));
    }
    if (numel(shape_) != data_->size()) {
      throw DimensionError("shape " + shape_str(shape_) + " holds " + std::to_string(numel(shape_)) +
                           " values but " + std::to_string(data_->size()) + " were given");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor zeros(Shape shape) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor filled(Shape shape, double v) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor(Shape{rows, cols}, std::move(data));
  }
  static Tensor vector(std::vector<double> data) {
    const auto n = data.size();
    return Tensor(Shape{n}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_->size(); }
  std::span<const double> data() const noexcept { return *data_; }
  const std::vector<double>& values() const noexcept { return *data_; }

  std::size_t rows() const {
    if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_str(shape_));
    return shape_[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_str(shape_));
    return shape_[1];
  }

  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * shape_[1] + c]; }
  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  std::span<const double> row(std::size_t r) const {
    const auto c = cols();
    return data().subspan(r * c, c);
  }

  /// Bitwise equality of shape and contents.
  bool identical(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (size() == 0 || std::memcmp(data_->data(), other.data_->data(), size() * sizeof(double)) == 0);
  }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

}  // namespace umr
