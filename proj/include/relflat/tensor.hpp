#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace relflat {

// Shape of a tensor of rank 0 (scalar), 1 (vector) or 2 (row-major matrix).
struct Shape {
  std::size_t rank = 0;
  std::array<std::size_t, 2> dims{1, 1};

  static Shape scalar() { return {}; }
  static Shape vector(std::size_t n) { return {1, {n, 1}}; }
  static Shape matrix(std::size_t rows, std::size_t cols) { return {2, {rows, cols}}; }

  std::size_t numel() const;
  std::size_t rows() const { return rank == 2 ? dims[0] : (rank == 1 ? dims[0] : 1); }
  std::size_t cols() const { return rank == 2 ? dims[1] : 1; }

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank != b.rank) return false;
    for (std::size_t i = 0; i < a.rank; ++i)
      if (a.dims[i] != b.dims[i]) return false;
    return true;
  }
};

std::string to_string(const Shape& shape);

// Dense array of doubles. Every entry is finite; operations that would
// produce NaN or Inf throw NumericError instead.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros(Shape shape) { return Tensor(shape, 0.0); }
  static Tensor ones(Shape shape) { return Tensor(shape, 1.0); }
  // Matrix with a single 1 at (row, col).
  static Tensor basis(Shape shape, std::size_t flat_index);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank; }
  std::size_t numel() const { return data_.size(); }
  std::size_t rows() const { return shape_.rows(); }
  std::size_t cols() const { return shape_.cols(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols() + c]; }

  // Value of a single-element tensor.
  double item() const;
  bool all_finite() const;

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Throws NumericError naming `origin` when any entry is NaN or Inf.
void require_finite(const Tensor& t, const char* origin);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a + factor * b
Tensor axpy(const Tensor& a, double factor, const Tensor& b);
double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double frobenius_norm_sq(const Tensor& a);
double max_abs(const Tensor& a);

}  // namespace relflat
