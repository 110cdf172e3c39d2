#include "relflat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "relflat/errors.hpp"

namespace relflat {

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank; ++i) n *= dims[i];
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.rank; ++i) {
    if (i) os << 'x';
    os << shape.dims[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {
  if (shape.rank > 2) throw RankError("tensor rank " + std::to_string(shape.rank) + " exceeds 2");
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (shape.rank > 2) throw RankError("tensor rank " + std::to_string(shape.rank) + " exceeds 2");
  if (data_.size() != shape.numel())
    throw DimensionError("tensor " + to_string(shape) + " needs " + std::to_string(shape.numel()) +
                         " values, got " + std::to_string(data_.size()));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape::scalar(), std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor(Shape::vector(n), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape::matrix(rows, cols), std::move(values));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return matrix(r, c, std::move(values));
}

Tensor Tensor::basis(Shape shape, std::size_t flat_index) {
  Tensor t(shape, 0.0);
  if (flat_index >= t.numel())
    throw RangeError("basis index " + std::to_string(flat_index) + " outside " + to_string(shape));
  t.data_[flat_index] = 1.0;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw RankError("item() on tensor " + to_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  // v - v is 0 for finite v and NaN for NaN or +-Inf; the branch-free sum
  // vectorizes, unlike an early-exit scan.
  double acc = 0.0;
  for (double v : data_) acc += v - v;
  return acc == 0.0;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.numel() != numel())
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  return Tensor(shape, data_);
}

void require_finite(const Tensor& t, const char* origin) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + origin);
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw RankError(std::string(op) + " needs a matrix, got " + to_string(a.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t p = a.rows(), q = a.cols(), r = b.cols();
  if (b.rows() != q)
    throw DimensionError("matmul: inner dimensions disagree " + to_string(a.shape()) + " * " +
                         to_string(b.shape()));
  Tensor out(Shape::matrix(p, r));
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < p; ++i) {
    double* crow = C + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = A[i * q + k];
      if (aik == 0.0) continue;
      const double* brow = B + k * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) return a;
  Tensor out(Shape::matrix(a.cols(), a.rows()));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return axpy(a, 1.0, b); }

Tensor sub(const Tensor& a, const Tensor& b) { return axpy(a, -1.0, b); }

Tensor axpy(const Tensor& a, double factor, const Tensor& b) {
  require_same_shape(a, b, "axpy");
  Tensor out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += factor * bd[i];
  require_finite(out, "axpy");
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  require_finite(out, "hadamard");
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = a;
  for (double& v : out.data()) v *= factor;
  require_finite(out, "scale");
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
  return s;
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double frobenius_norm_sq(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace relflat
