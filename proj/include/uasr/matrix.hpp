// Dense row-major double matrix. Storage is a flat std::vector so that
// hashing and binary I/O see a stable byte layout; the inner product work
// is delegated to Eigen via Map (no copies).
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <sstream>
#include <vector>

#include "uasr/errors.hpp"
#include "uasr/rng.hpp"

namespace uasr {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, c); }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

  using EigenMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstEigenMap =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  EigenMap map() { return EigenMap(data_.data(), (Eigen::Index)rows_, (Eigen::Index)cols_); }
  ConstEigenMap map() const {
    return ConstEigenMap(data_.data(), (Eigen::Index)rows_, (Eigen::Index)cols_);
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[" << rows_ << " x " << cols_ << "]";
    return os.str();
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* where) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ " + a.shape_str() + " * " + b.shape_str());
  Matrix c(a.rows(), b.cols());
  c.map().noalias() = a.map() * b.map();
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  t.map() = a.map().transpose();
  return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "add");
  Matrix c = a;
  c.map() += b.map();
  return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "sub");
  Matrix c = a;
  c.map() -= b.map();
  return c;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  c.map() *= s;
  return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "hadamard");
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < c.size(); ++i) c.raw()[i] = a.raw()[i] * b.raw()[i];
  return c;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = std::abs(a.raw()[i] - b.raw()[i]);
    if (d > m) m = d;
  }
  return m;
}

inline double mean_square(const Matrix& a) {
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (double v : a.raw()) s += v * v;
  return s / static_cast<double>(a.size());
}

inline Matrix random_normal(std::size_t r, std::size_t c, Rng& rng, double sigma = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.raw()) v = sigma * rng.normal();
  return m;
}

inline Matrix random_uniform(std::size_t r, std::size_t c, Rng& rng, double lo, double hi) {
  Matrix m(r, c);
  for (auto& v : m.raw()) v = rng.uniform(lo, hi);
  return m;
}

inline std::uint64_t hash_bytes(const Matrix& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(m.data(), m.size() * sizeof(double), h);
}

}  // namespace uasr
