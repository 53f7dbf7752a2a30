#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ssmrank/error.hpp"

namespace ssmrank {

/// Dense row-major matrix. Sequences are stored as L x D (one row per
/// timestep); parameter vectors are 1 x n.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require(data_.size() == rows_ * cols_, "Matrix: data size does not match shape");
  }
  Matrix(std::initializer_list<std::initializer_list<T>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : init) {
      detail::require(r.size() == cols_, "Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename T>
void require_shape(const Matrix<T>& m, std::size_t r, std::size_t c, const char* what) {
  if (m.rows() != r || m.cols() != c)
    throw ContractError(std::string(what) + ": expected shape " + shape_str(r, c) + ", got " +
                        shape_str(m.rows(), m.cols()));
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.storage().begin(), m.storage().end(),
                     [](T v) { return std::isfinite(v); });
}

/// out = a * b
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ " +
                                            shape_str(a.rows(), a.cols()) + " * " +
                                            shape_str(b.rows(), b.cols()));
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* o = out.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T av = a(i, k);
      if (av == T(0)) continue;
      const T* br = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

/// out = a * b^T
template <typename T>
Matrix<T> matmul_bt(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_bt: inner dimensions differ");
  Matrix<T> out(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ar = a.data() + i * k;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* br = b.data() + j * k;
      T s = T(0);
      for (std::size_t t = 0; t < k; ++t) s += ar[t] * br[t];
      out(i, j) = s;
    }
  }
  return out;
}

/// out = a^T * b
template <typename T>
Matrix<T> matmul_at(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.rows() == b.rows(), "matmul_at: inner dimensions differ");
  Matrix<T> out(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t t = 0; t < a.rows(); ++t) {
    const T* br = b.data() + t * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T av = a(t, i);
      if (av == T(0)) continue;
      T* o = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

/// Normwise relative error max|a-b| / max|reference|; both empty compares as 0.
template <typename T>
double max_relative_error(const Matrix<T>& got, const Matrix<T>& reference) {
  detail::require(got.same_shape(reference), "max_relative_error: shape mismatch");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    diff = std::max(diff, std::abs(double(got[i]) - double(reference[i])));
    scale = std::max(scale, std::abs(double(reference[i])));
  }
  if (diff == 0.0) return 0.0;
  return scale > 0.0 ? diff / scale : diff;
}

}  // namespace ssmrank
