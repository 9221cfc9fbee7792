#pragma once

// Dense numeric kernels shared by every other module.
//
// All reductions run in a fixed loop order so that results are
// bit-reproducible for a given build. Nothing here spawns threads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "tsae/errors.hpp"

namespace tsae {

/// Dense row-major 2-D array.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(rows_, cols_));
    }
  }

  static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    BasicMatrix m;
    m.rows_ = rows.size();
    m.cols_ = m.rows_ ? rows.begin()->size() : 0;
    m.data_.reserve(m.rows_ * m.cols_);
    for (const auto& r : rows) {
      if (r.size() != m.cols_) throw DimensionError("ragged initializer for matrix");
      m.data_.insert(m.data_.end(), r.begin(), r.end());
    }
    return m;
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(T{0}); }

  template <typename U>
  BasicMatrix<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicMatrix<U>(rows_, cols_, std::move(out));
  }

  bool same_shape(const BasicMatrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  std::string shape() const { return shape_string(rows_, cols_); }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

template <typename T>
void require_same_shape(const BasicMatrix<T>& a, const BasicMatrix<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

// Matrix products. Every output element accumulates over the inner index in
// increasing order; zero entries of the left operand are skipped.

/// a · b
template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b);
/// aᵀ · b
template <typename T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b);
/// a · bᵀ
template <typename T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

// Accumulating variants: out += product.
template <typename T>
void matmul_acc(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out);
template <typename T>
void matmul_tn_acc(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out);

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a);

// Vector helpers (fixed left-to-right summation).
template <typename T>
T dot(std::span<const T> a, std::span<const T> b);
template <typename T>
T norm2(std::span<const T> a);
/// Cosine similarity; 0 when either vector has zero norm.
template <typename T>
T cosine(std::span<const T> a, std::span<const T> b);
template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y);

template <typename T>
bool all_finite(const BasicMatrix<T>& m) {
  for (T v : m.values())
    if (!std::isfinite(v)) return false;
  return true;
}

/// Adam moments for one parameter tensor.
template <typename T>
struct AdamState {
  BasicMatrix<T> m;
  BasicMatrix<T> v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(const BasicMatrix<T>& like)
      : m(like.rows(), like.cols()), v(like.rows(), like.cols()) {}
};

/// One bias-corrected Adam update.
///
/// Entries whose gradient is exactly zero are left untouched (parameter and
/// both moments), so a zero gradient is a no-op whatever the state holds.
/// The step counter advances on every call.
template <typename T>
void adam_step(BasicMatrix<T>& param, const BasicMatrix<T>& grad, AdamState<T>& state, double lr);

/// Cosine-annealed learning rate: lr0 · ½(1 + cos(π·step/total)).
double lr_at(std::size_t step, std::size_t total_steps, double lr0);

}  // namespace tsae
