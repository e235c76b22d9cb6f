#pragma once

// Dense row-major matrices of doubles and the handful of kernels the model
// needs. Shapes are checked; a mismatch throws dimension_error.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fin/errors.hpp"

namespace fin {

class matrix {
 public:
  matrix() = default;
  matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw dimension_error("matrix data length does not match shape");
  }
  matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw dimension_error("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static matrix identity(std::size_t n) {
    matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static matrix row_vector(std::vector<double> v) {
    const auto n = v.size();
    return matrix(1, n, std::move(v));
  }
  static matrix column_vector(std::vector<double> v) {
    const auto n = v.size();
    return matrix(n, 1, std::move(v));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(0.0); }

  bool same_shape(const matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  matrix& operator+=(const matrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  bool operator==(const matrix&) const = default;

  std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  void require_same_shape(const matrix& o, const char* op) const {
    if (!same_shape(o)) {
      throw dimension_error(std::string(op) + ": shape " + shape_string() + " vs " + o.shape_string());
    }
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace kernel {

// out += a * b
inline void gemm_nn_acc(const matrix& a, const matrix& b, matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data() + i * m;
    const double* ar = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const double* br = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

// out += a * b^T
inline void gemm_nt_acc(const matrix& a, const matrix& b, matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.data() + i * k;
    double* o = out.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* br = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      o[j] += s;
    }
  }
}

// out += a^T * b
inline void gemm_tn_acc(const matrix& a, const matrix& b, matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t p = 0; p < n; ++p) {
    const double* ar = a.data() + p * k;
    const double* br = b.data() + p * m;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* o = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

}  // namespace kernel

inline matrix matmul(const matrix& a, const matrix& b) {
  if (a.cols() != b.rows()) {
    throw dimension_error("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  matrix out(a.rows(), b.cols());
  kernel::gemm_nn_acc(a, b, out);
  return out;
}

inline matrix transpose(const matrix& a) {
  matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename Op>
matrix elementwise(const matrix& a, const matrix& b, const char* name, Op op) {
  a.require_same_shape(b, name);
  matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
  return out;
}

inline matrix add(const matrix& a, const matrix& b) {
  return elementwise(a, b, "add", [](double x, double y) { return x + y; });
}
inline matrix elementwise_sub(const matrix& a, const matrix& b) {
  return elementwise(a, b, "sub", [](double x, double y) { return x - y; });
}
inline matrix elementwise_mul(const matrix& a, const matrix& b) {
  return elementwise(a, b, "mul", [](double x, double y) { return x * y; });
}

inline matrix concat_rows(const matrix& a, const matrix& b) {
  if (a.cols() != b.cols()) throw dimension_error("concat_rows: " + a.shape_string() + " / " + b.shape_string());
  std::vector<double> d(a.values());
  d.insert(d.end(), b.values().begin(), b.values().end());
  return matrix(a.rows() + b.rows(), a.cols(), std::move(d));
}

inline matrix concat_cols(const matrix& a, const matrix& b) {
  if (a.rows() != b.rows()) throw dimension_error("concat_cols: " + a.shape_string() + " | " + b.shape_string());
  matrix out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), out.row(i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

/// Softmax over the unmasked positions (mask value true = keep). Masked
/// positions get exactly 0. Throws degenerate_input_error when nothing is kept.
inline std::vector<double> softmax(std::span<const double> logits, std::span<const std::uint8_t> keep = {}) {
  if (!keep.empty() && keep.size() != logits.size()) throw dimension_error("softmax: mask length mismatch");
  const auto kept = [&](std::size_t i) { return keep.empty() || keep[i] != 0; };
  double peak = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!kept(i)) continue;
    any = true;
    peak = std::max(peak, logits[i]);
  }
  if (!any) throw degenerate_input_error("softmax: every position is masked");
  std::vector<double> out(logits.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!kept(i)) continue;
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

}  // namespace fin
