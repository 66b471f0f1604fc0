#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "recurlens/error.hpp"

namespace recurlens {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Invariants: `numel(shape) == data.size()`; the gradient, when present, has
/// the same length as the data.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("shape " + shape_str(shape_) + " holds " +
                           std::to_string(shape_numel(shape_)) + " elements, got " +
                           std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  /// Builds a 2-D tensor from nested rows; all rows must share a length.
  static Tensor matrix(const std::vector<std::vector<double>>& rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.front().size() : 0;
    std::vector<double> flat;
    flat.reserve(m * n);
    for (const auto& row : rows) {
      if (row.size() != n) throw DimensionError("ragged rows in matrix literal");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    return Tensor(Shape{m, n}, std::move(flat));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : shape_.at(0); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

  std::span<const double> row(std::size_t i) const {
    const std::size_t n = cols();
    return std::span<const double>(data_).subspan(i * n, n);
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  const std::optional<std::vector<double>>& grad() const noexcept { return grad_; }
  std::vector<double>& ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    return *grad_;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }
  void clear_grad() { grad_.reset(); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

/// Raw row-major kernels shared by the graph ops and the lens readouts. Each
/// output row depends only on the matching input row, so decoding a single row
/// reproduces the full-batch result bit for bit.
namespace kernels {

// c[m×n] = a[m×k] · b[k×n]
inline void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// da[m×k] += g[m×n] · bᵀ
inline void matmul_grad_a(const double* g, const double* b, double* da, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    double* dai = da + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
      dai[p] += acc;
    }
  }
}

// db[k×n] += aᵀ · g[m×n]
inline void matmul_grad_b(const double* a, const double* g, double* db, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* dbp = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbp[j] += av * gi[j];
    }
  }
}

/// Writes v / sqrt(mean(v²) + eps) ⊙ gain for each of `rows` vectors of width d
/// and stores the per-row inverse RMS in `inv_rms` when non-null.
inline void rmsnorm(const double* x, const double* gain, double* y, std::size_t rows,
                    std::size_t d, double eps, double* inv_rms = nullptr) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = x + i * d;
    double ss = 0.0;
#pragma omp simd reduction(+ : ss)
    for (std::size_t j = 0; j < d; ++j) ss += xi[j] * xi[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    if (inv_rms) inv_rms[i] = inv;
    double* yi = y + i * d;
    for (std::size_t j = 0; j < d; ++j) yi[j] = xi[j] * inv * gain[j];
  }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
  return cdf + x * pdf;
}

}  // namespace kernels

}  // namespace recurlens
