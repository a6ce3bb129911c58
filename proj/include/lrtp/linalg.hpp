#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "lrtp/error.hpp"

namespace lrtp {

// Row-major double-precision matrix. Entries are expected to be finite;
// routines that care (SVD) check it explicitly.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

  static DenseMatrix identity(std::size_t n);
  static DenseMatrix diagonal(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  DenseMatrix transpose() const;
  // Half-open column range [begin, end).
  DenseMatrix columns(std::size_t begin, std::size_t end) const;
  // Half-open row range [begin, end).
  DenseMatrix row_range(std::size_t begin, std::size_t end) const;

  bool all_finite() const;

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

DenseMatrix hconcat(std::span<const DenseMatrix> parts);
DenseMatrix vconcat(std::span<const DenseMatrix> parts);

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
std::vector<DenseMatrix> batched_matmul(std::span<const std::pair<DenseMatrix, DenseMatrix>> batch);

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix subtract(const DenseMatrix& a, const DenseMatrix& b);

double frobenius_norm(const DenseMatrix& m);
double squared_frobenius_norm(const DenseMatrix& m);
// ||a - b||_F / max(||b||_F, tiny); shapes must agree.
double relative_frobenius_diff(const DenseMatrix& a, const DenseMatrix& b);
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);

struct SvdResult {
  DenseMatrix left;                     // rows x r, orthonormal columns
  std::vector<double> singular_values;  // r values, non-increasing
  DenseMatrix right_t;                  // r x cols, orthonormal rows
};

// Thin SVD by one-sided Jacobi rotations; r = min(rows, cols).
SvdResult thin_svd(const DenseMatrix& w);

struct TruncatedSVDResult {
  DenseMatrix left_factor;   // rows x k, columns carry sqrt(sigma_i)
  DenseMatrix right_factor;  // k x cols, rows carry sqrt(sigma_i)
  std::vector<double> retained_singular_values;
  double discarded_energy = 0.0;
};

TruncatedSVDResult truncated_svd(const DenseMatrix& w, std::size_t k);

// Deterministic generator used for synthetic weights and property tests.
// Normal variates come from Box-Muller over 53-bit uniforms, so streams are
// identical across standard libraries for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double normal();
  std::size_t uniform_index(std::size_t n);  // [0, n)

  DenseMatrix normal_matrix(std::size_t rows, std::size_t cols, double scale = 1.0);

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lrtp
