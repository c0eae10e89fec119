#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace eqsep {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Takes ownership of `data`; throws DimensionError unless data.size() ==
  /// rows * cols and FormatError if any entry is not finite.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  bool all_finite() const noexcept;
  Matrix transpose() const;
  /// Rows [begin, begin + count) copied into a new matrix.
  Matrix slice_rows(std::size_t begin, std::size_t count) const;
  /// Rows picked by index, in the given order.
  Matrix gather_rows(std::span<const std::size_t> indices) const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Products. The suffix names which operand is transposed.
Matrix matmul(const Matrix& a, const Matrix& b);     // A B
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // Aᵀ B
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // A Bᵀ
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);

double trace(const Matrix& a);
double frobenius_norm(const Matrix& a);

/// Symmetric eigendecomposition. Eigenvalues are sorted descending; column j
/// of `vectors` is the unit eigenvector for `values[j]`.
struct SymEig {
  std::vector<double> values;
  Matrix vectors;
};

/// Cyclic Jacobi rotations until the off-diagonal Frobenius mass falls below
/// 1e-12 of the matrix norm. Throws DimensionError for non-square or
/// asymmetric (beyond 1e-12 relative) input.
SymEig sym_eig(const Matrix& a);

struct PrincipalComponents {
  Matrix components;               // k x d, orthonormal rows
  std::vector<double> variances;   // descending, sample covariance (n - 1)
  std::vector<double> mean;        // column means that were removed
};

/// Top-k principal directions by power iteration with deflation
/// (tolerance 1e-10, at most 10000 iterations per component).
PrincipalComponents top_k_components(const Matrix& x, std::size_t k);

/// Rows of `x` centered by `pcs.mean` and projected onto `pcs.components`.
Matrix project(const Matrix& x, const PrincipalComponents& pcs);

/// Sample Pearson correlation. Throws DegenerateError if either input is
/// constant and DimensionError on length mismatch or fewer than two points.
double pearson(std::span<const double> xs, std::span<const double> ys);

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
};

/// Ordinary least squares y ≈ slope * x + intercept.
LineFit fit_line(std::span<const double> xs, std::span<const double> ys);

}  // namespace eqsep
