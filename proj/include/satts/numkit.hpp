#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "satts/common.hpp"

namespace satts {

// ---------------------------------------------------------------------------
// Matrix: dense row-major doubles. Deliberately small; everything the rest of
// the project needs and nothing more.
// ---------------------------------------------------------------------------

class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0);

  static Matrix identity(int n);
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int i, int j) { return data_[static_cast<size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[static_cast<size_t>(i) * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double* row(int i) { return data_.data() + static_cast<size_t>(i) * cols_; }
  const double* row(int i) const { return data_.data() + static_cast<size_t>(i) * cols_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

namespace numkit {

// ----- basic ops -----------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
/// a += s * b (shapes must match).
void axpy(Matrix& a, double s, const Matrix& b);
double frobenius_norm(const Matrix& a);
/// Column means of a (length cols).
std::vector<double> col_mean(const Matrix& a);
/// Subtracts mu from every row of a.
Matrix center_rows(const Matrix& a, const std::vector<double>& mu);

struct MeanCov {
  std::vector<double> mean;
  Matrix cov;
};

/// Column mean and population covariance (1/N) Xc^T Xc of row-sample matrix x.
MeanCov covariance(const Matrix& x);

// ----- symmetric eigendecomposition ----------------------------------------

struct EigResult {
  std::vector<double> values;  // descending
  Matrix vectors;              // columns, matching order
};

/// Cyclic Jacobi for symmetric input. Eigenvalues are sorted descending. The
/// default treats the input as PSD: round-off-scale negatives are clamped to
/// zero and anything more negative is a numeric error (a non-PSD input bug).
/// Pass clamp_negative = false for genuinely indefinite matrices.
EigResult sym_eig(const Matrix& s, bool clamp_negative = true);

// ----- column-pivoted QR ---------------------------------------------------

struct QrPivotResult {
  std::vector<int> pivots;  // column order chosen, greedily by residual norm
  int rank = 0;             // columns consumed before residual exhaustion
};

/// Modified Gram-Schmidt with column pivoting. Only the pivot order matters
/// to callers, so Q and R are not returned. When every remaining column's
/// residual norm falls below eps_rank * (initial max norm), the leftovers are
/// appended in ascending index order.
QrPivotResult qr_pivot(const Matrix& a);

// ----- Gaussian density ----------------------------------------------------

struct GaussianParams {
  std::vector<double> mean;
  Matrix cov;       // regularized covariance actually factorized
  Matrix chol;      // its lower-triangular Cholesky factor
  double log_det = 0.0;
  int dim = 0;
};

/// Fits the density parameters from mean + covariance. A ridge of
/// max(eps_scale * trace/d, 1e-12) is added before factorization whenever
/// eps_scale > 0; eps_scale = 0 factorizes the covariance exactly as given
/// (used by closed-form tests) and raises a numeric error if it is not
/// positive definite.
GaussianParams make_gaussian(const std::vector<double>& mean, const Matrix& cov,
                             double eps_scale = 1e-6);

double gauss_logpdf(const double* z, const GaussianParams& g);
double gauss_logpdf(const std::vector<double>& z, const GaussianParams& g);

}  // namespace numkit
}  // namespace satts
