// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace flylora {

// Row-major dense matrix of 64-bit reals.
class DenseMatrix {
  public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static DenseMatrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool same_shape(const DenseMatrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    // y = M x
    std::vector<double> apply(const std::vector<double>& x) const;
    // y = M^T x
    std::vector<double> apply_transposed(const std::vector<double>& x) const;

    void add_scaled(const DenseMatrix& other, double scale);
    void scale(double s);

    double frobenius_norm() const;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Sparse matrix with a fixed number of stored entries per row. Row i keeps
// exactly nnz_per_row column indices, strictly increasing, each with a value.
class RowSparseMatrix {
  public:
    RowSparseMatrix() = default;
    RowSparseMatrix(std::size_t rows, std::size_t cols, std::size_t nnz_per_row);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t nnz_per_row() const { return nnz_; }

    std::uint32_t* row_indices(std::size_t i) { return indices_.data() + i * nnz_; }
    const std::uint32_t* row_indices(std::size_t i) const { return indices_.data() + i * nnz_; }
    double* row_values(std::size_t i) { return values_.data() + i * nnz_; }
    const double* row_values(std::size_t i) const { return values_.data() + i * nnz_; }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    const std::vector<std::uint32_t>& indices() const { return indices_; }

    // Checks the exactly-p / strictly-increasing / finite invariants.
    bool structurally_valid() const;

    DenseMatrix densify() const;

    // Dot product of stored row i with a dense vector (the a_i x of the
    // forward pass).
    double row_dot(std::size_t i, const std::vector<double>& x) const;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::size_t nnz_ = 0;
    std::vector<std::uint32_t> indices_;
    std::vector<double> values_;
};

// Sum over entries of X_ij * Y_ij. Throws on shape mismatch.
double frobenius_inner(const DenseMatrix& x, const DenseMatrix& y);

// Largest singular value estimate via power iteration on X^T X. Stops when the
// relative change between iterates drops below tol or iters is exhausted. The
// estimate never exceeds the Frobenius norm.
double spectral_norm(const DenseMatrix& x, std::size_t iters = 200, double tol = 1e-12);

// y = A x with cost proportional to rows * nnz_per_row.
std::vector<double> spmv(const RowSparseMatrix& a, const std::vector<double>& x);

// Vector helpers shared across modules.
double dot(const std::vector<double>& a, const std::vector<double>& b);
double norm2_squared(const std::vector<double>& a);

// FLYMAT v1 text serialization. The header line is
//   FLYMAT v1 <rows> <cols> <p|dense>
// followed by one line per row: whitespace-separated reals for dense, idx:val
// pairs for sparse. Values use 17 significant digits so a round-trip is
// bit-exact.
void write_flymat(std::ostream& out, const DenseMatrix& m);
void write_flymat(std::ostream& out, const RowSparseMatrix& m);
std::string flymat_to_string(const DenseMatrix& m);
std::string flymat_to_string(const RowSparseMatrix& m);

// Reads either form; exactly one of the outputs is filled, flagged by
// is_sparse. Throws std::runtime_error on malformed input.
void read_flymat(std::istream& in, DenseMatrix& dense, RowSparseMatrix& sparse, bool& is_sparse);
DenseMatrix dense_from_flymat(const std::string& text);
RowSparseMatrix sparse_from_flymat(const std::string& text);

// Deterministic decimal formatting used by every report writer (17
// significant digits, shortest form).
std::string format_real(double v);

}  // namespace flylora
