// SPDX-License-Identifier: Apache-2.0
#include "flylora/linalg.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace flylora {

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

std::vector<double> DenseMatrix::apply(const std::vector<double>& x) const {
    if (x.size() != cols_) {
        throw std::invalid_argument("DenseMatrix::apply: vector length " +
                                    std::to_string(x.size()) + " != cols " +
                                    std::to_string(cols_));
    }
    std::vector<double> y(rows_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i) {
        const double* row = data_.data() + i * cols_;
        double acc = 0.0;
        for (std::size_t j = 0; j < cols_; ++j) {
            acc += row[j] * x[j];
        }
        y[i] = acc;
    }
    return y;
}

std::vector<double> DenseMatrix::apply_transposed(const std::vector<double>& x) const {
    if (x.size() != rows_) {
        throw std::invalid_argument("DenseMatrix::apply_transposed: vector length mismatch");
    }
    std::vector<double> y(cols_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i) {
        const double* row = data_.data() + i * cols_;
        const double xi = x[i];
        for (std::size_t j = 0; j < cols_; ++j) {
            y[j] += row[j] * xi;
        }
    }
    return y;
}

void DenseMatrix::add_scaled(const DenseMatrix& other, double scale) {
    if (!same_shape(other)) {
        throw std::invalid_argument("DenseMatrix::add_scaled: shape mismatch");
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += scale * other.data_[i];
    }
}

void DenseMatrix::scale(double s) {
    for (auto& v : data_) {
        v *= s;
    }
}

double DenseMatrix::frobenius_norm() const {
    double acc = 0.0;
    for (double v : data_) {
        acc += v * v;
    }
    return std::sqrt(acc);
}

RowSparseMatrix::RowSparseMatrix(std::size_t rows, std::size_t cols, std::size_t nnz_per_row)
    : rows_(rows), cols_(cols), nnz_(nnz_per_row),
      indices_(rows * nnz_per_row, 0), values_(rows * nnz_per_row, 0.0) {
    if (nnz_per_row >= cols) {
        throw std::invalid_argument("RowSparseMatrix: nnz_per_row must be < cols");
    }
    if (rows == 0 || cols == 0 || nnz_per_row == 0) {
        throw std::invalid_argument("RowSparseMatrix: empty dimension");
    }
}

bool RowSparseMatrix::structurally_valid() const {
    for (std::size_t i = 0; i < rows_; ++i) {
        const std::uint32_t* idx = row_indices(i);
        const double* val = row_values(i);
        for (std::size_t j = 0; j < nnz_; ++j) {
            if (idx[j] >= cols_) {
                return false;
            }
            if (j > 0 && idx[j] <= idx[j - 1]) {
                return false;
            }
            if (!std::isfinite(val[j])) {
                return false;
            }
        }
    }
    return true;
}

DenseMatrix RowSparseMatrix::densify() const {
    DenseMatrix m(rows_, cols_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i) {
        const std::uint32_t* idx = row_indices(i);
        const double* val = row_values(i);
        for (std::size_t j = 0; j < nnz_; ++j) {
            m(i, idx[j]) = val[j];
        }
    }
    return m;
}

double RowSparseMatrix::row_dot(std::size_t i, const std::vector<double>& x) const {
    const std::uint32_t* idx = row_indices(i);
    const double* val = row_values(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < nnz_; ++j) {
        acc += val[j] * x[idx[j]];
    }
    return acc;
}

double frobenius_inner(const DenseMatrix& x, const DenseMatrix& y) {
    if (!x.same_shape(y)) {
        throw std::invalid_argument("frobenius_inner: shape mismatch");
    }
    double acc = 0.0;
    const double* xd = x.data();
    const double* yd = y.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        acc += xd[i] * yd[i];
    }
    return acc;
}

double spectral_norm(const DenseMatrix& x, std::size_t iters, double tol) {
    if (x.rows() == 0 || x.cols() == 0) {
        throw std::invalid_argument("spectral_norm: empty matrix");
    }
    if (iters < 1) {
        throw std::invalid_argument("spectral_norm: iters must be >= 1");
    }
    const std::size_t n = x.cols();
    // Fixed deterministic start vector; a slight ramp avoids being orthogonal
    // to the top singular direction for highly structured inputs.
    std::vector<double> v(n);
    for (std::size_t j = 0; j < n; ++j) {
        v[j] = 1.0 + 1e-3 * static_cast<double>(j % 17);
    }
    double sigma = 0.0;
    double prev = -1.0;
    for (std::size_t it = 0; it < iters; ++it) {
        std::vector<double> u = x.apply(v);
        double un = std::sqrt(norm2_squared(u));
        if (un == 0.0) {
            return 0.0;
        }
        for (auto& ui : u) {
            ui /= un;
        }
        v = x.apply_transposed(u);
        sigma = std::sqrt(norm2_squared(v));
        if (sigma == 0.0) {
            return 0.0;
        }
        for (auto& vi : v) {
            vi /= sigma;
        }
        if (prev >= 0.0 && std::abs(sigma - prev) <= tol * std::max(1.0, sigma)) {
            break;
        }
        prev = sigma;
    }
    return sigma;
}

std::vector<double> spmv(const RowSparseMatrix& a, const std::vector<double>& x) {
    if (x.size() != a.cols()) {
        throw std::invalid_argument("spmv: vector length " + std::to_string(x.size()) +
                                    " != cols " + std::to_string(a.cols()));
    }
    std::vector<double> y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        y[i] = a.row_dot(i, x);
    }
    return y;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("dot: length mismatch");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double norm2_squared(const std::vector<double>& a) {
    double acc = 0.0;
    for (double v : a) {
        acc += v * v;
    }
    return acc;
}

std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

void write_flymat(std::ostream& out, const DenseMatrix& m) {
    out << "FLYMAT v1 " << m.rows() << ' ' << m.cols() << " dense\n";
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j) {
                out << ' ';
            }
            out << format_real(m(i, j));
        }
        out << '\n';
    }
}

void write_flymat(std::ostream& out, const RowSparseMatrix& m) {
    out << "FLYMAT v1 " << m.rows() << ' ' << m.cols() << ' ' << m.nnz_per_row() << '\n';
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const std::uint32_t* idx = m.row_indices(i);
        const double* val = m.row_values(i);
        for (std::size_t j = 0; j < m.nnz_per_row(); ++j) {
            if (j) {
                out << ' ';
            }
            out << idx[j] << ':' << format_real(val[j]);
        }
        out << '\n';
    }
}

std::string flymat_to_string(const DenseMatrix& m) {
    std::ostringstream os;
    write_flymat(os, m);
    return os.str();
}

std::string flymat_to_string(const RowSparseMatrix& m) {
    std::ostringstream os;
    write_flymat(os, m);
    return os.str();
}

void read_flymat(std::istream& in, DenseMatrix& dense, RowSparseMatrix& sparse, bool& is_sparse) {
    std::string magic, version, mode;
    std::size_t rows = 0, cols = 0;
    if (!(in >> magic >> version >> rows >> cols >> mode)) {
        throw std::runtime_error("read_flymat: malformed header");
    }
    if (magic != "FLYMAT" || version != "v1") {
        throw std::runtime_error("read_flymat: bad magic '" + magic + " " + version + "'");
    }
    if (mode == "dense") {
        is_sparse = false;
        dense = DenseMatrix(rows, cols);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                if (!(in >> dense(i, j))) {
                    throw std::runtime_error("read_flymat: truncated dense payload");
                }
            }
        }
    } else {
        is_sparse = true;
        std::size_t p = 0;
        try {
            p = static_cast<std::size_t>(std::stoull(mode));
        } catch (const std::exception&) {
            throw std::runtime_error("read_flymat: bad mode field '" + mode + "'");
        }
        sparse = RowSparseMatrix(rows, cols, p);
        for (std::size_t i = 0; i < rows; ++i) {
            std::uint32_t* idx = sparse.row_indices(i);
            double* val = sparse.row_values(i);
            for (std::size_t j = 0; j < p; ++j) {
                std::string tok;
                if (!(in >> tok)) {
                    throw std::runtime_error("read_flymat: truncated sparse payload");
                }
                const auto colon = tok.find(':');
                if (colon == std::string::npos) {
                    throw std::runtime_error("read_flymat: expected idx:val, got '" + tok + "'");
                }
                idx[j] = static_cast<std::uint32_t>(std::stoul(tok.substr(0, colon)));
                val[j] = std::stod(tok.substr(colon + 1));
            }
        }
        if (!sparse.structurally_valid()) {
            throw std::runtime_error("read_flymat: sparse payload violates row invariants");
        }
    }
}

DenseMatrix dense_from_flymat(const std::string& text) {
    std::istringstream in(text);
    DenseMatrix d;
    RowSparseMatrix s;
    bool is_sparse = false;
    read_flymat(in, d, s, is_sparse);
    if (is_sparse) {
        throw std::runtime_error("dense_from_flymat: payload is sparse");
    }
    return d;
}

RowSparseMatrix sparse_from_flymat(const std::string& text) {
    std::istringstream in(text);
    DenseMatrix d;
    RowSparseMatrix s;
    bool is_sparse = false;
    read_flymat(in, d, s, is_sparse);
    if (!is_sparse) {
        throw std::runtime_error("sparse_from_flymat: payload is dense");
    }
    return s;
}

}  // namespace flylora
