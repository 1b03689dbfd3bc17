#pragma once

#include <cstddef>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "adapprox/rng.hpp"

namespace adapprox {

/// Row-major dense matrix of doubles. Both dimensions are always >= 1.
class Matrix {
public:
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    Matrix transpose() const;
    // Columns [0, k).
    Matrix leading_columns(std::size_t k) const;
    Matrix column(std::size_t j) const;

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool all_finite() const;

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<double> data_;
};

// Entries i.i.d. N(0, 1) drawn from rng in row-major order.
Matrix gaussian_matrix(std::size_t rows, std::size_t cols, RngStream& rng);

Matrix matmul(const Matrix& a, const Matrix& b);
// a^T b without forming the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a b^T without forming the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);
double sum(const Matrix& a);
double dot(const Matrix& a, const Matrix& b);  // sum of a .* b
double max_abs(const Matrix& a);

// Elementwise kernels. Binary ops require equal shapes.
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
// a / b, where any divisor with |b| < floor is replaced by +-floor (sign of b,
// positive for zero). With floor == 0 a zero divisor throws.
Matrix divide(const Matrix& a, const Matrix& b, double floor = 0.0);
Matrix sqrt(const Matrix& a);  // entries must be >= 0
Matrix square(const Matrix& a);
Matrix scale(const Matrix& a, double s);
Matrix clamp_min(const Matrix& a, double c);

// y <- alpha * x + beta * y
void axpby(double alpha, const Matrix& x, double beta, Matrix& y);

struct QrResult {
    Matrix q;  // m x n, orthonormal columns
    Matrix r;  // n x n, upper triangular
};

// Thin Householder QR. Requires rows >= cols. Rank-deficient input still
// yields orthonormal Q (the reflector for a zero column is the identity).
QrResult householder_qr(const Matrix& a);

// Text fixture format: "rows cols" then one line of values per row.
Matrix read_matrix_text(std::istream& in);
Matrix load_matrix_text(const std::string& path);
void write_matrix_text(std::ostream& out, const Matrix& a);

}  // namespace adapprox
