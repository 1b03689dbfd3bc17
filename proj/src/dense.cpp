#include "adapprox/dense.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace adapprox {

namespace {

void require_positive_dims(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) {
        throw std::invalid_argument("matrix dimensions must be positive, got " +
                                    std::to_string(rows) + "x" + std::to_string(cols));
    }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
    }
}

template <typename Fn>
Matrix map(const Matrix& a, Fn fn) {
    Matrix out(a.rows(), a.cols());
    auto src = a.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = fn(src[i]);
    return out;
}

template <typename Fn>
Matrix zip(const Matrix& a, const Matrix& b, const char* op, Fn fn) {
    require_same_shape(a, b, op);
    Matrix out(a.rows(), a.cols());
    auto x = a.data();
    auto y = b.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) dst[i] = fn(x[i], y[i]);
    return out;
}

// Applies I - 2 v v^T to x, where v is unit-norm and both start at offset.
void reflect(std::span<const double> v, std::span<double> x) {
    double proj = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) proj += v[i] * x[i];
    proj *= 2.0;
    for (std::size_t i = 0; i < v.size(); ++i) x[i] -= proj * v[i];
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols) {
    require_positive_dims(rows, cols);
    data_.assign(rows * cols, fill);
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require_positive_dims(rows, cols);
    if (data_.size() != rows * cols) {
        throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                    " does not match " + std::to_string(rows) + "x" +
                                    std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
        if (r.size() != n) throw std::invalid_argument("from_rows: ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Matrix(m, n, std::move(data));
}

Matrix Matrix::transpose() const {
    Matrix out(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) out(j, i) = (*this)(i, j);
    return out;
}

Matrix Matrix::leading_columns(std::size_t k) const {
    if (k == 0 || k > cols_) {
        throw std::invalid_argument("leading_columns: k=" + std::to_string(k) +
                                    " out of range for " + std::to_string(cols_) + " columns");
    }
    Matrix out(rows_, k);
    for (std::size_t i = 0; i < rows_; ++i) {
        auto src = row(i);
        std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(k), out.row(i).begin());
    }
    return out;
}

Matrix Matrix::column(std::size_t j) const {
    if (j >= cols_) throw std::invalid_argument("column index out of range");
    Matrix out(rows_, 1);
    for (std::size_t i = 0; i < rows_; ++i) out(i, 0) = (*this)(i, j);
    return out;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, RngStream& rng) {
    Matrix out(rows, cols);
    for (double& x : out.data()) x = rng.normal();
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ (" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                    ")");
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto dst = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto src = b.row(k);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += aik * src[j];
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw std::invalid_argument("matmul_tn: row counts differ (" + std::to_string(a.rows()) +
                                    " vs " + std::to_string(b.rows()) + ")");
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto arow = a.row(k);
        auto brow = b.row(k);
        for (std::size_t i = 0; i < arow.size(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            auto dst = out.row(i);
            for (std::size_t j = 0; j < brow.size(); ++j) dst[j] += aki * brow[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("matmul_nt: column counts differ (" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.cols()) +
                                    ")");
    }
    Matrix out(a.rows(), b.rows());
    const std::size_t n = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i).data();
        std::size_t j = 0;
        // four rows of b at a time: independent accumulation chains
        for (; j + 4 <= b.rows(); j += 4) {
            const double* b0 = b.row(j).data();
            const double* b1 = b.row(j + 1).data();
            const double* b2 = b.row(j + 2).data();
            const double* b3 = b.row(j + 3).data();
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const double x = ar[k];
                s0 += x * b0[k];
                s1 += x * b1[k];
                s2 += x * b2[k];
                s3 += x * b3[k];
            }
            out(i, j) = s0;
            out(i, j + 1) = s1;
            out(i, j + 2) = s2;
            out(i, j + 3) = s3;
        }
        for (; j < b.rows(); ++j) {
            const double* br = b.row(j).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += ar[k] * br[k];
            out(i, j) = acc;
        }
    }
    return out;
}

double frobenius_norm(const Matrix& a) {
    // Scaled accumulation so tiny or huge entries neither underflow nor overflow.
    const double amax = max_abs(a);
    if (amax == 0.0 || !std::isfinite(amax)) return amax;
    double acc = 0.0;
    for (double x : a.data()) {
        const double y = x / amax;
        acc += y * y;
    }
    return amax * std::sqrt(acc);
}

double sum(const Matrix& a) {
    double acc = 0.0;
    for (double x : a.data()) acc += x;
    return acc;
}

double dot(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "dot");
    auto x = a.data();
    auto y = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
    return acc;
}

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double x : a.data()) m = std::max(m, std::abs(x));
    return m;
}

Matrix add(const Matrix& a, const Matrix& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Matrix sub(const Matrix& a, const Matrix& b) {
    return zip(a, b, "sub", [](double x, double y) { return x - y; });
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}

Matrix divide(const Matrix& a, const Matrix& b, double floor) {
    if (floor < 0.0) throw std::invalid_argument("divide: floor must be non-negative");
    return zip(a, b, "divide", [floor](double x, double y) {
        if (std::abs(y) < floor) y = std::signbit(y) ? -floor : floor;
        if (y == 0.0) throw std::domain_error("divide: zero divisor with no floor");
        return x / y;
    });
}

Matrix sqrt(const Matrix& a) {
    return map(a, [](double x) {
        if (x < 0.0) throw std::domain_error("sqrt: negative entry");
        return std::sqrt(x);
    });
}

Matrix square(const Matrix& a) {
    return map(a, [](double x) { return x * x; });
}

Matrix scale(const Matrix& a, double s) {
    return map(a, [s](double x) { return s * x; });
}

Matrix clamp_min(const Matrix& a, double c) {
    return map(a, [c](double x) { return std::max(x, c); });
}

void axpby(double alpha, const Matrix& x, double beta, Matrix& y) {
    require_same_shape(x, y, "axpby");
    auto src = x.data();
    auto dst = y.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = alpha * src[i] + beta * dst[i];
}

QrResult householder_qr(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    if (m < n) {
        throw std::invalid_argument("householder_qr: rows (" + std::to_string(m) +
                                    ") < cols (" + std::to_string(n) + ")");
    }

    // Columns of A are rows of work, so every reflector touches contiguous memory.
    Matrix work = a.transpose();
    std::vector<std::vector<double>> reflectors(n);
    Matrix r(n, n);

    for (std::size_t j = 0; j < n; ++j) {
        auto col = work.row(j).subspan(j);
        double norm = 0.0;
        {
            double amax = 0.0;
            for (double x : col) amax = std::max(amax, std::abs(x));
            if (amax > 0.0) {
                double acc = 0.0;
                for (double x : col) acc += (x / amax) * (x / amax);
                norm = amax * std::sqrt(acc);
            }
        }
        auto& v = reflectors[j];
        if (norm > 0.0) {
            const double alpha = -std::copysign(norm, col[0]);
            v.assign(col.begin(), col.end());
            v[0] -= alpha;
            double vnorm = 0.0;
            for (double x : v) vnorm += x * x;
            vnorm = std::sqrt(vnorm);
            for (double& x : v) x /= vnorm;
            for (std::size_t c = j; c < n; ++c) reflect(v, work.row(c).subspan(j));
        }
        for (std::size_t c = j; c < n; ++c) r(j, c) = work(c, j);
    }

    // Q = H_0 H_1 ... H_{n-1} [I_n; 0], built column by column (rows of qt).
    Matrix qt(n, m);
    for (std::size_t j = 0; j < n; ++j) qt(j, j) = 1.0;
    for (std::size_t j = n; j-- > 0;) {
        const auto& v = reflectors[j];
        if (v.empty()) continue;
        for (std::size_t c = 0; c < n; ++c) reflect(v, qt.row(c).subspan(j));
    }
    return QrResult{qt.transpose(), std::move(r)};
}

Matrix read_matrix_text(std::istream& in) {
    long long rows = 0;
    long long cols = 0;
    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error("matrix text: missing header line");
    {
        std::istringstream hs(header);
        if (!(hs >> rows >> cols) || rows <= 0 || cols <= 0) {
            throw std::runtime_error("matrix text: header must be 'rows cols' with positive counts");
        }
    }
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(rows * cols));
    for (long long i = 0; i < rows; ++i) {
        std::string line;
        if (!std::getline(in, line)) {
            throw std::runtime_error("matrix text: expected " + std::to_string(rows) +
                                     " rows, got " + std::to_string(i));
        }
        std::istringstream ls(line);
        double x = 0.0;
        long long count = 0;
        while (ls >> x) {
            data.push_back(x);
            ++count;
        }
        if (!ls.eof() || count != cols) {
            throw std::runtime_error("matrix text: row " + std::to_string(i + 1) + " has " +
                                     std::to_string(count) + " values, expected " +
                                     std::to_string(cols));
        }
    }
    Matrix out(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols), std::move(data));
    if (!out.all_finite()) throw std::runtime_error("matrix text: non-finite entry");
    return out;
}

Matrix load_matrix_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open matrix file '" + path + "'");
    return read_matrix_text(in);
}

void write_matrix_text(std::ostream& out, const Matrix& a) {
    const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
    out << a.rows() << ' ' << a.cols() << '\n';
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            if (j) out << ' ';
            out << a(i, j);
        }
        out << '\n';
    }
    out.precision(old_precision);
}

}  // namespace adapprox
