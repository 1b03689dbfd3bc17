#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "adapprox/dense.hpp"
#include "adapprox/rng.hpp"

using namespace adapprox;

namespace {

// naive reference product, i-j-k order
Matrix triple_loop(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

double max_orthogonality_defect(const Matrix& q) {
    const Matrix g = matmul_tn(q, q);
    double worst = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
            worst = std::max(worst, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return worst;
}

double rel_err(const Matrix& a, const Matrix& b) { return frobenius_norm(sub(a, b)) / frobenius_norm(b); }

}  // namespace

TEST_CASE("rng: same seed gives the same stream, different seeds differ") {
    RngStream a(7), b(7), c(8);
    const Matrix x = gaussian_matrix(2, 2, a);
    const Matrix y = gaussian_matrix(2, 2, b);
    const Matrix z = gaussian_matrix(2, 2, c);
    CHECK(x == y);
    CHECK_FALSE(x == z);
}

TEST_CASE("rng: first outputs pinned for seed 0") {
    // splitmix64 reference values for state 0 (published test vector)
    std::uint64_t s = 0;
    CHECK(splitmix64(s) == 0xe220a8397b1dcdafULL);
    CHECK(splitmix64(s) == 0x6e789e6aa1b965f4ULL);
    RngStream r(0);
    const auto first = r.next_u64();
    RngStream again(0);
    CHECK(again.next_u64() == first);
}

TEST_CASE("rng: uniform stays in (0,1), fork and snapshot are reproducible") {
    RngStream r(11);
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform();
        REQUIRE(u > 0.0);
        REQUIRE(u < 1.0);
    }
    RngStream base(3);
    RngStream f1 = base.fork(1), f1b = base.fork(1), f2 = base.fork(2);
    CHECK(f1.next_u64() == f1b.next_u64());
    CHECK(f1.next_u64() != f2.next_u64());

    RngStream s(99);
    s.normal();  // leaves a cached deviate behind
    const auto snap = s.snapshot();
    const double n1 = s.normal();
    const double n2 = s.normal();
    s = RngStream::restore(snap);
    CHECK(s.normal() == n1);
    CHECK(s.normal() == n2);
}

TEST_CASE("gaussian_matrix: 1000x1000 moments") {
    RngStream rng(2024);
    const Matrix g = gaussian_matrix(1000, 1000, rng);
    double mean = 0.0;
    for (double x : g.data()) mean += x;
    mean /= static_cast<double>(g.size());
    double var = 0.0;
    for (double x : g.data()) var += (x - mean) * (x - mean);
    var /= static_cast<double>(g.size() - 1);
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("gaussian_matrix: zero dimension rejected") {
    RngStream rng(1);
    CHECK_THROWS_AS(gaussian_matrix(3, 0, rng), std::invalid_argument);
    CHECK_THROWS_AS(Matrix(0, 2), std::invalid_argument);
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>(3)), std::invalid_argument);
}

TEST_CASE("matmul: small cases") {
    RngStream rng(5);
    const Matrix b = gaussian_matrix(3, 4, rng);
    CHECK(matmul(Matrix::identity(3), b) == b);

    const Matrix x = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix y = Matrix::from_rows({{5}, {6}});
    CHECK(matmul(x, y) == Matrix::from_rows({{17}, {39}}));

    CHECK_THROWS_AS(matmul(x, Matrix(3, 1)), std::invalid_argument);
}

TEST_CASE("matmul variants agree with the triple loop") {
    RngStream rng(6);
    const Matrix a = gaussian_matrix(7, 5, rng);
    const Matrix b = gaussian_matrix(5, 3, rng);
    const Matrix ref = triple_loop(a, b);
    CHECK(max_abs(sub(matmul(a, b), ref)) < 1e-12);
    CHECK(max_abs(sub(matmul_tn(a.transpose(), b), ref)) < 1e-12);
    CHECK(max_abs(sub(matmul_nt(a, b.transpose()), ref)) < 1e-12);

    // odd sizes exercise the unrolled tail in matmul_nt
    const Matrix c = gaussian_matrix(9, 13, rng);
    const Matrix d = gaussian_matrix(11, 13, rng);
    CHECK(max_abs(sub(matmul_nt(c, d), triple_loop(c, d.transpose()))) < 1e-12);
}

TEST_CASE("matmul: associativity on random 20x20 triples") {
    RngStream rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix a = gaussian_matrix(20, 20, rng);
        const Matrix b = gaussian_matrix(20, 20, rng);
        const Matrix c = gaussian_matrix(20, 20, rng);
        const Matrix left = matmul(matmul(a, b), c);
        const Matrix right = matmul(a, matmul(b, c));
        CHECK(rel_err(left, right) < 1e-9);
    }
}

TEST_CASE("householder_qr: identity and single column") {
    const auto id = householder_qr(Matrix::identity(4));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(std::abs(std::abs(id.q(i, j)) - (i == j ? 1.0 : 0.0)) < 1e-14);
            CHECK(std::abs(std::abs(id.r(i, j)) - (i == j ? 1.0 : 0.0)) < 1e-14);
        }

    const auto col = householder_qr(Matrix::from_rows({{3}, {4}}));
    const double sign = col.r(0, 0) > 0 ? 1.0 : -1.0;
    CHECK(std::abs(col.r(0, 0)) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(sign * col.q(0, 0) == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(sign * col.q(1, 0) == doctest::Approx(0.8).epsilon(1e-14));
}

TEST_CASE("householder_qr: orthonormal Q, triangular R, reconstruction") {
    RngStream rng(50);
    const std::pair<std::size_t, std::size_t> shapes[] = {{50, 8}, {8, 8}, {100, 1}, {33, 17}, {256, 64}};
    for (auto [m, n] : shapes) {
        const Matrix a = gaussian_matrix(m, n, rng);
        const auto qr = householder_qr(a);
        REQUIRE(qr.q.rows() == m);
        REQUIRE(qr.q.cols() == n);
        REQUIRE(qr.r.rows() == n);
        CHECK(max_orthogonality_defect(qr.q) < 1e-10);
        CHECK(rel_err(matmul(qr.q, qr.r), a) < 1e-10);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < i; ++j) CHECK(qr.r(i, j) == 0.0);
    }
}

TEST_CASE("householder_qr: rank-deficient input still yields orthonormal columns") {
    RngStream rng(51);
    Matrix a = gaussian_matrix(30, 6, rng);
    for (std::size_t i = 0; i < 30; ++i) {
        a(i, 3) = a(i, 0) + 2.0 * a(i, 1);  // dependent column
        a(i, 5) = 0.0;                      // zero column
    }
    const auto qr = householder_qr(a);
    CHECK(max_orthogonality_defect(qr.q) < 1e-10);
    CHECK(rel_err(matmul(qr.q, qr.r), a) < 1e-10);
}

TEST_CASE("householder_qr: wide input rejected") {
    CHECK_THROWS_AS(householder_qr(Matrix(2, 3)), std::invalid_argument);
}

TEST_CASE("frobenius_norm") {
    CHECK(frobenius_norm(Matrix(3, 3)) == 0.0);
    CHECK(frobenius_norm(Matrix::from_rows({{3, 4}})) == doctest::Approx(5.0).epsilon(1e-15));

    RngStream rng(10);
    const Matrix a = gaussian_matrix(10, 10, rng);
    double s = 0.0;
    for (double x : a.data()) s += x * x;
    CHECK(std::abs(frobenius_norm(a) - std::sqrt(s)) < 1e-12);
    CHECK(std::abs(frobenius_norm(a) * frobenius_norm(a) - sum(square(a))) < 1e-12 * s);

    // scaled accumulation: no overflow / underflow
    CHECK(frobenius_norm(Matrix::from_rows({{3e200, 4e200}})) == doctest::Approx(5e200));
    CHECK(frobenius_norm(Matrix::from_rows({{3e-200, 4e-200}})) == doctest::Approx(5e-200));
}

TEST_CASE("elementwise ops") {
    CHECK(sqrt(Matrix::from_rows({{4, 9}})) == Matrix::from_rows({{2, 3}}));
    CHECK(clamp_min(Matrix::from_rows({{-1, 0.5}}), 0.0) == Matrix::from_rows({{0, 0.5}}));
    CHECK_THROWS_AS(sqrt(Matrix::from_rows({{-1}})), std::domain_error);

    RngStream rng(12);
    Matrix a = gaussian_matrix(4, 5, rng);
    for (double& x : a.data()) x = std::abs(x) + 0.1;
    const Matrix ones = divide(a, a);
    for (double x : ones.data()) CHECK(x == 1.0);

    const Matrix b = gaussian_matrix(4, 5, rng);
    CHECK(max_abs(sub(sub(add(a, b), b), a)) < 1e-14);
    CHECK(hadamard(a, Matrix(4, 5, 2.0)) == scale(a, 2.0));
    CHECK(square(b) == hadamard(b, b));
    CHECK_THROWS_AS(add(a, Matrix(5, 4)), std::invalid_argument);
    CHECK_THROWS_AS(hadamard(a, Matrix(4, 4)), std::invalid_argument);

    // divisor floor: 1 / max(0, 0.5) = 2
    const Matrix q = divide(Matrix(1, 2, 1.0), Matrix::from_rows({{0.0, 4.0}}), 0.5);
    CHECK(q == Matrix::from_rows({{2.0, 0.25}}));

    Matrix y = Matrix::from_rows({{1, 2}});
    axpby(2.0, Matrix::from_rows({{10, 20}}), 0.5, y);
    CHECK(y == Matrix::from_rows({{20.5, 41}}));
}

TEST_CASE("matrix text I/O round trip and errors") {
    RngStream rng(13);
    const Matrix a = gaussian_matrix(3, 4, rng);
    std::stringstream buf;
    write_matrix_text(buf, a);
    const Matrix back = read_matrix_text(buf);
    CHECK(back == a);

    std::istringstream bad("2 2\n1 2\n3\n");
    CHECK_THROWS(read_matrix_text(bad));
    std::istringstream nan_in("1 1\nnan\n");
    CHECK_THROWS(read_matrix_text(nan_in));
    CHECK_THROWS(load_matrix_text("/nonexistent/matrix.txt"));
}
