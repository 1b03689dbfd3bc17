#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "adapprox/dense.hpp"
#include "adapprox/rng.hpp"

namespace adapprox {

/// Low-rank factors with approx(A) = q * ut^T.
///
/// q is m x k and ut is n x k (it holds U^T of the row-space factor, stored
/// transposed so that both factors keep the rank as their column count).
struct FactorPair {
    Matrix q;
    Matrix ut;

    std::size_t rank() const { return q.cols(); }
    Matrix reconstruct() const { return matmul_nt(q, ut); }

    static FactorPair zeros(std::size_t m, std::size_t n, std::size_t k) {
        return FactorPair{Matrix(m, k), Matrix(n, k)};
    }

    bool operator==(const FactorPair&) const = default;
};

struct SrsiParams {
    std::size_t rank = 1;         // k
    std::size_t power_iters = 5;  // l
    std::size_t oversample = 5;   // p
};

/// Hyperparameters of the adaptive rank search and its growth function
///     f(xi) = floor(eta / (exp(omega * xi + phi) + tau)).
///
/// The defaults use phi = +2.5, tau = +9, which give the intended sigmoid
/// shape (f rises from 9 at xi -> 0 to 22 at xi = 1). The negated pair is
/// available via with_negated_offsets() and yields negative growth for every
/// xi > 0.
struct RankPolicy {
    std::size_t k_init = 1;
    double k_max_fraction = 0.25;
    double xi_thresh = 0.01;
    std::size_t delta_s = 10;
    double eta = 200.0;
    double omega = -10.0;
    double phi = 2.5;
    double tau = 9.0;
    std::size_t min_growth = 1;

    static RankPolicy with_negated_offsets();

    // max(1, floor(k_max_fraction * min(m, n)))
    std::size_t k_max(std::size_t m, std::size_t n) const;

    // True on the steps where the rank is re-searched: t mod delta_s == 1,
    // or every step when delta_s == 1.
    bool is_adaptation_step(std::uint64_t t) const;

    void validate() const;
};

struct SingularSpectrum {
    std::vector<double> values;  // non-increasing, non-negative

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
    // sqrt(sum_{i >= k} sigma_i^2), i.e. the optimal rank-k Frobenius error.
    double tail_norm(std::size_t k) const;
};

/// Randomized subspace iteration: U ~ N(0,1) of size n x (k+p); l rounds of
/// {Q <- A U; Q <- qr(Q); U <- A^T Q}; returns the leading k columns of Q and U.
FactorPair srsi(const Matrix& a, const SrsiParams& params, RngStream& rng);

/// ||A - Q Ut^T||_F / ||A||_F. A zero A with a zero product gives 0.
double approx_error_rate(const Matrix& a, const FactorPair& f);

/// Unclamped floor(eta / (exp(omega*xi + phi) + tau)). Throws on xi <= 0 or
/// when the denominator is within 1e-12 of zero.
long long rank_growth_raw(double xi, const RankPolicy& policy);

/// max(min_growth, rank_growth_raw(xi)).
std::size_t rank_growth(double xi, const RankPolicy& policy);

struct AsRsiResult {
    FactorPair factors;
    std::size_t rank = 0;
    // Error rate of the returned factors; set only on adaptation steps.
    std::optional<double> xi;
    bool adapted = false;
    // Ranks tried during the adaptation loop, in order.
    std::vector<std::size_t> trace;
};

struct AsRsiOptions {
    std::size_t power_iters = 5;
    std::size_t oversample = 5;
    // Warm-start each growth round from the previous iterate plus fresh
    // Gaussian columns instead of a fresh S-RSI call.
    bool incremental = false;
};

/// Adaptive-rank S-RSI. On adaptation steps the rank restarts at k_init and
/// grows by rank_growth(xi) until xi <= xi_thresh or the rank reaches k_max.
/// Otherwise it keeps k_prev and factors once.
AsRsiResult as_rsi(const Matrix& a, std::size_t k_prev, const RankPolicy& policy,
                   std::uint64_t step, const AsRsiOptions& options, RngStream& rng);

struct SvdResult {
    FactorPair factors;  // optimal rank-k factors: q = U_k, ut = V_k * diag(sigma_k)
    SingularSpectrum spectrum;
};

/// Exact truncated SVD by one-sided (Hestenes) Jacobi, i.e. Jacobi rotations
/// that diagonalize A^T A implicitly. Test oracle; min(m, n) <= 512.
SvdResult truncated_svd_oracle(const Matrix& a, std::size_t k);

SingularSpectrum singular_values(const Matrix& a);
double spectral_norm(const Matrix& a);

/// Row-sum / column-sum rank-1 estimator (A 1)(1^T A) / (1^T A 1).
/// Requires non-negative entries with a positive total.
FactorPair onerank_factor(const Matrix& a);

/// Expected-error bound for randomized range finding with power iteration:
/// [ (1 + sqrt(k/(p-1)))^(2l+1) s_{k+1}^(2l+1)
///   + (e sqrt(k+p)/p) sqrt(sum_{j>k} s_j^(2(2l+1))) ]^(1/(2l+1))
double error_bound(const SingularSpectrum& spectrum, std::size_t k, std::size_t p, std::size_t l);

/// Samples k Gaussian vectors u_i and reports whether the images A u_i are
/// numerically independent (min |R_ii| > 1e-8 max |R_ii|).
bool linear_independence_check(const Matrix& a, std::size_t k, RngStream& rng);

/// Matrix with prescribed singular values: U diag(sigma) V^T with U, V drawn
/// from the QR of Gaussian matrices. sigma.size() must be <= min(m, n).
Matrix matrix_with_spectrum(std::size_t m, std::size_t n, const std::vector<double>& sigma,
                            RngStream& rng);

}  // namespace adapprox
