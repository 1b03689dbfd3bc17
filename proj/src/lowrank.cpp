#include "adapprox/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

namespace adapprox {

namespace {

struct SubspaceIterate {
    Matrix q;  // m x (k+p), orthonormal columns
    Matrix u;  // n x (k+p), A^T q
};

SubspaceIterate subspace_iteration(const Matrix& a, Matrix u, std::size_t power_iters) {
    Matrix q = householder_qr(matmul(a, u)).q;
    u = matmul_tn(a, q);
    for (std::size_t i = 1; i < power_iters; ++i) {
        q = householder_qr(matmul(a, u)).q;
        u = matmul_tn(a, q);
    }
    return SubspaceIterate{std::move(q), std::move(u)};
}

void check_srsi_args(const Matrix& a, const SrsiParams& params) {
    const std::size_t min_dim = std::min(a.rows(), a.cols());
    if (params.rank < 1) throw std::invalid_argument("srsi: rank must be >= 1");
    if (params.power_iters < 1) throw std::invalid_argument("srsi: power_iters must be >= 1");
    if (params.rank + params.oversample > min_dim) {
        throw std::invalid_argument("srsi: k + p = " +
                                    std::to_string(params.rank + params.oversample) +
                                    " exceeds min(m, n) = " + std::to_string(min_dim));
    }
    if (!a.all_finite()) throw std::invalid_argument("srsi: input has non-finite entries");
}

FactorPair truncate(const SubspaceIterate& it, std::size_t k) {
    return FactorPair{it.q.leading_columns(k), it.u.leading_columns(k)};
}

// Appends fresh Gaussian columns to the leading columns of a previous
// iterate so the result has `width` columns.
Matrix extend_sample(const Matrix& previous_u, std::size_t width, RngStream& rng) {
    const std::size_t keep = std::min(previous_u.cols(), width);
    Matrix u(previous_u.rows(), width);
    for (std::size_t i = 0; i < u.rows(); ++i)
        for (std::size_t j = 0; j < keep; ++j) u(i, j) = previous_u(i, j);
    for (std::size_t i = 0; i < u.rows(); ++i)
        for (std::size_t j = keep; j < width; ++j) u(i, j) = rng.normal();
    return u;
}

double column_norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

}  // namespace

RankPolicy RankPolicy::with_negated_offsets() {
    RankPolicy p;
    p.phi = -2.5;
    p.tau = -9.0;
    return p;
}

std::size_t RankPolicy::k_max(std::size_t m, std::size_t n) const {
    const double raw = std::floor(k_max_fraction * static_cast<double>(std::min(m, n)));
    return std::max<std::size_t>(1, static_cast<std::size_t>(raw));
}

bool RankPolicy::is_adaptation_step(std::uint64_t t) const {
    return delta_s == 1 || t % delta_s == 1;
}

void RankPolicy::validate() const {
    if (k_init < 1) throw std::invalid_argument("rank policy: k_init must be >= 1");
    if (!(k_max_fraction > 0.0 && k_max_fraction <= 1.0))
        throw std::invalid_argument("rank policy: k_max_fraction must lie in (0, 1]");
    if (!(xi_thresh > 0.0)) throw std::invalid_argument("rank policy: xi_thresh must be > 0");
    if (delta_s < 1) throw std::invalid_argument("rank policy: delta_s must be >= 1");
    if (!(eta > 0.0)) throw std::invalid_argument("rank policy: eta must be > 0");
    if (!(omega < 0.0)) throw std::invalid_argument("rank policy: omega must be < 0");
    if (min_growth < 1) throw std::invalid_argument("rank policy: min_growth must be >= 1");
}

double SingularSpectrum::tail_norm(std::size_t k) const {
    double acc = 0.0;
    for (std::size_t i = k; i < values.size(); ++i) acc += values[i] * values[i];
    return std::sqrt(acc);
}

FactorPair srsi(const Matrix& a, const SrsiParams& params, RngStream& rng) {
    check_srsi_args(a, params);
    Matrix u = gaussian_matrix(a.cols(), params.rank + params.oversample, rng);
    return truncate(subspace_iteration(a, std::move(u), params.power_iters), params.rank);
}

double approx_error_rate(const Matrix& a, const FactorPair& f) {
    if (f.q.rows() != a.rows() || f.ut.rows() != a.cols() || f.q.cols() != f.ut.cols()) {
        throw std::invalid_argument("approx_error_rate: factor shapes do not match the matrix");
    }
    const Matrix approx = f.reconstruct();
    const double denom = frobenius_norm(a);
    const double num = frobenius_norm(sub(a, approx));
    if (denom == 0.0) {
        if (frobenius_norm(approx) == 0.0) return 0.0;
        throw std::domain_error("approx_error_rate: zero matrix with a nonzero approximation");
    }
    return num / denom;
}

long long rank_growth_raw(double xi, const RankPolicy& policy) {
    if (!(xi > 0.0)) throw std::domain_error("rank_growth: xi must be > 0");
    const double denom = std::exp(policy.omega * xi + policy.phi) + policy.tau;
    if (std::abs(denom) < 1e-12) {
        throw std::domain_error("rank_growth: denominator vanishes at xi = " + std::to_string(xi));
    }
    return static_cast<long long>(std::floor(policy.eta / denom));
}

std::size_t rank_growth(double xi, const RankPolicy& policy) {
    const long long raw = rank_growth_raw(xi, policy);
    const auto floor = static_cast<long long>(policy.min_growth);
    return static_cast<std::size_t>(std::max(raw, floor));
}

AsRsiResult as_rsi(const Matrix& a, std::size_t k_prev, const RankPolicy& policy,
                   std::uint64_t step, const AsRsiOptions& options, RngStream& rng) {
    policy.validate();
    if (step < 1) throw std::invalid_argument("as_rsi: step must be >= 1");
    const std::size_t min_dim = std::min(a.rows(), a.cols());
    const std::size_t k_max = policy.k_max(a.rows(), a.cols());
    if (policy.k_init > k_max) {
        throw std::invalid_argument("as_rsi: k_init " + std::to_string(policy.k_init) +
                                    " exceeds k_max " + std::to_string(k_max));
    }
    // Oversampling never pushes k + p past min(m, n).
    auto feasible = [min_dim](std::size_t k, std::size_t p) { return std::min(p, min_dim - k); };

    AsRsiResult result{FactorPair::zeros(a.rows(), a.cols(), 1), 0, std::nullopt, false, {}};

    if (!policy.is_adaptation_step(step)) {
        if (k_prev < 1 || k_prev > k_max) {
            throw std::invalid_argument("as_rsi: k_prev " + std::to_string(k_prev) +
                                        " outside [1, " + std::to_string(k_max) + "]");
        }
        result.factors =
            srsi(a, SrsiParams{k_prev, options.power_iters, feasible(k_prev, options.oversample)},
                 rng);
        result.rank = k_prev;
        result.trace.push_back(k_prev);
        return result;
    }

    result.adapted = true;
    std::size_t k = policy.k_init;
    std::size_t p = options.oversample;
    std::optional<SubspaceIterate> previous;
    while (true) {
        const SrsiParams params{k, options.power_iters, feasible(k, p)};
        FactorPair factors = FactorPair::zeros(a.rows(), a.cols(), 1);
        if (options.incremental && previous) {
            check_srsi_args(a, params);
            Matrix u = extend_sample(previous->u, params.rank + params.oversample, rng);
            previous = subspace_iteration(a, std::move(u), params.power_iters);
            factors = truncate(*previous, k);
        } else if (options.incremental) {
            check_srsi_args(a, params);
            Matrix u = gaussian_matrix(a.cols(), params.rank + params.oversample, rng);
            previous = subspace_iteration(a, std::move(u), params.power_iters);
            factors = truncate(*previous, k);
        } else {
            factors = srsi(a, params, rng);
        }
        const double xi = approx_error_rate(a, factors);
        result.trace.push_back(k);
        if (xi <= policy.xi_thresh || k == k_max) {
            result.factors = std::move(factors);
            result.rank = k;
            result.xi = xi;
            return result;
        }
        k = std::min(k + rank_growth(xi, policy), k_max);
        p = std::min(p, k_max - k);
    }
}

SvdResult truncated_svd_oracle(const Matrix& a, std::size_t k) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    const std::size_t min_dim = std::min(m, n);
    if (k < 1 || k > min_dim) {
        throw std::invalid_argument("truncated_svd_oracle: k=" + std::to_string(k) +
                                    " outside [1, " + std::to_string(min_dim) + "]");
    }
    if (min_dim > 512) throw std::invalid_argument("truncated_svd_oracle: min(m, n) > 512");
    if (!a.all_finite()) throw std::invalid_argument("truncated_svd_oracle: non-finite input");

    // Work on the tall orientation; its columns are the rows of `w`.
    const bool tall = m >= n;
    Matrix w = tall ? a.transpose() : a;  // min_dim rows of length max(m, n)
    Matrix v = Matrix::identity(min_dim);  // rows are the right rotation columns

    constexpr int kMaxSweeps = 80;
    constexpr double kTol = 1e-15;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < min_dim; ++i) {
            for (std::size_t j = i + 1; j < min_dim; ++j) {
                auto wi = w.row(i);
                auto wj = w.row(j);
                double alpha = 0.0;
                double beta = 0.0;
                double gamma = 0.0;
                for (std::size_t t = 0; t < wi.size(); ++t) {
                    alpha += wi[t] * wi[t];
                    beta += wj[t] * wj[t];
                    gamma += wi[t] * wj[t];
                }
                if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t e = 0; e < wi.size(); ++e) {
                    const double x = wi[e];
                    const double y = wj[e];
                    wi[e] = c * x - s * y;
                    wj[e] = s * x + c * y;
                }
                auto vi = v.row(i);
                auto vj = v.row(j);
                for (std::size_t e = 0; e < vi.size(); ++e) {
                    const double x = vi[e];
                    const double y = vj[e];
                    vi[e] = c * x - s * y;
                    vj[e] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(min_dim);
    for (std::size_t j = 0; j < min_dim; ++j) sigma[j] = column_norm(w.row(j));
    std::vector<std::size_t> order(min_dim);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&sigma](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SvdResult result{FactorPair::zeros(m, n, k), {}};
    result.spectrum.values.reserve(min_dim);
    for (std::size_t idx : order) result.spectrum.values.push_back(sigma[idx]);

    for (std::size_t r = 0; r < k; ++r) {
        const std::size_t j = order[r];
        const double s = sigma[j];
        if (tall) {
            // A = W V^T with W = U diag(sigma).
            for (std::size_t i = 0; i < m; ++i) result.factors.q(i, r) = s > 0.0 ? w(j, i) / s : 0.0;
            for (std::size_t i = 0; i < n; ++i) result.factors.ut(i, r) = s * v(j, i);
        } else {
            // A^T = W V^T, so A = V W^T.
            for (std::size_t i = 0; i < m; ++i) result.factors.q(i, r) = v(j, i);
            for (std::size_t i = 0; i < n; ++i) result.factors.ut(i, r) = w(j, i);
        }
    }
    return result;
}

SingularSpectrum singular_values(const Matrix& a) { return truncated_svd_oracle(a, 1).spectrum; }

double spectral_norm(const Matrix& a) { return singular_values(a).values.front(); }

FactorPair onerank_factor(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    std::vector<double> row_sums(m, 0.0);
    std::vector<double> col_sums(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double x = a(i, j);
            if (x < 0.0 || !std::isfinite(x)) {
                throw std::invalid_argument("onerank_factor: entries must be finite and >= 0");
            }
            row_sums[i] += x;
            col_sums[j] += x;
        }
    }
    double total = 0.0;
    for (double r : row_sums) total += r;
    if (!(total > 0.0)) throw std::invalid_argument("onerank_factor: total sum must be positive");

    const double r_norm = column_norm(row_sums);
    FactorPair f = FactorPair::zeros(m, n, 1);
    for (std::size_t i = 0; i < m; ++i) f.q(i, 0) = row_sums[i] / r_norm;
    for (std::size_t j = 0; j < n; ++j) f.ut(j, 0) = col_sums[j] * (r_norm / total);
    return f;
}

double error_bound(const SingularSpectrum& spectrum, std::size_t k, std::size_t p, std::size_t l) {
    if (p < 2) throw std::invalid_argument("error_bound: oversampling p must be >= 2");
    if (k < 1) throw std::invalid_argument("error_bound: k must be >= 1");
    if (k + p > spectrum.size()) {
        throw std::invalid_argument("error_bound: k + p exceeds the spectrum length");
    }
    const double s = 2.0 * static_cast<double>(l) + 1.0;
    const double head = spectrum[k];  // sigma_{k+1}, the largest discarded value
    if (head == 0.0) return 0.0;

    const double kk = static_cast<double>(k);
    const double pp = static_cast<double>(p);
    const double lead = std::pow(1.0 + std::sqrt(kk / (pp - 1.0)), s);
    double tail = 0.0;
    for (std::size_t j = k; j < spectrum.size(); ++j) tail += std::pow(spectrum[j] / head, 2.0 * s);
    const double mix = std::numbers::e * std::sqrt(kk + pp) / pp;
    return head * std::pow(lead + mix * std::sqrt(tail), 1.0 / s);
}

bool linear_independence_check(const Matrix& a, std::size_t k, RngStream& rng) {
    if (k < 1 || k > std::min(a.rows(), a.cols())) {
        throw std::invalid_argument("linear_independence_check: k out of range");
    }
    const Matrix images = matmul(a, gaussian_matrix(a.cols(), k, rng));
    const Matrix r = householder_qr(images).r;
    double lo = std::abs(r(0, 0));
    double hi = lo;
    for (std::size_t i = 1; i < k; ++i) {
        lo = std::min(lo, std::abs(r(i, i)));
        hi = std::max(hi, std::abs(r(i, i)));
    }
    return hi > 0.0 && lo > 1e-8 * hi;
}

Matrix matrix_with_spectrum(std::size_t m, std::size_t n, const std::vector<double>& sigma,
                            RngStream& rng) {
    const std::size_t r = sigma.size();
    if (r < 1 || r > std::min(m, n)) {
        throw std::invalid_argument("matrix_with_spectrum: spectrum length out of range");
    }
    Matrix left = householder_qr(gaussian_matrix(m, r, rng)).q;
    const Matrix right = householder_qr(gaussian_matrix(n, r, rng)).q;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < r; ++j) left(i, j) *= sigma[j];
    return matmul_nt(left, right);
}

}  // namespace adapprox
