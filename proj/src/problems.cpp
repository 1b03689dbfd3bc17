#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "adapprox/bench.hpp"

namespace adapprox {

std::vector<Matrix> Problem::zero_gradients() const {
    std::vector<Matrix> grads;
    for (const auto& s : shapes()) grads.emplace_back(s.rows, s.cols);
    return grads;
}

std::vector<Matrix> Problem::gradient(std::span<const Matrix> weights) const {
    std::vector<Matrix> grads = zero_gradients();
    evaluate(weights, grads, {});
    return grads;
}

namespace {

void check_weights(const Problem& p, std::span<const Matrix> weights, std::span<Matrix> grads) {
    const auto shapes = p.shapes();
    if (weights.size() != shapes.size() || (!grads.empty() && grads.size() != shapes.size())) {
        throw std::invalid_argument(p.name() + ": wrong number of parameter matrices");
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (weights[i].rows() != shapes[i].rows || weights[i].cols() != shapes[i].cols ||
            (!grads.empty() && !grads[i].same_shape(weights[i]))) {
            throw std::invalid_argument(p.name() + ": shape mismatch for '" + shapes[i].name + "'");
        }
    }
}

std::vector<std::size_t> permutation(std::size_t n, RngStream& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

// Rows of `data` listed in `batch`.
Matrix gather_rows(const Matrix& data, std::span<const std::size_t> batch) {
    Matrix out(batch.size(), data.cols());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        auto src = data.row(batch[b]);
        std::copy(src.begin(), src.end(), out.row(b).begin());
    }
    return out;
}

class QuadraticProblem final : public Problem {
public:
    explicit QuadraticProblem(const QuadraticSpec& spec)
        : spec_(spec), curvature_(quadratic_curvature(spec)), target_(spec.m, spec.n) {
        RngStream rng = RngStream(spec.seed).fork(2);
        for (double& x : target_.data()) x = spec.target_offset + spec.target_noise * rng.normal();
    }

    std::string name() const override { return "quadratic"; }

    std::vector<Optimizer::Shape> shapes() const override { return {{"W", spec_.m, spec_.n}}; }

    std::vector<Matrix> initial_weights() const override { return {Matrix(spec_.m, spec_.n)}; }

    double evaluate(std::span<const Matrix> weights, std::span<Matrix> grads,
                    std::span<const std::size_t>) const override {
        return static_cast<double>(compute(weights, grads));
    }

    long double loss_extended(std::span<const Matrix> weights) const override {
        return compute(weights, {});
    }

private:
    long double compute(std::span<const Matrix> weights, std::span<Matrix> grads) const {
        check_weights(*this, weights, grads);
        auto w = weights[0].data();
        auto s = curvature_.data();
        auto target = target_.data();
        long double acc = 0.0L;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double d = w[i] - target[i];
            const long double dl = static_cast<long double>(w[i]) - target[i];
            acc += 0.5L * s[i] * dl * dl;
            if (!grads.empty()) grads[0].data()[i] = s[i] * d;
        }
        return acc;
    }

    QuadraticSpec spec_;
    Matrix curvature_;
    Matrix target_;
};

class LogRegProblem final : public Problem {
public:
    explicit LogRegProblem(const LogRegSpec& spec)
        : spec_(spec), features_(spec.n_samples, spec.n_features + 1), labels_(spec.n_samples) {
        if (spec.n_samples < 2 || spec.n_features < 2 || spec.n_classes < 2) {
            throw std::invalid_argument("logreg: sizes must be >= 2");
        }
        RngStream rng = RngStream(spec.seed).fork(3);
        const Matrix teacher = scale(gaussian_matrix(spec.n_classes, spec.n_features, rng),
                                     spec.teacher_scale / std::sqrt(double(spec.n_features)));
        for (std::size_t i = 0; i < spec.n_samples; ++i) {
            auto x = features_.row(i);
            for (std::size_t f = 0; f < spec.n_features; ++f) x[f] = rng.normal();
            x[spec.n_features] = 1.0;
            std::size_t best = 0;
            double best_score = -INFINITY;
            for (std::size_t c = 0; c < spec.n_classes; ++c) {
                double score = 0.0;
                for (std::size_t f = 0; f < spec.n_features; ++f) score += teacher(c, f) * x[f];
                if (score > best_score) {
                    best_score = score;
                    best = c;
                }
            }
            if (rng.uniform() < spec.label_noise) {
                best = static_cast<std::size_t>(rng.next_u64() % spec.n_classes);
            }
            labels_[i] = best;
        }
    }

    std::string name() const override { return "logreg"; }

    std::vector<Optimizer::Shape> shapes() const override {
        return {{"W", spec_.n_classes, spec_.n_features + 1}};
    }

    std::vector<Matrix> initial_weights() const override {
        return {Matrix(spec_.n_classes, spec_.n_features + 1)};
    }

    std::size_t sample_count() const override { return spec_.n_samples; }

    double evaluate(std::span<const Matrix> weights, std::span<Matrix> grads,
                    std::span<const std::size_t> batch) const override {
        return static_cast<double>(compute(weights, grads, batch));
    }

    long double loss_extended(std::span<const Matrix> weights) const override {
        return compute(weights, {}, {});
    }

    long double compute(std::span<const Matrix> weights, std::span<Matrix> grads,
                        std::span<const std::size_t> batch) const {
        check_weights(*this, weights, grads);
        const std::vector<std::size_t> everything = batch.empty() ? all_indices(spec_.n_samples)
                                                                  : std::vector<std::size_t>{};
        if (batch.empty()) batch = everything;
        const Matrix x = gather_rows(features_, batch);
        const Matrix logits = matmul_nt(x, weights[0]);  // B x C
        const double inv_b = 1.0 / static_cast<double>(batch.size());

        Matrix residual(batch.size(), spec_.n_classes);  // softmax - onehot
        long double acc = 0.0L;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            auto z = logits.row(b);
            const double zmax = *std::max_element(z.begin(), z.end());
            double denom = 0.0;
            for (double v : z) denom += std::exp(v - zmax);
            const double log_denom = std::log(denom) + zmax;
            const std::size_t y = labels_[batch[b]];
            acc += log_denom - z[y];
            auto r = residual.row(b);
            for (std::size_t c = 0; c < z.size(); ++c) r[c] = std::exp(z[c] - log_denom);
            r[y] -= 1.0;
        }
        if (!grads.empty()) grads[0] = scale(matmul_tn(residual, x), inv_b);
        return acc * inv_b;
    }

    std::optional<double> accuracy(std::span<const Matrix> weights) const override {
        check_weights(*this, weights, {});
        const Matrix logits = matmul_nt(features_, weights[0]);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < spec_.n_samples; ++i) {
            auto z = logits.row(i);
            const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
            if (best == labels_[i]) ++correct;
        }
        return static_cast<double>(correct) / static_cast<double>(spec_.n_samples);
    }

private:
    LogRegSpec spec_;
    Matrix features_;  // n_samples x (n_features + 1), last column = 1
    std::vector<std::size_t> labels_;
};

struct MlpForward {
    Matrix hidden;  // B x H, tanh activations
    Matrix output;  // B x O
};

MlpForward mlp_forward(const Matrix& x, const Matrix& w1, const Matrix& b1, const Matrix& w2,
                       const Matrix& b2) {
    Matrix hidden = matmul_nt(x, w1);
    for (std::size_t i = 0; i < hidden.rows(); ++i) {
        auto h = hidden.row(i);
        for (std::size_t j = 0; j < h.size(); ++j) h[j] = std::tanh(h[j] + b1(0, j));
    }
    Matrix output = matmul_nt(hidden, w2);
    for (std::size_t i = 0; i < output.rows(); ++i) {
        auto o = output.row(i);
        for (std::size_t j = 0; j < o.size(); ++j) o[j] += b2(0, j);
    }
    return MlpForward{std::move(hidden), std::move(output)};
}

class MlpProblem final : public Problem {
public:
    explicit MlpProblem(const MlpSpec& spec)
        : spec_(spec), inputs_(spec.n_samples, spec.n_in), targets_(spec.n_samples, spec.n_out) {
        if (spec.n_in < 2 || spec.n_hidden < 2 || spec.n_out < 2 || spec.n_samples < 2 ||
            spec.teacher_hidden < 1) {
            throw std::invalid_argument("mlp: sizes must be >= 2");
        }
        RngStream rng = RngStream(spec.seed).fork(4);
        for (double& x : inputs_.data()) x = rng.normal();
        const double s1 = spec.teacher_scale * 2.0 / std::sqrt(double(spec.n_in));
        const double s2 = spec.teacher_scale / std::sqrt(double(spec.teacher_hidden));
        const Matrix tw1 = scale(gaussian_matrix(spec.teacher_hidden, spec.n_in, rng), s1);
        const Matrix tb1(1, spec.teacher_hidden);
        const Matrix tw2 = scale(gaussian_matrix(spec.n_out, spec.teacher_hidden, rng), s2);
        const Matrix tb2(1, spec.n_out);
        targets_ = mlp_forward(inputs_, tw1, tb1, tw2, tb2).output;
        for (double& t : targets_.data()) t += spec.noise * rng.normal();

        RngStream init = RngStream(spec.seed).fork(5);
        w1_init_ = scale(gaussian_matrix(spec.n_hidden, spec.n_in, init),
                         spec.init_scale / std::sqrt(double(spec.n_in)));
        w2_init_ = scale(gaussian_matrix(spec.n_out, spec.n_hidden, init),
                         spec.init_scale / std::sqrt(double(spec.n_hidden)));
    }

    std::string name() const override { return "mlp"; }

    std::vector<Optimizer::Shape> shapes() const override {
        return {{"W1", spec_.n_hidden, spec_.n_in},
                {"b1", 1, spec_.n_hidden},
                {"W2", spec_.n_out, spec_.n_hidden},
                {"b2", 1, spec_.n_out}};
    }

    std::vector<Matrix> initial_weights() const override {
        return {w1_init_, Matrix(1, spec_.n_hidden), w2_init_, Matrix(1, spec_.n_out)};
    }

    std::size_t sample_count() const override { return spec_.n_samples; }

    double evaluate(std::span<const Matrix> weights, std::span<Matrix> grads,
                    std::span<const std::size_t> batch) const override {
        return static_cast<double>(compute(weights, grads, batch));
    }

    long double loss_extended(std::span<const Matrix> weights) const override {
        return compute(weights, {}, {});
    }

private:
    long double compute(std::span<const Matrix> weights, std::span<Matrix> grads,
                        std::span<const std::size_t> batch) const {
        check_weights(*this, weights, grads);
        const std::vector<std::size_t> everything = batch.empty() ? all_indices(spec_.n_samples)
                                                                  : std::vector<std::size_t>{};
        if (batch.empty()) batch = everything;
        const Matrix x = gather_rows(inputs_, batch);
        const Matrix t = gather_rows(targets_, batch);
        const MlpForward fwd = mlp_forward(x, weights[0], weights[1], weights[2], weights[3]);
        const double inv_b = 1.0 / static_cast<double>(batch.size());

        Matrix err = sub(fwd.output, t);  // B x O
        long double acc = 0.0L;
        for (double e : err.data()) acc += static_cast<long double>(e) * e;
        const long double loss = 0.5L * acc * inv_b;
        if (grads.empty()) return loss;

        grads[2] = scale(matmul_tn(err, fwd.hidden), inv_b);
        Matrix db2(1, spec_.n_out);
        for (std::size_t b = 0; b < err.rows(); ++b)
            for (std::size_t o = 0; o < spec_.n_out; ++o) db2(0, o) += err(b, o);
        grads[3] = scale(db2, inv_b);

        Matrix dz = matmul(err, weights[2]);  // B x H
        Matrix db1(1, spec_.n_hidden);
        for (std::size_t b = 0; b < dz.rows(); ++b) {
            auto d = dz.row(b);
            auto h = fwd.hidden.row(b);
            for (std::size_t j = 0; j < d.size(); ++j) {
                d[j] *= 1.0 - h[j] * h[j];
                db1(0, j) += d[j];
            }
        }
        grads[0] = scale(matmul_tn(dz, x), inv_b);
        grads[1] = scale(db1, inv_b);
        return loss;
    }

    MlpSpec spec_;
    Matrix inputs_;
    Matrix targets_;
    Matrix w1_init_{1, 1};
    Matrix w2_init_{1, 1};
};

}  // namespace

Matrix quadratic_curvature(const QuadraticSpec& spec) {
    const std::size_t blocks = spec.spectrum.size();
    if (blocks < 1 || blocks > std::min(spec.m, spec.n)) {
        throw std::invalid_argument("quadratic: spectrum length must lie in [1, min(m, n)]");
    }
    for (double c : spec.spectrum) {
        if (!(c > 0.0)) throw std::invalid_argument("quadratic: spectrum entries must be positive");
    }
    if (!(spec.floor >= 0.0)) throw std::invalid_argument("quadratic: floor must be >= 0");
    if (spec.spread != 0.0 && !(spec.spread >= 1.0)) {
        throw std::invalid_argument("quadratic: spread must be 0 or >= 1");
    }

    RngStream rng = RngStream(spec.seed).fork(1);
    const auto row_perm = permutation(spec.m, rng);
    const auto col_perm = permutation(spec.n, rng);
    std::vector<double> x(spec.m);
    std::vector<double> y(spec.n);
    if (spec.spread > 0.0) {
        const double half = 0.5 * std::log(spec.spread);
        for (double& v : x) v = std::exp(half * rng.uniform());
        for (double& v : y) v = std::exp(half * rng.uniform());
    } else {
        for (double& v : x) v = 0.5 + rng.uniform();
        for (double& v : y) v = 0.5 + rng.uniform();
    }

    // Contiguous blocks in permuted index space.
    auto block_of = [blocks](std::size_t pos, std::size_t len) { return pos * blocks / len; };
    Matrix s(spec.m, spec.n, spec.floor);
    for (std::size_t i = 0; i < spec.m; ++i) {
        const std::size_t bi = block_of(row_perm[i], spec.m);
        for (std::size_t j = 0; j < spec.n; ++j) {
            if (bi == block_of(col_perm[j], spec.n)) s(i, j) = spec.spectrum[bi] * x[i] * y[j];
        }
    }
    return s;
}

std::unique_ptr<Problem> problem_quadratic(const QuadraticSpec& spec) {
    return std::make_unique<QuadraticProblem>(spec);
}

std::unique_ptr<Problem> problem_logreg(const LogRegSpec& spec) {
    return std::make_unique<LogRegProblem>(spec);
}

std::unique_ptr<Problem> problem_mlp(const MlpSpec& spec) {
    return std::make_unique<MlpProblem>(spec);
}

}  // namespace adapprox
