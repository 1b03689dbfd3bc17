#include "adapprox/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace adapprox {

namespace {

void check_step_inputs(const ParamState& state, const Matrix& weights, const Matrix& grad,
                       double lr) {
    if (weights.rows() != state.rows || weights.cols() != state.cols || !weights.same_shape(grad)) {
        throw std::invalid_argument("optimizer step for '" + state.name + "': shape mismatch");
    }
    if (!grad.all_finite()) {
        throw std::invalid_argument("optimizer step for '" + state.name + "': non-finite gradient");
    }
    if (!std::isfinite(lr) || lr < 0.0) {
        throw std::invalid_argument("optimizer step: learning rate must be finite and >= 0");
    }
}

// v <- beta2 * v + (1 - beta2) * g^2, in place.
void accumulate_second_moment(Matrix& v, const Matrix& grad, double beta2) {
    auto dst = v.data();
    auto g = grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = beta2 * dst[i] + (1.0 - beta2) * g[i] * g[i];
}

// g / (sqrt(v) + eps)
Matrix normalize_by_second_moment(const Matrix& grad, const Matrix& v, double epsilon) {
    Matrix out(grad.rows(), grad.cols());
    auto dst = out.data();
    auto g = grad.data();
    auto vv = v.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = g[i] / (std::sqrt(vv[i]) + epsilon);
    return out;
}

// Clamps negative entries of a reconstruction to zero, returning the largest
// magnitude removed.
double clamp_negative(Matrix& m) {
    double removed = 0.0;
    for (double& x : m.data()) {
        if (x < 0.0) {
            removed = std::max(removed, -x);
            x = 0.0;
        }
    }
    return removed;
}

void apply_decoupled_update(Matrix& weights, const Matrix& update, double lr, double weight_decay) {
    auto w = weights.data();
    auto u = update.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (u[i] + weight_decay * w[i]);
}

// Shared tail of the Adapprox-family steps: clip, first moment, guidance, decay.
void finish_step(ParamState& state, Matrix& weights, Matrix update, double lr,
                 const AdapproxConfig& cfg, StepStats& stats) {
    const double r = rms(update);
    stats.update_rms = r;
    if (r > cfg.clip_d) {
        stats.clipped = true;
        update = scale(update, cfg.clip_d / r);
    }
    if (cfg.beta1 > 0.0) {
        Matrix& m = *state.first_moment;
        axpby(1.0 - cfg.beta1, update, cfg.beta1, m);
        if (cfg.cosine_guidance) {
            double theta = 0.0;
            m = cosine_guidance(update, m, cfg.epsilon, cfg.guidance_clamp, &theta);
            stats.cosine = theta;
        }
        apply_decoupled_update(weights, m, lr, cfg.weight_decay);
    } else {
        apply_decoupled_update(weights, update, lr, cfg.weight_decay);
    }
}

}  // namespace

std::string to_string(OptimizerKind kind) {
    switch (kind) {
        case OptimizerKind::adamw: return "adamw";
        case OptimizerKind::adafactor: return "adafactor";
        case OptimizerKind::adapprox: return "adapprox";
    }
    return "unknown";
}

OptimizerKind parse_optimizer_kind(const std::string& text) {
    if (text == "adamw") return OptimizerKind::adamw;
    if (text == "adafactor") return OptimizerKind::adafactor;
    if (text == "adapprox") return OptimizerKind::adapprox;
    throw std::invalid_argument("unknown optimizer '" + text + "' (expected adamw, adafactor or adapprox)");
}

void AdapproxConfig::validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must lie in [0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta2 must lie in (0, 1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
    if (!(clip_d > 0.0)) throw std::invalid_argument("clip_d must be > 0");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
    if (power_iters < 1) throw std::invalid_argument("power_iters (l) must be >= 1");
    if (cosine_guidance && beta1 == 0.0)
        throw std::invalid_argument("cosine_guidance requires beta1 > 0");
    if (guidance_clamp && !(*guidance_clamp >= 1.0))
        throw std::invalid_argument("guidance_clamp must be >= 1");
    if (factor_min_dim < 1) throw std::invalid_argument("factor_min_dim must be >= 1");
    rank_policy.validate();
}

ParamState make_state(std::string name, std::size_t rows, std::size_t cols, OptimizerKind kind,
                      const AdapproxConfig& cfg) {
    cfg.validate();
    ParamState state{std::move(name), rows, cols, std::nullopt, Matrix(rows, cols), 0, 0};
    switch (kind) {
        case OptimizerKind::adamw:
            state.first_moment = Matrix(rows, cols);
            break;
        case OptimizerKind::adafactor:
            if (cfg.beta1 > 0.0) state.first_moment = Matrix(rows, cols);
            if (cfg.factored(rows, cols)) {
                state.second_moment = FactorPair::zeros(rows, cols, 1);
                state.rank = 1;
            }
            break;
        case OptimizerKind::adapprox:
            if (cfg.beta1 > 0.0) state.first_moment = Matrix(rows, cols);
            if (cfg.factored(rows, cols)) {
                const std::size_t k_max = cfg.rank_policy.k_max(rows, cols);
                if (cfg.rank_policy.k_init > k_max) {
                    throw std::invalid_argument("rank policy violation for '" + state.name +
                                                "': k_init exceeds k_max " +
                                                std::to_string(k_max));
                }
                state.second_moment = FactorPair::zeros(rows, cols, cfg.rank_policy.k_init);
                state.rank = cfg.rank_policy.k_init;
            }
            break;
    }
    return state;
}

double rms(const Matrix& m) {
    return frobenius_norm(m) / std::sqrt(static_cast<double>(m.size()));
}

Matrix cosine_guidance(const Matrix& m_hat, const Matrix& m_avg, double epsilon,
                       std::optional<double> clamp, double* theta_out) {
    const double na = frobenius_norm(m_hat);
    const double nb = frobenius_norm(m_avg);
    double theta = 0.0;
    if (na > 0.0 && nb > 0.0) theta = std::clamp(dot(m_hat, m_avg) / (na * nb), -1.0, 1.0);
    double factor = 1.0 / (1.0 - theta + epsilon);
    if (clamp) factor = std::clamp(factor, 1.0 / *clamp, *clamp);
    if (theta_out) *theta_out = theta;
    return scale(m_avg, factor);
}

StepStats adamw_step(ParamState& state, Matrix& weights, const Matrix& grad, double lr,
                     const AdapproxConfig& cfg) {
    check_step_inputs(state, weights, grad, lr);
    if (!state.first_moment || state.is_factored()) {
        throw std::invalid_argument("adamw_step: state for '" + state.name + "' is not dense");
    }
    const std::uint64_t t = ++state.step;
    Matrix& m = *state.first_moment;
    Matrix& v = std::get<Matrix>(state.second_moment);
    axpby(1.0 - cfg.beta1, grad, cfg.beta1, m);
    accumulate_second_moment(v, grad, cfg.beta2);

    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    Matrix update(grad.rows(), grad.cols());
    auto u = update.data();
    auto mm = m.data();
    auto vv = v.data();
    for (std::size_t i = 0; i < u.size(); ++i) {
        u[i] = (mm[i] / bc1) / (std::sqrt(vv[i] / bc2) + cfg.epsilon);
    }
    StepStats stats;
    stats.update_rms = rms(update);
    apply_decoupled_update(weights, update, lr, cfg.weight_decay);
    return stats;
}

StepStats adapprox_step(ParamState& state, Matrix& weights, const Matrix& grad, double lr,
                        const AdapproxConfig& cfg, RngStream& rng) {
    check_step_inputs(state, weights, grad, lr);
    if ((cfg.beta1 > 0.0) != state.first_moment.has_value()) {
        throw std::invalid_argument("adapprox_step: first-moment storage does not match beta1");
    }
    const std::uint64_t t = ++state.step;
    StepStats stats;

    Matrix update = [&] {
        if (!state.is_factored()) {
            Matrix& v = std::get<Matrix>(state.second_moment);
            accumulate_second_moment(v, grad, cfg.beta2);
            return normalize_by_second_moment(grad, v, cfg.epsilon);
        }
        Matrix v = state.factors().reconstruct();
        stats.clamp_magnitude = clamp_negative(v);
        accumulate_second_moment(v, grad, cfg.beta2);

        const AsRsiOptions options{cfg.power_iters, cfg.oversample, cfg.incremental_rank_growth};
        AsRsiResult fit = as_rsi(v, state.rank, cfg.rank_policy, t, options, rng);
        state.second_moment = std::move(fit.factors);
        state.rank = fit.rank;
        stats.rank = fit.rank;
        stats.xi = fit.xi;
        return normalize_by_second_moment(grad, v, cfg.epsilon);
    }();

    finish_step(state, weights, std::move(update), lr, cfg, stats);
    return stats;
}

StepStats adafactor_baseline_step(ParamState& state, Matrix& weights, const Matrix& grad,
                                  double lr, const AdapproxConfig& cfg) {
    check_step_inputs(state, weights, grad, lr);
    if ((cfg.beta1 > 0.0) != state.first_moment.has_value()) {
        throw std::invalid_argument("adafactor_step: first-moment storage does not match beta1");
    }
    const std::uint64_t t = ++state.step;
    StepStats stats;

    Matrix update = [&] {
        if (!state.is_factored()) {
            Matrix& v = std::get<Matrix>(state.second_moment);
            accumulate_second_moment(v, grad, cfg.beta2);
            return normalize_by_second_moment(grad, v, cfg.epsilon);
        }
        Matrix v = state.factors().reconstruct();
        stats.clamp_magnitude = clamp_negative(v);
        accumulate_second_moment(v, grad, cfg.beta2);

        FactorPair f = sum(v) > 0.0 ? onerank_factor(v) : FactorPair::zeros(state.rows, state.cols, 1);
        Matrix v_hat = f.reconstruct();
        clamp_negative(v_hat);
        if (cfg.rank_policy.is_adaptation_step(t)) stats.xi = approx_error_rate(v, f);
        stats.rank = 1;
        state.second_moment = std::move(f);
        return normalize_by_second_moment(grad, v_hat, cfg.epsilon);
    }();

    finish_step(state, weights, std::move(update), lr, cfg, stats);
    return stats;
}

Optimizer::Optimizer(OptimizerKind kind, AdapproxConfig cfg, const std::vector<Shape>& shapes,
                     std::uint64_t seed)
    : kind_(kind), cfg_(std::move(cfg)) {
    cfg_.validate();
    const RngStream root(seed);
    states_.reserve(shapes.size());
    streams_.reserve(shapes.size());
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        states_.push_back(make_state(shapes[i].name, shapes[i].rows, shapes[i].cols, kind_, cfg_));
        streams_.push_back(root.fork(i));
    }
}

std::vector<StepStats> Optimizer::step(std::span<Matrix> weights, std::span<const Matrix> grads,
                                       double lr) {
    if (weights.size() != states_.size() || grads.size() != states_.size()) {
        throw std::invalid_argument("Optimizer::step: parameter count mismatch");
    }
    std::vector<StepStats> stats;
    stats.reserve(states_.size());
    for (std::size_t i = 0; i < states_.size(); ++i) {
        switch (kind_) {
            case OptimizerKind::adamw:
                stats.push_back(adamw_step(states_[i], weights[i], grads[i], lr, cfg_));
                break;
            case OptimizerKind::adafactor:
                stats.push_back(adafactor_baseline_step(states_[i], weights[i], grads[i], lr, cfg_));
                break;
            case OptimizerKind::adapprox:
                stats.push_back(
                    adapprox_step(states_[i], weights[i], grads[i], lr, cfg_, streams_[i]));
                break;
        }
    }
    return stats;
}

}  // namespace adapprox
