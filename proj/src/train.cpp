#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "adapprox/bench.hpp"

namespace adapprox {

double LrSchedule::lr_at(std::uint64_t t) const {
    if (t < 1 || t > total_steps) {
        throw std::out_of_range("lr_at: step " + std::to_string(t) + " outside [1, " +
                                std::to_string(total_steps) + "]");
    }
    if (warmup_steps > 0 && t <= warmup_steps) {
        return peak * static_cast<double>(t) / static_cast<double>(warmup_steps);
    }
    if (total_steps <= warmup_steps) return peak;
    const double progress = static_cast<double>(t - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return min + 0.5 * (peak - min) * (1.0 + std::cos(std::numbers::pi * progress));
}

std::optional<std::uint64_t> TrainResult::steps_to_threshold(double threshold) const {
    for (const auto& e : evals) {
        if (e.loss <= threshold) return e.step;
    }
    return std::nullopt;
}

double TrainResult::mean_rank() const {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& r : records) {
        for (const auto& p : r.params) {
            if (p.rank == 0) continue;
            total += static_cast<double>(p.rank);
            ++count;
        }
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

namespace {

double global_norm(std::span<const Matrix> grads) {
    double acc = 0.0;
    for (const auto& g : grads) {
        const double n = frobenius_norm(g);
        acc += n * n;
    }
    return std::sqrt(acc);
}

// k distinct indices out of n (partial Fisher-Yates), sorted for locality.
std::vector<std::size_t> sample_batch(std::vector<std::size_t>& pool, std::size_t k,
                                      RngStream& rng) {
    const std::size_t n = pool.size();
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.next_u64() % (n - i));
        std::swap(pool[i], pool[j]);
    }
    std::vector<std::size_t> batch(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(batch.begin(), batch.end());
    return batch;
}

void check_step_invariants(const Optimizer& opt, std::span<const Matrix> weights,
                           const std::vector<StepStats>& stats, std::uint64_t t,
                           std::vector<std::size_t>& last_rank) {
    const auto& cfg = opt.config();
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const ParamState& s = opt.states()[i];
        auto fail = [&](const std::string& what) {
            throw std::logic_error("invariant violated at step " + std::to_string(t) + " for '" +
                                   s.name + "': " + what);
        };
        if (!weights[i].all_finite()) fail("non-finite weights");
        if (s.first_moment && !s.first_moment->all_finite()) fail("non-finite first moment");
        if (s.step != t) fail("state step counter out of sync");
        if (!s.is_factored() || opt.kind() != OptimizerKind::adapprox) continue;
        const std::size_t k_max = cfg.rank_policy.k_max(s.rows, s.cols);
        if (s.rank < 1 || s.rank > k_max) fail("rank outside [1, k_max]");
        if (s.factors().rank() != s.rank) fail("factor width differs from rank");
        const bool adapt = cfg.rank_policy.is_adaptation_step(t);
        if (adapt) {
            if (!stats[i].xi) fail("adaptation step without xi");
            if (!(*stats[i].xi <= cfg.rank_policy.xi_thresh || s.rank == k_max)) {
                fail("xi above threshold below k_max");
            }
        } else if (last_rank[i] != 0 && s.rank != last_rank[i]) {
            fail("rank changed between refreshes");
        }
        last_rank[i] = s.rank;
    }
}

}  // namespace

TrainResult run_training(const Problem& problem, OptimizerKind kind, const AdapproxConfig& cfg,
                         const LrSchedule& schedule, const TrainOptions& options) {
    if (options.steps < 1) throw std::invalid_argument("run_training: steps must be >= 1");
    if (schedule.total_steps < options.steps) {
        throw std::invalid_argument("run_training: schedule shorter than the run");
    }
    const auto shapes = problem.shapes();
    const RngStream root(options.seed);
    Optimizer opt(kind, cfg, shapes, root.fork(1).next_u64());
    RngStream batch_rng = root.fork(2);

    const std::size_t n_samples = problem.sample_count();
    const bool minibatch = options.batch_size > 0 && n_samples > 0 && options.batch_size < n_samples;
    std::vector<std::size_t> pool(minibatch ? n_samples : 0);
    std::iota(pool.begin(), pool.end(), 0);

    TrainResult result;
    result.records.reserve(options.steps);
    std::vector<Matrix> weights = problem.initial_weights();
    std::vector<Matrix> grads = problem.zero_gradients();
    std::vector<std::size_t> last_rank(shapes.size(), 0);

    for (std::uint64_t t = 1; t <= options.steps; ++t) {
        const auto start = std::chrono::steady_clock::now();
        const std::vector<std::size_t> batch =
            minibatch ? sample_batch(pool, options.batch_size, batch_rng) : std::vector<std::size_t>{};
        const double loss = problem.evaluate(weights, grads, batch);
        const double gnorm = global_norm(grads);
        if (!std::isfinite(loss) || loss > options.divergence_limit || !std::isfinite(gnorm)) {
            result.diverged = true;
            result.diagnostic = "diverged at step " + std::to_string(t) + ": loss " +
                                format_double(loss) + ", gradient norm " + format_double(gnorm);
            break;
        }
        const auto stats = opt.step(weights, grads, schedule.lr_at(t));
        if (options.check_invariants) check_step_invariants(opt, weights, stats, t, last_rank);

        TrainRecord rec;
        rec.step = t;
        rec.loss = loss;
        rec.grad_norm = gnorm;
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            rec.params.push_back(ParamTelemetry{shapes[i].name, stats[i].rank, stats[i].xi,
                                                stats[i].clipped});
        }
        if (options.record_timing) {
            rec.micros = std::chrono::duration_cast<std::chrono::microseconds>(
                             std::chrono::steady_clock::now() - start)
                             .count();
        }
        result.records.push_back(std::move(rec));

        if (options.eval_every > 0 && t % options.eval_every == 0) {
            result.evals.push_back(EvalPoint{t, problem.loss(weights)});
        }
    }

    if (result.diverged) {
        result.final_loss = INFINITY;
    } else {
        result.final_loss = problem.loss(weights);
        if (!std::isfinite(result.final_loss) || result.final_loss > options.divergence_limit) {
            result.diverged = true;
            result.diagnostic = "diverged after the last step: loss " + format_double(result.final_loss);
            result.final_loss = INFINITY;
        } else if (result.evals.empty() || result.evals.back().step != options.steps) {
            result.evals.push_back(EvalPoint{options.steps, result.final_loss});
        }
    }
    result.final_weights = std::move(weights);
    return result;
}

double finite_diff_check(const Problem& problem, std::span<const Matrix> point, double h,
                         RngStream& rng, std::size_t max_coords) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be > 0");
    if (max_coords < 100) throw std::invalid_argument("finite_diff_check: need >= 100 coordinates");
    std::vector<Matrix> w(point.begin(), point.end());
    const std::vector<Matrix> g = problem.gradient(w);

    // (parameter, flat index) pairs
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t p = 0; p < w.size(); ++p)
        for (std::size_t i = 0; i < w[p].size(); ++i) coords.emplace_back(p, i);
    if (coords.size() > max_coords) {
        for (std::size_t i = 0; i < max_coords; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.next_u64() % (coords.size() - i));
            std::swap(coords[i], coords[j]);
        }
        coords.resize(max_coords);
    }

    std::vector<double> analytic;
    std::vector<double> numeric;
    for (const auto& [p, i] : coords) {
        double& x = w[p].data()[i];
        const double x0 = x;
        x = x0 + h;
        const double xp = x;
        const long double fp = problem.loss_extended(w);
        x = x0 - h;
        const double xm = x;
        const long double fm = problem.loss_extended(w);
        x = x0;
        numeric.push_back(static_cast<double>((fp - fm) / (static_cast<long double>(xp) - xm)));
        analytic.push_back(g[p].data()[i]);
    }
    double sq = 0.0;
    for (double a : analytic) sq += a * a;
    const double tiny = std::max(1e-3 * std::sqrt(sq / static_cast<double>(analytic.size())), 1e-300);
    double worst = 0.0;
    for (std::size_t c = 0; c < analytic.size(); ++c) {
        const double a = analytic[c];
        const double b = numeric[c];
        const double denom = std::max({std::abs(a), std::abs(b), tiny});
        worst = std::max(worst, std::abs(a - b) / denom);
    }
    return worst;
}

std::string format_double(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

void write_records_csv(std::ostream& out, const std::vector<TrainRecord>& records) {
    out << "step,loss,grad_norm,param,rank,xi,clipped,us\n";
    for (const auto& r : records) {
        const std::string head =
            std::to_string(r.step) + ',' + format_double(r.loss) + ',' + format_double(r.grad_norm) + ',';
        for (const auto& p : r.params) {
            out << head << p.name << ',';
            if (p.rank > 0) out << p.rank;
            out << ',';
            if (p.xi) out << format_double(*p.xi);
            out << ',' << (p.clipped ? 1 : 0) << ',' << r.micros << '\n';
        }
    }
}

}  // namespace adapprox
