#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adapprox/dense.hpp"
#include "adapprox/optim.hpp"
#include "adapprox/rng.hpp"

namespace adapprox {

/// A differentiable training objective with analytic gradients.
class Problem {
public:
    virtual ~Problem() = default;

    virtual std::string name() const = 0;
    virtual std::vector<Optimizer::Shape> shapes() const = 0;
    virtual std::vector<Matrix> initial_weights() const = 0;
    // Number of samples available for mini-batching; 0 when the objective has no data.
    virtual std::size_t sample_count() const { return 0; }

    // Loss on the listed samples (all samples when `batch` is empty). When
    // `grads` is non-empty it receives the gradient, one matrix per parameter.
    virtual double evaluate(std::span<const Matrix> weights, std::span<Matrix> grads,
                            std::span<const std::size_t> batch = {}) const = 0;

    // Fraction of samples classified correctly; only classification problems have one.
    virtual std::optional<double> accuracy(std::span<const Matrix>) const { return std::nullopt; }

    double loss(std::span<const Matrix> weights) const { return evaluate(weights, {}, {}); }
    // Full-data loss before the final rounding to double; used by the gradient checker.
    virtual long double loss_extended(std::span<const Matrix> weights) const { return loss(weights); }
    std::vector<Matrix> gradient(std::span<const Matrix> weights) const;
    std::vector<Matrix> zero_gradients() const;
};

/// f(W) = 1/2 sum s_ij (W_ij - W*_ij)^2 on a single m x n parameter.
///
/// The curvature s is block-diagonal after a seeded row/column permutation:
/// block r carries spectrum[r] * x_i * y_j with x, y ~ U[0.5, 1.5] (or, when
/// spread > 0, log-uniform so that x_i * y_j spans up to a factor spread), every other
/// entry carries `floor`. One spectrum entry gives a rank-1 curvature over the
/// whole matrix. The target is target_offset + target_noise * N(0, 1) and the
/// starting point is zero, so with target_noise = 0 the squared gradients keep
/// the block structure of s^2 throughout training.
struct QuadraticSpec {
    std::size_t m = 64;
    std::size_t n = 64;
    std::vector<double> spectrum{1.0};
    double floor = 0.0;
    double spread = 0.0;
    double target_offset = 1.0;
    double target_noise = 0.0;
    std::uint64_t seed = 0;
};

/// Softmax regression on Gaussian features; labels come from a random linear
/// teacher and are replaced by a uniform class with probability label_noise.
/// One parameter, n_classes x (n_features + 1), the last column being the bias.
struct LogRegSpec {
    std::size_t n_samples = 1024;
    std::size_t n_features = 32;
    std::size_t n_classes = 8;
    double label_noise = 0.05;
    double teacher_scale = 1.0;
    std::uint64_t seed = 0;
};

/// One-hidden-layer tanh network with squared loss against a random tanh
/// teacher plus Gaussian target noise. Parameters: W1 (hidden x in), b1,
/// W2 (out x hidden), b2.
struct MlpSpec {
    std::size_t n_in = 16;
    std::size_t n_hidden = 256;
    std::size_t n_out = 16;
    std::size_t n_samples = 512;
    std::size_t teacher_hidden = 16;
    double teacher_scale = 1.0;
    double noise = 0.1;
    double init_scale = 1.0;
    std::uint64_t seed = 0;
};

std::unique_ptr<Problem> problem_quadratic(const QuadraticSpec& spec);
std::unique_ptr<Problem> problem_logreg(const LogRegSpec& spec);
std::unique_ptr<Problem> problem_mlp(const MlpSpec& spec);

/// Curvature matrix of a quadratic problem (for diagnostics and tests).
Matrix quadratic_curvature(const QuadraticSpec& spec);

/// Linear warmup from 0 to peak, then cosine decay from peak to min at total_steps.
struct LrSchedule {
    double peak = 1e-3;
    double min = 1e-4;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;

    double lr_at(std::uint64_t t) const;
};

struct ParamTelemetry {
    std::string name;
    std::size_t rank = 0;  // 0 on the dense path
    std::optional<double> xi;
    bool clipped = false;
};

struct TrainRecord {
    std::uint64_t step = 0;
    double loss = 0.0;       // objective (on the step's batch) at the weights the step starts from
    double grad_norm = 0.0;  // Frobenius norm over all parameter gradients
    std::vector<ParamTelemetry> params;
    std::int64_t micros = 0;  // 0 unless timing is recorded
};

struct TrainOptions {
    std::size_t steps = 100;
    std::uint64_t seed = 0;
    std::size_t batch_size = 0;   // 0 = full batch
    std::size_t eval_every = 0;   // full-objective evaluation interval; 0 = final only
    double divergence_limit = 1e12;
    bool record_timing = false;
#ifdef NDEBUG
    bool check_invariants = false;
#else
    bool check_invariants = true;
#endif
};

struct EvalPoint {
    std::uint64_t step;
    double loss;
};

struct TrainResult {
    std::vector<TrainRecord> records;
    std::vector<EvalPoint> evals;  // full objective after the listed steps
    std::vector<Matrix> final_weights;
    double final_loss = 0.0;       // full objective at the final weights; +inf if diverged
    bool diverged = false;
    std::string diagnostic;

    // First evaluated step whose full loss is <= threshold.
    std::optional<std::uint64_t> steps_to_threshold(double threshold) const;
    double mean_rank() const;
};

TrainResult run_training(const Problem& problem, OptimizerKind kind, const AdapproxConfig& cfg,
                         const LrSchedule& schedule, const TrainOptions& options);

/// Max relative error between the analytic gradient and central differences
/// over every coordinate when there are at most `max_coords` of them, else a
/// random subset of that size. Relative error is |fd - g| / max(|fd|, |g|, tiny)
/// with tiny = 1e-3 * RMS of the checked analytic entries, so coordinates whose
/// gradient is negligible are judged against the gradient's overall scale.
double finite_diff_check(const Problem& problem, std::span<const Matrix> point, double h,
                         RngStream& rng, std::size_t max_coords = 200);

/// CSV schema: step,loss,grad_norm,param,rank,xi,clipped,us (one row per step and parameter).
void write_records_csv(std::ostream& out, const std::vector<TrainRecord>& records);

std::string format_double(double x);

}  // namespace adapprox
