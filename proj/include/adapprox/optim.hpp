#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "adapprox/dense.hpp"
#include "adapprox/lowrank.hpp"
#include "adapprox/rng.hpp"

namespace adapprox {

enum class OptimizerKind { adamw, adafactor, adapprox };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& text);

/// Shared configuration for all three optimizers. AdamW reads only the
/// moment decays, epsilon and weight decay.
struct AdapproxConfig {
    double beta1 = 0.9;  // 0 disables the first moment
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // RMS clipping threshold d; +infinity disables clipping.
    double clip_d = 1.0;
    double weight_decay = 0.1;
    RankPolicy rank_policy{};
    std::size_t power_iters = 5;
    std::size_t oversample = 5;
    bool cosine_guidance = false;
    // Bound on the guidance factor, applied as [1/clamp, clamp]; nullopt leaves it unbounded.
    std::optional<double> guidance_clamp = 10.0;
    // Matrices with min(m, n) below this keep a dense second moment.
    std::size_t factor_min_dim = 128;
    bool incremental_rank_growth = false;

    void validate() const;
    bool factored(std::size_t rows, std::size_t cols) const {
        return std::min(rows, cols) >= factor_min_dim;
    }
};

/// Per-parameter optimizer state.
struct ParamState {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::optional<Matrix> first_moment;
    std::variant<FactorPair, Matrix> second_moment;
    std::size_t rank = 0;  // 0 on the dense path
    std::uint64_t step = 0;

    bool is_factored() const { return std::holds_alternative<FactorPair>(second_moment); }
    const FactorPair& factors() const { return std::get<FactorPair>(second_moment); }
    const Matrix& dense_second_moment() const { return std::get<Matrix>(second_moment); }

    bool operator==(const ParamState&) const = default;
};

ParamState make_state(std::string name, std::size_t rows, std::size_t cols, OptimizerKind kind,
                      const AdapproxConfig& cfg);

/// Diagnostics from one optimizer step.
struct StepStats {
    bool clipped = false;
    double update_rms = 0.0;          // RMS of the normalized update before clipping
    std::optional<double> xi;         // set on adaptation steps of the factored path
    std::size_t rank = 0;             // 0 on the dense path
    double clamp_magnitude = 0.0;     // largest negative entry removed from the reconstruction
    std::optional<double> cosine;     // guidance cosine when enabled
};

double rms(const Matrix& m);

/// First-moment scaling by 1 / (1 - theta + eps), theta the cosine between the
/// current clipped update and the running average.
Matrix cosine_guidance(const Matrix& m_hat, const Matrix& m_avg, double epsilon,
                       std::optional<double> clamp, double* theta_out = nullptr);

/// Bias-corrected Adam moments with decoupled weight decay. Updates `weights`
/// in place and advances state.step.
StepStats adamw_step(ParamState& state, Matrix& weights, const Matrix& grad, double lr,
                     const AdapproxConfig& cfg);

/// One Adapprox step: low-rank second moment refreshed by AS-RSI, RMS update
/// clipping, optional first moment and guidance, decoupled weight decay, no
/// bias correction.
StepStats adapprox_step(ParamState& state, Matrix& weights, const Matrix& grad, double lr,
                        const AdapproxConfig& cfg, RngStream& rng);

/// Same pipeline with the second moment compressed by the rank-1 row/column
/// estimator, applied to the update as well.
StepStats adafactor_baseline_step(ParamState& state, Matrix& weights, const Matrix& grad,
                                  double lr, const AdapproxConfig& cfg);

/// Owns the states and random streams for a list of parameters.
class Optimizer {
public:
    struct Shape {
        std::string name;
        std::size_t rows;
        std::size_t cols;
    };

    Optimizer(OptimizerKind kind, AdapproxConfig cfg, const std::vector<Shape>& shapes,
              std::uint64_t seed);

    std::vector<StepStats> step(std::span<Matrix> weights, std::span<const Matrix> grads,
                                double lr);

    OptimizerKind kind() const { return kind_; }
    const AdapproxConfig& config() const { return cfg_; }
    const std::vector<ParamState>& states() const { return states_; }
    std::vector<ParamState>& states() { return states_; }
    const std::vector<RngStream>& streams() const { return streams_; }
    std::vector<RngStream>& streams() { return streams_; }

private:
    OptimizerKind kind_;
    AdapproxConfig cfg_;
    std::vector<ParamState> states_;
    std::vector<RngStream> streams_;
};

// Versioned binary snapshot of a ParamState; begins with the magic "ADPX1".
void write_state(std::ostream& out, const ParamState& state);
ParamState read_state(std::istream& in);
std::string state_serialize(const ParamState& state);
ParamState state_deserialize(const std::string& bytes);

}  // namespace adapprox
