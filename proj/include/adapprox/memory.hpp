#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "adapprox/optim.hpp"

namespace adapprox {

struct ParamShape {
    std::string name;
    std::vector<std::size_t> dims;
};

/// Parameter inventory used for analytic optimizer-state accounting.
struct ShapeManifest {
    std::vector<ParamShape> params;
    std::size_t element_bytes = 4;

    // JSON: {"element_bytes": 4, "params": [{"name": "...", "dims": [m, n]}, ...]}
    // A bare array of {name, dims} entries is accepted too.
    static ShapeManifest parse_json(const std::string& text);
    static ShapeManifest load(const std::string& path);

    std::uint64_t parameter_count() const;
};

enum class RankMode { k_init, k_max };

/// Optimizer-state element count for the whole manifest.
///   AdamW:     2 m n                     (dense M and V)
///   Adafactor: [m n if beta1 > 0] + (m + n)
///   Adapprox:  [m n if beta1 > 0] + k (m + n), k = k_init or k_max
/// Parameters that are 1-D or below factor_min_dim keep a dense second moment.
/// Tensors with more than two dims are flattened to dims[0] x prod(rest).
std::uint64_t state_elements(const ShapeManifest& manifest, OptimizerKind kind,
                             const AdapproxConfig& cfg, RankMode mode = RankMode::k_init);

std::uint64_t state_bytes(const ShapeManifest& manifest, OptimizerKind kind,
                          const AdapproxConfig& cfg, RankMode mode = RankMode::k_init);

struct MemoryRow {
    std::string label;
    std::optional<std::uint64_t> bytes;  // nullopt when not computed
    double percent_of_adamw = 0.0;
    std::string note;
};

struct MemoryReport {
    double beta1 = 0.0;
    std::uint64_t adamw_bytes = 0;
    std::vector<MemoryRow> rows;

    const MemoryRow& row(const std::string& label) const;
};

/// Rows: AdamW, Adafactor, CAME (not computed), Adapprox (k_init), Adapprox (k_max).
MemoryReport memory_report(const ShapeManifest& manifest, const AdapproxConfig& cfg);

double to_mib(std::uint64_t bytes);

}  // namespace adapprox
