#include "adapprox/memory.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace adapprox {

namespace {

struct Flat {
    std::uint64_t rows;
    std::uint64_t cols;
    bool matrix;
};

Flat flatten(const ParamShape& p) {
    if (p.dims.empty()) throw std::invalid_argument("manifest entry '" + p.name + "' has no dims");
    for (std::size_t d : p.dims) {
        if (d == 0) throw std::invalid_argument("manifest entry '" + p.name + "' has a zero dim");
    }
    if (p.dims.size() == 1) return Flat{1, p.dims[0], false};
    std::uint64_t rest = 1;
    for (std::size_t i = 1; i < p.dims.size(); ++i) rest *= p.dims[i];
    return Flat{p.dims[0], rest, true};
}

ParamShape parse_entry(const nlohmann::json& j, std::size_t index) {
    const std::string where = "manifest entry " + std::to_string(index);
    if (!j.is_object()) throw std::runtime_error(where + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        if (key != "name" && key != "dims") {
            throw std::runtime_error(where + ": unknown key '" + key + "'");
        }
    }
    if (!j.contains("dims") || !j["dims"].is_array() || j["dims"].empty()) {
        throw std::runtime_error(where + ": 'dims' must be a non-empty array");
    }
    ParamShape p;
    p.name = j.value("name", "param" + std::to_string(index));
    for (const auto& d : j["dims"]) {
        if (!d.is_number_integer() || d.get<long long>() <= 0) {
            throw std::runtime_error(where + " ('" + p.name + "'): dims must be positive integers");
        }
        p.dims.push_back(d.get<std::size_t>());
    }
    return p;
}

}  // namespace

ShapeManifest ShapeManifest::parse_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("manifest: invalid JSON: ") + e.what());
    }
    ShapeManifest manifest;
    const nlohmann::json* entries = &doc;
    if (doc.is_object()) {
        for (const auto& [key, _] : doc.items()) {
            if (key != "params" && key != "element_bytes" && key != "note" && key != "name") {
                throw std::runtime_error("manifest: unknown key '" + key + "'");
            }
        }
        if (!doc.contains("params")) throw std::runtime_error("manifest: missing 'params'");
        entries = &doc["params"];
        if (doc.contains("element_bytes")) {
            const auto& eb = doc["element_bytes"];
            if (!eb.is_number_integer() || eb.get<long long>() <= 0) {
                throw std::runtime_error("manifest: element_bytes must be a positive integer");
            }
            manifest.element_bytes = eb.get<std::size_t>();
        }
    }
    if (!entries->is_array()) throw std::runtime_error("manifest: 'params' must be an array");
    for (std::size_t i = 0; i < entries->size(); ++i) {
        manifest.params.push_back(parse_entry((*entries)[i], i));
    }
    if (manifest.params.empty()) throw std::runtime_error("manifest: no parameters listed");
    return manifest;
}

ShapeManifest ShapeManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_json(buf.str());
}

std::uint64_t ShapeManifest::parameter_count() const {
    std::uint64_t total = 0;
    for (const auto& p : params) {
        const Flat f = flatten(p);
        total += f.rows * f.cols;
    }
    return total;
}

std::uint64_t state_elements(const ShapeManifest& manifest, OptimizerKind kind,
                             const AdapproxConfig& cfg, RankMode mode) {
    if (manifest.params.empty()) throw std::invalid_argument("memory accounting: empty manifest");
    const bool first = cfg.beta1 > 0.0;
    std::uint64_t total = 0;
    for (const auto& p : manifest.params) {
        const Flat f = flatten(p);
        const std::uint64_t size = f.rows * f.cols;
        if (kind == OptimizerKind::adamw) {
            total += 2 * size;
            continue;
        }
        if (first) total += size;
        if (!f.matrix || !cfg.factored(f.rows, f.cols)) {
            total += size;
            continue;
        }
        std::uint64_t k = 1;
        if (kind == OptimizerKind::adapprox) {
            const std::uint64_t k_max = cfg.rank_policy.k_max(f.rows, f.cols);
            k = mode == RankMode::k_max ? k_max : std::min<std::uint64_t>(cfg.rank_policy.k_init, k_max);
        }
        total += k * (f.rows + f.cols);
    }
    return total;
}

std::uint64_t state_bytes(const ShapeManifest& manifest, OptimizerKind kind,
                          const AdapproxConfig& cfg, RankMode mode) {
    return state_elements(manifest, kind, cfg, mode) * manifest.element_bytes;
}

const MemoryRow& MemoryReport::row(const std::string& label) const {
    for (const auto& r : rows) {
        if (r.label == label) return r;
    }
    throw std::out_of_range("memory report has no row '" + label + "'");
}

MemoryReport memory_report(const ShapeManifest& manifest, const AdapproxConfig& cfg) {
    MemoryReport report;
    report.beta1 = cfg.beta1;
    report.adamw_bytes = state_bytes(manifest, OptimizerKind::adamw, cfg);
    auto percent = [&](std::uint64_t b) {
        return 100.0 * static_cast<double>(b) / static_cast<double>(report.adamw_bytes);
    };
    auto add = [&](std::string label, std::uint64_t b) {
        report.rows.push_back(MemoryRow{std::move(label), b, percent(b), ""});
    };
    add("AdamW", report.adamw_bytes);
    add("Adafactor", state_bytes(manifest, OptimizerKind::adafactor, cfg));
    report.rows.push_back(MemoryRow{"CAME", std::nullopt, 0.0, "not computed (optimizer not implemented)"});
    add("Adapprox (k_init)", state_bytes(manifest, OptimizerKind::adapprox, cfg, RankMode::k_init));
    add("Adapprox (k_max)", state_bytes(manifest, OptimizerKind::adapprox, cfg, RankMode::k_max));
    return report;
}

double to_mib(std::uint64_t bytes) { return static_cast<double>(bytes) / (1024.0 * 1024.0); }

}  // namespace adapprox
