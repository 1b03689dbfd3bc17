#include "adapprox/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "adapprox/lowrank.hpp"
#include "adapprox/memory.hpp"

namespace adapprox::cli {

using json = nlohmann::json;

namespace {

const std::vector<KeyInfo> kKeys = {
    // run
    {"problem", "logreg", "quadratic | logreg | mlp"},
    {"opt", "adapprox", "comma list of adamw, adafactor, adapprox"},
    {"steps", "2000", "optimizer steps per run"},
    {"seeds", "1", "comma list of seeds; each seed fixes the problem instance and the run"},
    {"lr", "0.01", "peak learning rate"},
    {"lr_min", "0.001", "final learning rate of the cosine decay"},
    {"warmup", "100", "linear warmup steps"},
    {"batch_size", "64", "mini-batch size for data problems; 0 = full batch"},
    {"eval_every", "10", "full-objective evaluation interval in steps"},
    {"loss_threshold", "", "loss level for steps-to-threshold in train summaries (empty = none)"},
    {"timing", "false", "record wall-clock times (makes outputs non-reproducible)"},
    // quadratic
    {"m", "64", "quadratic rows"},
    {"n", "64", "quadratic columns"},
    {"spectrum", "1", "comma list of curvature block scales"},
    {"spread", "0", "range of the rank-1 curvature profile inside each block; 0 = U[0.5, 1.5]"},
    {"floor", "0", "curvature outside the blocks"},
    {"target_offset", "1", "mean of the quadratic target"},
    {"target_noise", "0", "std of the quadratic target"},
    // logreg / mlp
    {"n_samples", "1024", "data points"},
    {"n_features", "32", "logreg features"},
    {"n_classes", "8", "logreg classes"},
    {"label_noise", "0.05", "logreg label flip probability"},
    {"teacher_scale", "1", "teacher weight scale"},
    {"n_in", "16", "mlp inputs"},
    {"n_hidden", "256", "mlp hidden units"},
    {"n_out", "16", "mlp outputs"},
    {"teacher_hidden", "16", "mlp teacher hidden units"},
    {"noise", "0.1", "mlp target noise std"},
    {"init_scale", "1", "mlp init scale"},
    // optimizer
    {"beta1", "0.9", "first-moment decay; 0 disables the first moment"},
    {"beta2", "0.999", "second-moment decay"},
    {"epsilon", "1e-8", "denominator guard"},
    {"weight_decay", "0.1", "decoupled weight decay"},
    {"clip_d", "1", "RMS clipping threshold; inf disables"},
    {"guidance", "false", "cosine-similarity guidance"},
    {"guidance_clamp", "10", "bound on the guidance factor; inf leaves it unbounded"},
    {"k_init", "1", "initial rank"},
    {"k_max_fraction", "0.25", "k_max as a fraction of min(m, n)"},
    {"xi_thresh", "0.01", "target relative approximation error"},
    {"delta_s", "10", "steps between rank searches"},
    {"power_iters", "5", "power iterations l"},
    {"oversample", "5", "oversampling p"},
    {"eta", "200", "growth function scale"},
    {"omega", "-10", "growth function slope"},
    {"phi", "2.5", "growth function offset"},
    {"tau", "9", "growth function shift"},
    {"factor_min_dim", "16", "matrices with a smaller side keep a dense second moment"},
    {"incremental_growth", "false", "grow the factors incrementally instead of recomputing"},
    // approx
    {"matrix", "", "matrix text file for approx (empty = synthetic)"},
    {"profile", "geometric", "synthetic spectrum: geometric | flat | dominant | rank1"},
    {"rows", "64", "synthetic matrix rows"},
    {"cols", "64", "synthetic matrix columns"},
    {"decay", "0.7", "geometric ratio of the synthetic spectrum"},
    {"dominant", "5", "number of equal dominant values for the dominant profile"},
    {"tail", "0.001", "scale of the spectrum tail behind the dominant values"},
    {"k_from", "1", "smallest rank for approx"},
    {"k_to", "16", "largest rank for approx"},
    {"trials", "5", "approx trials per rank"},
    // memory
    {"manifest", "", "shape manifest JSON"},
    {"rank_mode", "both", "k_init | k_max | both"},
    // ablate
    {"which", "clip", "clip | beta1 | guidance"},
    {"threshold_factor", "10", "beta1 ablation: threshold = factor x final AdamW loss"},
    {"win_rate_min", "0.8", "clip ablation: required win rate"},
};

std::string where_suffix(const std::string& where) { return where.empty() ? "" : " (" + where + ")"; }

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::stringstream in(s);
    for (std::string p; std::getline(in, p, sep);) {
        p = trim(p);
        if (!p.empty()) parts.push_back(p);
    }
    return parts;
}

double parse_double(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    if (t == "inf" || t == "+inf") return std::numeric_limits<double>::infinity();
    double v = 0.0;
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || res.ec != std::errc{} || res.ptr != t.data() + t.size()) {
        throw ConfigError("key '" + key + "': not a number: '" + text + "'");
    }
    return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    std::uint64_t v = 0;
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || res.ec != std::errc{} || res.ptr != t.data() + t.size()) {
        throw ConfigError("key '" + key + "': not a non-negative integer: '" + text + "'");
    }
    return v;
}

json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::filesystem::path output_path(const Globals& g, const std::string& name) {
    std::filesystem::create_directories(g.out_dir);
    return std::filesystem::path(g.out_dir) / name;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Runs f(0..n-1) on up to `threads` workers. The first exception is rethrown.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F f) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    f(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// Optimizer-state elements at the largest rank each parameter reached.
std::uint64_t peak_state_elements(const Problem& p, OptimizerKind kind, const AdapproxConfig& cfg,
                                  const TrainResult& r) {
    const auto shapes = p.shapes();
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const std::uint64_t m = shapes[i].rows, n = shapes[i].cols;
        std::size_t rank = 0;
        for (const auto& rec : r.records) rank = std::max(rank, rec.params[i].rank);
        if (kind == OptimizerKind::adamw || cfg.beta1 > 0.0) total += m * n;
        if (kind == OptimizerKind::adamw || rank == 0) {
            total += m * n;
        } else {
            total += rank * (m + n);
        }
    }
    return total;
}

struct RunOutcome {
    OptimizerKind kind;
    std::uint64_t seed;
    TrainResult result;
    std::uint64_t state_elements = 0;
};

RunOutcome train_one(const Settings& s, OptimizerKind kind, const AdapproxConfig& cfg,
                     std::uint64_t seed) {
    const auto problem = s.problem(seed);
    RunOutcome out{kind, seed, run_training(*problem, kind, cfg, s.schedule(), s.train_options(seed)), 0};
    out.state_elements = peak_state_elements(*problem, kind, cfg, out.result);
    return out;
}

}  // namespace

Settings::Settings() {
    for (const auto& k : kKeys) values_[k.name] = k.default_value;
}

const std::vector<KeyInfo>& Settings::keys() { return kKeys; }

bool Settings::known(const std::string& key) {
    return std::any_of(kKeys.begin(), kKeys.end(), [&](const KeyInfo& k) { return k.name == key; });
}

void Settings::set(const std::string& key, const std::string& value, const std::string& where) {
    if (!known(key)) throw ConfigError("unknown key '" + key + "'" + where_suffix(where));
    values_[key] = trim(value);
}

void Settings::load_stream(std::istream& in, const std::string& origin) {
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        if (!known(key)) throw ConfigError(where + ": unknown key '" + key + "'");
        set(key, line.substr(eq + 1), where);
    }
}

void Settings::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path + "'");
    load_stream(f, path);
}

const std::string& Settings::str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
}

double Settings::num(const std::string& key) const { return parse_double(key, str(key)); }

std::size_t Settings::count(const std::string& key) const {
    return static_cast<std::size_t>(parse_uint(key, str(key)));
}

bool Settings::flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<double> Settings::list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& p : split(str(key), ',')) out.push_back(parse_double(key, p));
    if (out.empty()) throw ConfigError("key '" + key + "': empty list");
    return out;
}

std::vector<std::uint64_t> Settings::seeds() const {
    std::vector<std::uint64_t> out;
    for (const auto& p : split(str("seeds"), ',')) out.push_back(parse_uint("seeds", p));
    if (out.empty()) throw ConfigError("key 'seeds': empty list");
    return out;
}

std::vector<OptimizerKind> Settings::optimizers() const {
    std::vector<OptimizerKind> out;
    for (const auto& p : split(str("opt"), ',')) {
        try {
            out.push_back(parse_optimizer_kind(p));
        } catch (const std::exception&) {
            throw ConfigError("key 'opt': unknown optimizer '" + p + "'");
        }
    }
    if (out.empty()) throw ConfigError("key 'opt': empty list");
    return out;
}

AdapproxConfig Settings::optimizer_config() const {
    AdapproxConfig cfg;
    cfg.beta1 = num("beta1");
    cfg.beta2 = num("beta2");
    cfg.epsilon = num("epsilon");
    cfg.weight_decay = num("weight_decay");
    cfg.clip_d = num("clip_d");
    cfg.cosine_guidance = flag("guidance");
    const double gc = num("guidance_clamp");
    cfg.guidance_clamp = std::isinf(gc) ? std::nullopt : std::optional<double>(gc);
    cfg.rank_policy.k_init = count("k_init");
    cfg.rank_policy.k_max_fraction = num("k_max_fraction");
    cfg.rank_policy.xi_thresh = num("xi_thresh");
    cfg.rank_policy.delta_s = count("delta_s");
    cfg.rank_policy.eta = num("eta");
    cfg.rank_policy.omega = num("omega");
    cfg.rank_policy.phi = num("phi");
    cfg.rank_policy.tau = num("tau");
    cfg.power_iters = count("power_iters");
    cfg.oversample = count("oversample");
    cfg.factor_min_dim = count("factor_min_dim");
    cfg.incremental_rank_growth = flag("incremental_growth");
    try {
        cfg.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("optimizer settings: ") + e.what());
    }
    return cfg;
}

std::unique_ptr<Problem> Settings::problem(std::uint64_t seed) const {
    const std::string& name = str("problem");
    try {
        if (name == "quadratic") {
            QuadraticSpec q;
            q.m = count("m");
            q.n = count("n");
            q.spectrum = list("spectrum");
            q.spread = num("spread");
            q.floor = num("floor");
            q.target_offset = num("target_offset");
            q.target_noise = num("target_noise");
            q.seed = seed;
            return problem_quadratic(q);
        }
        if (name == "logreg") {
            LogRegSpec l;
            l.n_samples = count("n_samples");
            l.n_features = count("n_features");
            l.n_classes = count("n_classes");
            l.label_noise = num("label_noise");
            l.teacher_scale = num("teacher_scale");
            l.seed = seed;
            return problem_logreg(l);
        }
        if (name == "mlp") {
            MlpSpec m;
            m.n_in = count("n_in");
            m.n_hidden = count("n_hidden");
            m.n_out = count("n_out");
            m.n_samples = count("n_samples");
            m.teacher_hidden = count("teacher_hidden");
            m.teacher_scale = num("teacher_scale");
            m.noise = num("noise");
            m.init_scale = num("init_scale");
            m.seed = seed;
            return problem_mlp(m);
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("problem settings: ") + e.what());
    }
    throw ConfigError("key 'problem': unknown problem '" + name + "'");
}

LrSchedule Settings::schedule() const {
    return LrSchedule{num("lr"), num("lr_min"), count("warmup"), count("steps")};
}

TrainOptions Settings::train_options(std::uint64_t seed) const {
    TrainOptions o;
    o.steps = count("steps");
    if (o.steps < 1) throw ConfigError("key 'steps': must be >= 1");
    o.seed = seed;
    o.batch_size = count("batch_size");
    o.eval_every = count("eval_every");
    o.record_timing = flag("timing");
    return o;
}

// ---------------------------------------------------------------- approx

namespace {

Matrix synthetic_matrix(const Settings& s, RngStream& rng) {
    const std::size_t m = s.count("rows"), n = s.count("cols");
    const std::size_t r = std::min(m, n);
    const std::string& profile = s.str("profile");
    if (profile == "rank1") {
        // non-negative, like a second moment
        Matrix u = gaussian_matrix(m, 1, rng), v = gaussian_matrix(n, 1, rng);
        for (double& x : u.data()) x = std::abs(x);
        for (double& x : v.data()) x = std::abs(x);
        return matmul_nt(u, v);
    }
    if (profile == "dominant") {
        // equal non-negative rank-1 blocks on a permuted block diagonal, plus a small non-negative tail
        const std::size_t d = s.count("dominant");
        if (d < 1 || d > r) throw ConfigError("key 'dominant': must lie in [1, min(rows, cols)]");
        Matrix a(m, n);
        std::vector<std::size_t> rp(m), cp(n);
        for (std::size_t i = 0; i < m; ++i) rp[i] = i * d / m;
        for (std::size_t j = 0; j < n; ++j) cp[j] = j * d / n;
        Matrix x = gaussian_matrix(m, 1, rng), y = gaussian_matrix(n, 1, rng);
        for (double& v : x.data()) v = 0.5 + std::abs(v);
        for (double& v : y.data()) v = 0.5 + std::abs(v);
        for (std::size_t b = 0; b < d; ++b) {
            double nx = 0, ny = 0;
            for (std::size_t i = 0; i < m; ++i) nx += rp[i] == b ? x(i, 0) * x(i, 0) : 0.0;
            for (std::size_t j = 0; j < n; ++j) ny += cp[j] == b ? y(j, 0) * y(j, 0) : 0.0;
            const double norm = std::sqrt(nx * ny);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (rp[i] == b && cp[j] == b) a(i, j) = x(i, 0) * y(j, 0) / norm;
        }
        const double tail = s.num("tail");
        const Matrix noise = gaussian_matrix(m, n, rng);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a.data()[i] += tail * std::abs(noise.data()[i]) / std::sqrt(double(r));
        }
        return a;
    }
    std::vector<double> sigma(r, 1.0);
    if (profile == "geometric") {
        const double decay = s.num("decay");
        for (std::size_t i = 1; i < r; ++i) sigma[i] = sigma[i - 1] * decay;
    } else if (profile != "flat") {
        throw ConfigError("key 'profile': unknown profile '" + profile + "'");
    }
    return matrix_with_spectrum(m, n, sigma, rng);
}

bool non_negative(const Matrix& a) {
    return std::all_of(a.data().begin(), a.data().end(), [](double x) { return x >= 0.0; });
}

double rel_error(const Matrix& a, const FactorPair& f) {
    return frobenius_norm(sub(a, f.reconstruct())) / frobenius_norm(a);
}

}  // namespace

int cmd_approx(const Settings& s, const Globals& g, std::ostream& log) {
    const std::size_t k_from = s.count("k_from"), k_to = s.count("k_to"), trials = s.count("trials");
    if (k_from < 1 || k_to < k_from) throw ConfigError("keys 'k_from'/'k_to': need 1 <= k_from <= k_to");
    if (trials < 1) throw ConfigError("key 'trials': must be >= 1");
    const std::uint64_t seed = s.seeds().front();
    const bool timing = s.flag("timing");

    std::optional<Matrix> file_matrix;
    if (!s.str("matrix").empty()) {
        try {
            file_matrix = load_matrix_text(s.str("matrix"));
        } catch (const std::exception& e) {
            throw ConfigError(std::string("key 'matrix': ") + e.what());
        }
    }

    struct Cell {
        double err = 0.0, secs = 0.0;
        bool present = false;
    };
    const char* methods[] = {"srsi", "onerank", "svd_oracle"};
    const std::size_t nk = k_to - k_from + 1;
    std::vector<std::array<Cell, 3>> cells(nk);
    std::vector<std::string> notes;

    auto clock = [] { return std::chrono::steady_clock::now(); };
    auto secs = [](auto a, auto b) { return std::chrono::duration<double>(b - a).count(); };
    const RngStream root(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        RngStream mat_rng = root.fork(2 * t + 1);
        RngStream alg_rng = root.fork(2 * t + 2);
        const Matrix a = file_matrix ? *file_matrix : synthetic_matrix(s, mat_rng);
        if (k_to > std::min(a.rows(), a.cols())) throw ConfigError("key 'k_to': exceeds min(rows, cols)");
        const bool nonneg = non_negative(a);
        if (!nonneg && t == 0) notes.push_back("matrix has negative entries: onerank rows omitted");
        for (std::size_t ki = 0; ki < nk; ++ki) {
            const std::size_t k = k_from + ki;
            auto t0 = clock();
            const FactorPair f = srsi(a, SrsiParams{k, s.count("power_iters"), s.count("oversample")}, alg_rng);
            auto t1 = clock();
            cells[ki][0].err += rel_error(a, f) / double(trials);
            cells[ki][0].secs += secs(t0, t1) / double(trials);
            cells[ki][0].present = true;
            if (nonneg) {
                t0 = clock();
                const FactorPair o = onerank_factor(a);
                t1 = clock();
                cells[ki][1].err += rel_error(a, o) / double(trials);
                cells[ki][1].secs += secs(t0, t1) / double(trials);
                cells[ki][1].present = true;
            }
            t0 = clock();
            const SvdResult svd = truncated_svd_oracle(a, k);
            t1 = clock();
            cells[ki][2].err += rel_error(a, svd.factors) / double(trials);
            cells[ki][2].secs += secs(t0, t1) / double(trials);
            cells[ki][2].present = true;
        }
    }

    std::ostringstream csv;
    csv << "method,k,mean_rel_error,mean_seconds\n";
    for (std::size_t mi = 0; mi < 3; ++mi) {
        for (std::size_t ki = 0; ki < nk; ++ki) {
            const Cell& c = cells[ki][mi];
            if (!c.present) continue;
            csv << methods[mi] << ',' << k_from + ki << ',' << format_double(c.err) << ','
                << format_double(timing ? c.secs : 0.0) << '\n';
        }
    }
    const auto path = output_path(g, "approx.csv");
    write_text(path, csv.str());
    for (const auto& n : notes) log << "note: " << n << '\n';
    log << "wrote " << path.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------- train

int cmd_train(const Settings& s, const Globals& g, std::ostream& log) {
    const auto kinds = s.optimizers();
    const auto seeds = s.seeds();
    const AdapproxConfig cfg = s.optimizer_config();
    const bool has_threshold = !s.str("loss_threshold").empty();
    const double threshold = has_threshold ? s.num("loss_threshold") : 0.0;
    s.problem(seeds.front());  // surface problem errors before any run starts
    s.train_options(seeds.front());

    std::vector<std::pair<OptimizerKind, std::uint64_t>> jobs;
    for (auto k : kinds)
        for (auto seed : seeds) jobs.emplace_back(k, seed);
    std::vector<std::optional<RunOutcome>> results(jobs.size());
    parallel_for(jobs.size(), g.threads, [&](std::size_t i) {
        results[i] = train_one(s, jobs[i].first, cfg, jobs[i].second);
    });

    json summary;
    summary["schema"] = 1;
    summary["command"] = "train";
    summary["problem"] = s.str("problem");
    summary["config"] = s.values();
    summary["runs"] = json::array();
    bool ok = true;
    for (const auto& r : results) {
        const std::string file = "train_" + s.str("problem") + "_" + to_string(r->kind) + "_s" +
                                 std::to_string(r->seed) + ".csv";
        std::ostringstream csv;
        write_records_csv(csv, r->result.records);
        write_text(output_path(g, file), csv.str());

        json run;
        run["optimizer"] = to_string(r->kind);
        run["seed"] = r->seed;
        run["csv"] = file;
        run["final_loss"] = number_or_null(r->result.final_loss);
        run["diverged"] = r->result.diverged;
        run["diagnostic"] = r->result.diagnostic;
        run["mean_rank"] = r->result.mean_rank();
        run["peak_state_elements"] = r->state_elements;
        run["peak_state_bytes"] = r->state_elements * sizeof(double);
        if (has_threshold) {
            const auto hit = r->result.steps_to_threshold(threshold);
            run["loss_threshold"] = threshold;
            run["steps_to_threshold"] = hit ? json(*hit) : json(nullptr);
        }
        summary["runs"].push_back(run);
        if (r->result.diverged) {
            ok = false;
            log << to_string(r->kind) << " seed " << r->seed << ": " << r->result.diagnostic << '\n';
        } else {
            log << to_string(r->kind) << " seed " << r->seed << ": final loss "
                << format_double(r->result.final_loss) << '\n';
        }
    }
    write_json(output_path(g, "train_summary.json"), summary);
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------- memory

int cmd_memory(const Settings& s, const Globals& g, std::ostream& log) {
    if (s.str("manifest").empty()) throw ConfigError("key 'manifest': required for memory");
    ShapeManifest manifest;
    try {
        manifest = ShapeManifest::load(s.str("manifest"));
    } catch (const std::exception& e) {
        throw ConfigError(std::string("manifest: ") + e.what());
    }
    const std::string& mode = s.str("rank_mode");
    if (mode != "both" && mode != "k_init" && mode != "k_max") {
        throw ConfigError("key 'rank_mode': expected k_init, k_max or both");
    }
    const MemoryReport report = memory_report(manifest, s.optimizer_config());

    json j;
    j["schema"] = 1;
    j["command"] = "memory";
    j["manifest"] = std::filesystem::path(s.str("manifest")).filename().string();
    j["parameters"] = manifest.parameter_count();
    j["element_bytes"] = manifest.element_bytes;
    j["beta1"] = report.beta1;
    j["rows"] = json::array();

    std::ostringstream table;
    table << "parameters: " << manifest.parameter_count() << ", beta1 = " << format_double(report.beta1) << '\n';
    table << std::left << std::setw(20) << "optimizer" << std::right << std::setw(12) << "MB" << std::setw(12)
          << "% AdamW" << '\n';
    for (const auto& row : report.rows) {
        if (mode == "k_init" && row.label == "Adapprox (k_max)") continue;
        if (mode == "k_max" && row.label == "Adapprox (k_init)") continue;
        json r;
        r["optimizer"] = row.label;
        r["note"] = row.note;
        table << std::left << std::setw(20) << row.label << std::right;
        if (row.bytes) {
            r["bytes"] = *row.bytes;
            r["mb"] = to_mib(*row.bytes);
            r["percent_of_adamw"] = row.percent_of_adamw;
            table << std::fixed << std::setprecision(1) << std::setw(12) << to_mib(*row.bytes) << std::setw(11)
                  << row.percent_of_adamw << "%";
        } else {
            r["bytes"] = nullptr;
            r["mb"] = nullptr;
            r["percent_of_adamw"] = nullptr;
            table << std::setw(12) << "-" << std::setw(12) << "-";
        }
        if (!row.note.empty()) table << "  (" << row.note << ")";
        table << '\n';
        j["rows"].push_back(r);
    }
    write_json(output_path(g, "memory.json"), j);
    log << table.str();
    return 0;
}

// ---------------------------------------------------------------- ablate

int cmd_ablate(const Settings& s, const Globals& g, std::ostream& log) {
    const std::string which = s.str("which");
    const auto seeds = s.seeds();
    const AdapproxConfig base = s.optimizer_config();
    s.problem(seeds.front());
    s.train_options(seeds.front());

    struct Variant {
        std::string label;
        OptimizerKind kind;
        AdapproxConfig cfg;
    };
    std::vector<Variant> variants;
    if (which == "clip") {
        AdapproxConfig off = base;
        off.clip_d = std::numeric_limits<double>::infinity();
        variants = {{"clip", OptimizerKind::adapprox, base}, {"no_clip", OptimizerKind::adapprox, off}};
    } else if (which == "beta1") {
        if (!(base.beta1 > 0.0)) throw ConfigError("beta1 ablation needs beta1 > 0");
        AdapproxConfig off = base;
        off.beta1 = 0.0;
        off.cosine_guidance = false;
        variants = {{"beta1", OptimizerKind::adapprox, base},
                    {"no_beta1", OptimizerKind::adapprox, off},
                    {"adamw_reference", OptimizerKind::adamw, base}};
    } else if (which == "guidance") {
        if (!(base.beta1 > 0.0)) throw ConfigError("guidance ablation needs beta1 > 0");
        AdapproxConfig on = base, off = base;
        on.cosine_guidance = true;
        off.cosine_guidance = false;
        variants = {{"guidance", OptimizerKind::adapprox, on}, {"no_guidance", OptimizerKind::adapprox, off}};
    } else {
        throw ConfigError("key 'which': expected clip, beta1 or guidance");
    }

    const std::size_t nv = variants.size();
    std::vector<std::optional<RunOutcome>> results(seeds.size() * nv);
    parallel_for(results.size(), g.threads, [&](std::size_t i) {
        const Variant& v = variants[i % nv];
        results[i] = train_one(s, v.kind, v.cfg, seeds[i / nv]);
    });
    auto at = [&](std::size_t seed_i, std::size_t v) -> const TrainResult& { return results[seed_i * nv + v]->result; };

    const double inf = std::numeric_limits<double>::infinity();
    std::ostringstream csv;
    json verdict;
    json stats;
    bool pass = true;
    if (which == "clip") {
        csv << "seed,variant,final_loss,diverged\n";
        std::size_t wins = 0;
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            for (std::size_t v = 0; v < nv; ++v) {
                csv << seeds[i] << ',' << variants[v].label << ',' << format_double(at(i, v).final_loss) << ','
                    << (at(i, v).diverged ? 1 : 0) << '\n';
            }
            wins += at(i, 0).final_loss < at(i, 1).final_loss;
        }
        const double rate = double(wins) / double(seeds.size());
        stats["wins"] = wins;
        stats["win_rate"] = rate;
        verdict["rule"] = "clip run has lower loss at the final step in at least win_rate_min of seeds";
        verdict["win_rate_min"] = s.num("win_rate_min");
        pass = rate >= s.num("win_rate_min");
    } else if (which == "beta1") {
        csv << "seed,variant,final_loss,threshold,steps_to_threshold,diverged\n";
        std::vector<double> on, off;
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            const double th = s.num("threshold_factor") * at(i, 2).final_loss;
            for (std::size_t v = 0; v < nv; ++v) {
                const auto hit = at(i, v).steps_to_threshold(th);
                csv << seeds[i] << ',' << variants[v].label << ',' << format_double(at(i, v).final_loss) << ','
                    << format_double(th) << ',';
                if (hit) csv << *hit;
                csv << ',' << (at(i, v).diverged ? 1 : 0) << '\n';
                if (v == 0) on.push_back(hit ? double(*hit) : inf);
                if (v == 1) off.push_back(hit ? double(*hit) : inf);
            }
        }
        const double mon = median(on), moff = median(off);
        stats["median_steps_beta1"] = number_or_null(mon);
        stats["median_steps_no_beta1"] = number_or_null(moff);
        verdict["rule"] = "median steps to threshold_factor x final AdamW loss is smaller with beta1";
        pass = mon < moff;
    } else {
        csv << "seed,variant,final_loss,diverged\n";
        std::vector<double> on, off;
        double max_gap = 0.0;
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            for (std::size_t v = 0; v < nv; ++v) {
                csv << seeds[i] << ',' << variants[v].label << ',' << format_double(at(i, v).final_loss) << ','
                    << (at(i, v).diverged ? 1 : 0) << '\n';
            }
            on.push_back(at(i, 0).final_loss);
            off.push_back(at(i, 1).final_loss);
            max_gap = std::max(max_gap, std::abs(on.back() - off.back()) / std::abs(off.back()));
        }
        stats["median_final_loss_guidance"] = number_or_null(median(on));
        stats["median_final_loss_no_guidance"] = number_or_null(median(off));
        stats["max_relative_gap"] = number_or_null(max_gap);
        verdict["rule"] = "none: guidance is reported, not judged; both variants must finish";
        for (std::size_t i = 0; i < results.size(); ++i) pass = pass && !results[i]->result.diverged;
    }
    verdict["pass"] = pass;

    json j;
    j["schema"] = 1;
    j["command"] = "ablate";
    j["which"] = which;
    j["problem"] = s.str("problem");
    j["seeds"] = seeds;
    j["config"] = s.values();
    j["stats"] = stats;
    j["verdict"] = verdict;
    write_text(output_path(g, "ablate_" + which + ".csv"), csv.str());
    write_json(output_path(g, "ablate_" + which + ".json"), j);
    log << "ablate " << which << ": " << stats.dump() << " -> " << (pass ? "pass" : "FAIL") << '\n';
    return pass ? 0 : 1;
}

// ---------------------------------------------------------------- entry

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Adapprox desk-scale experiments"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    std::optional<std::uint64_t> seed;
    std::string config_path;
    app.add_option("--seed", seed, "single seed; overrides the seeds key");
    app.add_option("--out", g.out_dir, "output directory");
    app.add_option("--config", config_path, "flat key = value config file");
    app.add_option("--threads", g.threads, "worker threads for independent runs")->check(CLI::PositiveNumber);

    std::map<std::string, std::string> overrides;
    const std::pair<const char*, const char*> commands[] = {
        {"approx", "low-rank approximation error versus rank"},
        {"train", "training runs with per-step telemetry"},
        {"memory", "optimizer-state memory from a shape manifest"},
        {"ablate", "paired runs differing in one optimizer feature"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        for (const auto& k : Settings::keys()) {
            sub->add_option_function<std::string>(
                "--" + k.name, [&overrides, key = k.name](const std::string& v) { overrides[key] = v; },
                k.help + " [" + k.default_value + "]");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        Settings s;
        if (!config_path.empty()) s.load_file(config_path);
        for (const auto& [k, v] : overrides) s.set(k, v, "--" + k);
        if (seed) s.set("seeds", std::to_string(*seed), "--seed");
        if (command == "approx") return cmd_approx(s, g, out);
        if (command == "train") return cmd_train(s, g, out);
        if (command == "memory") return cmd_memory(s, g, out);
        return cmd_ablate(s, g, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace adapprox::cli
