#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "adapprox/bench.hpp"
#include "adapprox/lowrank.hpp"

using namespace adapprox;

namespace {

std::size_t numerical_rank(const Matrix& a, double rel) {
    const auto sv = singular_values(a).values;
    std::size_t r = 0;
    for (double x : sv) r += x > rel * sv[0];
    return r;
}

std::vector<Matrix> random_point(const Problem& p, RngStream& rng, double s) {
    std::vector<Matrix> w;
    for (const auto& sh : p.shapes()) w.push_back(scale(gaussian_matrix(sh.rows, sh.cols, rng), s));
    return w;
}

double worst_fd(const Problem& p, double s, std::uint64_t seed) {
    RngStream rng(seed);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const auto w = random_point(p, rng, s);
        worst = std::max(worst, finite_diff_check(p, w, 1e-6, rng));
    }
    return worst;
}

// Corrupts one gradient entry by +10%.
class Corrupted : public Problem {
public:
    explicit Corrupted(std::unique_ptr<Problem> inner) : inner_(std::move(inner)) {}
    std::string name() const override { return "corrupted"; }
    std::vector<Optimizer::Shape> shapes() const override { return inner_->shapes(); }
    std::vector<Matrix> initial_weights() const override { return inner_->initial_weights(); }
    double evaluate(std::span<const Matrix> w, std::span<Matrix> g,
                    std::span<const std::size_t> b) const override {
        const double f = inner_->evaluate(w, g, b);
        if (!g.empty()) g[0](0, 0) *= 1.1;
        return f;
    }
    long double loss_extended(std::span<const Matrix> w) const override { return inner_->loss_extended(w); }

private:
    std::unique_ptr<Problem> inner_;
};

AdapproxConfig bench_config() {
    AdapproxConfig cfg;
    cfg.factor_min_dim = 16;
    return cfg;
}

}  // namespace

TEST_CASE("finite differences: quadratic, logreg, mlp") {
    QuadraticSpec q;
    q.m = 12;
    q.n = 10;
    q.spectrum = {3.0, 1.0, 0.2};
    q.floor = 0.01;
    q.target_noise = 0.5;
    CHECK(worst_fd(*problem_quadratic(q), 1.0, 1) < 1e-7);

    LogRegSpec l;
    l.n_samples = 64;
    l.n_features = 6;
    l.n_classes = 4;
    CHECK(worst_fd(*problem_logreg(l), 0.5, 2) < 1e-5);

    MlpSpec m;
    m.n_in = 5;
    m.n_hidden = 12;
    m.n_out = 3;
    m.n_samples = 32;
    CHECK(worst_fd(*problem_mlp(m), 0.5, 3) < 1e-4);
}

TEST_CASE("finite differences: a corrupted gradient is detected") {
    LogRegSpec l;
    l.n_samples = 64;
    l.n_features = 6;
    l.n_classes = 4;
    const Corrupted bad(problem_logreg(l));
    RngStream rng(4);
    const auto w = random_point(bad, rng, 0.5);
    // every coordinate is checked: 4 x 7 < 200
    CHECK(finite_diff_check(bad, w, 1e-6, rng) > 0.05);
    CHECK_THROWS(finite_diff_check(bad, w, 0.0, rng));
    CHECK_THROWS(finite_diff_check(bad, w, 1e-6, rng, 50));
}

TEST_CASE("quadratic: zero at the target, curvature structure") {
    QuadraticSpec q;
    q.m = 8;
    q.n = 6;
    q.spectrum = {2.0, 1.0};
    q.target_noise = 0.3;
    const auto p = problem_quadratic(q);
    // W = W*: recover the target from the gradient at zero, g = -s * W*
    const auto g0 = p->gradient(p->initial_weights());
    const Matrix s = quadratic_curvature(q);
    Matrix target(8, 6);
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (s.data()[i] > 0.0) target.data()[i] = -g0[0].data()[i] / s.data()[i];  // zero curvature: any value is optimal
    }
    const std::vector<Matrix> at{target};
    CHECK(p->loss(at) < 1e-28);
    CHECK(max_abs(p->gradient(at)[0]) < 1e-14);

    q.spectrum = {1.0};
    const Matrix s1 = quadratic_curvature(q);
    CHECK(numerical_rank(s1, 1e-12) == 1);
    q.spectrum = {1.0, 1.0, 1.0, 1.0, 1.0};
    CHECK(numerical_rank(quadratic_curvature(q), 1e-12) == 5);
    q.spectrum = {1.0, -1.0};
    CHECK_THROWS(quadratic_curvature(q));
}

TEST_CASE("logreg: ln 2 at zero weights on two balanced classes") {
    LogRegSpec l;
    l.n_classes = 2;
    l.n_samples = 100;
    const auto p = problem_logreg(l);
    CHECK(p->loss(p->initial_weights()) == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
    CHECK(p->sample_count() == 100);
    l.n_classes = 1;
    CHECK_THROWS(problem_logreg(l));
}

TEST_CASE("logreg: full-batch AdamW reaches high training accuracy") {
    LogRegSpec l;
    l.label_noise = 0.0;
    l.seed = 1;
    const auto p = problem_logreg(l);
    TrainOptions o;
    o.steps = 2000;
    const LrSchedule s{1e-2, 1e-3, 100, 2000};
    AdapproxConfig cfg;
    cfg.weight_decay = 0.0;
    const auto r = run_training(*p, OptimizerKind::adamw, cfg, s, o);
    REQUIRE_FALSE(r.diverged);
    CHECK(*p->accuracy(r.final_weights) > 0.95);
}

TEST_CASE("mlp: zero teacher and zero init give zero loss and gradient") {
    MlpSpec m;
    m.n_in = 4;
    m.n_hidden = 8;
    m.n_out = 3;
    m.n_samples = 16;
    m.teacher_scale = 0.0;
    m.noise = 0.0;
    m.init_scale = 0.0;
    const auto p = problem_mlp(m);
    const auto w = p->initial_weights();
    CHECK(w.size() == 4);
    CHECK(p->loss(w) == 0.0);
    for (const auto& g : p->gradient(w)) CHECK(max_abs(g) == 0.0);
}

TEST_CASE("lr schedule: endpoints, midpoint, bounds") {
    const LrSchedule s{1e-2, 1e-3, 10, 110};
    CHECK(s.lr_at(10) == doctest::Approx(1e-2).epsilon(1e-15));
    CHECK(s.lr_at(110) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(s.lr_at(60) == doctest::Approx(5.5e-3).epsilon(1e-12));
    CHECK(s.lr_at(1) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK_THROWS_AS(s.lr_at(0), std::out_of_range);
    CHECK_THROWS_AS(s.lr_at(111), std::out_of_range);
    double prev = s.peak;
    for (std::uint64_t t = 1; t <= 110; ++t) {
        const double a = s.lr_at(t);
        CHECK(a >= 0.0);
        CHECK(a <= s.peak);
        if (t > 10) {
            CHECK(a >= s.min);
            CHECK(a <= prev);
            prev = a;
        }
    }
}

TEST_CASE("run_training: deterministic record streams") {
    LogRegSpec l;
    l.n_samples = 256;
    l.seed = 3;
    const auto p = problem_logreg(l);
    TrainOptions o;
    o.steps = 60;
    o.seed = 9;
    o.batch_size = 32;
    const LrSchedule s{1e-2, 1e-3, 5, 60};
    auto csv = [&](std::uint64_t seed) {
        o.seed = seed;
        std::ostringstream out;
        write_records_csv(out, run_training(*p, OptimizerKind::adapprox, bench_config(), s, o).records);
        return out.str();
    };
    const std::string a = csv(9);
    CHECK(a == csv(9));
    CHECK(a != csv(10));
}

TEST_CASE("run_training: rank-1 curvature keeps k = 1") {
    QuadraticSpec q;
    q.spectrum = {1.0};
    const auto p = problem_quadratic(q);
    TrainOptions o;
    o.steps = 200;
    o.check_invariants = true;
    const auto r = run_training(*p, OptimizerKind::adapprox, bench_config(), {1e-2, 1e-3, 10, 200}, o);
    REQUIRE(r.records.size() == 200);
    for (const auto& rec : r.records) {
        REQUIRE(rec.params.size() == 1);
        CHECK(rec.params[0].rank == 1);
        if (rec.params[0].xi) CHECK(*rec.params[0].xi <= 0.01);
    }
}

TEST_CASE("run_training: five dominant curvature blocks drive k to at least 5") {
    QuadraticSpec q;
    q.spectrum = {1.0, 1.0, 1.0, 1.0, 1.0};
    const auto p = problem_quadratic(q);
    TrainOptions o;
    o.steps = 100;
    o.check_invariants = true;
    const auto r = run_training(*p, OptimizerKind::adapprox, bench_config(), {1e-2, 1e-3, 10, 100}, o);
    // the first adaptation step grows the rank from k_init
    for (const auto& rec : r.records) CHECK(rec.params[0].rank >= 5);
}

TEST_CASE("run_training: zero-gradient problem has a flat loss curve") {
    MlpSpec m;
    m.n_in = 4;
    m.n_hidden = 8;
    m.n_out = 3;
    m.n_samples = 16;
    m.teacher_scale = 0.0;
    m.noise = 0.0;
    m.init_scale = 0.0;
    const auto p = problem_mlp(m);
    TrainOptions o;
    o.steps = 30;
    for (auto kind : {OptimizerKind::adamw, OptimizerKind::adafactor, OptimizerKind::adapprox}) {
        const auto r = run_training(*p, kind, AdapproxConfig{}, {1e-2, 1e-3, 3, 30}, o);
        for (const auto& rec : r.records) CHECK(rec.loss == 0.0);
        CHECK(r.final_loss == 0.0);
    }
}

TEST_CASE("run_training: divergence guard reports instead of crashing") {
    QuadraticSpec q;
    q.spectrum = {1e8};
    const auto p = problem_quadratic(q);
    AdapproxConfig cfg;
    cfg.clip_d = 1e30;  // effectively no clipping
    cfg.beta1 = 0.0;
    TrainOptions o;
    o.steps = 50;
    const auto r = run_training(*p, OptimizerKind::adamw, cfg, {1e7, 1e7, 0, 50}, o);
    CHECK(r.diverged);
    CHECK(std::isinf(r.final_loss));
    CHECK(r.diagnostic.find("diverged at step") != std::string::npos);
    CHECK(r.records.size() < 50);
}

TEST_CASE("run_training: steps_to_threshold uses the evaluation points") {
    QuadraticSpec q;
    const auto p = problem_quadratic(q);
    TrainOptions o;
    o.steps = 100;
    o.eval_every = 10;
    const auto r = run_training(*p, OptimizerKind::adamw, AdapproxConfig{}, {0.05, 0.005, 5, 100}, o);
    REQUIRE(r.evals.size() == 10);
    CHECK(r.evals.back().step == 100);
    CHECK(r.evals.back().loss == r.final_loss);
    const auto hit = r.steps_to_threshold(r.evals[4].loss);
    REQUIRE(hit.has_value());
    CHECK(*hit <= 50);
    CHECK(*hit % 10 == 0);
    CHECK_FALSE(r.steps_to_threshold(-1.0).has_value());
    CHECK_THROWS(run_training(*p, OptimizerKind::adamw, AdapproxConfig{}, {0.05, 0.005, 5, 50}, o));
}

TEST_CASE("records csv: header, one row per step and parameter, empty n/a cells") {
    MlpSpec m;
    m.n_in = 16;
    m.n_hidden = 32;
    m.n_out = 16;
    m.n_samples = 16;
    const auto p = problem_mlp(m);
    TrainOptions o;
    o.steps = 12;
    const auto r = run_training(*p, OptimizerKind::adapprox, bench_config(), {1e-2, 1e-3, 2, 12}, o);
    std::ostringstream out;
    write_records_csv(out, r.records);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,loss,grad_norm,param,rank,xi,clipped,us");
    std::size_t rows = 0;
    bool saw_dense = false, saw_xi = false;
    while (std::getline(in, line)) {
        ++rows;
        std::vector<std::string> f;
        std::stringstream fields(line);
        for (std::string cell; std::getline(fields, cell, ',');) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        REQUIRE(f.size() == 8);
        CHECK(line.find('\r') == std::string::npos);
        CHECK(f[7] == "0");
        if (f[3] == "b1") saw_dense = saw_dense || (f[4].empty() && f[5].empty());
        if (f[3] == "W1") CHECK(f[5].empty() == (f[0] != "1" && f[0] != "11"));
        if (f[3] == "W1" && f[0] == "11") saw_xi = !f[5].empty() && !f[4].empty();
    }
    CHECK(rows == 12 * 4);
    CHECK(saw_dense);
    CHECK(saw_xi);
    CHECK(format_double(0.1) == "0.1");
    CHECK(format_double(1e-300) == "1e-300");
}
