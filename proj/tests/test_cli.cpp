#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "adapprox/cli.hpp"

using namespace adapprox;
namespace fs = std::filesystem;

namespace {

struct Invocation {
    int code;
    std::string out, err;
};

Invocation invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "adapprox");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("adapprox_test_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream b;
    b << f.rdbuf();
    return b.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

// method -> k -> mean error
std::map<std::string, std::map<int, double>> read_approx(const fs::path& p) {
    std::map<std::string, std::map<int, double>> out;
    const auto rows = lines(slurp(p));
    REQUIRE(rows.front() == "method,k,mean_rel_error,mean_seconds");
    for (std::size_t i = 1; i < rows.size(); ++i) {
        std::stringstream in(rows[i]);
        std::string method, k, err;
        std::getline(in, method, ',');
        std::getline(in, k, ',');
        std::getline(in, err, ',');
        out[method][std::stoi(k)] = std::stod(err);
    }
    return out;
}

std::map<std::string, fs::path> files_in(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = e.path();
    return out;
}

}  // namespace

TEST_CASE("settings: defaults, file, overrides, unknown keys") {
    cli::Settings s;
    CHECK(s.count("steps") == 2000);
    CHECK(s.str("problem") == "logreg");
    for (const auto& k : cli::Settings::keys()) CHECK_FALSE(k.help.empty());

    std::istringstream file("# comment\nsteps = 50   # trailing\n\nlr=0.5\n");
    s.load_stream(file, "run.cfg");
    CHECK(s.count("steps") == 50);
    CHECK(s.num("lr") == 0.5);

    std::istringstream bad("steps = 5\nbeta3 = 0.5\n");
    try {
        s.load_stream(bad, "run.cfg");
        FAIL("expected an error");
    } catch (const cli::ConfigError& e) {
        CHECK(std::string(e.what()).find("beta3") != std::string::npos);
        CHECK(std::string(e.what()).find("run.cfg:2") != std::string::npos);
    }
    std::istringstream no_eq("steps 5\n");
    CHECK_THROWS_AS(s.load_stream(no_eq, "x"), cli::ConfigError);

    s.set("lr", "abc");
    CHECK_THROWS_WITH_AS(s.num("lr"), doctest::Contains("'lr'"), cli::ConfigError);
    s.set("clip_d", "inf");
    CHECK(std::isinf(s.optimizer_config().clip_d));
    s.set("opt", "adamw, adapprox");
    CHECK(s.optimizers().size() == 2);
    s.set("opt", "sgd");
    CHECK_THROWS_AS(s.optimizers(), cli::ConfigError);
    s.set("guidance", "maybe");
    CHECK_THROWS_AS(s.flag("guidance"), cli::ConfigError);
    s.set("problem", "resnet");
    CHECK_THROWS_AS(s.problem(1), cli::ConfigError);
}

TEST_CASE("train: row-count contract, shared initialization, summary") {
    const auto dir = scratch_dir("train");
    const auto r = invoke({"train", "--problem", "logreg", "--opt", "adapprox,adamw", "--steps", "2000", "--out",
                        dir.string()});
    REQUIRE(r.code == 0);
    const auto a = lines(slurp(dir / "train_logreg_adapprox_s1.csv"));
    const auto b = lines(slurp(dir / "train_logreg_adamw_s1.csv"));
    CHECK(a.size() == 2001);  // one parameter
    CHECK(b.size() == 2001);
    // the loss column of step 1 is the shared initial loss
    CHECK(a[1].substr(0, a[1].find(',', 2)) == b[1].substr(0, b[1].find(',', 2)));

    const auto j = nlohmann::json::parse(slurp(dir / "train_summary.json"));
    CHECK(j["schema"] == 1);
    CHECK(j["runs"].size() == 2);
    for (const auto& run : j["runs"]) {
        CHECK(run["diverged"] == false);
        CHECK(run["final_loss"].get<double>() > 0.0);
        CHECK(run["peak_state_bytes"].get<std::uint64_t>() > 0);
    }
}

TEST_CASE("train: mlp has one row per step and parameter") {
    const auto dir = scratch_dir("mlp");
    const auto r = invoke({"train", "--problem", "mlp", "--n_hidden", "32", "--n_samples", "64", "--steps", "15",
                        "--warmup", "2", "--out", dir.string(), "--loss_threshold", "100"});
    REQUIRE(r.code == 0);
    CHECK(lines(slurp(dir / "train_mlp_adapprox_s1.csv")).size() == 1 + 15 * 4);
    const auto j = nlohmann::json::parse(slurp(dir / "train_summary.json"));
    CHECK(j["runs"][0]["steps_to_threshold"] == 10);
}

TEST_CASE("train: config errors exit non-zero naming the key") {
    const auto dir = scratch_dir("config");
    std::ofstream(dir / "run.cfg") << "steps = 10\nbeta3 = 0.9\n";
    const auto r = invoke({"train", "--config", (dir / "run.cfg").string(), "--out", dir.string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("beta3") != std::string::npos);
    CHECK(r.err.find("run.cfg:2") != std::string::npos);

    const auto flag = invoke({"train", "--beta3", "0.9", "--out", dir.string()});
    CHECK(flag.code == 2);
    CHECK(flag.err.find("beta3") != std::string::npos);

    CHECK(invoke({"train", "--steps", "0", "--out", dir.string()}).code == 2);
    CHECK(invoke(std::vector<std::string>{}).code == 2);
    CHECK(invoke({"train", "--config", (dir / "missing.cfg").string()}).code == 2);
}

TEST_CASE("train: command-line values beat the config file") {
    const auto dir = scratch_dir("precedence");
    std::ofstream(dir / "run.cfg") << "steps = 10\nwarmup = 2\nproblem = quadratic\n";
    const auto r = invoke({"--config", (dir / "run.cfg").string(), "train", "--steps", "7", "--out", dir.string()});
    REQUIRE(r.code == 0);
    CHECK(lines(slurp(dir / "train_quadratic_adapprox_s1.csv")).size() == 8);
}

TEST_CASE("train: reruns and thread counts give byte-identical files") {
    const auto one = scratch_dir("idem1"), two = scratch_dir("idem2");
    const std::vector<std::string> base{"train", "--opt", "adamw,adafactor,adapprox", "--seeds", "1,2",
                                        "--steps", "120", "--n_samples", "256"};
    auto with = [&](const fs::path& d, const std::string& threads) {
        auto a = base;
        a.insert(a.end(), {"--out", d.string(), "--threads", threads});
        return invoke(a).code;
    };
    REQUIRE(with(one, "1") == 0);
    const auto first = files_in(one);
    std::map<std::string, std::string> content;
    for (const auto& [name, p] : first) content[name] = slurp(p);
    REQUIRE(with(one, "1") == 0);
    for (const auto& [name, p] : first) CHECK(slurp(p) == content[name]);
    REQUIRE(with(two, "3") == 0);
    for (const auto& [name, p] : first) CHECK(slurp(two / name) == content[name]);
    CHECK(first.size() == 7);
}

TEST_CASE("memory: hand-checked 2x2 manifest and schema") {
    const auto dir = scratch_dir("memory");
    std::ofstream(dir / "m.json") << R"({"params": [{"name": "w", "dims": [2, 2]}]})";
    const auto r = invoke({"memory", "--manifest", (dir / "m.json").string(), "--out", dir.string()});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(slurp(dir / "memory.json"));
    CHECK(j["schema"] == 1);
    CHECK(j["rows"][0]["optimizer"] == "AdamW");
    CHECK(j["rows"][0]["bytes"] == 32);
    bool came = false;
    for (const auto& row : j["rows"]) came = came || (row["optimizer"] == "CAME" && row["bytes"].is_null());
    CHECK(came);
    CHECK(r.out.find("CAME") != std::string::npos);

    std::ofstream(dir / "bad.json") << "{\"params\": [";
    CHECK(invoke({"memory", "--manifest", (dir / "bad.json").string(), "--out", dir.string()}).code == 2);
    CHECK(invoke({"memory", "--out", dir.string()}).code == 2);
}

TEST_CASE("approx: rank-1 input is recovered by every method") {
    const auto dir = scratch_dir("approx1");
    REQUIRE(invoke({"approx", "--profile", "rank1", "--k_to", "4", "--out", dir.string()}).code == 0);
    const auto t = read_approx(dir / "approx.csv");
    for (const auto& [method, ks] : t) {
        CHECK(ks.size() == 4);
        for (const auto& [k, e] : ks) CHECK(e < 1e-8);
    }
    CHECK(t.size() == 3);
}

TEST_CASE("approx: geometric spectrum tracks the oracle") {
    const auto dir = scratch_dir("approx2");
    REQUIRE(invoke({"approx", "--profile", "geometric", "--k_to", "16", "--out", dir.string()}).code == 0);
    const auto t = read_approx(dir / "approx.csv");
    CHECK(t.count("onerank") == 0);  // signed matrix
    double prev = 1e300;
    for (const auto& [k, e] : t.at("srsi")) {
        CHECK(e <= prev);
        prev = e;
        CHECK(e / t.at("svd_oracle").at(k) <= 1.10);
    }
}

TEST_CASE("approx: five equal dominant values") {
    const auto dir = scratch_dir("approx3");
    REQUIRE(invoke({"approx", "--profile", "dominant", "--k_to", "5", "--out", dir.string()}).code == 0);
    const auto t = read_approx(dir / "approx.csv");
    const auto& srsi = t.at("srsi");
    const auto& one = t.at("onerank");
    // rank-1 error is sqrt(4/5) of the norm for five equal values
    CHECK(srsi.at(1) == doctest::Approx(std::sqrt(0.8)).epsilon(0.01));
    CHECK(one.at(1) == doctest::Approx(srsi.at(1)).epsilon(0.01));
    CHECK(srsi.at(5) < 0.05);
    CHECK(one.at(5) == one.at(1));

    CHECK(invoke({"approx", "--matrix", (dir / "nope.txt").string(), "--out", dir.string()}).code == 2);
}

TEST_CASE("ablate: outputs, schema, guidance report") {
    const auto dir = scratch_dir("ablate");
    const auto r = invoke({"ablate", "--which", "guidance", "--problem", "quadratic", "--steps", "40", "--warmup",
                        "4", "--seeds", "1,2", "--out", dir.string()});
    CHECK(r.code == 0);
    const auto j = nlohmann::json::parse(slurp(dir / "ablate_guidance.json"));
    CHECK(j["schema"] == 1);
    CHECK(j["verdict"]["pass"] == true);
    CHECK(lines(slurp(dir / "ablate_guidance.csv")).size() == 1 + 2 * 2);

    const auto b = invoke({"ablate", "--which", "beta1", "--problem", "quadratic", "--steps", "40", "--warmup", "4",
                        "--seeds", "1", "--beta1", "0", "--out", dir.string()});
    CHECK(b.code == 2);
    CHECK(invoke({"ablate", "--which", "momentum", "--out", dir.string()}).code == 2);
}
