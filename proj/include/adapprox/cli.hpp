#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "adapprox/bench.hpp"
#include "adapprox/optim.hpp"

namespace adapprox::cli {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct KeyInfo {
    std::string name;
    std::string default_value;
    std::string help;
};

/// Flat key/value run configuration. Every key has a default; unknown keys
/// are rejected. Later sources win: defaults, then the config file, then
/// command-line overrides.
class Settings {
public:
    Settings();

    static const std::vector<KeyInfo>& keys();
    static bool known(const std::string& key);

    // `where` names the source for diagnostics, e.g. "run.cfg:4" or "--steps".
    void set(const std::string& key, const std::string& value, const std::string& where = "");
    // Lines of `key = value`; '#' starts a comment.
    void load_file(const std::string& path);
    void load_stream(std::istream& in, const std::string& origin);

    const std::string& str(const std::string& key) const;
    double num(const std::string& key) const;
    std::size_t count(const std::string& key) const;
    bool flag(const std::string& key) const;
    std::vector<double> list(const std::string& key) const;
    std::vector<std::uint64_t> seeds() const;
    std::vector<OptimizerKind> optimizers() const;
    const std::map<std::string, std::string>& values() const { return values_; }

    AdapproxConfig optimizer_config() const;
    std::unique_ptr<Problem> problem(std::uint64_t seed) const;
    LrSchedule schedule() const;
    TrainOptions train_options(std::uint64_t seed) const;

private:
    std::map<std::string, std::string> values_;
};

struct Globals {
    std::string out_dir = ".";
    std::size_t threads = 1;
};

// Commands return the process exit code and write their artifacts under g.out_dir.
int cmd_approx(const Settings& s, const Globals& g, std::ostream& log);
int cmd_train(const Settings& s, const Globals& g, std::ostream& log);
int cmd_memory(const Settings& s, const Globals& g, std::ostream& log);
int cmd_ablate(const Settings& s, const Globals& g, std::ostream& log);

/// Full command line entry point: `adapprox <command> [--key value ...]`.
/// Exit codes: 0 success, 1 a run failed or a verdict did not pass, 2 usage or config error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace adapprox::cli
