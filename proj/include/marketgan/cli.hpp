// cli.hpp
//
// Batch pipeline behind the marketgan command: fixture, train, evaluate and
// backtest subcommands driven by a key=value configuration.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace marketgan::cli {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum ExitCode : int { kOk = 0, kCellFailures = 1, kConfigFailure = 2, kRuntimeFailure = 3 };

using KeyValues = std::map<std::string, std::string>;

/// Lines of `key = value`; `#` starts a comment. Duplicate keys are errors.
KeyValues parse_config(std::string_view text, const std::string& source = "<memory>");
KeyValues read_config_file(const std::string& path);

/// Every recognized key with its default value.
const KeyValues& default_config();

/// Deterministic 64-bit seed for a named stream.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream);

/// The seed streams a run uses.
const std::vector<std::string>& seed_streams();

class Config {
public:
    Config() = default;
    /// Defaults, then the file, then `overrides`. Unknown keys are errors.
    /// Seeds left at "auto" are derived from `seed`.
    static Config resolve(const KeyValues& file, const KeyValues& overrides);

    const std::string& str(const std::string& key) const;
    std::size_t size(const std::string& key) const;
    double real(const std::string& key) const;
    bool flag(const std::string& key) const;
    std::uint64_t u64(const std::string& key) const;
    std::vector<std::string> list(const std::string& key) const;
    std::vector<double> reals(const std::string& key) const;

    const KeyValues& values() const noexcept { return values_; }
    /// Sorted key=value lines.
    std::string dump() const;

private:
    KeyValues values_;
};

int cmd_fixture(const Config& c, std::ostream& log);
int cmd_train(const Config& c, std::ostream& log);
int cmd_evaluate(const Config& c, std::ostream& log);
int cmd_backtest(const Config& c, std::ostream& log);

/// Parses argv-style arguments (without the program name) and runs the
/// subcommand. Errors are reported on `err` and mapped to exit codes.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace marketgan::cli
