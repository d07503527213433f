#pragma once

#include <stdexcept>
#include <string>

namespace minstrel {

// Exit codes used by the CLI. Library code throws, main() maps to codes.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    config_error = 2,
    missing_artifact = 3,
    numeric_error = 4,
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct InputError : std::runtime_error {
    explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct MissingArtifactError : std::runtime_error {
    explicit MissingArtifactError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace minstrel
